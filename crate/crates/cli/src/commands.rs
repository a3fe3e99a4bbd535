//! The offline subcommands: corpus tools, training, generation, evaluation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use ardm_core::bundle::Bundle;
use ardm_core::chat::{ChatConfig, ChatError, SessionStore};
use ardm_core::data::{
    delexicalize, normalize_times, read_jsonl, split, subsample, synth_corpus, write_jsonl, CorpusStats, DialogRecord,
    EntityDB, Prepare, SynthSpec, REQUESTABLE,
};
use ardm_core::decode::{batch_decode_filtered, self_play};
use ardm_core::eval::{evaluate, generation_job, EvalReport, EvalSetup};
use ardm_core::tokenizer::{turn_pieces, Role, Vocab};
use ardm_core::train::{train, EpochMetrics, TrainConfig};
use ardm_core::{ArdmParams, Dialog, ModelConfig, Preset};
use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Subcommand, Debug)]
pub enum DataCommand {
    /// Write a synthetic restaurant-domain corpus and its entity database.
    Synth {
        #[arg(long, default_value_t = 2000)]
        dialogs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        db: PathBuf,
    },
    /// Normalize times and replace database values with slot placeholders.
    Delex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-role corpus statistics as JSON.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        /// Delexicalize against this database first.
        #[arg(long)]
        db: Option<PathBuf>,
    },
}

pub fn data(cmd: DataCommand) -> anyhow::Result<()> {
    match cmd {
        DataCommand::Synth { dialogs, seed, out, db } => {
            let (records, entities) = synth_corpus(SynthSpec {
                n_dialogs: dialogs,
                grammar_seed: seed,
            })?;
            write_jsonl(&out, &records)?;
            entities.save(&db)?;
            eprintln!(
                "wrote {} dialogs to {} and the database to {}",
                records.len(),
                out.display(),
                db.display()
            );
        }
        DataCommand::Delex { corpus, db, out } => {
            let db = EntityDB::load(&db)?;
            let mut records = read_jsonl(&corpus)?;
            for r in &mut records {
                for t in &mut r.turns {
                    t.text = delexicalize(&normalize_times(&t.text), &db).0;
                }
            }
            write_jsonl(&out, &records)?;
            eprintln!("wrote {} dialogs to {}", records.len(), out.display());
        }
        DataCommand::Stats { corpus, db } => {
            let db = db.map(EntityDB::load).transpose()?;
            let dialogs = prepare(&read_jsonl(&corpus)?, db.as_ref())?;
            writeln!(
                std::io::stdout(),
                "{}",
                serde_json::to_string_pretty(&CorpusStats::of(&dialogs))?
            )?;
        }
    }
    Ok(())
}

fn prepare(records: &[DialogRecord], db: Option<&EntityDB>) -> anyhow::Result<Vec<Dialog>> {
    let prep = Prepare {
        db,
        ..Prepare::default()
    };
    Ok(records.iter().map(|r| r.to_dialog(&prep)).collect::<Result<_, _>>()?)
}

/// Everything `train` reads from its config file. The model's `vocab_size`
/// is the BPE target; the trained vocabulary's actual size replaces it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Train one parameter set for both roles instead of two.
    pub shared: bool,
    /// Keep this fraction of the training split.
    pub data_fraction: f64,
    /// Entity database for delexicalization, stored in the bundle.
    pub db: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            val_fraction: 0.1,
            split_seed: 0,
            shared: false,
            data_fraction: 1.0,
            db: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON training config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bundle directory; also receives `metrics.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn train_cmd(args: TrainArgs) -> anyhow::Result<Vec<EpochMetrics>> {
    let run: TrainRun = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainRun::default(),
    };
    let db = run.db.as_ref().map(EntityDB::load).transpose()?;
    let dialogs = prepare(&read_jsonl(&args.corpus)?, db.as_ref())?;
    let (train_set, val_set) = split(&dialogs, run.val_fraction, run.split_seed)?;
    let train_set = subsample(&train_set, run.data_fraction, run.split_seed)?;
    let pieces: Vec<String> = train_set
        .iter()
        .flat_map(|d| &d.turns)
        .flat_map(|t| turn_pieces(t.role, &t.text))
        .collect();
    let vocab = Vocab::train(&pieces, run.model.vocab_size, run.train.seed, None)?;
    let cfg = ModelConfig {
        vocab_size: vocab.size(),
        ..run.model.clone()
    };
    let encode = |ds: &[Dialog]| ds.iter().map(|d| d.encode(&vocab)).collect::<Result<Vec<_>, _>>();
    let (train_enc, val_enc) = (encode(&train_set)?, encode(&val_set)?);
    eprintln!(
        "{} training and {} validation dialogs, vocabulary {}",
        train_enc.len(),
        val_enc.len(),
        vocab.size()
    );
    let params = if run.shared {
        ArdmParams::shared(cfg)?
    } else {
        ArdmParams::new(cfg)?
    };

    std::fs::create_dir_all(&args.out)?;
    let mut metrics = BufWriter::new(File::create(args.out.join("metrics.jsonl"))?);
    let mut history = Vec::new();
    let outcome = train(params, &train_enc, &val_enc, &run.train, &mut |m, _, _| {
        let line = serde_json::to_string(m)?;
        writeln!(std::io::stdout(), "{line}")?;
        writeln!(metrics, "{line}")?;
        metrics.flush()?;
        history.push(m.clone());
        Ok(())
    })?;
    if outcome.skipped > 0 {
        eprintln!("skipped {} dialogs longer than the position limit", outcome.skipped);
    }
    Bundle {
        params: outcome.best,
        vocab,
        db,
    }
    .save(&args.out)?;
    eprintln!("saved epoch {} to {}", outcome.best_epoch, args.out.display());
    Ok(history)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Generate every system turn of a corpus from its ground-truth history.
    Eval,
    /// Chat on stdin and stdout as the user.
    Interactive,
    /// Let the two role models talk to each other.
    Selfplay,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// default, camrest or persuasion.
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// Corpus for eval mode.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSONL transcripts; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Self-play dialogs to generate.
    #[arg(long, default_value_t = 1)]
    pub dialogs: usize,
    /// Self-play turn limit.
    #[arg(long, default_value_t = 8)]
    pub turns: usize,
    /// Fixed first turn for self-play.
    #[arg(long, default_value = "")]
    pub opening: String,
}

fn sink(out: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_records(out: &mut dyn Write, records: &[DialogRecord]) -> anyhow::Result<()> {
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn generate(args: GenerateArgs, input: &mut dyn BufRead) -> anyhow::Result<()> {
    let bundle = Bundle::load(&args.checkpoint)?;
    let mut preset = Preset::named(&args.preset)?;
    preset.sampler.seed = args.seed;
    match args.mode {
        Mode::Eval => {
            let Some(corpus) = &args.corpus else {
                bail!("eval mode needs --corpus");
            };
            let records = read_jsonl(corpus)?;
            let dialogs = prepare(&records, bundle.db.as_ref())?;
            let jobs = dialogs
                .iter()
                .enumerate()
                .map(|(i, d)| generation_job(d, &preset.sampler, i as u64))
                .collect();
            let outputs = batch_decode_filtered(&bundle.params, &bundle.vocab, jobs, args.batch_size, None)?;
            let mut transcripts = Vec::new();
            for out in outputs {
                let i = out.id as usize;
                if let Some(e) = out.error {
                    eprintln!("dialog {}: {e}", records[i].id);
                    continue;
                }
                let generated: HashMap<usize, String> =
                    out.generated.into_iter().map(|u| (u.turn_index, u.text)).collect();
                let mut dialog = dialogs[i].clone();
                for (t, turn) in dialog.turns.iter_mut().enumerate() {
                    if let Some(text) = generated.get(&t) {
                        turn.text = text.clone();
                    }
                }
                transcripts.push(DialogRecord::from_dialog(records[i].id.clone(), &dialog));
            }
            write_records(&mut *sink(args.out.as_deref())?, &transcripts)
        }
        Mode::Selfplay => {
            let first = if preset.system_first { Role::System } else { Role::User };
            let mut transcripts = Vec::new();
            for i in 0..args.dialogs {
                let out = self_play(
                    &bundle.params,
                    &bundle.vocab,
                    first,
                    &args.opening,
                    args.turns,
                    &preset.sampler,
                    &preset.sampler,
                    i as u64,
                )?;
                if let Some(e) = &out.error {
                    eprintln!("self-play {i} stopped early: {e}");
                }
                transcripts.push(DialogRecord::from_dialog(format!("selfplay-{i}"), &out.transcript));
            }
            write_records(&mut *sink(args.out.as_deref())?, &transcripts)
        }
        Mode::Interactive => interactive(bundle, &preset, args.seed, args.out.as_deref(), input),
    }
}

fn interactive(
    bundle: Bundle,
    preset: &Preset,
    seed: u64,
    out: Option<&Path>,
    input: &mut dyn BufRead,
) -> anyhow::Result<()> {
    let store = SessionStore::new(ChatConfig {
        presets: vec![preset.clone()],
        ..ChatConfig::default()
    })?;
    store.insert_checkpoint("local", bundle);
    let opened = store.create("local", &preset.name, Some(seed))?;
    eprintln!("{}", opened.disclosure);
    for t in &opened.turns {
        eprintln!("system: {}", t.text);
    }
    let mut line = String::new();
    loop {
        eprint!("user: ");
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        match store.post_message(&opened.id, text) {
            Ok(reply) => {
                eprintln!("system: {}", reply.reply);
                if reply.full {
                    eprintln!("(context limit reached)");
                    break;
                }
            }
            Err(ChatError::Full) => {
                eprintln!("(context limit reached)");
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    let record = store.export(&opened.id)?;
    write_records(&mut *sink(out)?, &[record])
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Where to write the JSON report; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value = "camrest")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Perplexity and entity match only.
    #[arg(long)]
    pub no_generate: bool,
}

pub fn eval_cmd(args: EvalArgs) -> anyhow::Result<EvalReport> {
    let bundle = Bundle::load(&args.checkpoint)?;
    let records = read_jsonl(&args.corpus)?;
    let mut sampler = Preset::named(&args.preset)?.sampler;
    sampler.seed = args.seed;
    let setup = EvalSetup {
        vocab: &bundle.vocab,
        db: bundle.db.as_ref(),
        sampler,
        requestable: &REQUESTABLE,
        batch_size: args.batch_size,
        generate: !args.no_generate,
    };
    let report = evaluate(&bundle.params, &records, &setup)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.report {
        Some(p) => std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => writeln!(std::io::stdout(), "{json}")?,
    }
    Ok(report)
}
