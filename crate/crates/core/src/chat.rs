//! Interactive chat sessions over a trained bundle.
//!
//! A session owns its key/value memory and turn log. The user's text is fed
//! through the user model, then the system model samples a reply on the
//! same memory. Reply `k` draws from `derived(seed, [turn_index])`, so a
//! session rebuilt from its log continues exactly as the original would.
//! Every turn is appended to a JSONL transcript when a directory is set.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::ardm::{feed_turn, ArdmParams};
use crate::bundle::Bundle;
use crate::data::{
    delexicalize, extract_entities, normalize_times, relexicalize_row, split_db_result, DialogRecord, EntityDB,
};
use crate::decode::{sample_utterance, Preset, SamplerConfig};
use crate::error::Error;
use crate::model::{Emit, KvMemory};
use crate::rng;
use crate::tokenizer::{Role, Vocab};
use crate::{Dialog, Turn};

/// Shown to the human at the start of every session.
pub const DISCLOSURE: &str =
    "You are talking to a machine agent, not a person. Replies are generated by a language model.";

#[derive(Debug, thiserror::Error)]
pub enum ChatError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown checkpoint {0}")]
    UnknownCheckpoint(String),
    #[error("unknown preset {0}")]
    UnknownPreset(String),
    #[error("session is busy with another message")]
    Busy,
    #[error("the conversation has reached the model's context limit; start a new session")]
    Full,
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Model(#[from] Error),
}

pub type ChatResult<T> = std::result::Result<T, ChatError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub turn_index: usize,
    pub role: Role,
    /// What the human typed or was shown.
    pub text: String,
    /// The turn as the model saw it: normalized and delexicalized, with any
    /// database prefix the system model produced.
    pub model_text: String,
}

/// First line of a transcript file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub checkpoint: String,
    pub preset: String,
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Opened {
    pub id: String,
    pub disclosure: String,
    /// The system's opening turn for system-first presets, else empty.
    pub turns: Vec<ChatTurn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub reply: String,
    pub turn_index: usize,
    /// The reply used up the context; further messages are refused.
    pub full: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatConfig {
    /// Checkpoint names resolve to bundle directories under this one.
    pub checkpoint_dir: PathBuf,
    /// One `<session id>.jsonl` per session; no persistence when `None`.
    pub transcript_dir: Option<PathBuf>,
    /// Added to, or replacing, the built-in presets by name.
    pub presets: Vec<Preset>,
    /// Sessions created without a seed get one derived from this.
    pub seed: u64,
}

impl Default for ChatConfig {
    fn default() -> Self {
        ChatConfig {
            checkpoint_dir: PathBuf::from("checkpoints"),
            transcript_dir: None,
            presets: Vec::new(),
            seed: 0,
        }
    }
}

struct SessionState {
    meta: SessionMeta,
    bundle: Arc<Bundle>,
    memory: KvMemory,
    log: Vec<ChatTurn>,
    full: bool,
}

struct Slot {
    busy: AtomicBool,
    state: Mutex<SessionState>,
}

/// Holds the busy flag of one session until dropped.
pub struct Reservation {
    slot: Arc<Slot>,
}

impl Drop for Reservation {
    fn drop(&mut self) {
        self.slot.busy.store(false, Ordering::Release);
    }
}

pub struct SessionStore {
    config: ChatConfig,
    bundles: RwLock<HashMap<String, Arc<Bundle>>>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    counter: AtomicU64,
}

impl SessionStore {
    pub fn new(config: ChatConfig) -> ChatResult<Self> {
        if let Some(dir) = &config.transcript_dir {
            std::fs::create_dir_all(dir).map_err(Error::from)?;
        }
        Ok(SessionStore {
            config,
            bundles: RwLock::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ChatConfig {
        &self.config
    }

    /// Registers an in-memory bundle under `name`, shadowing the directory.
    pub fn insert_checkpoint(&self, name: impl Into<String>, bundle: Bundle) {
        self.bundles.write().unwrap().insert(name.into(), Arc::new(bundle));
    }

    fn checkpoint(&self, name: &str) -> ChatResult<Arc<Bundle>> {
        if let Some(b) = self.bundles.read().unwrap().get(name) {
            return Ok(b.clone());
        }
        let bad = name.is_empty() || name.contains(['/', '\\']) || name == "..";
        let dir = self.config.checkpoint_dir.join(name);
        if bad || !dir.join("manifest.json").is_file() {
            return Err(ChatError::UnknownCheckpoint(name.to_string()));
        }
        let bundle = Arc::new(Bundle::load(&dir)?);
        self.bundles
            .write()
            .unwrap()
            .entry(name.to_string())
            .or_insert_with(|| bundle.clone());
        Ok(bundle)
    }

    pub fn preset(&self, name: &str) -> ChatResult<Preset> {
        if let Some(p) = self.config.presets.iter().rev().find(|p| p.name == name) {
            return Ok(p.clone());
        }
        Preset::named(name).map_err(|_| ChatError::UnknownPreset(name.to_string()))
    }

    pub fn preset_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Preset::NAMES.iter().map(|s| s.to_string()).collect();
        for p in &self.config.presets {
            if !names.contains(&p.name) {
                names.push(p.name.clone());
            }
        }
        names
    }

    /// Opens a session; system-first presets get their opening turn here.
    pub fn create(&self, checkpoint: &str, preset: &str, seed: Option<u64>) -> ChatResult<Opened> {
        let bundle = self.checkpoint(checkpoint)?;
        let preset = self.preset(preset)?;
        preset.sampler.validate()?;
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let seed = seed.unwrap_or_else(|| rand::RngCore::next_u64(&mut rng::derived(self.config.seed, &[n])));
        let meta = SessionMeta {
            id: uuid::Uuid::new_v4().to_string(),
            checkpoint: checkpoint.to_string(),
            preset: preset.name.clone(),
            sampler: preset.sampler.clone(),
            seed,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let mut state = SessionState {
            memory: bundle.params.memory(),
            meta,
            bundle,
            log: Vec::new(),
            full: false,
        };
        self.persist_meta(&state.meta)?;
        if preset.system_first {
            let turn = generate_reply(&mut state)?;
            self.persist_turn(&state.meta.id, &turn)?;
            state.log.push(turn);
        }
        let opened = Opened {
            id: state.meta.id.clone(),
            disclosure: DISCLOSURE.to_string(),
            turns: state.log.clone(),
        };
        self.insert(state);
        Ok(opened)
    }

    fn insert(&self, state: SessionState) {
        let id = state.meta.id.clone();
        let slot = Arc::new(Slot {
            busy: AtomicBool::new(false),
            state: Mutex::new(state),
        });
        self.sessions.write().unwrap().insert(id, slot);
    }

    fn slot(&self, id: &str) -> ChatResult<Arc<Slot>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ChatError::UnknownSession(id.to_string()))
    }

    /// Claims the session's busy flag, failing with [`ChatError::Busy`]
    /// while another message is in flight.
    pub fn reserve(&self, id: &str) -> ChatResult<Reservation> {
        let slot = self.slot(id)?;
        slot.busy
            .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
            .map_err(|_| ChatError::Busy)?;
        Ok(Reservation { slot })
    }

    pub fn post_message(&self, id: &str, text: &str) -> ChatResult<Reply> {
        let r = self.reserve(id)?;
        self.post_reserved(&r, text)
    }

    /// Feeds the user's text and samples the system reply.
    pub fn post_reserved(&self, reservation: &Reservation, text: &str) -> ChatResult<Reply> {
        let mut state = reservation.slot.state.lock().unwrap();
        if state.full {
            return Err(ChatError::Full);
        }
        if text.contains('\n') {
            return Err(ChatError::BadRequest("messages must be a single line".into()));
        }
        let model_text = user_model_text(text, state.bundle.db.as_ref());
        let b = state.bundle.clone();
        let tokens = b.vocab.encode_turn(Role::User, &model_text)?;
        let trigger = b.vocab.encode_turn(Role::System, "")?.len();
        if !state.memory.fits(tokens.len() + trigger, b.params.config()) {
            state.full = true;
            return Err(ChatError::Full);
        }
        let mut mem = state.memory.clone();
        feed_turn(&b.params, Role::User, &tokens, &mut mem, Emit::Nothing)?;
        let user = ChatTurn {
            turn_index: state.log.len(),
            role: Role::User,
            text: text.to_string(),
            model_text,
        };
        let prev = std::mem::replace(&mut state.memory, mem);
        state.log.push(user.clone());
        let reply = match generate_reply(&mut state) {
            Ok(r) => r,
            Err(e) => {
                state.log.pop();
                state.memory = prev;
                return Err(e);
            }
        };
        self.persist_turn(&state.meta.id, &user)?;
        self.persist_turn(&state.meta.id, &reply)?;
        state.log.push(reply.clone());
        Ok(Reply {
            reply: reply.text,
            turn_index: reply.turn_index,
            full: state.full,
        })
    }

    pub fn is_busy(&self, id: &str) -> ChatResult<bool> {
        Ok(self.slot(id)?.busy.load(Ordering::Acquire))
    }

    pub fn history(&self, id: &str) -> ChatResult<Vec<ChatTurn>> {
        Ok(self.slot(id)?.state.lock().unwrap().log.clone())
    }

    pub fn meta(&self, id: &str) -> ChatResult<SessionMeta> {
        Ok(self.slot(id)?.state.lock().unwrap().meta.clone())
    }

    /// The model-side transcript as a corpus record.
    pub fn export(&self, id: &str) -> ChatResult<DialogRecord> {
        let slot = self.slot(id)?;
        let state = slot.state.lock().unwrap();
        Ok(export_record(&state.meta.id, &state.log))
    }

    /// Rebuilds a session from a transcript file written by this store.
    pub fn restore(&self, path: impl AsRef<Path>) -> ChatResult<String> {
        let (meta, log) = read_transcript(path)?;
        let bundle = self.checkpoint(&meta.checkpoint)?;
        let memory = replay_memory(&bundle.params, &bundle.vocab, &log)?;
        let id = meta.id.clone();
        self.insert(SessionState {
            full: false,
            meta,
            bundle,
            memory,
            log,
        });
        Ok(id)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    fn transcript_path(&self, id: &str) -> Option<PathBuf> {
        self.config
            .transcript_dir
            .as_ref()
            .map(|d| d.join(format!("{id}.jsonl")))
    }

    fn persist_meta(&self, meta: &SessionMeta) -> ChatResult<()> {
        self.append(&meta.id, &serde_json::to_string(meta).map_err(Error::from)?)
    }

    fn persist_turn(&self, id: &str, turn: &ChatTurn) -> ChatResult<()> {
        self.append(id, &serde_json::to_string(turn).map_err(Error::from)?)
    }

    fn append(&self, id: &str, line: &str) -> ChatResult<()> {
        if let Some(path) = self.transcript_path(id) {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(Error::from)?;
            writeln!(f, "{line}").map_err(Error::from)?;
        }
        Ok(())
    }
}

/// The user's text as the model was trained to read it.
pub fn user_model_text(text: &str, db: Option<&EntityDB>) -> String {
    let t = normalize_times(text.trim());
    match db {
        Some(db) => delexicalize(&t, db).0,
        None => t,
    }
}

/// Samples the next system turn on the session's memory and commits it.
fn generate_reply(state: &mut SessionState) -> ChatResult<ChatTurn> {
    let turn_index = state.log.len();
    let b = state.bundle.clone();
    let mut r = rng::derived(state.meta.seed, &[turn_index as u64]);
    let (u, mem) = sample_utterance(
        &b.params,
        &b.vocab,
        Role::System,
        &state.memory,
        &state.meta.sampler,
        &mut r,
    )?;
    state.memory = mem;
    if u.hit_capacity {
        state.full = true;
    }
    let shown = match &b.db {
        Some(db) => relexicalize_reply(&u.text, &state.log, db),
        None => u.text.clone(),
    };
    Ok(ChatTurn {
        turn_index,
        role: Role::System,
        text: shown,
        model_text: u.text,
    })
}

/// Drops the database prefix and fills placeholders from the first entity
/// row agreeing with what the user has asked for so far. Placeholders are
/// left in place when no row supplies them.
pub fn relexicalize_reply(model_text: &str, log: &[ChatTurn], db: &EntityDB) -> String {
    let body = split_db_result(model_text).map_or(model_text, |(_, rest)| rest.trim_start());
    let history: Vec<&str> = log
        .iter()
        .filter(|t| t.role == Role::User)
        .map(|t| t.text.as_str())
        .collect();
    let wanted = extract_entities(&history.join("\n"), db);
    let row: Option<BTreeMap<String, String>> = db
        .matching(&wanted)
        .first()
        .map(|r| (*r).clone())
        .or_else(|| db.rows.first().cloned())
        .map(|mut r| {
            r.extend(wanted.clone());
            r
        });
    let row = row.unwrap_or(wanted);
    relexicalize_row(body, &row).unwrap_or_else(|_| body.to_string())
}

/// Memory after feeding the logged turns in order, by their model text.
pub fn replay_memory(params: &ArdmParams, vocab: &Vocab, log: &[ChatTurn]) -> crate::Result<KvMemory> {
    let mut mem = params.memory();
    for t in log {
        let tokens = vocab.encode_turn(t.role, &t.model_text)?;
        feed_turn(params, t.role, &tokens, &mut mem, Emit::Nothing)?;
    }
    Ok(mem)
}

/// The model-side turns as a record that reads back into the same dialog.
pub fn export_record(id: &str, log: &[ChatTurn]) -> DialogRecord {
    let dialog = Dialog::new(log.iter().map(|t| Turn::new(t.role, t.model_text.clone())).collect());
    DialogRecord::from_dialog(id, &dialog)
}

/// Turns of an exported record, taking each text as both shown and model text.
pub fn log_from_record(record: &DialogRecord) -> Vec<ChatTurn> {
    record
        .turns
        .iter()
        .enumerate()
        .map(|(i, t)| ChatTurn {
            turn_index: i,
            role: t.role,
            text: t.text.clone(),
            model_text: t.text.clone(),
        })
        .collect()
}

/// The session header and turns of a transcript file.
pub fn read_transcript(path: impl AsRef<Path>) -> crate::Result<(SessionMeta, Vec<ChatTurn>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let meta: SessionMeta =
        serde_json::from_str(lines.next().ok_or_else(|| Error::Format("empty transcript".into()))?)?;
    let log = lines
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("line {}: {e}", i + 2))))
        .collect::<crate::Result<Vec<ChatTurn>>>()?;
    Ok((meta, log))
}

/// The reply a session with this seed and sampler would give next, computed
/// from the log alone.
pub fn next_reply_from_log(
    bundle: &Bundle,
    sampler: &SamplerConfig,
    seed: u64,
    log: &[ChatTurn],
) -> crate::Result<String> {
    let mem = replay_memory(&bundle.params, &bundle.vocab, log)?;
    let mut r = rng::derived(seed, &[log.len() as u64]);
    let (u, _) = sample_utterance(&bundle.params, &bundle.vocab, Role::System, &mem, sampler, &mut r)?;
    Ok(u.text)
}
