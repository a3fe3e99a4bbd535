use std::path::PathBuf;

use ardm_cli::commands::{self, DataCommand, EvalArgs, GenerateArgs, TrainArgs};
use ardm_cli::server::{self, ServerConfig};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "ardm",
    version,
    about = "Train, evaluate and serve alternating-roles dialog models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corpus tools.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train a model and save the best epoch as a bundle.
    Train(TrainArgs),
    /// Decode transcripts from a trained bundle.
    Generate(GenerateArgs),
    /// Perplexity, BLEU, Success F1 and entity match on a corpus.
    Eval(EvalArgs),
    /// Run the HTTP chat server.
    Serve {
        /// JSON server config; `ARDM_*` variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

fn main() -> anyhow::Result<()> {
    match run(Cli::parse()) {
        // A closed pipe on stdout (`ardm ... | head`) is not a failure.
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<std::io::Error>()
                    .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            }) =>
        {
            Ok(())
        }
        r => r,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Data(cmd) => commands::data(cmd),
        Command::Train(args) => commands::train_cmd(args).map(drop),
        Command::Generate(args) => commands::generate(args, &mut std::io::stdin().lock()),
        Command::Eval(args) => commands::eval_cmd(args).map(drop),
        Command::Serve { config, host, port } => {
            let mut cfg = ServerConfig::load(config.as_deref())?;
            if let Some(h) = host {
                cfg.host = h;
            }
            if let Some(p) = port {
                cfg.port = p;
            }
            tokio::runtime::Runtime::new()?.block_on(server::serve(cfg))
        }
    }
}
