//! `asrlab` command line: train, decode, score, inspect, synth.
//!
//! Exit codes: 0 success, 2 usage or configuration error (including bad
//! checkpoints and unreadable inputs), 3 numerical failure during training.
//! `decode` exits 1 when some — but not all — utterances fail.

mod decode_cmd;
mod inspect_cmd;
mod manifest;
mod score_cmd;
mod synth_cmd;
mod train_cmd;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asrlab", version, about = "Desk-scale speech recognition lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model described by a run config
    Train(train_cmd::TrainArgs),
    /// Transcribe a wav manifest with a trained checkpoint
    Decode(decode_cmd::DecodeArgs),
    /// Score hypotheses against references (CER/WER, relative reduction, tables)
    Score(score_cmd::ScoreArgs),
    /// Summarize a checkpoint or the parameter budget of a config
    Inspect(inspect_cmd::InspectArgs),
    /// Generate a deterministic synthetic tone-coded corpus
    Synth(synth_cmd::SynthArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => train_cmd::run(args),
        Command::Decode(args) => decode_cmd::run(args),
        Command::Score(args) => score_cmd::run(args),
        Command::Inspect(args) => inspect_cmd::run(args),
        Command::Synth(args) => synth_cmd::run(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = if matches!(e, asrlab::Error::Numeric(_)) { 3 } else { 2 };
            std::process::exit(code);
        }
    }
}
