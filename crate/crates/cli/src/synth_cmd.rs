//! `asrlab synth`: writes a tone-coded corpus for exercising the full
//! pipeline without real recordings.

use std::path::PathBuf;

use asrlab::synth::{generate_corpus, SynthSpec};
use asrlab::{Error, Result};
use clap::Args;

#[derive(Args)]
pub struct SynthArgs {
    /// Directory to write WAV files and manifest.tsv into
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Characters to draw transcripts from, each mapped to its own tone
    #[arg(long)]
    pub vocab: Option<String>,
    #[arg(long = "min-tokens", default_value_t = 3)]
    pub min_tokens: usize,
    #[arg(long = "max-tokens", default_value_t = 8)]
    pub max_tokens: usize,
    /// Gaussian noise level added on top of the tones
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

pub fn run(args: SynthArgs) -> Result<i32> {
    if args.count == 0 {
        return Err(Error::Config("synth: --count must be positive".to_string()));
    }
    let mut spec = SynthSpec {
        min_tokens: args.min_tokens,
        max_tokens: args.max_tokens,
        noise_level: args.noise,
        seed: args.seed,
        ..SynthSpec::default()
    };
    if let Some(vocab) = &args.vocab {
        spec.vocab = vocab.chars().collect();
    }
    let corpus = generate_corpus(&spec, args.count, &args.out)?;
    println!(
        "wrote {} utterances ({} distinct tones) to {}",
        corpus.utterances.len(),
        spec.vocab.len(),
        args.out.display(),
    );
    println!("manifest {}", corpus.manifest_path.display());
    Ok(0)
}
