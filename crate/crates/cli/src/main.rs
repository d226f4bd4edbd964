mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use unit_codec::codec::CodingMode;
use unit_codec::pipeline::{FailurePolicy, NormalizationMode};
use unit_codec::{Category, PipelineConfig};

const EXIT_CODES: &str = "\
Exit status:
  0  success
  1  preprocess finished with failed records (unless --on-failure warn)
  2  invalid command line
  3  I/O error
  4  malformed or unsupported file
  5  invalid configuration
  6  unusable input data (too short, too few points, no voiced frames, ...)
  7  model/stream mismatch (vocabulary, fingerprint, missing model)";

#[derive(Parser)]
#[command(
    name = "unit-codec",
    version,
    about = "Discrete speech units: encode, compress, resynthesize, probe and model",
    after_help = EXIT_CODES
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct Global {
    /// Seed for every random choice (k-means, splits, sampling, phases).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON pipeline configuration; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
}

/// Overrides for the shared pipeline configuration.
#[derive(Args, Default, Clone)]
pub struct ConfigFlags {
    /// Feature preset: hubert-like-50hz or cpc-like-100hz.
    #[arg(long)]
    pub preset: Option<String>,
    /// Codebook (TLCB) file.
    #[arg(long, value_name = "FILE")]
    pub codebook: Option<PathBuf>,
    /// Unigram model (JSON) for entropy coding.
    #[arg(long, value_name = "FILE")]
    pub unigram: Option<PathBuf>,
    /// Lower edge of the pitch search band in Hz.
    #[arg(long)]
    pub f0_min: Option<f64>,
    /// Upper edge of the pitch search band in Hz.
    #[arg(long)]
    pub f0_max: Option<f64>,
    /// Voicing threshold of the pitch tracker.
    #[arg(long)]
    pub voicing_threshold: Option<f64>,
}

impl ConfigFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(p) = &self.preset {
            cfg.preset = p.clone();
            cfg.features = None;
        }
        if let Some(c) = &self.codebook {
            cfg.codebook = Some(c.clone());
        }
        if let Some(u) = &self.unigram {
            cfg.unigram = Some(u.clone());
        }
        if let Some(v) = self.f0_min {
            cfg.pitch.f_lo = v;
        }
        if let Some(v) = self.f0_max {
            cfg.pitch.f_hi = v;
        }
        if let Some(v) = self.voicing_threshold {
            cfg.pitch.threshold = v;
        }
    }
}

/// Pitch-stream options shared by `preprocess` and `encode`.
#[derive(Args, Default, Clone)]
pub struct PitchFlags {
    /// none, per-speaker or prefix:<seconds>.
    #[arg(long, value_name = "MODE")]
    pub normalization: Option<NormalizationMode>,
    /// Drop the pitch stream.
    #[arg(long, conflicts_with = "normalization")]
    pub no_pitch: bool,
    /// fixed or entropy.
    #[arg(long, value_parser = parse_coding)]
    pub coding: Option<CodingMode>,
}

impl PitchFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if self.no_pitch {
            cfg.normalization = None;
        } else if let Some(n) = self.normalization {
            cfg.normalization = Some(n);
        }
        if let Some(c) = self.coding {
            cfg.coding = c;
        }
    }
}

fn parse_coding(s: &str) -> Result<CodingMode, String> {
    match s {
        "fixed" => Ok(CodingMode::Fixed),
        "entropy" => Ok(CodingMode::Entropy),
        _ => Err(format!("expected fixed or entropy, got {s:?}")),
    }
}

fn parse_policy(s: &str) -> Result<FailurePolicy, String> {
    match s {
        "error" => Ok(FailurePolicy::Error),
        "warn" => Ok(FailurePolicy::Warn),
        _ => Err(format!("expected error or warn, got {s:?}")),
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Write a seeded synthetic multi-speaker corpus (spkN/uttNNN.wav).
    SynthCorpus {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 10)]
        per_speaker: usize,
        /// Length of every utterance in seconds.
        #[arg(long, default_value_t = 3.0)]
        seconds: f64,
    },
    /// Train a k-means codebook on WAV or TLFT inputs (files or directories).
    TrainKmeans {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Cap on pooled frames; a seeded subsample is used above it (0 = no cap).
        #[arg(long)]
        max_frames: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Encode every WAV under a directory in parallel and write a manifest.
    Preprocess {
        audio_dir: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Expected vocabulary size, checked against the codebook.
        #[arg(long)]
        k: Option<u32>,
        #[arg(long)]
        workers: Option<usize>,
        /// error (nonzero exit on failed records) or warn.
        #[arg(long, value_parser = parse_policy)]
        on_failure: Option<FailurePolicy>,
        #[command(flatten)]
        cfg: ConfigFlags,
        #[command(flatten)]
        pitch: PitchFlags,
    },
    /// Encode one WAV into a TLUC bitstream.
    Encode {
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write the streams as `unit:duration:pitch` text.
        #[arg(long, value_name = "FILE")]
        units_out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigFlags,
        #[command(flatten)]
        pitch: PitchFlags,
    },
    /// Decode a TLUC bitstream to `unit:duration:pitch` text.
    Decode {
        input: PathBuf,
        /// Write the text here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Resynthesize a WAV (through its units) or a TLUC bitstream.
    Resynth {
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Griffin-Lim iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// Write the per-iteration spectral convergence as CSV.
        #[arg(long, value_name = "FILE")]
        convergence: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Bitrate table over a corpus, one row per codebook.
    Bitrate {
        audio_dir: PathBuf,
        /// One or more codebooks (repeat the flag).
        #[arg(long = "codebooks", value_name = "FILE", required = true, num_args = 1..)]
        codebooks: Vec<PathBuf>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Speaker probe: continuous features vs unit histograms.
    Probe {
        audio_dir: PathBuf,
        #[arg(long = "codebooks", value_name = "FILE", num_args = 1..)]
        codebooks: Vec<PathBuf>,
        /// Seed of the 90/10 split (defaults to --seed).
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Print CSV instead of the aligned table.
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Train an n-gram unit LM on a preprocess output directory or on audio.
    LmTrain {
        /// Preprocess output directory (with manifest.jsonl), or an audio
        /// directory together with --codebook.
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = unit_codec::lm::DEFAULT_ORDER)]
        order: usize,
        #[arg(long, default_value_t = unit_codec::lm::DEFAULT_SMOOTHING)]
        smoothing: f64,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Continue a spoken prompt with the unit LM and synthesize the result.
    Continue {
        prompt: PathBuf,
        #[arg(long, value_name = "FILE")]
        lm: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        max_units: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        iters: Option<usize>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Track F0 and print JSON lines `{frame, voiced, value}`.
    Pitch {
        input: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        frame_rate: f64,
        /// Print normalized log-F0 (none, per-speaker or prefix:<s>) instead of Hz.
        #[arg(long, value_name = "MODE")]
        normalize: Option<NormalizationMode>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Extract features of one WAV into a TLFT file.
    Features {
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
}

#[derive(Debug)]
pub enum Failure {
    Core(unit_codec::Error),
    /// Preprocessing finished but some records failed.
    Records(usize),
}

impl From<unit_codec::Error> for Failure {
    fn from(e: unit_codec::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Records(_) => 1,
            Failure::Core(e) => match e.category() {
                Category::Io => 3,
                Category::Format => 4,
                Category::Config => 5,
                Category::Data => 6,
                Category::Model => 7,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Records(n) => format!("{n} record(s) failed; see the manifest"),
            Failure::Core(e) => e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli.global, cli.command) {
        Ok(report) => {
            if cli.global.json {
                println!("{}", report.json);
            } else if !report.text.is_empty() {
                print!("{}", report.text);
            }
            ExitCode::SUCCESS
        }
        Err((failure, report)) => {
            if cli.global.json {
                let mut json = report.map(|r| r.json).unwrap_or_else(|| serde_json::json!({}));
                json["error"] = failure.message().into();
                json["exit_code"] = failure.code().into();
                println!("{json}");
            } else if let Some(r) = report {
                print!("{}", r.text);
            }
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}
