//! CLI: subcommands chaining data generation → teacher extraction →
//! clustering → training → evaluation → ablation sweeps, governed by one
//! JSON run config. Exit codes: 0 ok, 2 usage, 3 data, 4 numeric,
//! 5 contract violation. Errors print one line: `ERROR <code>: <message>`.

use clap::{Args, Parser, Subcommand};
use delulu::config::RunConfig;
use delulu::error::{DeluluError, Result};
use delulu::pipeline::{self, GenDataArgs, SvOptions};
use log::info;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "delulu", version, about = "Speaker-aware self-supervised speech pretraining")]
struct Cli {
    /// Run config JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; overrides the config file and the DELULU_SEED env var.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Force single-threaded execution (results are identical either way).
    #[arg(long, global = true)]
    deterministic: bool,

    /// Worker-thread cap for internal parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Dump the effective config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a speaker corpus: WAVs, speaker bank, JSON-lines manifest.
    GenData {
        #[arg(long, default_value_t = 20)]
        speakers: usize,
        #[arg(long, default_value_t = 10)]
        utts_per_speaker: usize,
        /// Utterance duration in seconds.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Also emit a profiling set (speaker-count / distance labels).
        #[arg(long)]
        profiling: bool,
    },
    /// Extract teacher features for every manifest utterance.
    TeacherExtract {
        /// Manifest to process; defaults to the config's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fit k-means on teacher frames and write pseudo-labels.
    Cluster,
    /// Run the training loop against the pseudo-labels.
    Train,
    /// Speaker-verification EER over generated cosine trials.
    EvalSv(EvalArgs),
    /// Zero-shot profiling: KNN macro-F1 over a tag.
    EvalKnn {
        #[command(flatten)]
        common: EvalArgs,
        /// Tag to classify: gender, age_band, speaker_count, distance.
        #[arg(long, default_value = "gender")]
        label: String,
    },
    /// Embedding-space diagnostics: intra/inter speaker distances + PCA.
    Stats {
        #[command(flatten)]
        common: EvalArgs,
        /// Write 2-D PCA coordinates as CSV here.
        #[arg(long)]
        pca_csv: Option<PathBuf>,
    },
    /// Run the full pipeline per sweep point and tabulate held-out EERs.
    Ablate {
        /// k=256,500 | teacher=oracle,spectral | stride=16,20
        #[arg(long)]
        sweep: String,
        /// Write the table as JSON here (Markdown goes to stdout).
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest to evaluate; defaults to the config's eval manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint; defaults to the newest one in the workdir.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Slice metrics by this tag as well (eval-sv only).
    #[arg(long)]
    group_by: Option<String>,
    /// Score on noise-corrupted copies at this SNR in dB (eval-sv only).
    #[arg(long)]
    noisy_snr: Option<f64>,
    /// Embed from this many transformer layers instead of all.
    #[arg(long)]
    layer: Option<usize>,
    /// Write the report JSON here instead of stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env_seed = std::env::var("DELULU_SEED")
        .ok()
        .map(|s| {
            s.parse::<u64>()
                .map_err(|e| DeluluError::Contract(format!("DELULU_SEED '{s}': {e}")))
        })
        .transpose()?;
    if let Some(seed) = cli.seed.or(env_seed) {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn emit_report<T: serde::Serialize>(report: &T, out: Option<&PathBuf>) -> Result<()> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    if let Some(p) = out {
        std::fs::write(p, &s)?;
    }
    print!("{s}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    if cli.print_config {
        return emit_report(&cfg, None);
    }
    let command = cli
        .command
        .ok_or_else(|| DeluluError::Contract("no subcommand; see --help".into()))?;
    let ckpt_or_latest = |c: &Option<PathBuf>| -> Result<PathBuf> {
        c.clone().map_or_else(|| pipeline::latest_checkpoint(&cfg.workdir), Ok)
    };
    match command {
        Command::GenData { speakers, utts_per_speaker, duration, out, force, profiling } => {
            let manifest = pipeline::gen_data(&GenDataArgs {
                n_speakers: speakers,
                utts_per_speaker,
                duration_s: duration,
                seed: cfg.seed,
                out,
                force,
                profiling,
            })?;
            info!("wrote {}", manifest.display());
            println!("{}", manifest.display());
        }
        Command::TeacherExtract { manifest } => {
            let m = manifest.unwrap_or_else(|| cfg.manifest.clone());
            let (path, n) = pipeline::teacher_extract(&cfg, &m)?;
            info!("extracted {n} utterances");
            println!("{}", path.display());
        }
        Command::Cluster => {
            let (path, report) = pipeline::cluster_frames(&cfg)?;
            emit_report(&report, None)?;
            println!("{}", path.display());
        }
        Command::Train => {
            let ckpt = pipeline::train(&cfg)?;
            println!("{}", ckpt.display());
        }
        Command::EvalSv(a) => {
            let ckpt = ckpt_or_latest(&a.checkpoint)?;
            let manifest = a.manifest.unwrap_or_else(|| cfg.eval_manifest_path().to_path_buf());
            let report = pipeline::eval_sv(
                &ckpt,
                &manifest,
                &cfg.eval,
                cfg.seed,
                &SvOptions {
                    group_by: a.group_by,
                    corrupt_snr_db: a.noisy_snr,
                    layer: a.layer,
                    trials_out: None,
                },
            )?;
            emit_report(&report, a.out.as_ref())?;
        }
        Command::EvalKnn { common: a, label } => {
            let ckpt = ckpt_or_latest(&a.checkpoint)?;
            let manifest = a.manifest.unwrap_or_else(|| cfg.eval_manifest_path().to_path_buf());
            let report = pipeline::eval_knn(&ckpt, &manifest, &cfg.eval, &label, a.layer)?;
            emit_report(&report, a.out.as_ref())?;
        }
        Command::Stats { common: a, pca_csv } => {
            let ckpt = ckpt_or_latest(&a.checkpoint)?;
            let manifest = a.manifest.unwrap_or_else(|| cfg.eval_manifest_path().to_path_buf());
            let report =
                pipeline::stats(&ckpt, &manifest, cfg.eval.normalize, pca_csv.as_deref())?;
            emit_report(&report, a.out.as_ref())?;
        }
        Command::Ablate { sweep, json_out } => {
            let axis = pipeline::parse_sweep(&sweep)?;
            let rows = pipeline::ablate(&cfg, &axis)?;
            if let Some(p) = &json_out {
                let mut s = serde_json::to_string_pretty(&rows)?;
                s.push('\n');
                std::fs::write(p, s)?;
            }
            print!("{}", pipeline::sweep_markdown(&rows));
        }
    }
    Ok(())
}

fn main() {
    env_logger::init();
    let cli = Cli::parse(); // clap exits 2 on usage errors
    if let Some(jobs) = cli.jobs.or(cli.deterministic.then_some(1)) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    if let Err(e) = run(cli) {
        eprintln!("ERROR {}: {e}", e.code());
        std::process::exit(e.exit_code());
    }
}
