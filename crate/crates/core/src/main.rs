use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mdmt::data::SyntheticTaskSpec;
use mdmt::experiment::{
    evaluate, fixture_report, gen_data, load_data, prepare_output, read_json, run_experiment, write_json, EvalSettings,
    ExperimentManifest, TrainManifest, MANIFEST_FILE,
};
use mdmt::model::{write_atomic, Checkpoint, DecodeConfig, Preset, Strategy};
use mdmt::train::{EpochRecord, Mode, Regime, TrainConfig};

/// Multi-domain translation workbench: data generation, training, label
/// ablation and reports.
#[derive(Parser)]
#[command(name = "mdmt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default synthetic task spec as JSON.
    InitSpec {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Generate corpora and vocabulary from a task spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train a regime from scratch.
    Train(TrainArgs),
    /// Fine-tune a regime from a parent checkpoint.
    Finetune(TrainArgs),
    /// Decode test sets under every label and write the report bundle.
    #[command(visible_alias = "report")]
    Ablate(AblateArgs),
    /// Run a whole experiment from a JSON manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "MDMT_OUT_DIR")]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// general, combined-base, combined, in-dom, multi-dom-ft or single-dom-ft.
    #[arg(long)]
    regime: String,
    /// none, tags or ints.
    #[arg(long, default_value = "none")]
    mode: Mode,
    /// Target domain of single-dom-ft.
    #[arg(long)]
    domain: Option<String>,
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    parent: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Checkpoint files; single-dom-ft checkpoints are grouped into one system.
    #[arg(long, num_args = 1.., value_delimiter = ',', required_unless_present = "fixture")]
    checkpoints: Vec<PathBuf>,
    #[arg(long, required_unless_present = "fixture")]
    data: Option<PathBuf>,
    /// Directory of ablation CSVs to report on without decoding.
    #[arg(long, conflicts_with_all = ["checkpoints", "data"])]
    fixture: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Beam width; 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<mdmt::Error> for Failure {
    fn from(e: mdmt::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn log_epoch(name: &str, r: &EpochRecord) {
    eprintln!(
        "{name} epoch {} step {} train_loss {:.4} dev_loss {:.4}",
        r.epoch, r.step, r.train_loss, r.dev_loss
    );
}

fn train_cmd(args: TrainArgs, finetune: bool) -> Result<(), Failure> {
    let manifest = TrainManifest {
        regime: args.regime,
        mode: args.mode,
        domain: args.domain,
        preset: args.preset,
        train: match &args.config {
            Some(p) => read_json(p)?,
            None => TrainConfig::default(),
        },
        data: args.data,
        parent: args.parent,
    };
    let regime: Regime = manifest.regime().map_err(|e| Failure::Usage(e.to_string()))?;
    if regime.kind().is_finetune() != finetune {
        let want = if finetune { "finetune" } else { "train" };
        return Err(Failure::Usage(format!("regime `{regime}` cannot be run with `{want}`")));
    }
    if finetune && manifest.parent.is_none() {
        return Err(Failure::Usage("finetune requires --parent".into()));
    }
    prepare_output(&args.out.out, args.out.force)?;
    let name = regime.file_stem();
    let path = mdmt::experiment::train_single(&manifest, &args.out.out, &mut |r| log_epoch(&name, r))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> Result<(), Failure> {
    let out = &args.out.out;
    if let Some(fixture) = &args.fixture {
        prepare_output(out, args.out.force)?;
        let files = fixture_report(fixture, out)?;
        eprintln!("wrote {} report files", files.len());
        return Ok(());
    }
    if args.checkpoints.is_empty() {
        return Err(Failure::Usage("at least one checkpoint is required".into()));
    }
    if args.beam == 0 {
        return Err(Failure::Usage("--beam must be at least 1".into()));
    }
    let data = args.data.as_deref().expect("required by clap");
    let (corpora, vocab) = load_data(data)?;
    let checkpoints = args
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load_for(p, &vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let settings = EvalSettings {
        decode: DecodeConfig {
            strategy: if args.beam == 1 {
                Strategy::Greedy
            } else {
                Strategy::Beam { size: args.beam }
            },
            max_len: args.max_len,
        },
        jobs: args.jobs,
        test_limit: args.test_limit,
        bootstrap_iterations: args.iterations,
        bootstrap_seed: args.seed,
    };
    prepare_output(out, args.out.force)?;
    write_json(&out.join(MANIFEST_FILE), &settings)?;
    let evaluation = evaluate(&checkpoints, &corpora, &vocab, &settings)?;
    let files = evaluation.write(out)?;
    eprintln!("wrote {} report files", files.len());
    Ok(())
}

fn run_cmd(manifest: &Path, out: Option<PathBuf>, force: bool) -> Result<(), Failure> {
    let m = ExperimentManifest::load(manifest)?;
    let out = out
        .or_else(|| m.out_dir.clone())
        .or_else(|| std::env::var_os("MDMT_OUT_DIR").map(PathBuf::from))
        .ok_or_else(|| Failure::Usage("no output directory: pass --out, set out_dir or MDMT_OUT_DIR".into()))?;
    prepare_output(&out, force)?;
    let outcome = run_experiment(&m, &out, &mut |r, e| log_epoch(&r.file_stem(), e))?;
    eprintln!(
        "trained {} regimes, wrote {} report files under {}",
        outcome.checkpoints.len(),
        outcome.report_files.len(),
        out.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::InitSpec { out, force } => {
            if out.exists() && !force {
                return Err(mdmt::Error::OutputNotEmpty(out).into());
            }
            write_atomic(&out, SyntheticTaskSpec::default().to_json().as_bytes())?;
            Ok(())
        }
        Command::GenData { spec, seed, out } => {
            let spec = SyntheticTaskSpec::load(&spec)?;
            prepare_output(&out.out, out.force)?;
            let info = gen_data(&spec, seed, &out.out)?;
            eprintln!(
                "generated {} domains, vocabulary of {} under {}",
                info.domains.len(),
                info.vocab_size,
                out.out.display()
            );
            Ok(())
        }
        Command::Train(a) => train_cmd(a, false),
        Command::Finetune(a) => train_cmd(a, true),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Run { manifest, out, force } => run_cmd(&manifest, out, force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
