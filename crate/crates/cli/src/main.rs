use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pirl_core::checkpoint::Checkpoint;
use pirl_core::config::RunConfig;
use pirl_core::data::{synth_dataset, write_cifar10_batch, Dataset};
use pirl_core::eval::{invariance_histogram, layer_probe, linear_probe, sweep, write_sweep};
use pirl_core::model::EncoderModel;
use pirl_core::training::{load_trained, pretrain, TrainConfig};
use pirl_core::transforms::PermutationSet;
use pirl_core::Error;
use serde_json::json;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "pirl-lab", version, about = "Pretext-invariant representation learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a network with the configured task.
    Pretrain(RunArgs),
    /// Linear probe on one layer of each configured checkpoint.
    Probe(RunArgs),
    /// Linear probes on every trunk stage and the pooled feature.
    LayerProbe(RunArgs),
    /// Histogram of distances between unit-norm f and g embeddings.
    Invariance(RunArgs),
    /// Pretrain and probe once per value of `sweep.values`.
    Sweep(RunArgs),
    /// Write a permutation set as text.
    GenPerms {
        #[arg(long)]
        g: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write a synthetic dataset in the CIFAR-10 binary format.
    ExportSynth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat JSON config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to `$PIRL_LAB_OUT/<command>-<task>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    seed: Option<u64>,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::UnknownLayer(_) | Error::SetTooLarge { .. } | Error::NotEnoughNegatives { .. } => {
                EXIT_CONFIG
            }
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pirl-lab: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenPerms { g, n, seed, output } => {
            let set = PermutationSet::generate(g, n, seed)?;
            set.save(&output)?;
            println!("wrote {} permutations (min Hamming distance {}) to {}", set.len(), set.min_pairwise_hamming(), output.display());
            Ok(())
        }
        Command::ExportSynth { n, seed, output } => {
            let data = synth_dataset(n, seed)?;
            write_cifar10_batch(&data, &output)?;
            println!("wrote {n} synthetic images to {}", output.display());
            Ok(())
        }
        Command::Pretrain(a) => with_run("pretrain", a, cmd_pretrain),
        Command::Probe(a) => with_run("probe", a, |r, d| cmd_probe(r, d, false)),
        Command::LayerProbe(a) => with_run("layer-probe", a, |r, d| cmd_probe(r, d, true)),
        Command::Invariance(a) => with_run("invariance", a, cmd_invariance),
        Command::Sweep(a) => with_run("sweep", a, cmd_sweep),
    }
}

/// Resolved configuration plus loaded data for one run.
struct Run {
    cfg: RunConfig,
    train: Dataset,
    test: Dataset,
}

fn with_run(name: &str, args: RunArgs, body: impl FnOnce(&Run, &Path) -> Outcome) -> Outcome {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()).into());
    }
    cfg.probe.validate()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build_global()
        .map_err(|e| Failure {
            code: EXIT_RUNTIME,
            message: format!("thread pool: {e}"),
        })?;

    let (train, test) = cfg.data.load()?;
    if cfg.stats.is_none() {
        cfg.stats = Some(train.channel_stats());
    }
    if matches!(name, "pretrain" | "sweep") {
        cfg.train_config().validate(train.len())?;
    }
    for c in cfg.checkpoint_list() {
        if let Some(p) = cfg.checkpoint_path(&c) {
            if !p.is_file() {
                return Err(Error::Config(format!("checkpoint {} does not exist", p.display())).into());
            }
        }
    }

    let dir = match args.out {
        Some(d) => d,
        None => {
            let root = std::env::var_os("PIRL_LAB_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(format!("{name}-{}-seed{}", cfg.task.name(), cfg.seed))
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let done = dir.join("DONE");
    if done.exists() {
        fs::remove_file(&done).map_err(|e| io_failure(&done, e))?;
    }
    let echo = dir.join("config.json");
    let tmp = dir.join("config.json.tmp");
    fs::write(&tmp, cfg.to_flat_json() + "\n").map_err(|e| io_failure(&tmp, e))?;
    fs::rename(&tmp, &echo).map_err(|e| io_failure(&echo, e))?;

    body(&Run { cfg, train, test }, &dir)?;
    fs::write(&done, "").map_err(|e| io_failure(&done, e))?;
    println!("{name} finished: {}", dir.display());
    Ok(())
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn cmd_pretrain(run: &Run, dir: &Path) -> Outcome {
    let cfg = run.cfg.train_config();
    let out = pretrain(&cfg, &run.train, Some(dir))?;
    if let Some(last) = out.metrics.last() {
        println!("final loss {:.6} after {} steps", last.loss, last.step + 1);
    }
    Ok(())
}

/// A network and the training configuration it was built from.
fn load_model(run: &Run, name: &str) -> Result<(TrainConfig, EncoderModel<f32>), Failure> {
    match run.cfg.checkpoint_path(name) {
        Some(path) => {
            let (cfg, model) = load_trained(&Checkpoint::load(&path)?)?;
            Ok((cfg, model))
        }
        None => {
            let cfg = run.cfg.train_config();
            let model = EncoderModel::new(cfg.model.clone())?;
            Ok((cfg, model))
        }
    }
}

fn write_jsonl(path: &Path, lines: &[serde_json::Value]) -> Outcome {
    let mut f = fs::File::create(path).map_err(|e| io_failure(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| io_failure(path, e))?;
    }
    Ok(())
}

fn cmd_probe(run: &Run, dir: &Path, all_layers: bool) -> Outcome {
    let mut lines = Vec::new();
    for name in run.cfg.checkpoint_list() {
        let (tcfg, model) = load_model(run, &name)?;
        let stats = tcfg.stats.or(run.cfg.stats).expect("resolved before the run");
        let reports = if all_layers {
            layer_probe(&model, &run.train, &run.test, tcfg.views.size, &stats, &run.cfg.probe)?
        } else {
            vec![linear_probe(&model, &run.train, &run.test, tcfg.views.size, &stats, &run.cfg.probe)?]
        };
        for r in reports {
            println!("{name} {}: accuracy {:.4}", r.layer, r.accuracy);
            lines.push(json!({ "checkpoint": name, "task": tcfg.task.name(), "report": r }));
        }
    }
    let file = if all_layers { "layer_probe.jsonl" } else { "probe.jsonl" };
    write_jsonl(&dir.join(file), &lines)
}

fn cmd_invariance(run: &Run, dir: &Path) -> Outcome {
    let mut lines = Vec::new();
    for name in run.cfg.checkpoint_list() {
        let (mut tcfg, model) = load_model(run, &name)?;
        tcfg.stats = tcfg.stats.or(run.cfg.stats);
        let report = invariance_histogram(&model, &tcfg, &run.train, &run.cfg.invariance)?;
        println!(
            "{name}: mean distance {:.4}, variance {:.4} over {} pairs ({} skipped)",
            report.mean, report.variance, report.samples, report.skipped
        );
        lines.push(json!({ "checkpoint": name, "task": tcfg.task.name(), "report": report }));
    }
    write_jsonl(&dir.join("invariance.jsonl"), &lines)
}

fn cmd_sweep(run: &Run, dir: &Path) -> Outcome {
    let s = &run.cfg.sweep;
    let rows = sweep(
        s.kind,
        &s.values,
        &run.cfg.train_config(),
        &run.train,
        &run.train,
        &run.test,
        &run.cfg.probe,
        Some(dir),
    );
    for r in &rows {
        match (&r.accuracy, &r.error) {
            (Some(a), _) => println!("{:?} {}: accuracy {a:.4}", r.kind, r.value),
            (_, Some(e)) => println!("{:?} {}: failed: {e}", r.kind, r.value),
            _ => {}
        }
    }
    write_sweep(&rows, dir)?;
    Ok(())
}
