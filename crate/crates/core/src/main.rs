use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use marble::bagdata::{format_manifest, generate_dataset, write_bag, Dataset, ManifestEntry, Split, Target};
use marble::config::RunConfig;
use marble::model::{read_checkpoint, write_checkpoint};
use marble::ssm::{scaling_bench, EncoderKind};
use marble::train::{ablate_scales, evaluate, mean_sd, sweep_alpha, train_with, EvalReport, EPOCH_HEADER};
use marble::{Error, Result};

/// Multi-scale state-space models for slide-level prediction on synthetic
/// token pyramids.
#[derive(Parser)]
#[command(name = "marble", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: one bag file per slide plus a manifest.
    GenData {
        /// key=value spec file; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Override a spec key, e.g. --set n_slides=20.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a model and evaluate its best checkpoint on the test split.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Seed of the split assignment; defaults to the checkpoint's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write per-slide predictions to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per drop fraction and tabulate the mean validation and
    /// test metric. Classification reports AUC (macro one-vs-rest for more
    /// than two classes); survival reports the C-index.
    SweepAlpha {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
        grid: Vec<f64>,
    },
    /// Train coarse-only, fine-only and combined models and tabulate them.
    AblateScales(RunArgs),
    /// Time one encoder forward pass over increasing token counts.
    Bench {
        #[arg(long, default_value = "scan")]
        encoder: String,
        #[arg(long, value_delimiter = ',', default_value = "2048,4096,8192,16384")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key=value run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Override a config key, e.g. --set base_lr=0.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Repeated runs with derived seeds; overrides the config value.
    #[arg(long)]
    repeats: Option<usize>,
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Output directory guarded by a `.partial` marker until the command succeeds.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        write(&path.join(".partial"), "incomplete\n")?;
        Ok(Self { path: path.to_path_buf() })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn finish(self) -> Result<()> {
        let marker = self.file(".partial");
        fs::remove_file(&marker).map_err(|e| Error::io(marker, e))
    }
}

fn gen_data(spec: Option<&Path>, out: &Path, force: bool, overrides: &[String]) -> Result<()> {
    let cfg = load_config(spec, overrides)?;
    cfg.synth.validate()?;
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Argument(format!(
                "{} exists and is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
    }
    let dir = RunDir::open(out)?;
    let bags = dir.file("bags");
    fs::create_dir_all(&bags).map_err(|e| Error::io(&bags, e))?;
    let slides = generate_dataset(&cfg.synth)?;
    let mut entries = Vec::with_capacity(slides.len());
    for s in &slides {
        let rel = format!("bags/{}.bag", s.id);
        write_bag(&s.planted.bag, &dir.file(&rel))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            path: rel.into(),
            target: s.target,
            split: Split::Train,
        });
    }
    write(&dir.file("manifest.csv"), format_manifest(&entries, false))?;
    write(&dir.file("spec.txt"), cfg.resolved())?;
    let events = slides
        .iter()
        .filter(|s| matches!(s.target, Target::Survival(r) if r.event))
        .count();
    if cfg.task() == marble::model::HeadKind::Survival && (events < 2 || cfg.synth.censoring >= 0.95) {
        eprintln!(
            "warning: near-degenerate event count: {events} events among {} slides at censoring rate {}",
            slides.len(),
            cfg.synth.censoring
        );
    }
    dir.finish()?;
    println!("wrote {} slides to {}", slides.len(), out.display());
    Ok(())
}

fn predictions_csv(report: &EvalReport) -> String {
    let mut s = String::from("id,scores\n");
    for p in &report.predictions {
        let scores: Vec<String> = p.scores.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{},{}", p.id, scores.join(";"));
    }
    s
}

fn metrics_text(report: &EvalReport) -> String {
    let mut s = String::new();
    if let Some(a) = report.accuracy {
        let _ = writeln!(s, "accuracy={a}");
    }
    if let Some(a) = report.auc {
        let _ = writeln!(s, "auc={a}");
    }
    if let Some(c) = report.c_index {
        let _ = writeln!(s, "c_index={c}");
    }
    s
}

fn prepare(run: &RunArgs) -> Result<(RunConfig, Dataset)> {
    let mut cfg = load_config(run.config.as_deref(), &run.overrides)?;
    if let Some(r) = run.repeats {
        cfg.repeats = r;
    }
    cfg.train.validate()?;
    if cfg.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if !run.data.is_file() {
        return Err(Error::Config(format!("manifest {} does not exist", run.data.display())));
    }
    let ds = Dataset::load(&run.data, cfg.task(), cfg.seed())?;
    Ok((cfg, ds))
}

fn train_cmd(run: &RunArgs) -> Result<()> {
    let (cfg, ds) = prepare(run)?;
    let dir = RunDir::open(&run.out)?;
    write(&dir.file("config.txt"), cfg.resolved())?;
    let mut tests = Vec::new();
    for r in 0..cfg.repeats {
        let sub = if cfg.repeats == 1 { dir.path.clone() } else { dir.file(&format!("run{r}")) };
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut train = cfg.train.clone();
        train.seed = marble::train::repeat_seed(cfg.seed(), r);
        let out = train_with(&ds, &train, |row| {
            println!(
                "epoch {:>3}  lr {:.3e}  loss {:.5}  val {:.4}  best {:.4}{}",
                row.epoch,
                row.lr,
                row.train_loss,
                row.val_metric,
                row.best_so_far,
                if row.stopped { "  (early stop)" } else { "" }
            );
        })?;
        let mut csv = format!("{EPOCH_HEADER}\n");
        for row in &out.report {
            let _ = writeln!(csv, "{}", row.csv());
        }
        write(&sub.join("epochs.csv"), csv)?;
        write_checkpoint(&sub.join("checkpoint.mrbl"), &out.best, &out.model)?;
        let test = evaluate(&out.best, &ds, Split::Test)?;
        write(&sub.join("test_predictions.csv"), predictions_csv(&test))?;
        write(&sub.join("test_metrics.txt"), metrics_text(&test))?;
        println!(
            "run {r}: best epoch {}, test {}",
            out.best_epoch,
            metrics_text(&test).trim().replace('\n', ", ")
        );
        tests.push(test.metric());
    }
    if cfg.repeats > 1 {
        let (m, s) = mean_sd(&tests);
        println!("test metric over {} runs: {m:.4} ± {s:.4}", cfg.repeats);
        let mut csv = String::from("run,test_metric\n");
        for (r, t) in tests.iter().enumerate() {
            let _ = writeln!(csv, "{r},{t}");
        }
        write(&dir.file("repeats.csv"), csv)?;
    }
    dir.finish()
}

fn evaluate_cmd(checkpoint: &Path, data: &Path, split: &str, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let split: Split = split.parse()?;
    let (params, model) = read_checkpoint(checkpoint)?;
    let ds = Dataset::load(data, model.head, seed.unwrap_or(model.seed))?;
    let report = evaluate(&params, &ds, split)?;
    print!("{}", metrics_text(&report));
    if let Some(path) = out {
        write(path, predictions_csv(&report))?;
    }
    Ok(())
}

fn sweep_cmd(run: &RunArgs, grid: &[f64]) -> Result<()> {
    if let Some(a) = grid.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(Error::Argument(format!("alpha {a} outside [0, 1)")));
    }
    let (cfg, ds) = prepare(run)?;
    let dir = RunDir::open(&run.out)?;
    write(&dir.file("config.txt"), cfg.resolved())?;
    let rows = sweep_alpha(&ds, &cfg.train, grid, cfg.repeats)?;
    let mut csv = String::from("alpha,val_mean,val_sd,test_mean,test_sd\n");
    println!("{:>6}  {:>15}  {:>15}", "alpha", "val", "test");
    for row in &rows {
        let (vm, vs) = row.summary.val_mean_sd();
        let (tm, ts) = row.summary.test_mean_sd();
        let _ = writeln!(csv, "{},{vm},{vs},{tm},{ts}", row.alpha);
        println!("{:>6}  {vm:.4} ± {vs:.4}  {tm:.4} ± {ts:.4}", row.alpha);
    }
    write(&dir.file("sweep.csv"), csv)?;
    dir.finish()
}

fn ablate_cmd(run: &RunArgs) -> Result<()> {
    let (cfg, ds) = prepare(run)?;
    if ds.num_levels() < 2 {
        return Err(Error::Config(format!(
            "scale ablation needs at least two levels, {} has {}",
            run.data.display(),
            ds.num_levels()
        )));
    }
    let dir = RunDir::open(&run.out)?;
    write(&dir.file("config.txt"), cfg.resolved())?;
    let rows = ablate_scales(&ds, &cfg.train, cfg.repeats)?;
    let mut csv = String::from("model,val_mean,val_sd,test_mean,test_sd\n");
    println!("{:>12}  {:>15}  {:>15}", "model", "val", "test");
    for row in &rows {
        let (vm, vs) = row.summary.val_mean_sd();
        let (tm, ts) = row.summary.test_mean_sd();
        let _ = writeln!(csv, "{},{vm},{vs},{tm},{ts}", row.name);
        println!("{:>12}  {vm:.4} ± {vs:.4}  {tm:.4} ± {ts:.4}", row.name);
    }
    write(&dir.file("ablation.csv"), csv)?;
    dir.finish()
}

#[allow(clippy::too_many_arguments)]
fn bench_cmd(
    encoder: &str,
    sizes: &[usize],
    repetitions: usize,
    d_model: usize,
    state: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let kind: EncoderKind = encoder.parse()?;
    let rows = scaling_bench(kind, d_model, state, sizes, repetitions, seed)?;
    let mut csv = String::from("encoder,T,median_ms,ratio_vs_prev\n");
    for r in &rows {
        let ratio = r.ratio_vs_prev.map_or(String::new(), |x| x.to_string());
        let _ = writeln!(csv, "{},{},{},{ratio}", r.encoder.name(), r.tokens, r.median_ms);
        println!(
            "{:>9}  T={:>6}  {:>10.3} ms  {}",
            r.encoder.name(),
            r.tokens,
            r.median_ms,
            r.ratio_vs_prev.map_or(String::new(), |x| format!("x{x:.2}"))
        );
    }
    if let Some(path) = out {
        write(path, csv)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, force, overrides } => gen_data(spec.as_deref(), &out, force, &overrides),
        Command::Train(run) => train_cmd(&run),
        Command::Evaluate {
            checkpoint,
            data,
            split,
            seed,
            out,
        } => evaluate_cmd(&checkpoint, &data, &split, seed, out.as_deref()),
        Command::SweepAlpha { run, grid } => sweep_cmd(&run, &grid),
        Command::AblateScales(run) => ablate_cmd(&run),
        Command::Bench {
            encoder,
            sizes,
            repetitions,
            d_model,
            state,
            seed,
            out,
        } => bench_cmd(&encoder, &sizes, repetitions, d_model, state, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
