use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dida::data::idx::write_idx;
use dida::data::{normalize, LabeledSet, UnlabeledSet};
use dida::experiment::{self, ablation_matrix, load_data, model_for, ExperimentConfig};
use dida::gradcheck::{run_suite, GradcheckConfig, CASE_NAMES};
use dida::models::{Model, PARAM_PREFIXES};
use dida::train::{accuracy, pseudo_label};
use dida::{checkpoint, Error};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "dida", version, about = "Train, evaluate and inspect dynamic-residual domain adaptation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file into a fresh run directory.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on a labelled dataset.
    Eval(ModelArgs),
    /// Print per-layer and per-prefix parameter and MAC counts.
    Count(CountArgs),
    /// Compare analytic gradients with central finite differences in f64.
    Gradcheck(GradcheckArgs),
    /// Write pooled Z features of each sample to CSV.
    ExportFeatures(ExportArgs),
    /// Train every single-axis variant of a config's dynamic module.
    Ablate(TrainArgs),
    /// Write a configured dataset, after its recipe, as IDX files.
    CacheDomain(CacheArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Dotted-key override, e.g. `train.tau=0.9`; repeatable, applied in order.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = seed {
            overrides.push(format!("train.seed={s}"));
        }
        ExperimentConfig::load(&self.config, &overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to `output.dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ModelArgs {
    checkpoint: PathBuf,
    /// Config describing the model and datasets; defaults to the
    /// `resolved-config.toml` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// `target_test`, `target`, `source`, `sourceN` or `all`.
    #[arg(long, default_value = "target_test")]
    dataset: String,
    #[arg(long, default_value_t = 256)]
    batch: usize,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Input height and width for MAC counting.
    #[arg(long, default_value_t = 32)]
    size: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// `all` or a comma-separated list of case names.
    #[arg(long, default_value = "all")]
    ops: String,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Coordinates probed per parameter tensor; 0 probes all of them.
    #[arg(long, default_value_t = 0)]
    max_coords: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CacheArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// `target_test`, `target`, `source`, `sourceN` or `all`.
    #[arg(long, default_value = "target")]
    dataset: String,
    /// Output prefix; files are `<prefix>-images-idx3-ubyte` and
    /// `<prefix>-labels-idx1-ubyte`, numbered when several datasets match.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Count(a) => cmd_count(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::ExportFeatures(a) => cmd_export(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::CacheDomain(a) => cmd_cache(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => 3,
        Some(Error::Shape { .. } | Error::NonScalarLoss(_) | Error::MissingGrad(_)) => 1,
        _ if e.downcast_ref::<GradcheckFailed>().is_some() => 1,
        _ => 2,
    }
}

/// A check that ran to completion and found errors above tolerance.
#[derive(Debug)]
struct GradcheckFailed(String);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn run_dir(args: &TrainArgs, cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let Some(dir) = args.out.clone().or_else(|| cfg.output.dir.clone()) else {
        return Err(Error::Config("no run directory: pass --out or set output.dir".into()).into());
    };
    if dir.exists() {
        let non_empty = std::fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !args.force {
            return Err(Error::Config(format!(
                "run directory {} is not empty; pass --force to write into it",
                dir.display()
            ))
            .into());
        }
    }
    Ok(dir)
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.config.load(args.seed)?;
    let dir = run_dir(args, &cfg)?;
    let started = Instant::now();
    let (_, summary) = experiment::run(&cfg, Some(&dir))?;
    match summary.best_acc {
        Some(acc) => println!(
            "target accuracy {acc:.4} (best epoch {}), {:.1}s, run directory {}",
            summary.best_epoch.map_or_else(|| "-".into(), |e| e.to_string()),
            started.elapsed().as_secs_f64(),
            dir.display()
        ),
        None => println!("finished in {:.1}s, run directory {}", started.elapsed().as_secs_f64(), dir.display()),
    }
    Ok(())
}

fn cmd_ablate(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.config.load(args.seed)?;
    let dir = run_dir(args, &cfg)?;
    let mut rows = Vec::new();
    for (name, variant) in ablation_matrix(&cfg)? {
        log::info!("ablation variant {name}");
        let (model, summary) = experiment::run(&variant, Some(&dir.join(&name)))?;
        rows.push((name, model.count_params("dida."), summary.best_acc, summary.final_acc));
    }
    std::fs::create_dir_all(&dir)?;
    let mut table = File::create(dir.join("ablation.tsv"))?;
    writeln!(table, "variant\tdida_params\tbest_acc\tfinal_acc")?;
    println!("{:<20} {:>12} {:>9} {:>9}", "variant", "dida params", "best", "final");
    let fmt = |a: Option<f64>| a.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
    for (name, params, best, last) in &rows {
        writeln!(table, "{name}\t{params}\t{}\t{}", fmt(*best), fmt(*last))?;
        println!("{name:<20} {params:>12} {:>9} {:>9}", fmt(*best), fmt(*last));
    }
    Ok(())
}

/// A dataset picked for evaluation or export; labels are absent for
/// unlabelled target data.
struct Picked {
    domain: String,
    images: UnlabeledSet,
    labels: Option<Vec<u8>>,
}

fn labelled(set: &LabeledSet) -> Picked {
    Picked {
        domain: set.domain.clone(),
        images: set.unlabeled(),
        labels: Some(set.labels.clone()),
    }
}

fn pick(cfg: &ExperimentConfig, which: &str) -> anyhow::Result<Vec<Picked>> {
    let data = load_data(cfg)?;
    let target = || Picked {
        domain: data.target.domain.clone(),
        images: data.target.clone(),
        labels: data.target_labels.clone(),
    };
    let picked = match which {
        "target_test" => match &data.target_test {
            Some(s) => vec![labelled(s)],
            None => bail!(Error::Config("the config has no labelled target test set".into())),
        },
        "target" => vec![target()],
        "source" => data.sources.iter().map(labelled).collect(),
        "all" => {
            let mut v: Vec<Picked> = data.sources.iter().map(labelled).collect();
            v.push(target());
            v
        }
        other => match other.strip_prefix("source").and_then(|i| i.parse::<usize>().ok()) {
            Some(i) if i < data.sources.len() => vec![labelled(&data.sources[i])],
            _ => bail!(Error::Config(format!(
                "unknown dataset `{other}`; expected target_test, target, source, sourceN or all"
            ))),
        },
    };
    Ok(picked)
}

fn load_model(args: &ModelArgs) -> anyhow::Result<(ExperimentConfig, Model<f32>)> {
    if !args.checkpoint.is_file() {
        bail!(Error::Config(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let config = match &args.config {
        Some(c) => c.clone(),
        None => args
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("resolved-config.toml"),
    };
    let cfg = ExperimentConfig::load(&config, &args.overrides)?;
    let mut model = model_for(&cfg)?;
    checkpoint::load_into(model.store_mut(), &args.checkpoint)?;
    Ok((cfg, model))
}

fn cmd_eval(args: &ModelArgs) -> anyhow::Result<()> {
    let (cfg, model) = load_model(args)?;
    for p in pick(&cfg, &args.dataset)? {
        let Some(labels) = &p.labels else {
            bail!(Error::Config(format!("dataset `{}` has no labels", p.domain)));
        };
        let x = normalize(&p.images.images, &cfg.data.normalization)?;
        let (logits, _) = model.infer(&x, args.batch)?;
        let pred = pseudo_label(&logits)?.0;
        println!("{}\t{}\t{:.4}", p.domain, labels.len(), accuracy(&pred, labels)?);
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> anyhow::Result<()> {
    let (cfg, model) = load_model(&args.model)?;
    let picked = pick(&cfg, &args.model.dataset)?;
    let mut out = csv::Writer::from_path(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut header_done = false;
    let mut id = 0usize;
    for p in &picked {
        let x = normalize(&p.images.images, &cfg.data.normalization)?;
        let (_, feats) = model.infer(&x, args.model.batch)?;
        let d = feats.shape()[1];
        if !header_done {
            let mut h = vec!["id".to_string(), "domain".into(), "label".into()];
            h.extend((0..d).map(|j| format!("z_{j}")));
            out.write_record(&h)?;
            header_done = true;
        }
        for (i, row) in feats.data().chunks(d).enumerate() {
            let label = p.labels.as_ref().map_or(-1, |l| i64::from(l[i]));
            let mut rec = vec![id.to_string(), p.domain.clone(), label.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
            id += 1;
        }
    }
    out.flush()?;
    println!("wrote {id} rows to {}", args.out.display());
    Ok(())
}

fn cmd_cache(args: &CacheArgs) -> anyhow::Result<()> {
    let cfg = args.config.load(None)?;
    let picked = pick(&cfg, &args.dataset)?;
    let many = picked.len() > 1;
    for (i, p) in picked.iter().enumerate() {
        let mut prefix = args.out.clone().into_os_string();
        if many {
            prefix.push(format!("-{i}"));
        }
        let path = |suffix: &str| {
            let mut s = prefix.clone();
            s.push(suffix);
            PathBuf::from(s)
        };
        let (ip, lp) = (path("-images-idx3-ubyte"), path("-labels-idx1-ubyte"));
        let lp = p.labels.as_ref().map(|_| lp);
        write_idx(&p.images.images, p.labels.as_deref(), &ip, lp.as_deref())?;
        println!("{}\t{}\t{}", p.domain, p.images.images.count, ip.display());
    }
    Ok(())
}

fn prefix_of(layer: &str) -> &'static str {
    if layer.starts_with("dida") {
        "dida."
    } else if layer.starts_with("head.") {
        "head."
    } else if layer.starts_with("classifier") {
        "classifier."
    } else {
        "backbone."
    }
}

fn cmd_count(args: &CountArgs) -> anyhow::Result<()> {
    let cfg = args.config.load(None)?;
    let model = model_for(&cfg)?;
    let rows = model.summary([1, cfg.model.in_channels, args.size, args.size])?;
    println!("{:<18} {:<18} {:>12} {:>14}", "layer", "output", "params", "MACs");
    for r in &rows {
        let shape = r.out_shape[1..].iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        println!("{:<18} {:<18} {:>12} {:>14}", r.name, shape, group(r.params as u64), group(r.macs));
    }
    println!();
    println!("{:<18} {:>12} {:>14}", "prefix", "params", "MACs");
    for prefix in PARAM_PREFIXES {
        let macs: u64 = rows.iter().filter(|r| prefix_of(&r.name) == prefix).map(|r| r.macs).sum();
        let label = prefix.trim_end_matches('.');
        println!("{label:<18} {:>12} {:>14}", group(model.count_params(prefix) as u64), group(macs));
    }
    println!(
        "{:<18} {:>12} {:>14}",
        "total",
        group(model.count_params("") as u64),
        group(rows.iter().map(|r| r.macs).sum())
    );
    Ok(())
}

/// Thousands separators, `24594` -> `24,594`.
fn group(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn cmd_gradcheck(args: &GradcheckArgs) -> anyhow::Result<()> {
    let names: Vec<&str> = if args.ops == "all" {
        CASE_NAMES.to_vec()
    } else {
        args.ops.split(',').map(str::trim).collect()
    };
    for n in &names {
        if !CASE_NAMES.contains(n) {
            bail!(Error::Config(format!("unknown op `{n}`; known: {}", CASE_NAMES.join(", "))));
        }
    }
    let cfg = GradcheckConfig {
        tolerance: args.tolerance,
        max_coords: if args.max_coords == 0 { usize::MAX } else { args.max_coords },
        ..Default::default()
    };
    let report = run_suite(&names, 0..args.seeds, &cfg)?;
    println!("{:<28} {:>6} {:>12}", "op", "seeds", "max rel err");
    let mut failed = Vec::new();
    for (name, err, seeds) in report.worst_by_case() {
        let verdict = if err <= args.tolerance { "ok" } else { "FAIL" };
        println!("{name:<28} {seeds:>6} {err:>12.3e} {verdict}");
        if err > args.tolerance {
            failed.push(name);
        }
    }
    println!("{} cases in {:.2}s", report.cases.len(), report.elapsed.as_secs_f64());
    if !failed.is_empty() {
        return Err(GradcheckFailed(failed.join(", ")).into());
    }
    Ok(())
}
