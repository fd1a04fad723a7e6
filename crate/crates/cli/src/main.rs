use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dtop_core::bench::config::{ExperimentConfig, Manifest, Overrides};
use dtop_core::bench::data::Dataset;
use dtop_core::bench::eval::{evaluate, evaluate_with, EvalReport};
use dtop_core::bench::train::{train, Scheme};
use dtop_core::bench::viz::{encode_ppm, export_visuals, label_map_rgb, Layout, PnmEncoding};
use dtop_core::checkpoint;
use dtop_core::cost::{dataset_average, model_macs, CostConfig, CostReport, OccupancySchedule};
use dtop_core::engine::{PruneConfig, PruneMethod};
use dtop_core::tensor::{DType, Real};
use dtop_core::vit::Model;

macro_rules! dispatch {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

#[derive(Parser)]
#[command(name = "dtop", version, about = "Dynamic token pruning for ViT segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and evaluate it on the held-out split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Analytic cost of a configuration or a recorded run.
    Cost(CostArgs),
    /// Export prediction maps and exit masks.
    Viz(VizArgs),
    /// Evaluate a checkpoint over a grid of thresholds.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    method: Option<PruneMethod>,
    /// Stage boundaries, comma separated (e.g. `3,4`).
    #[arg(long, value_delimiter = ',')]
    boundaries: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let cfg = self.resolve_model_only()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Skips the data/training checks; enough for cost accounting.
    fn resolve_model_only(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        cfg.apply(&Overrides {
            p0: self.p0,
            k: self.k,
            method: self.method,
            boundaries: self.boundaries.clone(),
            seed: self.seed,
        });
        cfg.model.validate()?;
        cfg.prune.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Starting checkpoint; required for `direct` and `finetune`.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate without pruning.
    #[arg(long)]
    no_prune: bool,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    common: Common,
    /// JSON occupancy schedule `{"layers": [...], "heads": [...]}`.
    #[arg(long, conflicts_with = "report")]
    schedule: Option<PathBuf>,
    /// Recorded evaluation report (`report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Count auxiliary heads in the full-occupancy schedule.
    #[arg(long)]
    with_aux: bool,
    /// Also write the cost table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of evaluation images to export.
    #[arg(long, default_value_t = 8)]
    images: usize,
    #[arg(long, default_value = "binary")]
    encoding: PnmEncoding,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.8,0.9,0.95,1.0")]
    grid: Vec<f64>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train(a) => {
            let cfg = a.common.resolve()?;
            dispatch!(cfg.precision, run_train(&a, cfg))
        }
        Command::Eval(a) => {
            let cfg = a.common.resolve()?;
            dispatch!(cfg.precision, run_eval(&a, cfg))
        }
        Command::Cost(a) => run_cost(&a),
        Command::Viz(a) => {
            let cfg = a.common.resolve()?;
            dispatch!(cfg.precision, run_viz(&a, cfg))
        }
        Command::Sweep(a) => {
            let cfg = a.common.resolve()?;
            dispatch!(cfg.precision, run_sweep(&a, cfg))
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(dir: &Path, name: &str, report: &EvalReport) -> Result<()> {
    write_file(&dir.join(format!("{name}.json")), &report.to_json()?)?;
    write_file(&dir.join(format!("{name}_images.csv")), &report.to_csv()?)
}

fn load_model<T: Real>(path: &Path, cfg: &ExperimentConfig) -> Result<Model<T>> {
    let model: Model<T> = checkpoint::load(path)?;
    if model.config != cfg.model {
        bail!(
            "checkpoint {} was trained with a different model config",
            path.display()
        );
    }
    Ok(model)
}

fn run_train<T: Real>(a: &TrainArgs, mut cfg: ExperimentConfig) -> Result<()> {
    if let Some(s) = a.scheme {
        cfg.train.scheme = s;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let out = &a.common.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Manifest::new("train", &cfg).write(out)?;

    let mut model: Model<T> = match (cfg.train.scheme, &a.init) {
        (Scheme::Direct | Scheme::Finetune, None) => {
            bail!("scheme {} needs --init <checkpoint>", cfg.train.scheme)
        }
        (Scheme::Direct | Scheme::Finetune, Some(p)) => load_model(p, &cfg)?,
        (_, _) => Model::init(cfg.model.clone(), cfg.seed)?,
    };
    let patch = cfg.model.backbone.patch;
    let train_set = Dataset::<T>::train_split(&cfg.data.scene, cfg.data.train_images, patch)?;
    log::info!(
        "training {} for {} iterations on {} images",
        cfg.train.scheme,
        cfg.train.effective_iterations(),
        train_set.len()
    );
    let curve = train(&mut model, &train_set, &cfg.train, &cfg.prune)?;
    let mut loss_csv = String::from("iteration,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(loss_csv, "{i},{l}");
    }
    write_file(&out.join("loss.csv"), &loss_csv)?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;

    let eval_set = Dataset::<T>::eval_split(&cfg.data.scene, cfg.data.eval_images, patch)?;
    let prune = match cfg.train.scheme {
        Scheme::Baseline => PruneConfig::disabled(),
        _ => cfg.prune.clone(),
    };
    let report = evaluate(&model, &eval_set, &prune)?;
    write_report(out, "report", &report)?;
    println!("{}", report.summary());
    Ok(())
}

fn run_eval<T: Real>(a: &EvalArgs, cfg: ExperimentConfig) -> Result<()> {
    let out = &a.common.out;
    Manifest::new("eval", &cfg).write(out)?;
    let model: Model<T> = load_model(&a.checkpoint, &cfg)?;
    let eval_set =
        Dataset::<T>::eval_split(&cfg.data.scene, cfg.data.eval_images, cfg.model.backbone.patch)?;
    let prune = if a.no_prune {
        PruneConfig::disabled()
    } else {
        cfg.prune.clone()
    };
    let report = evaluate(&model, &eval_set, &prune)?;
    write_report(out, "report", &report)?;
    println!("{}", report.summary());
    Ok(())
}

fn run_cost(a: &CostArgs) -> Result<()> {
    let cfg = a.common.resolve_model_only()?;
    let cost_cfg = CostConfig::from(&cfg.model);
    let (occ, text) = if let Some(report) = &a.report {
        let text = std::fs::read_to_string(report)
            .with_context(|| format!("reading {}", report.display()))?;
        let report = EvalReport::from_json(&text)?;
        let costs = report
            .per_image
            .iter()
            .map(|r| model_macs(&cost_cfg, &r.occupancy))
            .collect::<dtop_core::Result<Vec<CostReport>>>()?;
        let avg = dataset_average(&costs)?;
        let occ = mean_occupancy(&report);
        let summary = model_macs(&cost_cfg, &occ)?;
        let mut text = format!(
            "images = {}\navg_macs = {avg:.1}\navg_gflops = {:.4}\n\nmean occupancy (rounded):\n",
            costs.len(),
            avg / 1e9
        );
        text.push_str(&summary.to_text(&occ));
        (occ, text)
    } else {
        let occ = match &a.schedule {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str::<OccupancySchedule>(&text)
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => OccupancySchedule::full(&cost_cfg, a.with_aux),
        };
        let report = model_macs(&cost_cfg, &occ)?;
        let text = report.to_text(&occ);
        (occ, text)
    };
    print!("{text}");
    if let Some(path) = &a.csv {
        let report = model_macs(&cost_cfg, &occ)?;
        write_file(path, &report.to_csv(&occ)?)?;
    }
    Ok(())
}

fn mean_occupancy(report: &EvalReport) -> OccupancySchedule {
    let n = report.per_image.len().max(1);
    let first = report.per_image.first().map(|r| &r.occupancy);
    let (layers, heads) = first.map(|o| (o.layers.len(), o.heads.len())).unwrap_or((0, 0));
    let mut occ = OccupancySchedule::empty(layers, heads);
    let mean = |f: &dyn Fn(&OccupancySchedule) -> usize| {
        let s: usize = report.per_image.iter().map(|r| f(&r.occupancy)).sum();
        (s as f64 / n as f64).round() as usize
    };
    for l in 0..layers {
        occ.layers[l] = mean(&|o| o.layers[l]);
    }
    for h in 0..heads {
        occ.heads[h] = mean(&|o| o.heads[h]);
    }
    occ
}

fn run_viz<T: Real>(a: &VizArgs, cfg: ExperimentConfig) -> Result<()> {
    let out = &a.common.out;
    Manifest::new("viz", &cfg).write(out)?;
    let model: Model<T> = load_model(&a.checkpoint, &cfg)?;
    let b = &cfg.model.backbone;
    let eval_set = Dataset::<T>::eval_split(&cfg.data.scene, a.images, b.patch)?;
    let layout = Layout {
        grid_w: b.grid_w(),
        grid_h: b.grid_h(),
        patch: b.patch,
        exit_stages: b.stage_boundaries.len(),
    };
    let mut written = 0;
    evaluate_with(&model, &eval_set, &cfg.prune, |i, o| {
        let stem = format!("img{i:03}");
        let files = export_visuals(out, &stem, &o.pixel_labels(&model), &o.exits, layout, a.encoding)?;
        let gt = out.join(format!("{stem}_gt.ppm"));
        let bytes = encode_ppm(b.image_w, b.image_h, &label_map_rgb(&eval_set.pixel_labels[i]), a.encoding);
        std::fs::write(&gt, bytes).map_err(|e| dtop_core::Error::Io { path: gt, source: e })?;
        written += files.len() + 1;
        Ok(())
    })?;
    println!("wrote {written} files to {}", out.display());
    Ok(())
}

fn run_sweep<T: Real>(a: &SweepArgs, cfg: ExperimentConfig) -> Result<()> {
    let out = &a.common.out;
    Manifest::new("sweep", &cfg).write(out)?;
    let model: Model<T> = load_model(&a.checkpoint, &cfg)?;
    let eval_set =
        Dataset::<T>::eval_split(&cfg.data.scene, cfg.data.eval_images, cfg.model.backbone.patch)?;
    let base = evaluate(&model, &eval_set, &PruneConfig::disabled())?;
    let mut csv = String::from("p0,miou,avg_macs,macs_reduction\n");
    let _ = writeln!(csv, "baseline,{},{},0", base.miou, base.avg_macs);
    for &p0 in &a.grid {
        let prune = PruneConfig {
            p0,
            ..cfg.prune.clone()
        };
        let r = evaluate(&model, &eval_set, &prune)?;
        let reduction = 1.0 - r.avg_macs / base.avg_macs;
        println!("p0={p0:<5} miou={:.4} avg_macs={:.0} reduction={:.1}%", r.miou, r.avg_macs, 100.0 * reduction);
        let _ = writeln!(csv, "{p0},{},{},{reduction}", r.miou, r.avg_macs);
        write_report(out, &format!("report_p0_{p0}"), &r)?;
    }
    write_file(&out.join("sweep.csv"), &csv)
}
