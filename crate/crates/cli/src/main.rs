use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ptm_distill::data::{LabeledDataset, Recipe, SyntheticDataset, ToyConfig};
use ptm_distill::distill::{self, resolve_alpha, DistillJob};
use ptm_distill::harness::{self, CrossArchReport, EvalConfig, EvalReport};
use ptm_distill::models::{ArchitectureSpec, Family, ModelCheckpoint, PretrainSchedule};
use ptm_distill::supervision::PretrainedPool;

#[derive(Parser)]
#[command(name = "ptm-distill", version, about = "Dataset distillation with pre-trained-model supervision")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy train/test split.
    GenData(GenData),
    /// Pre-train a pool of checkpoints.
    Pretrain(Pretrain),
    /// Run a distillation job.
    Distill(Distill),
    /// Train on a synthetic set and report test accuracy.
    Eval(Eval),
    /// Write penultimate features of a dataset as CSV.
    ExportFeatures(ExportFeatures),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    recipe: Recipe,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 300)]
    per_class: usize,
    #[arg(long, default_value_t = 250)]
    test_per_class: usize,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long, default_value_t = 16)]
    size: usize,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    arch: Family,
    /// Directory written by gen-data, or a dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Number of initialization seeds (N_m).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
    #[arg(long, value_delimiter = ',')]
    snapshots: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Distill {
    /// JSON job file; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sweep the supervision weight; one output subdirectory per value.
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    synthetic: PathBuf,
    /// Directory written by gen-data, or a test dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "arch", required = true)]
    archs: Vec<Family>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// An `eval.json` from an earlier run to compare against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportFeatures {
    #[arg(long)]
    model: PathBuf,
    /// A labeled or synthetic dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn split_path(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{split}.bin"))
    } else {
        data.to_path_buf()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = match a.recipe {
        Recipe::BlobsA => ToyConfig::blobs(a.classes, a.per_class, a.seed),
        Recipe::StripesB => ToyConfig::stripes(a.classes, a.per_class, a.seed),
    };
    cfg.size = a.size;
    if let Some(s) = a.separation {
        cfg.separation = s;
    }
    let mut test_cfg = cfg.clone();
    test_cfg.per_class = a.test_per_class;
    test_cfg.seed = a.seed.wrapping_add(1);
    let train = cfg.generate()?;
    let test = test_cfg.generate()?;
    train.save(&a.out.join("train.bin"))?;
    test.save(&a.out.join("test.bin"))?;
    let mut m = cfg.manifest();
    m.set("test_per_class", a.test_per_class).set("test_seed", test_cfg.seed);
    m.save(&a.out.join("manifest.txt"))?;
    log::info!("wrote {} train and {} test images to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

fn pretrain(a: Pretrain) -> Result<()> {
    let data = LabeledDataset::load(&split_path(&a.data, "train"))?;
    let spec = ArchitectureSpec::preset(a.arch, data.geometry(), data.classes());
    let schedule = match a.snapshots {
        Some(s) => PretrainSchedule::with_snapshots(s),
        None => PretrainSchedule::default(),
    };
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.seed_base + i).collect();
    let pool = PretrainedPool::train(&[spec], &seeds, &data, &schedule)?;
    let manifest = pool.save(&a.out)?;
    log::info!("{} checkpoints, manifest {}", pool.checkpoints().len(), manifest.display());
    Ok(())
}

fn run_distill(a: Distill) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut job: DistillJob =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let data_path = job.data.as_deref().context("job has no `data` path")?;
    let train = LabeledDataset::load(&split_path(&resolve(base, data_path), "train"))?;
    let pool = match &job.supervision.pool {
        Some(p) => {
            let p = resolve(base, p);
            job.supervision.pool = Some(p.clone());
            Some(PretrainedPool::load(&p)?)
        }
        None => None,
    };
    job.data = Some(resolve(base, data_path));
    let grid = a.alpha_grid.as_deref();
    let jobs = resolve_alpha(&job.supervision, grid)?.jobs(&job);
    for j in &jobs {
        let dir = match grid {
            Some(_) => a.out.join(format!("alpha-{}", j.alpha()?)),
            None => a.out.clone(),
        };
        let outcome = distill::run(j, &train, pool.as_ref())?;
        for w in &outcome.warnings {
            log::warn!("{w}");
        }
        outcome.write(j, &dir)?;
        let last = outcome.log.last();
        log::info!(
            "{}: {} iterations, final total loss {}",
            dir.display(),
            outcome.log.len(),
            last.map_or(f64::NAN, |r| r.total_loss)
        );
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let syn = SyntheticDataset::load(&a.synthetic)?;
    let test = LabeledDataset::load(&split_path(&a.data, "test"))?;
    let mut cfg = EvalConfig {
        repeats: a.repeats,
        seed: a.seed,
        ..EvalConfig::default()
    };
    if let Some(e) = a.epochs {
        cfg.schedule.epochs = e;
        cfg.schedule.milestones = vec![e / 2];
    }
    let baseline: Option<BTreeMap<String, EvalReport>> = match &a.baseline {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    if let Some(b) = &baseline {
        if let Some(arch) = a.archs.iter().find(|x| !b.contains_key(x.id())) {
            bail!("baseline has no entry for `{arch}`");
        }
    }
    let mut reports = BTreeMap::new();
    for &arch in &a.archs {
        let r = harness::evaluate(&syn, &test, arch, &cfg)?;
        log::info!("{arch}: mean {:.4} std {:.4}", r.mean, r.std);
        reports.insert(arch.id().to_string(), r);
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let path = a.out.join("eval.json");
    fs::write(&path, serde_json::to_string_pretty(&reports)?).with_context(|| format!("writing {}", path.display()))?;
    let invalid: Vec<&str> = reports.values().filter(|r| !r.valid()).map(|r| r.arch.as_str()).collect();
    if let Some(b) = baseline {
        let cross = CrossArchReport::from_reports(reports.clone(), &b)?;
        cross.save(&a.out.join("cross_arch.json"))?;
        log::info!("average gain {:.4}", cross.avg_gain);
    }
    if !invalid.is_empty() {
        bail!("too many failed repeats on {}", invalid.join(", "));
    }
    Ok(())
}

fn export_features(a: ExportFeatures) -> Result<()> {
    let model = ModelCheckpoint::load(&a.model)?;
    let (images, labels) = match LabeledDataset::load(&a.data) {
        Ok(d) => (d.images().clone(), d.labels().to_vec()),
        Err(_) => {
            let s = SyntheticDataset::load(&a.data)
                .with_context(|| format!("{} is neither a dataset nor a synthetic set", a.data.display()))?;
            (s.images().clone(), s.labels().to_vec())
        }
    };
    harness::export_features(&model, &images, &labels, &a.out)?;
    Ok(())
}

/// Machine-readable error record for stderr.
fn error_record(e: &anyhow::Error) -> serde_json::Value {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<ptm_distill::Error>())
        .map_or("cli", |e| e.kind());
    let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
    serde_json::json!({ "error": { "kind": kind, "message": chain.join(": ") } })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Distill(a) => run_distill(a),
        Command::Eval(a) => eval(a),
        Command::ExportFeatures(a) => export_features(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
