use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use glam_core::assignment::{pad_to_common_size, DUMMY_LABEL};
use glam_core::attention::{Checkpoint, Glam, GlamParameters, NetworkConfig, PointFeatureSet};
use glam_core::gradcheck::{run_gradcheck, GradcheckConfig};
use glam_core::pattern::{
    aggregate_category, export_heatmap, extract_sample_adjacency, filter_top_edges,
    pattern_recovery_score, permutation_null, quantile, Image, SampleAdjacency,
};
use glam_core::synthdata::{
    default_margin, generate_dataset, make_template_with, Dataset, GenConfig,
};
use glam_core::training::{evaluate, train_with_observer, OptimizerKind, TrainConfig};
use glam_core::GlamError;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

mod manifest;

use manifest::RunManifest;

/// Graph matching with self- and cross-attention.
#[derive(Parser, Debug)]
#[command(name = "glam", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic keypoint-correspondence dataset.
    GenData(GenDataArgs),
    /// Train a network on a generated dataset.
    Train(TrainArgs),
    /// Report matching accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Extract per-category learnt graph patterns.
    ExtractPattern(PatternArgs),
    /// Compare gradients with finite differences on a tiny random instance.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2)]
    categories: usize,
    /// Training pairs per category.
    #[arg(long, default_value_t = 250)]
    pairs: usize,
    /// Test pairs per category.
    #[arg(long, default_value_t = 100)]
    test_pairs: usize,
    #[arg(long, default_value_t = 10)]
    n_keypoints: usize,
    #[arg(long, default_value_t = 64)]
    feat_dim: usize,
    /// Per-entry feature noise standard deviation.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Per-keypoint occlusion probability.
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Strength of the per-view spatially varying feature offset.
    #[arg(long, default_value_t = 0.0)]
    illumination: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Directory written by gen-data (train.txt, test.txt).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Feature width; must equal the dataset's.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
    #[arg(long, default_value_t = 5.0)]
    pos_weight: f64,
    /// Start from the full-size preset (compute heavy).
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    no_sal: bool,
    #[arg(long)]
    no_cal: bool,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PatternArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pairs_per_category: usize,
    /// Fraction of the heaviest edges kept in the exported pattern.
    #[arg(long, default_value_t = 0.7)]
    keep_fraction: f64,
    /// Label permutations used for the recovery-score null.
    #[arg(long, default_value_t = 1000)]
    null_trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 4)]
    n_points: usize,
}

/// A CLI-level failure with a fixed exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Verification(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Verification(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return match f {
            Failure::Usage(_) => 2,
            Failure::Verification(_) => 4,
        };
    }
    if let Some(g) = err.downcast_ref::<GlamError>() {
        return match g {
            GlamError::Io { .. } | GlamError::Parse { .. } => 1,
            GlamError::Divergence { .. } => 3,
            _ => 2,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 1;
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GLAM_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::ExtractPattern(a) => extract_pattern(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GlamError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| GlamError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn template_seed(seed: u64, category: usize) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add(category as u64 + 1)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.categories == 0 || a.n_keypoints < 2 || a.feat_dim == 0 {
        return Err(Failure::Usage(
            "need --categories ≥ 1, --n-keypoints ≥ 2 and --feat-dim ≥ 1".into(),
        )
        .into());
    }
    let templates = (0..a.categories)
        .map(|c| {
            make_template_with(
                format!("cat{c}"),
                a.n_keypoints,
                a.feat_dim,
                template_seed(a.seed, c),
                default_margin(a.feat_dim),
            )
        })
        .collect::<glam_core::Result<Vec<_>>>()?;
    let base = GenConfig {
        feature_noise_sigma: a.noise,
        dropout_prob: a.dropout,
        illumination: a.illumination,
        ..GenConfig::default()
    };
    let train_cfg = GenConfig {
        seed: a.seed.wrapping_mul(2),
        pairs_per_category: a.pairs,
        ..base.clone()
    };
    let test_cfg = GenConfig {
        seed: a.seed.wrapping_mul(2).wrapping_add(1),
        pairs_per_category: a.test_pairs,
        ..base
    };
    let train = generate_dataset(&templates, &train_cfg)?;
    let test = generate_dataset(&templates, &test_cfg)?;
    create_dir(&a.out)?;
    train.save(&a.out.join("train.txt"))?;
    test.save(&a.out.join("test.txt"))?;
    info!(
        "wrote {} training and {} test pairs to {}",
        train.samples.len(),
        test.samples.len(),
        a.out.display()
    );
    RunManifest::new("gen-data", a)
        .with("train_generator", &train_cfg)
        .with("test_generator", &test_cfg)
        .outputs(&["train.txt", "test.txt"])
        .save(&a.out)
}

fn network_config(a: &TrainArgs, data_dim: usize) -> Result<NetworkConfig> {
    let mut c = if a.paper_scale {
        NetworkConfig::paper_scale()
    } else {
        NetworkConfig::desk()
    };
    if let Some(l) = a.layers {
        c.n_layers = l;
    }
    if let Some(h) = a.heads {
        c.n_self_heads = h;
        c.n_cross_heads = h;
    }
    if let Some(d) = a.dim {
        c.feat_dim = d;
        c.self_dim = d;
        c.cross_dim = d;
    }
    if let Some(k) = a.sinkhorn_iters {
        c.sinkhorn_iters = k;
    }
    c.use_sal = !a.no_sal;
    c.use_cal = !a.no_cal;
    c.validate()?;
    if c.feat_dim != data_dim {
        return Err(Failure::Usage(format!(
            "model feature width {} does not match the dataset's {data_dim} (set --dim {data_dim})",
            c.feat_dim
        ))
        .into());
    }
    Ok(c)
}

fn train(a: &TrainArgs) -> Result<()> {
    if a.no_sal && a.no_cal {
        return Err(Failure::Usage(
            "--no-sal and --no-cal together leave no attention layers".into(),
        )
        .into());
    }
    let train_set = Dataset::load(&a.data.join("train.txt"))?;
    let val_set = Dataset::load(&a.data.join("test.txt"))?;
    let net = network_config(a, train_set.feat_dim)?;
    let tc = TrainConfig {
        pos_weight: a.pos_weight,
        learning_rate: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => OptimizerKind::AdaptiveMoment,
            OptimizerArg::Sgd => OptimizerKind::PlainGradient,
        },
        ..TrainConfig::default()
    };
    let params = GlamParameters::init(&net, a.seed)?;
    create_dir(&a.out)?;
    let (params, report) = train_with_observer(
        params,
        &net,
        &train_set.samples,
        &val_set.samples,
        &tc,
        |s| {
            info!(
                "epoch {:>3}  loss {:.5}  val accuracy {:.4}  ({:.1}s)",
                s.epoch, s.loss, s.accuracy, s.seconds
            )
        },
    )?;
    Glam::new(net.clone(), params)?
        .checkpoint()
        .save(&a.out.join("checkpoint.json"))?;
    let mut csv = String::from("epoch,loss,accuracy\n");
    let mut timing = String::from("epoch,seconds\n");
    for e in &report.epochs {
        let _ = writeln!(csv, "{},{:?},{:?}", e.epoch, e.loss, e.accuracy);
        let _ = writeln!(timing, "{},{:.3}", e.epoch, e.seconds);
    }
    write(&a.out.join("report.csv"), &csv)?;
    write(&a.out.join("timing.csv"), &timing)?;
    RunManifest::new("train", a)
        .with("network", &net)
        .with("training", &tc)
        .outputs(&["checkpoint.json", "report.csv", "timing.csv"])
        .save(&a.out)
}

fn load_model(checkpoint: &Path, data: &Dataset) -> Result<Glam> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config.feat_dim != data.feat_dim {
        return Err(Failure::Usage(format!(
            "checkpoint expects {}-dimensional features, dataset has {}",
            ck.config.feat_dim, data.feat_dim
        ))
        .into());
    }
    Ok(Glam::new(ck.config, ck.params)?)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let glam = load_model(&a.checkpoint, &data)?;
    if data.samples.is_empty() {
        return Err(Failure::Usage(format!("{} contains no samples", a.data.display())).into());
    }
    let mut csv = String::from("category,samples,accuracy\n");
    for (c, info) in data.categories.iter().enumerate() {
        let subset: Vec<_> = data
            .samples
            .iter()
            .filter(|s| s.category == c)
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        let acc = evaluate(&glam, &subset)?;
        println!("{:<16} {:.4}", info.name, acc);
        let _ = writeln!(csv, "{},{},{:?}", info.name, subset.len(), acc);
    }
    let mean = evaluate(&glam, &data.samples)?;
    println!("{:<16} {:.4}", "mean", mean);
    let _ = writeln!(csv, "mean,{},{:?}", data.samples.len(), mean);
    create_dir(&a.out)?;
    write(&a.out.join("metrics.csv"), &csv)?;
    RunManifest::new("eval", a)
        .with("network", &glam.config)
        .outputs(&["metrics.csv"])
        .save(&a.out)
}

fn labels_of(set: &PointFeatureSet) -> Vec<Option<String>> {
    match &set.labels {
        Some(l) => l
            .iter()
            .map(|s| (s != DUMMY_LABEL).then(|| s.clone()))
            .collect(),
        None => vec![None; set.len()],
    }
}

fn extract_pattern(a: &PatternArgs) -> Result<()> {
    if !(a.keep_fraction > 0.0 && a.keep_fraction <= 1.0) {
        return Err(Failure::Usage(format!(
            "--keep-fraction must lie in (0, 1], got {}",
            a.keep_fraction
        ))
        .into());
    }
    let data = Dataset::load(&a.data)?;
    let glam = load_model(&a.checkpoint, &data)?;
    if !glam.config.use_sal {
        return Err(Failure::Usage(
            "checkpoint was trained without self-attention; there is no pattern to extract".into(),
        )
        .into());
    }
    create_dir(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut summary = String::from("category,pairs,recovery_score,null_p95,above_null\n");
    let mut outputs = vec!["recovery.csv".to_string()];
    for (c, info) in data.categories.iter().enumerate() {
        let mut chosen: Vec<_> = data.samples.iter().filter(|s| s.category == c).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(a.pairs_per_category);
        if chosen.is_empty() {
            warn!("category {} has no samples; skipped", info.name);
            continue;
        }
        let mut adj = Vec::with_capacity(2 * chosen.len());
        for s in &chosen {
            let padded = pad_to_common_size(&s.a, &s.b, None)?;
            let trace = glam.forward(&padded.a, &padded.b)?;
            adj.push(SampleAdjacency {
                matrix: extract_sample_adjacency(&trace, Image::A)?,
                labels: labels_of(&padded.a),
            });
            adj.push(SampleAdjacency {
                matrix: extract_sample_adjacency(&trace, Image::B)?,
                labels: labels_of(&padded.b),
            });
        }
        let raw = aggregate_category(&info.labels, &adj)?;
        let kept = filter_top_edges(&raw, a.keep_fraction)?;
        export_heatmap(&raw, &a.out.join(format!("{}_raw", info.name)))?;
        export_heatmap(&kept, &a.out.join(&info.name))?;
        outputs.extend(
            ["_raw.csv", "_raw.pgm"]
                .iter()
                .map(|e| format!("{}{e}", info.name))
                .chain(["csv", "pgm"].iter().map(|e| format!("{}.{e}", info.name))),
        );

        let score = pattern_recovery_score(&raw, info)?;
        let null = permutation_null(&raw, info, a.null_trials, &mut rng)?;
        let p95 = quantile(&null, 0.95).unwrap_or(f64::NAN);
        println!(
            "{:<16} recovery {:.4}  null p95 {:.4}  {}",
            info.name,
            score,
            p95,
            if score > p95 {
                "above null"
            } else {
                "not above null"
            }
        );
        let _ = writeln!(
            summary,
            "{},{},{:?},{:?},{}",
            info.name,
            chosen.len(),
            score,
            p95,
            score > p95
        );
    }
    write(&a.out.join("recovery.csv"), &summary)?;
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    RunManifest::new("extract-pattern", a)
        .with("network", &glam.config)
        .outputs(&outputs)
        .save(&a.out)
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        tolerance: a.tolerance,
        n_points: a.n_points,
        ..GradcheckConfig::default()
    };
    if !(a.tolerance > 0.0) || a.n_points == 0 {
        return Err(
            Failure::Usage("--tolerance must be positive and --n-points ≥ 1".into()).into(),
        );
    }
    let report = run_gradcheck(&cfg).context("gradient check")?;
    for (group, err) in report.by_group() {
        println!("{group:<14} worst relative error {err:.3e}");
    }
    println!(
        "overall        worst relative error {:.3e} (tolerance {:.1e})",
        report.worst(),
        report.tolerance
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        let names: Vec<String> = report
            .failures()
            .iter()
            .map(|p| {
                format!(
                    "{} (entry {}, {:.3e})",
                    p.name, p.worst_entry, p.worst_rel_err
                )
            })
            .collect();
        Err(Failure::Verification(format!("gradient mismatch in: {}", names.join(", "))).into())
    }
}
