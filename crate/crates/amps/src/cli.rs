//! `ampslab` command-line harness.
//!
//! Every subcommand reads an optional JSON experiment config, applies
//! overrides, and writes its outputs atomically under `--out`. Re-running a
//! command with the same config and seed reproduces the same files.

use crate::config::ExperimentConfig;
use crate::conflict::{evaluate_steering, generate_conflict_dataset, ConflictDataset, EvalReport};
use crate::diagnostics::{modality_contribution, IsotropicGaussian};
use crate::error::{AmpsError, Result};
use crate::model::{accuracy, train_toy_model, Checkpoint, ToyMllm};
use crate::report::{write_json, write_sweep_csv};
use crate::steering::{build_artifacts_robust, Direction, SteeringArtifacts};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Once;

#[derive(Parser, Debug)]
#[command(name = "ampslab", version, about = "Modality-contribution diagnostics and adaptive steering on a toy multimodal transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Experiment config JSON; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override; fans out to every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "amps-out")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
    Both,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum DirectionArg {
    TowardVisual,
    TowardText,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Direction {
        match d {
            DirectionArg::TowardVisual => Direction::TowardVisual,
            DirectionArg::TowardText => Direction::TowardText,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy model and write `checkpoint.json`.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the modality-contribution diagnostic on one conflict sample.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        /// Index into the conflict set.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Fit the steerer from per-sample diagnostics and write `steerer.json`.
    BuildSteerer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
        /// Use the verbatim scaling composition (factor 2 at the anchor).
        #[arg(long)]
        literal_scaling: bool,
    },
    /// Evaluate steering over an α grid on the conflict set.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated α values, e.g. `0,0.5,1,2`.
        #[arg(long, value_delimiter = ',')]
        alpha_grid: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Both)]
        format: OutputFormat,
    },
    /// Compare full adaptive steering against the unscaled ablation.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',')]
        alpha_grid: Option<Vec<f64>>,
    },
    /// Quick internal consistency checks; exits non-zero on failure.
    Selftest {
        #[command(flatten)]
        common: CommonArgs,
    },
}

static INIT_THREADS: Once = Once::new();

/// Cap the rayon pool via `AMPSLAB_THREADS` (first call wins).
fn init_thread_pool() {
    INIT_THREADS.call_once(|| {
        if let Ok(v) = std::env::var("AMPSLAB_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_master_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint.json")
}

fn steerer_path(out: &Path) -> PathBuf {
    out.join("steerer.json")
}

fn train_and_save(cfg: &ExperimentConfig, out: &Path) -> Result<(ToyMllm, ConflictDataset)> {
    let data = generate_conflict_dataset(&cfg.dataset, &cfg.model)?;
    let (model, loss_curve) = train_toy_model(&data.train, &cfg.model, &cfg.train)?;
    let holdout_acc = accuracy(&model, &data.holdout)?;
    write_json(&checkpoint_path(out), &model.checkpoint())?;
    #[derive(Serialize)]
    struct TrainSummary {
        holdout_accuracy: f64,
        final_loss: f64,
        batches: usize,
        loss_curve: Vec<f64>,
    }
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            holdout_accuracy: holdout_acc,
            final_loss: *loss_curve.last().unwrap_or(&f64::NAN),
            batches: loss_curve.len(),
            loss_curve,
        },
    )?;
    println!("trained model: holdout accuracy {holdout_acc:.3}");
    Ok((model, data))
}

/// Load `checkpoint.json` from the out dir, training first if absent.
fn ensure_model(cfg: &ExperimentConfig, out: &Path) -> Result<(ToyMllm, ConflictDataset)> {
    let path = checkpoint_path(out);
    if path.exists() {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let model = ToyMllm::from_checkpoint(ckpt)?;
        let data = generate_conflict_dataset(&cfg.dataset, &cfg.model)?;
        Ok((model, data))
    } else {
        train_and_save(cfg, out)
    }
}

fn ensure_steerer(
    cfg: &ExperimentConfig,
    model: &ToyMllm,
    data: &ConflictDataset,
    out: &Path,
) -> Result<SteeringArtifacts> {
    let path = steerer_path(out);
    if path.exists() {
        let art: SteeringArtifacts = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        art.validate()?;
        Ok(art)
    } else {
        build_and_save_steerer(cfg, model, data, out)
    }
}

fn build_and_save_steerer(
    cfg: &ExperimentConfig,
    model: &ToyMllm,
    data: &ConflictDataset,
    out: &Path,
) -> Result<SteeringArtifacts> {
    let inputs: Vec<_> = data.conflict[..cfg.n_steer_pairs]
        .iter()
        .map(|s| s.input.clone())
        .collect();
    let artifacts = build_artifacts_robust(
        model,
        &inputs,
        &cfg.scaling,
        &cfg.perturbation,
        cfg.rv_median_reps,
        cfg.rv_samples_per_rep,
        cfg.direction,
        &cfg.steerer_train,
    )?;
    write_json(&steerer_path(out), &artifacts)?;
    println!(
        "built steerer: anchor ratio {:.4}, final mse {:.6}",
        artifacts.anchor_ratio, artifacts.final_mse
    );
    Ok(artifacts)
}

fn run_sweep(
    cfg: &ExperimentConfig,
    model: &ToyMllm,
    artifacts: &SteeringArtifacts,
    data: &ConflictDataset,
    alpha_grid: &[f64],
) -> Result<EvalReport> {
    evaluate_steering(model, Some(artifacts), &data.conflict, alpha_grid, &cfg.dataset.vocab)
}

fn cmd_diagnose(cfg: &ExperimentConfig, out: &Path, sample: usize) -> Result<()> {
    let (model, data) = ensure_model(cfg, out)?;
    let s = data
        .conflict
        .get(sample)
        .ok_or_else(|| AmpsError::InvalidArgument(format!("sample {sample} out of range")))?;
    let report = modality_contribution(&model, &s.input, &cfg.perturbation)?;
    write_json(&out.join(format!("mcr_{sample}.json")), &report)?;
    println!(
        "sample {sample} ({}): R_visual {:.4}, R_text {:.4}",
        s.attribute, report.r_visual, report.r_text
    );
    Ok(())
}

fn cmd_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    alpha_grid: Option<Vec<f64>>,
    format: OutputFormat,
) -> Result<()> {
    let grid = alpha_grid.unwrap_or_else(|| cfg.alpha_grid.clone());
    let (model, data) = ensure_model(cfg, out)?;
    let artifacts = ensure_steerer(cfg, &model, &data, out)?;
    let report = run_sweep(cfg, &model, &artifacts, &data, &grid)?;
    if matches!(format, OutputFormat::Json | OutputFormat::Both) {
        write_json(&out.join("sweep.json"), &report)?;
    }
    if matches!(format, OutputFormat::Csv | OutputFormat::Both) {
        write_sweep_csv(&out.join("sweep.csv"), &report)?;
    }
    for row in &report.rows {
        println!(
            "alpha {:>6.2}: visual {:.3} text {:.3} collapse {:.3} flips {:.3}",
            row.alpha, row.visual_rate, row.text_rate, row.collapse_rate, row.flip_rate
        );
    }
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, alpha_grid: Option<Vec<f64>>) -> Result<()> {
    let grid = alpha_grid.unwrap_or_else(|| cfg.alpha_grid.clone());
    let (model, data) = ensure_model(cfg, out)?;
    let adaptive = ensure_steerer(cfg, &model, &data, out)?;

    // Uniform-intensity ablation: β = 0 (s ≡ 1), wide clamp so the scale is
    // genuinely constant. Everything else matches the adaptive arm.
    let mut flat_cfg = cfg.clone();
    flat_cfg.scaling.beta = 0.0;
    flat_cfg.scaling.scale_clamp = (0.0, 3.0);
    let inputs: Vec<_> = data.conflict[..cfg.n_steer_pairs]
        .iter()
        .map(|s| s.input.clone())
        .collect();
    let flat = build_artifacts_robust(
        &model,
        &inputs,
        &flat_cfg.scaling,
        &flat_cfg.perturbation,
        flat_cfg.rv_median_reps,
        flat_cfg.rv_samples_per_rep,
        flat_cfg.direction,
        &flat_cfg.steerer_train,
    )?;

    #[derive(Serialize)]
    struct Ablation {
        adaptive: EvalReport,
        no_scaling: EvalReport,
    }
    let result = Ablation {
        adaptive: run_sweep(cfg, &model, &adaptive, &data, &grid)?,
        no_scaling: run_sweep(cfg, &model, &flat, &data, &grid)?,
    };
    write_json(&out.join("ablation.json"), &result)?;
    for (name, rep) in [("adaptive", &result.adaptive), ("no_scaling", &result.no_scaling)] {
        for row in &rep.rows {
            println!(
                "{name} alpha {:>6.2}: visual {:.3} collapse {:.3} flips {:.3}",
                row.alpha, row.visual_rate, row.collapse_rate, row.flip_rate
            );
        }
    }
    Ok(())
}

fn cmd_selftest(cfg: &ExperimentConfig) -> Result<()> {
    use crate::tensor::{cross_entropy, softmax, Tensor};
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("[{}] {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let p = softmax(&Tensor::new(vec![2], vec![0.0, (3.0f64).ln()]))?;
    check(
        "softmax reference point",
        (p.data()[0] - 0.25).abs() < 1e-12 && (p.data()[1] - 0.75).abs() < 1e-12,
    );

    let u = Tensor::new(vec![4], vec![0.25; 4]);
    let ce = cross_entropy(&u, &u)?;
    check("cross entropy of uniform", (ce - (4.0f64).ln()).abs() < 1e-12);

    let mu = IsotropicGaussian::standard(1);
    let (ent, _) = crate::diagnostics::functional_entropy_mc(
        |z| z[0].exp(),
        &mu,
        200_000,
        cfg.master_seed,
    )?;
    let analytic = 0.5 * (0.5f64).exp();
    check(
        "functional entropy of exp under N(0,1)",
        (ent - analytic).abs() < 0.05 * analytic.abs().max(1.0),
    );

    let model = ToyMllm::new(cfg.model.clone())?;
    let data = generate_conflict_dataset(&cfg.dataset, &cfg.model)?;
    let rep = modality_contribution(&model, &data.conflict[0].input, &cfg.perturbation)?;
    check(
        "contribution ratios normalize",
        (rep.r_visual + rep.r_text - 1.0).abs() < 1e-12,
    );

    if failures > 0 {
        return Err(AmpsError::InvalidArgument(format!(
            "{failures} selftest check(s) failed"
        )));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    init_thread_pool();
    match cli.command {
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            train_and_save(&cfg, &common.out)?;
            Ok(())
        }
        Command::Diagnose { common, sample } => {
            let cfg = load_config(&common)?;
            cmd_diagnose(&cfg, &common.out, sample)
        }
        Command::BuildSteerer {
            common,
            direction,
            literal_scaling,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = direction {
                cfg.direction = d.into();
            }
            if literal_scaling {
                cfg.scaling.literal_composition = true;
            }
            let (model, data) = ensure_model(&cfg, &common.out)?;
            build_and_save_steerer(&cfg, &model, &data, &common.out)?;
            Ok(())
        }
        Command::Sweep {
            common,
            alpha_grid,
            format,
        } => {
            let cfg = load_config(&common)?;
            cmd_sweep(&cfg, &common.out, alpha_grid, format)
        }
        Command::Ablate { common, alpha_grid } => {
            let cfg = load_config(&common)?;
            cmd_ablate(&cfg, &common.out, alpha_grid)
        }
        Command::Selftest { common } => {
            let cfg = load_config(&common)?;
            cmd_selftest(&cfg)
        }
    }
}

/// Parse and run; returns a process exit code instead of exiting, so tests
/// can drive the CLI in-process.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through this path too.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
