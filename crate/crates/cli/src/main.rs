//! Batch command-line entry point.
//!
//! Subcommands: `gen` materializes a synthetic sequence to disk, `run`
//! tracks one sequence and writes metrics, `ablate` sweeps the memory and
//! attention variants over a seed list, `gradcheck` verifies the
//! attention backward pass against central finite differences.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error.
//! `CME_THREADS` bounds worker concurrency; results do not depend on it.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use cme_core::dfl::{dfl_backward, dfl_forward, dfl_init_params, DflParams};
use cme_core::io::{atomic_write, save_feature_map, save_mask_pgm};
use cme_core::pipeline::{mean_iou, run_tracker, DflMode, FrameResult, TrackerOptions};
use cme_core::rng::SplitMix64;
use cme_core::scenario::{generate_scenario, SyntheticScenario};
use cme_core::types::{CmeConfig, CmeError, FeatureMap, Mask, MemoryStrategy};
use cme_oracle::{fd_gradients, worst_offender};

/// Offset between the scenario seed and the seed used for DFL parameters,
/// so the two generators never share a stream.
const DFL_SEED_SALT: u64 = 0x0DF1;

#[derive(Parser)]
#[command(
    name = "cme",
    version,
    about = "Compact memory embedding tracker harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence to disk (feature maps + truth masks).
    Gen(GenArgs),
    /// Track one sequence and write metrics.json + frames.csv.
    Run(RunArgs),
    /// Sweep the six strategy/attention variants over a seed list.
    Ablate(AblateArgs),
    /// Verify attention gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scenario description (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CommonRunArgs {
    /// Scenario description (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Top-K override.
    #[arg(long)]
    topk: Option<usize>,
    /// Merge threshold override, in (0, 1].
    #[arg(long)]
    zeta: Option<f64>,
    /// Merge blend weight override, in [0, 1].
    #[arg(long)]
    beta: Option<f64>,
    /// Cap on non-initial entries kept by the all-frames strategy.
    #[arg(long)]
    all_frames_cap: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Memory strategy.
    #[arg(long, default_value = "compact")]
    strategy: String,
    /// Deformable feature variant.
    #[arg(long, default_value = "off")]
    dfl: String,
    /// Scenario seed override (at most one value).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Also write per-frame predicted masks under masks/.
    #[arg(long)]
    masks: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Scenario seeds, one sweep cell per (seed, variant).
    #[arg(long, required = true, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    height: usize,
    #[arg(long, default_value_t = 2)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    hidden: usize,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Deliberately corrupt one analytic gradient entry (negative control).
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CME_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: CME_THREADS must be a positive integer, got '{threads}'");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn cmd_gen(args: &GenArgs) -> Result<ExitCode, CmeError> {
    let spec = SyntheticScenario::load(&args.scenario)?;
    let frames = generate_scenario(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    for (t, (fm, truth)) in frames.iter().enumerate() {
        save_feature_map(fm, &args.out.join(format!("frame_{t:03}.txt")))?;
        save_mask_pgm(truth, &args.out.join(format!("truth_{t:03}.pgm")))?;
    }
    println!(
        "wrote {} frames (features + truth masks) to {}",
        frames.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Resolved configuration echoed into metrics.json for provenance.
#[derive(Serialize)]
struct ConfigEcho {
    scenario: String,
    strategy: String,
    top_k: usize,
    zeta: f64,
    beta: f64,
    dfl: String,
    seed: u64,
    all_frames_cap: Option<usize>,
}

#[derive(Serialize)]
struct UpdateEcho {
    merged: usize,
    expanded: usize,
    discarded: usize,
    bank_size_before: usize,
    bank_size_after: usize,
    avg_threshold: f64,
}

#[derive(Serialize)]
struct FrameEcho {
    frame: usize,
    iou: f64,
    update: UpdateEcho,
}

#[derive(Serialize)]
struct Metrics {
    version: String,
    config: ConfigEcho,
    frame_count: usize,
    mean_iou: f64,
    min_iou: f64,
    final_bank_size: usize,
    frames: Vec<FrameEcho>,
}

fn frame_echoes(results: &[FrameResult]) -> Vec<FrameEcho> {
    results
        .iter()
        .map(|r| FrameEcho {
            frame: r.frame,
            iou: r.iou,
            update: UpdateEcho {
                merged: r.report.merged_count,
                expanded: r.report.expanded_count,
                discarded: r.report.discarded_count,
                bank_size_before: r.report.bank_size_before,
                bank_size_after: r.report.bank_size_after,
                avg_threshold: r.report.avg_threshold,
            },
        })
        .collect()
}

fn resolve_config(common: &CommonRunArgs, strategy: MemoryStrategy) -> Result<CmeConfig, CmeError> {
    let mut cfg = CmeConfig {
        strategy,
        ..CmeConfig::default()
    };
    if let Some(k) = common.topk {
        cfg.top_k = k;
    }
    if let Some(z) = common.zeta {
        cfg.upper_threshold = z;
    }
    if let Some(b) = common.beta {
        cfg.fusion_weight = b;
    }
    cfg.all_frames_cap = common.all_frames_cap;
    cfg.validate()?;
    Ok(cfg)
}

fn tracker_options(dfl: DflMode, seed: u64, channels: usize) -> Result<TrackerOptions, CmeError> {
    let params = match dfl {
        DflMode::Off => None,
        _ => Some(dfl_init_params(
            seed.wrapping_add(DFL_SEED_SALT),
            channels,
            channels,
        )?),
    };
    Ok(TrackerOptions {
        dfl_mode: dfl,
        dfl_params: params,
        ..TrackerOptions::default()
    })
}

fn frames_csv(results: &[FrameResult]) -> String {
    let mut csv = String::from("frame,iou,bank_size,merged,expanded,discarded\n");
    for r in results {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.frame,
            r.iou,
            r.report.bank_size_after,
            r.report.merged_count,
            r.report.expanded_count,
            r.report.discarded_count
        ));
    }
    csv
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode, CmeError> {
    if args.seeds.len() > 1 {
        return Err(CmeError::Invalid(format!(
            "run accepts at most one seed, got {}",
            args.seeds.len()
        )));
    }
    let strategy = MemoryStrategy::parse(&args.strategy)?;
    let dfl = DflMode::parse(&args.dfl)?;
    let cfg = resolve_config(&args.common, strategy)?;

    let mut spec = SyntheticScenario::load(&args.common.scenario)?;
    if let Some(&seed) = args.seeds.first() {
        spec.seed = seed;
    }
    let frames = generate_scenario(&spec)?;
    let opts = tracker_options(dfl, spec.seed, spec.c)?;
    let results = run_tracker(&frames, &cfg, &opts)?;

    std::fs::create_dir_all(&args.common.out)?;
    let metrics = Metrics {
        version: format!("cme {}", env!("CARGO_PKG_VERSION")),
        config: ConfigEcho {
            scenario: args.common.scenario.display().to_string(),
            strategy: strategy.as_str().into(),
            top_k: cfg.top_k,
            zeta: cfg.upper_threshold,
            beta: cfg.fusion_weight,
            dfl: dfl.as_str().into(),
            seed: spec.seed,
            all_frames_cap: cfg.all_frames_cap,
        },
        frame_count: results.len(),
        mean_iou: mean_iou(&results),
        min_iou: results.iter().map(|r| r.iou).fold(f64::INFINITY, f64::min),
        final_bank_size: results.last().map_or(0, |r| r.report.bank_size_after),
        frames: frame_echoes(&results),
    };
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| CmeError::Invalid(format!("metrics serialization: {e}")))?;
    atomic_write(&args.common.out.join("metrics.json"), json.as_bytes())?;
    atomic_write(
        &args.common.out.join("frames.csv"),
        frames_csv(&results).as_bytes(),
    )?;
    if args.masks {
        let mask_dir = args.common.out.join("masks");
        std::fs::create_dir_all(&mask_dir)?;
        for r in &results {
            save_mask_pgm(&r.mask, &mask_dir.join(format!("mask_{:03}.pgm", r.frame)))?;
        }
    }
    println!(
        "tracked {} frames: mean iou {:.4}, final bank size {}",
        metrics.frame_count, metrics.mean_iou, metrics.final_bank_size
    );
    Ok(ExitCode::SUCCESS)
}

/// The six ablation variants, in output order.
const VARIANTS: [(&str, MemoryStrategy, DflMode); 6] = [
    ("baseline", MemoryStrategy::InitialOnly, DflMode::Off),
    ("+dfl_n", MemoryStrategy::InitialOnly, DflMode::NoPosterior),
    ("+dfl", MemoryStrategy::InitialOnly, DflMode::Full),
    ("+me_all", MemoryStrategy::AllFrames, DflMode::Off),
    ("+cme", MemoryStrategy::Compact, DflMode::Off),
    ("+cme+dfl", MemoryStrategy::Compact, DflMode::Full),
];

struct AblationCell {
    seed: u64,
    variant: usize,
    mean_iou: f64,
    final_bank_size: usize,
}

fn cmd_ablate(args: &AblateArgs) -> Result<ExitCode, CmeError> {
    if args.seeds.is_empty() {
        return Err(CmeError::Invalid(
            "ablate needs a non-empty seed list".into(),
        ));
    }
    let base_spec = SyntheticScenario::load(&args.common.scenario)?;

    let mut cells: Vec<(u64, usize)> = Vec::new();
    for &seed in &args.seeds {
        for variant in 0..VARIANTS.len() {
            cells.push((seed, variant));
        }
    }

    // Cells are independent; rows come back in input order regardless of
    // the worker count.
    let results: Result<Vec<AblationCell>, CmeError> = cells
        .par_iter()
        .map(|&(seed, variant)| {
            let (_, strategy, dfl) = VARIANTS[variant];
            let cfg = resolve_config(&args.common, strategy)?;
            let mut spec = base_spec.clone();
            spec.seed = seed;
            let frames = generate_scenario(&spec)?;
            let opts = tracker_options(dfl, seed, spec.c)?;
            let results = run_tracker(&frames, &cfg, &opts)?;
            Ok(AblationCell {
                seed,
                variant,
                mean_iou: mean_iou(&results),
                final_bank_size: results.last().map_or(0, |r| r.report.bank_size_after),
            })
        })
        .collect();
    let mut rows = results?;
    rows.sort_by_key(|c| (c.seed, c.variant));

    let mut csv = String::from("seed,variant,mean_iou,final_bank_size\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.seed, VARIANTS[row.variant].0, row.mean_iou, row.final_bank_size
        ));
    }
    // Summary block: per-variant means across seeds.
    for (variant, (name, _, _)) in VARIANTS.iter().enumerate() {
        let of_variant: Vec<&AblationCell> = rows.iter().filter(|c| c.variant == variant).collect();
        let mean: f64 =
            of_variant.iter().map(|c| c.mean_iou).sum::<f64>() / of_variant.len() as f64;
        let mean_bank: f64 = of_variant
            .iter()
            .map(|c| c.final_bank_size as f64)
            .sum::<f64>()
            / of_variant.len() as f64;
        csv.push_str(&format!("mean,{name},{mean},{mean_bank}\n"));
    }

    std::fs::create_dir_all(&args.common.out)?;
    atomic_write(&args.common.out.join("ablation.csv"), csv.as_bytes())?;
    println!(
        "ablation over {} seeds x {} variants written to {}",
        args.seeds.len(),
        VARIANTS.len(),
        args.common.out.join("ablation.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn random_map(rng: &mut SplitMix64, h: usize, w: usize, c: usize) -> Result<FeatureMap, CmeError> {
    FeatureMap::new(h, w, c, rng.uniform_vec(h * w * c, -1.0, 1.0))
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode, CmeError> {
    if args.height * args.width > 16 {
        return Err(CmeError::Invalid(format!(
            "gradcheck grids must satisfy h*w <= 16, got {}x{}",
            args.height, args.width
        )));
    }
    if args.channels == 0 || args.hidden == 0 || args.instances == 0 {
        return Err(CmeError::Invalid(
            "channels, hidden, and instances must be positive".into(),
        ));
    }

    let mut worst: (f64, &'static str, usize) = (0.0, "w_f", 0);
    for instance in 0..args.instances {
        let iseed = args.seed.wrapping_add(instance as u64);
        let params: DflParams = dfl_init_params(iseed, args.channels, args.hidden)?;
        let mut rng = SplitMix64::new(iseed ^ 0x5A17);
        let query = random_map(&mut rng, args.height, args.width, args.channels)?;
        let reference = random_map(&mut rng, args.height, args.width, args.channels)?;
        let mask = Mask::new(
            args.height,
            args.width,
            rng.uniform_vec(args.height * args.width, 0.0, 1.0),
        )?;
        let loss_grad = random_map(&mut rng, args.height, args.width, args.hidden)?;

        let (_, cache) = dfl_forward(&query, &reference, Some(&mask), &params)?;
        let mut analytic = dfl_backward(&loss_grad, &cache, &query, &reference, &params)?;
        if args.corrupt_gradient {
            analytic.w_f[0] += 1.0;
        }
        let numeric = fd_gradients(
            &params,
            &query,
            &reference,
            Some(&mask),
            &loss_grad,
            args.step,
        )?;
        let (matrix, err) = worst_offender(&analytic, &numeric);
        if err > worst.0 {
            worst = (err, matrix, instance);
        }
    }

    println!(
        "max relative error {:.3e} (matrix {} on instance {}, {} instances, step {:.1e})",
        worst.0, worst.1, worst.2, args.instances, args.step
    );
    if worst.0 < args.tolerance {
        println!("gradcheck PASS (tolerance {:.1e})", args.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "gradcheck FAIL: worst offender {} with relative error {:.3e} >= {:.1e}",
            worst.1, worst.0, args.tolerance
        );
        Ok(ExitCode::from(1))
    }
}
