//! Acceptance suite: one test per criterion, each printing a PASS line
//! when it holds (run with `--nocapture` to see them). Budgets are
//! wall-clock upper bounds; every tolerance is pinned in code.
//!
//! 1. Oracle equivalence at 1e-10 on the seeded instance suites.
//! 2. Gradient check against central finite differences at 1e-4.
//! 3. Memory-update protocol invariants plus idempotence.
//! 4. Default configuration fidelity (exact values).
//! 5. Self-match regime: static noise-free tracking at IoU >= 0.99.
//! 6. Ablation direction on the committed drift+distractor scenario.
//! 7. Byte-identical reruns, worker count invisible in the numbers.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cme_core::dfl::{dfl_backward, dfl_forward, dfl_init_params};
use cme_core::matching::{compute_affinity, normalize_features, similarity_maps, topk_average};
use cme_core::memory::{cme_update, init_memory};
use cme_core::pipeline::{mean_iou, run_tracker, DflMode, TrackerOptions};
use cme_core::rng::SplitMix64;
use cme_core::scenario::{generate_scenario, SyntheticScenario};
use cme_core::types::{CmeConfig, FeatureMap, Mask, MemoryStrategy, ENTRY_TOL};
use cme_oracle::instances::{matching_dims, random_bank, random_map, random_unit_map};
use cme_oracle::{
    fd_gradients, max_relative_error, naive_affinity, naive_cme_trace, naive_dfl_forward,
    naive_similarity, naive_topk,
};

const ORACLE_TOL: f64 = 1e-10;

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn budget(start: Instant, limit: Duration, what: &str) -> Duration {
    let elapsed = start.elapsed();
    assert!(elapsed < limit, "{what} took {elapsed:?}, budget {limit:?}");
    elapsed
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn criterion_1_oracle_equivalence() {
    let start = Instant::now();

    // compute_affinity vs naive triple loop, 200 instances.
    let mut rng = SplitMix64::new(0xAC_01);
    for trial in 0..200 {
        let (h, w, c, n) = matching_dims(&mut rng);
        let query = random_unit_map(&mut rng, h, w, c);
        let bank = random_bank(&mut rng, n, c);
        let fast = compute_affinity(&query, &bank).unwrap();
        let slow = naive_affinity(&query, &bank).unwrap();
        let diff = max_abs_diff(fast.data(), slow.data());
        assert!(diff <= ORACLE_TOL, "affinity trial {trial}: {diff}");
    }

    // topk_average vs full-sort reference, 200 instances.
    for trial in 0..200 {
        let len = 1 + rng.next_below(64);
        let k = 1 + rng.next_below(12);
        let v = rng.uniform_vec(len, -1.0, 1.0);
        let diff = (topk_average(&v, k).unwrap() - naive_topk(&v, k).unwrap()).abs();
        assert!(diff <= ORACLE_TOL, "topk trial {trial}: {diff}");
    }

    // similarity_maps vs the naive pipeline, 200 instances.
    for trial in 0..200 {
        let (h, w, c, n) = matching_dims(&mut rng);
        let k = 1 + rng.next_below(8);
        let query = random_unit_map(&mut rng, h, w, c);
        let bank = random_bank(&mut rng, n, c);
        let (scores, _) = similarity_maps(&query, &bank, k).unwrap();
        let (fg, bg) = naive_similarity(&query, &bank, k).unwrap();
        let diff = max_abs_diff(scores.fg(), &fg).max(max_abs_diff(scores.bg(), &bg));
        assert!(diff <= ORACLE_TOL, "similarity trial {trial}: {diff}");
    }

    // cme_update trace vs straight-line protocol, 20 sequences.
    for seed in 0..20u64 {
        let frames = trace_frames(seed);
        let reports = naive_cme_trace(&frames, &CmeConfig::default()).unwrap();
        let (f0, m0) = &frames[0];
        let mut bank = init_memory(f0, m0, &m0.complement()).unwrap();
        for (t, (fm, fg)) in frames.iter().enumerate().skip(1) {
            let a = compute_affinity(fm, &bank).unwrap();
            let report = cme_update(
                &mut bank,
                fm,
                fg,
                &fg.complement(),
                &a,
                &CmeConfig::default(),
            )
            .unwrap();
            let oracle = &reports[t - 1];
            assert_eq!(
                report.merged_count, oracle.merged_count,
                "seed {seed} frame {t}"
            );
            assert_eq!(report.expanded_count, oracle.expanded_count);
            assert_eq!(report.discarded_count, oracle.discarded_count);
            assert_eq!(report.bank_size_after, oracle.bank_size_after);
            assert!((report.avg_threshold - oracle.avg_threshold).abs() <= ORACLE_TOL);
        }
    }

    // dfl_forward vs explicit loops, 100 instances.
    for trial in 0..100 {
        let h = 1 + rng.next_below(4);
        let w = 1 + rng.next_below(4);
        let c = 1 + rng.next_below(6);
        let d = 1 + rng.next_below(6);
        let params = dfl_init_params(rng.next_u64(), c, d).unwrap();
        let query = random_map(&mut rng, h, w, c);
        let reference = random_map(&mut rng, h, w, c);
        let mask = Mask::new(h, w, rng.uniform_vec(h * w, 0.0, 1.0)).unwrap();
        let gate = (rng.next_f64() < 0.5).then_some(&mask);
        let (fast, _) = dfl_forward(&query, &reference, gate, &params).unwrap();
        let slow = naive_dfl_forward(&query, &reference, gate, &params).unwrap();
        let diff = max_abs_diff(fast.data(), slow.data());
        assert!(diff <= ORACLE_TOL, "dfl trial {trial}: {diff}");
    }

    let elapsed = budget(start, Duration::from_secs(30), "criterion 1");
    println!("ACCEPTANCE 1 (oracle equivalence, 200/200/200/20/100 at 1e-10): PASS in {elapsed:?}");
}

fn trace_frames(seed: u64) -> Vec<(FeatureMap, Mask)> {
    let mut rng = SplitMix64::new(0xACE + seed);
    let h = 2 + rng.next_below(4);
    let w = 2 + rng.next_below(4);
    let c = 4 + rng.next_below(8);
    let mut frames: Vec<(FeatureMap, Mask)> = Vec::new();
    for t in 0..10 {
        let fm = if t == 0 {
            random_unit_map(&mut rng, h, w, c)
        } else {
            let prev = frames[t - 1].0.clone();
            let mut data = Vec::with_capacity(h * w * c);
            for i in 0..h * w {
                if rng.next_f64() < 0.5 {
                    data.extend_from_slice(prev.pixel(i));
                } else {
                    data.extend_from_slice(&rng.unit_vec(c));
                }
            }
            FeatureMap::new(h, w, c, data).unwrap()
        };
        let mask = Mask::new(
            h,
            w,
            (0..h * w)
                .map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        frames.push((fm, mask));
    }
    frames
}

#[test]
fn criterion_2_gradient_check() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut rng = SplitMix64::new(0x6D);
    for instance in 0..20 {
        let h = 1 + rng.next_below(4);
        let w = 1 + rng.next_below(4);
        let c = 2 + rng.next_below(3);
        let d = 1 + rng.next_below(4);
        assert!(h * w <= 16 && d <= 4);
        let params = dfl_init_params(rng.next_u64(), c, d).unwrap();
        let query = random_map(&mut rng, h, w, c);
        let reference = random_map(&mut rng, h, w, c);
        let mask = Mask::new(h, w, rng.uniform_vec(h * w, 0.0, 1.0)).unwrap();
        let loss_grad = random_map(&mut rng, h, w, d);

        let (_, cache) = dfl_forward(&query, &reference, Some(&mask), &params).unwrap();
        let analytic = dfl_backward(&loss_grad, &cache, &query, &reference, &params).unwrap();
        let numeric =
            fd_gradients(&params, &query, &reference, Some(&mask), &loss_grad, 1e-5).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "instance {instance}: max relative error {err}");
        worst = worst.max(err);
    }
    let elapsed = budget(start, Duration::from_secs(60), "criterion 2");
    println!(
        "ACCEPTANCE 2 (gradient check, 20 instances, max rel err {worst:.3e} < 1e-4): PASS in {elapsed:?}"
    );
}

#[test]
fn criterion_3_cme_protocol_invariants() {
    let spec_text = fs::read_to_string(scenario_path("drift_distractor.toml")).unwrap();
    for seed in 1..=20u64 {
        let mut spec = SyntheticScenario::from_toml(&spec_text).unwrap();
        spec.seed = seed;
        spec.frame_count = 10;
        let frames: Vec<(FeatureMap, Mask)> = generate_scenario(&spec)
            .unwrap()
            .into_iter()
            .map(|(fm, truth)| (normalize_features(&fm), truth))
            .collect();

        let (f0, m0) = &frames[0];
        let mut bank = init_memory(f0, m0, &m0.complement()).unwrap();
        let hw = f0.pixel_count();
        for (t, (fm, fg)) in frames.iter().enumerate().skip(1) {
            let a = compute_affinity(fm, &bank).unwrap();
            let report = cme_update(
                &mut bank,
                fm,
                fg,
                &fg.complement(),
                &a,
                &CmeConfig::default(),
            )
            .unwrap();
            assert_eq!(
                report.classified_total(),
                hw,
                "seed {seed} frame {t}: conservation"
            );
            for entry in bank.entries() {
                let norm: f64 = entry.key().iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() <= ENTRY_TOL, "seed {seed} frame {t}");
                assert!(
                    (entry.fg() + entry.bg() - 1.0).abs() <= ENTRY_TOL,
                    "seed {seed} frame {t}"
                );
            }
        }

        // Idempotence: re-present the last frame.
        let (last, last_fg) = frames.last().unwrap();
        let a = compute_affinity(last, &bank).unwrap();
        cme_update(
            &mut bank,
            last,
            last_fg,
            &last_fg.complement(),
            &a,
            &CmeConfig::default(),
        )
        .unwrap();
        let a2 = compute_affinity(last, &bank).unwrap();
        let second = cme_update(
            &mut bank,
            last,
            last_fg,
            &last_fg.complement(),
            &a2,
            &CmeConfig::default(),
        )
        .unwrap();
        assert_eq!(second.expanded_count, 0, "seed {seed}: idempotence");
    }
    println!("ACCEPTANCE 3 (cme protocol invariants, 20 sequences x 10 frames): PASS");
}

#[test]
fn criterion_4_defaults_fidelity() {
    let cfg = CmeConfig::default();
    assert_eq!(cfg.top_k, 3);
    assert_eq!(cfg.upper_threshold, 0.90);
    assert_eq!(cfg.fusion_weight, 0.001);
    println!("ACCEPTANCE 4 (defaults K=3, zeta=0.90, beta=0.001): PASS");
}

#[test]
fn criterion_5_self_match_regime() {
    let start = Instant::now();
    let spec_text = fs::read_to_string(scenario_path("static.toml")).unwrap();
    let strategies = [
        MemoryStrategy::InitialOnly,
        MemoryStrategy::AllFrames,
        MemoryStrategy::Compact,
    ];
    let modes = [DflMode::Off, DflMode::Full, DflMode::NoPosterior];
    for seed in 1..=5u64 {
        let mut spec = SyntheticScenario::from_toml(&spec_text).unwrap();
        spec.seed = seed;
        let frames = generate_scenario(&spec).unwrap();
        for strategy in strategies {
            for mode in modes {
                let cfg = CmeConfig {
                    strategy,
                    ..CmeConfig::default()
                };
                let params = match mode {
                    DflMode::Off => None,
                    _ => Some(dfl_init_params(seed, spec.c, spec.c).unwrap()),
                };
                let opts = TrackerOptions {
                    dfl_mode: mode,
                    dfl_params: params,
                    ..TrackerOptions::default()
                };
                let results = run_tracker(&frames, &cfg, &opts).unwrap();
                let miou = mean_iou(&results);
                assert!(
                    miou >= 0.99,
                    "seed {seed} strategy {strategy:?} dfl {mode:?}: mean iou {miou}"
                );
            }
        }
    }
    let elapsed = budget(start, Duration::from_secs(10), "criterion 5");
    println!(
        "ACCEPTANCE 5 (self-match: 5 seeds x 3 strategies x 3 dfl modes, mean IoU >= 0.99): PASS in {elapsed:?}"
    );
}

/// Seeds committed for the ablation direction check.
const ABLATION_SEEDS: &str = "1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16,17,18,19,20";

#[test]
fn criterion_6_ablation_direction() {
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_cme"))
        .args(["ablate", "--seeds", ABLATION_SEEDS, "--scenario"])
        .arg(scenario_path("drift_distractor.toml"))
        .arg("--out")
        .arg(out.path())
        .status()
        .unwrap();
    assert!(status.success());

    let csv = fs::read_to_string(out.path().join("ablation.csv")).unwrap();
    let mut per_variant: std::collections::HashMap<&str, Vec<f64>> =
        std::collections::HashMap::new();
    let mut data_rows = 0;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields[0] == "mean" {
            continue;
        }
        data_rows += 1;
        per_variant
            .entry(match fields[1] {
                "baseline" => "baseline",
                "+dfl_n" => "+dfl_n",
                "+dfl" => "+dfl",
                "+me_all" => "+me_all",
                "+cme" => "+cme",
                "+cme+dfl" => "+cme+dfl",
                other => panic!("unexpected variant {other}"),
            })
            .or_default()
            .push(fields[2].parse::<f64>().unwrap());
    }
    assert_eq!(data_rows, 20 * 6, "expected one row per (seed, variant)");
    for variant in ["baseline", "+dfl_n", "+dfl", "+me_all", "+cme", "+cme+dfl"] {
        assert_eq!(
            per_variant[variant].len(),
            20,
            "variant {variant} missing rows"
        );
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let compact = mean(&per_variant["+cme"]);
    let initial_only = mean(&per_variant["baseline"]);
    assert!(
        compact > initial_only,
        "direction violated: compact {compact} vs initial-only {initial_only}"
    );

    let elapsed = budget(start, Duration::from_secs(300), "criterion 6");
    println!(
        "ACCEPTANCE 6 (ablation direction: compact {compact:.4} > initial-only {initial_only:.4}, 120 rows): PASS in {elapsed:?}"
    );
}

#[test]
fn criterion_7_determinism() {
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let out_threads = tempfile::tempdir().unwrap();
    let scenario = scenario_path("drift_distractor.toml");

    for (out, threads) in [
        (out_a.path(), "1"),
        (out_b.path(), "1"),
        (out_threads.path(), "8"),
    ] {
        let status = Command::new(env!("CARGO_BIN_EXE_cme"))
            .env("CME_THREADS", threads)
            .args(["run", "--dfl", "full", "--scenario"])
            .arg(&scenario)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }

    let csv_a = fs::read(out_a.path().join("frames.csv")).unwrap();
    let csv_b = fs::read(out_b.path().join("frames.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "repeated runs must be byte-identical");

    let csv_threads = fs::read(out_threads.path().join("frames.csv")).unwrap();
    assert_eq!(
        csv_a, csv_threads,
        "CME_THREADS=1 and CME_THREADS=8 must agree"
    );
    let json_a = fs::read(out_a.path().join("metrics.json")).unwrap();
    let json_threads = fs::read(out_threads.path().join("metrics.json")).unwrap();
    assert_eq!(json_a, json_threads);

    println!("ACCEPTANCE 7 (byte-identical reruns; worker count invisible): PASS");
}
