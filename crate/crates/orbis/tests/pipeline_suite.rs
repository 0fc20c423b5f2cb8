//! Trajectory-harness experiments (output- vs input-guided matching) and
//! pipeline-level behavior beyond the unit tests.

mod common;

use orbis::matching::{datm_match, matching_quality, DatmConfig};
use orbis::pipeline::{
    run_pipeline, sdpa, synth_trajectory, GuidanceMode, MatcherKind, PipelineOptions, PipelineRun,
    Schedule, StepKind, TrajectoryConfig, WorkloadDesc,
};
use orbis::tensor::{cosine_similarity_map, map_correlation, TokenMatrix};

fn harness_workload() -> WorkloadDesc {
    WorkloadDesc {
        name: "harness".into(),
        n_tokens: 96,
        n_channels: 16,
        n_heads: 2,
        n_layers: 2,
        n_timesteps: 5,
        n_text_tokens: 0,
    }
}

fn trajectory(alpha: f64, seed: u64) -> orbis::pipeline::Trajectory {
    let cfg = TrajectoryConfig {
        temporal_consistency: alpha,
        n_clusters: 8,
        noise_scale: 0.3,
        seed,
    };
    synth_trajectory(&cfg, &harness_workload()).unwrap()
}

/// Mean over timesteps >= 1 (layer 0) of the correlation between the current
/// output map and (previous-output map, current-input map).
fn correlations(alpha: f64, seed: u64) -> (f64, f64) {
    let traj = trajectory(alpha, seed);
    let wl = harness_workload();
    let mut prev_sum = 0.0;
    let mut input_sum = 0.0;
    let mut count = 0.0;
    for t in 1..wl.n_timesteps {
        let cur = cosine_similarity_map(&traj.layer(t, 0).output);
        let prev = cosine_similarity_map(&traj.layer(t - 1, 0).output);
        let input = cosine_similarity_map(&traj.layer(t, 0).input);
        prev_sum += map_correlation(&prev, &cur).unwrap();
        input_sum += map_correlation(&input, &cur).unwrap();
        count += 1.0;
    }
    (prev_sum / count, input_sum / count)
}

#[test]
fn sdpa_matches_naive_reference() {
    let q = common::random_matrix(16, 8, 61);
    let k = common::random_matrix(16, 8, 62);
    let v = common::random_matrix(16, 8, 63);
    let got = sdpa(&q, &k, &v, 2).unwrap();
    let expect = common::naive_sdpa(&q, &k, &v, 2);
    for i in 0..16 {
        for c in 0..8 {
            assert!(
                (got.get(i, c) - expect.get(i, c)).abs() < 1e-9,
                "mismatch at ({i},{c})"
            );
        }
    }
}

#[test]
fn frozen_trajectory_has_unit_prev_correlation() {
    let (prev, _) = correlations(1.0, 7);
    assert!((prev - 1.0).abs() < 1e-12);
}

#[test]
fn high_consistency_prev_output_beats_input_correlation() {
    let mut prev_mean = 0.0;
    let mut input_mean = 0.0;
    for seed in 0..20 {
        let (p, i) = correlations(0.9, seed);
        prev_mean += p / 20.0;
        input_mean += i / 20.0;
    }
    assert!(
        prev_mean > input_mean,
        "prev {prev_mean:.4} <= input {input_mean:.4}"
    );
    // The gap should be decisive, not a rounding artifact.
    assert!(prev_mean - input_mean > 0.05);
}

#[test]
fn zero_consistency_matches_unrelated_map_null() {
    // At alpha = 0 each timestep is an independent draw, so the
    // within-trajectory prev/cur correlation is distributed exactly like the
    // cross-seed null. Compare means over matched sample counts.
    let n = 40;
    let mut within = Vec::with_capacity(n);
    for seed in 0..n {
        let traj = trajectory(0.0, seed as u64);
        let a = cosine_similarity_map(&traj.layer(1, 0).output);
        let b = cosine_similarity_map(&traj.layer(2, 0).output);
        within.push(map_correlation(&a, &b).unwrap());
    }
    let mut null = Vec::with_capacity(n);
    for seed in 0..n {
        let ta = trajectory(0.0, 10_000 + seed as u64);
        let tb = trajectory(0.0, 20_000 + seed as u64);
        let a = cosine_similarity_map(&ta.layer(1, 0).output);
        let b = cosine_similarity_map(&tb.layer(1, 0).output);
        null.push(map_correlation(&a, &b).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mw, mn) = (mean(&within), mean(&null));
    assert!(
        (mw - mn).abs() < 0.05,
        "within {mw:.4} vs null {mn:.4} should be indistinguishable"
    );
}

#[test]
fn quality_of_prev_output_matching_beats_input_matching() {
    // Pairs built on the previous output predict redundancy in the current
    // output better than pairs built on the current input, averaged over
    // seeds at high temporal consistency.
    let wl = harness_workload();
    let mut prev_q = 0.0;
    let mut input_q = 0.0;
    let seeds = 24;
    for seed in 0..seeds {
        let traj = trajectory(0.9, 500 + seed);
        for t in 1..wl.n_timesteps {
            let gt = &traj.layer(t, 0).output;
            let cfg = DatmConfig::for_tokens(wl.n_tokens, 0.4, 77 + seed);
            let on_prev = datm_match(&traj.layer(t - 1, 0).output, &cfg).unwrap();
            let on_input = datm_match(&traj.layer(t, 0).input, &cfg).unwrap();
            prev_q += matching_quality(&on_prev, gt).unwrap();
            input_q += matching_quality(&on_input, gt).unwrap();
        }
    }
    assert!(
        prev_q < input_q,
        "prev-output quality {prev_q:.4} not better than input {input_q:.4}"
    );
}

#[test]
fn pipeline_ogm_beats_input_guided_in_paired_seeds() {
    // Micro-scale paired experiment over the full pipeline.
    let wl = WorkloadDesc {
        name: "micro".into(),
        n_tokens: 64,
        n_channels: 16,
        n_heads: 2,
        n_layers: 2,
        n_timesteps: 8,
        n_text_tokens: 0,
    };
    let sched = Schedule::with_pattern(8, 3).unwrap();
    let mut wins = 0;
    let total = 100;
    for seed in 0..total {
        let tcfg = TrajectoryConfig {
            temporal_consistency: 0.9,
            n_clusters: 14,
            noise_scale: 0.25,
            seed: 9000 + seed,
        };
        let traj = synth_trajectory(&tcfg, &wl).unwrap();
        let quality = |guidance: GuidanceMode| -> f64 {
            let opts = PipelineOptions::new(MatcherKind::Datm, guidance, 0.25, seed);
            let run = run_pipeline(&traj, &sched, &opts).unwrap();
            let rc: Vec<&orbis::pipeline::StepRecord> = run
                .records
                .iter()
                .filter(|r| r.step_kind == StepKind::Rc)
                .collect();
            rc.iter().map(|r| r.matching_quality).sum::<f64>() / rc.len() as f64
        };
        if quality(GuidanceMode::Output) < quality(GuidanceMode::Input) {
            wins += 1;
        }
    }
    eprintln!("output-guided wins: {wins}/{total}");
    assert!(wins >= 90, "output-guided won only {wins}/{total}");
}

#[test]
fn csv_schema_is_stable() {
    let wl = WorkloadDesc {
        name: "csv".into(),
        n_tokens: 12,
        n_channels: 8,
        n_heads: 2,
        n_layers: 1,
        n_timesteps: 4,
        n_text_tokens: 0,
    };
    let tcfg = TrajectoryConfig {
        temporal_consistency: 0.9,
        n_clusters: 3,
        noise_scale: 0.2,
        seed: 1,
    };
    let traj = synth_trajectory(&tcfg, &wl).unwrap();
    let sched = Schedule::with_pattern(4, 3).unwrap();
    let opts = PipelineOptions::new(MatcherKind::Bsm, GuidanceMode::Output, 0.25, 3);
    let run = run_pipeline(&traj, &sched, &opts).unwrap();
    let mut out = Vec::new();
    run.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), PipelineRun::CSV_SCHEMA);
    assert_eq!(lines.next().unwrap(), PipelineRun::CSV_HEADER);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4); // 4 timesteps x 1 layer
    // FC, RC, RC, RC pattern echoed in the step_kind column.
    let kinds: Vec<&str> = rows.iter().map(|r| r.split(',').nth(2).unwrap()).collect();
    assert_eq!(kinds, vec!["FC", "RC", "RC", "RC"]);
    for r in &rows {
        assert_eq!(r.split(',').count(), 8);
        assert!(r.split(',').nth(3).unwrap().starts_with("bsm/output"));
    }
}

#[test]
fn text_tokens_are_never_reduced() {
    let wl = WorkloadDesc {
        name: "mm".into(),
        n_tokens: 24,
        n_channels: 8,
        n_heads: 2,
        n_layers: 1,
        n_timesteps: 4,
        n_text_tokens: 6,
    };
    let tcfg = TrajectoryConfig {
        temporal_consistency: 0.9,
        n_clusters: 4,
        noise_scale: 0.2,
        seed: 2,
    };
    let traj = synth_trajectory(&tcfg, &wl).unwrap();
    let sched = Schedule::with_pattern(4, 3).unwrap();
    let opts = PipelineOptions::new(MatcherKind::Datm, GuidanceMode::Output, 0.5, 4);
    let run = run_pipeline(&traj, &sched, &opts).unwrap();
    // All outputs keep the full visual + text length, and reductions touch
    // at most the visual prefix.
    for out in &run.final_outputs {
        assert_eq!(out.n_tokens(), 30);
    }
    for r in run.records.iter().filter(|r| r.step_kind == StepKind::Rc) {
        assert_eq!(r.reduced_tokens, 12); // floor(0.5 * 24)
    }
}

#[test]
fn determinism_across_runs() {
    let wl = harness_workload();
    let tcfg = TrajectoryConfig {
        temporal_consistency: 0.8,
        n_clusters: 6,
        noise_scale: 0.25,
        seed: 42,
    };
    let traj = synth_trajectory(&tcfg, &wl).unwrap();
    let sched = Schedule::with_pattern(wl.n_timesteps, 3).unwrap();
    let opts = PipelineOptions::new(MatcherKind::DatmQuantized, GuidanceMode::Output, 0.3, 9);
    let a = run_pipeline(&traj, &sched, &opts).unwrap();
    let b = run_pipeline(&traj, &sched, &opts).unwrap();
    assert_eq!(a.records.len(), b.records.len());
    for (ra, rb) in a.records.iter().zip(&b.records) {
        assert_eq!(ra, rb);
    }
    for (oa, ob) in a.final_outputs.iter().zip(&b.final_outputs) {
        assert_eq!(oa.data(), ob.data());
    }
}

#[test]
fn toy_matrix_from_trajectory_is_finite_and_shaped() {
    let traj = trajectory(0.5, 3);
    let acts = traj.layer(2, 1);
    assert_eq!(acts.output.n_tokens(), 96);
    assert_eq!(acts.input.n_channels(), 16);
    let _: &TokenMatrix = &acts.input;
}

