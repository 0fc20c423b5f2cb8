use crate::config::FileConfig;
use crate::{Cli, Command, GuidanceArg, MatcherArg, MatchArgs, PipelineArgs, SimilarityArgs, SimulateArgs, SweepArgs, TrajectoryArgs};
use orbis::hwsim::{area_report, speedup_table, Variant};
use orbis::matching::{bsm_match, datm_match_detailed, datm_match_quantized_detailed, DatmConfig, DatmRun, TokenPairSet};
use orbis::pipeline::{
    run_pipeline, synth_trajectory, GuidanceMode, MatcherKind, PipelineOptions, Schedule,
    TrajectoryConfig, WorkloadDesc,
};
use orbis::tensor::cosine_similarity_map;
use orbis::tensor::map_correlation;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub enum CliError {
    /// Bad user input: exit code 2.
    Invalid(String),
    /// Failure while running: exit code 1.
    Runtime(String),
}

type CmdResult = Result<(), CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

struct Ctx {
    cfg: FileConfig,
    out: PathBuf,
    seeds: Vec<u64>,
}

pub fn run(cli: Cli) -> CmdResult {
    let cfg = match &cli.config {
        Some(path) => FileConfig::load(path, &cli.overrides).map_err(invalid)?,
        None => FileConfig::from_overrides(&cli.overrides).map_err(invalid)?,
    };
    if cli.seed.is_empty() {
        return Err(invalid("seed list must not be empty"));
    }
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| invalid(format!("cannot create output dir {}: {e}", cli.out.display())))?;
    let ctx = Ctx {
        cfg,
        out: cli.out.clone(),
        seeds: cli.seed.clone(),
    };
    match cli.command {
        Command::Match(args) => cmd_match(&ctx, &args),
        Command::Similarity(args) => cmd_similarity(&ctx, &args),
        Command::Pipeline(args) => cmd_pipeline(&ctx, &args),
        Command::Simulate(args) => cmd_simulate(&ctx, &args),
        Command::Sweep(args) => cmd_sweep(&ctx, &args),
    }
}

/// All files are written atomically: a temp file in the target directory,
/// then a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> CmdResult {
    let dir = path.parent().unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes)
        .and_then(|()| std::fs::rename(&tmp, path))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_match(ctx: &Ctx, args: &MatchArgs) -> CmdResult {
    if !(0.0..1.0).contains(&args.ratio) {
        return Err(invalid(format!("ratio must be in [0, 1), got {}", args.ratio)));
    }
    let seed = ctx.seeds[0];
    let x = match (&args.input, args.tokens) {
        (Some(path), _) => orbis::io::load_token_matrix(path)
            .map_err(|e| invalid(format!("cannot load {}: {e}", path.display())))?,
        (None, Some(tokens)) => {
            if args.clusters == 0 || args.channels == 0 || tokens < 2 {
                return Err(invalid("synthetic fixture needs tokens >= 2, channels >= 1, clusters >= 1"));
            }
            if args.sigma < 0.0 || args.spread <= 0.0 {
                return Err(invalid("spread must be positive and sigma non-negative"));
            }
            orbis::fixtures::gaussian_clusters(tokens, args.channels, args.clusters, args.spread, args.sigma, seed)
                .map_err(|e| invalid(e.to_string()))?
        }
        (None, None) => {
            return Err(invalid("give either --input <file> or --tokens <n> for a synthetic fixture"))
        }
    };

    let datm_cfg = DatmConfig {
        k_dst: args
            .k_dst
            .or(ctx.cfg.datm.k_dst)
            .unwrap_or_else(|| x.n_tokens().div_ceil(4)),
        reduction_ratio: args.ratio,
        epsilon: ctx.cfg.datm.epsilon.unwrap_or(DatmConfig::DEFAULT_EPSILON),
        max_iterations: ctx
            .cfg
            .datm
            .max_iterations
            .unwrap_or(DatmConfig::DEFAULT_MAX_ITERATIONS),
        seed,
    };
    datm_cfg.validate(x.n_tokens()).map_err(|e| invalid(e.to_string()))?;

    let (pairs, iterations, converged): (TokenPairSet, usize, bool) = match args.matcher {
        MatcherArg::Bsm => {
            let p = bsm_match(&x, args.ratio, seed).map_err(runtime)?;
            (p, 1, true)
        }
        MatcherArg::Datm => {
            let DatmRun { pair_set, iterations, converged, .. } =
                datm_match_detailed(&x, &datm_cfg).map_err(runtime)?;
            (pair_set, iterations, converged)
        }
        MatcherArg::DatmQ => {
            let DatmRun { pair_set, iterations, converged, .. } =
                datm_match_quantized_detailed(&x, &datm_cfg).map_err(runtime)?;
            (pair_set, iterations, converged)
        }
    };

    let out_path = args
        .output
        .clone()
        .unwrap_or_else(|| ctx.out.join("pairs.orbp"));
    let mut bytes = Vec::new();
    orbis::io::write_pair_set(&mut bytes, &pairs).map_err(runtime)?;
    write_atomic(&out_path, &bytes)?;

    println!(
        "matcher={} tokens={} reduced_count={} ratio={} actual_ratio={:.6} mean_pair_loss={:.9} iterations={} converged={} file={}",
        match args.matcher {
            MatcherArg::Bsm => "bsm",
            MatcherArg::Datm => "datm",
            MatcherArg::DatmQ => "datm-q",
        },
        pairs.n_tokens(),
        pairs.reduced_count(),
        args.ratio,
        pairs.actual_ratio(),
        pairs.mean_loss(),
        iterations,
        converged,
        out_path.display()
    );
    Ok(())
}

fn workload_from(traj: &TrajectoryArgs) -> Result<(WorkloadDesc, TrajectoryConfig), CliError> {
    let wl = WorkloadDesc {
        name: "cli".into(),
        n_tokens: traj.tokens,
        n_channels: traj.channels,
        n_heads: traj.heads,
        n_layers: traj.layers,
        n_timesteps: traj.timesteps,
        n_text_tokens: traj.text_tokens,
    };
    wl.validate().map_err(|e| invalid(e.to_string()))?;
    let cfg = TrajectoryConfig {
        temporal_consistency: traj.alpha,
        n_clusters: traj.clusters,
        noise_scale: traj.noise,
        seed: 0,
    };
    cfg.validate().map_err(|e| invalid(e.to_string()))?;
    Ok((wl, cfg))
}

const SIMILARITY_SCHEMA: &str = "# schema: orbis.similarity.v1";

fn cmd_similarity(ctx: &Ctx, args: &SimilarityArgs) -> CmdResult {
    let (wl, base_cfg) = workload_from(&args.traj)?;
    if wl.n_timesteps < 2 {
        return Err(invalid("similarity analysis needs at least 2 timesteps"));
    }
    let mut corr_input = vec![0.0f64; wl.n_layers];
    let mut corr_prev = vec![0.0f64; wl.n_layers];
    let mut count = 0.0;
    for &seed in &ctx.seeds {
        let cfg = TrajectoryConfig { seed, ..base_cfg.clone() };
        let traj = synth_trajectory(&cfg, &wl).map_err(runtime)?;
        for l in 0..wl.n_layers {
            for t in 1..wl.n_timesteps {
                let cur = cosine_similarity_map(&traj.layer(t, l).output);
                let prev = cosine_similarity_map(&traj.layer(t - 1, l).output);
                let input = cosine_similarity_map(&traj.layer(t, l).input);
                corr_prev[l] += map_correlation(&prev, &cur).map_err(runtime)?;
                corr_input[l] += map_correlation(&input, &cur).map_err(runtime)?;
            }
        }
        count += (wl.n_timesteps - 1) as f64;
    }

    let mut csv = String::new();
    let _ = writeln!(csv, "{SIMILARITY_SCHEMA}");
    let _ = writeln!(csv, "layer,corr_input,corr_prev_output");
    for l in 0..wl.n_layers {
        let _ = writeln!(csv, "{},{},{}", l, corr_input[l] / count, corr_prev[l] / count);
    }
    let path = ctx.out.join("similarity.csv");
    write_atomic(&path, csv.as_bytes())?;
    println!(
        "similarity: layers={} seeds={} mean_corr_input={:.6} mean_corr_prev_output={:.6} file={}",
        wl.n_layers,
        ctx.seeds.len(),
        corr_input.iter().sum::<f64>() / (count * wl.n_layers as f64),
        corr_prev.iter().sum::<f64>() / (count * wl.n_layers as f64),
        path.display()
    );
    Ok(())
}

fn cmd_pipeline(ctx: &Ctx, args: &PipelineArgs) -> CmdResult {
    let (wl, base_cfg) = workload_from(&args.traj)?;
    if !(0.0..1.0).contains(&args.ratio) {
        return Err(invalid(format!("ratio must be in [0, 1), got {}", args.ratio)));
    }
    let sched = Schedule::with_pattern(wl.n_timesteps, args.rc_per_fc)
        .map_err(|e| invalid(e.to_string()))?;
    for &seed in &ctx.seeds {
        let tcfg = TrajectoryConfig { seed, ..base_cfg.clone() };
        let traj = synth_trajectory(&tcfg, &wl).map_err(runtime)?;
        let mut opts = PipelineOptions::new(
            match args.matcher {
                MatcherArg::Bsm => MatcherKind::Bsm,
                MatcherArg::Datm => MatcherKind::Datm,
                MatcherArg::DatmQ => MatcherKind::DatmQuantized,
            },
            match args.guidance {
                GuidanceArg::Output => GuidanceMode::Output,
                GuidanceArg::Input => GuidanceMode::Input,
            },
            args.ratio,
            seed,
        );
        opts.datm_k_dst = ctx.cfg.datm.k_dst;
        if let Some(eps) = ctx.cfg.datm.epsilon {
            opts.datm_epsilon = eps;
        }
        if let Some(iters) = ctx.cfg.datm.max_iterations {
            opts.datm_max_iterations = iters;
        }
        let run = run_pipeline(&traj, &sched, &opts).map_err(runtime)?;
        let mut bytes = Vec::new();
        run.write_csv(&mut bytes).map_err(runtime)?;
        let path = ctx.out.join(format!("pipeline_{seed}.csv"));
        write_atomic(&path, &bytes)?;
        let rc_quality: Vec<f64> = run
            .records
            .iter()
            .filter(|r| r.step_kind == orbis::pipeline::StepKind::Rc)
            .map(|r| r.matching_quality)
            .collect();
        let mean_q = if rc_quality.is_empty() {
            0.0
        } else {
            rc_quality.iter().sum::<f64>() / rc_quality.len() as f64
        };
        println!(
            "pipeline: seed={seed} rows={} mean_rc_matching_quality={:.9} file={}",
            run.records.len(),
            mean_q,
            path.display()
        );
    }
    Ok(())
}

const VARIANTS_SCHEMA: &str = "# schema: orbis.variants.v1";
const BREAKDOWN_SCHEMA: &str = "# schema: orbis.breakdown.v1";
const SWEEP_SCHEMA: &str = "# schema: orbis.sweep.v1";

fn preset(name: &str) -> Result<WorkloadDesc, CliError> {
    WorkloadDesc::preset(name).ok_or_else(|| {
        invalid(format!(
            "unknown preset '{name}' (expected toy, cogvideox-like or hunyuanvideo-like)"
        ))
    })
}

fn parse_variants(labels: &[String]) -> Result<Vec<Variant>, CliError> {
    if labels.is_empty() {
        return Ok(Variant::ALL_VARIANTS.to_vec());
    }
    labels
        .iter()
        .map(|l| Variant::parse(l).ok_or_else(|| invalid(format!("unknown variant '{l}'"))))
        .collect()
}

fn cmd_simulate(ctx: &Ctx, args: &SimulateArgs) -> CmdResult {
    let wl = preset(&args.preset)?;
    let variants = parse_variants(&args.variants)?;
    let hw = ctx.cfg.hardware();
    hw.validate().map_err(|e| invalid(e.to_string()))?;
    let params = ctx.cfg.sim_params(&wl.name);
    params.validate().map_err(|e| invalid(e.to_string()))?;
    let sched = Schedule::with_pattern(wl.n_timesteps, params.rc_per_fc)
        .map_err(|e| invalid(e.to_string()))?;

    let rows = speedup_table(&wl, &sched, &variants, &hw, &params).map_err(runtime)?;
    let mut csv = String::new();
    let _ = writeln!(csv, "{VARIANTS_SCHEMA}");
    let _ = writeln!(
        csv,
        "variant,cycles,seconds,speedup_vs_proxy,energy_j,energy_vs_proxy,matching_fully_hidden"
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.cycles,
            r.seconds,
            r.speedup_vs_proxy,
            r.energy_j,
            r.energy_vs_proxy,
            r.matching_fully_hidden
        );
        println!(
            "simulate[{}]: {} speedup={:.3}x energy={:.1}J ({:.3}x of proxy) hidden={}",
            wl.name, r.variant, r.speedup_vs_proxy, r.energy_j, r.energy_vs_proxy, r.matching_fully_hidden
        );
    }
    write_atomic(&ctx.out.join("variants.csv"), csv.as_bytes())?;

    // Area breakdown plus per-variant energy splits.
    let area = area_report(&hw).map_err(runtime)?;
    let mut bd = String::new();
    let _ = writeln!(bd, "{BREAKDOWN_SCHEMA}");
    let _ = writeln!(bd, "kind,variant,component,value");
    for e in &area.entries {
        let _ = writeln!(bd, "area,-,{},{}", e.unit, e.mm2);
    }
    let _ = writeln!(bd, "area,-,total,{}", area.total_mm2);
    let _ = writeln!(bd, "area,-,datm_plus_qe_fraction,{}", area.datm_plus_qe_fraction);
    for &v in &variants {
        if v == Variant::A100Proxy {
            continue;
        }
        let (_, energy) =
            orbis::hwsim::simulate_run(&wl, &sched, v, &hw, &params).map_err(runtime)?;
        for (component, value) in [
            ("sa_j", energy.sa_j),
            ("vpu_j", energy.vpu_j),
            ("qe_j", energy.qe_j),
            ("datm_j", energy.datm_j),
            ("dram_j", energy.dram_j),
            ("total_j", energy.total_j),
            ("datm_plus_qe_fraction", energy.datm_plus_qe_fraction),
        ] {
            let _ = writeln!(bd, "energy,{},{},{}", v.label(), component, value);
        }
    }
    write_atomic(&ctx.out.join("breakdown.csv"), bd.as_bytes())?;
    println!(
        "simulate: wrote {} and {}",
        ctx.out.join("variants.csv").display(),
        ctx.out.join("breakdown.csv").display()
    );
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, args: &SweepArgs) -> CmdResult {
    let wl = preset(&args.preset)?;
    let variant = Variant::parse(&args.variant)
        .ok_or_else(|| invalid(format!("unknown variant '{}'", args.variant)))?;
    if matches!(variant, Variant::A100Proxy | Variant::Base) {
        return Err(invalid(
            "sweep needs a reduction variant (ogm, ogm-datm-nohw or all)",
        ));
    }
    if args.ratios.is_empty() {
        return Err(invalid("ratio list must not be empty"));
    }
    let hw = ctx.cfg.hardware();
    hw.validate().map_err(|e| invalid(e.to_string()))?;
    let base_params = ctx.cfg.sim_params(&wl.name);
    base_params.validate().map_err(|e| invalid(e.to_string()))?;
    let sched = Schedule::with_pattern(wl.n_timesteps, base_params.rc_per_fc)
        .map_err(|e| invalid(e.to_string()))?;

    let mut csv = String::new();
    let _ = writeln!(csv, "{SWEEP_SCHEMA}");
    let _ = writeln!(
        csv,
        "variant,ratio,cycles,seconds,speedup_vs_proxy,energy_j,energy_vs_proxy"
    );
    for &ratio in &args.ratios {
        if !(0.0..1.0).contains(&ratio) {
            return Err(invalid(format!("ratio must be in [0, 1), got {ratio}")));
        }
        let mut params = base_params.clone();
        match variant {
            Variant::Ogm => params.ratio_ogm = ratio,
            Variant::OgmDatmNoHw | Variant::All => params.ratio_datm = ratio,
            _ => unreachable!(),
        }
        let rows = speedup_table(&wl, &sched, &[variant], &hw, &params).map_err(runtime)?;
        let r = &rows[0];
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.variant, ratio, r.cycles, r.seconds, r.speedup_vs_proxy, r.energy_j, r.energy_vs_proxy
        );
        println!(
            "sweep[{}@{}]: ratio={ratio} speedup={:.3}x energy={:.1}J",
            r.variant, wl.name, r.speedup_vs_proxy, r.energy_j
        );
    }
    write_atomic(&ctx.out.join("sweep.csv"), csv.as_bytes())?;
    Ok(())
}
