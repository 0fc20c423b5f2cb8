//! Full-run simulation: variants, totals, energy and area reports.

use super::timeline::{schedule_fc_step, schedule_rc_step, EngineKind, EngineStat, StepTimeline};
use super::workload::{fc_layer_plan, matching_work, rc_layer_plan, LayerPlan, MatchingMode, MatchingWork};
use super::{HardwareConfig, SimParams};
use crate::error::{Error, Result};
use crate::pipeline::{Schedule, StepKind, WorkloadDesc};
use serde::{Deserialize, Serialize};

/// Evaluated configurations. The proxy runs the vanilla workload on the
/// calibrated A100 roofline; the others run on the modeled hardware with
/// increasing amounts of the reduction stack enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Calibrated-throughput roofline stand-in for the GPU baseline.
    A100Proxy,
    /// Vanilla model on the modeled hardware, no reduction, no matching.
    Base,
    /// Output-guided schedule with the single-pass bipartite matcher on the
    /// DXE; moderate reduction ratio.
    Ogm,
    /// Output-guided schedule with full-precision iterative matching on the
    /// DXE's vector unit (no dedicated engine); high reduction ratio.
    OgmDatmNoHw,
    /// Full stack: quantized iterative matching on the dedicated engines.
    All,
}

impl Variant {
    pub const ALL_VARIANTS: [Variant; 5] = [
        Variant::A100Proxy,
        Variant::Base,
        Variant::Ogm,
        Variant::OgmDatmNoHw,
        Variant::All,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::A100Proxy => "a100-proxy",
            Variant::Base => "base",
            Variant::Ogm => "ogm",
            Variant::OgmDatmNoHw => "ogm-datm-nohw",
            Variant::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Self::ALL_VARIANTS.iter().copied().find(|v| v.label() == s)
    }

    fn reduction_ratio(&self, params: &SimParams) -> f64 {
        match self {
            Variant::A100Proxy | Variant::Base => 0.0,
            Variant::Ogm => params.ratio_ogm,
            Variant::OgmDatmNoHw | Variant::All => params.ratio_datm,
        }
    }

    fn matching_mode(&self) -> MatchingMode {
        match self {
            Variant::A100Proxy | Variant::Base => MatchingMode::None,
            Variant::Ogm => MatchingMode::BsmOnDxe,
            Variant::OgmDatmNoHw => MatchingMode::DatmOnVpu,
            Variant::All => MatchingMode::DatmEngine,
        }
    }
}

/// Whole-run timing totals plus the per-step timelines.
#[derive(Debug, Clone)]
pub struct TimelineReport {
    pub variant: Variant,
    pub steps: Vec<StepTimeline>,
    pub total_cycles: u64,
    pub seconds: f64,
    pub total_matching_cycles: u64,
    pub hidden_matching_cycles: u64,
    /// True when every FC step's matching was fully hidden.
    pub matching_fully_hidden: bool,
}

impl TimelineReport {
    pub fn fc_steps(&self) -> impl Iterator<Item = &StepTimeline> {
        self.steps.iter().filter(|s| s.kind == StepKind::Fc)
    }
}

/// Per-engine energy in joules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub sa_j: f64,
    pub vpu_j: f64,
    pub qe_j: f64,
    pub datm_j: f64,
    pub dram_j: f64,
    pub total_j: f64,
    pub datm_plus_qe_fraction: f64,
}

impl EnergyReport {
    fn from_parts(sa_j: f64, vpu_j: f64, qe_j: f64, datm_j: f64, dram_j: f64) -> Self {
        let total_j = sa_j + vpu_j + qe_j + datm_j + dram_j;
        Self {
            sa_j,
            vpu_j,
            qe_j,
            datm_j,
            dram_j,
            total_j,
            datm_plus_qe_fraction: if total_j > 0.0 {
                (qe_j + datm_j) / total_j
            } else {
                0.0
            },
        }
    }
}

/// Simulates one variant over the schedule.
///
/// `Base` and the proxy run the vanilla model: every scheduled step executes
/// full-length, whatever its kind. The reduction variants honor the FC/RC
/// pattern, with index pairs generated at FC steps and reused at RC steps.
pub fn simulate_run(
    wl: &WorkloadDesc,
    sched: &Schedule,
    variant: Variant,
    cfg: &HardwareConfig,
    params: &SimParams,
) -> Result<(TimelineReport, EnergyReport)> {
    wl.validate()?;
    cfg.validate()?;
    params.validate()?;
    sched.validate()?;

    if variant == Variant::A100Proxy {
        return simulate_proxy(wl, sched, cfg);
    }

    let ratio = variant.reduction_ratio(params);
    let mode = variant.matching_mode();
    let fc_plan: Vec<LayerPlan> = (0..wl.n_layers)
        .map(|_| fc_layer_plan(wl, ratio, cfg))
        .collect();
    let rc_plan: Vec<LayerPlan> = (0..wl.n_layers)
        .map(|_| rc_layer_plan(wl, ratio, cfg))
        .collect();
    let work = matching_work(wl, mode, params, cfg);

    let mut steps = Vec::with_capacity(sched.steps().len());
    for &kind in sched.steps() {
        let step = match (variant, kind) {
            // Vanilla execution ignores the step kinds.
            (Variant::Base, _) => schedule_fc_step(&fc_plan, &MatchingWork::none(), cfg),
            (_, StepKind::Fc) => schedule_fc_step(&fc_plan, &work, cfg),
            (_, StepKind::Rc) => schedule_rc_step(&rc_plan, cfg),
        };
        steps.push(step);
    }

    let total_cycles: u64 = steps.iter().map(|s| s.critical_path_cycles).sum();
    let total_matching: u64 = steps.iter().map(|s| s.total_matching_cycles).sum();
    let hidden: u64 = steps.iter().map(|s| s.hidden_matching_cycles).sum();
    let fully_hidden = steps
        .iter()
        .filter(|s| s.total_matching_cycles > 0)
        .all(|s| s.fully_hidden);

    let energy = energy_report(wl, sched, variant, &fc_plan, &rc_plan, &work, cfg)?;
    let report = TimelineReport {
        variant,
        steps,
        total_cycles,
        seconds: cfg.seconds(total_cycles),
        total_matching_cycles: total_matching,
        hidden_matching_cycles: hidden,
        matching_fully_hidden: fully_hidden,
    };
    Ok((report, energy))
}

fn energy_report(
    wl: &WorkloadDesc,
    sched: &Schedule,
    variant: Variant,
    fc_plan: &[LayerPlan],
    rc_plan: &[LayerPlan],
    work: &MatchingWork,
    cfg: &HardwareConfig,
) -> Result<EnergyReport> {
    let et = &cfg.energy_table;
    let mut sa_ops = 0.0;
    let mut vpu_ops = 0.0;
    let mut qe_ops = 0.0;
    let mut dau_ops = 0.0;
    let mut sorter_ops = 0.0;
    let mut dram_bytes = 0.0;

    let fc_sa: f64 = fc_plan.iter().map(|p| p.sa_macs).sum();
    let fc_vpu: f64 = fc_plan.iter().map(|p| p.vpu_ops).sum();
    let fc_dram: f64 = fc_plan.iter().map(|p| p.dram_bytes as f64).sum();
    let rc_sa: f64 = rc_plan.iter().map(|p| p.sa_macs).sum();
    let rc_vpu: f64 = rc_plan.iter().map(|p| p.vpu_ops).sum();
    let rc_dram: f64 = rc_plan.iter().map(|p| p.dram_bytes as f64).sum();
    let layers = wl.n_layers as f64;

    for &kind in sched.steps() {
        let full_step = variant == Variant::Base || kind == StepKind::Fc;
        if full_step {
            sa_ops += fc_sa;
            vpu_ops += fc_vpu;
            dram_bytes += fc_dram;
        } else {
            sa_ops += rc_sa;
            vpu_ops += rc_vpu;
            dram_bytes += rc_dram;
        }
        if variant != Variant::Base && kind == StepKind::Fc {
            sa_ops += work.sa_macs * layers;
            vpu_ops += work.vpu_ops * layers;
            qe_ops += work.qe_ops * layers;
            dau_ops += work.dau_ops * layers;
            sorter_ops += work.sorter_compares * layers;
        }
    }

    let pj = 1e-12;
    Ok(EnergyReport::from_parts(
        sa_ops * et.sa_mac_pj * pj,
        vpu_ops * et.vpu_op_pj * pj,
        qe_ops * et.qe_op_pj * pj,
        (dau_ops * et.dau_op_pj + sorter_ops * et.sorter_compare_pj) * pj,
        dram_bytes * 8.0 * cfg.dram_pj_per_bit * pj,
    ))
}

fn simulate_proxy(
    wl: &WorkloadDesc,
    sched: &Schedule,
    cfg: &HardwareConfig,
) -> Result<(TimelineReport, EnergyReport)> {
    let plan: Vec<LayerPlan> = (0..wl.n_layers).map(|_| fc_layer_plan(wl, 0.0, cfg)).collect();
    let flops_per_step: f64 = plan.iter().map(|p| p.flops()).sum();
    let bytes_per_step: f64 = plan.iter().map(|p| p.dram_bytes as f64).sum();
    let p = &cfg.a100_proxy;
    let compute_s = flops_per_step / (p.peak_fp16_tflops * 1e12 * p.efficiency);
    let memory_s = bytes_per_step / (p.mem_bw_gbps * 1e9);
    let step_s = compute_s.max(memory_s);
    let step_cycles = (step_s * cfg.clock_ghz * 1e9).ceil() as u64;

    let steps: Vec<StepTimeline> = sched
        .steps()
        .iter()
        .map(|_| StepTimeline {
            kind: StepKind::Fc,
            engines: vec![EngineStat {
                engine: EngineKind::Dxe,
                busy_cycles: step_cycles,
                stall_cycles: 0,
                start: 0,
                end: step_cycles,
            }],
            critical_path_cycles: step_cycles,
            dxe_only_cycles: step_cycles,
            total_matching_cycles: 0,
            hidden_matching_cycles: 0,
            fully_hidden: true,
            dram_bytes: bytes_per_step as u64,
        })
        .collect();

    let total_cycles = step_cycles * sched.steps().len() as u64;
    let seconds = cfg.seconds(total_cycles);
    let energy = EnergyReport {
        sa_j: 0.0,
        vpu_j: 0.0,
        qe_j: 0.0,
        datm_j: 0.0,
        dram_j: 0.0,
        total_j: p.power_w * seconds,
        datm_plus_qe_fraction: 0.0,
    };
    Ok((
        TimelineReport {
            variant: Variant::A100Proxy,
            steps,
            total_cycles,
            seconds,
            total_matching_cycles: 0,
            hidden_matching_cycles: 0,
            matching_fully_hidden: true,
        },
        energy,
    ))
}

/// One row of the variant comparison table, normalized against the proxy.
#[derive(Debug, Clone, Serialize)]
pub struct VariantRow {
    pub variant: &'static str,
    pub cycles: u64,
    pub seconds: f64,
    pub speedup_vs_proxy: f64,
    pub energy_j: f64,
    pub energy_vs_proxy: f64,
    pub matching_fully_hidden: bool,
}

/// Simulates the requested variants and normalizes speedup and energy
/// against the proxy baseline (simulated regardless of whether it appears in
/// `variants`).
pub fn speedup_table(
    wl: &WorkloadDesc,
    sched: &Schedule,
    variants: &[Variant],
    cfg: &HardwareConfig,
    params: &SimParams,
) -> Result<Vec<VariantRow>> {
    let (proxy_report, proxy_energy) = simulate_run(wl, sched, Variant::A100Proxy, cfg, params)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let (report, energy) = if v == Variant::A100Proxy {
            (proxy_report.clone(), proxy_energy.clone())
        } else {
            simulate_run(wl, sched, v, cfg, params)?
        };
        if report.seconds <= 0.0 && proxy_report.seconds > 0.0 {
            return Err(Error::InvalidArgument(format!(
                "variant {} simulated to zero time",
                v.label()
            )));
        }
        rows.push(VariantRow {
            variant: v.label(),
            cycles: report.total_cycles,
            seconds: report.seconds,
            speedup_vs_proxy: if report.seconds > 0.0 {
                proxy_report.seconds / report.seconds
            } else {
                0.0
            },
            energy_j: energy.total_j,
            energy_vs_proxy: if proxy_energy.total_j > 0.0 {
                energy.total_j / proxy_energy.total_j
            } else {
                0.0
            },
            matching_fully_hidden: report.matching_fully_hidden,
        });
    }
    Ok(rows)
}

/// Silicon area entry: one named unit class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaEntry {
    pub unit: &'static str,
    pub mm2: f64,
}

/// Chip-level area breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaReport {
    pub entries: Vec<AreaEntry>,
    pub total_mm2: f64,
    pub datm_plus_qe_fraction: f64,
}

/// Areas from the per-unit table, scaled to the full instance count. The
/// matching-engine entry covers the distance pipeline (min tree included),
/// the top-k sorter and its small vector unit.
pub fn area_report(cfg: &HardwareConfig) -> Result<AreaReport> {
    cfg.validate()?;
    let t = &cfg.area_table;
    let inst = cfg.n_instances as f64;
    let sa = cfg.sa_rows as f64 * cfg.sa_cols as f64 * t.sa_mac_mm2;
    let vpu = cfg.vpu_lanes as f64 * t.vpu_lane_mm2;
    let sram = cfg.global_mem_mb * t.sram_mm2_per_mb;
    let other = t.other_mm2;
    let qe = cfg.vpu_lanes as f64 * t.qe_lane_mm2;
    let datm = cfg.dau_lanes as f64 * t.dau_lane_mm2
        + (cfg.sorter_width as f64 / 2.0) * t.sorter_comparator_mm2
        + t.datm_vector_mm2;

    let entries = vec![
        AreaEntry { unit: "systolic_array", mm2: sa * inst },
        AreaEntry { unit: "vpu", mm2: vpu * inst },
        AreaEntry { unit: "sram", mm2: sram * inst },
        AreaEntry { unit: "interconnect_other", mm2: other * inst },
        AreaEntry { unit: "quant_engine", mm2: qe * inst },
        AreaEntry { unit: "datm_engine", mm2: datm * inst },
    ];
    let total_mm2: f64 = entries.iter().map(|e| e.mm2).sum();
    let fraction = if total_mm2 > 0.0 {
        ((qe + datm) * inst) / total_mm2
    } else {
        0.0
    };
    Ok(AreaReport {
        entries,
        total_mm2,
        datm_plus_qe_fraction: fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_timestep_schedule_is_zero_work() {
        let wl = WorkloadDesc::toy();
        let cfg = HardwareConfig::default();
        let params = SimParams::default();
        let sched = Schedule::new(vec![], 3).unwrap();
        for v in Variant::ALL_VARIANTS {
            let (report, energy) = simulate_run(&wl, &sched, v, &cfg, &params).unwrap();
            assert_eq!(report.total_cycles, 0, "{}", v.label());
            assert_eq!(energy.total_j, 0.0, "{}", v.label());
        }
    }

    #[test]
    fn determinism() {
        let wl = WorkloadDesc::toy();
        let cfg = HardwareConfig::default();
        let params = SimParams::default();
        let sched = Schedule::with_pattern(8, 3).unwrap();
        let (a, ea) = simulate_run(&wl, &sched, Variant::All, &cfg, &params).unwrap();
        let (b, eb) = simulate_run(&wl, &sched, Variant::All, &cfg, &params).unwrap();
        assert_eq!(a.total_cycles, b.total_cycles);
        assert_eq!(ea, eb);
    }

    #[test]
    fn area_accounting_identity_and_zero_table() {
        let cfg = HardwareConfig::default();
        let report = area_report(&cfg).unwrap();
        let sum: f64 = report.entries.iter().map(|e| e.mm2).sum();
        assert!((sum - report.total_mm2).abs() < 1e-9);

        let mut zeroed = HardwareConfig::default();
        zeroed.area_table = super::super::AreaTable {
            sa_mac_mm2: zeroed.area_table.sa_mac_mm2,
            vpu_lane_mm2: 0.0,
            sram_mm2_per_mb: 0.0,
            other_mm2: 0.0,
            qe_lane_mm2: 0.0,
            dau_lane_mm2: 0.0,
            sorter_comparator_mm2: 0.0,
            datm_vector_mm2: 0.0,
        };
        let report = area_report(&zeroed).unwrap();
        assert_eq!(report.datm_plus_qe_fraction, 0.0);
    }

    #[test]
    fn area_rejects_invalid_entries() {
        let mut cfg = HardwareConfig::default();
        cfg.area_table.dau_lane_mm2 = f64::NAN;
        assert!(area_report(&cfg).is_err());
    }

    #[test]
    fn energy_totals_are_sums_of_parts() {
        let wl = WorkloadDesc::toy();
        let cfg = HardwareConfig::default();
        let params = SimParams::default();
        let sched = Schedule::with_pattern(8, 3).unwrap();
        let (_, e) = simulate_run(&wl, &sched, Variant::All, &cfg, &params).unwrap();
        assert!(
            (e.total_j - (e.sa_j + e.vpu_j + e.qe_j + e.datm_j + e.dram_j)).abs()
                <= 1e-12 * e.total_j
        );
    }
}
