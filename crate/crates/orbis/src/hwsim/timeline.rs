//! Step-level engine scheduling.
//!
//! FC steps run diffusion layers back-to-back on the DXE; once a layer's
//! SDPA output exists, that layer's matching work is enqueued — either on
//! the QE/matching-engine pair (overlapped) or appended to the DXE stream
//! itself (exposed). Matching latency counts as hidden exactly when the step
//! critical path equals the matching-free critical path.

use super::workload::{LayerPlan, MatchingWork};
use super::HardwareConfig;
use crate::pipeline::StepKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    Dxe,
    Qe,
    Datm,
    Dram,
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EngineKind::Dxe => "dxe",
            EngineKind::Qe => "qe",
            EngineKind::Datm => "datm",
            EngineKind::Dram => "dram",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineStat {
    pub engine: EngineKind,
    pub busy_cycles: u64,
    pub stall_cycles: u64,
    pub start: u64,
    pub end: u64,
}


/// One timestep's engine occupancy and hiding accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTimeline {
    pub kind: StepKind,
    pub engines: Vec<EngineStat>,
    /// Max engine end within the step.
    pub critical_path_cycles: u64,
    /// DXE end with matching work removed (diffusion only).
    pub dxe_only_cycles: u64,
    pub total_matching_cycles: u64,
    pub hidden_matching_cycles: u64,
    pub fully_hidden: bool,
    pub dram_bytes: u64,
}

struct EngineTrack {
    first_start: Option<u64>,
    end: u64,
    busy: u64,
}

impl EngineTrack {
    fn new() -> Self {
        Self {
            first_start: None,
            end: 0,
            busy: 0,
        }
    }

    fn enqueue(&mut self, earliest: u64, cycles: u64) -> u64 {
        let start = earliest.max(self.end);
        if self.first_start.is_none() {
            self.first_start = Some(start);
        }
        self.end = start + cycles;
        self.busy += cycles;
        self.end
    }

    fn stat(&self, engine: EngineKind) -> EngineStat {
        let start = self.first_start.unwrap_or(0);
        EngineStat {
            engine,
            busy_cycles: self.busy,
            stall_cycles: (self.end.saturating_sub(start)).saturating_sub(self.busy),
            start,
            end: self.end,
        }
    }
}

/// Schedules one full-computation step: diffusion layers on the DXE with the
/// per-layer matching work placed according to `matching`.
pub fn schedule_fc_step(
    layers: &[LayerPlan],
    matching: &MatchingWork,
    cfg: &HardwareConfig,
) -> StepTimeline {
    schedule_step(StepKind::Fc, layers, matching, cfg)
}

/// Schedules one reduced-computation step (no matching work).
pub fn schedule_rc_step(layers: &[LayerPlan], cfg: &HardwareConfig) -> StepTimeline {
    schedule_step(StepKind::Rc, layers, &MatchingWork::none(), cfg)
}

fn schedule_step(
    kind: StepKind,
    layers: &[LayerPlan],
    matching: &MatchingWork,
    cfg: &HardwareConfig,
) -> StepTimeline {
    let mut dxe_t = 0u64;
    let mut dxe_busy = 0u64;
    let mut dxe_only = 0u64;
    let mut qe = EngineTrack::new();
    let mut datm = EngineTrack::new();
    let mut dram_bytes = 0u64;

    for plan in layers {
        dram_bytes += plan.dram_bytes;
        for (i, op) in plan.ops.iter().enumerate() {
            let c = op.cycles(cfg);
            dxe_t += c;
            dxe_busy += c;
            dxe_only += c;
            if i == plan.sdpa_ready_after {
                // Exposed matching serializes into the DXE stream right
                // after the SDPA output it depends on.
                if matching.dxe_cycles > 0 {
                    dxe_t += matching.dxe_cycles;
                    dxe_busy += matching.dxe_cycles;
                }
                if matching.qe_cycles > 0 || matching.engine_cycles > 0 {
                    let qe_done = qe.enqueue(dxe_t, matching.qe_cycles);
                    datm.enqueue(qe_done, matching.engine_cycles);
                }
            }
        }
    }

    let dram_cycles = if dram_bytes == 0 {
        0
    } else {
        (dram_bytes as f64 / cfg.chip_dram_bytes_per_cycle()).ceil() as u64
    };

    let dxe_stat = EngineStat {
        engine: EngineKind::Dxe,
        busy_cycles: dxe_busy,
        stall_cycles: 0,
        start: 0,
        end: dxe_t,
    };
    let qe_stat = qe.stat(EngineKind::Qe);
    let datm_stat = datm.stat(EngineKind::Datm);
    let dram_stat = EngineStat {
        engine: EngineKind::Dram,
        busy_cycles: dram_cycles,
        stall_cycles: 0,
        start: 0,
        end: dram_cycles,
    };

    let critical = dxe_t.max(qe_stat.end).max(datm_stat.end).max(dram_cycles);
    // Matching-free critical path: diffusion DXE work vs the DRAM stream.
    let baseline = dxe_only.max(dram_cycles);
    let total_matching = (matching.total_cycles()) * layers.len() as u64;
    let exposed = critical - baseline;
    let hidden = total_matching.saturating_sub(exposed);

    StepTimeline {
        kind,
        engines: vec![dxe_stat, qe_stat, datm_stat, dram_stat],
        critical_path_cycles: critical,
        dxe_only_cycles: dxe_only,
        total_matching_cycles: total_matching,
        hidden_matching_cycles: hidden,
        fully_hidden: critical == baseline,
        dram_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwsim::workload::{fc_layer_plan, matching_work, MatchingMode};
    use crate::hwsim::SimParams;
    use crate::pipeline::WorkloadDesc;

    fn setup() -> (Vec<LayerPlan>, HardwareConfig, SimParams, WorkloadDesc) {
        let wl = WorkloadDesc::hunyuan_like();
        let cfg = HardwareConfig::default();
        let params = SimParams::default_for(&wl.name);
        let layers: Vec<LayerPlan> = (0..wl.n_layers)
            .map(|_| fc_layer_plan(&wl, params.ratio_datm, &cfg))
            .collect();
        (layers, cfg, params, wl)
    }

    #[test]
    fn no_matching_report_equals_dxe_only() {
        let (layers, cfg, _, _) = setup();
        let step = schedule_fc_step(&layers, &MatchingWork::none(), &cfg);
        assert_eq!(step.total_matching_cycles, 0);
        assert_eq!(step.hidden_matching_cycles, 0);
        assert!(step.fully_hidden);
        assert!(step.critical_path_cycles >= step.dxe_only_cycles);
    }

    #[test]
    fn engine_matching_fully_hidden_on_paper_scale() {
        let (layers, cfg, params, wl) = setup();
        let work = matching_work(&wl, MatchingMode::DatmEngine, &params, &cfg);
        let step = schedule_fc_step(&layers, &work, &cfg);
        assert!(step.fully_hidden, "matching tail extends the critical path");
        assert_eq!(step.hidden_matching_cycles, step.total_matching_cycles);
        assert_eq!(step.critical_path_cycles, step.dxe_only_cycles);
    }

    #[test]
    fn vpu_matching_exposes_latency() {
        let (layers, cfg, params, wl) = setup();
        let work = matching_work(&wl, MatchingMode::DatmOnVpu, &params, &cfg);
        let step = schedule_fc_step(&layers, &work, &cfg);
        assert!(!step.fully_hidden);
        assert!(step.critical_path_cycles > step.dxe_only_cycles);
        assert_eq!(step.hidden_matching_cycles, 0);
    }

    #[test]
    fn causality_qe_starts_after_first_sdpa_output() {
        let (layers, cfg, params, wl) = setup();
        let work = matching_work(&wl, MatchingMode::DatmEngine, &params, &cfg);
        let step = schedule_fc_step(&layers, &work, &cfg);
        let first_sdpa: u64 = layers[0].ops[..=layers[0].sdpa_ready_after]
            .iter()
            .map(|op| op.cycles(&cfg))
            .sum();
        let qe = step
            .engines
            .iter()
            .find(|e| e.engine == EngineKind::Qe)
            .unwrap();
        assert!(qe.start >= first_sdpa);
    }
}
