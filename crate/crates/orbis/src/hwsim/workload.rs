//! Per-layer operation plans the step scheduler consumes.
//!
//! Timing uses per-instance dimensions (tokens data-parallel over
//! `n_instances`, every instance identical); energy uses exact chip-level
//! operation counts. One transformer layer is modeled as QKV projection,
//! per-head attention (scores GEMM, softmax vector passes, AV GEMM), output
//! projection and a 4x FFN, plus a few full-width vector passes for norms
//! and residuals. Reduced-computation layers shorten everything up to the
//! output projection; the FFN always runs full-length.

use super::engines::{bitonic_topk_cycles, dau_pipeline_cycles, qe_cycles, sa_gemm_cycles};
use super::{HardwareConfig, SimParams};
use crate::pipeline::WorkloadDesc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmShape {
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DxeOp {
    Gemm(GemmShape),
    Vector { elements: u64, passes: u64 },
}

impl DxeOp {
    pub fn cycles(&self, cfg: &HardwareConfig) -> u64 {
        match *self {
            DxeOp::Gemm(GemmShape { m, n, k }) => sa_gemm_cycles(m, n, k, cfg),
            DxeOp::Vector { elements, passes } => {
                passes * elements.div_ceil(cfg.vpu_lanes as u64)
            }
        }
    }
}

/// One layer's worth of DXE work plus its chip-level accounting.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    /// Per-instance ops, in execution order.
    pub ops: Vec<DxeOp>,
    /// Index of the op whose completion makes the SDPA output available to
    /// the matching path.
    pub sdpa_ready_after: usize,
    /// Chip-level DRAM traffic for this layer (weights, activations, pairs).
    pub dram_bytes: u64,
    /// Chip-level MAC count (energy accounting).
    pub sa_macs: f64,
    /// Chip-level vector-lane op count (energy accounting).
    pub vpu_ops: f64,
}

impl LayerPlan {
    pub fn dxe_cycles(&self, cfg: &HardwareConfig) -> u64 {
        self.ops.iter().map(|op| op.cycles(cfg)).sum()
    }

    /// FLOP count seen by the throughput proxy.
    pub fn flops(&self) -> f64 {
        2.0 * self.sa_macs + self.vpu_ops
    }
}

fn shard(tokens: u64, cfg: &HardwareConfig) -> u64 {
    tokens.div_ceil(cfg.n_instances as u64)
}

const SOFTMAX_PASSES: u64 = 3;
const MISC_VECTOR_PASSES: u64 = 6;
const BYTES_PER_VALUE: u64 = 2; // FP16 activations and weights
const BYTES_PER_PAIR: u64 = 8; // two u32 indices

/// Full-computation layer. `pair_ratio` sizes the index-pair writeback that
/// FC steps produce for the upcoming RC steps (0 when no matching runs).
pub fn fc_layer_plan(wl: &WorkloadDesc, pair_ratio: f64, cfg: &HardwareConfig) -> LayerPlan {
    layer_plan(wl, None, pair_ratio, cfg)
}

/// Reduced-computation layer at the given reduction ratio.
pub fn rc_layer_plan(wl: &WorkloadDesc, ratio: f64, cfg: &HardwareConfig) -> LayerPlan {
    layer_plan(wl, Some(ratio), pair_fraction(wl, ratio), cfg)
}

fn pair_fraction(wl: &WorkloadDesc, ratio: f64) -> f64 {
    // Pairs cover only the visual tokens.
    (ratio * wl.n_tokens as f64).floor() / wl.n_tokens as f64
}

fn layer_plan(
    wl: &WorkloadDesc,
    rc_ratio: Option<f64>,
    pair_ratio: f64,
    cfg: &HardwareConfig,
) -> LayerPlan {
    let d = wl.n_channels as u64;
    let heads = wl.n_heads as u64;
    let d_head = d / heads;
    let s_full = wl.total_tokens() as u64;
    let reduced: u64 = match rc_ratio {
        Some(r) => (r * wl.n_tokens as f64).floor() as u64,
        None => 0,
    };
    let s_attn = s_full - reduced;
    let (m_attn, m_full) = (shard(s_attn, cfg), shard(s_full, cfg));

    let mut ops = Vec::new();
    if reduced > 0 {
        // Gather of surviving rows before the attention block.
        ops.push(DxeOp::Vector {
            elements: m_attn * d,
            passes: 1,
        });
    }
    ops.push(DxeOp::Gemm(GemmShape {
        m: m_attn,
        n: 3 * d,
        k: d,
    }));
    for _ in 0..heads {
        ops.push(DxeOp::Gemm(GemmShape {
            m: m_attn,
            n: s_attn,
            k: d_head,
        }));
        ops.push(DxeOp::Vector {
            elements: m_attn * s_attn,
            passes: SOFTMAX_PASSES,
        });
        ops.push(DxeOp::Gemm(GemmShape {
            m: m_attn,
            n: d_head,
            k: s_attn,
        }));
    }
    let sdpa_ready_after = ops.len() - 1;
    ops.push(DxeOp::Gemm(GemmShape {
        m: m_attn,
        n: d,
        k: d,
    }));
    if reduced > 0 {
        // Scatter back to full length after the attention block.
        ops.push(DxeOp::Vector {
            elements: m_full * d,
            passes: 1,
        });
    }
    ops.push(DxeOp::Gemm(GemmShape {
        m: m_full,
        n: 4 * d,
        k: d,
    }));
    ops.push(DxeOp::Gemm(GemmShape {
        m: m_full,
        n: d,
        k: 4 * d,
    }));
    ops.push(DxeOp::Vector {
        elements: m_full * d,
        passes: MISC_VECTOR_PASSES,
    });

    // Chip-level true op counts.
    let sf = s_full as f64;
    let sa_ = s_attn as f64;
    let df = d as f64;
    let sa_macs = sa_ * 3.0 * df * df                        // QKV
        + heads as f64 * (sa_ * sa_ * d_head as f64) * 2.0   // scores + AV
        + sa_ * df * df                                      // out projection
        + sf * 4.0 * df * df * 2.0; // FFN
    let mut vpu_ops = heads as f64 * sa_ * sa_ * SOFTMAX_PASSES as f64
        + sf * df * MISC_VECTOR_PASSES as f64;
    if reduced > 0 {
        vpu_ops += sa_ * df + sf * df;
    }

    // Chip-level DRAM traffic: streamed weights, layer input/output, and
    // the index pairs (written once per FC step, read back at RC steps).
    let weight_values = 3 * d * d + d * d + 8 * d * d;
    let pair_count = (pair_ratio * wl.n_tokens as f64).floor() as u64;
    let dram_bytes =
        weight_values * BYTES_PER_VALUE + 2 * s_full * d * BYTES_PER_VALUE + pair_count * BYTES_PER_PAIR;

    LayerPlan {
        ops,
        sdpa_ready_after,
        dram_bytes,
        sa_macs,
        vpu_ops,
    }
}

/// Matching algorithm/placement a variant runs at FC steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchingMode {
    /// No matching at all.
    None,
    /// Single-pass bipartite similarity on the DXE itself: the similarity
    /// matrix is a streaming GEMM on the systolic array plus an argmax
    /// vector pass. Cheap but exposed.
    BsmOnDxe,
    /// Iterative distribution-aware matching in full precision on the DXE's
    /// vector unit: serialized, gather-bound, fully exposed.
    DatmOnVpu,
    /// Quantized iterative matching on the dedicated engines (QE feeds the
    /// distance-accumulation pipeline); overlapped with DXE work.
    DatmEngine,
}

/// Per-layer matching costs for one variant, split by where they run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchingWork {
    /// Quantization-engine job (own engine, overlapped).
    pub qe_cycles: u64,
    /// Matching-engine job (own engine, overlapped).
    pub engine_cycles: u64,
    /// Exposed matching work appended to the DXE stream.
    pub dxe_cycles: u64,
    // Chip-level op counts for energy accounting.
    pub dau_ops: f64,
    pub qe_ops: f64,
    pub sorter_compares: f64,
    pub vpu_ops: f64,
    pub sa_macs: f64,
}

impl MatchingWork {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn total_cycles(&self) -> u64 {
        self.qe_cycles + self.engine_cycles + self.dxe_cycles
    }
}

/// Group sizes the matcher operates on: `matching_group_tokens`-sized chunks
/// of the visual sequence (single whole-sequence group when 0). Trailing
/// single-token groups cannot be matched and are dropped.
fn matching_groups(n_visual: u64, group_tokens: u64) -> Vec<u64> {
    if group_tokens == 0 || group_tokens >= n_visual {
        return vec![n_visual];
    }
    let mut groups = Vec::new();
    let mut left = n_visual;
    while left > 0 {
        let g = left.min(group_tokens);
        if g >= 2 {
            groups.push(g);
        }
        left -= g;
    }
    groups
}

/// Builds the per-layer matching cost model for one placement.
pub fn matching_work(
    wl: &WorkloadDesc,
    mode: MatchingMode,
    params: &SimParams,
    cfg: &HardwareConfig,
) -> MatchingWork {
    let n_vis = wl.n_tokens as u64;
    let d = wl.n_channels as u64;
    let inst = cfg.n_instances as u64;
    let lanes = cfg.vpu_lanes as u64;
    let iters = params.datm_iterations as u64;
    let groups = matching_groups(n_vis, params.matching_group_tokens as u64);

    let mut w = MatchingWork::none();
    match mode {
        MatchingMode::None => {}
        MatchingMode::BsmOnDxe => {
            for &g in &groups {
                let dst = g / 2;
                let src = g - dst;
                // Similarity as a streaming src x dst GEMM over channels,
                // then one argmax pass over the similarity matrix and one
                // norm pass over the group.
                w.dxe_cycles += sa_gemm_cycles(shard(src, cfg), dst, d, cfg);
                w.dxe_cycles += (shard(src, cfg) * dst).div_ceil(lanes);
                w.dxe_cycles += (shard(g, cfg) * d).div_ceil(lanes);
                w.sa_macs += (src * dst * d) as f64;
                w.vpu_ops += (src * dst + g * d) as f64;
            }
        }
        MatchingMode::DatmOnVpu => {
            let ops = params.vpu_matching_ops_per_partial;
            let stall = params.vpu_matching_gather_stall;
            let chunks = d.div_ceil(lanes) as f64;
            let mut partials = 0.0;
            for &g in &groups {
                let k = g.div_ceil(4);
                let src = g - k;
                partials += (iters * k * src) as f64 * chunks;
                // Update and convergence passes per iteration.
                partials += (iters * g) as f64 * chunks * 2.0;
                w.vpu_ops += (iters * k * src * d) as f64 * 3.0 + (iters * g * d) as f64 * 2.0;
            }
            w.dxe_cycles = ((partials * ops * stall) / inst as f64).ceil() as u64;
        }
        MatchingMode::DatmEngine => {
            w.qe_cycles = qe_cycles(shard(n_vis, cfg), d, cfg);
            w.qe_ops = (2 * n_vis * d + d) as f64;
            for &g in &groups {
                let k = g.div_ceil(4);
                let src = g - k;
                w.engine_cycles += iters * dau_pipeline_cycles(k, shard(src, cfg), d, cfg);
                w.dau_ops += (iters * k * src * d) as f64;
                if src >= 2 {
                    let (cycles, compares) = bitonic_topk_cycles(src, cfg);
                    w.engine_cycles += cycles.div_ceil(inst);
                    w.sorter_compares += compares as f64;
                }
            }
            // Dst-update and convergence bookkeeping on the engine's vector
            // unit.
            w.engine_cycles += iters * 2 * (shard(n_vis, cfg) * d).div_ceil(cfg.dau_lanes as u64);
        }
    }
    w
}
