//! Closed-form cycle models of the four hardware engines, plus a functional
//! model of the bitonic sorting network.
//!
//! Every formula here is cross-checked against an event-driven
//! micro-simulator in the test suite; the formulas are the ones the step
//! scheduler uses.

use super::HardwareConfig;

/// Weight-stationary systolic-array GEMM:
/// `ceil(m/rows) × ceil(n/cols)` tiles, each costing
/// `k + rows + cols − 2` cycles (k streaming beats plus fill/drain of the
/// array diagonal).
pub fn sa_gemm_cycles(m: u64, n: u64, k: u64, cfg: &HardwareConfig) -> u64 {
    if m == 0 || n == 0 || k == 0 {
        return 0;
    }
    let rows = cfg.sa_rows as u64;
    let cols = cfg.sa_cols as u64;
    let tiles = m.div_ceil(rows) * n.div_ceil(cols);
    tiles * (k + rows + cols - 2)
}

/// Distance-accumulation pipeline: one distance partial
/// (a `min(dau_lanes, n_channels)`-channel chunk of one dst/src pair) issues
/// per cycle at full occupancy; the running-min reduction is folded into the
/// pipeline. `depth + partials − 1` cycles, 0 when there is no work.
pub fn dau_pipeline_cycles(n_dst: u64, n_src: u64, n_channels: u64, cfg: &HardwareConfig) -> u64 {
    if n_dst == 0 || n_src == 0 || n_channels == 0 {
        return 0;
    }
    let partials = n_channels.div_ceil(cfg.dau_lanes as u64) * n_dst * n_src;
    cfg.dau_pipeline_depth as u64 + partials - 1
}

/// Quantization engine: a max-reduction pass and a scale-and-round pass over
/// the whole activation at `vpu_lanes` elements per cycle, plus one
/// per-channel pass for the scale divides.
pub fn qe_cycles(n_tokens: u64, n_channels: u64, cfg: &HardwareConfig) -> u64 {
    if n_tokens == 0 || n_channels == 0 {
        return 0;
    }
    let lanes = cfg.vpu_lanes as u64;
    2 * (n_tokens * n_channels).div_ceil(lanes) + n_channels.div_ceil(lanes)
}

/// Cycle and comparator counts of a bitonic sort of `n` keys padded to the
/// next power of two `2^p`: `p(p+1)/2` stages of `2^(p−1)` compare-exchanges,
/// with a `sorter_width/2`-comparator array reused across stages.
pub fn bitonic_topk_cycles(n: u64, cfg: &HardwareConfig) -> (u64, u64) {
    assert!(n >= 2, "sorting network needs at least 2 elements");
    let padded = n.next_power_of_two();
    let p = padded.trailing_zeros() as u64;
    let stages = p * (p + 1) / 2;
    let per_stage_ops = padded / 2;
    let comparators = per_stage_ops * stages;
    let array = (cfg.sorter_width as u64) / 2;
    let cycles = stages * per_stage_ops.div_ceil(array);
    (cycles, comparators)
}

/// Functional bitonic sorting network (non-recursive form). Sorts in place
/// and returns the number of compare-exchange operations visited, which the
/// comparator count of [`bitonic_topk_cycles`] must equal.
pub fn bitonic_sort_pow2<T: PartialOrd + Copy>(items: &mut [T]) -> u64 {
    let n = items.len();
    assert!(n.is_power_of_two() && n >= 2);
    let mut compares = 0u64;
    let mut k = 2;
    while k <= n {
        let mut j = k / 2;
        while j > 0 {
            for i in 0..n {
                let l = i ^ j;
                if l > i {
                    compares += 1;
                    let ascending = (i & k) == 0;
                    if (ascending && items[i] > items[l]) || (!ascending && items[i] < items[l]) {
                        items.swap(i, l);
                    }
                }
            }
            j /= 2;
        }
        k *= 2;
    }
    compares
}
