//! Token index-pair construction.
//!
//! Two matchers produce [`TokenPairSet`]s: the random-split bipartite
//! baseline ([`bsm_match`]) and the distribution-aware iterative matcher
//! ([`datm_match`]), which refines a destination set medoid-style until the
//! mean token-pair loss stops moving. Pair losses are always squared L2
//! between the paired activation rows, so the two matchers are directly
//! comparable and so is the quantized variant.
//!
//! Every tie anywhere (argmin, argmax, top-k) breaks toward the smaller
//! index; together with seeded sampling this makes all outputs bit-stable.

use crate::error::{Error, Result};
use crate::quant;
use crate::rng;
use crate::tensor::{cosine_similarity_map, squared_l2, TokenMatrix};
use rand::seq::index::sample;

/// One src → dst record with its squared-L2 loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenPair {
    pub src: usize,
    pub dst: usize,
    pub loss: f64,
}

/// The retained pairs of one matching pass plus the dst set they refer to.
///
/// Invariants (checked by [`TokenPairSet::validate`]):
/// * all indices in `[0, n_tokens)`;
/// * src indices pairwise distinct and disjoint from the dst set;
/// * every pair's dst belongs to the dst set;
/// * `reduced_count == pairs.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPairSet {
    n_tokens: usize,
    pairs: Vec<TokenPair>,
    dst_set: Vec<usize>,
    reduced_count: usize,
}

impl TokenPairSet {
    /// Builds and validates a pair set. `dst_set` may contain destinations
    /// that ended up with no retained pair; it is stored sorted.
    pub fn new(n_tokens: usize, pairs: Vec<TokenPair>, mut dst_set: Vec<usize>) -> Result<Self> {
        dst_set.sort_unstable();
        dst_set.dedup();
        let reduced_count = pairs.len();
        let set = Self {
            n_tokens,
            pairs,
            dst_set,
            reduced_count,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(n_tokens: usize) -> Self {
        Self {
            n_tokens,
            pairs: Vec::new(),
            dst_set: Vec::new(),
            reduced_count: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduced_count != self.pairs.len() {
            return Err(Error::InvalidPairSet(format!(
                "reduced_count {} != pair count {}",
                self.reduced_count,
                self.pairs.len()
            )));
        }
        if self.dst_set.iter().any(|&d| d >= self.n_tokens) {
            return Err(Error::InvalidPairSet("dst index out of range".into()));
        }
        let mut seen_src = vec![false; self.n_tokens];
        for p in &self.pairs {
            if p.src >= self.n_tokens || p.dst >= self.n_tokens {
                return Err(Error::InvalidPairSet(format!(
                    "pair ({}, {}) out of range for {} tokens",
                    p.src, p.dst, self.n_tokens
                )));
            }
            if !(p.loss.is_finite() && p.loss >= 0.0) {
                return Err(Error::InvalidPairSet(format!(
                    "pair ({}, {}) has invalid loss {}",
                    p.src, p.dst, p.loss
                )));
            }
            if seen_src[p.src] {
                return Err(Error::InvalidPairSet(format!("duplicate src {}", p.src)));
            }
            seen_src[p.src] = true;
            if self.dst_set.binary_search(&p.src).is_ok() {
                return Err(Error::InvalidPairSet(format!(
                    "src {} also appears in the dst set",
                    p.src
                )));
            }
            if self.dst_set.binary_search(&p.dst).is_err() {
                return Err(Error::InvalidPairSet(format!(
                    "dst {} not in the dst set",
                    p.dst
                )));
            }
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn pairs(&self) -> &[TokenPair] {
        &self.pairs
    }

    pub fn dst_set(&self) -> &[usize] {
        &self.dst_set
    }

    pub fn reduced_count(&self) -> usize {
        self.reduced_count
    }

    /// Fraction of tokens actually removed; differs from the requested ratio
    /// when fewer candidate pairs existed than `floor(ratio × n_tokens)`.
    pub fn actual_ratio(&self) -> f64 {
        self.reduced_count as f64 / self.n_tokens as f64
    }

    /// Mean loss over retained pairs, 0 for an empty set.
    pub fn mean_loss(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|p| p.loss).sum::<f64>() / self.pairs.len() as f64
    }

    /// The same pairs and dst set over a longer sequence, for workloads that
    /// append never-matched tail tokens.
    pub fn reindexed(self, n_tokens: usize) -> Result<Self> {
        Self::new(n_tokens, self.pairs, self.dst_set)
    }

    /// Jaccard similarity of the retained `(src, dst)` sets. Both sets empty
    /// counts as 1.
    pub fn jaccard(&self, other: &TokenPairSet) -> f64 {
        let a: std::collections::BTreeSet<(usize, usize)> =
            self.pairs.iter().map(|p| (p.src, p.dst)).collect();
        let b: std::collections::BTreeSet<(usize, usize)> =
            other.pairs.iter().map(|p| (p.src, p.dst)).collect();
        let inter = a.intersection(&b).count();
        let union = a.union(&b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Parameters of the distribution-aware matcher.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatmConfig {
    /// Initial destination count K.
    pub k_dst: usize,
    /// Fraction of tokens to remove, in `[0, 1)`.
    pub reduction_ratio: f64,
    /// Convergence threshold on the change of mean pair loss.
    pub epsilon: f64,
    /// Hard cap on pairing passes; guarantees termination because the
    /// medoid-snapped update does not monotonically decrease the loss.
    pub max_iterations: usize,
    pub seed: u64,
}

impl DatmConfig {
    pub const DEFAULT_EPSILON: f64 = 1e-3;
    pub const DEFAULT_MAX_ITERATIONS: usize = 16;

    /// Defaults for an `n_tokens`-long sequence: `k_dst = ceil(n/4)`.
    pub fn for_tokens(n_tokens: usize, reduction_ratio: f64, seed: u64) -> Self {
        Self {
            k_dst: n_tokens.div_ceil(4),
            reduction_ratio,
            epsilon: Self::DEFAULT_EPSILON,
            max_iterations: Self::DEFAULT_MAX_ITERATIONS,
            seed,
        }
    }

    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        if self.k_dst == 0 || self.k_dst >= n_tokens {
            return Err(Error::InvalidArgument(format!(
                "k_dst must be in [1, n_tokens), got {} for {} tokens",
                self.k_dst, n_tokens
            )));
        }
        check_ratio(self.reduction_ratio)?;
        // +inf is a legal (degenerate) threshold: converge after one pass.
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "reduction ratio must be in [0, 1), got {ratio}"
        )));
    }
    Ok(())
}

/// A full (pre-top-k) assignment of every src token to its nearest dst.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Sorted by src index.
    pub entries: Vec<TokenPair>,
}

impl Assignment {
    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|p| p.loss).collect()
    }
}

/// Random-split bipartite matching with a 50/50 dst/src split.
///
/// Tokens are shuffled with the seed, the first half becomes the dst set,
/// each src is paired to its most cosine-similar dst, and the
/// `floor(ratio × n)` most similar pairs are retained. Recorded losses are
/// squared L2 between the paired rows, the same metric the iterative matcher
/// reports.
pub fn bsm_match(x: &TokenMatrix, reduction_ratio: f64, seed: u64) -> Result<TokenPairSet> {
    bsm_match_with_split(x, reduction_ratio, seed, 0.5)
}

/// [`bsm_match`] with an explicit dst fraction; the split fraction is not
/// pinned by the baseline's description, so it stays configurable.
pub fn bsm_match_with_split(
    x: &TokenMatrix,
    reduction_ratio: f64,
    seed: u64,
    dst_fraction: f64,
) -> Result<TokenPairSet> {
    let n = x.n_tokens();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "bipartite matching needs at least 2 tokens".into(),
        ));
    }
    check_ratio(reduction_ratio)?;
    if !(0.0 < dst_fraction && dst_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dst fraction must be in (0, 1), got {dst_fraction}"
        )));
    }

    let n_dst = ((n as f64 * dst_fraction) as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates via sample(): the first n_dst shuffled indices are dst.
    let picks = sample(&mut rng::chacha(seed), n, n);
    for (slot, idx) in picks.iter().enumerate() {
        order[slot] = idx;
    }
    let mut dst_set: Vec<usize> = order[..n_dst].to_vec();
    let mut src_set: Vec<usize> = order[n_dst..].to_vec();
    dst_set.sort_unstable();
    src_set.sort_unstable();

    // Most-similar dst per src by cosine over the full map; ties toward the
    // smaller dst index.
    let sim = cosine_similarity_map(x);
    let mut candidates = Vec::with_capacity(src_set.len());
    for &s in &src_set {
        let mut best_dst = dst_set[0];
        let mut best_sim = f64::NEG_INFINITY;
        for &d in &dst_set {
            let v = sim.get(s, d);
            if v > best_sim {
                best_sim = v;
                best_dst = d;
            }
        }
        candidates.push((s, best_dst, best_sim));
    }

    // Top-k by descending similarity, ties toward the smaller src.
    let k = (reduction_ratio * n as f64).floor() as usize;
    let k = k.min(candidates.len());
    let mut ranked = candidates;
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked.sort_by_key(|c| c.0);

    let pairs = ranked
        .into_iter()
        .map(|(src, dst, _)| TokenPair {
            src,
            dst,
            loss: squared_l2(x.row(src), x.row(dst)),
        })
        .collect();
    TokenPairSet::new(n, pairs, dst_set)
}

/// Seeded initial dst/src split: K distinct tokens become dst, the rest src.
/// Both halves are returned sorted.
pub fn datm_init(x: &TokenMatrix, cfg: &DatmConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = x.n_tokens();
    cfg.validate(n)?;
    let mut dst: Vec<usize> = sample(&mut rng::chacha(cfg.seed), n, cfg.k_dst).into_vec();
    dst.sort_unstable();
    let mut in_dst = vec![false; n];
    for &d in &dst {
        in_dst[d] = true;
    }
    let src: Vec<usize> = (0..n).filter(|&i| !in_dst[i]).collect();
    Ok((dst, src))
}

/// Nearest-dst assignment for every token outside `dst_set`, by squared L2,
/// ties toward the smaller dst index.
pub fn datm_pairing(x: &TokenMatrix, dst_set: &[usize]) -> Result<Assignment> {
    if dst_set.is_empty() {
        return Err(Error::InvalidArgument("empty dst set".into()));
    }
    let n = x.n_tokens();
    let mut in_dst = vec![false; n];
    for &d in dst_set {
        if d >= n {
            return Err(Error::IndexOutOfRange(format!("dst {d} >= n_tokens {n}")));
        }
        in_dst[d] = true;
    }
    let mut entries = Vec::with_capacity(n - dst_set.len());
    for s in 0..n {
        if in_dst[s] {
            continue;
        }
        let row = x.row(s);
        let mut best_dst = usize::MAX;
        let mut best = f64::INFINITY;
        for &d in dst_set {
            let dist = squared_l2(row, x.row(d));
            if dist < best || (dist == best && d < best_dst) {
                best = dist;
                best_dst = d;
            }
        }
        entries.push(TokenPair {
            src: s,
            dst: best_dst,
            loss: best,
        });
    }
    Ok(Assignment { entries })
}

/// Arithmetic mean of the per-src losses.
pub fn datm_mean_loss(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument(
            "mean pair loss needs at least one src token".into(),
        ));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// One dst-update pass: each dst's group (itself plus its assigned srcs) is
/// replaced by the group member closest to the group mean, ties toward the
/// smaller token index. A dst with no assigned src keeps itself.
pub fn datm_update(
    x: &TokenMatrix,
    assignment: &Assignment,
    dst_set: &[usize],
) -> Result<Vec<usize>> {
    let n = x.n_tokens();
    let c = x.n_channels();
    let mut slot_of = vec![usize::MAX; n];
    for (slot, &d) in dst_set.iter().enumerate() {
        if d >= n {
            return Err(Error::IndexOutOfRange(format!("dst {d} >= n_tokens {n}")));
        }
        slot_of[d] = slot;
    }

    let mut members: Vec<Vec<usize>> = dst_set.iter().map(|&d| vec![d]).collect();
    for p in &assignment.entries {
        let slot = slot_of.get(p.dst).copied().unwrap_or(usize::MAX);
        if slot == usize::MAX {
            return Err(Error::InvalidArgument(format!(
                "assignment references dst {} outside the dst set",
                p.dst
            )));
        }
        members[slot].push(p.src);
    }

    let mut new_dst = Vec::with_capacity(dst_set.len());
    let mut mean = vec![0.0; c];
    for group in &members {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for &t in group {
            for (m, v) in mean.iter_mut().zip(x.row(t)) {
                *m += v;
            }
        }
        let inv = 1.0 / group.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);

        let mut best_tok = usize::MAX;
        let mut best = f64::INFINITY;
        // Group members carry the dst first, then srcs in ascending order;
        // scan in index order so ties pick the smallest index.
        let mut sorted = group.clone();
        sorted.sort_unstable();
        for &t in &sorted {
            let d = squared_l2(x.row(t), &mean);
            if d < best {
                best = d;
                best_tok = t;
            }
        }
        new_dst.push(best_tok);
    }
    new_dst.sort_unstable();
    debug_assert!(new_dst.windows(2).all(|w| w[0] != w[1]));
    Ok(new_dst)
}

/// Outcome of a full iterative match, including the loss trace.
#[derive(Debug, Clone)]
pub struct DatmRun {
    pub pair_set: TokenPairSet,
    /// Pairing passes executed (ā‰¤ max_iterations).
    pub iterations: usize,
    pub mean_loss_history: Vec<f64>,
    pub converged: bool,
}

/// Full distribution-aware match: seeded init, then pairing / convergence
/// check / dst update until the mean loss moves less than epsilon or the
/// iteration cap is reached, then top-k selection on the final assignment.
pub fn datm_match(x: &TokenMatrix, cfg: &DatmConfig) -> Result<TokenPairSet> {
    datm_match_detailed(x, cfg).map(|run| run.pair_set)
}

/// [`datm_match`] with the per-iteration loss trace.
pub fn datm_match_detailed(x: &TokenMatrix, cfg: &DatmConfig) -> Result<DatmRun> {
    let (mut dst_set, _src) = datm_init(x, cfg)?;
    // "Previous loss" before the first pairing; MAX (not infinity) so the
    // very first convergence check only fires for epsilon = +inf, matching
    // the degenerate-threshold contract of a single pairing pass.
    let mut prev_loss = f64::MAX;
    let mut history = Vec::new();
    let mut converged = false;

    let mut assignment = datm_pairing(x, &dst_set)?;
    loop {
        let loss = datm_mean_loss(&assignment.losses())?;
        history.push(loss);
        if (loss - prev_loss).abs() < cfg.epsilon {
            converged = true;
            break;
        }
        if history.len() >= cfg.max_iterations {
            break;
        }
        prev_loss = loss;
        dst_set = datm_update(x, &assignment, &dst_set)?;
        assignment = datm_pairing(x, &dst_set)?;
    }

    let pair_set = top_k_select(&assignment.entries, &dst_set, cfg.reduction_ratio, x.n_tokens())?;
    Ok(DatmRun {
        pair_set,
        iterations: history.len(),
        mean_loss_history: history,
        converged,
    })
}

/// Distribution-aware matching on the 4-bit quantized view of `x`.
///
/// The quantized distance semantics (scale factors applied per channel, then
/// accumulated) are exactly squared L2 on the dequantized codes, so the run
/// is the standard matcher over `dequantize(quantize(x))`. Reported losses
/// are quantized-domain losses.
pub fn datm_match_quantized(x: &TokenMatrix, cfg: &DatmConfig) -> Result<TokenPairSet> {
    datm_match_quantized_detailed(x, cfg).map(|run| run.pair_set)
}

pub fn datm_match_quantized_detailed(x: &TokenMatrix, cfg: &DatmConfig) -> Result<DatmRun> {
    let q = quant::quantize_channelwise(x)?;
    let deq = quant::dequantize(&q);
    datm_match_detailed(&deq, cfg)
}

/// Keeps the `floor(ratio × n_tokens)` smallest-loss pairs, ties toward the
/// smaller src index. If fewer candidates exist, all are kept and the pair
/// set's `actual_ratio` records what was achieved. Retained pairs are stored
/// in ascending src order.
pub fn top_k_select(
    candidates: &[TokenPair],
    dst_set: &[usize],
    reduction_ratio: f64,
    n_tokens: usize,
) -> Result<TokenPairSet> {
    check_ratio(reduction_ratio)?;
    let k = (reduction_ratio * n_tokens as f64).floor() as usize;
    let k = k.min(candidates.len());
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.src.cmp(&b.src)));
    ranked.truncate(k);
    ranked.sort_by_key(|p| p.src);
    TokenPairSet::new(n_tokens, ranked, dst_set.to_vec())
}

/// Mean squared L2 between the ground-truth output rows of each retained
/// pair: the oracle metric for how well a pair set predicts redundancy in
/// the output it is applied to. Empty pair sets score 0 by convention.
pub fn matching_quality(pairs: &TokenPairSet, gt_output: &TokenMatrix) -> Result<f64> {
    if pairs.n_tokens() != gt_output.n_tokens() {
        return Err(Error::ShapeMismatch(format!(
            "pair set covers {} tokens, output has {}",
            pairs.n_tokens(),
            gt_output.n_tokens()
        )));
    }
    if pairs.pairs().is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pairs
        .pairs()
        .iter()
        .map(|p| squared_l2(gt_output.row(p.src), gt_output.row(p.dst)))
        .sum();
    Ok(sum / pairs.pairs().len() as f64)
}
