//! Shared test oracles: brute-force references for the matching operations,
//! a naive attention implementation, cycle-stepping engine models, and
//! synthetic fixtures. Everything here is written straight-line and
//! independently of the library's implementation paths.

#![allow(dead_code)]

use orbis::matching::TokenPair;
use orbis::tensor::TokenMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform random matrix in [-1, 1].
pub fn random_matrix(n_tokens: usize, n_channels: usize, seed: u64) -> TokenMatrix {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..n_tokens * n_channels)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    TokenMatrix::new(n_tokens, n_channels, data).unwrap()
}

/// Gaussian cluster mixture: `n_clusters` centers scaled by `spread`, tokens
/// assigned round-robin with per-element noise `sigma`.
pub fn gaussian_clusters(
    n_tokens: usize,
    n_channels: usize,
    n_clusters: usize,
    spread: f64,
    sigma: f64,
    seed: u64,
) -> TokenMatrix {
    let mut r = rng(seed);
    let mut centers = vec![0.0f64; n_clusters * n_channels];
    for v in centers.iter_mut() {
        let g: f64 = StandardNormal.sample(&mut r);
        *v = g * spread;
    }
    let mut data = Vec::with_capacity(n_tokens * n_channels);
    for t in 0..n_tokens {
        let c = t % n_clusters;
        for ch in 0..n_channels {
            let g: f64 = StandardNormal.sample(&mut r);
            data.push(centers[c * n_channels + ch] + sigma * g);
        }
    }
    TokenMatrix::new(n_tokens, n_channels, data).unwrap()
}

fn sq_l2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// Brute-force nearest-dst assignment: scans every (src, dst) pair,
/// smallest distance wins, ties to the smaller dst index.
pub fn oracle_pairing(x: &TokenMatrix, dst_set: &[usize]) -> Vec<TokenPair> {
    let n = x.n_tokens();
    let mut out = Vec::new();
    for s in 0..n {
        if dst_set.contains(&s) {
            continue;
        }
        let mut best_d = usize::MAX;
        let mut best = f64::INFINITY;
        for &d in dst_set {
            let dist = sq_l2(x.row(s), x.row(d));
            if dist < best || (dist == best && d < best_d) {
                best = dist;
                best_d = d;
            }
        }
        out.push(TokenPair {
            src: s,
            dst: best_d,
            loss: best,
        });
    }
    out
}

/// Brute-force medoid-of-mean update: materializes every group mean and
/// scans all members in index order.
pub fn oracle_update(x: &TokenMatrix, pairs: &[TokenPair], dst_set: &[usize]) -> Vec<usize> {
    let c = x.n_channels();
    let mut new_dst = Vec::new();
    for &d in dst_set {
        let mut members: Vec<usize> = vec![d];
        for p in pairs {
            if p.dst == d {
                members.push(p.src);
            }
        }
        members.sort_unstable();
        let mut mean = vec![0.0; c];
        for &m in &members {
            for (acc, v) in mean.iter_mut().zip(x.row(m)) {
                *acc += v;
            }
        }
        for v in mean.iter_mut() {
            *v /= members.len() as f64;
        }
        let mut best_t = usize::MAX;
        let mut best = f64::INFINITY;
        for &m in &members {
            let dist = sq_l2(x.row(m), &mean);
            if dist < best {
                best = dist;
                best_t = m;
            }
        }
        new_dst.push(best_t);
    }
    new_dst.sort_unstable();
    new_dst
}

/// Full-sort-then-prefix top-k reference.
pub fn oracle_topk(pairs: &[TokenPair], ratio: f64, n_tokens: usize) -> Vec<TokenPair> {
    let k = ((ratio * n_tokens as f64).floor() as usize).min(pairs.len());
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.src.cmp(&b.src)));
    sorted.truncate(k);
    sorted.sort_by_key(|p| p.src);
    sorted
}

/// Independent straight-line reimplementation of the bipartite baseline:
/// seeded shuffle, 50/50 split, cosine argmax per src, top-k by similarity.
pub fn bsm_reference(x: &TokenMatrix, ratio: f64, seed: u64) -> Vec<TokenPair> {
    let n = x.n_tokens();
    let picks = rand::seq::index::sample(&mut rng(seed), n, n);
    let order: Vec<usize> = picks.iter().collect();
    let n_dst = (n / 2).max(1);
    let mut dst: Vec<usize> = order[..n_dst].to_vec();
    let mut src: Vec<usize> = order[n_dst..].to_vec();
    dst.sort_unstable();
    src.sort_unstable();

    let norm = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cosine = |a: &[f64], b: &[f64]| {
        let (na, nb) = (norm(a), norm(b));
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    };

    let mut cand: Vec<(usize, usize, f64)> = Vec::new();
    for &s in &src {
        let mut best_d = dst[0];
        let mut best = f64::NEG_INFINITY;
        for &d in &dst {
            let sim = cosine(x.row(s), x.row(d));
            if sim > best {
                best = sim;
                best_d = d;
            }
        }
        cand.push((s, best_d, best));
    }
    cand.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let k = ((ratio * n as f64).floor() as usize).min(cand.len());
    cand.truncate(k);
    cand.sort_by_key(|c| c.0);
    cand.into_iter()
        .map(|(s, d, _)| TokenPair {
            src: s,
            dst: d,
            loss: sq_l2(x.row(s), x.row(d)),
        })
        .collect()
}

/// Three-loop attention reference (per query, per key, per channel), one
/// head slice at a time.
pub fn naive_sdpa(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix, n_heads: usize) -> TokenMatrix {
    let c = q.n_channels();
    let d_head = c / n_heads;
    let mut out = vec![0.0; q.n_tokens() * c];
    for h in 0..n_heads {
        let off = h * d_head;
        for i in 0..q.n_tokens() {
            let mut weights = Vec::with_capacity(k.n_tokens());
            for j in 0..k.n_tokens() {
                let mut dot = 0.0;
                for t in 0..d_head {
                    dot += q.get(i, off + t) * k.get(j, off + t);
                }
                weights.push(dot / (d_head as f64).sqrt());
            }
            let m = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for w in weights.iter_mut() {
                *w = (*w - m).exp();
                denom += *w;
            }
            for (j, w) in weights.iter().enumerate() {
                for t in 0..d_head {
                    out[i * c + off + t] += w / denom * v.get(j, off + t);
                }
            }
        }
    }
    TokenMatrix::new(q.n_tokens(), c, out).unwrap()
}

// ---------------------------------------------------------------------------
// Cycle-stepping engine models. Each one advances a cycle counter and moves
// work through the unit state; none reuses the closed-form arithmetic.
// ---------------------------------------------------------------------------

/// Weight-stationary systolic array, stepped cycle by cycle. PE (i, j)
/// consumes input beat `t - i - j` when it is in `[0, k)`; a tile is done
/// when every PE has consumed all k beats; tiles run back to back.
pub fn sa_event_cycles(m: u64, n: u64, k: u64, rows: u64, cols: u64) -> u64 {
    if m == 0 || n == 0 || k == 0 {
        return 0;
    }
    let tiles = m.div_ceil(rows) * n.div_ceil(cols);
    let total_pe = (rows * cols) as usize;
    let mut done_count = vec![0u64; total_pe];
    let mut done = 0usize;
    let mut t = 0u64;
    while done < total_pe {
        for i in 0..rows {
            for j in 0..cols {
                let idx = (i * cols + j) as usize;
                if done_count[idx] < k {
                    let beat = t as i64 - (i + j) as i64;
                    if beat >= 0 && (beat as u64) < k {
                        done_count[idx] += 1;
                        if done_count[idx] == k {
                            done += 1;
                        }
                    }
                }
            }
        }
        t += 1;
    }
    tiles * t
}

/// Distance-accumulation pipeline stepped cycle by cycle: one partial issues
/// per cycle when available; each partial retires `depth` cycles after
/// issue.
pub fn dau_event_cycles(n_dst: u64, n_src: u64, n_channels: u64, lanes: u64, depth: u64) -> u64 {
    if n_dst == 0 || n_src == 0 || n_channels == 0 {
        return 0;
    }
    let mut remaining = n_channels.div_ceil(lanes) * n_dst * n_src;
    let mut in_flight: std::collections::VecDeque<u64> = std::collections::VecDeque::new();
    let mut cycle = 0u64;
    let mut last_retire = 0u64;
    while remaining > 0 || !in_flight.is_empty() {
        // Retire
        while let Some(&front) = in_flight.front() {
            if front <= cycle {
                in_flight.pop_front();
                last_retire = cycle;
            } else {
                break;
            }
        }
        // Issue one per cycle
        if remaining > 0 {
            in_flight.push_back(cycle + depth);
            remaining -= 1;
        }
        if remaining == 0 && in_flight.is_empty() {
            break;
        }
        cycle += 1;
    }
    last_retire
}

/// Vector-unit model of the quantization engine: two full passes over the
/// activation and one pass over the channels, consuming `lanes` elements per
/// cycle.
pub fn qe_event_cycles(n_tokens: u64, n_channels: u64, lanes: u64) -> u64 {
    if n_tokens == 0 || n_channels == 0 {
        return 0;
    }
    let mut cycles = 0u64;
    for pass_elems in [n_tokens * n_channels, n_tokens * n_channels, n_channels] {
        let mut left = pass_elems;
        while left > 0 {
            left = left.saturating_sub(lanes);
            cycles += 1;
        }
    }
    cycles
}

/// Comparator-array model of the sorting network: stages run sequentially,
/// each stage retires `width/2` compare-exchanges per cycle.
pub fn sorter_event_cycles(n: u64, sorter_width: u64) -> u64 {
    let padded = n.next_power_of_two();
    let p = padded.trailing_zeros() as u64;
    let mut cycles = 0u64;
    for stage in 0..p {
        for _pass in 0..=stage {
            let mut ops_left = padded / 2;
            while ops_left > 0 {
                ops_left = ops_left.saturating_sub(sorter_width / 2);
                cycles += 1;
            }
        }
    }
    cycles
}

/// Cluster structure confined to the first `n_cluster_channels` channels;
/// all channels carry unit-free noise `sigma`. Keeps the 4-bit dynamic range
/// tight on the noise channels while clusters stay separable.
pub fn subspace_clusters(
    n_tokens: usize,
    n_channels: usize,
    n_clusters: usize,
    n_cluster_channels: usize,
    spread: f64,
    sigma: f64,
    seed: u64,
) -> TokenMatrix {
    let mut r = rng(seed);
    let m = n_cluster_channels.min(n_channels);
    let mut centers = vec![0.0f64; n_clusters * n_channels];
    for cl in 0..n_clusters {
        for ch in 0..m {
            let g: f64 = StandardNormal.sample(&mut r);
            centers[cl * n_channels + ch] = g * spread;
        }
    }
    let mut data = Vec::with_capacity(n_tokens * n_channels);
    for t in 0..n_tokens {
        let c = t % n_clusters;
        for ch in 0..n_channels {
            let g: f64 = StandardNormal.sample(&mut r);
            data.push(centers[c * n_channels + ch] + sigma * g);
        }
    }
    TokenMatrix::new(n_tokens, n_channels, data).unwrap()
}
