//! Dense token activations, cosine similarity maps, and squared-L2 distances.
//!
//! Everything accumulates in `f64` regardless of the on-disk precision so the
//! brute-force oracles in the test suite see deterministic values. Distances
//! are kept squared throughout: every argmin and top-k the matcher performs is
//! order-equivalent, and the accumulate-only form matches the hardware
//! distance datapath.

use crate::error::{Error, Result};

/// An `n_tokens × n_channels` activation, row-major, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    n_tokens: usize,
    n_channels: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    /// Builds a matrix from row-major data, rejecting empty shapes, length
    /// mismatches and non-finite values.
    pub fn new(n_tokens: usize, n_channels: usize, data: Vec<f64>) -> Result<Self> {
        if n_tokens == 0 || n_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "token matrix must be non-empty, got {n_tokens}x{n_channels}"
            )));
        }
        if data.len() != n_tokens * n_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a {n_tokens}x{n_channels} matrix, got {}",
                n_tokens * n_channels,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                token: pos / n_channels,
                channel: pos % n_channels,
            });
        }
        Ok(Self {
            n_tokens,
            n_channels,
            data,
        })
    }

    pub fn zeros(n_tokens: usize, n_channels: usize) -> Result<Self> {
        Self::new(n_tokens, n_channels, vec![0.0; n_tokens * n_channels])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("no rows given".into()));
        }
        let n_channels = rows[0].len();
        if rows.iter().any(|r| r.len() != n_channels) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(
            rows.len(),
            n_channels,
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.data[token * self.n_channels..(token + 1) * self.n_channels]
    }

    pub fn get(&self, token: usize, channel: usize) -> f64 {
        self.data[token * self.n_channels + channel]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copy of the rows at `tokens`, in the order given.
    pub fn select_rows(&self, tokens: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(tokens.len() * self.n_channels);
        for &t in tokens {
            if t >= self.n_tokens {
                return Err(Error::IndexOutOfRange(format!(
                    "token {t} >= n_tokens {}",
                    self.n_tokens
                )));
            }
            data.extend_from_slice(self.row(t));
        }
        Self::new(tokens.len(), self.n_channels, data)
    }

    /// Vertical concatenation; both matrices must agree on channel count.
    pub fn vstack(&self, other: &TokenMatrix) -> Result<Self> {
        if self.n_channels != other.n_channels {
            return Err(Error::ShapeMismatch(format!(
                "cannot stack {} channels onto {}",
                other.n_channels, self.n_channels
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(self.n_tokens + other.n_tokens, self.n_channels, data)
    }
}

/// Symmetric `n × n` inter-token similarity with unit diagonal on nonzero
/// rows; zero-norm rows carry an all-zero row and column, diagonal included.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMap {
    const SYMMETRY_TOL: f64 = 1e-9;

    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("empty similarity map".into()));
        }
        if values.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for an {n}x{n} map, got {}",
                n * n,
                values.len()
            )));
        }
        let map = Self { n, values };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            let d = self.get(i, i);
            if (d - 1.0).abs() > Self::SYMMETRY_TOL && d != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "diagonal entry {i} is {d}, expected 1 or 0"
                )));
            }
            for j in 0..i {
                let a = self.get(i, j);
                if !(-1.0 - Self::SYMMETRY_TOL..=1.0 + Self::SYMMETRY_TOL).contains(&a) {
                    return Err(Error::InvalidArgument(format!(
                        "similarity ({i},{j}) = {a} outside [-1, 1]"
                    )));
                }
                if (a - self.get(j, i)).abs() > Self::SYMMETRY_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "asymmetric entries at ({i},{j})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Rectangular matrix of squared-L2 distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Cosine similarity map over the rows of `x`.
///
/// Zero-norm rows yield 0 everywhere, diagonal included; other diagonal
/// entries are exactly 1. Off-diagonal entries are clamped to `[-1, 1]` to
/// absorb rounding at the boundary.
pub fn cosine_similarity_map(x: &TokenMatrix) -> SimilarityMap {
    let n = x.n_tokens();
    let norms: Vec<f64> = (0..n)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        values[i * n + i] = 1.0;
        for j in 0..i {
            if norms[j] == 0.0 {
                continue;
            }
            let dot = dot(x.row(i), x.row(j));
            let sim = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * n + j] = sim;
            values[j * n + i] = sim;
        }
    }
    SimilarityMap { n, values }
}

/// Cosine similarity between two maps flattened to vectors, in `[-1, 1]`.
///
/// An all-zero map correlates 0 with everything.
pub fn map_correlation(a: &SimilarityMap, b: &SimilarityMap) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::ShapeMismatch(format!(
            "map sizes differ: {} vs {}",
            a.n, b.n
        )));
    }
    let dot = dot(&a.values, &b.values);
    let na = dot_self(&a.values).sqrt();
    let nb = dot_self(&b.values).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise squared-L2 distances between the rows of `a` and the rows of `b`.
///
/// Entry `(i, j) = Σ_c (a[i][c] − b[j][c])²`, accumulated in ascending channel
/// order. The quantized distance path reproduces this accumulation exactly.
pub fn pairwise_l2(a: &TokenMatrix, b: &TokenMatrix) -> Result<DistanceMatrix> {
    if a.n_channels() != b.n_channels() {
        return Err(Error::ShapeMismatch(format!(
            "channel counts differ: {} vs {}",
            a.n_channels(),
            b.n_channels()
        )));
    }
    let (n_rows, n_cols) = (a.n_tokens(), b.n_tokens());
    let mut data = Vec::with_capacity(n_rows * n_cols);
    for i in 0..n_rows {
        let ra = a.row(i);
        for j in 0..n_cols {
            data.push(squared_l2(ra, b.row(j)));
        }
    }
    Ok(DistanceMatrix {
        n_rows,
        n_cols,
        data,
    })
}

/// Squared L2 between two equal-length rows, ascending-index accumulation.
pub fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_self(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}
