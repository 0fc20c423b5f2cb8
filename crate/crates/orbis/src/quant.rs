//! 4-bit channel-wise quantization of the matching input.
//!
//! Symmetric range `[-7, 7]` with one positive scale per channel
//! (`scale_c = max_i |x[i][c]| / 7`); all-zero channels get scale 1 and
//! all-zero codes. Rounding is half-away-from-zero. The distance the
//! accumulation hardware computes — scale applied per channel, then
//! accumulated in ascending channel order — is reproduced bit-exactly by
//! [`quantized_sqdist`], which evaluates each term as
//! `(code_i·scale − code_j·scale)²`, the same operation sequence
//! `pairwise_l2` performs on the dequantized matrix.

use crate::error::{Error, Result};
use crate::tensor::TokenMatrix;

pub const QMAX: i8 = 7;

/// Signed 4-bit codes plus per-channel scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedActivation {
    n_tokens: usize,
    n_channels: usize,
    codes: Vec<i8>,
    scales: Vec<f64>,
}

impl QuantizedActivation {
    pub fn new(
        n_tokens: usize,
        n_channels: usize,
        codes: Vec<i8>,
        scales: Vec<f64>,
    ) -> Result<Self> {
        if n_tokens == 0 || n_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "quantized activation must be non-empty, got {n_tokens}x{n_channels}"
            )));
        }
        if codes.len() != n_tokens * n_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} codes, got {}",
                n_tokens * n_channels,
                codes.len()
            )));
        }
        if scales.len() != n_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} scales, got {}",
                n_channels,
                scales.len()
            )));
        }
        if codes.iter().any(|&c| !(-QMAX..=QMAX).contains(&c)) {
            return Err(Error::InvalidArgument(
                "code outside the signed 4-bit range [-7, 7]".into(),
            ));
        }
        if scales.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument("scales must be positive".into()));
        }
        Ok(Self {
            n_tokens,
            n_channels,
            codes,
            scales,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn code(&self, token: usize, channel: usize) -> i8 {
        self.codes[token * self.n_channels + channel]
    }

    fn code_row(&self, token: usize) -> &[i8] {
        &self.codes[token * self.n_channels..(token + 1) * self.n_channels]
    }
}

/// Per-channel symmetric 4-bit quantization.
pub fn quantize_channelwise(x: &TokenMatrix) -> Result<QuantizedActivation> {
    let (n, c) = (x.n_tokens(), x.n_channels());
    let mut scales = vec![1.0f64; c];
    for ch in 0..c {
        let mut max_abs = 0.0f64;
        for t in 0..n {
            max_abs = max_abs.max(x.get(t, ch).abs());
        }
        if max_abs > 0.0 {
            scales[ch] = max_abs / QMAX as f64;
        }
    }
    let mut codes = Vec::with_capacity(n * c);
    for t in 0..n {
        let row = x.row(t);
        for ch in 0..c {
            // f64::round is half-away-from-zero.
            let q = (row[ch] / scales[ch]).round();
            codes.push(q.clamp(-(QMAX as f64), QMAX as f64) as i8);
        }
    }
    QuantizedActivation::new(n, c, codes, scales)
}

/// `code × scale` per element.
pub fn dequantize(q: &QuantizedActivation) -> TokenMatrix {
    let mut data = Vec::with_capacity(q.n_tokens * q.n_channels);
    for t in 0..q.n_tokens {
        for ch in 0..q.n_channels {
            data.push(q.code(t, ch) as f64 * q.scales[ch]);
        }
    }
    TokenMatrix::new(q.n_tokens, q.n_channels, data)
        .expect("dequantized values are finite by construction")
}

/// Squared distance between tokens `i` and `j` in the quantized domain:
/// scales applied per channel, then accumulated in ascending channel order.
/// Equals `pairwise_l2(dequantize(q))[i][j]` exactly.
pub fn quantized_sqdist(q: &QuantizedActivation, i: usize, j: usize) -> Result<f64> {
    if i >= q.n_tokens || j >= q.n_tokens {
        return Err(Error::IndexOutOfRange(format!(
            "token pair ({i}, {j}) out of range for {} tokens",
            q.n_tokens
        )));
    }
    let (ri, rj) = (q.code_row(i), q.code_row(j));
    let mut acc = 0.0;
    for ch in 0..q.n_channels {
        let d = ri[ch] as f64 * q.scales[ch] - rj[ch] as f64 * q.scales[ch];
        acc += d * d;
    }
    Ok(acc)
}
