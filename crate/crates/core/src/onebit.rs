//! Optimal 1-bit binarization of weight groups.
//!
//! For a group `w` of length `G`, the minimizer of `||w - alpha * q||^2` over
//! `q in {-1, +1}^G` and `alpha >= 0` is `q = sign(w)` (with `sign(0) = +1`)
//! and `alpha = ||w||_1 / G`. The packed kernel keeps one bit per weight and one
//! scale per group.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io::{LeReader, LeWriter};
use crate::tensor::{partition, GroupScheme, Matrix};

/// `+1` for `w >= 0`, `-1` otherwise.
#[inline]
pub fn sign_indicator(w: f64) -> f64 {
    if w >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Closed-form binarization of one group. Returns the signs and the scale.
pub fn binarize_group(w: &[f64]) -> Result<(Vec<f64>, f64)> {
    if w.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let q = w.iter().map(|&v| sign_indicator(v)).collect();
    Ok((q, l1_mean(w)))
}

/// Mean absolute value, accumulated left to right.
#[inline]
pub(crate) fn l1_mean(w: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in w {
        acc += v.abs();
    }
    acc / w.len() as f64
}

/// Row-major bit matrix: bit set means `+1`, clear means `-1`.
///
/// Each row occupies `ceil(cols / 64)` words, LSB first, so a row can be
/// scanned word by word without touching its neighbours.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignBits {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl SignBits {
    pub fn new(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        Self {
            rows,
            cols,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    /// Pack the signs of `m` (`m[r][c] >= 0` becomes a set bit).
    pub fn from_signs(m: &Matrix) -> Self {
        let mut bits = Self::new(m.rows(), m.cols());
        for r in 0..m.rows() {
            for (c, &v) in m.row(r).iter().enumerate() {
                if v >= 0.0 {
                    bits.set(r, c, true);
                }
            }
        }
        bits
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        let w = self.words[r * self.words_per_row + c / 64];
        (w >> (c % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, positive: bool) {
        let idx = r * self.words_per_row + c / 64;
        let mask = 1u64 << (c % 64);
        if positive {
            self.words[idx] |= mask;
        } else {
            self.words[idx] &= !mask;
        }
    }

    /// Sign of element `(r, c)` as `+1.0` or `-1.0`.
    #[inline]
    pub fn sign(&self, r: usize, c: usize) -> f64 {
        if self.get(r, c) {
            1.0
        } else {
            -1.0
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| self.sign(r, c))
    }

    /// Contiguous row-major bit stream, LSB first in each byte, last byte
    /// zero-padded.
    pub fn to_stream(&self) -> Vec<u8> {
        let total = self.rows * self.cols;
        let mut out = vec![0u8; total.div_ceil(8)];
        let mut i = 0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.get(r, c) {
                    out[i / 8] |= 1 << (i % 8);
                }
                i += 1;
            }
        }
        out
    }

    pub fn from_stream(rows: usize, cols: usize, stream: &[u8]) -> Result<Self> {
        let total = rows * cols;
        if stream.len() != total.div_ceil(8) {
            return Err(Error::Format(format!(
                "sign stream of {} bytes for {total} bits",
                stream.len()
            )));
        }
        if !total.is_multiple_of(8) && stream[total / 8] >> (total % 8) != 0 {
            return Err(Error::Format("non-zero padding bits".into()));
        }
        let mut bits = Self::new(rows, cols);
        let mut i = 0;
        for r in 0..rows {
            for c in 0..cols {
                if (stream[i / 8] >> (i % 8)) & 1 == 1 {
                    bits.set(r, c, true);
                }
                i += 1;
            }
        }
        Ok(bits)
    }
}

/// Bit-packed signs plus one non-negative scale per group.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryKernel {
    signs: SignBits,
    alphas: Vec<f64>,
    scheme: GroupScheme,
    group_len: usize,
}

impl BinaryKernel {
    /// Assemble a kernel from parts, validating the invariants.
    pub fn from_parts(signs: SignBits, alphas: Vec<f64>, scheme: GroupScheme) -> Result<Self> {
        let (rows, cols) = (signs.rows(), signs.cols());
        let group_len = scheme.group_len(cols)?;
        let groups = if group_len == 0 { 0 } else { rows * cols / group_len };
        if alphas.len() != groups {
            return Err(Error::ShapeMismatch(format!(
                "{} scales for {groups} groups",
                alphas.len()
            )));
        }
        if let Some(i) = alphas.iter().position(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "scale {i} is {} (must be finite and >= 0)",
                alphas[i]
            )));
        }
        Ok(Self {
            signs,
            alphas,
            scheme,
            group_len,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.signs.rows()
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.signs.cols()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    #[inline]
    pub fn scheme(&self) -> GroupScheme {
        self.scheme
    }

    #[inline]
    pub fn group_len(&self) -> usize {
        self.group_len
    }

    #[inline]
    pub fn groups_per_row(&self) -> usize {
        if self.group_len == 0 {
            0
        } else {
            self.cols() / self.group_len
        }
    }

    #[inline]
    pub fn signs(&self) -> &SignBits {
        &self.signs
    }

    #[inline]
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    #[inline]
    pub fn num_groups(&self) -> usize {
        self.alphas.len()
    }

    #[inline]
    pub fn alpha_at(&self, r: usize, c: usize) -> f64 {
        self.alphas[GroupScheme::group_of(r, c, self.group_len, self.groups_per_row())]
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut LeWriter<W>) -> Result<()> {
        w.bytes(&self.signs.to_stream())?;
        for &a in &self.alphas {
            w.f64(a)?;
        }
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(
        r: &mut LeReader<R>,
        rows: usize,
        cols: usize,
        scheme: GroupScheme,
    ) -> Result<Self> {
        let stream = r.bytes((rows * cols).div_ceil(8))?;
        let signs = SignBits::from_stream(rows, cols, &stream)?;
        let groups = rows * scheme.groups_per_row(cols)?;
        let mut alphas = Vec::with_capacity(groups);
        for _ in 0..groups {
            alphas.push(r.f64()?);
        }
        Self::from_parts(signs, alphas, scheme).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Binarize every group of `m` independently.
pub fn binarize_matrix(m: &Matrix, scheme: GroupScheme) -> Result<BinaryKernel> {
    let groups = partition(m, scheme)?;
    let alphas = groups.iter().map(|g| l1_mean(g)).collect();
    BinaryKernel::from_parts(SignBits::from_signs(m), alphas, scheme)
}

/// Reconstruct `alpha * q` element-wise.
pub fn dequantize_onebit(k: &BinaryKernel) -> Matrix {
    let (rows, cols) = k.shape();
    let mut out = Matrix::zeros(rows, cols);
    let gl = k.group_len();
    for r in 0..rows {
        let row = out.row_mut(r);
        for (c, v) in row.iter_mut().enumerate() {
            let a = k.alphas[r * k.groups_per_row() + c / gl];
            *v = if k.signs.get(r, c) { a } else { -a };
        }
    }
    out
}

/// Closed-form reconstruction error `||w||^2 - G * alpha^2`.
pub fn closed_form_error(w: &[f64]) -> f64 {
    let a = l1_mean(w);
    let norm2: f64 = w.iter().map(|v| v * v).sum();
    norm2 - w.len() as f64 * a * a
}

/// Exhaustive-search reference for the 1-bit problem.
///
/// Tries all `2^G` sign vectors, each with its own best scale
/// `max(0, <w, q> / G)`, and returns the one with least squared error.
/// Only practical for small groups.
pub fn brute_force_onebit(w: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    let g = w.len();
    if g == 0 {
        return Err(Error::EmptyGroup);
    }
    if g > 16 {
        return Err(Error::GroupTooLarge(g));
    }
    let mut best: Option<(u32, f64, f64)> = None;
    for mask in 0u32..(1 << g) {
        let q = |i: usize| if (mask >> i) & 1 == 1 { 1.0 } else { -1.0 };
        let dot: f64 = (0..g).map(|i| w[i] * q(i)).sum();
        let alpha = (dot / g as f64).max(0.0);
        let err: f64 = (0..g)
            .map(|i| {
                let d = w[i] - alpha * q(i);
                d * d
            })
            .sum();
        if best.is_none_or(|(_, _, e)| err < e) {
            best = Some((mask, alpha, err));
        }
    }
    let (mask, alpha, err) = best.expect("at least one candidate");
    let q = (0..g)
        .map(|i| if (mask >> i) & 1 == 1 { 1.0 } else { -1.0 })
        .collect();
    Ok((q, alpha, err))
}
