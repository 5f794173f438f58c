//! Matrix products over quantized weights, with operation counting.
//!
//! With `W ~ diag(a1) Q1 + diag(a2) Q2` and `Q1, Q2` sign matrices,
//! `W X = diag(a1) (Q1 X) + diag(a2) (Q2 X)`. The two sign products need only
//! additions and subtractions; floating multiplies are left for the final
//! row scaling, `2 * M * N` of them regardless of `K`.
//!
//! Counters are value independent: they are accumulated per row block from the
//! loop structure that actually ran.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::onebit::SignBits;
use crate::r2q::{self, R2QTensor};
use crate::rtn::{dequantize_rtn, RtnTensor};
use crate::sampling::{random_matrix, WeightDist};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    /// Multiplications producing a floating value (scalings included).
    pub float_muls: u64,
    /// All floating additions and subtractions.
    pub float_adds: u64,
    /// The subset of `float_adds` spent accumulating sign-selected inputs.
    pub sign_flips_or_adds: u64,
}

impl std::ops::Add for OpCount {
    type Output = OpCount;

    fn add(self, o: OpCount) -> OpCount {
        OpCount {
            float_muls: self.float_muls + o.float_muls,
            float_adds: self.float_adds + o.float_adds,
            sign_flips_or_adds: self.sign_flips_or_adds + o.sign_flips_or_adds,
        }
    }
}

fn check_inner(lhs: (usize, usize), x: &Matrix) -> Result<()> {
    if lhs.1 != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            lhs.0,
            lhs.1,
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

/// `sum_k sign(m, k) * x[k][n]` using only additions and subtractions.
///
/// The first term initialises the accumulator (copy or negation) and every
/// further `k` adds or subtracts one row of `x`, in ascending `k`.
pub fn matmul_binary(signs: &SignBits, x: &Matrix) -> Result<(Matrix, OpCount)> {
    check_inner((signs.rows(), signs.cols()), x)?;
    let (m, k, n) = (signs.rows(), signs.cols(), x.cols());
    let mut out = Matrix::zeros(m, n);
    if n == 0 || m == 0 {
        return Ok((out, OpCount::default()));
    }
    let xs = x.as_slice();
    let adds: u64 = out
        .as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .map(|(row, acc)| {
            let mut adds = 0u64;
            for (w, &word) in signs.row_words(row).iter().enumerate() {
                let base = w * 64;
                let lanes = (k - base).min(64);
                for lane in 0..lanes {
                    let kk = base + lane;
                    let xr = &xs[kk * n..(kk + 1) * n];
                    let plus = (word >> lane) & 1 == 1;
                    if kk == 0 {
                        if plus {
                            acc.copy_from_slice(xr);
                        } else {
                            for (a, v) in acc.iter_mut().zip(xr) {
                                *a = -v;
                            }
                        }
                    } else {
                        if plus {
                            for (a, v) in acc.iter_mut().zip(xr) {
                                *a += v;
                            }
                        } else {
                            for (a, v) in acc.iter_mut().zip(xr) {
                                *a -= v;
                            }
                        }
                        adds += n as u64;
                    }
                }
            }
            adds
        })
        .sum();
    Ok((
        out,
        OpCount {
            float_muls: 0,
            float_adds: adds,
            sign_flips_or_adds: adds,
        },
    ))
}

/// Addition-only product for per-channel R2Q weights.
///
/// The two sign products run as independent tasks; each is sequential in
/// `k`, so the result does not depend on scheduling. Sub-channel grouping is
/// rejected; see [`matmul_r2q_or_fallback`].
pub fn matmul_r2q(t: &R2QTensor, x: &Matrix) -> Result<(Matrix, OpCount)> {
    check_inner(t.shape(), x)?;
    if t.coarse().groups_per_row() > 1 {
        return Err(Error::UnsupportedScheme(format!(
            "fast path needs one scale per row, got {}",
            t.scheme()
        )));
    }
    let (m, n) = (t.shape().0, x.cols());
    let (p1, p2) = rayon::join(
        || matmul_binary(t.coarse().signs(), x),
        || matmul_binary(t.refine().signs(), x),
    );
    let ((p1, c1), (p2, c2)) = (p1?, p2?);
    let mut out = Matrix::zeros(m, n);
    let (a1, a2) = (t.coarse().alphas(), t.refine().alphas());
    for r in 0..m {
        // zero-width rows have no groups; their product row is empty anyway
        let (s1, s2) = if a1.is_empty() { (0.0, 0.0) } else { (a1[r], a2[r]) };
        for ((o, u), v) in out.row_mut(r).iter_mut().zip(p1.row(r)).zip(p2.row(r)) {
            *o = s1 * u + s2 * v;
        }
    }
    let mn = (m * n) as u64;
    let combine = OpCount {
        float_muls: 2 * mn,
        float_adds: mn,
        sign_flips_or_adds: 0,
    };
    Ok((out, c1 + c2 + combine))
}

/// [`matmul_r2q`] when the scheme allows it, otherwise dequantize and run the
/// dense product.
pub fn matmul_r2q_or_fallback(t: &R2QTensor, x: &Matrix) -> Result<(Matrix, OpCount)> {
    match matmul_r2q(t, x) {
        Err(Error::UnsupportedScheme(_)) => matmul_dense(&r2q::dequantize(t), x),
        other => other,
    }
}

/// Dense product with counted operations. Each output starts from its `k = 0`
/// product and accumulates in ascending `k`.
pub fn matmul_dense(w: &Matrix, x: &Matrix) -> Result<(Matrix, OpCount)> {
    check_inner(w.shape(), x)?;
    let (m, k, n) = (w.rows(), w.cols(), x.cols());
    let mut out = Matrix::zeros(m, n);
    if k == 0 {
        return Ok((out, OpCount::default()));
    }
    for r in 0..m {
        let wr = w.row(r);
        let o = out.row_mut(r);
        for (c, slot) in o.iter_mut().enumerate() {
            let mut acc = wr[0] * x.get(0, c);
            for kk in 1..k {
                acc += wr[kk] * x.get(kk, c);
            }
            *slot = acc;
        }
    }
    let mn = (m * n) as u64;
    Ok((
        out,
        OpCount {
            float_muls: mn * k as u64,
            float_adds: mn * (k as u64 - 1),
            sign_flips_or_adds: 0,
        },
    ))
}

/// Plain dense product, used as the reference everything else is checked
/// against.
pub fn matmul_reference(w: &Matrix, x: &Matrix) -> Result<Matrix> {
    matmul_dense(w, x).map(|(m, _)| m)
}

/// Per-channel integer product: `s_m * sum_k (code - z) * x[k][n]`.
pub fn matmul_rtn(t: &RtnTensor, x: &Matrix) -> Result<(Matrix, OpCount)> {
    check_inner(t.shape(), x)?;
    let (m, k) = t.shape();
    if t.num_groups() != m {
        return Err(Error::UnsupportedScheme(format!(
            "integer path needs one scale per row, got {}",
            t.scheme()
        )));
    }
    let n = x.cols();
    let mut out = Matrix::zeros(m, n);
    if k == 0 {
        return Ok((out, OpCount::default()));
    }
    for r in 0..m {
        let p = t.params()[r];
        let codes = &t.codes()[r * k..(r + 1) * k];
        let centred: Vec<f64> = codes.iter().map(|&c| (c as i64 - p.zero_point) as f64).collect();
        for (c, slot) in out.row_mut(r).iter_mut().enumerate() {
            let mut acc = centred[0] * x.get(0, c);
            for kk in 1..k {
                acc += centred[kk] * x.get(kk, c);
            }
            *slot = p.scale * acc;
        }
    }
    let mn = (m * n) as u64;
    Ok((
        out,
        OpCount {
            float_muls: mn * k as u64 + mn,
            float_adds: mn * (k as u64 - 1),
            sign_flips_or_adds: 0,
        },
    ))
}

/// Predicted operation counts for an `M x K` weight times a `K x N` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexityTable {
    pub dense: OpCount,
    pub int2: OpCount,
    pub r2q: OpCount,
}

pub fn complexity_table(m: u64, n: u64, k: u64) -> ComplexityTable {
    let mn = m * n;
    let acc = mn * k.saturating_sub(1);
    ComplexityTable {
        dense: OpCount {
            float_muls: mn * k,
            float_adds: acc,
            sign_flips_or_adds: 0,
        },
        int2: OpCount {
            float_muls: mn * k + mn,
            float_adds: acc,
            sign_flips_or_adds: 0,
        },
        r2q: OpCount {
            float_muls: 2 * mn,
            float_adds: 2 * acc + mn,
            sign_flips_or_adds: 2 * acc,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMethod {
    Dense,
    Int2,
    R2Q,
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMethod::Dense => "dense",
            BenchMethod::Int2 => "int2",
            BenchMethod::R2Q => "r2q",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub method: BenchMethod,
    pub measured: OpCount,
    pub predicted: OpCount,
    pub wall_ns: u128,
}

pub const BENCH_HEADER: &str =
    "M,N,K,method,float_muls,float_adds,wall_ns,predicted_float_muls,predicted_float_adds";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.m,
            self.n,
            self.k,
            self.method,
            self.measured.float_muls,
            self.measured.float_adds,
            self.wall_ns,
            self.predicted.float_muls,
            self.predicted.float_adds
        )
    }
}

/// Time the three products on Gaussian data. Wall time is the best of `reps`.
pub fn bench(dims: &[(usize, usize, usize)], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let reps = reps.max(1);
    let mut rows = Vec::new();
    for (i, &(m, n, k)) in dims.iter().enumerate() {
        let s = seed.wrapping_add(2 * i as u64);
        let w = random_matrix(WeightDist::Gaussian, m, k, 1.0, s);
        let x = random_matrix(WeightDist::Gaussian, k, n, 1.0, s + 1);
        let rq = r2q::quantize(&w, crate::GroupScheme::PerChannel)?;
        let iq = crate::rtn::quantize_rtn(&w, crate::GroupScheme::PerChannel, 2)?;
        let table = complexity_table(m as u64, n as u64, k as u64);

        let mut run = |method: BenchMethod, predicted: OpCount| -> Result<()> {
            let mut best = u128::MAX;
            let mut measured = OpCount::default();
            for _ in 0..reps {
                let start = Instant::now();
                let (_, c) = match method {
                    BenchMethod::Dense => matmul_dense(&w, &x)?,
                    BenchMethod::Int2 => matmul_rtn(&iq, &x)?,
                    BenchMethod::R2Q => matmul_r2q(&rq, &x)?,
                };
                best = best.min(start.elapsed().as_nanos());
                measured = c;
            }
            rows.push(BenchRow {
                m,
                n,
                k,
                method,
                measured,
                predicted,
                wall_ns: best,
            });
            Ok(())
        };
        run(BenchMethod::Dense, table.dense)?;
        run(BenchMethod::Int2, table.int2)?;
        run(BenchMethod::R2Q, table.r2q)?;
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

/// Dequantize-then-dense reference for an RTN tensor of any scheme.
pub fn matmul_rtn_reference(t: &RtnTensor, x: &Matrix) -> Result<Matrix> {
    matmul_reference(&dequantize_rtn(t), x)
}
