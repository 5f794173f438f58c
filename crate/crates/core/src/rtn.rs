//! Round-to-nearest baseline on a uniform signed lattice.
//!
//! Each group gets a scale `s = (r_max - r_min) / (q_max - q_min)` and an
//! integer zero-point `z`, and codes are `clip(round(w / s) + z, q_min, q_max)`
//! with `[q_min, q_max] = [-2^(k-1), 2^(k-1) - 1]`. Rounding is half away from
//! zero throughout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{dim_u32, LeReader, LeWriter};
use crate::tensor::{partition, GroupScheme, Matrix};

pub const RTN_MAGIC: &[u8; 4] = b"RTN1";
pub const RTN_VERSION: u32 = 1;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Relative floor applied to the scale of a constant group.
pub const DEGENERATE_SCALE: f64 = 1e-12;

#[inline]
pub fn q_min(k: u8) -> i64 {
    -(1i64 << (k - 1))
}

#[inline]
pub fn q_max(k: u8) -> i64 {
    (1i64 << (k - 1)) - 1
}

/// Per-group affine parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RtnParams {
    pub scale: f64,
    pub zero_point: i64,
}

/// k-bit integer codes with per-group scale and zero-point.
#[derive(Clone, Debug, PartialEq)]
pub struct RtnTensor {
    rows: usize,
    cols: usize,
    scheme: GroupScheme,
    bits: u8,
    codes: Vec<i8>,
    params: Vec<RtnParams>,
}

impl RtnTensor {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        scheme: GroupScheme,
        bits: u8,
        codes: Vec<i8>,
        params: Vec<RtnParams>,
    ) -> Result<Self> {
        check_bits(bits)?;
        let groups = rows * scheme.groups_per_row(cols)?;
        if codes.len() != rows * cols || params.len() != groups {
            return Err(Error::ShapeMismatch(format!(
                "{} codes / {} groups for {rows}x{cols} under {scheme}",
                codes.len(),
                params.len()
            )));
        }
        let (lo, hi) = (q_min(bits), q_max(bits));
        if let Some(i) = codes.iter().position(|&c| (c as i64) < lo || (c as i64) > hi) {
            return Err(Error::InvalidArgument(format!(
                "code {} at {i} outside [{lo}, {hi}]",
                codes[i]
            )));
        }
        if let Some(i) = params.iter().position(|p| !(p.scale > 0.0 && p.scale.is_finite())) {
            return Err(Error::InvalidArgument(format!("scale of group {i} is not positive")));
        }
        Ok(Self {
            rows,
            cols,
            scheme,
            bits,
            codes,
            params,
        })
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn scheme(&self) -> GroupScheme {
        self.scheme
    }

    #[inline]
    pub fn bits(&self) -> u8 {
        self.bits
    }

    #[inline]
    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    #[inline]
    pub fn params(&self) -> &[RtnParams] {
        &self.params
    }

    #[inline]
    pub fn num_groups(&self) -> usize {
        self.params.len()
    }

    #[inline]
    pub fn group_len(&self) -> usize {
        if self.params.is_empty() {
            self.cols
        } else {
            self.rows * self.cols / self.params.len()
        }
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = LeWriter::new(w);
        w.bytes(RTN_MAGIC)?;
        w.u32(RTN_VERSION)?;
        w.u32(dim_u32(self.rows)?)?;
        w.u32(dim_u32(self.cols)?)?;
        w.i32(self.scheme.to_signed())?;
        w.u8(self.bits)?;
        w.bytes(&pack_codes(&self.codes, self.bits))?;
        for p in &self.params {
            w.f64(p.scale)?;
            w.i64(p.zero_point)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader::new(r);
        r.magic(RTN_MAGIC)?;
        r.version(RTN_VERSION)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let scheme = GroupScheme::from_signed(r.i32()? as i64)
            .map_err(|e| Error::Format(e.to_string()))?;
        let bits = r.u8()?;
        check_bits(bits).map_err(|e| Error::Format(e.to_string()))?;
        let groups = rows * scheme.groups_per_row(cols).map_err(|e| Error::Format(e.to_string()))?;
        let n = rows * cols;
        let packed = r.bytes((n * bits as usize).div_ceil(8))?;
        let codes = unpack_codes(&packed, n, bits);
        let mut params = Vec::with_capacity(groups);
        for _ in 0..groups {
            let scale = r.f64()?;
            let zero_point = r.i64()?;
            params.push(RtnParams { scale, zero_point });
        }
        r.end()?;
        Self::from_parts(rows, cols, scheme, bits, codes, params)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn check_bits(k: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&k) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "bit width {k} outside {MIN_BITS}..={MAX_BITS}"
        )))
    }
}

/// Two's-complement k-bit codes in one LSB-first bit stream.
fn pack_codes(codes: &[i8], k: u8) -> Vec<u8> {
    let k = k as usize;
    let mask = (1u16 << k) - 1;
    let mut out = vec![0u8; (codes.len() * k).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        let v = (c as u8 as u16) & mask;
        for b in 0..k {
            if (v >> b) & 1 == 1 {
                let pos = i * k + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    out
}

fn unpack_codes(bytes: &[u8], n: usize, k: u8) -> Vec<i8> {
    let k = k as usize;
    (0..n)
        .map(|i| {
            let mut v: u16 = 0;
            for b in 0..k {
                let pos = i * k + b;
                v |= (((bytes[pos / 8] >> (pos % 8)) & 1) as u16) << b;
            }
            // sign-extend from k bits
            let shift = 16 - k;
            (((v << shift) as i16) >> shift) as i8
        })
        .collect()
}

/// Scale and zero-point for one group.
pub fn group_params(w: &[f64], k: u8) -> RtnParams {
    let (lo, hi) = (q_min(k), q_max(k));
    let r_min = w.iter().copied().fold(f64::INFINITY, f64::min);
    let r_max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = DEGENERATE_SCALE * r_min.abs().max(1.0);
    let scale = ((r_max - r_min) / (hi - lo) as f64).max(floor);
    let zero_point = (lo as f64 - r_min / scale).round() as i64;
    RtnParams { scale, zero_point }
}

#[inline]
fn encode(w: f64, p: RtnParams, k: u8) -> i8 {
    let q = ((w / p.scale).round() as i64).saturating_add(p.zero_point);
    q.clamp(q_min(k), q_max(k)) as i8
}

/// Round-to-nearest quantization with `k` bits.
pub fn quantize_rtn(m: &Matrix, scheme: GroupScheme, k: u8) -> Result<RtnTensor> {
    check_bits(k)?;
    let groups = partition(m, scheme)?;
    let mut codes = Vec::with_capacity(m.len());
    let mut params = Vec::with_capacity(groups.len());
    for g in groups {
        let p = group_params(g, k);
        codes.extend(g.iter().map(|&w| encode(w, p, k)));
        params.push(p);
    }
    RtnTensor::from_parts(m.rows(), m.cols(), scheme, k, codes, params)
}

/// `s * (code - z)` per element.
pub fn dequantize_rtn(t: &RtnTensor) -> Matrix {
    let gl = t.group_len().max(1);
    let data = t
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let p = t.params[i / gl];
            p.scale * (c as i64 - p.zero_point) as f64
        })
        .collect();
    Matrix::from_raw(t.rows, t.cols, data)
}
