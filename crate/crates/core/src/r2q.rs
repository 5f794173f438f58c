//! Residual refinement quantization: a 2-bit code built from two 1-bit
//! kernels.
//!
//! The coarse kernel binarizes the weights; the refinement kernel binarizes
//! what the coarse kernel missed. Each group ends up on the four-point
//! codebook `{-a1-a2, -a1+a2, a1-a2, a1+a2}`, whose geometry follows the data
//! rather than a fixed uniform grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{dim_u32, LeReader, LeWriter};
use crate::onebit::{binarize_matrix, dequantize_onebit, BinaryKernel};
use crate::tensor::{GroupScheme, Matrix};

pub const R2Q_MAGIC: &[u8; 4] = b"R2Q1";
pub const R2Q_VERSION: u32 = 1;

/// Two binary kernels over the same shape and grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct R2QTensor {
    coarse: BinaryKernel,
    refine: BinaryKernel,
}

impl R2QTensor {
    pub fn from_kernels(coarse: BinaryKernel, refine: BinaryKernel) -> Result<Self> {
        if coarse.shape() != refine.shape() || coarse.scheme() != refine.scheme() {
            return Err(Error::ShapeMismatch(format!(
                "kernels disagree: {:?}/{} vs {:?}/{}",
                coarse.shape(),
                coarse.scheme(),
                refine.shape(),
                refine.scheme()
            )));
        }
        Ok(Self { coarse, refine })
    }

    #[inline]
    pub fn coarse(&self) -> &BinaryKernel {
        &self.coarse
    }

    #[inline]
    pub fn refine(&self) -> &BinaryKernel {
        &self.refine
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.coarse.shape()
    }

    #[inline]
    pub fn scheme(&self) -> GroupScheme {
        self.coarse.scheme()
    }

    #[inline]
    pub fn num_groups(&self) -> usize {
        self.coarse.num_groups()
    }

    #[inline]
    pub fn group_len(&self) -> usize {
        self.coarse.group_len()
    }

    /// Codebook level of element `(r, c)`, indexing [`codebook`] order:
    /// bit 1 is the coarse sign, bit 0 the refinement sign.
    #[inline]
    pub fn level(&self, r: usize, c: usize) -> usize {
        ((self.coarse.signs().get(r, c) as usize) << 1) | self.refine.signs().get(r, c) as usize
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let (rows, cols) = self.shape();
        let mut w = LeWriter::new(w);
        w.bytes(R2Q_MAGIC)?;
        w.u32(R2Q_VERSION)?;
        w.u32(dim_u32(rows)?)?;
        w.u32(dim_u32(cols)?)?;
        w.i32(self.scheme().to_signed())?;
        self.coarse.write_to(&mut w)?;
        self.refine.write_to(&mut w)?;
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader::new(r);
        r.magic(R2Q_MAGIC)?;
        r.version(R2Q_VERSION)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let scheme = GroupScheme::from_signed(r.i32()? as i64)
            .map_err(|e| Error::Format(e.to_string()))?;
        scheme
            .group_len(cols)
            .map_err(|e| Error::Format(e.to_string()))?;
        let coarse = BinaryKernel::read_from(&mut r, rows, cols, scheme)?;
        let refine = BinaryKernel::read_from(&mut r, rows, cols, scheme)?;
        r.end()?;
        Self::from_kernels(coarse, refine)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Coarse binarization followed by binarization of its residual.
pub fn quantize(m: &Matrix, scheme: GroupScheme) -> Result<R2QTensor> {
    let coarse = binarize_matrix(m, scheme)?;
    let r = residual(m, &coarse)?;
    let refine = binarize_matrix(&r, scheme)?;
    R2QTensor::from_kernels(coarse, refine)
}

/// `m - alpha * q`, element-wise.
pub fn residual(m: &Matrix, k: &BinaryKernel) -> Result<Matrix> {
    if m.shape() != k.shape() {
        return Err(Error::ShapeMismatch(format!(
            "matrix {:?} vs kernel {:?}",
            m.shape(),
            k.shape()
        )));
    }
    let approx = dequantize_onebit(k);
    let data = m
        .as_slice()
        .iter()
        .zip(approx.as_slice())
        .map(|(w, a)| w - a)
        .collect();
    Ok(Matrix::from_raw(m.rows(), m.cols(), data))
}

/// `a1 * q1 + a2 * q2` per element.
pub fn dequantize(t: &R2QTensor) -> Matrix {
    let (rows, cols) = t.shape();
    let gl = t.group_len();
    let gpr = t.coarse.groups_per_row();
    let (a1s, a2s) = (t.coarse.alphas(), t.refine.alphas());
    let (s1, s2) = (t.coarse.signs(), t.refine.signs());
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let row = out.row_mut(r);
        for (c, v) in row.iter_mut().enumerate() {
            let g = r * gpr + c / gl;
            let a1 = if s1.get(r, c) { a1s[g] } else { -a1s[g] };
            let a2 = if s2.get(r, c) { a2s[g] } else { -a2s[g] };
            *v = a1 + a2;
        }
    }
    out
}

/// The four representable values of group `group`, in the order
/// `[-a1-a2, -a1+a2, a1-a2, a1+a2]`. Not sorted: when `a2 > a1` the middle
/// pair is reversed.
pub fn codebook(t: &R2QTensor, group: usize) -> Result<[f64; 4]> {
    let n = t.num_groups();
    if group >= n {
        return Err(Error::IndexOutOfRange { index: group, len: n });
    }
    let a1 = t.coarse.alphas()[group];
    let a2 = t.refine.alphas()[group];
    Ok([-a1 + -a2, -a1 + a2, a1 + -a2, a1 + a2])
}
