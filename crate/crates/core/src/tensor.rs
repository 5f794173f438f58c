//! Dense row-major matrices and the group partition shared by every quantizer.
//!
//! A group is a contiguous run of `G` weights inside a single row. Groups never
//! cross a row boundary, so a per-channel scheme is simply one group per row.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix, rejecting wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Internal constructor for data already known to be well formed.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * c).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Squared Frobenius distance to `other`.
    pub fn squared_distance(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// How each row is split into quantization groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupScheme {
    /// One group per row (group size `-1`).
    PerChannel,
    /// Contiguous groups of the given size; must divide the row length.
    Grouped(usize),
}

impl GroupScheme {
    /// Decode the signed convention used on the command line and in file
    /// headers: `-1` means per-channel.
    pub fn from_signed(group_size: i64) -> Result<Self> {
        match group_size {
            -1 => Ok(GroupScheme::PerChannel),
            g if g > 0 => Ok(GroupScheme::Grouped(g as usize)),
            g => Err(Error::InvalidArgument(format!("group size {g}"))),
        }
    }

    pub fn to_signed(self) -> i32 {
        match self {
            GroupScheme::PerChannel => -1,
            GroupScheme::Grouped(g) => g as i32,
        }
    }

    /// Effective group length for rows of `cols` elements.
    pub fn group_len(self, cols: usize) -> Result<usize> {
        match self {
            GroupScheme::PerChannel => Ok(cols),
            GroupScheme::Grouped(0) => Err(Error::InvalidArgument("group size 0".into())),
            GroupScheme::Grouped(g) if !cols.is_multiple_of(g) => {
                Err(Error::SchemeMismatch { group_size: g, cols })
            }
            GroupScheme::Grouped(g) => Ok(g),
        }
    }

    pub fn groups_per_row(self, cols: usize) -> Result<usize> {
        let g = self.group_len(cols)?;
        Ok(if g == 0 { 0 } else { cols / g })
    }

    /// Group index of element `(r, c)` in partition order.
    #[inline]
    pub(crate) fn group_of(r: usize, c: usize, group_len: usize, groups_per_row: usize) -> usize {
        r * groups_per_row + c / group_len
    }
}

impl fmt::Display for GroupScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupScheme::PerChannel => write!(f, "g-1"),
            GroupScheme::Grouped(g) => write!(f, "g{g}"),
        }
    }
}

impl FromStr for GroupScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('g');
        let v: i64 = t
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("group size '{s}'")))?;
        GroupScheme::from_signed(v)
    }
}

/// Split `m` into its groups, in row-major order.
pub fn partition(m: &Matrix, scheme: GroupScheme) -> Result<Vec<&[f64]>> {
    let g = scheme.group_len(m.cols())?;
    if g == 0 {
        return Ok(Vec::new());
    }
    Ok(m.as_slice().chunks(g).collect())
}

/// Inverse of [`partition`].
pub fn reassemble<S: AsRef<[f64]>>(
    groups: &[S],
    rows: usize,
    cols: usize,
    scheme: GroupScheme,
) -> Result<Matrix> {
    let g = scheme.group_len(cols)?;
    let expected = if g == 0 { 0 } else { rows * (cols / g) };
    if groups.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "expected {expected} groups, got {}",
            groups.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, grp) in groups.iter().enumerate() {
        let grp = grp.as_ref();
        if grp.len() != g {
            return Err(Error::ShapeMismatch(format!(
                "group {i} has length {}, expected {g}",
                grp.len()
            )));
        }
        data.extend_from_slice(grp);
    }
    Matrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m24() -> Matrix {
        Matrix::new(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap()
    }

    #[test]
    fn partition_group_size_two() {
        let m = m24();
        let groups = partition(&m, GroupScheme::Grouped(2)).unwrap();
        assert_eq!(groups.len(), 4);
        assert_eq!(groups[0], &[1.0, 2.0]);
        assert_eq!(groups[1], &[3.0, 4.0]);
        assert_eq!(groups[3], &[7.0, 8.0]);
    }

    #[test]
    fn partition_per_channel() {
        let m = m24();
        let groups = partition(&m, GroupScheme::PerChannel).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[1], &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn partition_rejects_non_divisor() {
        let err = partition(&m24(), GroupScheme::Grouped(3)).unwrap_err();
        assert!(matches!(err, Error::SchemeMismatch { group_size: 3, cols: 4 }));
    }

    #[test]
    fn reassemble_four_pairs() {
        let groups = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]];
        let m = reassemble(&groups, 2, 4, GroupScheme::Grouped(2)).unwrap();
        assert_eq!(m, m24());
    }

    #[test]
    fn reassemble_wrong_count() {
        let groups = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let err = reassemble(&groups, 2, 4, GroupScheme::Grouped(2)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn reassemble_wrong_length() {
        let groups = vec![vec![1.0, 2.0, 3.0], vec![4.0], vec![5.0, 6.0], vec![7.0, 8.0]];
        assert!(reassemble(&groups, 2, 4, GroupScheme::Grouped(2)).is_err());
    }

    #[test]
    fn matrix_rejects_nan_and_bad_len() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("-1".parse::<GroupScheme>().unwrap(), GroupScheme::PerChannel);
        assert_eq!("g64".parse::<GroupScheme>().unwrap(), GroupScheme::Grouped(64));
        assert!("0".parse::<GroupScheme>().is_err());
        assert!("-3".parse::<GroupScheme>().is_err());
        assert_eq!(GroupScheme::PerChannel.to_signed(), -1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_reassemble_roundtrip(
                rows in 1usize..6,
                gpr in 1usize..5,
                g in 1usize..6,
                per_channel in any::<bool>(),
                seed in any::<u64>(),
            ) {
                let cols = gpr * g;
                let mut s = seed;
                let m = Matrix::from_fn(rows, cols, |_, _| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
                });
                let scheme = if per_channel { GroupScheme::PerChannel } else { GroupScheme::Grouped(g) };
                let groups = partition(&m, scheme).unwrap();
                let back = reassemble(&groups, rows, cols, scheme).unwrap();
                prop_assert_eq!(back, m);
            }
        }
    }
}
