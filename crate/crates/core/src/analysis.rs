//! Quantization error and lattice-utilization reporting.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::onebit::{binarize_matrix, dequantize_onebit, BinaryKernel};
use crate::r2q::{self, R2QTensor};
use crate::rtn::{self, dequantize_rtn, quantize_rtn, RtnTensor};
use crate::tensor::{GroupScheme, Matrix};

pub use crate::sampling::{random_matrix, WeightDist};

/// Bits per baseline (unquantized) weight in the compression-ratio model.
pub const BASELINE_BITS: f64 = 16.0;
/// Bits charged per stored scale or zero-point.
pub const PARAM_BITS: f64 = 32.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Coarse kernel only.
    OneBit,
    R2Q,
    Rtn { bits: u8 },
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::OneBit => write!(f, "1bit"),
            Method::R2Q => write!(f, "r2q"),
            Method::Rtn { bits } => write!(f, "rtn-k{bits}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "r2q" => Ok(Method::R2Q),
            "1bit" | "onebit" | "binary" => Ok(Method::OneBit),
            "rtn" => Ok(Method::Rtn { bits: 2 }),
            _ => {
                let bits = s
                    .strip_prefix("rtn-k")
                    .or_else(|| s.strip_prefix("rtn"))
                    .and_then(|b| b.parse::<u8>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))?;
                Ok(Method::Rtn { bits })
            }
        }
    }
}

/// A quantized weight matrix of any supported kind.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantizedTensor {
    OneBit(BinaryKernel),
    R2Q(R2QTensor),
    Rtn(RtnTensor),
}

impl QuantizedTensor {
    pub fn quantize(m: &Matrix, scheme: GroupScheme, method: Method) -> Result<Self> {
        Ok(match method {
            Method::OneBit => QuantizedTensor::OneBit(binarize_matrix(m, scheme)?),
            Method::R2Q => QuantizedTensor::R2Q(r2q::quantize(m, scheme)?),
            Method::Rtn { bits } => QuantizedTensor::Rtn(quantize_rtn(m, scheme, bits)?),
        })
    }

    pub fn dequantize(&self) -> Matrix {
        match self {
            QuantizedTensor::OneBit(k) => dequantize_onebit(k),
            QuantizedTensor::R2Q(t) => r2q::dequantize(t),
            QuantizedTensor::Rtn(t) => dequantize_rtn(t),
        }
    }

    pub fn method(&self) -> Method {
        match self {
            QuantizedTensor::OneBit(_) => Method::OneBit,
            QuantizedTensor::R2Q(_) => Method::R2Q,
            QuantizedTensor::Rtn(t) => Method::Rtn { bits: t.bits() },
        }
    }

    pub fn scheme(&self) -> GroupScheme {
        match self {
            QuantizedTensor::OneBit(k) => k.scheme(),
            QuantizedTensor::R2Q(t) => t.scheme(),
            QuantizedTensor::Rtn(t) => t.scheme(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            QuantizedTensor::OneBit(k) => k.shape(),
            QuantizedTensor::R2Q(t) => t.shape(),
            QuantizedTensor::Rtn(t) => t.shape(),
        }
    }
}

/// Per-element squared error of two equally shaped matrices.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    let d = a.squared_distance(b)?;
    Ok(if a.is_empty() { 0.0 } else { d / a.len() as f64 })
}

/// Mean over layers of each layer's mean squared error.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    pub method: Option<Method>,
    pub scheme: Option<GroupScheme>,
    pub per_layer: Vec<(String, f64)>,
    pub mean: f64,
}

impl ErrorReport {
    pub fn tagged(mut self, method: Method, scheme: GroupScheme) -> Self {
        self.method = Some(method);
        self.scheme = Some(scheme);
        self
    }
}

pub fn layer_mse(originals: &[Matrix], quantized: &[Matrix]) -> Result<ErrorReport> {
    if originals.len() != quantized.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} original layers vs {} quantized",
            originals.len(),
            quantized.len()
        )));
    }
    if originals.is_empty() {
        return Err(Error::ShapeMismatch("no layers".into()));
    }
    let per_layer = originals
        .iter()
        .zip(quantized)
        .enumerate()
        .map(|(j, (w, q))| Ok((format!("layer{j}"), mse(w, q)?)))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_layer.iter().map(|(_, e)| e).sum::<f64>() / per_layer.len() as f64;
    Ok(ErrorReport {
        method: None,
        scheme: None,
        per_layer,
        mean,
    })
}

/// How many weights of each group land on each level.
///
/// R2Q levels follow [`r2q::codebook`] order, RTN levels are `code - q_min`,
/// 1-bit levels are `[-a, +a]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyHistogram {
    pub levels: usize,
    pub group_len: usize,
    pub counts: Vec<Vec<usize>>,
}

impl OccupancyHistogram {
    /// Mean over groups of the share held by the most populated level.
    pub fn dominant_share(&self) -> f64 {
        if self.counts.is_empty() || self.group_len == 0 {
            return 0.0;
        }
        let total: f64 = self
            .counts
            .iter()
            .map(|c| *c.iter().max().unwrap_or(&0) as f64 / self.group_len as f64)
            .sum();
        total / self.counts.len() as f64
    }

    /// Mean over groups of the fraction of levels left empty.
    pub fn empty_fraction(&self) -> f64 {
        if self.counts.is_empty() || self.levels == 0 {
            return 0.0;
        }
        let total: f64 = self
            .counts
            .iter()
            .map(|c| c.iter().filter(|&&n| n == 0).count() as f64 / self.levels as f64)
            .sum();
        total / self.counts.len() as f64
    }

    /// Share of all weights per level, summed across groups.
    pub fn level_fractions(&self) -> Vec<f64> {
        let mut sums = vec![0usize; self.levels];
        for c in &self.counts {
            for (s, n) in sums.iter_mut().zip(c) {
                *s += n;
            }
        }
        let total = sums.iter().sum::<usize>().max(1) as f64;
        sums.into_iter().map(|s| s as f64 / total).collect()
    }
}

pub fn occupancy(t: &QuantizedTensor) -> OccupancyHistogram {
    match t {
        QuantizedTensor::OneBit(k) => {
            let gl = k.group_len();
            let gpr = k.groups_per_row();
            let mut counts = vec![vec![0usize; 2]; k.num_groups()];
            for r in 0..k.rows() {
                for c in 0..k.cols() {
                    counts[r * gpr + c / gl][k.signs().get(r, c) as usize] += 1;
                }
            }
            OccupancyHistogram {
                levels: 2,
                group_len: gl,
                counts,
            }
        }
        QuantizedTensor::R2Q(t) => {
            let (rows, cols) = t.shape();
            let gl = t.group_len();
            let gpr = t.coarse().groups_per_row();
            let mut counts = vec![vec![0usize; 4]; t.num_groups()];
            for r in 0..rows {
                for c in 0..cols {
                    counts[r * gpr + c / gl][t.level(r, c)] += 1;
                }
            }
            OccupancyHistogram {
                levels: 4,
                group_len: gl,
                counts,
            }
        }
        QuantizedTensor::Rtn(t) => {
            let levels = 1usize << t.bits();
            let gl = t.group_len();
            let lo = rtn::q_min(t.bits());
            let mut counts = vec![vec![0usize; levels]; t.num_groups()];
            for (i, &c) in t.codes().iter().enumerate() {
                counts[i / gl][(c as i64 - lo) as usize] += 1;
            }
            OccupancyHistogram {
                levels,
                group_len: gl,
                counts,
            }
        }
    }
}

/// Quantized footprint over a 16-bit baseline.
///
/// Payload bits per weight plus 32 bits for every stored scale and
/// zero-point: R2Q keeps two scales per group, RTN a scale and a zero-point,
/// the 1-bit kernel one scale.
pub fn compression_ratio(rows: usize, cols: usize, scheme: GroupScheme, method: Method) -> Result<f64> {
    let n = (rows * cols) as f64;
    if n == 0.0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    let groups = (rows * scheme.groups_per_row(cols)?) as f64;
    let (payload, params_per_group) = match method {
        Method::OneBit => (1.0, 1.0),
        Method::R2Q => (2.0, 2.0),
        Method::Rtn { bits } => (bits as f64, 2.0),
    };
    Ok((payload * n + params_per_group * PARAM_BITS * groups) / (BASELINE_BITS * n))
}

/// One (layer, method, scheme) cell of a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareCell {
    pub layer: String,
    pub method: Method,
    pub scheme: GroupScheme,
    pub mse: f64,
    pub dominant_share: f64,
    pub empty_levels: f64,
    pub compression_ratio: f64,
    /// Per-channel MSE minus this cell's MSE for the same method and layer;
    /// absent when per-channel was not among the schemes.
    pub coarse_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub cells: Vec<CompareCell>,
}

pub const COMPARE_HEADER: &str =
    "layer,method,scheme,mse,dominant_share,empty_levels,compression_ratio,coarse_delta";

impl CompareReport {
    pub fn cell(&self, layer: &str, method: Method, scheme: GroupScheme) -> Option<&CompareCell> {
        self.cells
            .iter()
            .find(|c| c.layer == layer && c.method == method && c.scheme == scheme)
    }

    /// Mean MSE across layers for one (method, scheme).
    pub fn aggregate(&self, method: Method, scheme: GroupScheme) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method && c.scheme == scheme)
            .map(|c| c.mse)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{COMPARE_HEADER}")?;
        for c in &self.cells {
            writeln!(
                w,
                "{},{},{},{:e},{:.6},{:.6},{:.6},{}",
                c.layer,
                c.method,
                c.scheme,
                c.mse,
                c.dominant_share,
                c.empty_levels,
                c.compression_ratio,
                c.coarse_delta.map(|d| format!("{d:e}")).unwrap_or_default()
            )?;
        }
        Ok(())
    }

    /// Long format `method,scheme,layer,metric,value`, one metric per line.
    pub fn write_long_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "method,scheme,layer,metric,value")?;
        for c in &self.cells {
            let mut metrics = vec![
                ("mse", c.mse),
                ("dominant_share", c.dominant_share),
                ("empty_levels", c.empty_levels),
                ("compression_ratio", c.compression_ratio),
            ];
            if let Some(d) = c.coarse_delta {
                metrics.push(("coarse_delta", d));
            }
            for (name, v) in metrics {
                writeln!(w, "{},{},{},{},{:e}", c.method, c.scheme, c.layer, name, v)?;
            }
        }
        Ok(())
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{:<10} {:<8} {:<6} {:>12} {:>9} {:>8} {:>7} {:>12}",
            "layer", "method", "scheme", "mse", "dominant", "empty", "cr", "coarse-delta"
        )?;
        for c in &self.cells {
            writeln!(
                w,
                "{:<10} {:<8} {:<6} {:>12.4e} {:>9.3} {:>8.3} {:>6.2}% {:>12}",
                c.layer,
                c.method.to_string(),
                c.scheme.to_string(),
                c.mse,
                c.dominant_share,
                c.empty_levels,
                100.0 * c.compression_ratio,
                c.coarse_delta.map(|d| format!("{d:.4e}")).unwrap_or_else(|| "-".into())
            )?;
        }
        Ok(())
    }
}

/// Quantize every named layer under every (method, scheme) pair.
pub fn compare_layers(
    layers: &[(String, Matrix)],
    schemes: &[GroupScheme],
    methods: &[Method],
) -> Result<CompareReport> {
    let mut cells = Vec::new();
    for (name, m) in layers {
        for &method in methods {
            let start = cells.len();
            for &scheme in schemes {
                let q = QuantizedTensor::quantize(m, scheme, method)?;
                let hist = occupancy(&q);
                cells.push(CompareCell {
                    layer: name.clone(),
                    method,
                    scheme,
                    mse: mse(m, &q.dequantize())?,
                    dominant_share: hist.dominant_share(),
                    empty_levels: hist.empty_fraction(),
                    compression_ratio: compression_ratio(m.rows(), m.cols(), scheme, method)?,
                    coarse_delta: None,
                });
            }
            let coarse = cells[start..]
                .iter()
                .find(|c| c.scheme == GroupScheme::PerChannel)
                .map(|c| c.mse);
            if let Some(coarse) = coarse {
                for c in &mut cells[start..] {
                    c.coarse_delta = Some(coarse - c.mse);
                }
            }
        }
    }
    Ok(CompareReport { cells })
}

pub fn compare(m: &Matrix, schemes: &[GroupScheme], methods: &[Method]) -> Result<CompareReport> {
    compare_layers(&[("layer0".to_string(), m.clone())], schemes, methods)
}
