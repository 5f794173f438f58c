//! Seeded synthetic weight generators.
//!
//! All generators draw from a ChaCha8 stream so a seed reproduces the same
//! matrix on every platform.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, StudentT};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weight distribution family. All are zero-centred.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightDist {
    Gaussian,
    Laplace,
    StudentT { dof: f64 },
    Uniform,
}

impl WeightDist {
    /// One draw with unit scale.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            WeightDist::Gaussian => Normal::new(0.0, 1.0).unwrap().sample(rng),
            WeightDist::Laplace => {
                // inverse CDF on (-1/2, 1/2)
                let u: f64 = rng.random::<f64>() - 0.5;
                let u = if u == -0.5 { -0.5 + f64::EPSILON } else { u };
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            WeightDist::StudentT { dof } => StudentT::new(dof).unwrap().sample(rng),
            WeightDist::Uniform => rng.random_range(-1.0..1.0),
        }
    }

    pub fn sample_vec<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * self.sample(rng)).collect()
    }
}

impl fmt::Display for WeightDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightDist::Gaussian => write!(f, "gaussian"),
            WeightDist::Laplace => write!(f, "laplace"),
            WeightDist::StudentT { dof } => write!(f, "student-t({dof})"),
            WeightDist::Uniform => write!(f, "uniform"),
        }
    }
}

impl FromStr for WeightDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(WeightDist::Gaussian),
            "laplace" | "laplacian" => Ok(WeightDist::Laplace),
            "student-t" | "studentt" | "t" => Ok(WeightDist::StudentT { dof: 3.0 }),
            "uniform" => Ok(WeightDist::Uniform),
            other => Err(Error::InvalidArgument(format!("unknown distribution '{other}'"))),
        }
    }
}

/// `rows x cols` matrix of i.i.d. draws times `scale`.
pub fn random_matrix(dist: WeightDist, rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_raw(rows, cols, dist.sample_vec(&mut r, rows * cols, scale))
}
