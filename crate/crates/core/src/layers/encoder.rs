//! Embedding of the trade-off weight `λ` into a conditioning vector.
//!
//! Grid values map to columns of an orthonormal dictionary (DCT-II or a
//! seeded random orthogonal matrix). A `λ` between two grid values maps to
//! the distance-weighted blend of the two neighbouring columns, rescaled to
//! unit length; outside the grid it snaps to the nearest end column.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Encoding scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingScheme {
    /// `λ` itself, `d = 1`.
    Scalar,
    /// Columns of the `d`-point orthonormal DCT-II matrix.
    Dct(usize),
    /// Columns of a seeded random orthogonal `d×d` matrix.
    RandomOrthogonal(usize),
}

impl EncodingScheme {
    pub fn dim(self) -> usize {
        match self {
            EncodingScheme::Scalar => 1,
            EncodingScheme::Dct(d) | EncodingScheme::RandomOrthogonal(d) => d,
        }
    }
}

impl fmt::Display for EncodingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncodingScheme::Scalar => write!(f, "none"),
            EncodingScheme::Dct(d) => write!(f, "DCT-{d}"),
            EncodingScheme::RandomOrthogonal(d) => write!(f, "RO-{d}"),
        }
    }
}

impl FromStr for EncodingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("none") {
            return Ok(EncodingScheme::Scalar);
        }
        let bad = || {
            Error::InvalidValue(format!(
                "unknown encoder {s:?} (expected none, DCT-d or RO-d)"
            ))
        };
        let (kind, d) = t.split_once('-').ok_or_else(bad)?;
        let d: usize = d.parse().map_err(|_| bad())?;
        if d == 0 {
            return Err(bad());
        }
        match kind.to_ascii_uppercase().as_str() {
            "DCT" => Ok(EncodingScheme::Dct(d)),
            "RO" => Ok(EncodingScheme::RandomOrthogonal(d)),
            _ => Err(bad()),
        }
    }
}

/// Maps `λ ∈ [0,1]` to a `d`-dimensional conditioning vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaEncoder {
    scheme: EncodingScheme,
    /// Training `λ` values, ascending.
    grid: Vec<f64>,
    /// `d × |grid|`, row-major; column `j` encodes `grid[j]`.
    matrix: Vec<f64>,
}

impl LambdaEncoder {
    /// Builds the dictionary for `grid`. `seed` only affects random orthogonal encodings.
    pub fn new(scheme: EncodingScheme, grid: &[f64], seed: u64) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Empty("lambda grid"));
        }
        let mut sorted = grid.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite lambdas"));
        sorted.dedup();
        if let Some(&bad) = sorted.iter().find(|&&l| !(0.0..=1.0).contains(&l)) {
            return Err(Error::LambdaOutOfRange(bad));
        }
        let d = scheme.dim();
        let n = sorted.len();
        if !matches!(scheme, EncodingScheme::Scalar) && n > d {
            return Err(Error::InvalidValue(format!(
                "{n} grid values do not fit a {d}-dimensional {scheme} dictionary"
            )));
        }
        let matrix = match scheme {
            EncodingScheme::Scalar => sorted.clone(),
            EncodingScheme::Dct(d) => dct_columns(d, n),
            EncodingScheme::RandomOrthogonal(d) => random_orthonormal_columns(d, n, seed),
        };
        Ok(LambdaEncoder {
            scheme,
            grid: sorted,
            matrix,
        })
    }

    /// Reassembles an encoder from stored parts (checkpoint loading).
    pub fn from_parts(scheme: EncodingScheme, grid: Vec<f64>, matrix: Vec<f64>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Empty("lambda grid"));
        }
        if matrix.len() != scheme.dim() * grid.len() {
            return Err(Error::Dimension {
                op: "encoder",
                detail: format!(
                    "matrix of {} for {} x {}",
                    matrix.len(),
                    scheme.dim(),
                    grid.len()
                ),
            });
        }
        Ok(LambdaEncoder {
            scheme,
            grid,
            matrix,
        })
    }

    pub fn scheme(&self) -> EncodingScheme {
        self.scheme
    }

    pub fn dim(&self) -> usize {
        self.scheme.dim()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let n = self.grid.len();
        (0..self.dim()).map(|r| self.matrix[r * n + j]).collect()
    }

    pub fn encode(&self, lambda: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::LambdaOutOfRange(lambda));
        }
        if let EncodingScheme::Scalar = self.scheme {
            return Ok(vec![lambda]);
        }
        if let Some(j) = self.grid.iter().position(|&g| g == lambda) {
            return Ok(self.column(j));
        }
        let upper = self.grid.iter().position(|&g| g > lambda);
        let (lo, hi) = match upper {
            Some(0) => return Ok(self.column(0)),
            None => return Ok(self.column(self.grid.len() - 1)),
            Some(u) => (u - 1, u),
        };
        let t = (lambda - self.grid[lo]) / (self.grid[hi] - self.grid[lo]);
        let (a, b) = (self.column(lo), self.column(hi));
        let mut v: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (1.0 - t) * x + t * y)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// First `n` columns of the orthonormal DCT-II matrix `D[k][j] = s_k cos(π(2j+1)k / 2d)`.
fn dct_columns(d: usize, n: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * n];
    for k in 0..d {
        let scale = if k == 0 {
            (1.0 / d as f64).sqrt()
        } else {
            (2.0 / d as f64).sqrt()
        };
        for j in 0..n {
            let angle = std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2 * d) as f64;
            m[k * n + j] = scale * angle.cos();
        }
    }
    m
}

/// `n` orthonormal columns in `R^d` from Gram-Schmidt on seeded Gaussian vectors.
fn random_orthonormal_columns(d: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    let mut m = vec![0.0; d * n];
    for (j, c) in cols.iter().enumerate() {
        for (r, &v) in c.iter().enumerate() {
            m[r * n + j] = v;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    const S1: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 1.0];

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn random_orthogonal_columns_are_orthonormal() {
        let enc = LambdaEncoder::new(EncodingScheme::RandomOrthogonal(128), &S1, 7).unwrap();
        assert_eq!(enc.encode(0.0).unwrap(), enc.column(0));
        for (i, &a) in S1.iter().enumerate() {
            for (j, &b) in S1.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = dot(&enc.encode(a).unwrap(), &enc.encode(b).unwrap());
                assert!((got - want).abs() < 1e-6, "{i},{j}: {got}");
            }
        }
    }

    #[test]
    fn dct8_gram_is_identity_against_direct_formula() {
        let grid: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let enc = LambdaEncoder::new(EncodingScheme::Dct(8), &grid, 0).unwrap();
        for i in 0..8 {
            // independent formula: basis vector of DCT-II, column view
            let direct: Vec<f64> = (0..8)
                .map(|k| {
                    let a = if k == 0 {
                        0.125f64.sqrt()
                    } else {
                        0.25f64.sqrt()
                    };
                    a * ((std::f64::consts::PI / 8.0) * (i as f64 + 0.5) * k as f64).cos()
                })
                .collect();
            for (x, y) in enc.column(i).iter().zip(&direct) {
                assert!((x - y).abs() < 1e-12);
            }
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&enc.column(i), &enc.column(j)) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scalar_scheme_passes_lambda_through() {
        let enc = LambdaEncoder::new(EncodingScheme::Scalar, &S1, 0).unwrap();
        assert_eq!(enc.encode(0.3).unwrap(), vec![0.3]);
        assert_eq!(enc.dim(), 1);
    }

    #[test]
    fn unseen_lambda_interpolates_and_is_unit_norm() {
        let enc = LambdaEncoder::new(EncodingScheme::RandomOrthogonal(16), &S1, 3).unwrap();
        let v = enc.encode(0.15).unwrap();
        assert!((dot(&v, &v) - 1.0).abs() < 1e-12);
        let a = enc.column(1);
        let b = enc.column(2);
        // midpoint of two orthonormal columns: equal weight on both
        assert!((dot(&v, &a) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((dot(&v, &b) - 0.5f64.sqrt()).abs() < 1e-9);
        // continuity towards the grid point
        let near = enc.encode(0.1 + 1e-9).unwrap();
        assert!(dot(&near, &a) > 1.0 - 1e-6);
    }

    #[test]
    fn errors() {
        assert!(LambdaEncoder::new(EncodingScheme::Dct(4), &[], 0).is_err());
        assert!(LambdaEncoder::new(EncodingScheme::Dct(4), &S1, 0).is_err());
        let enc = LambdaEncoder::new(EncodingScheme::Dct(8), &S1, 0).unwrap();
        assert!(enc.encode(1.5).is_err());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!(
            "RO-128".parse::<EncodingScheme>().unwrap(),
            EncodingScheme::RandomOrthogonal(128)
        );
        assert_eq!(
            "dct-8".parse::<EncodingScheme>().unwrap(),
            EncodingScheme::Dct(8)
        );
        assert_eq!(
            "none".parse::<EncodingScheme>().unwrap(),
            EncodingScheme::Scalar
        );
        assert!("RO-0".parse::<EncodingScheme>().is_err());
        assert_eq!(EncodingScheme::RandomOrthogonal(128).to_string(), "RO-128");
    }
}
