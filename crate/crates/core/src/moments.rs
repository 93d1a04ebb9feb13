//! Truncated moment sequences and the moment/localizing matrices built from
//! them.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::polynomials::{basis_len, MonomialBasis, Polynomial};
use crate::{Error, Result};

/// Relative eigenvalue guard for the PSD tests in [`membership`].
pub const PSD_TOL: f64 = 1e-8;

/// A truncated moment sequence `y = (y_alpha)` for `|alpha| <= degree`, stored
/// in graded order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tms {
    nvars: usize,
    degree: usize,
    values: Vec<f64>,
}

impl Tms {
    pub fn new(nvars: usize, degree: usize, values: Vec<f64>) -> Result<Self> {
        let expected = basis_len(nvars, degree);
        if values.len() != expected {
            return Err(Error::PointLength {
                expected,
                got: values.len(),
            });
        }
        Ok(Tms {
            nvars,
            degree,
            values,
        })
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Euclidean norm of the whole sequence, `y_0` included.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// First-order moments `(y_{e_1}, ..., y_{e_n})`.
    pub fn first_moments(&self) -> &[f64] {
        &self.values[1..=self.nvars]
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Tms, b: f64) -> Tms {
        assert_eq!(self.values.len(), other.values.len());
        Tms {
            nvars: self.nvars,
            degree: self.degree,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(u, v)| a * u + b * v)
                .collect(),
        }
    }
}

/// A linear map from a tms to an `s x s` symmetric matrix. Entry `(a, b)`
/// with `a <= b` is a sparse combination of tms positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMatrixMap {
    nvars: usize,
    size: usize,
    max_degree: usize,
    // packed upper triangle, row-major
    entries: Vec<Vec<(usize, f64)>>,
}

impl LinearMatrixMap {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    /// Largest monomial degree referenced by any entry.
    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    fn packed(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        a * self.size - a * (a + 1) / 2 + b
    }

    /// The `(position, weight)` pairs of entry `(a, b)`.
    pub fn entry(&self, a: usize, b: usize) -> &[(usize, f64)] {
        &self.entries[self.packed(a, b)]
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(Vec::is_empty)
    }

    /// Largest tms position referenced, if any.
    pub fn max_position(&self) -> Option<usize> {
        self.entries.iter().flatten().map(|&(p, _)| p).max()
    }

    /// `L(y)` as a dense symmetric matrix.
    pub fn apply(&self, y: &Tms) -> Result<DMatrix<f64>> {
        if y.nvars() != self.nvars {
            return Err(Error::VariableMismatch {
                left: self.nvars,
                right: y.nvars(),
            });
        }
        if y.degree() < self.max_degree && !self.is_zero() {
            return Err(Error::DegreeOverflow {
                degree: self.max_degree,
                limit: y.degree(),
            });
        }
        Ok(self.apply_slice(y.values()))
    }

    /// Same as [`LinearMatrixMap::apply`] on a raw value slice long enough for
    /// every referenced position.
    pub fn apply_slice(&self, y: &[f64]) -> DMatrix<f64> {
        let s = self.size;
        let mut out = DMatrix::zeros(s, s);
        for a in 0..s {
            for b in a..s {
                let v: f64 = self.entry(a, b).iter().map(|&(p, w)| w * y[p]).sum();
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        out
    }

    /// Splits the map as `L(y) = sum_p y_p B_p` and returns the nonzero
    /// `(p, B_p)` pairs in increasing `p`.
    pub fn coefficient_matrices(&self) -> Vec<(usize, DMatrix<f64>)> {
        let s = self.size;
        let mut mats: std::collections::BTreeMap<usize, DMatrix<f64>> = Default::default();
        for a in 0..s {
            for b in a..s {
                for &(p, w) in self.entry(a, b) {
                    let m = mats.entry(p).or_insert_with(|| DMatrix::zeros(s, s));
                    m[(a, b)] += w;
                    if a != b {
                        m[(b, a)] += w;
                    }
                }
            }
        }
        mats.into_iter().collect()
    }
}

/// The `k`-th localizing matrix map of `q`: entry `(alpha, beta)` is
/// `sum_gamma q_gamma y_{alpha + beta + gamma}` with `alpha, beta` running
/// over `N^n_{k - t0}`, `t0 = ceil(deg q / 2)`. With `q = 1` this is the
/// moment matrix `M_k[y]`.
pub fn localizing_map(q: &Polynomial, k: usize, nvars: usize) -> Result<LinearMatrixMap> {
    if q.nvars() != nvars {
        return Err(Error::VariableMismatch {
            left: q.nvars(),
            right: nvars,
        });
    }
    let t0 = q.degree().div_ceil(2);
    if k < t0 {
        return Err(Error::OrderTooSmall {
            order: k,
            required: t0,
        });
    }
    let rows = MonomialBasis::new(nvars, k - t0);
    let s = rows.len();
    let mut entries = Vec::with_capacity(s * (s + 1) / 2);
    for a in 0..s {
        for b in a..s {
            let ab = rows.exponents()[a].add(&rows.exponents()[b]);
            let entry: Vec<(usize, f64)> = q
                .terms()
                .map(|(g, c)| (ab.add(g).graded_index(), c))
                .collect();
            entries.push(entry);
        }
    }
    Ok(LinearMatrixMap {
        nvars,
        size: s,
        max_degree: 2 * (k - t0) + q.degree(),
        entries,
    })
}

/// The moment matrix map `M_k`.
pub fn moment_map(k: usize, nvars: usize) -> LinearMatrixMap {
    localizing_map(&Polynomial::constant(nvars, 1.0), k, nvars).expect("constant has degree 0")
}

/// Outcome of a membership test in `S(g)_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub member: bool,
    /// Least eigenvalue over all tested matrices.
    pub margin: f64,
}

/// Smallest eigenvalue, and whether it passes the relative PSD guard.
pub fn psd_check(m: &DMatrix<f64>) -> (bool, f64) {
    if m.nrows() == 0 {
        return (true, 0.0);
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max_abs = eig.iter().map(|v| v.abs()).fold(0.0, f64::max);
    (min >= -PSD_TOL * (1.0 + max_abs), min)
}

/// Tests `M_k[y] >= 0` and `L_{g_i}^{(k)}[y] >= 0` for every `g_i`.
pub fn membership(g: &[Polynomial], k: usize, y: &Tms) -> Result<Membership> {
    let mut member = true;
    let mut margin = f64::INFINITY;
    let mut check = |map: LinearMatrixMap| -> Result<()> {
        let (ok, min) = psd_check(&map.apply(y)?);
        member &= ok;
        margin = margin.min(min);
        Ok(())
    };
    check(moment_map(k, y.nvars()))?;
    for gi in g {
        check(localizing_map(gi, k, y.nvars())?)?;
    }
    Ok(Membership { member, margin })
}
