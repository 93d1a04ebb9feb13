//! Sparse multivariate polynomials over `f64` and graded monomial indexing.
//!
//! Monomials are ordered by total degree first; within a degree, an exponent
//! with a larger power of an earlier variable comes first. For two variables
//! of degree two this gives `1, x1, x2, x1^2, x1*x2, x2^2`, so the unit
//! exponents `e_1, ..., e_n` always sit at positions `1..=n`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use crate::moments::Tms;
use crate::{Error, Result};

/// Coefficients smaller than this in magnitude are dropped after arithmetic.
pub const COEFF_TOL: f64 = 1e-14;

/// Number of monomials of total degree at most `degree` in `nvars` variables,
/// i.e. `binomial(nvars + degree, degree)`.
pub fn basis_len(nvars: usize, degree: usize) -> usize {
    binomial(nvars + degree, degree)
}

pub(crate) fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// An exponent vector `alpha` in `N^n`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Exponent(Vec<u32>);

impl Exponent {
    pub fn new(degrees: Vec<u32>) -> Self {
        Exponent(degrees)
    }

    pub fn zero(nvars: usize) -> Self {
        Exponent(vec![0; nvars])
    }

    /// The unit exponent `e_i` (zero-based `i`).
    pub fn unit(nvars: usize, i: usize) -> Self {
        let mut d = vec![0; nvars];
        d[i] = 1;
        Exponent(d)
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degrees(&self) -> &[u32] {
        &self.0
    }

    pub fn total_degree(&self) -> usize {
        self.0.iter().map(|&d| d as usize).sum()
    }

    pub fn add(&self, other: &Exponent) -> Exponent {
        debug_assert_eq!(self.nvars(), other.nvars());
        Exponent(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `prod_j point[j]^alpha_j`.
    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .map(|(&a, &x)| x.powi(a as i32))
            .product()
    }

    /// Position of this exponent in the graded basis of any degree at least
    /// `total_degree()`.
    pub fn graded_index(&self) -> usize {
        let n = self.nvars();
        let g = self.total_degree();
        if g == 0 {
            return 0;
        }
        // monomials of degree < g
        let mut idx = binomial(n + g - 1, n);
        let mut remaining = g;
        for (i, &a) in self.0.iter().enumerate().take(n.saturating_sub(1)) {
            let a = a as usize;
            let rest = n - i - 1;
            // exponents agreeing before i with a larger power at i
            if remaining > a {
                idx += binomial(remaining - a - 1 + rest, rest);
            }
            remaining -= a;
        }
        idx
    }
}

impl Ord for Exponent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.total_degree()
            .cmp(&other.total_degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Exponent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "y")?;
        for d in &self.0 {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

/// The graded enumeration of `N^n_d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialBasis {
    nvars: usize,
    degree: usize,
    exponents: Vec<Exponent>,
}

impl MonomialBasis {
    pub fn new(nvars: usize, degree: usize) -> Self {
        let mut exponents = Vec::with_capacity(basis_len(nvars, degree));
        let mut buf = vec![0u32; nvars];
        for g in 0..=degree {
            push_homogeneous(&mut buf, 0, g, &mut exponents);
        }
        MonomialBasis {
            nvars,
            degree,
            exponents,
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Exponent] {
        &self.exponents
    }

    pub fn index_of(&self, alpha: &Exponent) -> Option<usize> {
        if alpha.nvars() != self.nvars || alpha.total_degree() > self.degree {
            return None;
        }
        Some(alpha.graded_index())
    }
}

fn push_homogeneous(buf: &mut [u32], pos: usize, remaining: usize, out: &mut Vec<Exponent>) {
    if buf.is_empty() {
        if remaining == 0 {
            out.push(Exponent(Vec::new()));
        }
        return;
    }
    if pos == buf.len() - 1 {
        buf[pos] = remaining as u32;
        out.push(Exponent(buf.to_vec()));
        return;
    }
    for a in (0..=remaining).rev() {
        buf[pos] = a as u32;
        push_homogeneous(buf, pos + 1, remaining - a, out);
    }
    buf[pos] = 0;
}

/// A sparse real polynomial in `nvars` variables.
#[derive(Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Exponent, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Self::from_terms(nvars, [(Exponent::zero(nvars), c)])
    }

    /// The coordinate polynomial `x_i` (zero-based `i`).
    pub fn variable(nvars: usize, i: usize) -> Self {
        Self::from_terms(nvars, [(Exponent::unit(nvars, i), 1.0)])
    }

    /// Builds a polynomial, summing repeated exponents and dropping
    /// negligible coefficients.
    ///
    /// Panics if an exponent has the wrong number of variables.
    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Exponent, f64)>) -> Self {
        let mut p = Polynomial::zero(nvars);
        for (alpha, c) in terms {
            assert_eq!(alpha.nvars(), nvars, "exponent length mismatch");
            *p.terms.entry(alpha).or_insert(0.0) += c;
        }
        p.prune();
        p
    }

    /// Inverse of [`Polynomial::coefficient_vector`].
    pub fn from_coefficients(basis: &MonomialBasis, coeffs: &[f64]) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return Err(Error::PointLength {
                expected: basis.len(),
                got: coeffs.len(),
            });
        }
        Ok(Self::from_terms(
            basis.nvars(),
            basis.exponents().iter().cloned().zip(coeffs.iter().copied()),
        ))
    }

    /// Affine polynomial `c0 + sum_i a[i] x_i`.
    pub fn affine(c0: f64, a: &[f64]) -> Self {
        let n = a.len();
        let mut terms = vec![(Exponent::zero(n), c0)];
        terms.extend(a.iter().enumerate().map(|(i, &ai)| (Exponent::unit(n, i), ai)));
        Self::from_terms(n, terms)
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.abs() >= COEFF_TOL);
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(Exponent::total_degree).max().unwrap_or(0)
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Terms in graded order.
    pub fn terms(&self) -> impl Iterator<Item = (&Exponent, f64)> {
        self.terms.iter().map(|(e, &c)| (e, c))
    }

    pub fn coefficient(&self, alpha: &Exponent) -> f64 {
        self.terms.get(alpha).copied().unwrap_or(0.0)
    }

    /// Euclidean norm of the coefficient vector.
    pub fn coefficient_norm(&self) -> f64 {
        self.terms.values().map(|c| c * c).sum::<f64>().sqrt()
    }

    fn check_vars(&self, other: &Polynomial) -> Result<()> {
        if self.nvars != other.nvars {
            return Err(Error::VariableMismatch {
                left: self.nvars,
                right: other.nvars,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_vars(other)?;
        let mut out = self.clone();
        out.add_scaled_assign(other, 1.0);
        Ok(out)
    }

    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_vars(other)?;
        let mut out = self.clone();
        out.add_scaled_assign(other, -1.0);
        Ok(out)
    }

    /// `self += a * other`. Panics on a variable-count mismatch.
    pub fn add_scaled_assign(&mut self, other: &Polynomial, a: f64) {
        assert_eq!(self.nvars, other.nvars, "variable count mismatch");
        for (e, &c) in &other.terms {
            *self.terms.entry(e.clone()).or_insert(0.0) += a * c;
        }
        self.prune();
    }

    pub fn scale(&self, a: f64) -> Polynomial {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= a;
        }
        out.prune();
        out
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_vars(other)?;
        let mut acc: BTreeMap<Exponent, f64> = BTreeMap::new();
        for (ea, &ca) in &self.terms {
            for (eb, &cb) in &other.terms {
                *acc.entry(ea.add(eb)).or_insert(0.0) += ca * cb;
            }
        }
        let mut out = Polynomial {
            nvars: self.nvars,
            terms: acc,
        };
        out.prune();
        Ok(out)
    }

    /// `self^k` by repeated multiplication; `p^0 = 1`.
    pub fn power(&self, k: u32) -> Polynomial {
        let mut out = Polynomial::constant(self.nvars, 1.0);
        for _ in 0..k {
            out = out.mul(self).expect("same variable count");
        }
        out
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.nvars {
            return Err(Error::PointLength {
                expected: self.nvars,
                got: point.len(),
            });
        }
        Ok(self.terms.iter().map(|(e, c)| c * e.eval(point)).sum())
    }

    /// Substitutes `x_n = 1 - (x_1 + ... + x_{n-1})`, returning a polynomial
    /// in the first `n - 1` variables.
    pub fn eliminate_last_variable(&self) -> Result<Polynomial> {
        let n = self.nvars;
        if n < 2 {
            return Err(Error::TooFewVariables(n));
        }
        let m = n - 1;
        let max_last = self
            .terms
            .keys()
            .map(|e| e.degrees()[m])
            .max()
            .unwrap_or(0);
        let budget = Polynomial::affine(1.0, &vec![-1.0; m]);
        let mut powers = vec![Polynomial::constant(m, 1.0)];
        for k in 1..=max_last as usize {
            let next = powers[k - 1].mul(&budget)?;
            powers.push(next);
        }

        let mut out = Polynomial::zero(m);
        for (e, &c) in &self.terms {
            let head = Exponent(e.degrees()[..m].to_vec());
            let tail = &powers[e.degrees()[m] as usize];
            for (te, &tc) in &tail.terms {
                *out.terms.entry(head.add(te)).or_insert(0.0) += c * tc;
            }
        }
        out.prune();
        Ok(out)
    }

    /// Dense coefficients in the order of `basis`.
    pub fn coefficient_vector(&self, basis: &MonomialBasis) -> Result<Vec<f64>> {
        if basis.nvars() != self.nvars {
            return Err(Error::VariableMismatch {
                left: self.nvars,
                right: basis.nvars(),
            });
        }
        if self.degree() > basis.degree() {
            return Err(Error::DegreeOverflow {
                degree: self.degree(),
                limit: basis.degree(),
            });
        }
        let mut v = vec![0.0; basis.len()];
        for (e, &c) in &self.terms {
            v[e.graded_index()] = c;
        }
        Ok(v)
    }

    /// The Riesz pairing `<p, y> = sum_alpha p_alpha y_alpha`.
    pub fn riesz_pairing(&self, y: &Tms) -> Result<f64> {
        if y.nvars() != self.nvars {
            return Err(Error::VariableMismatch {
                left: self.nvars,
                right: y.nvars(),
            });
        }
        if self.degree() > y.degree() {
            return Err(Error::DegreeOverflow {
                degree: self.degree(),
                limit: y.degree(),
            });
        }
        Ok(self
            .terms
            .iter()
            .map(|(e, c)| c * y.values()[e.graded_index()])
            .sum())
    }
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (e, c)) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c}")?;
            for (v, &d) in e.degrees().iter().enumerate() {
                match d {
                    0 => {}
                    1 => write!(f, "*x{}", v + 1)?,
                    _ => write!(f, "*x{}^{}", v + 1, d)?,
                }
            }
        }
        Ok(())
    }
}

/// The Dirac tms `[u]_degree`, i.e. `y_alpha = u^alpha` for `|alpha| <= degree`.
pub fn monomial_vector(point: &[f64], degree: usize) -> Tms {
    let basis = MonomialBasis::new(point.len(), degree);
    let values = basis.exponents().iter().map(|e| e.eval(point)).collect();
    Tms::new(point.len(), degree, values).expect("length matches basis")
}
