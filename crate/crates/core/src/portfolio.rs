//! Portfolio loss polynomials.
//!
//! The loss of a portfolio `x` under returns `xi` is
//! `-l1 r + l2 r_2 - l3 r_3 + ... + (-1)^d ld r_d` with `r = x . xi` and
//! `r_i` the i-th central power of `r`. Every builder here works in the
//! reduced variables `(x_1, ..., x_{n-1})`, the last proportion being
//! `1 - sum(x_i)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::polynomials::Polynomial;
use crate::{Error, Result};

/// Default cap on the loss degree.
pub const DEFAULT_MAX_DEGREE: usize = 6;

/// Risk preference weights `(l_1, ..., l_d)`: nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskPreference {
    lambda: Vec<f64>,
}

impl RiskPreference {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::InvalidPreference("at least one weight is required".into()));
        }
        if let Some((i, v)) = lambda
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::InvalidPreference(format!(
                "lambda[{}] = {v} must be a nonnegative number",
                i + 1
            )));
        }
        let total: f64 = lambda.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidPreference(format!(
                "weights must sum to 1, got {total}"
            )));
        }
        Ok(RiskPreference { lambda })
    }

    /// Highest moment order `d`.
    pub fn degree(&self) -> usize {
        self.lambda.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.lambda
    }
}

/// `N` return observations of `n` assets, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSamples {
    values: DMatrix<f64>,
}

impl ReturnSamples {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 1 {
            return Err(Error::InvalidSamples("at least one sample is required".into()));
        }
        if values.ncols() < 2 {
            return Err(Error::InvalidSamples("at least two assets are required".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidSamples(format!("non-finite entry {v}")));
        }
        Ok(ReturnSamples { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::InvalidSamples(format!(
                "ragged rows: expected {n} columns, found {}",
                r.len()
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(rows.len(), n, &flat))
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn assets(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.values.row(j).iter().copied().collect()
    }
}

/// Multivariate normal returns `N(mean, covariance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalModel {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl NormalModel {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n < 2 {
            return Err(Error::InvalidModel("at least two assets are required".into()));
        }
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::InvalidModel(format!(
                "covariance is {}x{}, expected {n}x{n}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite parameter".into()));
        }
        if (&covariance - covariance.transpose()).abs().max() > 1e-12 {
            return Err(Error::InvalidModel("covariance is not symmetric".into()));
        }
        let min_eig = SymmetricEigen::new(covariance.clone()).eigenvalues.min();
        if min_eig < -1e-10 {
            return Err(Error::InvalidModel(format!(
                "covariance is not positive semidefinite (eigenvalue {min_eig})"
            )));
        }
        Ok(NormalModel {
            mean: DVector::from_vec(mean),
            covariance,
        })
    }

    pub fn from_rows(mean: Vec<f64>, covariance: &[Vec<f64>]) -> Result<Self> {
        let n = mean.len();
        if covariance.len() != n || covariance.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidModel(format!("covariance must be {n}x{n}")));
        }
        let flat: Vec<f64> = covariance.iter().flatten().copied().collect();
        Self::new(mean, DMatrix::from_row_slice(n, n, &flat))
    }

    pub fn assets(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub sample_mean: DVector<f64>,
    /// Covariance with denominator `N`.
    pub sample_covariance: DMatrix<f64>,
}

/// Return of sample `j` as an affine polynomial in the reduced proportions:
/// `xi_n + sum_i (xi_i - xi_n) x_i`.
pub fn portfolio_return(samples: &ReturnSamples, j: usize) -> Result<Polynomial> {
    if j >= samples.len() {
        return Err(Error::IndexOutOfRange {
            index: j,
            len: samples.len(),
        });
    }
    Ok(return_poly(&samples.row(j)))
}

fn return_poly(xi: &[f64]) -> Polynomial {
    let n = xi.len();
    let last = xi[n - 1];
    let slopes: Vec<f64> = xi[..n - 1].iter().map(|v| v - last).collect();
    Polynomial::affine(last, &slopes)
}

/// Mean return polynomial over all samples.
fn mean_return(samples: &ReturnSamples) -> Polynomial {
    let mean: Vec<f64> = samples
        .values()
        .column_iter()
        .map(|c| c.sum() / samples.len() as f64)
        .collect();
    return_poly(&mean)
}

/// Sample central moment polynomials `r_{i,N}` for `i = 2..=d`, centred at
/// the sample mean return. Index `0` of the output is `r_{2,N}`.
fn central_moment_polys(samples: &ReturnSamples, d: usize) -> Vec<Polynomial> {
    let n = samples.assets() - 1;
    let mean = mean_return(samples);
    let mut acc = vec![Polynomial::zero(n); d.saturating_sub(1)];
    let inv_n = 1.0 / samples.len() as f64;
    for j in 0..samples.len() {
        let centred = return_poly(&samples.row(j)).sub(&mean).expect("same variables");
        let mut pow = centred.clone();
        for slot in acc.iter_mut() {
            pow = pow.mul(&centred).expect("same variables");
            slot.add_scaled_assign(&pow, inv_n);
        }
    }
    acc
}

/// `r_{i,N}(x) = (1/N) sum_j (rho_j(x) - mean rho(x))^i`.
pub fn sample_central_moment_poly(samples: &ReturnSamples, i: usize) -> Result<Polynomial> {
    if i < 2 {
        return Err(Error::InvalidConfig(format!(
            "central moment order must be at least 2, got {i}"
        )));
    }
    Ok(central_moment_polys(samples, i).pop().expect("i >= 2"))
}

/// The sample-average loss `f_N` in the reduced proportions, with the
/// default degree cap.
pub fn build_sample_loss(samples: &ReturnSamples, pref: &RiskPreference) -> Result<Polynomial> {
    build_sample_loss_capped(samples, pref, DEFAULT_MAX_DEGREE)
}

pub fn build_sample_loss_capped(
    samples: &ReturnSamples,
    pref: &RiskPreference,
    max_degree: usize,
) -> Result<Polynomial> {
    let d = pref.degree();
    if d > max_degree {
        return Err(Error::InvalidPreference(format!(
            "degree {d} exceeds the cap {max_degree}"
        )));
    }
    let w = pref.weights();
    let mut loss = mean_return(samples).scale(-w[0]);
    for (k, moment) in central_moment_polys(samples, d).iter().enumerate() {
        let i = k + 2;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        loss.add_scaled_assign(moment, sign * w[i - 1]);
    }
    Ok(loss)
}

/// Exact expected loss for normal returns, reduced to `n - 1` variables.
/// Odd central moments vanish; the variance is `x' S x` and the fourth
/// central moment `3 (x' S x)^2`.
pub fn build_analytic_normal_loss(model: &NormalModel, pref: &RiskPreference) -> Result<Polynomial> {
    let d = pref.degree();
    if d > 4 {
        return Err(Error::InvalidPreference(format!(
            "analytic normal losses support degree <= 4, got {d}"
        )));
    }
    let n = model.assets();
    let w = pref.weights();
    let mean = Polynomial::affine(0.0, model.mean().as_slice());
    let mut variance = Polynomial::zero(n);
    let cov = model.covariance();
    for a in 0..n {
        for b in 0..n {
            let xa = Polynomial::variable(n, a);
            let xb = Polynomial::variable(n, b);
            variance.add_scaled_assign(&xa.mul(&xb)?, cov[(a, b)]);
        }
    }
    let mut loss = mean.scale(-w[0]);
    if d >= 2 {
        loss.add_scaled_assign(&variance, w[1]);
    }
    if d >= 4 {
        loss.add_scaled_assign(&variance.power(2), 3.0 * w[3]);
    }
    loss.eliminate_last_variable()
}

pub fn summarize(samples: &ReturnSamples) -> Result<SampleSummary> {
    let big_n = samples.len();
    if big_n < 2 {
        return Err(Error::InvalidSamples(format!(
            "at least two samples are required, got {big_n}"
        )));
    }
    let x = samples.values();
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.mean()));
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / big_n as f64;
    Ok(SampleSummary {
        sample_mean: mean,
        sample_covariance: cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polynomials::MonomialBasis;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn coeffs(p: &Polynomial, deg: usize) -> Vec<f64> {
        p.coefficient_vector(&MonomialBasis::new(p.nvars(), deg)).unwrap()
    }

    fn table2_model() -> NormalModel {
        NormalModel::from_rows(
            vec![0.91, 0.65, 0.49],
            &[
                vec![1.90, 0.38, 1.20],
                vec![0.38, 1.50, -0.80],
                vec![1.20, -0.80, 1.70],
            ],
        )
        .unwrap()
    }

    fn random_samples(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> ReturnSamples {
        let rows: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        ReturnSamples::from_rows(&rows).unwrap()
    }

    /// Scalar loss on realized returns, computed without polynomials.
    fn scalar_loss(samples: &ReturnSamples, w: &[f64], xbar: &[f64]) -> f64 {
        let mut x = xbar.to_vec();
        x.push(1.0 - xbar.iter().sum::<f64>());
        let rets: Vec<f64> = (0..samples.len())
            .map(|j| samples.row(j).iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect();
        let mean = rets.iter().sum::<f64>() / rets.len() as f64;
        let mut loss = -w[0] * mean;
        for i in 2..=w.len() {
            let m = rets.iter().map(|r| (r - mean).powi(i as i32)).sum::<f64>() / rets.len() as f64;
            loss += if i % 2 == 0 { 1.0 } else { -1.0 } * w[i - 1] * m;
        }
        loss
    }

    #[test]
    fn preference_validation() {
        assert!(RiskPreference::new(vec![0.75, 0.25]).is_ok());
        assert!(RiskPreference::new(vec![0.5, 0.4]).is_err());
        assert!(RiskPreference::new(vec![1.2, -0.2]).is_err());
        assert!(RiskPreference::new(vec![]).is_err());
    }

    #[test]
    fn model_validation() {
        assert!(NormalModel::from_rows(vec![0.0, 0.0], &[vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        assert!(NormalModel::from_rows(vec![0.0, 0.0], &[vec![1.0, 0.1], vec![0.0, 1.0]]).is_err());
        assert!(NormalModel::from_rows(vec![0.0], &[vec![1.0]]).is_err());
        assert!(table2_model().covariance().nrows() == 3);
    }

    #[test]
    fn portfolio_returns() {
        let s = ReturnSamples::from_rows(&[vec![1.0, 1.0, 1.0], vec![2.0, 0.0, 0.5]]).unwrap();
        assert_eq!(portfolio_return(&s, 0).unwrap(), Polynomial::constant(2, 1.0));
        let s2 = ReturnSamples::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert_eq!(portfolio_return(&s2, 0).unwrap(), Polynomial::variable(1, 0).scale(2.0));
        assert!(matches!(
            portfolio_return(&s, 2),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_samples(&mut rng, 5, 4);
        for j in 0..5 {
            let p = portfolio_return(&s, j).unwrap();
            let xbar: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut x = xbar.clone();
            x.push(1.0 - xbar.iter().sum::<f64>());
            let dot: f64 = s.row(j).iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((p.evaluate(&xbar).unwrap() - dot).abs() < 1e-12);
        }
    }

    #[test]
    fn central_moments_hand_cases() {
        let same = ReturnSamples::from_rows(&vec![vec![0.1, 0.2, 0.3]; 4]).unwrap();
        for i in 2..=5 {
            assert!(sample_central_moment_poly(&same, i).unwrap().is_zero());
        }
        let s = ReturnSamples::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let r2 = sample_central_moment_poly(&s, 2).unwrap();
        assert_eq!(coeffs(&r2, 2), vec![0.0, 0.0, 0.25]);
        assert!(sample_central_moment_poly(&s, 1).is_err());
    }

    #[test]
    fn central_moments_match_scalar_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_samples(&mut rng, 40, 3);
        for i in 2..=5 {
            let p = sample_central_moment_poly(&s, i).unwrap();
            assert_eq!(p.degree(), i);
            let xbar = [0.3, -0.4];
            let x = [0.3, -0.4, 1.1];
            let rets: Vec<f64> = (0..40)
                .map(|j| s.row(j).iter().zip(&x).map(|(a, b)| a * b).sum())
                .collect();
            let mean = rets.iter().sum::<f64>() / 40.0;
            let want = rets.iter().map(|r| (r - mean).powi(i as i32)).sum::<f64>() / 40.0;
            assert!((p.evaluate(&xbar).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_loss_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_samples(&mut rng, 30, 3);
        let pure_mean = build_sample_loss(&s, &RiskPreference::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(pure_mean.degree(), 1);
        let f = build_sample_loss(&s, &RiskPreference::new(vec![0.2, 0.5, 0.3]).unwrap()).unwrap();
        assert_eq!(f.degree(), 3);
        assert!(f.num_terms() <= 10);

        let same = ReturnSamples::from_rows(&vec![vec![0.1, 0.2]; 3]).unwrap();
        let f = build_sample_loss(&same, &RiskPreference::new(vec![0.0, 1.0]).unwrap()).unwrap();
        assert!(f.is_zero());

        let seven = RiskPreference::new(vec![1.0 / 7.0; 7]);
        if let Ok(p) = seven {
            assert!(build_sample_loss(&s, &p).is_err());
        }
    }

    #[test]
    fn analytic_loss_reproduces_mean_variance_model() {
        let f = build_analytic_normal_loss(&table2_model(), &RiskPreference::new(vec![0.75, 0.25]).unwrap())
            .unwrap();
        let want = [0.0575, -0.565, -1.37, 0.3, 0.84, 1.2];
        for (a, b) in coeffs(&f, 2).iter().zip(want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn analytic_loss_reproduces_skewness_model() {
        let model = NormalModel::new(
            vec![0.92, 0.64, 0.41],
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.8, 1.2, 1.4])),
        )
        .unwrap();
        let f = build_analytic_normal_loss(&model, &RiskPreference::new(vec![0.2, 0.5, 0.3]).unwrap()).unwrap();
        let want = [0.618, -1.502, -1.446, 1.6, 1.4, 1.3];
        for (a, b) in coeffs(&f, 2).iter().zip(want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn analytic_loss_limits() {
        let model = table2_model();
        let f = build_analytic_normal_loss(&model, &RiskPreference::new(vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(f.degree(), 1);
        // -mu . (x1, x2, 1 - x1 - x2)
        let v = coeffs(&f, 1);
        assert!((v[0] + 0.49).abs() < 1e-15);
        assert!((v[1] + 0.42).abs() < 1e-15);
        assert!((v[2] + 0.16).abs() < 1e-15);
        assert!(build_analytic_normal_loss(&model, &RiskPreference::new(vec![0.2; 5]).unwrap()).is_err());
    }

    #[test]
    fn analytic_mean_variance_matches_matrix_arithmetic() {
        let model = table2_model();
        let f = build_analytic_normal_loss(&model, &RiskPreference::new(vec![0.4, 0.6]).unwrap()).unwrap();
        for xbar in [[0.1, 0.7], [0.5, 0.5], [-0.3, 0.9]] {
            let x = DVector::from_vec(vec![xbar[0], xbar[1], 1.0 - xbar[0] - xbar[1]]);
            let want = -0.4 * model.mean().dot(&x) + 0.6 * (x.transpose() * model.covariance() * &x)[(0, 0)];
            assert!((f.evaluate(&xbar).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_kurtosis_term() {
        let model = table2_model();
        let f = build_analytic_normal_loss(&model, &RiskPreference::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap())
            .unwrap();
        assert_eq!(f.degree(), 4);
        let xbar = [0.2, 0.3];
        let x = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let var = (x.transpose() * model.covariance() * &x)[(0, 0)];
        let want = -0.1 * model.mean().dot(&x) + 0.2 * var + 0.4 * 3.0 * var * var;
        assert!((f.evaluate(&xbar).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn summaries() {
        let s = ReturnSamples::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let sum = summarize(&s).unwrap();
        assert_eq!(sum.sample_mean.as_slice(), &[1.0, 1.0]);
        assert_eq!(sum.sample_covariance, DMatrix::from_element(2, 2, 1.0));
        let same = ReturnSamples::from_rows(&vec![vec![0.3, 0.1]; 5]).unwrap();
        assert_eq!(summarize(&same).unwrap().sample_covariance, DMatrix::zeros(2, 2));
        let one = ReturnSamples::from_rows(&[vec![0.3, 0.1]]).unwrap();
        assert!(summarize(&one).is_err());
    }

    #[test]
    fn relabeling_assets_permutes_variables() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = random_samples(&mut rng, 25, 3);
        let swapped_rows: Vec<Vec<f64>> = (0..25)
            .map(|j| {
                let r = s.row(j);
                vec![r[1], r[0], r[2]]
            })
            .collect();
        let swapped = ReturnSamples::from_rows(&swapped_rows).unwrap();
        let pref = RiskPreference::new(vec![0.3, 0.3, 0.2, 0.2]).unwrap();
        let f = build_sample_loss(&s, &pref).unwrap();
        let g = build_sample_loss(&swapped, &pref).unwrap();
        for xbar in [[0.1, 0.6], [0.4, 0.2], [-0.5, 1.2]] {
            let a = f.evaluate(&xbar).unwrap();
            let b = g.evaluate(&[xbar[1], xbar[0]]).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn sample_loss_matches_scalar_statistic(
            seed in 0u64..1000,
            d in 1usize..=5,
            xbar in proptest::collection::vec(-1.0f64..1.5, 2),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_samples(&mut rng, 20, 3);
            let mut w: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            let last: f64 = w[..d - 1].iter().sum();
            w[d - 1] = 1.0 - last;
            let pref = RiskPreference::new(w.clone()).unwrap();
            let f = build_sample_loss(&s, &pref).unwrap();
            let want = scalar_loss(&s, &w, &xbar);
            let got = f.evaluate(&xbar).unwrap();
            prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }

        #[test]
        fn even_central_moments_are_nonnegative(
            seed in 0u64..1000,
            xbar in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_samples(&mut rng, 15, 3);
            for i in [2, 4, 6] {
                let p = sample_central_moment_poly(&s, i).unwrap();
                prop_assert!(p.evaluate(&xbar).unwrap() >= -1e-12);
            }
        }
    }
}
