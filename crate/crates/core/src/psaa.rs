//! Penalized sample average approximation.
//!
//! [`run`] minimizes `f_N(x) + eps * ||[x]_{2 d0}||` over the reduced
//! proportions by solving the moment relaxation of order `d0`. A rank-one
//! moment block certifies that the relaxation is tight; the minimizer is then
//! read from the first-order moments. When the relaxation cannot be solved,
//! `eps` is doubled and the solve retried.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::conic::{self, ConicProgram, ConicSolution, SolveStatus, SolverSettings};
use crate::moments::{localizing_map, moment_map, Tms};
use crate::polynomials::{monomial_vector, MonomialBasis, Polynomial};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsaaConfig {
    /// Initial penalty weight. Zero solves the plain relaxation once.
    pub epsilon0: f64,
    pub max_doublings: usize,
    /// Largest `sigma_2 / sigma_1` accepted as rank one.
    pub rank_tol: f64,
    /// Drop the constraints `x_i >= 0`.
    pub short_selling: bool,
    pub solver: SolverSettings,
}

impl Default for PsaaConfig {
    fn default() -> Self {
        PsaaConfig {
            epsilon0: 0.01,
            max_doublings: 20,
            rank_tol: 1e-6,
            short_selling: false,
            solver: SolverSettings::default(),
        }
    }
}

impl PsaaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon0 >= 0.0 && self.epsilon0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon0 must be a nonnegative number, got {}",
                self.epsilon0
            )));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rank_tol must lie in (0, 1), got {}",
                self.rank_tol
            )));
        }
        self.solver.validate()
    }
}

/// The polynomial problem handed to the relaxation.
#[derive(Debug, Clone)]
pub struct RelaxationSpec {
    f: Polynomial,
    g: Vec<Polynomial>,
    d0: usize,
}

impl RelaxationSpec {
    /// With `short_selling = false` the constraints are
    /// `(x_1, ..., x_{n-1}, 1 - sum x_i)`.
    pub fn new(f: Polynomial, short_selling: bool) -> Result<Self> {
        let nv = f.nvars();
        if nv == 0 {
            return Err(Error::TooFewVariables(0));
        }
        let g = if short_selling {
            Vec::new()
        } else {
            let mut g: Vec<Polynomial> = (0..nv).map(|i| Polynomial::variable(nv, i)).collect();
            g.push(Polynomial::affine(1.0, &vec![-1.0; nv]));
            g
        };
        Ok(Self::with_constraints(f, g))
    }

    pub fn with_constraints(f: Polynomial, g: Vec<Polynomial>) -> Self {
        let d0 = f.degree().div_ceil(2).max(1);
        RelaxationSpec { f, g, d0 }
    }

    pub fn objective(&self) -> &Polynomial {
        &self.f
    }

    pub fn constraints(&self) -> &[Polynomial] {
        &self.g
    }

    pub fn d0(&self) -> usize {
        self.d0
    }

    pub fn nvars(&self) -> usize {
        self.f.nvars()
    }
}

/// The order-`d0` moment relaxation with penalty `epsilon`. The moment block
/// comes first, followed by one localizing block per constraint.
pub fn assemble_relaxation(spec: &RelaxationSpec, epsilon: f64) -> Result<ConicProgram> {
    let nv = spec.nvars();
    let degree = 2 * spec.d0;
    let c = spec
        .f
        .coefficient_vector(&MonomialBasis::new(nv, degree))?;
    let mut blocks = vec![moment_map(spec.d0, nv)];
    for g in &spec.g {
        blocks.push(localizing_map(g, spec.d0, nv)?);
    }
    ConicProgram::new(nv, degree, c, epsilon, blocks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankRatio {
    /// `sigma_2 / sigma_1`; zero when the matrix is zero or `1 x 1`.
    pub ratio: f64,
    /// Set when `sigma_1 = 0`.
    pub degenerate: bool,
}

pub fn rank_ratio(m: &DMatrix<f64>) -> RankRatio {
    let sym = (m + m.transpose()) * 0.5;
    let mut sv: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.abs()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    match sv.as_slice() {
        [] => RankRatio { ratio: 0.0, degenerate: true },
        [s1, ..] if *s1 == 0.0 => RankRatio { ratio: 0.0, degenerate: true },
        [_] => RankRatio { ratio: 0.0, degenerate: false },
        [s1, s2, ..] => RankRatio {
            ratio: s2 / s1,
            degenerate: false,
        },
    }
}

/// Full proportions `(u, 1 - sum u)` from the first-order moments `u`.
pub fn extract_minimizer(y: &Tms) -> Vec<f64> {
    let u = y.first_moments();
    let mut x = u.to_vec();
    x.push(1.0 - u.iter().sum::<f64>());
    x
}

/// One solve of the doubling loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attempt {
    pub epsilon: f64,
    pub status: SolveStatus,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct PsaaResult {
    /// All `n` proportions, summing to one.
    pub x_star: Vec<f64>,
    /// `f_N` at the reduced point.
    pub objective_fn: f64,
    pub epsilon_used: f64,
    pub rank_ratio: f64,
    pub degenerate: bool,
    pub tight: bool,
    pub relaxation_value: f64,
    /// `eps * ||[x]_{2 d0}||` at the extracted point.
    pub penalty: f64,
    pub solution: ConicSolution,
    pub history: Vec<Attempt>,
}

impl PsaaResult {
    /// The first `n - 1` proportions.
    pub fn reduced(&self) -> &[f64] {
        &self.x_star[..self.x_star.len() - 1]
    }

    /// `relaxation_value - f_N(x) - eps ||[x]||`, relative.
    pub fn tightness_gap(&self) -> f64 {
        (self.relaxation_value - self.objective_fn - self.penalty).abs()
            / (1.0 + self.relaxation_value.abs())
    }
}

pub fn run(f: &Polynomial, config: &PsaaConfig) -> Result<PsaaResult> {
    run_spec(&RelaxationSpec::new(f.clone(), config.short_selling)?, config)
}

pub fn run_spec(spec: &RelaxationSpec, config: &PsaaConfig) -> Result<PsaaResult> {
    config.validate()?;
    let mut epsilon = config.epsilon0;
    let mut history = Vec::new();
    loop {
        let prog = assemble_relaxation(spec, epsilon)?;
        let sol = conic::solve(&prog, &config.solver);
        history.push(Attempt {
            epsilon,
            status: sol.status,
            objective: sol.objective,
            iterations: sol.iterations,
        });
        if sol.status == SolveStatus::Optimal {
            return Ok(finish(spec, config, &prog, sol, history));
        }
        if history.len() > config.max_doublings || epsilon == 0.0 {
            return Err(Error::DoublingExhausted {
                attempts: history.len(),
                status: sol.status,
                epsilon,
            });
        }
        epsilon *= 2.0;
    }
}

fn finish(
    spec: &RelaxationSpec,
    config: &PsaaConfig,
    prog: &ConicProgram,
    solution: ConicSolution,
    history: Vec<Attempt>,
) -> PsaaResult {
    let moment = prog.psd_blocks()[0].apply_slice(solution.y.values());
    let rr = rank_ratio(&moment);
    let x_star = extract_minimizer(&solution.y);
    let reduced = &x_star[..x_star.len() - 1];
    let objective_fn = spec.f.evaluate(reduced).expect("point length matches");
    let penalty = prog.epsilon() * monomial_vector(reduced, prog.degree()).norm();
    PsaaResult {
        tight: rr.ratio <= config.rank_tol && !rr.degenerate,
        x_star,
        objective_fn,
        epsilon_used: prog.epsilon(),
        rank_ratio: rr.ratio,
        degenerate: rr.degenerate,
        relaxation_value: solution.objective,
        penalty,
        solution,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polynomials::Exponent;
    use nalgebra::DVector;

    fn quad(coeffs: [f64; 6]) -> Polynomial {
        Polynomial::from_coefficients(&MonomialBasis::new(2, 2), &coeffs).unwrap()
    }

    /// Mean-variance model of the constrained example.
    fn eq_44() -> Polynomial {
        quad([0.0575, -0.565, -1.37, 0.3, 0.84, 1.2])
    }

    /// Mean-variance-skewness model with short selling.
    fn eq_42() -> Polynomial {
        quad([0.618, -1.502, -1.446, 1.6, 1.4, 1.3])
    }

    fn penalized(f: &Polynomial, eps: f64, deg: usize, x: &[f64]) -> f64 {
        f.evaluate(x).unwrap() + eps * monomial_vector(x, deg).norm()
    }

    /// Minimum of the penalized objective on a grid, then refined locally.
    fn grid_min(obj: impl Fn(&[f64]) -> f64, lo: f64, hi: f64, simplex: bool) -> (f64, [f64; 2]) {
        let inside = |a: f64, b: f64| !simplex || (a >= 0.0 && b >= 0.0 && a + b <= 1.0);
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        let mut lo = [lo, lo];
        let mut hi = [hi, hi];
        for _ in 0..6 {
            let k = 200;
            for i in 0..=k {
                for j in 0..=k {
                    let a = lo[0] + (hi[0] - lo[0]) * i as f64 / k as f64;
                    let b = lo[1] + (hi[1] - lo[1]) * j as f64 / k as f64;
                    if inside(a, b) {
                        let v = obj(&[a, b]);
                        if v < best.0 {
                            best = (v, [a, b]);
                        }
                    }
                }
            }
            let w = [(hi[0] - lo[0]) / 20.0, (hi[1] - lo[1]) / 20.0];
            lo = [best.1[0] - w[0], best.1[1] - w[1]];
            hi = [best.1[0] + w[0], best.1[1] + w[1]];
        }
        best
    }

    #[test]
    fn config_validation() {
        assert!(PsaaConfig::default().validate().is_ok());
        for bad in [
            PsaaConfig { epsilon0: -1.0, ..Default::default() },
            PsaaConfig { epsilon0: f64::NAN, ..Default::default() },
            PsaaConfig { rank_tol: 0.0, ..Default::default() },
            PsaaConfig { rank_tol: 1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn spec_layout() {
        let spec = RelaxationSpec::new(eq_44(), false).unwrap();
        assert_eq!(spec.d0(), 1);
        assert_eq!(spec.constraints().len(), 3);
        assert_eq!(spec.constraints()[2].evaluate(&[0.25, 0.5]).unwrap(), 0.25);
        assert!(RelaxationSpec::new(eq_44(), true).unwrap().constraints().is_empty());
        let constant = RelaxationSpec::new(Polynomial::constant(2, 3.0), false).unwrap();
        assert_eq!(constant.d0(), 1);
    }

    #[test]
    fn assembled_sizes() {
        let f = eq_42().mul(&eq_42()).unwrap();
        let prog = assemble_relaxation(&RelaxationSpec::new(f, false).unwrap(), 0.01).unwrap();
        assert_eq!(prog.m(), 15);
        assert_eq!(prog.psd_blocks()[0].size(), 6);
        assert_eq!(prog.psd_blocks().len(), 4);
        assert!(prog.psd_blocks()[1..].iter().all(|b| b.size() == 3));

        let free = assemble_relaxation(&RelaxationSpec::new(eq_42(), true).unwrap(), 0.0).unwrap();
        assert_eq!(free.psd_blocks().len(), 1);
        assert_eq!(free.m(), 6);

        let quintic = Polynomial::from_terms(3, [(Exponent::new(vec![2, 2, 1]), 1.0)]);
        let prog = assemble_relaxation(&RelaxationSpec::new(quintic, false).unwrap(), 0.01).unwrap();
        assert_eq!(prog.m(), 84);
        assert_eq!(prog.psd_blocks()[0].size(), 20);
        assert_eq!(prog.psd_blocks().len(), 5);
        assert!(prog.psd_blocks()[1..].iter().all(|b| b.size() == 10));
    }

    #[test]
    fn rank_ratios() {
        let v = DVector::from_vec(vec![1.0, 0.3, -0.2, 0.09]);
        let r = rank_ratio(&(&v * v.transpose()));
        assert!(r.ratio < 1e-12 && !r.degenerate);
        let r = rank_ratio(&DMatrix::identity(5, 5));
        assert!((r.ratio - 1.0).abs() < 1e-15);
        let r = rank_ratio(&DMatrix::zeros(3, 3));
        assert!(r.degenerate && r.ratio == 0.0);
        let r = rank_ratio(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 0.0])));
        assert!((r.ratio - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dirac_readout() {
        let y = monomial_vector(&[0.3, 0.2], 4);
        let x = extract_minimizer(&y);
        assert_eq!(x.len(), 3);
        assert!((x[0] - 0.3).abs() < 1e-15 && (x[1] - 0.2).abs() < 1e-15);
        assert!((x[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constrained_mean_variance_without_penalty() {
        let cfg = PsaaConfig { epsilon0: 0.0, ..Default::default() };
        let res = run(&eq_44(), &cfg).unwrap();
        assert!(res.tight, "ratio {}", res.rank_ratio);
        for (a, b) in res.x_star.iter().zip([0.2794, 0.4730, 0.2476]) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!((res.relaxation_value + 0.3455).abs() < 1e-4);
        assert!(res.tightness_gap() < 1e-6);
    }

    #[test]
    fn skewness_model_without_penalty() {
        let cfg = PsaaConfig { epsilon0: 0.0, short_selling: true, ..Default::default() };
        let res = run(&eq_42(), &cfg).unwrap();
        assert!(res.tight);
        for (a, b) in res.x_star.iter().zip([0.2957, 0.3969, 0.3074]) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!((res.objective_fn - 0.1089).abs() < 1e-4);
    }

    #[test]
    fn skewness_model_with_penalty_matches_grid_search() {
        let cfg = PsaaConfig { short_selling: true, ..Default::default() };
        let f = eq_42();
        let res = run(&f, &cfg).unwrap();
        assert!(res.tight);
        assert_eq!(res.epsilon_used, 0.01);
        let (best, at) = grid_min(|x| penalized(&f, 0.01, 2, x), -1.0, 2.0, false);
        assert!((res.reduced()[0] - at[0]).abs() < 1e-4 && (res.reduced()[1] - at[1]).abs() < 1e-4);
        assert!((res.relaxation_value - best).abs() < 1e-6 * (1.0 + best.abs()));
        for (a, b) in res.x_star.iter().zip([0.2957, 0.3969, 0.3074]) {
            assert!((a - b).abs() < 2e-2);
        }
        assert!(res.tightness_gap() < 1e-6);
    }

    #[test]
    fn zero_objective_minimizes_the_penalty_on_the_simplex() {
        let f = Polynomial::zero(2);
        let res = run(&f, &PsaaConfig::default()).unwrap();
        let (best, at) = grid_min(|x| 0.01 * monomial_vector(x, 2).norm(), 0.0, 1.0, true);
        assert!((res.relaxation_value - best).abs() < 1e-7);
        assert!((res.reduced()[0] - at[0]).abs() < 1e-3 && (res.reduced()[1] - at[1]).abs() < 1e-3);
        assert!(res.x_star.iter().all(|v| *v >= -1e-8));
        // The minimizer is a vertex where the penalty is flat, so the interior
        // iterate stays visibly off rank one.
        assert!(!res.tight && res.rank_ratio < 1e-2);
        assert!(res.tightness_gap() < 1e-6);
    }

    #[test]
    fn relaxation_lies_below_the_grid() {
        let f = eq_44();
        for eps in [0.0, 0.01, 0.1] {
            let cfg = PsaaConfig { epsilon0: eps, ..Default::default() };
            let res = run(&f, &cfg).unwrap();
            let mut grid = f64::INFINITY;
            for i in 0..50 {
                for j in 0..50 - i {
                    let x = [i as f64 / 49.0, j as f64 / 49.0];
                    grid = grid.min(penalized(&f, eps, 2, &x));
                }
            }
            assert!(res.relaxation_value <= grid + 1e-6);
            assert!(res.x_star.iter().all(|v| *v >= -1e-8));
            assert_eq!(res.x_star.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn unbounded_model_triggers_doubling() {
        // x^3 with no constraints has no minimizer.
        let f = Polynomial::variable(1, 0).power(3);
        let plain = run(&f, &PsaaConfig { epsilon0: 0.0, short_selling: true, ..Default::default() });
        assert!(matches!(plain, Err(Error::DoublingExhausted { attempts: 1, .. })));

        let cfg = PsaaConfig { epsilon0: 1e-6, short_selling: true, ..Default::default() };
        match run(&f, &cfg) {
            Ok(res) => {
                assert!(res.history.len() >= 2);
                assert!(res.history.windows(2).all(|w| w[1].epsilon == 2.0 * w[0].epsilon));
                assert_eq!(res.history.last().unwrap().status, SolveStatus::Optimal);
            }
            Err(e) => panic!("doubling failed: {e}"),
        }
    }

    #[test]
    fn exhausted_doublings_are_reported() {
        let f = Polynomial::variable(1, 0).power(3);
        let cfg = PsaaConfig {
            epsilon0: 1e-12,
            max_doublings: 1,
            short_selling: true,
            ..Default::default()
        };
        match run(&f, &cfg) {
            Err(Error::DoublingExhausted { attempts, epsilon, .. }) => {
                assert_eq!(attempts, 2);
                assert_eq!(epsilon, 2e-12);
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = PsaaConfig::default();
        let a = run(&eq_44(), &cfg).unwrap();
        let b = run(&eq_44(), &cfg).unwrap();
        assert_eq!(a.x_star, b.x_star);
        assert_eq!(a.relaxation_value.to_bits(), b.relaxation_value.to_bits());
        assert_eq!(a.solution.y, b.solution.y);
    }
}
