//! Price ingestion, seeded sampling and Monte Carlo convergence studies.

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::portfolio::{build_analytic_normal_loss, build_sample_loss, NormalModel, ReturnSamples, RiskPreference};
use crate::psaa::{self, PsaaConfig};
use crate::{Error, Result};

/// Chronological prices, one row per date.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    assets: Vec<String>,
    dates: Vec<NaiveDate>,
    prices: DMatrix<f64>,
}

impl PriceSeries {
    pub fn new(assets: Vec<String>, dates: Vec<NaiveDate>, prices: DMatrix<f64>) -> Result<Self> {
        if prices.nrows() < 2 {
            return Err(Error::InvalidSamples(format!(
                "at least two price rows are required, got {}",
                prices.nrows()
            )));
        }
        if assets.len() != prices.ncols() || dates.len() != prices.nrows() {
            return Err(Error::InvalidSamples(format!(
                "{} names and {} dates for a {}x{} price table",
                assets.len(),
                dates.len(),
                prices.nrows(),
                prices.ncols()
            )));
        }
        if let Some(p) = prices.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::InvalidSamples(format!("price {p} is not positive")));
        }
        Ok(PriceSeries { assets, dates, prices })
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn prices(&self) -> &DMatrix<f64> {
        &self.prices
    }
}

/// Dated return rows, as read back from a returns file.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    pub assets: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub samples: ReturnSamples,
}

struct Table {
    assets: Vec<String>,
    dates: Vec<NaiveDate>,
    rows: Vec<Vec<f64>>,
}

fn parse_table(input: impl Read, positive: bool) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(&e))?,
        None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
    };
    if !header.get(0).is_some_and(|h| h.eq_ignore_ascii_case("date")) {
        return Err(Error::Parse {
            line: 1,
            message: "first column must be `date`".into(),
        });
    }
    let assets: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    if assets.is_empty() || assets.iter().any(String::is_empty) {
        return Err(Error::Parse { line: 1, message: "missing asset names".into() });
    }
    let mut dates = Vec::new();
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(&e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != assets.len() + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", assets.len() + 1, rec.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            message: format!("bad date `{}`: {e}", &rec[0]),
        })?;
        let mut row = Vec::with_capacity(assets.len());
        for (field, name) in rec.iter().skip(1).zip(&assets) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad number `{field}` for {name}"),
            })?;
            if !v.is_finite() || (positive && v <= 0.0) {
                return Err(Error::Parse {
                    line,
                    message: format!("{name} value {v} is not {}", if positive { "a positive price" } else { "finite" }),
                });
            }
            row.push(v);
        }
        dates.push(date);
        rows.push(row);
    }
    Ok(Table { assets, dates, rows })
}

fn csv_error(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { line, message: e.to_string() }
}

fn table_matrix(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    DMatrix::from_row_slice(rows.len(), ncols, &flat)
}

/// Reads `date,<asset>,...` rows of positive prices.
pub fn parse_prices(input: impl Read) -> Result<PriceSeries> {
    let t = parse_table(input, true)?;
    let prices = table_matrix(&t.rows, t.assets.len());
    PriceSeries::new(t.assets, t.dates, prices)
}

pub fn read_prices(path: &Path) -> Result<PriceSeries> {
    parse_prices(std::fs::File::open(path)?)
}

/// Reads a returns table in the layout written by [`write_returns`].
pub fn parse_returns(input: impl Read) -> Result<ReturnSeries> {
    let t = parse_table(input, false)?;
    if t.rows.is_empty() {
        return Err(Error::InvalidSamples("no return rows".into()));
    }
    let samples = ReturnSamples::new(table_matrix(&t.rows, t.assets.len()))?;
    Ok(ReturnSeries {
        assets: t.assets,
        dates: t.dates,
        samples,
    })
}

pub fn read_returns(path: &Path) -> Result<ReturnSeries> {
    parse_returns(std::fs::File::open(path)?)
}

/// Simple returns `(P_{t+1} - P_t) / P_t`, one row per consecutive pair.
pub fn prices_to_returns(series: &PriceSeries) -> Result<ReturnSamples> {
    let p = series.prices();
    let rows = p.nrows() - 1;
    let r = DMatrix::from_fn(rows, p.ncols(), |t, i| (p[(t + 1, i)] - p[(t, i)]) / p[(t, i)]);
    ReturnSamples::new(r)
}

/// Writes returns under the price header, each row dated by its closing price.
pub fn write_returns(out: impl Write, series: &PriceSeries, returns: &ReturnSamples) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_owned()];
    header.extend(series.assets().iter().cloned());
    w.write_record(&header).map_err(csv_io)?;
    for (t, date) in series.dates().iter().skip(1).enumerate() {
        let mut rec = vec![date.format("%Y-%m-%d").to_string()];
        rec.extend(returns.values().row(t).iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format scatter data: `asset,week,return` with weeks counted from 1.
pub fn write_scatter(out: impl Write, assets: &[String], returns: &ReturnSamples) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["asset", "week", "return"]).map_err(csv_io)?;
    for (i, name) in assets.iter().enumerate() {
        for t in 0..returns.len() {
            let r = returns.values()[(t, i)];
            w.write_record([name.as_str(), &(t + 1).to_string(), &r.to_string()])
                .map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidConfig(format!("{other:?}")),
    }
}

/// Square-root factor `L` with `L L' = S`, negative eigenvalues clipped to zero.
fn sqrt_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// `n_samples` draws of `mean + L z`, `z` standard normal, from a ChaCha8
/// stream seeded with `seed`.
pub fn sample_normal(model: &NormalModel, n_samples: usize, seed: u64) -> Result<ReturnSamples> {
    if n_samples == 0 {
        return Err(Error::InvalidSamples("sample size must be at least 1".into()));
    }
    let n = model.assets();
    let l = sqrt_factor(model.covariance());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(n_samples, n);
    for j in 0..n_samples {
        let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
        let draw = model.mean() + &l * z;
        out.row_mut(j).copy_from(&draw.transpose());
    }
    ReturnSamples::new(out)
}

/// Distance from `candidate` to the nearest point of `reference`.
pub fn optimizer_distance(candidate: &[f64], reference: &[Vec<f64>]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let mut best = f64::INFINITY;
    for r in reference {
        if r.len() != candidate.len() {
            return Err(Error::PointLength {
                expected: r.len(),
                got: candidate.len(),
            });
        }
        let d = candidate
            .iter()
            .zip(r)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        best = best.min(d);
    }
    Ok(best)
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of study cell `(n_samples, replication)`:
/// `splitmix64(splitmix64(splitmix64(base) ^ N) ^ replication)`.
pub fn cell_seed(base_seed: u64, n_samples: usize, replication: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(base_seed) ^ n_samples as u64) ^ replication as u64)
}

/// Optimizer and optimal value of the exact normal-model problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub x: Vec<f64>,
    pub value: f64,
}

/// Solves the analytic normal-model loss with `config`.
pub fn analytic_reference(model: &NormalModel, pref: &RiskPreference, config: &PsaaConfig) -> Result<Reference> {
    let f = build_analytic_normal_loss(model, pref)?;
    let res = psaa::run(&f, config)?;
    Ok(Reference {
        value: res.objective_fn,
        x: res.x_star,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyCell {
    pub n_samples: usize,
    pub replication: usize,
    pub seed: u64,
    /// NaN when the cell failed.
    pub epsilon: f64,
    pub distance: f64,
    /// `f_N(x) - f_ref`.
    pub objective_gap: f64,
    pub tight: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub reference: Reference,
    pub cells: Vec<StudyCell>,
}

impl StudyReport {
    /// Median distance of the successful cells at sample size `n`.
    pub fn median_distance(&self, n: usize) -> Option<f64> {
        median(self.cells.iter().filter(|c| c.n_samples == n).map(|c| c.distance))
    }

    /// Median `|objective_gap|` of the successful cells at sample size `n`.
    pub fn median_abs_gap(&self, n: usize) -> Option<f64> {
        median(self.cells.iter().filter(|c| c.n_samples == n).map(|c| c.objective_gap.abs()))
    }

    /// CSV with columns `N,replication,epsilon,distance,objective_gap,tight`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["N", "replication", "epsilon", "distance", "objective_gap", "tight"])
            .map_err(csv_io)?;
        for c in &self.cells {
            w.write_record([
                c.n_samples.to_string(),
                c.replication.to_string(),
                c.epsilon.to_string(),
                c.distance.to_string(),
                c.objective_gap.to_string(),
                c.tight.to_string(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn median(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyPlan {
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub base_seed: u64,
}

impl StudyPlan {
    pub fn validate(&self) -> Result<()> {
        if self.sample_sizes.is_empty() {
            return Err(Error::InvalidConfig("sample size grid is empty".into()));
        }
        if self.sample_sizes.contains(&0) {
            return Err(Error::InvalidConfig("sample sizes must be positive".into()));
        }
        if self.sample_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("sample size grid must be strictly ascending".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be at least 1".into()));
        }
        Ok(())
    }
}

/// Runs PSAA on fresh samples for every `(N, replication)` cell, in parallel.
/// Cell failures are recorded, not propagated.
pub fn convergence_study(
    model: &NormalModel,
    pref: &RiskPreference,
    reference: &Reference,
    plan: &StudyPlan,
    config: &PsaaConfig,
) -> Result<StudyReport> {
    plan.validate()?;
    config.validate()?;
    let jobs: Vec<(usize, usize)> = plan
        .sample_sizes
        .iter()
        .flat_map(|&n| (0..plan.replications).map(move |r| (n, r)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(n, r)| study_cell(model, pref, reference, config, n, r, cell_seed(plan.base_seed, n, r)))
        .collect();
    Ok(StudyReport {
        reference: reference.clone(),
        cells,
    })
}

fn study_cell(
    model: &NormalModel,
    pref: &RiskPreference,
    reference: &Reference,
    config: &PsaaConfig,
    n_samples: usize,
    replication: usize,
    seed: u64,
) -> StudyCell {
    let outcome = sample_normal(model, n_samples, seed)
        .and_then(|s| build_sample_loss(&s, pref))
        .and_then(|f| psaa::run(&f, config));
    match outcome {
        Ok(res) => StudyCell {
            n_samples,
            replication,
            seed,
            epsilon: res.epsilon_used,
            distance: optimizer_distance(&res.x_star, std::slice::from_ref(&reference.x)).unwrap_or(f64::NAN),
            objective_gap: res.objective_fn - reference.value,
            tight: res.tight,
            error: None,
        },
        Err(e) => StudyCell {
            n_samples,
            replication,
            seed,
            epsilon: f64::NAN,
            distance: f64::NAN,
            objective_gap: f64::NAN,
            tight: false,
            error: Some(e.to_string()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::portfolio::summarize;
    use rand::Rng;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn table2() -> NormalModel {
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

    #[test]
    fn single_step_return() {
        let s = parse_prices("date,A,B\n2020-01-03,10,4\n2020-01-10,11,4\n".as_bytes()).unwrap();
        let r = prices_to_returns(&s).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r.values()[(0, 0)] - 0.1).abs() < 1e-15);
        assert_eq!(r.values()[(0, 1)], 0.0);
        assert_eq!(s.assets(), ["A", "B"]);
    }

    #[test]
    fn constant_prices_give_zero_returns() {
        let p = DMatrix::from_element(6, 3, 42.5);
        let dates = (1..=6).map(|d| date(&format!("2021-02-0{d}"))).collect();
        let s = PriceSeries::new(vec!["a".into(), "b".into(), "c".into()], dates, p).unwrap();
        let r = prices_to_returns(&s).unwrap();
        assert_eq!((r.len(), r.assets()), (5, 3));
        assert!(r.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn returns_invert_to_prices() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = DMatrix::from_fn(30, 4, |_, _| rng.random_range(1.0..200.0));
        let dates = vec![date("2020-01-01"); 30];
        let names = (0..4).map(|i| format!("S{i}")).collect();
        let s = PriceSeries::new(names, dates, p.clone()).unwrap();
        let r = prices_to_returns(&s).unwrap();
        for t in 0..29 {
            for i in 0..4 {
                let next = p[(t, i)] * (1.0 + r.values()[(t, i)]);
                assert!((next - p[(t + 1, i)]).abs() <= 1e-12 * p[(t + 1, i)]);
            }
        }
    }

    #[test]
    fn malformed_price_files() {
        let cases = [
            ("", 1),
            ("when,A,B\n2020-01-01,1,2\n2020-01-02,1,2\n", 1),
            ("date,A,B\n2020-01-01,1,2\n2020-01-02,1\n", 3),
            ("date,A,B\n2020-01-01,1,2\n2020-13-02,1,2\n", 3),
            ("date,A,B\n2020-01-01,1,2\n2020-01-02,1,-2\n", 3),
            ("date,A,B\n2020-01-01,1,2\n2020-01-02,1,x\n", 3),
            ("date,A,B\n2020-01-01,1,2\n2020-01-02,1,0\n", 3),
        ];
        for (text, want) in cases {
            match parse_prices(text.as_bytes()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(matches!(
            parse_prices("date,A,B\n".as_bytes()),
            Err(Error::InvalidSamples(_))
        ));
        assert!(parse_prices("date,A,B\n2020-01-01,1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn returns_file_round_trip() {
        let text = "date,A,B,C\n2020-01-03,10,4,2\n2020-01-10,11,5,2.5\n2020-01-17,9.9,5.5,2\n";
        let s = parse_prices(text.as_bytes()).unwrap();
        let r = prices_to_returns(&s).unwrap();
        let mut buf = Vec::new();
        write_returns(&mut buf, &s, &r).unwrap();
        let back = parse_returns(buf.as_slice()).unwrap();
        assert_eq!(back.samples, r);
        assert_eq!(back.assets, s.assets());
        assert_eq!(back.dates, &s.dates()[1..]);

        let mut scatter = Vec::new();
        write_scatter(&mut scatter, s.assets(), &r).unwrap();
        let scatter = String::from_utf8(scatter).unwrap();
        assert_eq!(scatter.lines().count(), 1 + 3 * 2);
        assert!(scatter.starts_with("asset,week,return\nA,1,0.1"));
    }

    #[test]
    fn degenerate_covariance_repeats_the_mean() {
        let model = NormalModel::new(vec![0.1, -0.2, 0.3], DMatrix::zeros(3, 3)).unwrap();
        let s = sample_normal(&model, 7, 1).unwrap();
        for j in 0..7 {
            assert_eq!(s.row(j), vec![0.1, -0.2, 0.3]);
        }
        assert!(sample_normal(&model, 0, 1).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_normal(&table2(), 50, 9).unwrap();
        let b = sample_normal(&table2(), 50, 9).unwrap();
        let c = sample_normal(&table2(), 50, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn large_samples_match_the_model() {
        let model = table2();
        let s = sample_normal(&model, 100_000, 2024).unwrap();
        let sum = summarize(&s).unwrap();
        for i in 0..3 {
            assert!((sum.sample_mean[i] - model.mean()[i]).abs() <= 0.03 * model.mean()[i].abs());
            for j in 0..3 {
                let want = model.covariance()[(i, j)];
                let got = sum.sample_covariance[(i, j)];
                // Entries near zero get an absolute allowance on the same scale.
                assert!((got - want).abs() <= 0.03 * want.abs().max(1.0), "({i},{j}) {got} vs {want}");
            }
        }
    }

    #[test]
    fn factor_reproduces_covariance() {
        let c = table2().covariance().clone();
        let l = sqrt_factor(&c);
        assert!((&l * l.transpose() - c).abs().max() < 1e-12);
    }

    #[test]
    fn distances() {
        let r = vec![vec![0.2, 0.3, 0.5]];
        assert_eq!(optimizer_distance(&[0.2, 0.3, 0.5], &r).unwrap(), 0.0);
        let d = optimizer_distance(&[1.0, 0.0, 0.0], &[vec![0.0, 1.0, 0.0]]).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        let two = [vec![1.0, 0.0], vec![0.0, 0.5]];
        assert_eq!(optimizer_distance(&[0.0, 0.0], &two).unwrap(), 0.5);
        assert!(matches!(optimizer_distance(&[0.0], &[]), Err(Error::EmptyReference)));
        assert!(optimizer_distance(&[0.0], &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn cell_seeds_are_distinct_and_stable() {
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        let mut seen = std::collections::HashSet::new();
        for n in [10, 100, 1000] {
            for r in 0..50 {
                assert!(seen.insert(cell_seed(7, n, r)));
            }
        }
        assert_eq!(cell_seed(7, 100, 3), cell_seed(7, 100, 3));
    }

    #[test]
    fn plan_validation() {
        let ok = StudyPlan { sample_sizes: vec![10, 100], replications: 2, base_seed: 0 };
        assert!(ok.validate().is_ok());
        for bad in [
            StudyPlan { sample_sizes: vec![], ..ok.clone() },
            StudyPlan { sample_sizes: vec![100, 10], ..ok.clone() },
            StudyPlan { sample_sizes: vec![0, 10], ..ok.clone() },
            StudyPlan { replications: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn noiseless_study_recovers_the_reference() {
        let model = NormalModel::new(vec![0.3, 0.5, 0.4], DMatrix::zeros(3, 3)).unwrap();
        let pref = RiskPreference::new(vec![0.6, 0.4]).unwrap();
        let cfg = PsaaConfig::default();
        let reference = analytic_reference(&model, &pref, &cfg).unwrap();
        let plan = StudyPlan { sample_sizes: vec![5, 50], replications: 3, base_seed: 1 };
        let report = convergence_study(&model, &pref, &reference, &plan, &cfg).unwrap();
        assert_eq!(report.cells.len(), 6);
        for c in &report.cells {
            assert!(c.error.is_none());
            assert!(c.distance <= 1e-6, "{c:?}");
        }
    }

    #[test]
    fn median_helper() {
        assert_eq!(median([3.0, 1.0, 2.0].into_iter()), Some(2.0));
        assert_eq!(median([4.0, 1.0, f64::NAN, 2.0, 3.0].into_iter()), Some(2.5));
        assert_eq!(median(std::iter::empty()), None);
    }
}
