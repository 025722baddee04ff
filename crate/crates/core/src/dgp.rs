//! Simulation of panel mixture datasets and batch experiments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{MixtureParams, PanelDataset};
use crate::rng;
use crate::sht::{information_criteria, select_sht, LevelSchedule, SelectionMethod};
use crate::testing::{bootstrap_test, run_test, Method, TestConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    StandardNormal,
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
}

impl Default for CovariateLaw {
    fn default() -> Self {
        CovariateLaw::StandardNormal
    }
}

impl CovariateLaw {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            CovariateLaw::StandardNormal => StandardNormal.sample(rng),
            CovariateLaw::Normal { mean, sd } => {
                let e: f64 = StandardNormal.sample(rng);
                mean + sd * e
            }
            CovariateLaw::Uniform { low, high } => rng.gen_range(low..high),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            CovariateLaw::StandardNormal => Ok(()),
            CovariateLaw::Normal { mean, sd } if mean.is_finite() && sd >= 0.0 && sd.is_finite() => Ok(()),
            CovariateLaw::Uniform { low, high } if low.is_finite() && high.is_finite() && low < high => Ok(()),
            other => Err(Error::Domain(format!("invalid covariate law {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DGPSpec {
    pub params: MixtureParams,
    pub n: usize,
    pub t: usize,
    /// One law per x column; empty means standard normal throughout.
    #[serde(default)]
    pub x_law: Vec<CovariateLaw>,
    #[serde(default)]
    pub z_law: Vec<CovariateLaw>,
    #[serde(default)]
    pub seed: u64,
}

impl DGPSpec {
    pub fn new(params: MixtureParams, n: usize, t: usize, seed: u64) -> Result<Self> {
        let spec = Self { params, n, t, x_law: Vec::new(), z_law: Vec::new(), seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.n == 0 || self.t == 0 {
            return Err(Error::Domain("n and T must be positive".into()));
        }
        let (q, p) = (self.params.q(), self.params.gamma.len());
        if !self.x_law.is_empty() && self.x_law.len() != q {
            return Err(Error::Dimension(format!("{} x laws for q = {q}", self.x_law.len())));
        }
        if !self.z_law.is_empty() && self.z_law.len() != p {
            return Err(Error::Dimension(format!("{} z laws for p = {p}", self.z_law.len())));
        }
        self.x_law.iter().chain(&self.z_law).try_for_each(CovariateLaw::validate)
    }

    fn law(laws: &[CovariateLaw], k: usize) -> CovariateLaw {
        laws.get(k).copied().unwrap_or_default()
    }
}

fn draw_type(alpha: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, a) in alpha.iter().enumerate() {
        acc += a;
        if u < acc {
            return j;
        }
    }
    // rounding left u above the cumulative sum; take the last component with mass
    alpha.iter().rposition(|&a| a > 0.0).unwrap_or(alpha.len() - 1)
}

/// Simulated dataset together with each unit's latent type.
///
/// Units are generated sequentially from one stream, so the first `n` units of
/// a larger sample with the same seed coincide with the smaller sample.
pub fn generate_with_types(spec: &DGPSpec) -> Result<(PanelDataset, Vec<usize>)> {
    spec.validate()?;
    let params = &spec.params;
    let (n, t, q, p) = (spec.n, spec.t, params.q(), params.gamma.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut y = Vec::with_capacity(n * t);
    let mut x = Vec::with_capacity(n * t * q);
    let mut z = Vec::with_capacity(n * t * p);
    let mut types = Vec::with_capacity(n);
    for _ in 0..n {
        let j = draw_type(&params.alpha, &mut rng);
        let c = &params.components[j];
        let sd = c.sigma();
        for _ in 0..t {
            let mut mean = c.mu;
            for k in 0..q {
                let v = DGPSpec::law(&spec.x_law, k).draw(&mut rng);
                mean += v * c.beta[k];
                x.push(v);
            }
            for k in 0..p {
                let v = DGPSpec::law(&spec.z_law, k).draw(&mut rng);
                mean += v * params.gamma[k];
                z.push(v);
            }
            let e: f64 = StandardNormal.sample(&mut rng);
            y.push(mean + sd * e);
        }
        types.push(j);
    }
    let ids = (0..n).map(|i| i.to_string()).collect();
    Ok((PanelDataset::new(n, t, q, p, y, x, z, ids)?, types))
}

pub fn generate(spec: &DGPSpec) -> Result<PanelDataset> {
    generate_with_types(spec).map(|(d, _)| d)
}

/// Redraws types and errors from `params` while keeping the covariates of `template`.
pub fn generate_conditional(params: &MixtureParams, template: &PanelDataset, seed: u64) -> Result<PanelDataset> {
    params.check_against(template)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = template.periods();
    let mut y = Vec::with_capacity(template.n() * t);
    for i in 0..template.n() {
        let c = &params.components[draw_type(&params.alpha, &mut rng)];
        let sd = c.sigma();
        for s in 0..t {
            let mean = c.mu
                + crate::model::dot(template.x(i, s), &c.beta)
                + crate::model::dot(template.z(i, s), &params.gamma);
            let e: f64 = StandardNormal.sample(&mut rng);
            y.push(mean + sd * e);
        }
    }
    template.with_outcomes(y)
}

/// What each replication of an experiment cell runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Procedure {
    /// Rejection rate of a test of `H0: M = m0` at `level`.
    Test {
        method: Method,
        m0: usize,
        #[serde(default = "default_level")]
        level: f64,
        /// Bootstrap replications; asymptotic critical values when absent.
        #[serde(default)]
        bootstrap: Option<usize>,
    },
    /// Selection frequencies of sequential testing, AIC and BIC.
    Select {
        method: Method,
        mbar: usize,
        #[serde(default)]
        schedule: LevelSchedule,
    },
}

fn default_level() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub name: String,
    pub dgp: DGPSpec,
    pub procedure: Procedure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDesign {
    pub cells: Vec<ExperimentCell>,
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub test: TestConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFrequency {
    pub method: SelectionMethod,
    /// `(M, count)` for every selected value.
    pub counts: Vec<(usize, usize)>,
    pub censored: usize,
}

impl SelectionFrequency {
    pub fn frequency(&self, pred: impl Fn(usize) -> bool, total: usize) -> f64 {
        self.counts.iter().filter(|c| pred(c.0)).map(|c| c.1).sum::<usize>() as f64 / total.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub name: String,
    pub reps: usize,
    pub completed: usize,
    pub failed: usize,
    pub rejections: Option<usize>,
    pub rejection_rate: Option<f64>,
    /// Binomial standard error of the rejection rate.
    pub std_error: Option<f64>,
    pub selection: Vec<SelectionFrequency>,
    /// First few failure messages.
    pub errors: Vec<String>,
}

enum RepOutcome {
    Test(bool),
    Select(Vec<(SelectionMethod, usize, bool)>),
}

fn run_rep(cell: &ExperimentCell, cfg: &TestConfig, seed: u64) -> Result<RepOutcome> {
    let mut spec = cell.dgp.clone();
    spec.seed = rng::derive_seed(seed, 0);
    let data = generate(&spec)?;
    let mut cfg = cfg.clone();
    cfg.em.seed = rng::derive_seed(seed, 1);
    match &cell.procedure {
        Procedure::Test { method, m0, level, bootstrap } => {
            let out = match bootstrap {
                Some(b) => bootstrap_test(&data, *m0, *method, &cfg, *b)?,
                None => run_test(&data, *m0, *method, &cfg, None)?,
            };
            Ok(RepOutcome::Test(out.rejects(*level)))
        }
        Procedure::Select { method, mbar, schedule } => {
            let s = select_sht(&data, *mbar, *schedule, *method, &cfg)?;
            let (a, b) = information_criteria(&data, *mbar, &cfg.em)?;
            Ok(RepOutcome::Select(vec![
                (s.method, s.m_hat, s.censored),
                (a.method, a.m_hat, false),
                (b.method, b.m_hat, false),
            ]))
        }
    }
}

/// Runs every cell `reps` times. Replication `r` of cell `c` is seeded from
/// `(seed, c, r)`, so results do not depend on scheduling.
pub fn run_experiment(design: &ExperimentDesign) -> Result<Vec<CellSummary>> {
    if design.reps == 0 {
        return Err(Error::Domain("reps must be at least 1".into()));
    }
    design.test.validate()?;
    design.cells.iter().try_for_each(|c| c.dgp.validate())?;
    let mut out = Vec::with_capacity(design.cells.len());
    for (c, cell) in design.cells.iter().enumerate() {
        let results: Vec<Result<RepOutcome>> = (0..design.reps)
            .into_par_iter()
            .map(|r| run_rep(cell, &design.test, rng::derive_path(design.seed, &[c as u64, r as u64])))
            .collect();
        out.push(summarize(cell, design.reps, results));
    }
    Ok(out)
}

fn summarize(cell: &ExperimentCell, reps: usize, results: Vec<Result<RepOutcome>>) -> CellSummary {
    let mut errors = Vec::new();
    let mut rejections = 0usize;
    let mut completed = 0usize;
    let mut tables: Vec<(SelectionMethod, std::collections::BTreeMap<usize, usize>, usize)> = Vec::new();
    for r in results {
        match r {
            Ok(RepOutcome::Test(rej)) => {
                completed += 1;
                rejections += rej as usize;
            }
            Ok(RepOutcome::Select(picks)) => {
                completed += 1;
                for (method, m, cens) in picks {
                    let k = match tables.iter().position(|t| t.0 == method) {
                        Some(k) => k,
                        None => {
                            tables.push((method, Default::default(), 0));
                            tables.len() - 1
                        }
                    };
                    *tables[k].1.entry(m).or_insert(0) += 1;
                    tables[k].2 += cens as usize;
                }
            }
            Err(e) => {
                if errors.len() < 5 {
                    errors.push(e.to_string());
                }
            }
        }
    }
    let is_test = matches!(cell.procedure, Procedure::Test { .. });
    let rate = (is_test && completed > 0).then(|| rejections as f64 / completed as f64);
    CellSummary {
        name: cell.name.clone(),
        reps,
        completed,
        failed: reps - completed,
        rejections: is_test.then_some(rejections),
        rejection_rate: rate,
        std_error: rate.map(|p| (p * (1.0 - p) / completed as f64).sqrt()),
        selection: tables
            .into_iter()
            .map(|(method, counts, censored)| SelectionFrequency { method, counts: counts.into_iter().collect(), censored })
            .collect(),
        errors,
    }
}

/// One CSV row per cell and outcome.
pub fn summary_csv(summaries: &[CellSummary]) -> String {
    let mut s = String::from("cell,outcome,count,completed,failed,rate,std_error\n");
    for c in summaries {
        if let (Some(k), Some(r), Some(se)) = (c.rejections, c.rejection_rate, c.std_error) {
            s.push_str(&format!("{},reject,{k},{},{},{r},{se}\n", c.name, c.completed, c.failed));
        }
        for f in &c.selection {
            let method = method_label(f.method);
            for &(m, k) in &f.counts {
                let r = k as f64 / c.completed.max(1) as f64;
                s.push_str(&format!("{},{method}:M={m},{k},{},{},{r},\n", c.name, c.completed, c.failed));
            }
        }
    }
    s
}

fn method_label(m: SelectionMethod) -> &'static str {
    match m {
        SelectionMethod::ShtEm => "sht_em",
        SelectionMethod::ShtPlrt => "sht_plrt",
        SelectionMethod::Aic => "aic",
        SelectionMethod::Bic => "bic",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ComponentParams;

    #[test]
    fn degenerate_alpha_gives_one_type() {
        let params = MixtureParams::univariate(&[1.0, 0.0], &[1.5, -3.0], &[2.0, 1.0]);
        let spec = DGPSpec::new(params, 10_000, 2, 3).unwrap();
        let (d, types) = generate_with_types(&spec).unwrap();
        assert!(types.iter().all(|&j| j == 0));
        let n = (d.n() * d.periods()) as f64;
        let mean: f64 = (0..d.n()).flat_map(|i| d.y_unit(i).to_vec()).sum::<f64>() / n;
        assert!((mean - 1.5).abs() < 4.0 * 2.0 / n.sqrt());
    }

    fn within_variance(d: &PanelDataset) -> f64 {
        let t = d.periods() as f64;
        (0..d.n())
            .map(|i| {
                let u = d.y_unit(i);
                let m = u.iter().sum::<f64>() / t;
                u.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (t - 1.0)
            })
            .sum::<f64>()
            / d.n() as f64
    }

    #[test]
    fn halving_variance_halves_within_variance() {
        let a = generate(&DGPSpec::new(MixtureParams::univariate(&[1.0], &[0.0], &[1.0]), 20_000, 3, 1).unwrap())
            .unwrap();
        let b = generate(
            &DGPSpec::new(MixtureParams::univariate(&[1.0], &[0.0], &[0.5f64.sqrt()]), 20_000, 3, 2).unwrap(),
        )
        .unwrap();
        let ratio = within_variance(&b) / within_variance(&a);
        // each estimate has relative sd about 1/sqrt(n) = 0.007
        assert!((ratio - 0.5).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn seeded_generation_is_repeatable_and_nested() {
        let params = MixtureParams::new(
            vec![0.3, 0.7],
            vec![ComponentParams::new(-1.0, 1.0, vec![0.5]), ComponentParams::new(1.0, 0.5, vec![-0.5])],
            vec![0.2],
        );
        let a = generate(&DGPSpec::new(params.clone(), 50, 3, 9).unwrap()).unwrap();
        let b = generate(&DGPSpec::new(params.clone(), 50, 3, 9).unwrap()).unwrap();
        assert_eq!(a, b);
        let big = generate(&DGPSpec::new(params, 80, 3, 9).unwrap()).unwrap();
        for i in 0..50 {
            assert_eq!(a.y_unit(i), big.y_unit(i));
            assert_eq!(a.x(i, 2), big.x(i, 2));
        }
    }

    #[test]
    fn conditional_keeps_covariates() {
        let params = MixtureParams::new(
            vec![0.5, 0.5],
            vec![ComponentParams::new(-1.0, 1.0, vec![0.5]), ComponentParams::new(1.0, 0.5, vec![-0.5])],
            vec![],
        );
        let d = generate(&DGPSpec::new(params.clone(), 20, 2, 1).unwrap()).unwrap();
        let e = generate_conditional(&params, &d, 5).unwrap();
        for i in 0..20 {
            assert_eq!(d.x(i, 0), e.x(i, 0));
        }
        assert_ne!(d.y_unit(0), e.y_unit(0));
    }

    #[test]
    fn law_validation() {
        let params = MixtureParams::univariate(&[1.0], &[0.0], &[1.0]);
        let mut spec = DGPSpec::new(params, 5, 2, 0).unwrap();
        spec.z_law = vec![CovariateLaw::StandardNormal];
        assert!(spec.validate().is_err());
    }
}
