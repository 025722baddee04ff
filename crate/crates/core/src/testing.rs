//! Tests for the number of components: the EM test, the penalized likelihood
//! ratio test, a parametric bootstrap, and the unboundedness demonstration.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymdist::{simulate_null, NullDistribution};
use crate::dgp::generate_conditional;
use crate::em::{self, EMConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::{self, ComponentParams, MixtureParams, PanelDataset};
use crate::penalty::{compute_an, misclassification, pn_unchecked, AnMode, PenaltyConfig};
use crate::rng;
use crate::scores::{information, score_general, score_homogeneity};

/// Significance levels reported with every test.
pub const SIGNIFICANCE_LEVELS: [f64; 3] = [0.10, 0.05, 0.01];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    EmTest,
    Plrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PSource {
    Asymptotic,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    pub em: EMConfig,
    /// Draws from the simulated limiting distribution.
    pub n_draws: usize,
    /// Replaces the tuning constant of the EM test when set.
    pub an_override: Option<f64>,
    /// Proportion floor of the PLRT.
    pub plrt_epsilon: f64,
    /// PLRT tuning constant as a multiple of the EM-test one.
    pub plrt_an_factor: f64,
    /// Draws for the misclassification rate behind the tuning constant.
    pub omega_draws: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            em: EMConfig::default(),
            n_draws: 2000,
            an_override: None,
            plrt_epsilon: 0.1,
            plrt_an_factor: 10.0,
            omega_draws: 10_000,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        if self.n_draws == 0 || self.omega_draws == 0 {
            return Err(Error::Domain("draw counts must be positive".into()));
        }
        if !(self.plrt_epsilon > 0.0 && self.plrt_epsilon < 0.5) {
            return Err(Error::Domain(format!("PLRT epsilon must lie in (0, 0.5), got {}", self.plrt_epsilon)));
        }
        if let Some(a) = self.an_override {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Domain(format!("a_n override must be non-negative, got {a}")));
            }
        }
        if !(self.plrt_an_factor > 0.0) {
            return Err(Error::Domain("PLRT a_n factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalValue {
    pub level: f64,
    pub value: f64,
}

/// One restricted alternative fit. `h` is the 0-based split index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub h: usize,
    pub tau0: Option<f64>,
    pub statistic: Option<f64>,
    /// Within-pair proportion after the last EM step.
    pub tau_final: Option<f64>,
    pub converged: bool,
    pub constraint_binding: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub a_n: f64,
    pub an_mode: AnMode,
    pub omega: Option<f64>,
    pub tau_set: Vec<f64>,
    pub k_steps: usize,
    pub epsilon_alpha: f64,
    pub null_converged: bool,
    pub cells: Vec<CellReport>,
    pub dropped_cells: usize,
    pub n_draws: usize,
    pub null_draw_seed: u64,
    pub complementarity_failures: usize,
    pub bootstrap_dropped: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub m0: usize,
    pub statistic: f64,
    /// Per split index; NaN when every cell of that index failed.
    pub local_stats: Vec<f64>,
    pub method: Method,
    pub crit: Vec<CriticalValue>,
    pub p_value: f64,
    pub p_source: PSource,
    pub null_fit: FitResult,
    pub best_alt_fit: FitResult,
    pub diagnostics: Diagnostics,
    #[serde(skip)]
    pub null_distribution: Option<NullDistribution>,
}

impl TestOutcome {
    pub fn critical_value(&self, level: f64) -> Option<f64> {
        self.crit.iter().find(|c| (c.level - level).abs() < 1e-12).map(|c| c.value)
    }

    /// Statistic above the critical value at `level`; falls back to the
    /// p-value when the sample of the null distribution is not kept.
    pub fn rejects(&self, level: f64) -> bool {
        match &self.null_distribution {
            Some(d) => d.critical_value(1.0 - level).map_or(false, |c| self.statistic > c),
            None => self.p_value <= level,
        }
    }
}

/// `*`, `**`, `***` for significance at 10%, 5%, 1%.
pub fn stars(p_value: f64) -> &'static str {
    if p_value < 0.01 {
        "***"
    } else if p_value < 0.05 {
        "**"
    } else if p_value < 0.10 {
        "*"
    } else {
        ""
    }
}

/// Penalty of the tests: anchors at the null variances and the tabulated
/// tuning constant, or the user override. Returns the misclassification
/// rate used, if any.
pub fn test_penalty(data: &PanelDataset, null: &MixtureParams, cfg: &TestConfig) -> Result<(PenaltyConfig, Option<f64>)> {
    let m0 = null.m();
    let anchors: Vec<f64> = null.components.iter().map(|c| c.sigma_sq).collect();
    if let Some(a) = cfg.an_override {
        return Ok((PenaltyConfig::new(a, anchors, AnMode::UserFixed)?, None));
    }
    let cov = data.has_covariates();
    let omega = if m0 >= 2 && m0 <= 4 && !cov {
        Some(misclassification(null, data.periods(), cfg.omega_draws, rng::derive_seed(cfg.em.seed, 1))?)
    } else {
        None
    };
    let a = compute_an(m0, data.n(), data.periods(), omega, cov)?;
    let mode = if cov && m0 <= 4 { AnMode::CovariateConstants } else { AnMode::Formula };
    Ok((PenaltyConfig::new(a, anchors, mode)?, omega))
}

/// Null PMLE used by the tests.
pub fn fit_null(data: &PanelDataset, m0: usize, cfg: &EMConfig) -> Result<FitResult> {
    if m0 == 0 {
        return Err(Error::Domain("M0 must be at least 1".into()));
    }
    let pen = em::estimation_penalty(data)?;
    let mut fits = em::fit_sequence(data, m0, &pen, cfg)?;
    Ok(fits.pop().expect("m0 >= 1"))
}

struct Core {
    null_fit: FitResult,
    penalty: PenaltyConfig,
    omega: Option<f64>,
    local: Vec<f64>,
    statistic: f64,
    best_alt: FitResult,
    cells: Vec<CellReport>,
}

fn compute(data: &PanelDataset, m0: usize, method: Method, cfg: &TestConfig, null: Option<&FitResult>) -> Result<Core> {
    let null_fit = match null {
        Some(f) => f.clone(),
        None => fit_null(data, m0, &cfg.em)?,
    };
    if null_fit.params.m() != m0 {
        return Err(Error::Dimension(format!("null fit has {} components, expected {m0}", null_fit.params.m())));
    }
    if !null_fit.converged {
        return Err(Error::NonConvergence(format!(
            "{m0}-component null fit did not converge in {} iterations",
            null_fit.iterations
        )));
    }
    let (mut penalty, omega) = test_penalty(data, &null_fit.params, cfg)?;
    if method == Method::Plrt {
        penalty = penalty.with_an(penalty.a_n * cfg.plrt_an_factor, penalty.an_mode)?;
    }
    let l0 = null_fit.loglik;

    let grid: Vec<(usize, Option<f64>)> = match method {
        Method::EmTest => (0..m0).flat_map(|h| cfg.em.tau_set.iter().map(move |&t| (h, Some(t)))).collect(),
        Method::Plrt => (0..m0).map(|h| (h, None)).collect(),
    };
    let global: Vec<MixtureParams> = if method == Method::Plrt {
        em::estimation_penalty(data)
            .and_then(|p| em::fit_pmle_with(data, m0 + 1, &p, &cfg.em, Some(&null_fit.params)))
            .map(|f| vec![f.params])
            .unwrap_or_default()
    } else {
        Vec::new()
    };

    let results: Vec<Result<(f64, FitResult)>> = grid
        .par_iter()
        .map(|&(h, tau0)| {
            let base = em::build_restriction(&null_fit.params, h, cfg.em.epsilon_alpha)?;
            match tau0 {
                Some(t) => {
                    let spec = base.with_tau(Some(t));
                    let step1 = em::fit_restricted(data, &spec, &penalty, &cfg.em)?;
                    let (fit, _) = em::em_k_steps(data, &step1, &spec, cfg.em.k_steps, &penalty)?;
                    Ok((2.0 * (fit.penalized_loglik - l0), fit))
                }
                None => {
                    let spec = base.with_tau(None).with_floor(cfg.plrt_epsilon);
                    let fit = em::fit_restricted_with(data, &spec, &penalty, &cfg.em, &global)?;
                    Ok((2.0 * (fit.penalized_loglik - l0), fit))
                }
            }
        })
        .collect();

    let mut local = vec![f64::NAN; m0];
    let mut best: Option<(f64, FitResult)> = None;
    let mut cells = Vec::with_capacity(grid.len());
    for (&(h, tau0), res) in grid.iter().zip(results) {
        match res {
            Ok((stat, fit)) if stat.is_finite() => {
                if local[h].is_nan() || stat > local[h] {
                    local[h] = stat;
                }
                cells.push(CellReport {
                    h,
                    tau0,
                    statistic: Some(stat),
                    tau_final: fit.tau,
                    converged: fit.converged,
                    constraint_binding: fit.constraint_binding,
                    error: None,
                });
                if best.as_ref().map_or(true, |b| stat > b.0) {
                    best = Some((stat, fit));
                }
            }
            Ok((stat, _)) => {
                warn!("cell h={h} tau0={tau0:?} produced a non-finite statistic {stat}; dropped");
                cells.push(CellReport::failed(h, tau0, format!("non-finite statistic {stat}")));
            }
            Err(e) => {
                warn!("cell h={h} tau0={tau0:?} failed: {e}; dropped");
                cells.push(CellReport::failed(h, tau0, e.to_string()));
            }
        }
    }
    let (statistic, best_alt) =
        best.ok_or_else(|| Error::NonConvergence("every alternative fit failed".into()))?;
    Ok(Core { null_fit, penalty, omega, local, statistic, best_alt, cells })
}

impl CellReport {
    fn failed(h: usize, tau0: Option<f64>, error: String) -> Self {
        Self { h, tau0, statistic: None, tau_final: None, converged: false, constraint_binding: false, error: Some(error) }
    }
}

fn outcome(core: Core, m0: usize, method: Method, cfg: &TestConfig, dist: NullDistribution, source: PSource, draw_seed: u64) -> TestOutcome {
    let crit = SIGNIFICANCE_LEVELS
        .iter()
        .map(|&l| CriticalValue { level: l, value: dist.critical_value(1.0 - l).expect("level in (0,1)") })
        .collect();
    let dropped = core.cells.iter().filter(|c| c.error.is_some()).count();
    TestOutcome {
        m0,
        statistic: core.statistic,
        local_stats: core.local,
        method,
        crit,
        p_value: dist.p_value(core.statistic),
        p_source: source,
        diagnostics: Diagnostics {
            a_n: core.penalty.a_n,
            an_mode: core.penalty.an_mode,
            omega: core.omega,
            tau_set: cfg.em.tau_set.clone(),
            k_steps: cfg.em.k_steps,
            epsilon_alpha: if method == Method::Plrt { cfg.plrt_epsilon } else { cfg.em.epsilon_alpha },
            null_converged: core.null_fit.converged,
            cells: core.cells,
            dropped_cells: dropped,
            n_draws: dist.n_draws,
            null_draw_seed: draw_seed,
            complementarity_failures: dist.complementarity_failures,
            bootstrap_dropped: None,
        },
        null_fit: core.null_fit,
        best_alt_fit: core.best_alt,
        null_distribution: Some(dist),
    }
}

/// Limiting null distribution from the scores at a fitted null model.
pub fn null_distribution(data: &PanelDataset, null: &MixtureParams, n_draws: usize, seed: u64) -> Result<NullDistribution> {
    let bundle = if null.m() == 1 {
        score_homogeneity(data, &null.gamma, &null.components[0])?
    } else {
        score_general(data, null)?
    };
    simulate_null(&information(&bundle)?, n_draws, seed)
}

/// Runs the chosen test with p-values from the simulated limiting distribution.
/// A previously computed null fit may be supplied.
pub fn run_test(
    data: &PanelDataset,
    m0: usize,
    method: Method,
    cfg: &TestConfig,
    null: Option<&FitResult>,
) -> Result<TestOutcome> {
    cfg.validate()?;
    let core = compute(data, m0, method, cfg, null)?;
    let draw_seed = rng::derive_seed(cfg.em.seed, 2);
    let dist = null_distribution(data, &core.null_fit.params, cfg.n_draws, draw_seed)?;
    Ok(outcome(core, m0, method, cfg, dist, PSource::Asymptotic, draw_seed))
}

/// EM test of `H0: M = m0`.
pub fn em_test(data: &PanelDataset, m0: usize, cfg: &TestConfig) -> Result<TestOutcome> {
    run_test(data, m0, Method::EmTest, cfg, None)
}

/// Penalized likelihood ratio test of `H0: M = m0`.
pub fn plrt(data: &PanelDataset, m0: usize, cfg: &TestConfig) -> Result<TestOutcome> {
    run_test(data, m0, Method::Plrt, cfg, None)
}

/// Parametric bootstrap: `b` datasets from the null fit with the observed
/// covariates, the statistic recomputed on each.
pub fn bootstrap_test(data: &PanelDataset, m0: usize, method: Method, cfg: &TestConfig, b: usize) -> Result<TestOutcome> {
    cfg.validate()?;
    if b < 99 {
        return Err(Error::Domain(format!("bootstrap needs at least 99 replications, got {b}")));
    }
    let core = compute(data, m0, method, cfg, None)?;
    let null = core.null_fit.params.clone();
    let stats: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let seed = rng::derive_path(cfg.em.seed, &[3, k as u64]);
            let boot = generate_conditional(&null, data, seed).ok()?;
            let mut c = cfg.clone();
            c.em.seed = seed;
            compute(&boot, m0, method, &c, None).ok().map(|r| r.statistic)
        })
        .collect();
    let kept: Vec<f64> = stats.iter().flatten().copied().collect();
    let dropped = b - kept.len();
    if dropped * 10 > b {
        return Err(Error::NonConvergence(format!("{dropped} of {b} bootstrap replications failed")));
    }
    if dropped > 0 {
        warn!("{dropped} of {b} bootstrap replications failed and were dropped");
    }
    let dist = NullDistribution::from_samples(kept, m0, cfg.em.seed)?;
    let mut out = outcome(core, m0, method, cfg, dist, PSource::Bootstrap, cfg.em.seed);
    out.diagnostics.bootstrap_dropped = Some(dropped);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnboundednessReport {
    /// Twice the log-likelihood gain of the degenerate two-component point.
    pub lr_degenerate: f64,
    /// The same gain with the variance penalty added.
    pub lr_penalized: f64,
    /// Unit with the smallest within-unit variance.
    pub unit: usize,
    pub unit_variance: f64,
    pub sigma0_sq: f64,
    pub a_n: f64,
    /// The chosen unit has zero within-unit variance; the ratio is infinite.
    pub degenerate: bool,
}

/// Evaluates the two-component likelihood ratio at the point that puts mass
/// `1/n` on a component fitted to the single unit with the smallest
/// within-unit variance.
pub fn demonstrate_unboundedness(data: &PanelDataset) -> Result<UnboundednessReport> {
    if data.q() > 0 || data.p() > 0 {
        return Err(Error::Domain("the demonstration uses outcome-only data".into()));
    }
    let tt = data.periods();
    if tt < 2 {
        return Err(Error::Domain("within-unit variance needs T >= 2".into()));
    }
    let n = data.n();
    let all: Vec<f64> = (0..n).flat_map(|i| data.y_unit(i).to_vec()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / all.len() as f64;
    if !(var > 0.0) {
        return Err(Error::Data("outcome is constant".into()));
    }
    let (unit, unit_mean, unit_var) = (0..n)
        .map(|i| {
            let u = data.y_unit(i);
            let m = u.iter().sum::<f64>() / tt as f64;
            (i, m, u.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (tt - 1) as f64)
        })
        .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)))
        .expect("n >= 1");
    let a_n = compute_an(1, n, tt, None, false)?;
    if unit_var == 0.0 {
        return Ok(UnboundednessReport {
            lr_degenerate: f64::INFINITY,
            lr_penalized: f64::NEG_INFINITY,
            unit,
            unit_variance: 0.0,
            sigma0_sq: var,
            a_n,
            degenerate: true,
        });
    }
    let null = MixtureParams::new(vec![1.0], vec![ComponentParams::new(mean, var, vec![])], vec![]);
    let a = 1.0 / n as f64;
    let alt = MixtureParams::new(
        vec![a, 1.0 - a],
        vec![ComponentParams::new(unit_mean, unit_var, vec![]), ComponentParams::new(mean, var, vec![])],
        vec![],
    );
    let l0 = model::mixture_loglik(data, &null)?;
    let l1 = model::mixture_loglik(data, &alt)?;
    let pen = pn_unchecked(unit_var, var, a_n) + pn_unchecked(var, var, a_n);
    Ok(UnboundednessReport {
        lr_degenerate: 2.0 * (l1 - l0),
        lr_penalized: 2.0 * (l1 + pen - l0),
        unit,
        unit_variance: unit_var,
        sigma0_sq: var,
        a_n,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, DGPSpec};

    fn quick() -> TestConfig {
        TestConfig { n_draws: 300, omega_draws: 2000, ..TestConfig::default() }
    }

    #[test]
    fn stars_convention() {
        assert_eq!(stars(0.005), "***");
        assert_eq!(stars(0.03), "**");
        assert_eq!(stars(0.07), "*");
        assert_eq!(stars(0.2), "");
    }

    #[test]
    fn em_test_detects_separated_components() {
        let p = MixtureParams::univariate(&[0.5, 0.5], &[-2.0, 2.0], &[1.0, 1.0]);
        let d = generate(&DGPSpec::new(p, 150, 3, 3).unwrap()).unwrap();
        let out = em_test(&d, 1, &quick()).unwrap();
        assert!(out.statistic > out.critical_value(0.01).unwrap());
        assert!(out.p_value < 0.01);
        assert_eq!(out.statistic, out.local_stats.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        assert_eq!(out.diagnostics.cells.len(), 3);
    }

    #[test]
    fn statistics_nonnegative_under_null() {
        for seed in 0..4 {
            let p = MixtureParams::univariate(&[0.5, 0.5], &[-0.5, 0.5], &[0.8, 1.2]);
            let d = generate(&DGPSpec::new(p, 80, 3, seed).unwrap()).unwrap();
            let e = em_test(&d, 2, &quick()).unwrap();
            assert!(e.statistic >= -1e-8 && e.local_stats.iter().all(|s| *s >= -1e-8));
            let l = plrt(&d, 2, &quick()).unwrap();
            assert!(l.statistic >= -1e-8);
            assert!((0.0..=1.0).contains(&e.p_value));
        }
    }

    #[test]
    fn plrt_with_wide_floor_stays_nonnegative() {
        let d = generate(&DGPSpec::new(MixtureParams::univariate(&[1.0], &[0.0], &[1.0]), 60, 2, 8).unwrap()).unwrap();
        let cfg = TestConfig { plrt_epsilon: 0.49, ..quick() };
        assert!(plrt(&d, 1, &cfg).unwrap().statistic >= -1e-8);
    }

    #[test]
    fn unboundedness_small_and_penalized() {
        let d = PanelDataset::from_outcomes(2, 2, vec![0.1, 0.3, -1.0, 2.0]).unwrap();
        let r = demonstrate_unboundedness(&d).unwrap();
        assert!(r.lr_degenerate.is_finite() && r.lr_penalized.is_finite());
        assert_eq!(r.unit, 0);
        assert!(r.unit_variance < r.sigma0_sq && r.lr_penalized < r.lr_degenerate);
        let flat = PanelDataset::from_outcomes(2, 2, vec![1.0, 1.0, -1.0, 2.0]).unwrap();
        assert!(demonstrate_unboundedness(&flat).unwrap().degenerate);
        let one = PanelDataset::from_outcomes(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(demonstrate_unboundedness(&one).is_err());
    }
}
