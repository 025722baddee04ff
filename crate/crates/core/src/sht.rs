//! Selection of the number of components: sequential testing and information criteria.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::em::{self, EMConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::PanelDataset;
use crate::testing::{run_test, Method, TestConfig, TestOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    ShtEm,
    ShtPlrt,
    Aic,
    Bic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevelSchedule {
    Fixed { level: f64 },
    /// `min(0.05, c / ln n)`.
    Shrinking { c: f64 },
}

impl Default for LevelSchedule {
    fn default() -> Self {
        LevelSchedule::Fixed { level: 0.05 }
    }
}

impl LevelSchedule {
    pub fn level(&self, n: usize) -> Result<f64> {
        let l = match *self {
            LevelSchedule::Fixed { level } => level,
            LevelSchedule::Shrinking { c } => (c / (n as f64).ln()).min(0.05),
        };
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::Domain(format!("test level must lie in (0,1), got {l}")));
        }
        Ok(l)
    }

    fn describe(&self, level: f64) -> String {
        match *self {
            LevelSchedule::Fixed { .. } => format!("fixed level {level}"),
            LevelSchedule::Shrinking { c } => format!("min(0.05, {c}/ln n) = {level}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Reject,
    FailToReject,
    Selected,
    NotSelected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub m: usize,
    /// Test statistic or criterion value.
    pub value: f64,
    /// Critical value at the test level; absent for criteria.
    pub critical_value: Option<f64>,
    pub p_value: Option<f64>,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub m_hat: usize,
    pub per_m: Vec<SelectionStep>,
    pub method: SelectionMethod,
    pub level_schedule: String,
    /// Every test up to `mbar - 1` rejected, so `m_hat = mbar` is a lower bound.
    pub censored: bool,
    #[serde(skip)]
    pub tests: Vec<TestOutcome>,
}

/// Tests `M0 = 1, 2, ...` and stops at the first non-rejection. At most
/// `mbar - 1` tests are run; if all reject, `m_hat = mbar` and the result is
/// flagged as censored. A test rejects when its statistic exceeds the
/// critical value at the level.
pub fn select_sht(
    data: &PanelDataset,
    mbar: usize,
    schedule: LevelSchedule,
    method: Method,
    cfg: &TestConfig,
) -> Result<SelectionResult> {
    if mbar == 0 {
        return Err(Error::Domain("Mbar must be at least 1".into()));
    }
    let level = schedule.level(data.n())?;
    let pen = em::estimation_penalty(data)?;
    let mut per_m = Vec::new();
    let mut tests = Vec::new();
    let mut prev: Option<FitResult> = None;
    let mut m_hat = mbar;
    let mut censored = true;
    for m0 in 1..mbar {
        let null = em::fit_pmle_with(data, m0, &pen, &cfg.em, prev.as_ref().map(|f| &f.params))?;
        let out = run_test(data, m0, method, cfg, Some(&null))?;
        let crit = match &out.null_distribution {
            Some(d) => d.critical_value(1.0 - level)?,
            None => return Err(Error::Numerical("test returned no null distribution".into())),
        };
        let reject = out.statistic > crit;
        per_m.push(SelectionStep {
            m: m0,
            value: out.statistic,
            critical_value: Some(crit),
            p_value: Some(out.p_value),
            decision: if reject { Decision::Reject } else { Decision::FailToReject },
        });
        tests.push(out);
        prev = Some(null);
        if !reject {
            m_hat = m0;
            censored = false;
            break;
        }
    }
    Ok(SelectionResult {
        m_hat,
        per_m,
        method: match method {
            Method::EmTest => SelectionMethod::ShtEm,
            Method::Plrt => SelectionMethod::ShtPlrt,
        },
        level_schedule: schedule.describe(level),
        censored,
        tests,
    })
}

/// Free parameters of an `m`-component model.
pub fn parameter_count(m: usize, q: usize, p: usize) -> usize {
    (m - 1) + m * (q + 2) + p
}

pub fn aic(loglik: f64, k: usize) -> f64 {
    -2.0 * loglik + 2.0 * k as f64
}

pub fn bic(loglik: f64, k: usize, n: usize) -> f64 {
    -2.0 * loglik + k as f64 * (n as f64).ln()
}

/// AIC and BIC over `1..=mbar` components, each evaluated at the unpenalized
/// log-likelihood of a fit under [`em::criterion_penalty`]; smaller is better.
pub fn information_criteria(data: &PanelDataset, mbar: usize, cfg: &EMConfig) -> Result<(SelectionResult, SelectionResult)> {
    if mbar == 0 {
        return Err(Error::Domain("Mbar must be at least 1".into()));
    }
    let pen = em::criterion_penalty(data)?;
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    let mut prev: Option<FitResult> = None;
    for m in 1..=mbar {
        match em::fit_pmle_with(data, m, &pen, cfg, prev.as_ref().map(|f| &f.params)) {
            Ok(fit) if fit.converged => {
                let k = parameter_count(m, data.q(), data.p());
                rows.push((m, aic(fit.loglik, k), bic(fit.loglik, k, data.n())));
                prev = Some(fit);
            }
            Ok(_) => warn!("{m}-component fit did not converge; skipped in information criteria"),
            Err(e) => warn!("{m}-component fit failed: {e}; skipped in information criteria"),
        }
    }
    if rows.is_empty() {
        return Err(Error::NonConvergence("no model could be fitted".into()));
    }
    let build = |method: SelectionMethod, pick: fn(&(usize, f64, f64)) -> f64| {
        let best = rows
            .iter()
            .min_by(|a, b| pick(a).total_cmp(&pick(b)).then(a.0.cmp(&b.0)))
            .map(|r| r.0)
            .expect("non-empty");
        SelectionResult {
            m_hat: best,
            per_m: rows
                .iter()
                .map(|r| SelectionStep {
                    m: r.0,
                    value: pick(r),
                    critical_value: None,
                    p_value: None,
                    decision: if r.0 == best { Decision::Selected } else { Decision::NotSelected },
                })
                .collect(),
            method,
            level_schedule: String::new(),
            censored: false,
            tests: Vec::new(),
        }
    };
    Ok((build(SelectionMethod::Aic, |r| r.1), build(SelectionMethod::Bic, |r| r.2)))
}
