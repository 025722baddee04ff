//! Variance penalty, the within-pair proportion penalty, and the tuning
//! constant `a_n` together with the misclassification probability it needs.

use serde::{Deserialize, Serialize};

use crate::dgp;
use crate::error::{Error, Result};
use crate::model::{joint_logs, MixtureParams};
use crate::rng;

/// Coefficients of the fitted size regression for `M0 = 1..=4`:
/// `(constant, 1/T, 1/N, logit a_n, logit omega)`.
pub const AN_COEFFICIENTS: [[f64; 5]; 4] = [
    [-0.616, 0.776, 28.143, -0.016, 0.0],
    [-0.811, -0.288, 4.637, -0.101, -0.197],
    [-0.680, 0.611, 21.156, -0.111, 0.002],
    [-0.735, 0.258, 8.585, -0.128, -0.013],
];

/// Fixed `a_n` for models with covariates, `M0 = 1..=4`; `M0 >= 5` uses [`AN_LARGE_M0`].
pub const AN_COVARIATE_CONSTANTS: [f64; 4] = [0.1617, 0.0025, 0.0567, 0.4858];
pub const AN_LARGE_M0: f64 = 0.5;

pub const AN_MIN: f64 = 0.005;
pub const AN_MAX: f64 = 0.5;
pub const OMEGA_MIN: f64 = 1e-3;
pub const OMEGA_MAX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnMode {
    Formula,
    CovariateConstants,
    UserFixed,
    /// `1/sqrt(n)`, used for plain estimation where no null model is being tested.
    SampleSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub a_n: f64,
    pub sigma0_sq: Vec<f64>,
    pub an_mode: AnMode,
}

impl PenaltyConfig {
    pub fn new(a_n: f64, sigma0_sq: Vec<f64>, an_mode: AnMode) -> Result<Self> {
        if !(a_n >= 0.0) || !a_n.is_finite() {
            return Err(Error::Domain(format!("a_n must be non-negative and finite, got {a_n}")));
        }
        if sigma0_sq.is_empty() || sigma0_sq.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("variance anchors must be positive, got {sigma0_sq:?}")));
        }
        Ok(Self { a_n, sigma0_sq, an_mode })
    }

    /// Anchor for component `j`; a single anchor is shared by all components.
    pub fn anchor(&self, j: usize) -> f64 {
        if self.sigma0_sq.len() == 1 {
            self.sigma0_sq[0]
        } else {
            self.sigma0_sq[j]
        }
    }

    pub fn with_anchors(&self, sigma0_sq: Vec<f64>) -> Result<Self> {
        Self::new(self.a_n, sigma0_sq, self.an_mode)
    }

    pub fn with_an(&self, a_n: f64, an_mode: AnMode) -> Result<Self> {
        Self::new(a_n, self.sigma0_sq.clone(), an_mode)
    }
}

/// `-a_n (s0/s + ln(s/s0) - 1)`.
pub fn pn_sigma(sigma_sq: f64, sigma0_sq: f64, a_n: f64) -> Result<f64> {
    if !(sigma_sq > 0.0) || !(sigma0_sq > 0.0) {
        return Err(Error::Domain(format!("variances must be positive, got {sigma_sq} and {sigma0_sq}")));
    }
    Ok(pn_unchecked(sigma_sq, sigma0_sq, a_n))
}

#[inline]
pub(crate) fn pn_unchecked(sigma_sq: f64, sigma0_sq: f64, a_n: f64) -> f64 {
    let r = sigma0_sq / sigma_sq;
    -a_n * (r - r.ln() - 1.0)
}

pub fn p_tau(tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("tau must lie in (0,1), got {tau}")));
    }
    Ok(p_tau_unchecked(tau))
}

#[inline]
pub(crate) fn p_tau_unchecked(tau: f64) -> f64 {
    (2.0 * tau.min(1.0 - tau)).ln()
}

pub fn total_penalty(params: &MixtureParams, cfg: &PenaltyConfig) -> Result<f64> {
    let m = params.m();
    if cfg.sigma0_sq.len() != 1 && cfg.sigma0_sq.len() != m {
        return Err(Error::Dimension(format!("{} anchors for {m} components", cfg.sigma0_sq.len())));
    }
    params
        .components
        .iter()
        .enumerate()
        .map(|(j, c)| pn_sigma(c.sigma_sq, cfg.anchor(j), cfg.a_n))
        .sum()
}

/// Monte Carlo Bayes misclassification rate of `params` for panels of length `t`.
///
/// Units are drawn from the mixture (standard normal covariates), assigned to
/// the component with the largest posterior weight, and the share of wrong
/// assignments is returned, clamped to `[OMEGA_MIN, OMEGA_MAX]`.
pub fn misclassification(params: &MixtureParams, t: usize, n_draws: usize, seed: u64) -> Result<f64> {
    params.validate()?;
    if params.m() < 2 {
        return Err(Error::Domain("misclassification needs at least two components".into()));
    }
    if n_draws == 0 || t == 0 {
        return Err(Error::Domain("need at least one draw and one period".into()));
    }
    let spec = dgp::DGPSpec::new(params.clone(), n_draws, t, rng::derive_seed(seed, 0x6f6d_6567_61))?;
    let (data, types) = dgp::generate_with_types(&spec)?;
    let mut buf = vec![0.0; params.m()];
    let mut wrong = 0usize;
    for (i, &true_type) in types.iter().enumerate() {
        joint_logs(&data, i, params, &mut buf);
        let mut best = 0;
        for j in 1..buf.len() {
            if buf[j] > buf[best] {
                best = j;
            }
        }
        if best != true_type {
            wrong += 1;
        }
    }
    Ok((wrong as f64 / n_draws as f64).clamp(OMEGA_MIN, OMEGA_MAX))
}

/// Tuning constant for testing `H0: M = m0`.
///
/// `omega` is only consulted for `2 <= m0 <= 4` without covariates.
pub fn compute_an(m0: usize, n: usize, t: usize, omega: Option<f64>, has_covariates: bool) -> Result<f64> {
    if m0 < 1 {
        return Err(Error::Domain("M0 must be at least 1".into()));
    }
    if n == 0 || t == 0 {
        return Err(Error::Domain("n and T must be positive".into()));
    }
    if has_covariates {
        return Ok(if m0 <= 4 { AN_COVARIATE_CONSTANTS[m0 - 1] } else { AN_LARGE_M0 });
    }
    if m0 >= 5 {
        return Ok(AN_LARGE_M0);
    }
    let rho = AN_COEFFICIENTS[m0 - 1];
    let mut lin = rho[0] + rho[1] / t as f64 + rho[2] / n as f64;
    if m0 >= 2 {
        let w = omega
            .ok_or_else(|| Error::Domain(format!("omega is required for M0 = {m0} without covariates")))?;
        if !w.is_finite() {
            return Err(Error::Domain(format!("omega must be finite, got {w}")));
        }
        let w = w.clamp(OMEGA_MIN, OMEGA_MAX);
        lin += rho[4] * (w / (1.0 - w)).ln();
    }
    let a = 1.0 / (1.0 + (lin / rho[3]).exp());
    Ok(a.clamp(AN_MIN, AN_MAX))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MixtureParams;

    #[test]
    fn pn_sigma_examples() {
        assert_eq!(pn_sigma(1.3, 1.3, 0.7).unwrap(), 0.0);
        let v = pn_sigma(2.0, 1.0, 1.0).unwrap();
        assert!((v + (0.5 + 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((v + 0.19315).abs() < 1e-5);
        assert!(pn_sigma(1e-7, 1.0, 1.0).unwrap() < -1e6);
        assert!(matches!(pn_sigma(0.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(pn_sigma(1.0, -1.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn p_tau_examples() {
        assert_eq!(p_tau(0.5).unwrap(), 0.0);
        assert!((p_tau(0.25).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!(p_tau(1e-9).unwrap() < -19.0);
        assert!(p_tau(0.0).is_err());
        assert!(p_tau(1.0).is_err());
    }

    #[test]
    fn total_penalty_additive() {
        let cfg = PenaltyConfig::new(0.3, vec![1.0, 2.0, 0.5], AnMode::UserFixed).unwrap();
        let at = MixtureParams::univariate(&[0.2, 0.3, 0.5], &[0.0, 1.0, 2.0], &[1.0, 2f64.sqrt(), 0.5f64.sqrt()]);
        assert!(total_penalty(&at, &cfg).unwrap().abs() < 1e-15);

        let p = MixtureParams::univariate(&[0.2, 0.3, 0.5], &[0.0, 1.0, 2.0], &[1.3, 0.4, 2.0]);
        let expected = pn_sigma(1.69, 1.0, 0.3).unwrap() + pn_sigma(0.16, 2.0, 0.3).unwrap()
            + pn_sigma(4.0, 0.5, 0.3).unwrap();
        assert!((total_penalty(&p, &cfg).unwrap() - expected).abs() < 1e-14);

        let two = MixtureParams::univariate(&[0.5, 0.5], &[0.0, 1.0], &[1.0, 3.0]);
        let shared = PenaltyConfig::new(0.3, vec![1.0], AnMode::UserFixed).unwrap();
        assert_eq!(total_penalty(&two, &shared).unwrap(), pn_sigma(9.0, 1.0, 0.3).unwrap());

        let bad = PenaltyConfig::new(0.3, vec![1.0, 1.0], AnMode::UserFixed).unwrap();
        assert!(matches!(total_penalty(&p, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn compute_an_covariate_constants() {
        let expect = [0.1617, 0.0025, 0.0567, 0.4858, 0.5, 0.5];
        for (m0, e) in (1..=6).zip(expect) {
            assert_eq!(compute_an(m0, 200, 3, None, true).unwrap(), e);
        }
        assert!(compute_an(0, 200, 3, None, true).is_err());
    }

    #[test]
    fn compute_an_formula_homogeneity() {
        let lin = -0.616 + 0.776 / 2.0 + 28.143 / 100.0;
        let raw = 1.0 / (1.0 + (lin / -0.016f64).exp());
        assert!((raw - 0.966).abs() < 1e-3);
        assert_eq!(compute_an(1, 100, 2, None, false).unwrap(), 0.5);
    }

    #[test]
    fn compute_an_formula_two_components() {
        // logit a = -(rho1 + rho2/T + rho3/n + rho5 logit w)/rho4, evaluated by hand
        let logit_w = (0.3f64 / 0.7).ln();
        let num = -0.811 - 0.288 / 5.0 + 4.637 / 500.0 - 0.197 * logit_w;
        let logit_a = -num / -0.101;
        let oracle = (logit_a.exp() / (1.0 + logit_a.exp())).clamp(0.005, 0.5);
        let got = compute_an(2, 500, 5, Some(0.3), false).unwrap();
        assert!((got - oracle).abs() < 1e-14);
        assert!(compute_an(2, 500, 5, None, false).is_err());
        assert_eq!(compute_an(7, 500, 5, None, false).unwrap(), 0.5);
    }

    #[test]
    fn misclassification_identical_components() {
        let p = MixtureParams::univariate(&[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0]);
        // ties go to the first component, so exactly the type-2 draws are wrong
        let w = misclassification(&p, 3, 10_000, 1).unwrap();
        assert!((w - 0.5).abs() <= 0.02);
        assert!(misclassification(&MixtureParams::univariate(&[1.0], &[0.0], &[1.0]), 3, 100, 1).is_err());
    }

    #[test]
    fn misclassification_separated_hits_floor() {
        let p = MixtureParams::univariate(&[0.5, 0.5], &[-10.0, 10.0], &[1.0, 1.0]);
        assert_eq!(misclassification(&p, 3, 10_000, 4).unwrap(), OMEGA_MIN);
    }

    #[test]
    fn misclassification_deterministic_and_monotone() {
        let sep = |d: f64| MixtureParams::univariate(&[0.5, 0.5], &[-d, d], &[1.0, 1.0]);
        let a = misclassification(&sep(0.2), 2, 5000, 9).unwrap();
        assert_eq!(a, misclassification(&sep(0.2), 2, 5000, 9).unwrap());
        let b = misclassification(&sep(0.5), 2, 5000, 9).unwrap();
        let c = misclassification(&sep(1.0), 2, 5000, 9).unwrap();
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    // Bayes error for T=3, two equal-weight components with means -0.5, 0.5 and
    // sd 0.8, 1.2. The posterior depends on the unit only through the mean ybar and
    // the within-unit sum of squares R, where ybar ~ N(mu, s^2/3) and R/s^2 ~ chi2_2,
    // so the error is the integral of min(0.5 g1, 0.5 g2) over (ybar, R).
    fn bayes_error_oracle() -> f64 {
        let comps = [(-0.5f64, 0.64f64), (0.5, 1.44)];
        let dens = |m: f64, r: f64, (mu, s2): (f64, f64)| {
            let v = s2 / 3.0;
            let fm = (-(m - mu).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
            let fr = (-r / (2.0 * s2)).exp() / (2.0 * s2);
            fm * fr
        };
        let (m_lo, m_hi, nm) = (-7.0, 7.0, 2800);
        let (r_hi, nr) = (40.0, 4000);
        let hm = (m_hi - m_lo) / nm as f64;
        let hr = r_hi / nr as f64;
        let mut total = 0.0;
        for a in 0..nm {
            let m = m_lo + (a as f64 + 0.5) * hm;
            for b in 0..nr {
                let r = (b as f64 + 0.5) * hr;
                total += 0.5 * dens(m, r, comps[0]).min(dens(m, r, comps[1]));
            }
        }
        total * hm * hr
    }

    #[test]
    fn misclassification_matches_quadrature() {
        let oracle = bayes_error_oracle();
        let p = MixtureParams::univariate(&[0.5, 0.5], &[-0.5, 0.5], &[0.8, 1.2]);
        let mc = misclassification(&p, 3, 50_000, 17).unwrap();
        assert!((mc - oracle).abs() < 0.01, "mc {mc} oracle {oracle}");
    }

    proptest::proptest! {
        #[test]
        fn pn_sigma_nonpositive_and_linear(s in 1e-4f64..1e3, s0 in 1e-3f64..1e2, a in 1e-3f64..10.0) {
            let v = pn_sigma(s, s0, a).unwrap();
            proptest::prop_assert!(v <= 0.0);
            let v2 = pn_sigma(s, s0, 2.0 * a).unwrap();
            proptest::prop_assert!((v2 - 2.0 * v).abs() <= 1e-12 * (1.0 + v.abs()));
            proptest::prop_assert!(pn_sigma(1.1 * s0, s0, a).unwrap() < 0.0);
            proptest::prop_assert!(pn_sigma(0.9 * s0, s0, a).unwrap() < 0.0);
        }

        #[test]
        fn p_tau_symmetric(tau in 1e-6f64..(1.0 - 1e-6)) {
            proptest::prop_assert!((p_tau(tau).unwrap() - p_tau(1.0 - tau).unwrap()).abs() < 1e-9);
            proptest::prop_assert!(p_tau(tau).unwrap() <= 0.0);
        }

        #[test]
        fn compute_an_in_range(m0 in 1usize..7, n in 2usize..100_000, t in 1usize..20, w in 0.0f64..1.0, cov: bool) {
            let a = compute_an(m0, n, t, Some(w), cov).unwrap();
            if cov {
                proptest::prop_assert!(a > 0.0 && a <= AN_MAX);
            } else {
                proptest::prop_assert!((AN_MIN..=AN_MAX).contains(&a));
            }
            proptest::prop_assert_eq!(a, compute_an(m0, n, t, Some(w), cov).unwrap());
        }
    }
}
