//! Panel data container, mixture parameters and the component / mixture
//! log-densities of the normal panel regression mixture.
//!
//! A unit `i` contributes `W_i = {(y_it, x_it, z_it)}_{t=1..T}`. Conditional on
//! its latent type `j`, the periods are independent normals with mean
//! `mu_j + x_it'beta_j + z_it'gamma` and variance `sigma_j^2`.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::error::{Error, Result};

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Balanced panel: `n` units observed for `t` periods each.
///
/// Storage is row-major by `(unit, period)`; `x` and `z` append the covariate
/// index as the fastest-moving axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    n: usize,
    t: usize,
    q: usize,
    p: usize,
    y: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    unit_ids: Vec<String>,
}

impl PanelDataset {
    pub fn new(
        n: usize,
        t: usize,
        q: usize,
        p: usize,
        y: Vec<f64>,
        x: Vec<f64>,
        z: Vec<f64>,
        unit_ids: Vec<String>,
    ) -> Result<Self> {
        if n == 0 || t == 0 {
            return Err(Error::Data(format!("need n >= 1 and T >= 1, got n={n}, T={t}")));
        }
        if y.len() != n * t {
            return Err(Error::Dimension(format!("y has {} entries, expected n*T = {}", y.len(), n * t)));
        }
        if x.len() != n * t * q {
            return Err(Error::Dimension(format!("x has {} entries, expected n*T*q = {}", x.len(), n * t * q)));
        }
        if z.len() != n * t * p {
            return Err(Error::Dimension(format!("z has {} entries, expected n*T*p = {}", z.len(), n * t * p)));
        }
        if unit_ids.len() != n {
            return Err(Error::Dimension(format!("{} unit ids for {} units", unit_ids.len(), n)));
        }
        if let Some(pos) = y.iter().chain(&x).chain(&z).position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at flat position {pos}")));
        }
        Ok(Self { n, t, q, p, y, x, z, unit_ids })
    }

    /// Dataset without covariates, units labelled by index.
    pub fn from_outcomes(n: usize, t: usize, y: Vec<f64>) -> Result<Self> {
        let ids = (0..n).map(|i| i.to_string()).collect();
        Self::new(n, t, 0, 0, y, Vec::new(), Vec::new(), ids)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn periods(&self) -> usize {
        self.t
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    #[inline]
    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.y[i * self.t + t]
    }

    #[inline]
    pub fn y_unit(&self, i: usize) -> &[f64] {
        &self.y[i * self.t..(i + 1) * self.t]
    }

    #[inline]
    pub fn x(&self, i: usize, t: usize) -> &[f64] {
        let o = (i * self.t + t) * self.q;
        &self.x[o..o + self.q]
    }

    #[inline]
    pub fn z(&self, i: usize, t: usize) -> &[f64] {
        let o = (i * self.t + t) * self.p;
        &self.z[o..o + self.p]
    }

    pub fn has_covariates(&self) -> bool {
        self.q + self.p > 0
    }

    /// Copy with a new outcome vector (same covariates and ids).
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.n, self.t, self.q, self.p, y, self.x.clone(), self.z.clone(), self.unit_ids.clone())
    }

    /// Copy with units reordered: unit `k` of the result is unit `order[k]` here.
    pub fn permute_units(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n {
            return Err(Error::Dimension("permutation length differs from n".into()));
        }
        let (t, q, p) = (self.t, self.q, self.p);
        let mut y = Vec::with_capacity(self.y.len());
        let mut x = Vec::with_capacity(self.x.len());
        let mut z = Vec::with_capacity(self.z.len());
        let mut ids = Vec::with_capacity(self.n);
        for &i in order {
            y.extend_from_slice(&self.y[i * t..(i + 1) * t]);
            x.extend_from_slice(&self.x[i * t * q..(i + 1) * t * q]);
            z.extend_from_slice(&self.z[i * t * p..(i + 1) * t * p]);
            ids.push(self.unit_ids[i].clone());
        }
        Self::new(self.n, t, q, p, y, x, z, ids)
    }

    /// Copy with x column `k` multiplied by `c`.
    pub fn scale_x_column(&self, k: usize, c: f64) -> Result<Self> {
        if k >= self.q {
            return Err(Error::Dimension(format!("x column {k} out of range (q={})", self.q)));
        }
        let mut x = self.x.clone();
        for chunk in x.chunks_mut(self.q) {
            chunk[k] *= c;
        }
        Self::new(self.n, self.t, self.q, self.p, self.y.clone(), x, self.z.clone(), self.unit_ids.clone())
    }
}

/// Per-type parameters `theta_j = (mu_j, sigma_j^2, beta_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentParams {
    pub mu: f64,
    pub sigma_sq: f64,
    pub beta: Vec<f64>,
}

impl ComponentParams {
    pub fn new(mu: f64, sigma_sq: f64, beta: Vec<f64>) -> Self {
        Self { mu, sigma_sq, beta }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_sq.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub alpha: Vec<f64>,
    pub components: Vec<ComponentParams>,
    pub gamma: Vec<f64>,
}

impl MixtureParams {
    pub fn new(alpha: Vec<f64>, components: Vec<ComponentParams>, gamma: Vec<f64>) -> Self {
        Self { alpha, components, gamma }
    }

    /// Convenience constructor for models without covariates.
    pub fn univariate(alpha: &[f64], mu: &[f64], sigma: &[f64]) -> Self {
        let components = mu
            .iter()
            .zip(sigma)
            .map(|(&m, &s)| ComponentParams::new(m, s * s, Vec::new()))
            .collect();
        Self::new(alpha.to_vec(), components, Vec::new())
    }

    pub fn m(&self) -> usize {
        self.components.len()
    }

    pub fn q(&self) -> usize {
        self.components.first().map_or(0, |c| c.beta.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        if self.alpha.len() != self.components.len() {
            return Err(Error::Dimension(format!(
                "{} mixing proportions for {} components",
                self.alpha.len(),
                self.components.len()
            )));
        }
        if self.alpha.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Domain(format!("mixing proportions outside [0,1]: {:?}", self.alpha)));
        }
        let total: f64 = self.alpha.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixing proportions sum to {total}, not 1")));
        }
        let q = self.q();
        for c in &self.components {
            if !(c.sigma_sq > 0.0) || !c.sigma_sq.is_finite() {
                return Err(Error::Domain(format!("variance must be positive, got {}", c.sigma_sq)));
            }
            if c.beta.len() != q {
                return Err(Error::Dimension("components disagree on the length of beta".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn check_against(&self, data: &PanelDataset) -> Result<()> {
        self.validate()?;
        if self.q() != data.q() {
            return Err(Error::Dimension(format!("beta has length {}, data has q = {}", self.q(), data.q())));
        }
        if self.gamma.len() != data.p() {
            return Err(Error::Dimension(format!("gamma has length {}, data has p = {}", self.gamma.len(), data.p())));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Residual `y_it - mu - x_it'beta - z_it'gamma`.
#[inline]
pub(crate) fn residual(data: &PanelDataset, i: usize, t: usize, gamma: &[f64], theta: &ComponentParams) -> f64 {
    data.y(i, t) - theta.mu - dot(data.x(i, t), &theta.beta) - dot(data.z(i, t), gamma)
}

/// Unchecked component log-density of unit `i`.
#[inline]
pub(crate) fn unit_component_loglik(data: &PanelDataset, i: usize, gamma: &[f64], theta: &ComponentParams) -> f64 {
    let mut ssr = 0.0;
    for t in 0..data.periods() {
        let r = residual(data, i, t, gamma, theta);
        ssr += r * r;
    }
    let tt = data.periods() as f64;
    -tt * HALF_LN_2PI - 0.5 * tt * theta.sigma_sq.ln() - 0.5 * ssr / theta.sigma_sq
}

pub fn component_loglik(data: &PanelDataset, unit: usize, gamma: &[f64], theta: &ComponentParams) -> Result<f64> {
    if unit >= data.n() {
        return Err(Error::Dimension(format!("unit {unit} out of range (n={})", data.n())));
    }
    if gamma.len() != data.p() || theta.beta.len() != data.q() {
        return Err(Error::Dimension(format!(
            "gamma/beta lengths ({}, {}) do not match data (p={}, q={})",
            gamma.len(),
            theta.beta.len(),
            data.p(),
            data.q()
        )));
    }
    if !(theta.sigma_sq > 0.0) {
        return Err(Error::Domain(format!("variance must be positive, got {}", theta.sigma_sq)));
    }
    Ok(unit_component_loglik(data, unit, gamma, theta))
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(alpha_j) + log f(W_i; gamma, theta_j)` for one unit, written into `out`.
pub(crate) fn joint_logs(data: &PanelDataset, i: usize, params: &MixtureParams, out: &mut [f64]) {
    for (j, (a, c)) in params.alpha.iter().zip(&params.components).enumerate() {
        out[j] = if *a > 0.0 {
            a.ln() + unit_component_loglik(data, i, &params.gamma, c)
        } else {
            f64::NEG_INFINITY
        };
    }
}

/// Unchecked mixture log-likelihood.
pub(crate) fn loglik_unchecked(data: &PanelDataset, params: &MixtureParams) -> f64 {
    let mut buf = vec![0.0; params.m()];
    (0..data.n())
        .map(|i| {
            joint_logs(data, i, params, &mut buf);
            log_sum_exp(&buf)
        })
        .sum()
}

pub fn mixture_loglik(data: &PanelDataset, params: &MixtureParams) -> Result<f64> {
    params.check_against(data)?;
    Ok(loglik_unchecked(data, params))
}

/// Sort components by ascending mean; ties fall back to variance, then slopes.
pub fn canonicalize(params: &MixtureParams) -> MixtureParams {
    let mut order: Vec<usize> = (0..params.m()).collect();
    order.sort_by(|&a, &b| component_order(&params.components[a], &params.components[b]));
    MixtureParams {
        alpha: order.iter().map(|&j| params.alpha[j]).collect(),
        components: order.iter().map(|&j| params.components[j].clone()).collect(),
        gamma: params.gamma.clone(),
    }
}

fn component_order(a: &ComponentParams, b: &ComponentParams) -> Ordering {
    a.mu.total_cmp(&b.mu)
        .then(a.sigma_sq.total_cmp(&b.sigma_sq))
        .then_with(|| {
            a.beta
                .iter()
                .zip(&b.beta)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, t: usize, q: usize, p: usize) -> PanelDataset {
        let y = (0..n * t).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = (0..n * t * q).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = (0..n * t * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PanelDataset::new(n, t, q, p, y, x, z, (0..n).map(|i| format!("u{i}")).collect()).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, m: usize, q: usize, p: usize) -> MixtureParams {
        let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let mut alpha: Vec<f64> = raw.iter().map(|a| a / s).collect();
        let rest: f64 = alpha[..m - 1].iter().sum();
        alpha[m - 1] = 1.0 - rest;
        let comps = (0..m)
            .map(|_| {
                ComponentParams::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.3..2.0),
                    (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        MixtureParams::new(alpha, comps, (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn component_loglik_standard_values() {
        let d = PanelDataset::from_outcomes(1, 1, vec![0.7]).unwrap();
        let v = component_loglik(&d, 0, &[], &ComponentParams::new(0.7, 1.0, vec![])).unwrap();
        assert!((v + 0.918_938_5).abs() < 1e-7);

        let d = PanelDataset::from_outcomes(1, 2, vec![1.5, 1.5]).unwrap();
        let v = component_loglik(&d, 0, &[], &ComponentParams::new(1.5, 1.0, vec![])).unwrap();
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn component_loglik_matches_per_period_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = random_dataset(&mut rng, 4, 3, 2, 1);
        let theta = ComponentParams::new(0.3, 1.7, vec![0.4, -0.2]);
        let gamma = [0.9];
        for i in 0..4 {
            let mut dens = 1.0;
            for t in 0..3 {
                let mean = 0.3 + 0.4 * d.x(i, t)[0] - 0.2 * d.x(i, t)[1] + 0.9 * d.z(i, t)[0];
                let s = 1.7f64.sqrt();
                let u = (d.y(i, t) - mean) / s;
                dens *= (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt() / s;
            }
            let v = component_loglik(&d, i, &gamma, &theta).unwrap();
            assert!((v - dens.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn component_loglik_rejects_bad_input() {
        let d = PanelDataset::from_outcomes(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            component_loglik(&d, 0, &[], &ComponentParams::new(0.0, 0.0, vec![])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            component_loglik(&d, 0, &[1.0], &ComponentParams::new(0.0, 1.0, vec![])),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            component_loglik(&d, 2, &[], &ComponentParams::new(0.0, 1.0, vec![])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn single_component_mixture_is_sum_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_dataset(&mut rng, 6, 3, 1, 1);
        let params = random_params(&mut rng, 1, 1, 1);
        let expected: f64 = (0..6)
            .map(|i| component_loglik(&d, i, &params.gamma, &params.components[0]).unwrap())
            .sum();
        assert_eq!(mixture_loglik(&d, &params).unwrap(), expected);
    }

    #[test]
    fn identical_components_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dataset(&mut rng, 5, 2, 0, 0);
        let c = ComponentParams::new(0.2, 0.8, vec![]);
        let one = mixture_loglik(&d, &MixtureParams::new(vec![1.0], vec![c.clone()], vec![])).unwrap();
        for a in [0.0, 0.2, 0.5, 1.0] {
            let two = MixtureParams::new(vec![a, 1.0 - a], vec![c.clone(), c.clone()], vec![]);
            assert!((mixture_loglik(&d, &two).unwrap() - one).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_matches_double_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = random_dataset(&mut rng, 5, 2, 0, 0);
        let params = random_params(&mut rng, 3, 0, 0);
        let mut oracle = 0.0;
        for i in 0..5 {
            let mut dens = 0.0;
            for (a, c) in params.alpha.iter().zip(&params.components) {
                let mut prod = 1.0;
                for t in 0..2 {
                    let s = c.sigma_sq.sqrt();
                    let u = (d.y(i, t) - c.mu) / s;
                    prod *= (-0.5 * u * u).exp() / ((2.0 * std::f64::consts::PI).sqrt() * s);
                }
                dens += a * prod;
            }
            oracle += dens.ln();
        }
        assert!((mixture_loglik(&d, &params).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn mixture_loglik_rejects_bad_alpha() {
        let d = PanelDataset::from_outcomes(2, 2, vec![0.0; 4]).unwrap();
        let bad = MixtureParams::univariate(&[0.7, 0.7], &[0.0, 1.0], &[1.0, 1.0]);
        assert!(matches!(mixture_loglik(&d, &bad), Err(Error::Domain(_))));
        let neg = MixtureParams::univariate(&[-0.1, 1.1], &[0.0, 1.0], &[1.0, 1.0]);
        assert!(matches!(mixture_loglik(&d, &neg), Err(Error::Domain(_))));
    }

    #[test]
    fn alpha_one_ignores_second_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = random_dataset(&mut rng, 7, 3, 1, 0);
        let c1 = ComponentParams::new(0.5, 1.1, vec![0.3]);
        let one = MixtureParams::new(vec![1.0], vec![c1.clone()], vec![]);
        for _ in 0..5 {
            let c2 = ComponentParams::new(rng.gen_range(-5.0..5.0), rng.gen_range(0.01..9.0), vec![rng.gen()]);
            let two = MixtureParams::new(vec![1.0, 0.0], vec![c1.clone(), c2], vec![]);
            assert_eq!(mixture_loglik(&d, &two).unwrap(), mixture_loglik(&d, &one).unwrap());
        }
    }

    #[test]
    fn stable_for_huge_residuals() {
        // residuals near 1e3 sigma: every component density underflows in f64
        let d = PanelDataset::from_outcomes(2, 3, vec![1000.0, 1001.0, 999.5, -1200.0, -1199.0, -1201.0]).unwrap();
        let params = MixtureParams::univariate(&[0.3, 0.7], &[0.0, 1.0], &[1.0, 1.5]);
        let v = mixture_loglik(&d, &params).unwrap();
        assert!(v.is_finite());
        // per unit, the dominant component alone fixes the value to within log(1 + tiny)
        let mut oracle = 0.0;
        for i in 0..2 {
            let terms: Vec<f64> = params
                .alpha
                .iter()
                .zip(&params.components)
                .map(|(a, c)| a.ln() + unit_component_loglik(&d, i, &[], c))
                .collect();
            let big = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let small = terms.iter().copied().fold(f64::INFINITY, f64::min);
            oracle += big + (small - big).exp().ln_1p();
        }
        assert!(((v - oracle) / oracle).abs() < 1e-8);
    }

    #[test]
    fn canonicalize_orders_components() {
        let p = MixtureParams::univariate(&[0.3, 0.7], &[-1.0, 2.0], &[1.0, 1.0]);
        assert_eq!(canonicalize(&p), p);

        let swapped = MixtureParams::univariate(&[0.7, 0.3], &[2.0, -1.0], &[1.0, 1.0]);
        assert_eq!(canonicalize(&swapped), p);

        let tie = MixtureParams::univariate(&[0.6, 0.4], &[0.0, 0.0], &[2.0, 1.0]);
        let c = canonicalize(&tie);
        assert_eq!(c.alpha, vec![0.4, 0.6]);
        assert_eq!(c.components[0].sigma_sq, 1.0);
        assert_eq!(c.components[1].sigma_sq, 4.0);

        let beta_tie = MixtureParams::new(
            vec![0.5, 0.5],
            vec![ComponentParams::new(0.0, 1.0, vec![0.5]), ComponentParams::new(0.0, 1.0, vec![-0.5])],
            vec![],
        );
        assert_eq!(canonicalize(&beta_tie).components[0].beta, vec![-0.5]);
    }

    #[test]
    fn dataset_validation() {
        assert!(PanelDataset::from_outcomes(0, 2, vec![]).is_err());
        assert!(PanelDataset::from_outcomes(2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(PanelDataset::from_outcomes(1, 2, vec![0.0, f64::NAN]), Err(Error::Data(_))));
    }

    proptest::proptest! {
        #[test]
        fn mixture_loglik_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(2..5);
            let d = random_dataset(&mut rng, 6, 3, 1, 1);
            let params = random_params(&mut rng, m, 1, 1);
            let mut order: Vec<usize> = (0..m).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let permuted = MixtureParams::new(
                order.iter().map(|&j| params.alpha[j]).collect(),
                order.iter().map(|&j| params.components[j].clone()).collect(),
                params.gamma.clone(),
            );
            let a = mixture_loglik(&d, &params).unwrap();
            let b = mixture_loglik(&d, &permuted).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
