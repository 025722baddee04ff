//! Penalized EM estimation: the unrestricted PMLE for any number of
//! components, and the restricted fits used by the tests (mean intervals,
//! proportion floors, fixed or penalized within-pair proportions, short
//! unrestricted EM runs).
//!
//! Every M-step is a sequence of exact conditional maximizations of the
//! expected complete-data penalized log-likelihood (proportions, common
//! slopes, then per component intercept/slopes and variance), so the
//! penalized log-likelihood never decreases.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::model::{self, canonicalize, dot, joint_logs, log_sum_exp, ComponentParams, MixtureParams, PanelDataset};
use crate::penalty::{p_tau_unchecked, pn_unchecked, AnMode, PenaltyConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EMConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub n_starts: usize,
    pub epsilon_alpha: f64,
    pub k_steps: usize,
    pub tau_set: Vec<f64>,
    pub seed: u64,
}

impl Default for EMConfig {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tol: 1e-8,
            n_starts: 10,
            epsilon_alpha: 0.05,
            k_steps: 3,
            tau_set: vec![0.1, 0.3, 0.5],
            seed: 0,
        }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_alpha > 0.0 && self.epsilon_alpha < 0.5) {
            return Err(Error::Domain(format!("epsilon_alpha must lie in (0, 0.5), got {}", self.epsilon_alpha)));
        }
        if self.k_steps < 1 {
            return Err(Error::Domain("K must be at least 1".into()));
        }
        if !self.tau_set.iter().any(|&t| t == 0.5) {
            return Err(Error::Domain("tau set must contain 0.5".into()));
        }
        if self.tau_set.iter().any(|&t| !(t > 0.0 && t <= 0.5)) {
            return Err(Error::Domain(format!("tau set must lie in (0, 0.5], got {:?}", self.tau_set)));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) || self.n_starts == 0 {
            return Err(Error::Domain("max_iter, tol and n_starts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: MixtureParams,
    pub loglik: f64,
    pub penalized_loglik: f64,
    pub penalty_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Within-pair proportion of a split fit, when one is tracked.
    pub tau: Option<f64>,
    /// A singular weighted design needed a ridge at some iteration.
    pub ridge_used: bool,
    /// A mean interval or proportion bound was active at the final iterate.
    pub constraint_binding: bool,
    /// Posterior weights at the final iterate, row-major `n x M`.
    #[serde(skip)]
    pub weights: Vec<f64>,
    /// Penalized objective after each iteration, starting with the initial value.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl FitResult {
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.params.m() + j]
    }

    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let m = self.params.m();
        DMatrix::from_row_slice(self.weights.len() / m, m, &self.weights)
    }
}

/// Restriction for the `(M0+1)`-component fit that splits null component `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictionSpec {
    /// Split index, 0-based: alternative components `h` and `h+1` both sit in null interval `h`.
    pub h: usize,
    /// One mean interval per null component.
    pub mu_intervals: Vec<(f64, f64)>,
    /// Fixed within-pair proportion; `None` leaves the proportions free (PLRT).
    pub tau0: Option<f64>,
    pub alpha_floor: f64,
    pub null: MixtureParams,
}

impl RestrictionSpec {
    pub fn with_tau(&self, tau0: Option<f64>) -> Self {
        Self { tau0, ..self.clone() }
    }

    pub fn with_floor(&self, alpha_floor: f64) -> Self {
        Self { alpha_floor, ..self.clone() }
    }

    /// Null component behind alternative component `j`.
    pub fn null_index(&self, j: usize) -> usize {
        null_index(self.h, j)
    }

    /// Alternative-level mean bounds.
    pub fn alt_bounds(&self) -> Vec<(f64, f64)> {
        (0..self.null.m() + 1).map(|j| self.mu_intervals[self.null_index(j)]).collect()
    }
}

fn null_index(h: usize, j: usize) -> usize {
    if j <= h {
        j
    } else {
        j - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TauRule {
    Fixed(f64),
    Penalized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AlphaRule {
    Free { lo: f64, hi: f64 },
    Pair { h: usize, tau: TauRule, lo: f64, hi: f64 },
}

struct Problem<'a> {
    data: &'a PanelDataset,
    anchors: Vec<f64>,
    a_n: f64,
    mu_bounds: Option<Vec<(f64, f64)>>,
    alpha: AlphaRule,
}

#[derive(Clone)]
struct State {
    params: MixtureParams,
    tau: Option<f64>,
}

struct EStep {
    weights: Vec<f64>,
    loglik: f64,
}

fn e_step_flat(data: &PanelDataset, params: &MixtureParams) -> EStep {
    let m = params.m();
    let mut weights = vec![0.0; data.n() * m];
    let mut buf = vec![0.0; m];
    let mut loglik = 0.0;
    for i in 0..data.n() {
        joint_logs(data, i, params, &mut buf);
        let lse = log_sum_exp(&buf);
        loglik += lse;
        for j in 0..m {
            weights[i * m + j] = (buf[j] - lse).exp();
        }
    }
    EStep { weights, loglik }
}

/// Posterior type probabilities, one row per unit.
pub fn e_step(data: &PanelDataset, params: &MixtureParams) -> Result<DMatrix<f64>> {
    params.check_against(data)?;
    let m = params.m();
    let e = e_step_flat(data, params);
    Ok(DMatrix::from_row_slice(data.n(), m, &e.weights))
}

impl Problem<'_> {
    fn penalty(&self, p: &MixtureParams) -> f64 {
        p.components
            .iter()
            .zip(&self.anchors)
            .map(|(c, &s0)| pn_unchecked(c.sigma_sq, s0, self.a_n))
            .sum()
    }

    fn tau_penalty(&self, s: &State) -> f64 {
        match self.alpha {
            AlphaRule::Pair { .. } => p_tau_unchecked(s.tau.unwrap_or(0.5)),
            AlphaRule::Free { .. } => 0.0,
        }
    }

    fn m_step(&self, weights: &[f64], s: &State, ridge: &mut bool) -> State {
        let data = self.data;
        let old = &s.params;
        let m = old.m();
        let (n, tt, q, p) = (data.n(), data.periods(), data.q(), data.p());
        let mut wsum = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                wsum[j] += weights[i * m + j];
            }
        }

        let (alpha, tau) = self.update_alpha(&wsum);

        let gamma = if p > 0 {
            let mut a = DMatrix::<f64>::zeros(p, p);
            let mut b = DVector::<f64>::zeros(p);
            for i in 0..n {
                let mut c_i = 0.0;
                for j in 0..m {
                    c_i += weights[i * m + j] / old.components[j].sigma_sq;
                }
                for t in 0..tt {
                    let z = data.z(i, t);
                    let mut target = 0.0;
                    for j in 0..m {
                        let cj = &old.components[j];
                        let w = weights[i * m + j] / cj.sigma_sq;
                        target += w * (data.y(i, t) - cj.mu - dot(data.x(i, t), &cj.beta));
                    }
                    for k in 0..p {
                        b[k] += z[k] * target;
                        for l in 0..p {
                            a[(k, l)] += c_i * z[k] * z[l];
                        }
                    }
                }
            }
            match solve_spd(&a, &b) {
                Some((g, r)) => {
                    *ridge |= r;
                    g.iter().copied().collect()
                }
                None => old.gamma.clone(),
            }
        } else {
            Vec::new()
        };

        let mut components = Vec::with_capacity(m);
        for j in 0..m {
            let oc = &old.components[j];
            if wsum[j] < 1e-12 {
                components.push(oc.clone());
                continue;
            }
            let (lo, hi) = self.mu_bounds.as_ref().map_or((f64::NEG_INFINITY, f64::INFINITY), |b| b[j]);
            let d = q + 1;
            let mut a = DMatrix::<f64>::zeros(d, d);
            let mut b = DVector::<f64>::zeros(d);
            for i in 0..n {
                let w = weights[i * m + j];
                if w == 0.0 {
                    continue;
                }
                for t in 0..tt {
                    let x = data.x(i, t);
                    let target = data.y(i, t) - dot(data.z(i, t), &gamma);
                    a[(0, 0)] += w;
                    b[0] += w * target;
                    for k in 0..q {
                        a[(0, k + 1)] += w * x[k];
                        b[k + 1] += w * x[k] * target;
                        for l in 0..q {
                            a[(k + 1, l + 1)] += w * x[k] * x[l];
                        }
                    }
                }
            }
            for k in 0..q {
                a[(k + 1, 0)] = a[(0, k + 1)];
            }
            let (mut mu, mut beta) = match solve_spd(&a, &b) {
                Some((sol, r)) => {
                    *ridge |= r;
                    (sol[0], sol.iter().skip(1).copied().collect::<Vec<_>>())
                }
                None => (oc.mu, oc.beta.clone()),
            };
            if mu < lo || mu > hi {
                mu = mu.clamp(lo, hi);
                if q > 0 {
                    let ab = a.view((1, 1), (q, q)).into_owned();
                    let rhs = DVector::from_iterator(q, (0..q).map(|k| b[k + 1] - a[(k + 1, 0)] * mu));
                    if let Some((sol, r)) = solve_spd(&ab, &rhs) {
                        *ridge |= r;
                        beta = sol.iter().copied().collect();
                    }
                }
            }
            let mut ssr = 0.0;
            for i in 0..n {
                let w = weights[i * m + j];
                if w == 0.0 {
                    continue;
                }
                for t in 0..tt {
                    let r = data.y(i, t) - mu - dot(data.x(i, t), &beta) - dot(data.z(i, t), &gamma);
                    ssr += w * r * r;
                }
            }
            let denom = wsum[j] * tt as f64 + 2.0 * self.a_n;
            let s2 = (ssr + 2.0 * self.a_n * self.anchors[j]) / denom;
            let sigma_sq = if s2.is_finite() && s2 > 0.0 { s2 } else { oc.sigma_sq };
            components.push(ComponentParams { mu, sigma_sq, beta });
        }
        State { params: MixtureParams { alpha, components, gamma }, tau }
    }

    fn update_alpha(&self, wsum: &[f64]) -> (Vec<f64>, Option<f64>) {
        let m = wsum.len();
        match self.alpha {
            AlphaRule::Free { lo, hi } => (waterfill(wsum, &vec![lo; m], &vec![hi; m]), None),
            AlphaRule::Pair { h, tau: rule, lo, hi } => {
                let tau = match rule {
                    TauRule::Fixed(t) => t,
                    TauRule::Penalized => update_tau(wsum[h], wsum[h + 1]),
                };
                let mut gw = Vec::with_capacity(m - 1);
                let mut glo = Vec::with_capacity(m - 1);
                let mut ghi = Vec::with_capacity(m - 1);
                for j in 0..m {
                    if j == h + 1 {
                        continue;
                    }
                    if j == h {
                        gw.push(wsum[h] + wsum[h + 1]);
                        glo.push(lo / tau.min(1.0 - tau));
                        ghi.push((hi / tau.max(1.0 - tau)).min(1.0));
                    } else {
                        gw.push(wsum[j]);
                        glo.push(lo);
                        ghi.push(hi);
                    }
                }
                let g = waterfill(&gw, &glo, &ghi);
                let mut alpha = Vec::with_capacity(m);
                for (k, &a) in g.iter().enumerate() {
                    if k == h {
                        let first = a * tau;
                        alpha.push(first);
                        alpha.push(a - first);
                    } else {
                        alpha.push(a);
                    }
                }
                (alpha, Some(tau))
            }
        }
    }

    fn objective(&self, s: &State, loglik: f64) -> (f64, f64) {
        let pen = self.penalty(&s.params);
        (loglik + pen + self.tau_penalty(s), pen)
    }

    fn binding(&self, s: &State) -> bool {
        let mu_bind = self.mu_bounds.as_ref().is_some_and(|b| {
            s.params
                .components
                .iter()
                .zip(b)
                .any(|(c, &(lo, hi))| c.mu == lo || c.mu == hi)
        });
        let (lo, hi) = match self.alpha {
            AlphaRule::Free { lo, hi } | AlphaRule::Pair { lo, hi, .. } => (lo, hi),
        };
        let alpha_bind = lo > 0.0
            && s.params.alpha.iter().any(|&a| (a - lo).abs() < 1e-12 || (a - hi).abs() < 1e-12);
        mu_bind || alpha_bind
    }

    /// Runs EM from `start` for at most `max_iter` rounds.
    fn run(&self, start: State, max_iter: usize, tol: f64, stop_early: bool) -> FitResult {
        let mut state = start;
        let mut e = e_step_flat(self.data, &state.params);
        let (mut obj, mut pen) = self.objective(&state, e.loglik);
        let mut trace = vec![obj];
        let mut ridge = false;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < max_iter {
            let next = self.m_step(&e.weights, &state, &mut ridge);
            let e_next = e_step_flat(self.data, &next.params);
            let (obj_next, pen_next) = self.objective(&next, e_next.loglik);
            iterations += 1;
            if !obj_next.is_finite() {
                debug!("non-finite objective after {iterations} iterations; keeping previous iterate");
                break;
            }
            let change = (obj_next - obj).abs() / (1.0 + obj.abs());
            state = next;
            e = e_next;
            obj = obj_next;
            pen = pen_next;
            trace.push(obj);
            if stop_early && change < tol {
                converged = true;
                break;
            }
        }
        if !stop_early {
            converged = true;
        }
        FitResult {
            constraint_binding: self.binding(&state),
            tau: state.tau,
            params: state.params,
            loglik: e.loglik,
            penalized_loglik: obj,
            penalty_value: pen,
            iterations,
            converged,
            ridge_used: ridge,
            weights: e.weights,
            trace,
        }
    }
}

/// Maximizer of `a log t + b log(1-t) + log(2 min(t, 1-t))` over `(0, 1)`.
pub fn update_tau(wh: f64, wh1: f64) -> f64 {
    let obj = |t: f64| {
        let mut v = p_tau_unchecked(t);
        if wh > 0.0 {
            v += wh * t.ln();
        }
        if wh1 > 0.0 {
            v += wh1 * (1.0 - t).ln();
        }
        v
    };
    let left = ((wh + 1.0) / (wh + wh1 + 1.0)).min(0.5);
    let right = (wh / (wh + wh1 + 1.0)).max(0.5);
    if obj(right) > obj(left) {
        right
    } else {
        left
    }
}

/// Maximizes `sum w_g log a_g` over the simplex with `lo_g <= a_g <= hi_g`.
fn waterfill(w: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    let trivial = lo.iter().all(|&l| l == 0.0) && hi.iter().all(|&h| h >= 1.0);
    if trivial && total > 0.0 {
        return w.iter().map(|x| x / total).collect();
    }
    let eval = |lam: f64| -> Vec<f64> {
        w.iter()
            .zip(lo.iter().zip(hi))
            .map(|(&x, (&l, &h))| (x / lam).clamp(l, h))
            .collect()
    };
    let (mut a, mut b) = (1e-300f64.ln(), (1e300f64).ln());
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let s: f64 = eval(mid.exp()).iter().sum();
        if s > 1.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let mut out = eval((0.5 * (a + b)).exp());
    // spread the rounding residual over the coordinates strictly inside their bounds
    let resid = 1.0 - out.iter().sum::<f64>();
    let free: Vec<usize> = (0..out.len()).filter(|&g| out[g] > lo[g] && out[g] < hi[g]).collect();
    let mass: f64 = free.iter().map(|&g| out[g]).sum();
    if mass > 0.0 {
        for &g in &free {
            out[g] += resid * out[g] / mass;
        }
    } else if let Some(g) = (0..out.len()).max_by(|&x, &y| out[x].total_cmp(&out[y])) {
        out[g] += resid;
    }
    out
}

/// Pooled least squares of `y` on `(1, x, z)`: `(intercept, beta, gamma, ssr / (nT))`.
pub fn pooled_ols(data: &PanelDataset) -> Result<(f64, Vec<f64>, Vec<f64>, f64)> {
    let (q, p) = (data.q(), data.p());
    let d = 1 + q + p;
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    let mut row = vec![0.0; d];
    for i in 0..data.n() {
        for t in 0..data.periods() {
            row[0] = 1.0;
            row[1..1 + q].copy_from_slice(data.x(i, t));
            row[1 + q..].copy_from_slice(data.z(i, t));
            let y = data.y(i, t);
            for k in 0..d {
                b[k] += row[k] * y;
                for l in 0..d {
                    a[(k, l)] += row[k] * row[l];
                }
            }
        }
    }
    let (sol, _) = solve_spd(&a, &b).ok_or_else(|| Error::Numerical("pooled regression is singular".into()))?;
    let mu = sol[0];
    let beta: Vec<f64> = sol.iter().skip(1).take(q).copied().collect();
    let gamma: Vec<f64> = sol.iter().skip(1 + q).copied().collect();
    let theta = ComponentParams::new(mu, 1.0, beta.clone());
    let mut ssr = 0.0;
    for i in 0..data.n() {
        for t in 0..data.periods() {
            ssr += model::residual(data, i, t, &gamma, &theta).powi(2);
        }
    }
    Ok((mu, beta, gamma, ssr / (data.n() * data.periods()) as f64))
}

/// Penalty for plain estimation: `a_n = 1/sqrt(n)` anchored at the pooled residual variance.
pub fn estimation_penalty(data: &PanelDataset) -> Result<PenaltyConfig> {
    let (_, _, _, v) = pooled_ols(data)?;
    if !(v > 0.0) {
        return Err(Error::Data("outcome has zero residual variance".into()));
    }
    PenaltyConfig::new(1.0 / (data.n() as f64).sqrt(), vec![v], AnMode::SampleSize)
}

/// Penalty for likelihood-based criteria: `a_n = 1/n`, just enough to keep
/// the likelihood bounded.
pub fn criterion_penalty(data: &PanelDataset) -> Result<PenaltyConfig> {
    let base = estimation_penalty(data)?;
    base.with_an(1.0 / data.n() as f64, AnMode::SampleSize)
}

fn expand_anchors(penalty: &PenaltyConfig, m: usize) -> Result<Vec<f64>> {
    match penalty.sigma0_sq.len() {
        1 => Ok(vec![penalty.sigma0_sq[0]; m]),
        k if k == m => Ok(penalty.sigma0_sq.clone()),
        k => Err(Error::Dimension(format!("{k} variance anchors for {m} components"))),
    }
}

/// Residualized unit means and an average within-unit variance for seeding.
fn seed_summaries(data: &PanelDataset) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)> {
    let (_, beta, gamma, resid_var) = pooled_ols(data)?;
    let theta = ComponentParams::new(0.0, 1.0, beta.clone());
    let tt = data.periods();
    let mut means = Vec::with_capacity(data.n());
    let mut within = 0.0;
    for i in 0..data.n() {
        let r: Vec<f64> = (0..tt).map(|t| model::residual(data, i, t, &gamma, &theta)).collect();
        let m = r.iter().sum::<f64>() / tt as f64;
        if tt > 1 {
            within += r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (tt - 1) as f64;
        }
        means.push(m);
    }
    let within = if tt > 1 { within / data.n() as f64 } else { resid_var };
    let base = if within > 0.0 { within } else { resid_var.max(1e-8) };
    Ok((means, beta, gamma, base, resid_var))
}

fn starts_for(data: &PanelDataset, m: usize, cfg: &EMConfig, previous: Option<&MixtureParams>) -> Result<Vec<MixtureParams>> {
    let (means, beta, gamma, s2, _) = seed_summaries(data)?;
    let n = data.n();
    let mut starts = Vec::new();

    let mut sorted = means.clone();
    sorted.sort_by(f64::total_cmp);
    let quantile = (0..m)
        .map(|j| {
            let lo = j * n / m;
            let hi = ((j + 1) * n / m).max(lo + 1).min(n);
            let chunk = &sorted[lo.min(n - 1)..hi];
            let mu = chunk.iter().sum::<f64>() / chunk.len() as f64;
            ComponentParams::new(mu, s2, beta.clone())
        })
        .collect();
    starts.push(MixtureParams::new(vec![1.0 / m as f64; m], quantile, gamma.clone()));

    if let Some(prev) = previous.filter(|p| p.m() + 1 == m) {
        for h in 0..prev.m() {
            let c = &prev.components[h];
            let d = 0.5 * c.sigma();
            let mut comps = prev.components.clone();
            comps[h] = ComponentParams::new(c.mu - d, c.sigma_sq, c.beta.clone());
            comps.insert(h + 1, ComponentParams::new(c.mu + d, c.sigma_sq, c.beta.clone()));
            let mut alpha = prev.alpha.clone();
            alpha[h] *= 0.5;
            alpha.insert(h + 1, alpha[h]);
            starts.push(MixtureParams::new(alpha, comps, prev.gamma.clone()));
        }
    }

    let mut k = 0u64;
    while starts.len() < SCREEN_FACTOR * cfg.n_starts.max(1) {
        let mut r = rng::stream(cfg.seed, 1000 + k);
        k += 1;
        let raw: Vec<f64> = (0..m).map(|_| r.gen_range(0.2..1.0)).collect();
        let tot: f64 = raw.iter().sum();
        let comps = (0..m)
            .map(|_| {
                let mu = sorted[r.gen_range(0..n)];
                let b = beta
                    .iter()
                    .map(|&v| {
                        let e: f64 = StandardNormal.sample(&mut r);
                        v + 0.1 * e * (1.0 + v.abs())
                    })
                    .collect();
                let f: f64 = r.gen_range(0.1..1.2);
                ComponentParams::new(mu, s2 * f * f, b)
            })
            .collect();
        starts.push(MixtureParams::new(normalize(raw.iter().map(|a| a / tot).collect()), comps, gamma.clone()));
    }
    Ok(starts)
}

const SCREEN_FACTOR: usize = 10;
const SCREEN_ITERS: usize = 30;

/// Runs a short EM from every candidate and keeps the `keep` best end points.
fn screen(prob: &Problem, candidates: Vec<MixtureParams>, keep: usize, tol: f64) -> Vec<MixtureParams> {
    if candidates.len() <= keep {
        return candidates;
    }
    let mut short: Vec<(usize, FitResult)> = candidates
        .into_par_iter()
        .map(|s| prob.run(State { params: s, tau: None }, SCREEN_ITERS, tol, true))
        .enumerate()
        .collect();
    short.retain(|(_, f)| f.penalized_loglik.is_finite());
    short.sort_by(|a, b| b.1.penalized_loglik.total_cmp(&a.1.penalized_loglik).then(a.0.cmp(&b.0)));
    short.into_iter().take(keep).map(|(_, f)| f.params).collect()
}

fn normalize(mut alpha: Vec<f64>) -> Vec<f64> {
    let k = alpha.len();
    let head: f64 = alpha[..k - 1].iter().sum();
    alpha[k - 1] = (1.0 - head).max(0.0);
    alpha
}

fn best_of(mut fits: Vec<FitResult>) -> Result<FitResult> {
    let mut best: Option<usize> = None;
    for (k, f) in fits.iter().enumerate() {
        if !f.penalized_loglik.is_finite() {
            continue;
        }
        best = match best {
            Some(b) if fits[b].penalized_loglik >= f.penalized_loglik => Some(b),
            _ => Some(k),
        };
    }
    let b = best.ok_or_else(|| Error::NonConvergence("no start produced a finite objective".into()))?;
    Ok(fits.swap_remove(b))
}

fn finalize(mut fit: FitResult) -> FitResult {
    let m = fit.params.m();
    let canon = canonicalize(&fit.params);
    if canon != fit.params {
        // carry the weight columns along with the components
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&fit.params.components[a], &fit.params.components[b]);
            x.mu.total_cmp(&y.mu).then(x.sigma_sq.total_cmp(&y.sigma_sq)).then_with(|| {
                x.beta
                    .iter()
                    .zip(&y.beta)
                    .map(|(u, v)| u.total_cmp(v))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        let n = fit.weights.len() / m;
        let mut w = vec![0.0; fit.weights.len()];
        for i in 0..n {
            for (k, &j) in order.iter().enumerate() {
                w[i * m + k] = fit.weights[i * m + j];
            }
        }
        fit.weights = w;
        fit.params = canon;
    }
    fit
}

fn unrestricted_problem<'a>(data: &'a PanelDataset, m: usize, penalty: &PenaltyConfig) -> Result<Problem<'a>> {
    Ok(Problem {
        data,
        anchors: expand_anchors(penalty, m)?,
        a_n: penalty.a_n,
        mu_bounds: None,
        alpha: AlphaRule::Free { lo: 0.0, hi: 1.0 },
    })
}

/// One unrestricted M-step from posterior `weights` at the current iterate.
pub fn m_step(
    data: &PanelDataset,
    weights: &DMatrix<f64>,
    current: &MixtureParams,
    penalty: &PenaltyConfig,
) -> Result<MixtureParams> {
    current.check_against(data)?;
    if weights.nrows() != data.n() || weights.ncols() != current.m() {
        return Err(Error::Dimension("weight matrix shape does not match data and model".into()));
    }
    let prob = unrestricted_problem(data, current.m(), penalty)?;
    let flat: Vec<f64> = weights.transpose().iter().copied().collect();
    let mut ridge = false;
    let next = prob.m_step(&flat, &State { params: current.clone(), tau: None }, &mut ridge);
    if ridge {
        warn!("weighted design was singular; a ridge was added");
    }
    Ok(next.params)
}

/// Unrestricted EM from a given start (no canonical reordering of the start).
pub fn fit_from(data: &PanelDataset, start: &MixtureParams, penalty: &PenaltyConfig, cfg: &EMConfig) -> Result<FitResult> {
    start.check_against(data)?;
    let prob = unrestricted_problem(data, start.m(), penalty)?;
    Ok(finalize(prob.run(State { params: start.clone(), tau: None }, cfg.max_iter, cfg.tol, true)))
}

/// One-component PMLE: joint least squares, then the penalized variance.
fn fit_single(data: &PanelDataset, penalty: &PenaltyConfig) -> Result<FitResult> {
    let (mu, beta, gamma, v) = pooled_ols(data)?;
    let nt = (data.n() * data.periods()) as f64;
    let s0 = expand_anchors(penalty, 1)?[0];
    let sigma_sq = (v * nt + 2.0 * penalty.a_n * s0) / (nt + 2.0 * penalty.a_n);
    if !(sigma_sq > 0.0) {
        return Err(Error::Degenerate("one-component variance is zero".into()));
    }
    let params = MixtureParams::new(vec![1.0], vec![ComponentParams::new(mu, sigma_sq, beta)], gamma);
    let loglik = model::loglik_unchecked(data, &params);
    let pen = pn_unchecked(sigma_sq, s0, penalty.a_n);
    Ok(FitResult {
        params,
        loglik,
        penalized_loglik: loglik + pen,
        penalty_value: pen,
        iterations: 0,
        converged: true,
        tau: None,
        ridge_used: false,
        constraint_binding: false,
        weights: vec![1.0; data.n()],
        trace: vec![loglik + pen],
    })
}

/// Penalized MLE with `m` components, best over several starts.
pub fn fit_pmle(data: &PanelDataset, m: usize, penalty: &PenaltyConfig, cfg: &EMConfig) -> Result<FitResult> {
    fit_pmle_with(data, m, penalty, cfg, None)
}

/// As [`fit_pmle`], additionally splitting each component of a fitted
/// `(m-1)`-component model into two starts.
pub fn fit_pmle_with(
    data: &PanelDataset,
    m: usize,
    penalty: &PenaltyConfig,
    cfg: &EMConfig,
    previous: Option<&MixtureParams>,
) -> Result<FitResult> {
    if m == 0 {
        return Err(Error::Domain("need at least one component".into()));
    }
    if m == 1 {
        return fit_single(data, penalty);
    }
    let prob = unrestricted_problem(data, m, penalty)?;
    let starts = screen(&prob, starts_for(data, m, cfg, previous)?, cfg.n_starts.max(1), cfg.tol);
    let fits: Vec<FitResult> = starts
        .into_par_iter()
        .map(|s| prob.run(State { params: s, tau: None }, cfg.max_iter, cfg.tol, true))
        .collect();
    let best = best_of(fits)?;
    if !best.converged {
        warn!("{m}-component fit stopped at max_iter without meeting the tolerance");
    }
    Ok(finalize(best))
}

/// PMLEs for `1..=m_max` components, each seeded by splitting the previous fit.
pub fn fit_sequence(data: &PanelDataset, m_max: usize, penalty: &PenaltyConfig, cfg: &EMConfig) -> Result<Vec<FitResult>> {
    let mut fits: Vec<FitResult> = Vec::with_capacity(m_max);
    for m in 1..=m_max {
        let prev = fits.last().map(|f| f.params.clone());
        fits.push(fit_pmle_with(data, m, penalty, cfg, prev.as_ref())?);
    }
    Ok(fits)
}

/// Mean intervals split at midpoints of adjacent null means; components `h`
/// and `h+1` of the alternative share interval `h` (0-based).
pub fn build_restriction(null_fit: &MixtureParams, h: usize, epsilon_alpha: f64) -> Result<RestrictionSpec> {
    null_fit.validate()?;
    let m0 = null_fit.m();
    if h >= m0 {
        return Err(Error::Dimension(format!("split index {h} out of range for {m0} components")));
    }
    let mu: Vec<f64> = null_fit.components.iter().map(|c| c.mu).collect();
    if mu.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Degenerate(format!(
            "null means {mu:?} are tied or unordered; the intervals are empty. Reduce M0"
        )));
    }
    let mut cuts = vec![f64::NEG_INFINITY];
    cuts.extend(mu.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cuts.push(f64::INFINITY);
    let mu_intervals = (0..m0).map(|j| (cuts[j], cuts[j + 1])).collect();
    Ok(RestrictionSpec { h, mu_intervals, tau0: None, alpha_floor: epsilon_alpha, null: null_fit.clone() })
}

/// Largest proportion floor under which the null-embedding start is feasible.
fn feasible_floor(spec: &RestrictionSpec) -> f64 {
    let null = &spec.null;
    let share = spec.tau0.map_or(0.5, |t| t.min(1.0 - t));
    let mut cap = null.alpha[spec.h] * share;
    for (j, &a) in null.alpha.iter().enumerate() {
        if j != spec.h {
            cap = cap.min(a);
        }
    }
    spec.alpha_floor.min(cap)
}

/// Null model with component `h` split into two copies carrying `tau`, `1 - tau` of its mass.
pub fn embed_null(null: &MixtureParams, h: usize, tau: f64) -> MixtureParams {
    let mut alpha = null.alpha.clone();
    let a = alpha[h];
    alpha[h] = a * tau;
    alpha.insert(h + 1, a - a * tau);
    let mut comps = null.components.clone();
    comps.insert(h + 1, comps[h].clone());
    MixtureParams::new(alpha, comps, null.gamma.clone())
}

fn restricted_starts(spec: &RestrictionSpec, tau: f64) -> Vec<MixtureParams> {
    let h = spec.h;
    let base = embed_null(&spec.null, h, tau);
    let (lo, hi) = spec.mu_intervals[h];
    let c = spec.null.components[h].clone();
    let mut out = vec![base.clone()];
    for d in [0.5, 1.0] {
        let mut s = base.clone();
        s.components[h].mu = (c.mu - d * c.sigma()).clamp(lo, hi);
        s.components[h + 1].mu = (c.mu + d * c.sigma()).clamp(lo, hi);
        out.push(s);
    }
    for (f1, f2) in [(0.5, 1.5), (1.5, 0.5)] {
        let mut s = base.clone();
        s.components[h].sigma_sq = c.sigma_sq * f1;
        s.components[h + 1].sigma_sq = c.sigma_sq * f2;
        out.push(s);
    }
    out
}

/// Restricted penalized MLE with `M0 + 1` components.
///
/// With `tau0` set, the split pair keeps within-pair proportion `tau0` and the
/// objective includes `p(tau0)`; otherwise all proportions are free within the
/// floor. Means stay in their intervals. Extra starts are projected onto the
/// restricted space before use.
pub fn fit_restricted(
    data: &PanelDataset,
    spec: &RestrictionSpec,
    penalty: &PenaltyConfig,
    cfg: &EMConfig,
) -> Result<FitResult> {
    fit_restricted_with(data, spec, penalty, cfg, &[])
}

pub fn fit_restricted_with(
    data: &PanelDataset,
    spec: &RestrictionSpec,
    penalty: &PenaltyConfig,
    cfg: &EMConfig,
    extra_starts: &[MixtureParams],
) -> Result<FitResult> {
    spec.null.check_against(data)?;
    let m0 = spec.null.m();
    if spec.mu_intervals.len() != m0 || spec.mu_intervals.iter().any(|&(lo, hi)| !(lo < hi)) {
        return Err(Error::Degenerate("restriction has empty or missing mean intervals".into()));
    }
    if let Some(t) = spec.tau0 {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Domain(format!("tau0 must lie in (0,1), got {t}")));
        }
    }
    let null_anchors = expand_anchors(penalty, m0)?;
    let anchors: Vec<f64> = (0..m0 + 1).map(|j| null_anchors[spec.null_index(j)]).collect();
    let floor = feasible_floor(spec);
    if floor < spec.alpha_floor {
        debug!("proportion floor lowered from {} to {floor} to keep the null embedding feasible", spec.alpha_floor);
    }
    let bounds = spec.alt_bounds();
    let (alpha, tau) = match spec.tau0 {
        Some(t) => (AlphaRule::Pair { h: spec.h, tau: TauRule::Fixed(t), lo: floor, hi: 1.0 - floor }, Some(t)),
        None => (AlphaRule::Free { lo: floor, hi: 1.0 - floor }, None),
    };
    let prob = Problem { data, anchors, a_n: penalty.a_n, mu_bounds: Some(bounds.clone()), alpha };

    let mut starts = restricted_starts(spec, tau.unwrap_or(0.5));
    for s in extra_starts {
        if s.m() == m0 + 1 && s.check_against(data).is_ok() {
            starts.push(project_start(s, &bounds, &prob.alpha));
        }
    }
    let fits: Vec<FitResult> = starts
        .into_par_iter()
        .map(|s| prob.run(State { params: s, tau }, cfg.max_iter, cfg.tol, true))
        .collect();
    best_of(fits)
}

fn project_start(s: &MixtureParams, bounds: &[(f64, f64)], rule: &AlphaRule) -> MixtureParams {
    let mut p = s.clone();
    for (c, &(lo, hi)) in p.components.iter_mut().zip(bounds) {
        c.mu = c.mu.clamp(lo, hi);
    }
    let m = p.m();
    p.alpha = match *rule {
        AlphaRule::Free { lo, hi } => waterfill(&s.alpha, &vec![lo; m], &vec![hi; m]),
        AlphaRule::Pair { h, tau: TauRule::Fixed(t), lo, hi } => {
            let mut g: Vec<f64> = s.alpha.clone();
            let pair = g[h] + g[h + 1];
            g.remove(h + 1);
            g[h] = pair;
            let k = g.len();
            let mut glo = vec![lo; k];
            let mut ghi = vec![hi; k];
            glo[h] = lo / t.min(1.0 - t);
            ghi[h] = (hi / t.max(1.0 - t)).min(1.0);
            let g = waterfill(&g, &glo, &ghi);
            let mut a = g.clone();
            a[h] = g[h] * t;
            a.insert(h + 1, g[h] - g[h] * t);
            a
        }
        AlphaRule::Pair { .. } => s.alpha.clone(),
    };
    p
}

/// `K` rounds of EM from a fixed-`tau0` restricted fit with `tau` updated under
/// `p(tau)` and no interval or proportion restrictions. Returns the final fit
/// and the `tau` value after each round.
pub fn em_k_steps(
    data: &PanelDataset,
    start: &FitResult,
    spec: &RestrictionSpec,
    k: usize,
    penalty: &PenaltyConfig,
) -> Result<(FitResult, Vec<f64>)> {
    let m0 = spec.null.m();
    if start.params.m() != m0 + 1 {
        return Err(Error::Dimension("start must have M0 + 1 components".into()));
    }
    let tau0 = start
        .tau
        .or(spec.tau0)
        .ok_or_else(|| Error::Domain("start fit carries no within-pair proportion".into()))?;
    let null_anchors = expand_anchors(penalty, m0)?;
    let anchors: Vec<f64> = (0..m0 + 1).map(|j| null_anchors[spec.null_index(j)]).collect();
    let prob = Problem {
        data,
        anchors,
        a_n: penalty.a_n,
        mu_bounds: None,
        alpha: AlphaRule::Pair { h: spec.h, tau: TauRule::Penalized, lo: 0.0, hi: 1.0 },
    };
    let mut taus = Vec::with_capacity(k);
    let mut state = State { params: start.params.clone(), tau: Some(tau0) };
    let mut ridge = false;
    let mut e = e_step_flat(data, &state.params);
    let mut trace = vec![prob.objective(&state, e.loglik).0];
    for _ in 0..k {
        state = prob.m_step(&e.weights, &state, &mut ridge);
        e = e_step_flat(data, &state.params);
        trace.push(prob.objective(&state, e.loglik).0);
        taus.push(state.tau.unwrap_or(0.5));
    }
    let (obj, pen) = prob.objective(&state, e.loglik);
    Ok((
        FitResult {
            tau: state.tau,
            params: state.params,
            loglik: e.loglik,
            penalized_loglik: obj,
            penalty_value: pen,
            iterations: k,
            converged: true,
            ridge_used: ridge || start.ridge_used,
            constraint_binding: false,
            weights: e.weights,
            trace,
        },
        taus,
    ))
}
