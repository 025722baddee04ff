//! Hermite-polynomial scores of the reparameterized mixture and the empirical
//! information matrix with its `eta` / `lambda` partition.
//!
//! For a component with residuals `u_t` and variance `s2`, the first
//! derivatives of `log f` are sums over periods of
//! `d_t = (H1*, H2*, H1* x_t)` and the second derivatives of `f / f` are
//!
//! `sum_t dd_t[a][b] + (sum_t d_t[a]) (sum_t d_t[b]) - sum_t d_t[a] d_t[b]`
//!
//! with `dd_t` built from `2 H2*`, `3 H3*` and `6 H4*`. The `lambda` column for
//! a square `lambda_a^2` carries half of the second derivative and a cross
//! product `lambda_a lambda_b` carries all of it.

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{joint_logs, log_sum_exp, residual, ComponentParams, MixtureParams, PanelDataset};

/// Hermite polynomial of order `j` (1 to 4).
pub fn hermite(j: usize, t: f64) -> f64 {
    match j {
        1 => t,
        2 => t * t - 1.0,
        3 => t * t * t - 3.0 * t,
        4 => {
            let t2 = t * t;
            t2 * t2 - 6.0 * t2 + 3.0
        }
        _ => panic!("hermite order must be 1..=4, got {j}"),
    }
}

/// `H^b(r / s) / (b! s^b)`.
pub fn hermite_scaled(b: usize, residual: f64, sigma: f64) -> f64 {
    assert!(sigma > 0.0, "sigma must be positive");
    let fact = [1.0, 1.0, 2.0, 6.0, 24.0][b.min(4)];
    hermite(b, residual / sigma) / (fact * sigma.powi(b as i32))
}

/// Number of `lambda` columns per split: `(q+2)(q+3)/2`.
pub fn lambda_dim(q: usize) -> usize {
    (q + 2) * (q + 3) / 2
}

/// Parameter-index pairs of the `lambda` score columns, indices over
/// `(mu, sigma^2, beta_1, .., beta_q)`. Order: `mu mu`, `mu s`, `s s`,
/// `mu beta_k`, `s beta_k`, `beta_k beta_k`, then `beta_k beta_l` for `k < l`.
pub fn lambda_pairs(q: usize) -> Vec<(usize, usize)> {
    let mut v = vec![(0, 0), (0, 1), (1, 1)];
    v.extend((0..q).map(|k| (0, k + 2)));
    v.extend((0..q).map(|k| (1, k + 2)));
    v.extend((0..q).map(|k| (k + 2, k + 2)));
    for k in 0..q {
        for l in k + 1..q {
            v.push((k + 2, l + 2));
        }
    }
    v
}

#[derive(Debug, Clone)]
pub struct ScoreBundle {
    pub n: usize,
    pub m0: usize,
    pub q: usize,
    pub p: usize,
    pub d_eta: usize,
    pub d_lam: usize,
    pub s_eta: DMatrix<f64>,
    pub s_lambda: DMatrix<f64>,
}

impl ScoreBundle {
    /// Column range of split `h` (0-based) inside `s_lambda`.
    pub fn block_range(&self, h: usize) -> std::ops::Range<usize> {
        h * self.d_lam..(h + 1) * self.d_lam
    }

    /// `[s_eta | s_lambda]`.
    pub fn full(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.d_eta + self.s_lambda.ncols());
        m.columns_mut(0, self.d_eta).copy_from(&self.s_eta);
        m.columns_mut(self.d_eta, self.s_lambda.ncols()).copy_from(&self.s_lambda);
        m
    }
}

#[derive(Debug, Clone)]
pub struct InformationBlocks {
    pub d_eta: usize,
    pub d_lam: usize,
    pub m0: usize,
    pub i_full: DMatrix<f64>,
    pub i_eta: DMatrix<f64>,
    pub i_lambda_eta: DMatrix<f64>,
    pub i_lambda_lambda: DMatrix<f64>,
    pub i_schur: DMatrix<f64>,
    pub per_h: Vec<DMatrix<f64>>,
}

/// Per-period derivative factors of one component at one unit.
struct PeriodTerms {
    // d[t][a] for a over (mu, s, beta_1..beta_q)
    d: Vec<Vec<f64>>,
    h2: Vec<f64>,
    h3: Vec<f64>,
    h4: Vec<f64>,
    h1: Vec<f64>,
}

fn period_terms(data: &PanelDataset, i: usize, gamma: &[f64], theta: &ComponentParams) -> PeriodTerms {
    let tt = data.periods();
    let q = data.q();
    let s = theta.sigma();
    let mut pt = PeriodTerms {
        d: Vec::with_capacity(tt),
        h1: Vec::with_capacity(tt),
        h2: Vec::with_capacity(tt),
        h3: Vec::with_capacity(tt),
        h4: Vec::with_capacity(tt),
    };
    for t in 0..tt {
        let r = residual(data, i, t, gamma, theta);
        let h1 = hermite_scaled(1, r, s);
        let h2 = hermite_scaled(2, r, s);
        let mut d = Vec::with_capacity(q + 2);
        d.push(h1);
        d.push(h2);
        d.extend(data.x(i, t).iter().map(|x| h1 * x));
        pt.d.push(d);
        pt.h1.push(h1);
        pt.h2.push(h2);
        pt.h3.push(hermite_scaled(3, r, s));
        pt.h4.push(hermite_scaled(4, r, s));
    }
    pt
}

/// Unweighted `lambda` block of one unit for one component.
fn lambda_block(data: &PanelDataset, i: usize, pt: &PeriodTerms, pairs: &[(usize, usize)], out: &mut [f64]) {
    let tt = data.periods();
    let k = pt.d[0].len();
    let mut sums = vec![0.0; k];
    for d in &pt.d {
        for a in 0..k {
            sums[a] += d[a];
        }
    }
    for (c, &(a, b)) in pairs.iter().enumerate() {
        let mut within = 0.0;
        let mut diag_prod = 0.0;
        for t in 0..tt {
            let coef = match (a, b) {
                (0, 0) => 2.0 * pt.h2[t],
                (0, 1) => 3.0 * pt.h3[t],
                (1, 1) => 6.0 * pt.h4[t],
                (0, l) => 2.0 * pt.h2[t] * data.x(i, t)[l - 2],
                (1, l) => 3.0 * pt.h3[t] * data.x(i, t)[l - 2],
                (k1, l) => 2.0 * pt.h2[t] * data.x(i, t)[k1 - 2] * data.x(i, t)[l - 2],
            };
            within += coef;
            diag_prod += pt.d[t][a] * pt.d[t][b];
        }
        let second = within + sums[a] * sums[b] - diag_prod;
        out[c] = if a == b { 0.5 * second } else { second };
    }
}

/// Scores for the homogeneity test at the one-component fit `(gamma, theta)`.
pub fn score_homogeneity(data: &PanelDataset, gamma: &[f64], theta: &ComponentParams) -> Result<ScoreBundle> {
    let params = MixtureParams::new(vec![1.0], vec![theta.clone()], gamma.to_vec());
    params.check_against(data)?;
    build(data, &params)
}

/// Scores for testing `M0` against `M0 + 1` at the `M0`-component fit.
pub fn score_general(data: &PanelDataset, null_fit: &MixtureParams) -> Result<ScoreBundle> {
    null_fit.check_against(data)?;
    if null_fit
        .components
        .windows(2)
        .any(|w| w[0].mu > w[1].mu)
    {
        return Err(Error::Domain("null fit must be in canonical (ascending mean) order".into()));
    }
    build(data, null_fit)
}

fn build(data: &PanelDataset, fit: &MixtureParams) -> Result<ScoreBundle> {
    let n = data.n();
    let (q, p, m0) = (data.q(), data.p(), fit.m());
    let d_lam = lambda_dim(q);
    let d_eta = if m0 == 1 { q + p + 2 } else { (m0 - 1) + m0 * (q + 2) + p };
    let pairs = lambda_pairs(q);
    let width = d_eta + m0 * d_lam;

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; width];
            let mut logs = vec![0.0; m0];
            joint_logs(data, i, fit, &mut logs);
            let lmix = log_sum_exp(&logs);
            let w: Vec<f64> = logs.iter().map(|l| (l - lmix).exp()).collect();
            let mut col = 0;
            if m0 > 1 {
                let mut comp_ratio = vec![0.0; m0];
                for j in 0..m0 {
                    let lf = crate::model::unit_component_loglik(data, i, &fit.gamma, &fit.components[j]);
                    comp_ratio[j] = (lf - lmix).exp();
                }
                for j in 0..m0 - 1 {
                    row[col] = comp_ratio[j] - comp_ratio[m0 - 1];
                    col += 1;
                }
            }
            let mut gamma_score = vec![0.0; p];
            for j in 0..m0 {
                let pt = period_terms(data, i, &fit.gamma, &fit.components[j]);
                let wj = w[j];
                for a in 0..q + 2 {
                    row[col + a] = wj * pt.d.iter().map(|d| d[a]).sum::<f64>();
                }
                col += q + 2;
                for (t, h1) in pt.h1.iter().enumerate() {
                    for (g, zv) in gamma_score.iter_mut().zip(data.z(i, t)) {
                        *g += wj * h1 * zv;
                    }
                }
                let off = d_eta + j * d_lam;
                lambda_block(data, i, &pt, &pairs, &mut row[off..off + d_lam]);
                for v in &mut row[off..off + d_lam] {
                    *v *= wj;
                }
            }
            row[col..col + p].copy_from_slice(&gamma_score);
            row
        })
        .collect();

    let mut s_eta = DMatrix::zeros(n, d_eta);
    let mut s_lambda = DMatrix::zeros(n, m0 * d_lam);
    for (i, row) in rows.iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite score for unit {i}")));
        }
        for c in 0..d_eta {
            s_eta[(i, c)] = row[c];
        }
        for c in 0..m0 * d_lam {
            s_lambda[(i, c)] = row[d_eta + c];
        }
    }
    Ok(ScoreBundle { n, m0, q, p, d_eta, d_lam, s_eta, s_lambda })
}

/// Empirical information `(1/n) sum s s'` and the Schur complement of the
/// `lambda` block given `eta`.
pub fn information(bundle: &ScoreBundle) -> Result<InformationBlocks> {
    let n = bundle.n;
    if n < 2 {
        return Err(Error::Domain("information needs at least two units".into()));
    }
    let full = bundle.full();
    let width = full.ncols();
    if n <= width {
        warn!("information matrix from {n} units for {width} score columns");
    }
    let i_full = linalg::symmetrize(&(full.transpose() * &full / n as f64));
    let (de, dl) = (bundle.d_eta, bundle.m0 * bundle.d_lam);
    let i_eta = i_full.view((0, 0), (de, de)).into_owned();
    let i_lambda_eta = i_full.view((de, 0), (dl, de)).into_owned();
    let i_lambda_lambda = i_full.view((de, de), (dl, dl)).into_owned();

    // Schur complement on the correlation scale, as the Gram matrix of the
    // lambda scores' residuals after projection on the eta scores.
    let (scale, corr) = linalg::standardize(&i_full);
    let floor = 1e-10 * corr.view((0, 0), (de, de)).trace().max(0.0) / de.max(1) as f64;
    let root_n = (n as f64).sqrt();
    let unit = |k: usize| if scale[k] > 0.0 { 1.0 / (scale[k] * root_n) } else { 0.0 };
    let s_eta = DMatrix::from_fn(n, de, |i, k| full[(i, k)] * unit(k));
    let s_lam = DMatrix::from_fn(n, dl, |i, a| full[(i, de + a)] * unit(de + a));
    let mut resid = s_lam.clone();
    if de > 0 {
        let svd = s_eta.svd(true, false);
        let u = svd.u.expect("left singular vectors");
        for (k, &sv) in svd.singular_values.iter().enumerate() {
            if sv * sv > floor {
                let col = u.column(k);
                let coef = col.transpose() * &s_lam;
                resid -= col * coef;
            }
        }
    }
    let c_schur = resid.transpose() * &resid;
    let mut i_schur = DMatrix::zeros(dl, dl);
    for a in 0..dl {
        for b in 0..dl {
            i_schur[(a, b)] = scale[de + a] * c_schur[(a, b)] * scale[de + b];
        }
    }
    let i_schur = linalg::symmetrize(&i_schur);
    let per_h = (0..bundle.m0)
        .map(|h| {
            let r = bundle.block_range(h);
            i_schur.view((r.start, r.start), (bundle.d_lam, bundle.d_lam)).into_owned()
        })
        .collect();
    Ok(InformationBlocks {
        d_eta: de,
        d_lam: bundle.d_lam,
        m0: bundle.m0,
        i_full,
        i_eta,
        i_lambda_eta,
        i_lambda_lambda,
        i_schur,
        per_h,
    })
}
