//! Monte Carlo simulation of the limiting null distribution of the test
//! statistics: Gaussian draws projected onto the cone of outer products.

use std::io::{BufRead, Write};

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pinv_sym, psd_sqrt, standardize, symmetrize};
use crate::rng;
use crate::scores::{lambda_pairs, InformationBlocks};

/// Unique entries of `l l'`: all squares, then upper-triangle products row by row.
pub fn vmap(lambda: &[f64]) -> Vec<f64> {
    let d = lambda.len();
    let mut v: Vec<f64> = lambda.iter().map(|x| x * x).collect();
    for k in 0..d {
        for l in k + 1..d {
            v.push(lambda[k] * lambda[l]);
        }
    }
    v
}

fn vmap_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = (0..d).map(|k| (k, k)).collect();
    for k in 0..d {
        for l in k + 1..d {
            v.push((k, l));
        }
    }
    v
}

/// Position in the score layout of each `vmap` entry.
pub fn score_to_vmap(q: usize) -> Vec<usize> {
    let score = lambda_pairs(q);
    vmap_pairs(q + 2).iter().map(|p| score.iter().position(|s| s == p).expect("same pair set")).collect()
}

fn dim_from_width(m: usize) -> Option<usize> {
    let d = ((((8 * m + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (d * (d + 1) / 2 == m && d >= 1).then_some(d)
}

/// Direction search for the projection onto `{c vmap(u) : c >= 0}` in the
/// `I` norm. Maximizes `(v'IG) / sqrt(v'Iv)` over unit `u`.
struct Projector {
    d: usize,
    pairs: Vec<(usize, usize)>,
    random: Vec<DVector<f64>>,
    grid: Vec<DVector<f64>>,
}

const RANDOM_DIRECTIONS: usize = 32;
const REFINED_STARTS: usize = 4;

impl Projector {
    fn new(d: usize) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(0x636f_6e65);
        let random = (0..RANDOM_DIRECTIONS)
            .map(|_| {
                let u: DVector<f64> = DVector::from_iterator(d, (0..d).map(|_| { let e: f64 = StandardNormal.sample(&mut r); e }));
                let n = u.norm();
                u / n
            })
            .collect();
        let grid = if d == 2 {
            (0..180)
                .map(|k| {
                    let a = (k as f64).to_radians();
                    DVector::from_vec(vec![a.cos(), a.sin()])
                })
                .collect()
        } else {
            Vec::new()
        };
        Self { d, pairs: vmap_pairs(d), random, grid }
    }

    fn v(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.pairs.len(), self.pairs.iter().map(|&(k, l)| u[k] * u[l]))
    }

    /// Matrix form `W` with `u'Wu = w . vmap(u)`.
    fn matrix_form(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.d, self.d);
        for (c, &(k, l)) in self.pairs.iter().enumerate() {
            if k == l {
                m[(k, k)] = w[c];
            } else {
                m[(k, l)] = 0.5 * w[c];
                m[(l, k)] = 0.5 * w[c];
            }
        }
        m
    }

    /// Objective `a / sqrt(b)` and its gradient in `u`.
    fn eval(&self, u: &DVector<f64>, w: &DVector<f64>, i: &DMatrix<f64>, grad: bool) -> (f64, DVector<f64>) {
        let v = self.v(u);
        let a = w.dot(&v);
        let iv = i * &v;
        let b = v.dot(&iv);
        if !(b > 1e-300) {
            return (0.0, DVector::zeros(self.d));
        }
        let sb = b.sqrt();
        let h = a / sb;
        if !grad {
            return (h, DVector::zeros(self.d));
        }
        let mut ga = DVector::zeros(self.d);
        let mut gb = DVector::zeros(self.d);
        for (c, &(k, l)) in self.pairs.iter().enumerate() {
            if k == l {
                ga[k] += 2.0 * u[k] * w[c];
                gb[k] += 2.0 * 2.0 * u[k] * iv[c];
            } else {
                ga[k] += u[l] * w[c];
                ga[l] += u[k] * w[c];
                gb[k] += 2.0 * u[l] * iv[c];
                gb[l] += 2.0 * u[k] * iv[c];
            }
        }
        (h, ga / sb - gb * (a / (2.0 * b * sb)))
    }

    fn ascend(&self, mut u: DVector<f64>, w: &DVector<f64>, i: &DMatrix<f64>) -> (f64, DVector<f64>) {
        let (mut h, mut g) = self.eval(&u, w, i, true);
        let mut step = 1.0;
        for _ in 0..2000 {
            let gn = g.norm();
            if gn <= 1e-14 * (1.0 + h.abs()) {
                break;
            }
            let mut moved = false;
            while step > 1e-18 {
                let cand = &u + &g * (step / gn);
                let cand = &cand / cand.norm();
                let (hc, gc) = self.eval(&cand, w, i, true);
                if hc > h {
                    let gain = hc - h;
                    u = cand;
                    h = hc;
                    g = gc;
                    step = (step * 2.0).min(1.0);
                    moved = gain > 1e-16 * (1.0 + h.abs());
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        (h, u)
    }

    fn solve(&self, g: &DVector<f64>, i: &DMatrix<f64>) -> (DVector<f64>, f64) {
        let w = i * g;
        let mut seeds: Vec<DVector<f64>> = Vec::with_capacity(self.random.len() + self.grid.len() + 2);
        for form in [self.matrix_form(&w), self.matrix_form(g)] {
            let eig = SymmetricEigen::new(form);
            let top = eig.eigenvalues.imax();
            seeds.push(eig.eigenvectors.column(top).into_owned());
        }
        seeds.extend(self.random.iter().cloned());
        seeds.extend(self.grid.iter().cloned());
        let mut scored: Vec<(f64, usize)> =
            seeds.iter().enumerate().map(|(k, u)| (self.eval(u, &w, i, false).0, k)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut best = (f64::NEG_INFINITY, seeds[0].clone());
        for &(_, k) in scored.iter().take(REFINED_STARTS) {
            let (h, u) = self.ascend(seeds[k].clone(), &w, i);
            if h > best.0 {
                best = (h, u);
            }
        }
        let t = if best.0 > 0.0 {
            let v = self.v(&best.1);
            let s = w.dot(&v) / v.dot(&(i * &v));
            v * s.max(0.0)
        } else {
            DVector::zeros(g.len())
        };
        let diff = &t - g;
        let r = diff.dot(&(i * &diff)).max(0.0);
        (t, r)
    }
}

/// Projection of `g` onto the cone `{c vmap(u) : c >= 0, |u| = 1}` in the
/// norm induced by `i`. Both are in `vmap` order. Returns the projection and
/// the attained distance `(t-g)'I(t-g)`.
pub fn project_cone(g: &[f64], i: &DMatrix<f64>, d: usize) -> Result<(Vec<f64>, f64)> {
    let m = d * (d + 1) / 2;
    if d == 0 || g.len() != m || i.nrows() != m || i.ncols() != m {
        return Err(Error::Dimension(format!("cone of dimension {d} needs a length-{m} vector and {m}x{m} matrix")));
    }
    if g.iter().chain(i.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite input to the cone projection".into()));
    }
    let sym = symmetrize(i);
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.max().max(0.0);
    let i_use = if eig.eigenvalues.min() < -1e-12 * max.max(1.0) {
        warn!("weight matrix of the cone projection is not PSD; clipping negative eigenvalues");
        let lam = eig.eigenvalues.map(|l| l.max(0.0));
        &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose()
    } else {
        sym
    };
    let (t, r) = Projector::new(d).solve(&DVector::from_column_slice(g), &i_use);
    Ok((t.iter().copied().collect(), r))
}

/// Quantiles reported with every distribution.
pub const REPORT_LEVELS: [f64; 3] = [0.90, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullDistribution {
    /// Sorted draws of the limiting statistic.
    pub samples: Vec<f64>,
    pub n_draws: usize,
    pub m0: usize,
    /// `(quantile level, critical value)` at 0.90, 0.95 and 0.99.
    pub levels: Vec<(f64, f64)>,
    pub seed: u64,
    /// Draws whose projection failed the complementarity check.
    pub complementarity_failures: usize,
}

impl NullDistribution {
    pub fn from_samples(mut samples: Vec<f64>, m0: usize, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Domain("null distribution needs at least one draw".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite null draw".into()));
        }
        samples.sort_by(f64::total_cmp);
        let mut dist = Self { n_draws: samples.len(), samples, m0, levels: Vec::new(), seed, complementarity_failures: 0 };
        dist.levels = REPORT_LEVELS.iter().map(|&l| (l, dist.quantile(l))).collect();
        Ok(dist)
    }

    fn quantile(&self, level: f64) -> f64 {
        let n = self.samples.len();
        let k = ((level * n as f64).ceil() as usize).clamp(1, n);
        self.samples[k - 1]
    }

    /// Right-continuous inverse of the empirical CDF at `level`.
    pub fn critical_value(&self, level: f64) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Domain(format!("quantile level must lie in (0,1), got {level}")));
        }
        Ok(self.quantile(level))
    }

    /// `(1 + #{draws >= stat}) / (n_draws + 1)`.
    pub fn p_value(&self, stat: f64) -> f64 {
        let below = self.samples.partition_point(|&s| s < stat);
        let k = self.samples.len() - below;
        ((k + 1) as f64 / (self.samples.len() + 1) as f64).min(1.0)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "draw")?;
        for s in &self.samples {
            writeln!(w, "{s:e}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, m0: usize, seed: u64) -> Result<Self> {
        let mut samples = Vec::new();
        for (k, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Data(e.to_string()))?;
            let line = line.trim();
            if k == 0 && line == "draw" || line.is_empty() {
                continue;
            }
            samples.push(line.parse::<f64>().map_err(|e| Error::Data(format!("line {}: {e}", k + 1)))?);
        }
        Self::from_samples(samples, m0, seed)
    }
}

struct Block {
    /// Score-layout column of each vmap entry, offset into the joint vector.
    cols: Vec<usize>,
    info: DMatrix<f64>,
    /// `(I^h)^{-1}` through the standardized pseudo-inverse.
    inv: DMatrix<f64>,
}

/// Simulates `n_draws` draws of `max_h (t^h)' I^h t^h` from the information at the null fit.
pub fn simulate_null(info: &InformationBlocks, n_draws: usize, seed: u64) -> Result<NullDistribution> {
    if n_draws == 0 {
        return Err(Error::Domain("n_draws must be positive".into()));
    }
    let d_lam = info.d_lam;
    let d = dim_from_width(d_lam).ok_or_else(|| Error::Dimension(format!("{d_lam} is not a triangular number")))?;
    let q = d - 2;
    let width = info.m0 * d_lam;
    if info.i_schur.nrows() != width || info.per_h.len() != info.m0 {
        return Err(Error::Dimension("information blocks do not match M0".into()));
    }
    if info.i_schur.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("information matrix has non-finite entries; use a larger sample".into()));
    }

    let (scale, corr) = standardize(&info.i_schur);
    let (root, rel_min) = psd_sqrt(&corr, 1e-12);
    if rel_min < -1e-6 {
        return Err(Error::Numerical(format!(
            "Schur complement is not positive semidefinite (relative eigenvalue {rel_min:.3e}); use a larger sample"
        )));
    }
    if rel_min < 0.0 {
        warn!("clipped negative eigenvalues of the Schur complement (relative {rel_min:.3e})");
    }
    let root = DMatrix::from_diagonal(&scale) * root;

    let perm = score_to_vmap(q);
    let blocks: Vec<Block> = (0..info.m0)
        .map(|h| {
            let cols: Vec<usize> = perm.iter().map(|&c| h * d_lam + c).collect();
            let ih = DMatrix::from_fn(d_lam, d_lam, |a, b| info.per_h[h][(perm[a], perm[b])]);
            let (s, c) = standardize(&ih);
            let cinv = pinv_sym(&c, 1e-12 * SymmetricEigen::new(c.clone()).eigenvalues.max().max(0.0));
            let sinv = s.map(|v| if v > 0.0 { 1.0 / v } else { 0.0 });
            let inv = DMatrix::from_diagonal(&sinv) * cinv * DMatrix::from_diagonal(&sinv);
            Block { cols, info: symmetrize(&ih), inv }
        })
        .collect();
    let projector = Projector::new(d);

    let draws: Vec<(f64, bool)> = (0..n_draws)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, k as u64);
            let z = DVector::from_iterator(width, (0..width).map(|_| StandardNormal.sample(&mut r)));
            let s = &root * z;
            let mut best = 0.0f64;
            let mut ok = true;
            for b in &blocks {
                let sh = DVector::from_iterator(d_lam, b.cols.iter().map(|&c| s[c]));
                let g = &b.inv * sh;
                let (t, rmin) = projector.solve(&g, &b.info);
                let tit = t.dot(&(&b.info * &t));
                let gig = g.dot(&(&b.info * &g));
                ok &= (tit - (gig - rmin)).abs() <= 1e-6 * (1.0 + gig.abs());
                best = best.max(tit);
            }
            (best, ok)
        })
        .collect();
    let failures = draws.iter().filter(|d| !d.1).count();
    if failures > 0 {
        warn!("{failures} of {n_draws} null draws failed the complementarity check");
    }
    let mut dist = NullDistribution::from_samples(draws.into_iter().map(|d| d.0).collect(), info.m0, seed)?;
    dist.complementarity_failures = failures;
    Ok(dist)
}
