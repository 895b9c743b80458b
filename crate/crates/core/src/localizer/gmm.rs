//! Two-component diagonal Gaussian mixture fitted by EM with random restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const WEIGHT_FLOOR: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Row-major `n x d` sample matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d || d == 0 {
            return Err(Error::Dimension(format!(
                "{n} x {d} feature matrix given {} values",
                data.len()
            )));
        }
        Ok(Features { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged feature rows".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn column_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n as f64;
        let mut mean = vec![0.0; self.d];
        for i in 0..self.n {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; self.d];
        for i in 0..self.n {
            for ((s, v), m) in var.iter_mut().zip(self.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        (mean, var)
    }

    /// Per-dimension z-scores; constant dimensions become 0.
    pub fn standardized(&self) -> Features {
        let (mean, var) = self.column_stats();
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.d) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&var) {
                *v = if *s > 0.0 { (*v - m) / s.sqrt() } else { 0.0 };
            }
        }
        Features {
            n: self.n,
            d: self.d,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub weights: [f64; 2],
    pub means: [Vec<f64>; 2],
    pub variances: [Vec<f64>; 2],
    pub log_likelihood: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub restarts: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            restarts: 100,
            seed: 0,
            tol: 1e-6,
            max_iter: 300,
        }
    }
}

fn component_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((&xi, &m), &v) in x.iter().zip(mean).zip(var) {
        let d = xi - m;
        s += LN_2PI + v.ln() + d * d / v;
    }
    -0.5 * s
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Posterior component probabilities per sample and the total
/// log-likelihood.
pub fn e_step(model: &GmmModel, x: &Features) -> (Vec<[f64; 2]>, f64) {
    let lw = [model.weights[0].ln(), model.weights[1].ln()];
    let mut resp = Vec::with_capacity(x.rows());
    let mut ll = 0.0;
    for i in 0..x.rows() {
        let r = x.row(i);
        let a = lw[0] + component_log_density(r, &model.means[0], &model.variances[0]);
        let b = lw[1] + component_log_density(r, &model.means[1], &model.variances[1]);
        let total = log_sum_exp(a, b);
        ll += total;
        let p0 = (a - total).exp();
        resp.push([p0, 1.0 - p0]);
    }
    (resp, ll)
}

fn m_step(model: &mut GmmModel, x: &Features, resp: &[[f64; 2]]) {
    for k in 0..2 {
        let nk: f64 = resp.iter().map(|r| r[k]).sum();
        if nk <= f64::MIN_POSITIVE {
            model.weights[k] = 0.0;
            continue;
        }
        let mut mean = vec![0.0; x.dim()];
        for (i, r) in resp.iter().enumerate() {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += r[k] * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut var = vec![0.0; x.dim()];
        for (i, r) in resp.iter().enumerate() {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += r[k] * (v - m) * (v - m);
            }
        }
        var.iter_mut()
            .for_each(|s| *s = (*s / nk).max(VARIANCE_FLOOR));
        model.weights[k] = nk / x.rows() as f64;
        model.means[k] = mean;
        model.variances[k] = var;
    }
    let w0 = model.weights[0].clamp(WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR);
    model.weights = [w0, 1.0 - w0];
}

/// Runs EM from `init` and returns the fitted model with the log-likelihood
/// after the initial E-step and after every iteration.
pub fn em_from(init: GmmModel, x: &Features, tol: f64, max_iter: usize) -> (GmmModel, Vec<f64>) {
    let mut model = init;
    let (mut resp, mut ll) = e_step(&model, x);
    let mut history = vec![ll];
    for it in 1..=max_iter {
        m_step(&mut model, x, &resp);
        let (r, new_ll) = e_step(&model, x);
        resp = r;
        history.push(new_ll);
        model.iterations = it;
        let converged = (new_ll - ll).abs() <= tol * ll.abs().max(f64::MIN_POSITIVE);
        ll = new_ll;
        if converged {
            break;
        }
    }
    model.log_likelihood = ll;
    (model, history)
}

/// Means from two distinct random samples, data variance, equal weights.
pub fn random_init(x: &Features, rng: &mut impl Rng) -> GmmModel {
    let n = x.rows();
    let i = rng.gen_range(0..n);
    let j = if n > 1 {
        (i + rng.gen_range(1..n)) % n
    } else {
        i
    };
    let (_, var) = x.column_stats();
    let var: Vec<f64> = var.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
    GmmModel {
        weights: [0.5, 0.5],
        means: [x.row(i).to_vec(), x.row(j).to_vec()],
        variances: [var.clone(), var],
        log_likelihood: f64::NEG_INFINITY,
        iterations: 0,
    }
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed ^ (restart as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Best-of-restarts fit plus every restart's log-likelihood history.
pub fn gmm_em_fit_traced(x: &Features, config: &EmConfig) -> Result<(GmmModel, Vec<Vec<f64>>)> {
    if x.rows() < 4 {
        return Err(Error::Input(format!(
            "image too small for segmentation ({} patches, need at least 4)",
            x.rows()
        )));
    }
    if config.restarts == 0 {
        return Err(Error::Parameter("at least one EM restart required".into()));
    }
    let runs: Vec<(GmmModel, Vec<f64>)> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(config.seed, r));
            em_from(random_init(x, &mut rng), x, config.tol, config.max_iter)
        })
        .collect();
    let mut best = 0;
    for (r, (m, _)) in runs.iter().enumerate() {
        if m.log_likelihood > runs[best].0.log_likelihood {
            best = r;
        }
    }
    let histories = runs.iter().map(|(_, h)| h.clone()).collect();
    let model = runs.into_iter().nth(best).expect("non-empty").0;
    if !model.log_likelihood.is_finite() {
        return Err(Error::Numeric("EM log-likelihood is not finite".into()));
    }
    Ok((model, histories))
}

pub fn gmm_em_fit(x: &Features, config: &EmConfig) -> Result<GmmModel> {
    gmm_em_fit_traced(x, config).map(|(m, _)| m)
}

/// Index of the component treated as tampered: the lighter one; on equal
/// weights the one with less responsibility mass; then component 0.
pub fn tampered_component(model: &GmmModel, resp: &[[f64; 2]]) -> usize {
    let [w0, w1] = model.weights;
    if w0 != w1 {
        return if w0 < w1 { 0 } else { 1 };
    }
    let m0: f64 = resp.iter().map(|r| r[0]).sum();
    let m1: f64 = resp.iter().map(|r| r[1]).sum();
    if m1 < m0 {
        1
    } else {
        0
    }
}
