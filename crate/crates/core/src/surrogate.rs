//! Zero-mean Gaussian-process regression with a squared-exponential kernel,
//! used as the per-plate amplitude → strain surrogate.
//!
//! Hyperparameters live in log space during optimization; the marginal
//! likelihood is maximized by gradient ascent from several starts. The
//! inference likelihood only consumes the posterior mean and its input
//! derivative ([`GprModel::mean_and_grad`]); the predictive variance is kept
//! for reporting.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::plate_synth::PlateObservations;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;
const LOG_PARAM_BOUNDS: (f64, f64) = (-18.0, 25.0);
/// |mean| below this makes the coefficient of variation undefined.
pub const COV_MEAN_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// RBF amplitude, με².
    pub signal_var: f64,
    /// mm.
    pub lengthscale: f64,
    /// Observation noise variance, με².
    pub noise_var: f64,
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let v = [self.signal_var, self.lengthscale, self.noise_var];
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("kernel hyperparameters"));
        }
        if !v.iter().all(|&x| x > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel hyperparameters must be > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Data-driven starting point: second moment of the targets, half the
    /// input span, and one percent of the target variance as noise.
    pub fn heuristic(x: &[f64], y: &[f64]) -> Self {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let second = y.iter().map(|v| v * v).sum::<f64>() / n;
        let var = (second - mean * mean).max(1e-12);
        let (lo, hi) = x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        Self {
            signal_var: second.max(1e-12),
            lengthscale: 0.5 * span,
            noise_var: 0.01 * var,
        }
    }

    fn to_log(self) -> [f64; 3] {
        [self.signal_var.ln(), self.lengthscale.ln(), self.noise_var.ln()]
    }

    fn from_log(p: [f64; 3]) -> Self {
        Self {
            signal_var: p[0].exp(),
            lengthscale: p[1].exp(),
            noise_var: p[2].exp(),
        }
    }

    #[inline]
    fn k(&self, a: f64, b: f64) -> f64 {
        let d = (a - b) / self.lengthscale;
        self.signal_var * (-0.5 * d * d).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub optimize: bool,
    /// Total number of starts, the given initial kernel included.
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            optimize: true,
            restarts: 5,
            max_iter: 400,
            seed: 0,
        }
    }
}

/// A fitted GP: training data, kernel, `alpha = (K + σ²I)⁻¹ y` and the
/// Cholesky factor of `K + σ²I`.
#[derive(Debug, Clone)]
pub struct GprModel {
    train_x: Vec<f64>,
    train_y: Vec<f64>,
    kernel: KernelConfig,
    alpha: Vec<f64>,
    chol: Cholesky,
    jitter: f64,
    /// `alpha · signal_var`, the weights of the mean expansion.
    weights: Vec<f64>,
    inv_ls2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprSnapshot {
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    pub kernel: KernelConfig,
}

fn gram(x: &[f64], kernel: &KernelConfig) -> Matrix {
    let mut k = Matrix::from_fn(x.len(), |i, j| kernel.k(x[i], x[j]));
    k.add_diagonal(kernel.noise_var);
    k
}

fn has_duplicates(x: &[f64]) -> bool {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).any(|w| w[0] == w[1])
}

fn check_training(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter(format!(
            "training inputs ({}) and targets ({}) differ in length",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidParameter("GPR needs at least 2 training points".into()));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("GPR training data"));
    }
    Ok(())
}

/// Log marginal likelihood of `y` under the GP, and its gradient with
/// respect to `(ln signal_var, ln lengthscale, ln noise_var)`.
pub fn log_marginal_likelihood(x: &[f64], y: &[f64], kernel: &KernelConfig) -> Result<(f64, [f64; 3])> {
    check_training(x, y)?;
    kernel.validate()?;
    let n = x.len();
    let k = gram(x, kernel);
    let chol = Cholesky::factor(&k)?;
    let alpha = chol.solve(y);
    let fit: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let lml = -0.5 * fit - 0.5 * chol.ln_det() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    let kinv = chol.inverse();
    let mut grad = [0.0; 3];
    let inv_ls2 = 1.0 / (kernel.lengthscale * kernel.lengthscale);
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv.get(i, j);
            let d2 = (x[i] - x[j]).powi(2);
            let kij = kernel.k(x[i], x[j]);
            grad[0] += w * kij;
            grad[1] += w * kij * d2 * inv_ls2;
            if i == j {
                grad[2] += w * kernel.noise_var;
            }
        }
    }
    for g in &mut grad {
        *g *= 0.5;
    }
    Ok((lml, grad))
}

fn ascend(x: &[f64], y: &[f64], start: [f64; 3], max_iter: usize) -> Option<([f64; 3], f64)> {
    let clamp = |p: [f64; 3]| p.map(|v| v.clamp(LOG_PARAM_BOUNDS.0, LOG_PARAM_BOUNDS.1));
    let eval = |p: [f64; 3]| log_marginal_likelihood(x, y, &KernelConfig::from_log(p)).ok();
    let mut p = clamp(start);
    let (mut f, mut g) = eval(p)?;
    let mut step = 0.1;
    for _ in 0..max_iter {
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-7 {
            break;
        }
        let mut improved = false;
        while step > 1e-12 {
            let cand = clamp([
                p[0] + step * g[0] / gnorm,
                p[1] + step * g[1] / gnorm,
                p[2] + step * g[2] / gnorm,
            ]);
            match eval(cand) {
                Some((fc, gc)) if fc > f => {
                    p = cand;
                    f = fc;
                    g = gc;
                    step *= 1.5;
                    improved = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !improved {
            break;
        }
    }
    Some((p, f))
}

impl GprModel {
    /// Builds the model for fixed hyperparameters.
    pub fn new(x: Vec<f64>, y: Vec<f64>, kernel: KernelConfig) -> Result<Self> {
        check_training(&x, &y)?;
        kernel.validate()?;
        if kernel.noise_var < 1e-8 * kernel.signal_var && has_duplicates(&x) {
            return Err(Error::IllConditioned(format!(
                "duplicate training inputs with noise_var {:e} (signal_var {:e}); \
                 the kernel matrix is singular",
                kernel.noise_var, kernel.signal_var
            )));
        }
        let k = gram(&x, &kernel);
        let (chol, jitter) = Cholesky::factor_with_jitter(
            &k,
            JITTER_START * kernel.signal_var,
            JITTER_MAX * kernel.signal_var,
        )?;
        let alpha = chol.solve(&y);
        let weights = alpha.iter().map(|a| a * kernel.signal_var).collect();
        Ok(Self {
            inv_ls2: 1.0 / (kernel.lengthscale * kernel.lengthscale),
            train_x: x,
            train_y: y,
            kernel,
            alpha,
            chol,
            jitter,
            weights,
        })
    }

    /// Fits the GP; with `opts.optimize` the hyperparameters maximize the log
    /// marginal likelihood over `opts.restarts` starts around `init`.
    pub fn fit(x: Vec<f64>, y: Vec<f64>, init: KernelConfig, opts: FitOptions) -> Result<Self> {
        check_training(&x, &y)?;
        init.validate()?;
        if !opts.optimize {
            return Self::new(x, y, init);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let base = init.to_log();
        let mut best: Option<([f64; 3], f64)> = None;
        for r in 0..opts.restarts.max(1) {
            let start = if r == 0 {
                base
            } else {
                base.map(|v| v + rng.random_range(-1.5..1.5))
            };
            if let Some((p, f)) = ascend(&x, &y, start, opts.max_iter) {
                if best.is_none_or(|(_, bf)| f > bf) {
                    best = Some((p, f));
                }
            }
        }
        let (p, f) = best.ok_or_else(|| {
            Error::IllConditioned("marginal likelihood could not be evaluated from any start".into())
        })?;
        let kernel = KernelConfig::from_log(p);
        log::debug!("gpr fit: lml={f:.4} kernel={kernel:?}");
        Self::new(x, y, kernel)
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn train_x(&self) -> &[f64] {
        &self.train_x
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    /// Diagonal jitter added on top of `noise_var` during factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    #[inline]
    pub fn mean(&self, x: f64) -> f64 {
        self.train_x
            .iter()
            .zip(&self.weights)
            .map(|(xi, w)| {
                let d = x - xi;
                w * (-0.5 * d * d * self.inv_ls2).exp()
            })
            .sum()
    }

    /// Posterior mean and its derivative in `x`.
    #[inline]
    pub fn mean_and_grad(&self, x: f64) -> (f64, f64) {
        let mut m = 0.0;
        let mut g = 0.0;
        for (xi, w) in self.train_x.iter().zip(&self.weights) {
            let d = x - xi;
            let t = w * (-0.5 * d * d * self.inv_ls2).exp();
            m += t;
            g -= t * d;
        }
        (m, g * self.inv_ls2)
    }

    pub fn mean_grad(&self, x: f64) -> f64 {
        self.mean_and_grad(x).1
    }

    /// Posterior mean and latent-function variance at `x`.
    pub fn predict(&self, x: f64) -> (f64, f64) {
        let kx: Vec<f64> = self.train_x.iter().map(|&xi| self.kernel.k(x, xi)).collect();
        let mean = kx.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = self.chol.solve_lower(&kx);
        let mut var = self.kernel.signal_var - v.iter().map(|a| a * a).sum::<f64>();
        if var < 0.0 {
            if var < -1e-8 * self.kernel.signal_var {
                log::warn!("negative predictive variance {var:e} at x={x}");
            }
            var = 0.0;
        }
        (mean, var)
    }

    /// `sqrt(var) / |mean|` at `x`; `None` where the mean is too close to zero.
    pub fn coefficient_of_variation(&self, x: f64) -> Option<f64> {
        let (m, v) = self.predict(x);
        cov_from_moments(m, v)
    }

    pub fn snapshot(&self) -> GprSnapshot {
        GprSnapshot {
            train_x: self.train_x.clone(),
            train_y: self.train_y.clone(),
            kernel: self.kernel,
        }
    }

    pub fn from_snapshot(s: GprSnapshot) -> Result<Self> {
        Self::new(s.train_x, s.train_y, s.kernel)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, &self.snapshot())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s: GprSnapshot = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_snapshot(s)
    }
}

pub fn cov_from_moments(mean: f64, var: f64) -> Option<f64> {
    (mean.abs() > COV_MEAN_FLOOR).then(|| var.max(0.0).sqrt() / mean.abs())
}

/// Convenience wrapper over [`GprModel::fit`] with default restarts.
pub fn gpr_fit(x: &[f64], y: &[f64], init: KernelConfig, optimize: bool) -> Result<GprModel> {
    GprModel::fit(
        x.to_vec(),
        y.to_vec(),
        init,
        FitOptions {
            optimize,
            ..FitOptions::default()
        },
    )
}

/// Fits one surrogate per plate. Plates with fewer than `min_points`
/// training pairs cannot identify three hyperparameters; they reuse the
/// kernel of a fit over all plates' pairs pooled together.
pub fn fit_plate_surrogates(
    training: &[PlateObservations],
    opts: FitOptions,
    min_points: usize,
) -> Result<Vec<GprModel>> {
    let mut pooled: Option<KernelConfig> = None;
    let mut out = Vec::with_capacity(training.len());
    for (k, t) in training.iter().enumerate() {
        let plate_opts = FitOptions {
            seed: opts.seed.wrapping_add(k as u64 + 1),
            ..opts
        };
        let model = if t.len() >= min_points || !opts.optimize {
            let init = KernelConfig::heuristic(&t.amplitudes, &t.strains);
            GprModel::fit(t.amplitudes.clone(), t.strains.clone(), init, plate_opts)?
        } else {
            let kernel = match pooled {
                Some(kernel) => kernel,
                None => {
                    let x: Vec<f64> = training.iter().flat_map(|p| p.amplitudes.clone()).collect();
                    let y: Vec<f64> = training.iter().flat_map(|p| p.strains.clone()).collect();
                    let init = KernelConfig::heuristic(&x, &y);
                    let kernel = *GprModel::fit(x, y, init, opts)?.kernel();
                    pooled = Some(kernel);
                    kernel
                }
            };
            log::info!("plate {}: {} training points, borrowing pooled kernel", k + 1, t.len());
            GprModel::new(t.amplitudes.clone(), t.strains.clone(), kernel)?
        };
        out.push(model);
    }
    Ok(out)
}
