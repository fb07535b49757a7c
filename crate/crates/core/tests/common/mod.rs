#![allow(dead_code)]

use std::sync::Arc;

use hbshm::plate_synth::generate_training_set;
use hbshm::{generate_dataset, Dataset, DatasetConfig, FitOptions, GprModel, Hyperpriors, KernelConfig, LogDensity, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn default_dataset() -> Dataset {
    generate_dataset(&DatasetConfig::default(), 42).unwrap()
}

/// One grid-trained surrogate per plate of the default setup.
pub fn default_surrogates() -> Vec<Arc<GprModel>> {
    let cfg = DatasetConfig::default();
    (0..cfg.n_plates())
        .map(|k| {
            let t = generate_training_set(&cfg.oracle, 30, 0.0, 12.0, 5.0, 100 + k as u64).unwrap();
            let init = KernelConfig::heuristic(&t.amplitudes, &t.strains);
            let opts = FitOptions {
                seed: k as u64,
                ..FitOptions::default()
            };
            Arc::new(GprModel::fit(t.amplitudes, t.strains, init, opts).unwrap())
        })
        .collect()
}

pub fn strains(d: &Dataset) -> Vec<Vec<f64>> {
    d.observations.plates.iter().map(|p| p.strains.clone()).collect()
}

pub fn hierarchical_spec() -> ModelSpec {
    let d = default_dataset();
    ModelSpec::hierarchical(&strains(&d), &default_surrogates(), Hyperpriors::default()).unwrap()
}

pub fn independent_spec(plate: usize) -> ModelSpec {
    let d = default_dataset();
    let sur = default_surrogates();
    ModelSpec::independent(plate, strains(&d)[plate - 1].clone(), Arc::clone(&sur[plate - 1]), Hyperpriors::default())
        .unwrap()
}

pub fn uniform_point(dim: usize, half_width: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-half_width..half_width)).collect()
}

/// Fourth-order central difference of `f` at `x`.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

/// Relative error with a unit floor on the scale, so coordinates whose
/// derivative is near zero are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let along = |v: f64| {
                let mut p = x.to_vec();
                p[i] = v;
                f(&p)
            };
            central_diff(along, x[i], h)
        })
        .collect()
}

pub fn logp<T: LogDensity>(target: &T, x: &[f64]) -> f64 {
    let mut g = vec![0.0; target.dim()];
    target.logp_grad(x, &mut g)
}

/// Independent standard Normal in `dim` dimensions.
pub struct StdNormal(pub usize);

impl LogDensity for StdNormal {
    fn dim(&self) -> usize {
        self.0
    }

    fn logp_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let mut lp = 0.0;
        for (g, &x) in grad.iter_mut().zip(q) {
            *g = -x;
            lp -= 0.5 * x * x;
        }
        lp
    }
}

/// Zero-mean bivariate Normal with unit variances and correlation `rho`.
pub struct Correlated2d(pub f64);

impl LogDensity for Correlated2d {
    fn dim(&self) -> usize {
        2
    }

    fn logp_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let r = self.0;
        let det = 1.0 - r * r;
        grad[0] = -(q[0] - r * q[1]) / det;
        grad[1] = -(q[1] - r * q[0]) / det;
        -0.5 * (q[0] * q[0] - 2.0 * r * q[0] * q[1] + q[1] * q[1]) / det
    }
}

/// Neal's funnel: `v ~ N(0, 3²)`, `x_i ~ N(0, e^v)` for the rest.
pub struct Funnel(pub usize);

impl LogDensity for Funnel {
    fn dim(&self) -> usize {
        self.0
    }

    fn logp_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let v = q[0];
        let n = (self.0 - 1) as f64;
        let inv = (-v).exp();
        let ss: f64 = q[1..].iter().map(|x| x * x).sum();
        grad[0] = -v / 9.0 - 0.5 * n + 0.5 * ss * inv;
        for (g, &x) in grad[1..].iter_mut().zip(&q[1..]) {
            *g = -x * inv;
        }
        -v * v / 18.0 - 0.5 * n * v - 0.5 * ss * inv
    }
}
