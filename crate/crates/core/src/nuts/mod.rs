//! No-U-Turn Sampler with multinomial trajectory sampling, a diagonal
//! Euclidean metric, dual-averaging step-size adaptation and windowed
//! variance estimation.
//!
//! The tree builder follows the recursive doubling scheme: every doubling
//! extends the trajectory in a random direction by a subtree of the same
//! size, a proposal is drawn from the new subtree with probability
//! proportional to its total weight `Σ exp(-H)`, and the generalized U-turn
//! criterion is checked across the whole tree as well as across the seams
//! between merged subtrees.

mod adapt;
mod chains;

pub use adapt::{DualAveraging, WindowedVariance};
pub use chains::{run_chains, ChainDraws, ChainStats, Chains, SamplerConfig};

use rand::Rng;
use rand_distr::StandardNormal;

/// Energy error above which a trajectory is declared divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

/// A differentiable log density over `R^dim`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes `∇ log p(position)` into `grad` and returns `log p(position)`.
    /// Any non-finite return marks the point as invalid.
    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;

    /// Maps an unconstrained position to the reported parameter values.
    fn constrain(&self, position: &[f64], out: &mut [f64]) {
        out.copy_from_slice(position);
    }
}

impl LogDensity for crate::model::ModelSpec {
    fn dim(&self) -> usize {
        self.layout().dim()
    }

    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        if position.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let lp = self.eval_into(position, grad, true);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            lp
        } else {
            grad.iter_mut().for_each(|g| *g = 0.0);
            f64::NEG_INFINITY
        }
    }

    fn constrain(&self, position: &[f64], out: &mut [f64]) {
        let lay = self.layout();
        for (i, (o, &x)) in out.iter_mut().zip(position).enumerate() {
            *o = match lay.transform_of(i) {
                crate::model::Transform::Exp => x.exp(),
                crate::model::Transform::Softplus => crate::model::softplus(x),
            };
        }
    }
}

/// Diagonal metric, stored as the inverse mass (the posterior variance
/// estimate).
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub inv_mass: Vec<f64>,
}

impl Metric {
    pub fn unit(dim: usize) -> Self {
        Self {
            inv_mass: vec![1.0; dim],
        }
    }

    #[inline]
    pub fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
    }

    /// `dH/dp = M⁻¹ p`.
    #[inline]
    pub fn velocity_into(&self, p: &[f64], out: &mut [f64]) {
        for ((o, p), m) in out.iter_mut().zip(p).zip(&self.inv_mass) {
            *o = p * m;
        }
    }

    pub fn sample_momentum<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        for (p, m) in p.iter_mut().zip(&self.inv_mass) {
            let z: f64 = rng.sample(StandardNormal);
            *p = z / m.sqrt();
        }
    }
}

/// Phase-space point with its cached density and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl PhasePoint {
    pub fn new<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let logp = target.logp_grad(&q, &mut grad);
        Self {
            p: vec![0.0; q.len()],
            q,
            grad,
            logp,
        }
    }

    pub fn hamiltonian(&self, metric: &Metric) -> f64 {
        let h = -self.logp + metric.kinetic(&self.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }
}

/// One velocity-Verlet step of size `step` (negative steps integrate
/// backwards). Returns `false` when the new point has no finite density.
pub fn leapfrog<T: LogDensity + ?Sized>(target: &T, z: &mut PhasePoint, step: f64, metric: &Metric) -> bool {
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * step * g;
    }
    for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&metric.inv_mass) {
        *q += step * m * p;
    }
    z.logp = target.logp_grad(&z.q, &mut z.grad);
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * step * g;
    }
    z.logp.is_finite()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawStats {
    /// Mean Metropolis acceptance over all trajectory points.
    pub accept_stat: f64,
    pub tree_depth: u32,
    pub n_leapfrog: u32,
    pub divergent: bool,
    pub max_depth_reached: bool,
    /// Hamiltonian of the selected point.
    pub energy: f64,
    pub step_size: f64,
}

#[inline]
fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generalized no-U-turn condition on the momentum sum `rho`.
#[inline]
fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

#[inline]
fn add_into(out: &mut [f64], a: &[f64], b: &[f64]) {
    for ((o, a), b) in out.iter_mut().zip(a).zip(b) {
        *o = a + b;
    }
}

struct Tree<'a, T: ?Sized> {
    target: &'a T,
    metric: &'a Metric,
    step: f64,
    h0: f64,
    n_leapfrog: u32,
    sum_metro: f64,
    divergent: bool,
}

impl<T: LogDensity + ?Sized> Tree<'_, T> {
    /// Builds a subtree of `2^depth` leapfrog steps starting from `z`, which
    /// is left at the far end. `*_beg` refers to the end adjacent to the
    /// existing trajectory, `*_end` to the far end.
    #[allow(clippy::too_many_arguments)]
    fn build<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        depth: u32,
        sign: f64,
        z: &mut PhasePoint,
        z_propose: &mut PhasePoint,
        p_sharp_beg: &mut [f64],
        p_sharp_end: &mut [f64],
        rho: &mut [f64],
        p_beg: &mut [f64],
        p_end: &mut [f64],
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            leapfrog(self.target, z, sign * self.step, self.metric);
            self.n_leapfrog += 1;
            let h = z.hamiltonian(self.metric);
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, self.h0 - h);
            self.sum_metro += if self.h0 - h > 0.0 { 1.0 } else { (self.h0 - h).exp() };
            z_propose.clone_from(z);
            self.metric.velocity_into(&z.p, p_sharp_beg);
            p_sharp_end.copy_from_slice(p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            p_beg.copy_from_slice(&z.p);
            p_end.copy_from_slice(&z.p);
            return !self.divergent;
        }

        let dim = z.q.len();
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut p_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build(
            rng,
            depth - 1,
            sign,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            &mut lsw_init,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut p_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build(
            rng,
            depth - 1,
            sign,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            &mut lsw_final,
        ) {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        // uniform (not biased) choice within a subtree
        if lsw_final > lsw_subtree || rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            z_propose.clone_from(&z_propose_final);
        }

        let mut rho_subtree = vec![0.0; dim];
        add_into(&mut rho_subtree, &rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }

        let mut persist = no_u_turn(p_sharp_beg, p_sharp_end, &rho_subtree);
        let mut rho_ext = vec![0.0; dim];
        add_into(&mut rho_ext, &rho_init, &p_final_beg);
        persist &= no_u_turn(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
        add_into(&mut rho_ext, &rho_final, &p_init_end);
        persist &= no_u_turn(&p_sharp_init_end, p_sharp_end, &rho_ext);
        persist
    }
}

/// One NUTS transition from `start` (momentum is resampled).
pub fn nuts_draw<T, R>(
    target: &T,
    start: &PhasePoint,
    step: f64,
    metric: &Metric,
    max_depth: u32,
    rng: &mut R,
) -> (PhasePoint, DrawStats)
where
    T: LogDensity + ?Sized,
    R: Rng + ?Sized,
{
    let dim = start.q.len();
    let mut z = start.clone();
    metric.sample_momentum(&mut z.p, rng);
    let h0 = z.hamiltonian(metric);

    let mut z_fwd = z.clone();
    let mut z_bck = z.clone();
    let mut z_sample = z.clone();
    let mut z_propose = z.clone();

    let mut p_sharp0 = vec![0.0; dim];
    metric.velocity_into(&z.p, &mut p_sharp0);
    // momenta and velocities at both ends of the backward and forward parts
    let mut p_fwd_fwd = z.p.clone();
    let mut p_sharp_fwd_fwd = p_sharp0.clone();
    let mut p_fwd_bck = z.p.clone();
    let mut p_sharp_fwd_bck = p_sharp0.clone();
    let mut p_bck_fwd = z.p.clone();
    let mut p_sharp_bck_fwd = p_sharp0.clone();
    let mut p_bck_bck = z.p.clone();
    let mut p_sharp_bck_bck = p_sharp0;

    let mut rho = z.p.clone();
    let mut log_sum_weight = 0.0;
    let mut tree = Tree {
        target,
        metric,
        step,
        h0,
        n_leapfrog: 0,
        sum_metro: 0.0,
        divergent: false,
    };

    let mut depth = 0;
    let mut rho_fwd = vec![0.0; dim];
    let mut rho_bck = vec![0.0; dim];
    let mut rho_ext = vec![0.0; dim];
    while depth < max_depth {
        let mut lsw_subtree = f64::NEG_INFINITY;
        let valid = if rng.random::<f64>() > 0.5 {
            // old trajectory becomes the backward part
            z.clone_from(&z_fwd);
            rho_bck.copy_from_slice(&rho);
            p_bck_fwd.copy_from_slice(&p_fwd_fwd);
            p_sharp_bck_fwd.copy_from_slice(&p_sharp_fwd_fwd);
            rho_fwd.iter_mut().for_each(|v| *v = 0.0);
            let ok = tree.build(
                rng,
                depth,
                1.0,
                &mut z,
                &mut z_propose,
                &mut p_sharp_fwd_bck,
                &mut p_sharp_fwd_fwd,
                &mut rho_fwd,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                &mut lsw_subtree,
            );
            z_fwd.clone_from(&z);
            ok
        } else {
            z.clone_from(&z_bck);
            rho_fwd.copy_from_slice(&rho);
            p_fwd_bck.copy_from_slice(&p_bck_bck);
            p_sharp_fwd_bck.copy_from_slice(&p_sharp_bck_bck);
            rho_bck.iter_mut().for_each(|v| *v = 0.0);
            let ok = tree.build(
                rng,
                depth,
                -1.0,
                &mut z,
                &mut z_propose,
                &mut p_sharp_bck_fwd,
                &mut p_sharp_bck_bck,
                &mut rho_bck,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                &mut lsw_subtree,
            );
            z_bck.clone_from(&z);
            ok
        };
        if !valid {
            break;
        }
        depth += 1;

        // biased progressive sampling at the top level
        if lsw_subtree > log_sum_weight || rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
            z_sample.clone_from(&z_propose);
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

        add_into(&mut rho, &rho_bck, &rho_fwd);
        let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        add_into(&mut rho_ext, &rho_bck, &p_fwd_bck);
        persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
        add_into(&mut rho_ext, &rho_fwd, &p_bck_fwd);
        persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
        if !persist {
            break;
        }
    }

    let n_leapfrog = tree.n_leapfrog.max(1);
    let stats = DrawStats {
        accept_stat: tree.sum_metro / n_leapfrog as f64,
        tree_depth: depth,
        n_leapfrog: tree.n_leapfrog,
        divergent: tree.divergent,
        max_depth_reached: depth >= max_depth,
        energy: z_sample.hamiltonian(metric),
        step_size: step,
    };
    (z_sample, stats)
}

/// Step-size search: doubles or halves `step` until the acceptance of a
/// single leapfrog step crosses 0.8.
pub fn find_reasonable_step<T, R>(target: &T, start: &PhasePoint, mut step: f64, metric: &Metric, rng: &mut R) -> f64
where
    T: LogDensity + ?Sized,
    R: Rng + ?Sized,
{
    if !(step > 0.0 && step < 1e7) {
        return step;
    }
    let threshold = 0.8_f64.ln();
    let trial = |step: f64, rng: &mut R| {
        let mut z = start.clone();
        metric.sample_momentum(&mut z.p, rng);
        let h0 = z.hamiltonian(metric);
        leapfrog(target, &mut z, step, metric);
        h0 - z.hamiltonian(metric)
    };
    let direction = if trial(step, rng) > threshold { 1 } else { -1 };
    loop {
        let delta_h = trial(step, rng);
        if direction == 1 && !(delta_h > threshold) {
            break;
        }
        if direction == -1 && !(delta_h < threshold) {
            break;
        }
        step = if direction == 1 { 2.0 * step } else { 0.5 * step };
        if !(1e-12..=1e7).contains(&step) {
            break;
        }
    }
    step
}
