//! Partial-pooling (hierarchical) and no-pooling (independent) models of
//! plate deflection amplitudes, their unconstrained parameterization, and the
//! joint log-posterior with its analytic gradient.
//!
//! Generative structure, per plate `k` and observation `i`:
//!
//! ```text
//! mu_mu ~ Gamma(3, 0.2)        sigma_mu ~ Gamma(0.8, 0.35)
//! mu_sigma ~ Gamma(3.6, 6)     sigma_sigma ~ Gamma(4.8, 16)
//! gamma ~ Gamma(80, 16)
//! mu_w[k]    ~ Normal(mu_mu, sigma_mu²)        truncated to [0, inf)
//! sigma_w[k] ~ Normal(mu_sigma, sigma_sigma²)  truncated to (0, inf)
//! w[i,k]     ~ Normal(mu_w[k], sigma_w[k]²)    truncated to [0, inf)
//! strain[i,k] ~ Normal(M_k(w[i,k]), gamma²)
//! ```
//!
//! `M_k` is the posterior mean of plate `k`'s GP surrogate. The truncation
//! normalizers `ln Φ(mean/std)` depend on sampled parameters and are kept in
//! the density.
//!
//! An independent model is the same graph restricted to a single plate, with
//! its own noise scale.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distributions::GammaParams;
use crate::error::{Error, Result};
use crate::special::{inverse_mills, ln_gamma, ln_std_normal_cdf, LN_SQRT_2PI};
use crate::surrogate::GprModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperpriors {
    pub mu_mu: GammaParams,
    pub sigma_mu: GammaParams,
    pub mu_sigma: GammaParams,
    pub sigma_sigma: GammaParams,
    /// Prior on the measurement-noise std, in με.
    pub gamma: GammaParams,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Self {
            mu_mu: GammaParams { shape: 3.0, rate: 0.2 },
            sigma_mu: GammaParams { shape: 0.8, rate: 0.35 },
            mu_sigma: GammaParams { shape: 3.6, rate: 6.0 },
            sigma_sigma: GammaParams { shape: 4.8, rate: 16.0 },
            gamma: GammaParams { shape: 80.0, rate: 16.0 },
        }
    }
}

impl Hyperpriors {
    pub fn validate(&self) -> Result<()> {
        for p in self.as_array() {
            p.validate()?;
        }
        self.gamma.validate()
    }

    /// The four higher-level priors in layout order.
    pub fn as_array(&self) -> [GammaParams; 4] {
        [self.mu_mu, self.sigma_mu, self.mu_sigma, self.sigma_sigma]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Hierarchical,
    /// No pooling; `plate` is 1-based.
    Independent { plate: usize },
}

#[derive(Debug, Clone)]
pub struct PlateGroup {
    /// 1-based plate index.
    pub plate: usize,
    pub strains: Vec<f64>,
    pub surrogate: Arc<GprModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Exp,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub index: usize,
    pub transform: Transform,
    pub units: String,
}

/// Index map of the flattened parameter vector:
/// `[ln mu_mu, ln sigma_mu, ln mu_sigma, ln sigma_sigma, mu_w raw (G),
///   ln sigma_w (G), w raw (Σ N_k), ln gamma]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    plates: Vec<usize>,
    counts: Vec<usize>,
    w_offsets: Vec<usize>,
    kind: ModelKind,
}

pub const MU_MU: usize = 0;
pub const SIGMA_MU: usize = 1;
pub const MU_SIGMA: usize = 2;
pub const SIGMA_SIGMA: usize = 3;
const N_HYPER: usize = 4;

impl ParamLayout {
    pub fn new(kind: ModelKind, plates: Vec<usize>, counts: Vec<usize>) -> Self {
        let mut w_offsets = Vec::with_capacity(counts.len());
        let mut acc = 0;
        for &n in &counts {
            w_offsets.push(acc);
            acc += n;
        }
        Self {
            plates,
            counts,
            w_offsets,
            kind,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.counts.len()
    }

    pub fn n_obs(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `4 + 2G + Σ N_k + 1`.
    pub fn dim(&self) -> usize {
        N_HYPER + 2 * self.n_groups() + self.n_obs() + 1
    }

    #[inline]
    pub fn mu_w(&self, g: usize) -> usize {
        N_HYPER + g
    }

    #[inline]
    pub fn sigma_w(&self, g: usize) -> usize {
        N_HYPER + self.n_groups() + g
    }

    #[inline]
    pub fn w(&self, g: usize, i: usize) -> usize {
        N_HYPER + 2 * self.n_groups() + self.w_offsets[g] + i
    }

    #[inline]
    pub fn gamma(&self) -> usize {
        self.dim() - 1
    }

    pub fn transform_of(&self, idx: usize) -> Transform {
        let g = self.n_groups();
        if (N_HYPER..N_HYPER + g).contains(&idx) || (N_HYPER + 2 * g..self.dim() - 1).contains(&idx) {
            Transform::Softplus
        } else {
            Transform::Exp
        }
    }

    pub fn manifest(&self) -> Vec<ParamEntry> {
        let mut out = Vec::with_capacity(self.dim());
        let mut push = |name: String, units: &str| {
            let index = out.len();
            out.push(ParamEntry {
                name,
                index,
                transform: self.transform_of(index),
                units: units.to_string(),
            });
        };
        for name in ["mu_mu", "sigma_mu", "mu_sigma", "sigma_sigma"] {
            push(name.to_string(), "mm");
        }
        for &k in &self.plates {
            push(format!("mu_w[{k}]"), "mm");
        }
        for &k in &self.plates {
            push(format!("sigma_w[{k}]"), "mm");
        }
        for (&k, &n) in self.plates.iter().zip(&self.counts) {
            for i in 1..=n {
                push(format!("w[{i},{k}]"), "mm");
            }
        }
        match self.kind {
            ModelKind::Hierarchical => push("gamma".to_string(), "microstrain"),
            ModelKind::Independent { plate } => push(format!("gamma[{plate}]"), "microstrain"),
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.manifest().into_iter().map(|e| e.name).collect()
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] on `(0, inf)`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constrained {
    pub values: Vec<f64>,
    pub log_jacobian: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityResult {
    pub logp: f64,
    pub grad: Vec<f64>,
}

impl LogDensityResult {
    /// A point where evaluation broke down numerically.
    pub fn is_divergent(&self) -> bool {
        !self.logp.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    kind: ModelKind,
    hyperpriors: Hyperpriors,
    groups: Vec<PlateGroup>,
    layout: ParamLayout,
    /// `shape·ln(rate) − ln Γ(shape)` of each Gamma prior, hyper then noise.
    gamma_consts: [f64; 5],
}

impl ModelSpec {
    fn from_groups(kind: ModelKind, hyperpriors: Hyperpriors, groups: Vec<PlateGroup>) -> Result<Self> {
        hyperpriors.validate()?;
        if groups.is_empty() {
            return Err(Error::Config("model needs at least one plate".into()));
        }
        if groups.iter().flat_map(|g| &g.strains).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observed strains"));
        }
        let layout = ParamLayout::new(
            kind,
            groups.iter().map(|g| g.plate).collect(),
            groups.iter().map(|g| g.strains.len()).collect(),
        );
        let mut gamma_consts = [0.0; 5];
        for (c, p) in gamma_consts
            .iter_mut()
            .zip(hyperpriors.as_array().iter().chain([&hyperpriors.gamma]))
        {
            *c = p.shape * p.rate.ln() - ln_gamma(p.shape);
        }
        Ok(Self {
            kind,
            hyperpriors,
            groups,
            layout,
            gamma_consts,
        })
    }

    /// Partial-pooling model over all plates. `strains[k]` and
    /// `surrogates[k]` belong to plate `k + 1`.
    pub fn hierarchical(strains: &[Vec<f64>], surrogates: &[Arc<GprModel>], hyperpriors: Hyperpriors) -> Result<Self> {
        if strains.len() != surrogates.len() {
            return Err(Error::Config(format!(
                "{} plates of data but {} surrogates",
                strains.len(),
                surrogates.len()
            )));
        }
        let groups = strains
            .iter()
            .zip(surrogates)
            .enumerate()
            .map(|(k, (s, m))| PlateGroup {
                plate: k + 1,
                strains: s.clone(),
                surrogate: Arc::clone(m),
            })
            .collect();
        Self::from_groups(ModelKind::Hierarchical, hyperpriors, groups)
    }

    /// No-pooling model for one plate (1-based).
    pub fn independent(
        plate: usize,
        strains: Vec<f64>,
        surrogate: Arc<GprModel>,
        hyperpriors: Hyperpriors,
    ) -> Result<Self> {
        if plate == 0 {
            return Err(Error::Config("plate indices start at 1".into()));
        }
        Self::from_groups(
            ModelKind::Independent { plate },
            hyperpriors,
            vec![PlateGroup {
                plate,
                strains,
                surrogate,
            }],
        )
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn hyperpriors(&self) -> &Hyperpriors {
        &self.hyperpriors
    }

    pub fn groups(&self) -> &[PlateGroup] {
        &self.groups
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn transform(&self, theta: &[f64]) -> Result<Constrained> {
        self.check_theta(theta)?;
        let mut values = Vec::with_capacity(theta.len());
        let mut log_jacobian = 0.0;
        for (i, &x) in theta.iter().enumerate() {
            match self.layout.transform_of(i) {
                Transform::Exp => {
                    values.push(x.exp());
                    log_jacobian += x;
                }
                Transform::Softplus => {
                    values.push(softplus(x));
                    log_jacobian -= softplus(-x);
                }
            }
        }
        Ok(Constrained { values, log_jacobian })
    }

    pub fn untransform(&self, constrained: &[f64]) -> Result<Vec<f64>> {
        if constrained.len() != self.dim() {
            return Err(Error::InvalidParameter(format!(
                "expected {} constrained values, got {}",
                self.dim(),
                constrained.len()
            )));
        }
        constrained
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                if !(y > 0.0) || !y.is_finite() {
                    return Err(Error::Domain {
                        what: "constrained parameter",
                        value: y,
                        domain: "(0, inf)",
                    });
                }
                Ok(match self.layout.transform_of(i) {
                    Transform::Exp => y.ln(),
                    Transform::Softplus => softplus_inv(y),
                })
            })
            .collect()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameters, got {}",
                self.dim(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(())
    }

    pub fn log_posterior(&self, theta: &[f64]) -> Result<LogDensityResult> {
        self.check_theta(theta)?;
        let mut grad = vec![0.0; self.dim()];
        let logp = self.eval_into(theta, &mut grad, true);
        Ok(finish(logp, grad))
    }

    /// Priors plus log-Jacobian, without the measurement likelihood.
    pub fn log_prior(&self, theta: &[f64]) -> Result<LogDensityResult> {
        self.check_theta(theta)?;
        let mut grad = vec![0.0; self.dim()];
        let logp = self.eval_into(theta, &mut grad, false);
        Ok(finish(logp, grad))
    }

    /// Hot path: writes the gradient into `grad` and returns the log density.
    /// Non-finite results are returned as-is for the caller to flag.
    pub(crate) fn eval_into(&self, theta: &[f64], grad: &mut [f64], with_likelihood: bool) -> f64 {
        let lay = &self.layout;
        let hp = self.hyperpriors.as_array();
        let mut lp = 0.0;

        // higher-level parameters, exp-transformed
        let mut h = [0.0; N_HYPER];
        let mut gh = [0.0; N_HYPER];
        for j in 0..N_HYPER {
            h[j] = theta[j].exp();
            lp += (hp[j].shape - 1.0) * theta[j] - hp[j].rate * h[j] + self.gamma_consts[j];
            gh[j] = (hp[j].shape - 1.0) / h[j] - hp[j].rate;
            lp += theta[j];
        }
        let [mu_mu, sigma_mu, mu_sigma, sigma_sigma] = h;

        let gi = lay.gamma();
        let gamma = theta[gi].exp();
        let gp = self.hyperpriors.gamma;
        lp += (gp.shape - 1.0) * theta[gi] - gp.rate * gamma + self.gamma_consts[4];
        let mut g_gamma = (gp.shape - 1.0) / gamma - gp.rate;
        lp += theta[gi];

        // truncation normalizers of the plate-level priors
        let z_mu = mu_mu / sigma_mu;
        let z_sig = mu_sigma / sigma_sigma;
        let (ln_phi_mu, lam_mu) = (ln_std_normal_cdf(z_mu), inverse_mills(z_mu));
        let (ln_phi_sig, lam_sig) = (ln_std_normal_cdf(z_sig), inverse_mills(z_sig));

        let ln_noise = theta[gi];
        for (g, group) in self.groups.iter().enumerate() {
            let (im, is) = (lay.mu_w(g), lay.sigma_w(g));
            let mu = softplus(theta[im]);
            let s_mu = sigmoid(theta[im]);
            let sig = theta[is].exp();
            let mut g_mu = 0.0;
            let mut g_sig = 0.0;

            // mu_w ~ N+(mu_mu, sigma_mu)
            let r = (mu - mu_mu) / sigma_mu;
            lp += -0.5 * r * r - sigma_mu.ln() - LN_SQRT_2PI - ln_phi_mu;
            g_mu -= r / sigma_mu;
            gh[MU_MU] += r / sigma_mu - lam_mu / sigma_mu;
            gh[SIGMA_MU] += (r * r - 1.0) / sigma_mu + lam_mu * mu_mu / (sigma_mu * sigma_mu);

            // sigma_w ~ N+(mu_sigma, sigma_sigma)
            let r = (sig - mu_sigma) / sigma_sigma;
            lp += -0.5 * r * r - sigma_sigma.ln() - LN_SQRT_2PI - ln_phi_sig;
            g_sig -= r / sigma_sigma;
            gh[MU_SIGMA] += r / sigma_sigma - lam_sig / sigma_sigma;
            gh[SIGMA_SIGMA] += (r * r - 1.0) / sigma_sigma + lam_sig * mu_sigma / (sigma_sigma * sigma_sigma);

            // w ~ N+(mu, sig), normalizer shared by the group's observations
            let n = group.strains.len() as f64;
            let z_w = mu / sig;
            let (ln_phi_w, lam_w) = (ln_std_normal_cdf(z_w), inverse_mills(z_w));
            lp -= n * (sig.ln() + LN_SQRT_2PI + ln_phi_w);
            g_mu -= n * lam_w / sig;
            g_sig += n * (lam_w * mu / (sig * sig) - 1.0 / sig);

            for (i, &y) in group.strains.iter().enumerate() {
                let iw = lay.w(g, i);
                let w = softplus(theta[iw]);
                let s_w = sigmoid(theta[iw]);
                let r = (w - mu) / sig;
                lp -= 0.5 * r * r;
                let mut g_w = -r / sig;
                g_mu += r / sig;
                g_sig += r * r / sig;

                if with_likelihood {
                    let (m, dm) = group.surrogate.mean_and_grad(w);
                    let e = (y - m) / gamma;
                    lp += -0.5 * e * e - ln_noise - LN_SQRT_2PI;
                    g_w += e / gamma * dm;
                    g_gamma += (e * e - 1.0) / gamma;
                }

                lp -= softplus(-theta[iw]);
                grad[iw] = g_w * s_w + (1.0 - s_w);
            }

            lp -= softplus(-theta[im]);
            grad[im] = g_mu * s_mu + (1.0 - s_mu);
            lp += theta[is];
            grad[is] = g_sig * sig + 1.0;
        }

        for j in 0..N_HYPER {
            grad[j] = gh[j] * h[j] + 1.0;
        }
        grad[gi] = g_gamma * gamma + 1.0;
        lp
    }
}

fn finish(logp: f64, mut grad: Vec<f64>) -> LogDensityResult {
    if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
        LogDensityResult { logp, grad }
    } else {
        grad.iter_mut().for_each(|g| *g = 0.0);
        LogDensityResult {
            logp: f64::NEG_INFINITY,
            grad,
        }
    }
}

/// One no-pooling model per plate, sharing the hyperprior constants.
pub fn build_independent_specs(
    strains: &[Vec<f64>],
    surrogates: &[Arc<GprModel>],
    hyperpriors: Hyperpriors,
) -> Result<Vec<ModelSpec>> {
    if strains.len() != surrogates.len() {
        return Err(Error::Config(format!(
            "{} plates of data but {} surrogates",
            strains.len(),
            surrogates.len()
        )));
    }
    strains
        .iter()
        .zip(surrogates)
        .enumerate()
        .map(|(k, (s, m))| ModelSpec::independent(k + 1, s.clone(), Arc::clone(m), hyperpriors))
        .collect()
}
