//! Posterior predictive strain distributions, kernel density estimates and
//! threshold-based detection summaries.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diagnostics::quantile_sorted;
use crate::error::{Error, Result};
use crate::nuts::Chains;
use crate::surrogate::GprModel;
use crate::textfmt::sig9;

pub const DEFAULT_LEVELS: [f64; 3] = [4.0, 6.0, 8.0];
pub const KDE_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    PartialPooling,
    NoPooling,
}

impl Source {
    pub fn label(self) -> &'static str {
        match self {
            Source::PartialPooling => "partial_pooling",
            Source::NoPooling => "no_pooling",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSamples {
    /// 1-based plate index.
    pub plate: usize,
    pub source: Source,
    pub strains: Vec<f64>,
}

fn lookup(chains: &Chains, names: &[String]) -> Result<Vec<f64>> {
    for n in names {
        if let Ok(i) = chains.index_of(n) {
            return Ok(chains.param(i).concat());
        }
    }
    Err(Error::MissingParameter(names.join(" or ")))
}

/// Draws from `N(mean, sd²)` truncated to `[0, ∞)` by rejection.
fn truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> f64 {
    if sd <= 0.0 {
        return mean.max(0.0);
    }
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let w = mean + sd * z;
        if w >= 0.0 {
            return w;
        }
    }
}

/// One predictive strain per posterior draw: `w ~ N⁺(μ_k, σ_k²)`, pushed
/// through the surrogate mean, plus measurement noise with the same draw's
/// `γ`.
pub fn draw_predictive(
    chains: &Chains,
    plate: usize,
    surrogate: &GprModel,
    source: Source,
    seed: u64,
) -> Result<PredictiveSamples> {
    let mu = lookup(chains, &[format!("mu_w[{plate}]")])?;
    let sigma = lookup(chains, &[format!("sigma_w[{plate}]")])?;
    let gamma = lookup(chains, &[format!("gamma[{plate}]"), "gamma".to_string()])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strains = mu
        .iter()
        .zip(&sigma)
        .zip(&gamma)
        .map(|((&m, &s), &g)| {
            let w = truncated_normal(m, s, &mut rng);
            let z: f64 = rng.sample(StandardNormal);
            surrogate.mean(w) + g * z
        })
        .collect();
    Ok(PredictiveSamples { plate, source, strains })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub bandwidth: f64,
    pub degenerate: bool,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    #[serde(skip)]
    samples: Vec<f64>,
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Silverman's rule of thumb `0.9 · min(sd, IQR/1.34) · n^(-1/5)`; falls back
/// to the standard deviation when the IQR vanishes.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sd = std_dev(samples);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (samples.len() as f64).powf(-0.2)
}

/// Gaussian KDE on a 512-point grid spanning the data ± 4 bandwidths.
pub fn kde(samples: &[f64], bandwidth: Option<f64>) -> Result<Kde> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter("kde needs at least 2 samples".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kde samples"));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut degenerate = false;
    let mut h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => {
            return Err(Error::Domain {
                what: "bandwidth",
                value: h,
                domain: "(0, inf)",
            })
        }
        None => silverman_bandwidth(samples),
    };
    if !(h > 0.0) {
        log::warn!("kde: samples have zero spread, density collapses to a spike at {lo}");
        degenerate = true;
        h = 1e-6 * lo.abs().max(1.0);
    }
    let (a, b) = (lo - 4.0 * h, hi + 4.0 * h);
    let step = (b - a) / (KDE_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| a + step * i as f64).collect();
    let mut out = Kde {
        bandwidth: h,
        degenerate,
        density: Vec::new(),
        grid,
        samples: samples.to_vec(),
    };
    out.density = out.grid.iter().map(|&x| out.eval(x)).collect();
    Ok(out)
}

impl Kde {
    /// Density at an arbitrary point.
    pub fn eval(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        norm * self
            .samples
            .iter()
            .map(|&s| {
                let u = (x - s) / h;
                (-0.5 * u * u).exp()
            })
            .sum::<f64>()
    }

    /// Trapezoid integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
            .sum()
    }

    pub fn mode(&self) -> f64 {
        let i = (0..self.density.len())
            .max_by(|&a, &b| self.density[a].total_cmp(&self.density[b]))
            .unwrap_or(0);
        self.grid[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    /// Deflection amplitudes (mm), strictly increasing.
    pub levels: Vec<f64>,
    /// Expected strain (με) at each level.
    pub strain_means: Vec<f64>,
}

/// Averages `gpr_mean(level) + γ z` over all `γ` draws for every level.
pub fn threshold_strains<R: Rng + ?Sized>(
    levels: &[f64],
    surrogate: &GprModel,
    gamma_draws: &[f64],
    rng: &mut R,
) -> Result<ThresholdSet> {
    if levels.is_empty() || levels.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidParameter("threshold levels must be positive".into()));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("threshold levels must be strictly increasing".into()));
    }
    if gamma_draws.is_empty() {
        return Err(Error::MissingParameter("gamma".into()));
    }
    let strain_means = levels
        .iter()
        .map(|&level| {
            let m = surrogate.mean(level);
            let total: f64 = gamma_draws
                .iter()
                .map(|&g| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + g * z
                })
                .sum();
            total / gamma_draws.len() as f64
        })
        .collect();
    Ok(ThresholdSet {
        levels: levels.to_vec(),
        strain_means,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    pub level: f64,
    pub threshold_strain: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDetection {
    pub source: Source,
    pub n_samples: usize,
    pub mean: f64,
    pub std: f64,
    pub exceedance: Vec<Exceedance>,
    pub kde: Kde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateDetection {
    pub plate: usize,
    pub thresholds: ThresholdSet,
    pub partial_pooling: SourceDetection,
    pub no_pooling: SourceDetection,
    /// `std(no pooling) / std(partial pooling)`.
    pub std_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub plates: Vec<PlateDetection>,
}

/// Fraction of samples strictly above `threshold`.
pub fn exceedance_probability(samples: &[f64], threshold: f64) -> f64 {
    samples.iter().filter(|&&s| s > threshold).count() as f64 / samples.len() as f64
}

fn detect_source(p: &PredictiveSamples, thresholds: &ThresholdSet) -> Result<SourceDetection> {
    let n = p.strains.len();
    let mean = p.strains.iter().sum::<f64>() / n as f64;
    Ok(SourceDetection {
        source: p.source,
        n_samples: n,
        mean,
        std: std_dev(&p.strains),
        exceedance: thresholds
            .levels
            .iter()
            .zip(&thresholds.strain_means)
            .map(|(&level, &t)| Exceedance {
                level,
                threshold_strain: t,
                probability: exceedance_probability(&p.strains, t),
            })
            .collect(),
        kde: kde(&p.strains, None)?,
    })
}

/// Summarizes both predictive sets of one plate and their spread ratio.
pub fn compare_pooling(
    partial: &PredictiveSamples,
    none: &PredictiveSamples,
    thresholds: &ThresholdSet,
) -> Result<PlateDetection> {
    if partial.plate != none.plate {
        return Err(Error::InvalidParameter(format!(
            "plates differ: {} vs {}",
            partial.plate, none.plate
        )));
    }
    let pp = detect_source(partial, thresholds)?;
    let np = detect_source(none, thresholds)?;
    let std_ratio = if pp.std > 0.0 { np.std / pp.std } else { f64::INFINITY };
    Ok(PlateDetection {
        plate: partial.plate,
        thresholds: thresholds.clone(),
        partial_pooling: pp,
        no_pooling: np,
        std_ratio,
    })
}

impl DetectionReport {
    pub fn plate(&self, k: usize) -> Option<&PlateDetection> {
        self.plates.iter().find(|p| p.plate == k)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Long-format KDE table with columns `grid,density,source,plate`.
    pub fn write_kde_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["grid", "density", "source", "plate"])?;
        for p in &self.plates {
            for s in [&p.partial_pooling, &p.no_pooling] {
                for (x, d) in s.kde.grid.iter().zip(&s.kde.density) {
                    w.write_record([sig9(*x), sig9(*d), s.source.label().to_string(), p.plate.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}
