//! Consolidated run report and plot-data bundle.

use std::fmt::Write as _;
use std::fs;

use anyhow::{Context, Result};
use hbshm::distributions::{gamma_moments, gamma_quantile};
use hbshm::predictive::{kde, DetectionReport};
use hbshm::textfmt::sig9;
use hbshm::{GammaParams, GateOutcome};
use serde::{Deserialize, Serialize};

use crate::pipeline::{read_json, ModelChoice, Pipeline, RunManifest};

const SURROGATE_CURVE_POINTS: usize = 121;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperCheck {
    pub name: String,
    pub prior_mean: f64,
    pub prior_std: f64,
    pub truth: f64,
    pub posterior_mean: f64,
    pub posterior_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCheck {
    pub prior_q2_5: f64,
    pub prior_q97_5: f64,
    pub posterior_mean: f64,
    pub posterior_std: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub model: String,
    pub n_params: usize,
    pub max_rhat: f64,
    pub worst_parameter: String,
    pub divergences: usize,
    pub divergence_rate: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateRow {
    pub plate: usize,
    /// Posterior mean of the plate mean amplitude (pooled model), mm.
    pub amplitude: f64,
    pub strain_mean: f64,
    pub strain_std: f64,
    /// `None` where the surrogate mean is too close to zero.
    pub cov: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub plate: usize,
    pub std_partial_pooling: f64,
    pub std_no_pooling: f64,
    pub std_ratio: f64,
    /// Exceedance probabilities at the highest threshold level.
    pub top_level: f64,
    pub exceedance_partial_pooling: f64,
    pub exceedance_no_pooling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub all_gates_passed: bool,
    pub convergence: Vec<ConvergenceRow>,
    pub hyperparameters: Vec<HyperCheck>,
    /// `(prior mean − posterior mean) / (prior mean − truth)` for `mu_mu`.
    pub mu_mu_shift_fraction: f64,
    pub noise: NoiseCheck,
    pub surrogates: Vec<SurrogateRow>,
    pub focus_plate: usize,
    pub detection: Vec<DetectionRow>,
}

fn gates_passed(gates: &std::collections::BTreeMap<String, GateOutcome>) -> bool {
    !gates.is_empty() && gates.values().all(|g| g.passed)
}

pub fn build(p: &Pipeline) -> Result<Report> {
    let manifest: RunManifest = read_json(&p.layout.manifest())?;
    let sidecar = p.sidecar()?;
    let hier = p.summary(ModelChoice::Hierarchical)?;

    let mut models = vec![ModelChoice::Hierarchical];
    models.extend(p.independent_plates().into_iter().map(ModelChoice::Independent));
    let mut convergence = Vec::new();
    for m in models {
        let s = p.summary(m)?;
        let g = s.gate(hbshm::RHAT_THRESHOLD);
        let total = (s.n_chains * s.n_samples).max(1) as f64;
        convergence.push(ConvergenceRow {
            model: m.dir_name(),
            n_params: s.params.len(),
            max_rhat: g.max_rhat,
            worst_parameter: g.worst_parameter,
            divergences: s.divergences,
            divergence_rate: s.divergences as f64 / total,
            passed: g.passed,
        });
    }

    let truth = sidecar.ground_truth.global;
    let priors = p.cfg.priors;
    let named: [(&str, GammaParams, f64); 4] = [
        ("mu_mu", priors.mu_mu, truth.mu_mu),
        ("sigma_mu", priors.sigma_mu, truth.sigma_mu),
        ("mu_sigma", priors.mu_sigma, truth.mu_sigma),
        ("sigma_sigma", priors.sigma_sigma, truth.sigma_sigma),
    ];
    let mut hyperparameters = Vec::new();
    for (name, prior, t) in named {
        let (mean, var) = gamma_moments(prior)?;
        let post = hier.get(name).with_context(|| format!("{name} missing from summary"))?;
        hyperparameters.push(HyperCheck {
            name: name.to_string(),
            prior_mean: mean,
            prior_std: var.sqrt(),
            truth: t,
            posterior_mean: post.mean,
            posterior_std: post.std,
        });
    }
    let mm = &hyperparameters[0];
    let mu_mu_shift_fraction = (mm.prior_mean - mm.posterior_mean) / (mm.prior_mean - mm.truth);

    let gamma_post = hier.get("gamma").context("gamma missing from summary")?;
    let noise = NoiseCheck {
        prior_q2_5: gamma_quantile(0.025, priors.gamma)?,
        prior_q97_5: gamma_quantile(0.975, priors.gamma)?,
        posterior_mean: gamma_post.mean,
        posterior_std: gamma_post.std,
        truth: sidecar.ground_truth.noise_std,
    };

    let surrogates = p.surrogates()?;
    let mut sur_rows = Vec::new();
    for (i, s) in surrogates.iter().enumerate() {
        let k = i + 1;
        let amp = hier
            .get(&format!("mu_w[{k}]"))
            .with_context(|| format!("mu_w[{k}] missing from summary"))?
            .mean;
        let (m, v) = s.predict(amp);
        sur_rows.push(SurrogateRow {
            plate: k,
            amplitude: amp,
            strain_mean: m,
            strain_std: v.sqrt(),
            cov: s.coefficient_of_variation(amp),
        });
    }

    let det = DetectionReport::read_json(&p.layout.detection_json())?;
    let detection = det
        .plates
        .iter()
        .map(|d| {
            let top = |s: &hbshm::predictive::SourceDetection| s.exceedance.last().map_or(f64::NAN, |e| e.probability);
            DetectionRow {
                plate: d.plate,
                std_partial_pooling: d.partial_pooling.std,
                std_no_pooling: d.no_pooling.std,
                std_ratio: d.std_ratio,
                top_level: d.thresholds.levels.last().copied().unwrap_or(f64::NAN),
                exceedance_partial_pooling: top(&d.partial_pooling),
                exceedance_no_pooling: top(&d.no_pooling),
            }
        })
        .collect();

    Ok(Report {
        config_hash: manifest.config_hash,
        seed: manifest.seed,
        all_gates_passed: gates_passed(&manifest.gates),
        convergence,
        hyperparameters,
        mu_mu_shift_fraction,
        noise,
        surrogates: sur_rows,
        focus_plate: p.cfg.focus_plate(),
        detection,
    })
}

pub fn render(p: &Pipeline, r: &Report) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "Plate deflection inference report");
    let _ = writeln!(s, "seed {}  config {}", r.seed, r.config_hash);
    let _ = writeln!(s);

    let _ = writeln!(s, "Convergence (rhat < {})", hbshm::RHAT_THRESHOLD);
    let _ = writeln!(
        s,
        "  {:<16} {:>6} {:>8} {:<16} {:>11} {:>6}",
        "model", "params", "max rhat", "worst", "divergences", "gate"
    );
    for c in &r.convergence {
        let _ = writeln!(
            s,
            "  {:<16} {:>6} {:>8.4} {:<16} {:>11} {:>6}",
            c.model,
            c.n_params,
            c.max_rhat,
            c.worst_parameter,
            format!("{} ({:.2}%)", c.divergences, 100.0 * c.divergence_rate),
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    let _ = writeln!(s);

    let _ = writeln!(s, "Higher-level parameters (pooled model)");
    let _ = writeln!(
        s,
        "  {:<12} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "parameter", "prior mean", "prior std", "truth", "post mean", "post std"
    );
    for h in &r.hyperparameters {
        let _ = writeln!(
            s,
            "  {:<12} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            h.name, h.prior_mean, h.prior_std, h.truth, h.posterior_mean, h.posterior_std
        );
    }
    let _ = writeln!(s, "  mu_mu moved {:.1}% of the way from its prior mean to the truth", 100.0 * r.mu_mu_shift_fraction);
    let _ = writeln!(
        s,
        "  gamma: posterior {:.3} +/- {:.3} (truth {}), prior 95% interval [{:.3}, {:.3}]",
        r.noise.posterior_mean, r.noise.posterior_std, r.noise.truth, r.noise.prior_q2_5, r.noise.prior_q97_5
    );
    let _ = writeln!(s);

    let _ = writeln!(s, "Surrogate uncertainty at the posterior mean amplitude");
    let _ = writeln!(s, "  {:>5} {:>10} {:>12} {:>10} {:>8}", "plate", "amp [mm]", "strain [ue]", "std [ue]", "CoV");
    for row in &r.surrogates {
        let cov = row.cov.map_or_else(|| "undef".to_string(), |c| format!("{:.2}%", 100.0 * c));
        let _ = writeln!(
            s,
            "  {:>5} {:>10.3} {:>12.2} {:>10.3} {:>8}",
            row.plate, row.amplitude, row.strain_mean, row.strain_std, cov
        );
    }
    let _ = writeln!(s);

    let _ = writeln!(s, "Posterior predictive strain (focus plate {})", r.focus_plate);
    let _ = writeln!(
        s,
        "  {:>5} {:>12} {:>12} {:>8} {:>14} {:>14}",
        "plate", "std pooled", "std unpooled", "ratio", "P>top pooled", "P>top unpooled"
    );
    for d in &r.detection {
        let _ = writeln!(
            s,
            "  {:>5} {:>12.3} {:>12.3} {:>8.3} {:>14.4} {:>14.4}",
            d.plate, d.std_partial_pooling, d.std_no_pooling, d.std_ratio, d.exceedance_partial_pooling, d.exceedance_no_pooling
        );
    }
    let _ = writeln!(s);

    let _ = writeln!(s, "Pooled model parameters");
    s.push_str(&p.summary(ModelChoice::Hierarchical)?.to_text());
    Ok(s)
}

/// Posterior densities of the higher-level parameters and surrogate curves,
/// as long-format CSV.
pub fn write_plot_data(p: &Pipeline) -> Result<()> {
    let dir = p.layout.plot_data();
    fs::create_dir_all(&dir)?;

    let hier = p.chains(ModelChoice::Hierarchical)?;
    let mut w = csv::Writer::from_path(dir.join("posterior_kde.csv"))?;
    w.write_record(["parameter", "grid", "density"])?;
    for name in ["mu_mu", "sigma_mu", "mu_sigma", "sigma_sigma", "gamma"] {
        let k = kde(&hier.flat(name)?, None)?;
        for (x, d) in k.grid.iter().zip(&k.density) {
            w.write_record([name.to_string(), sig9(*x), sig9(*d)])?;
        }
    }
    w.flush()?;

    let s = &p.cfg.surrogate;
    let mut w = csv::Writer::from_path(dir.join("surrogate_curves.csv"))?;
    w.write_record(["plate", "amplitude_mm", "mean_microeps", "std_microeps"])?;
    for (i, m) in p.surrogates()?.iter().enumerate() {
        for j in 0..SURROGATE_CURVE_POINTS {
            let x = s.grid_min + (s.grid_max - s.grid_min) * j as f64 / (SURROGATE_CURVE_POINTS - 1) as f64;
            let (mean, var) = m.predict(x);
            w.write_record([(i + 1).to_string(), sig9(x), sig9(mean), sig9(var.sqrt())])?;
        }
    }
    w.flush()?;
    Ok(())
}
