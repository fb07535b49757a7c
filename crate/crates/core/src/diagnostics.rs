//! Convergence diagnostics: rank-normalized split R̂, bulk and tail effective
//! sample sizes, and per-parameter posterior summaries.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuts::Chains;
use crate::special::std_normal_quantile;

/// Acceptance threshold on R̂.
pub const RHAT_THRESHOLD: f64 = 1.01;

/// Floor on the within-chain variance used when every chain is constant.
const W_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rhat {
    pub value: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EssKind {
    Bulk,
    Tail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ess {
    /// NaN when `degenerate`.
    pub value: f64,
    pub degenerate: bool,
}

fn check_shape(chains: &[Vec<f64>]) -> Result<usize> {
    if chains.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    if n < 4 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidParameter(
            "chains must have equal length of at least 4 draws".into(),
        ));
    }
    Ok(n)
}

/// Splits every chain into halves, dropping the middle draw of odd chains.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Ranks with ties averaged, 1-based.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Replaces draws by normal scores of their pooled ranks.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = chains.concat();
    let s = flat.len() as f64;
    let ranks = average_ranks(&flat);
    let mut it = ranks.into_iter();
    chains
        .iter()
        .map(|c| {
            c.iter()
                .map(|_| std_normal_quantile((it.next().unwrap() - 0.375) / (s + 0.25)))
                .collect()
        })
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().flatten().all(|&v| v == first)
}

/// Classic R̂ on (already split) chains. The flag reports a zero
/// within-chain variance, exact or below the floor.
fn classic_rhat(chains: &[Vec<f64>]) -> (f64, bool) {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b = n * var(&means);
    let w = mean(&chains.iter().map(|c| var(c)).collect::<Vec<_>>());
    let flat = chains.iter().all(|c| c.iter().all(|&v| v == c[0]));
    let guarded = flat || w <= W_FLOOR;
    let w = if flat { W_FLOOR } else { w.max(W_FLOOR) };
    ((((n - 1.0) / n * w + b / n) / w).sqrt(), guarded)
}

fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

/// Maximum of the bulk and tail split R̂. Both work on normal scores of the
/// pooled ranks; the tail variant folds the scores about their median, so
/// the result depends on the draws only through their ordering.
pub fn rank_normalized_rhat(chains: &[Vec<f64>]) -> Result<Rhat> {
    check_shape(chains)?;
    if is_constant(chains) {
        return Ok(Rhat {
            value: 1.0,
            degenerate: true,
        });
    }
    let split = split_chains(chains);
    let scores = rank_normalize(&split);
    let (bulk, g1) = classic_rhat(&scores);
    let med = median(&scores.concat());
    let folded: Vec<Vec<f64>> = scores
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let (tail, g2) = classic_rhat(&rank_normalize(&folded));
    Ok(Rhat {
        value: bulk.max(tail),
        degenerate: g1 || g2,
    })
}

/// Biased autocovariance at lag `t` (normalized by `n`).
fn autocov(x: &[f64], m: f64, t: usize) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n - t {
        s += (x[i] - m) * (x[i + t] - m);
    }
    s / n as f64
}

/// Multi-chain ESS with Geyer's initial monotone sequence.
fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov = |t: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocov(c, mu, t))
            .sum::<f64>()
            / m as f64
    };
    let nf = n as f64;
    let mean_var = acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += var(&means);
    }
    if !(var_plus > 0.0) {
        return f64::NAN;
    }

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - acov(1)) / var_plus;
    rho[1] = rho_odd;
    let mut t = 1;
    while t < n.saturating_sub(3) && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - acov(t + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - acov(t + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    // `t` is odd, so `max_t` is -1 only when the loop never ran
    let max_t = t as isize - 2;
    let next = (max_t + 1) as usize;
    if rho_even > 0.0 {
        rho[next] = rho_even;
    }

    let mut t = 1;
    while (t as isize) <= max_t - 2 {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }

    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho[..next].iter().sum::<f64>() + rho[next];
    total / tau.max(1.0 / total.log10())
}

/// Bulk ESS uses rank-normalized split chains; tail ESS is the smaller ESS
/// of the 5% and 95% quantile indicators.
pub fn ess(chains: &[Vec<f64>], kind: EssKind) -> Result<Ess> {
    check_shape(chains)?;
    let degenerate = Ess {
        value: f64::NAN,
        degenerate: true,
    };
    if is_constant(chains) {
        return Ok(degenerate);
    }
    let split = split_chains(chains);
    let value = match kind {
        EssKind::Bulk => ess_raw(&rank_normalize(&split)),
        EssKind::Tail => {
            let mut sorted = chains.concat();
            sorted.sort_by(f64::total_cmp);
            let indicator = |q: f64| -> Vec<Vec<f64>> {
                split
                    .iter()
                    .map(|c| c.iter().map(|&v| f64::from(u8::from(v <= q))).collect())
                    .collect()
            };
            let lo = ess_raw(&indicator(quantile_sorted(&sorted, 0.05)));
            let hi = ess_raw(&indicator(quantile_sorted(&sorted, 0.95)));
            lo.min(hi)
        }
    };
    if value.is_finite() {
        Ok(Ess {
            value,
            degenerate: false,
        })
    } else {
        Ok(degenerate)
    }
}

/// ESS of the mean (split chains, no rank transform).
pub fn ess_mean(chains: &[Vec<f64>]) -> Result<f64> {
    check_shape(chains)?;
    Ok(ess_raw(&split_chains(chains)))
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub mcse_mean: Option<f64>,
    pub q2_5: f64,
    pub q50: f64,
    pub q97_5: f64,
    pub rhat: f64,
    pub rhat_degenerate: bool,
    pub ess_bulk: Option<f64>,
    pub ess_tail: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub passed: bool,
    pub threshold: f64,
    pub max_rhat: f64,
    pub worst_parameter: String,
    pub failing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_chains: usize,
    pub n_samples: usize,
    pub divergences: usize,
    pub params: Vec<ParamSummary>,
}

/// Summary of one parameter given its per-chain draws.
pub fn summarize_param(name: &str, chains: &[Vec<f64>]) -> Result<ParamSummary> {
    let flat = chains.concat();
    let mut sorted = flat.clone();
    sorted.sort_by(f64::total_cmp);
    let m = mean(&flat);
    let sd = if flat.len() > 1 { var(&flat).sqrt() } else { 0.0 };
    let rhat = rank_normalized_rhat(chains)?;
    let finite = |e: Ess| (!e.degenerate).then_some(e.value);
    let em = ess_mean(chains)?;
    Ok(ParamSummary {
        name: name.to_string(),
        mean: m,
        std: sd,
        mcse_mean: (em.is_finite() && em > 0.0).then(|| sd / em.sqrt()),
        q2_5: quantile_sorted(&sorted, 0.025),
        q50: quantile_sorted(&sorted, 0.5),
        q97_5: quantile_sorted(&sorted, 0.975),
        rhat: rhat.value,
        rhat_degenerate: rhat.degenerate,
        ess_bulk: finite(ess(chains, EssKind::Bulk)?),
        ess_tail: finite(ess(chains, EssKind::Tail)?),
    })
}

pub fn summarize(chains: &Chains) -> Result<Summary> {
    let params = chains
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| summarize_param(name, &chains.param(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary {
        n_chains: chains.n_chains(),
        n_samples: chains.n_samples,
        divergences: chains.divergences(),
        params,
    })
}

impl Summary {
    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn gate(&self, threshold: f64) -> GateOutcome {
        let mut worst = ("", f64::NEG_INFINITY);
        let mut failing = Vec::new();
        for p in &self.params {
            if !(p.rhat < threshold) {
                failing.push(p.name.clone());
            }
            if p.rhat > worst.1 || p.rhat.is_nan() {
                worst = (&p.name, p.rhat);
            }
        }
        GateOutcome {
            passed: failing.is_empty(),
            threshold,
            max_rhat: worst.1,
            worst_parameter: worst.0.to_string(),
            failing,
        }
    }

    pub fn to_text(&self) -> String {
        let width = self.params.iter().map(|p| p.name.len()).max().unwrap_or(4).max(9);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$} {:>11} {:>10} {:>11} {:>11} {:>11} {:>7} {:>8} {:>8}",
            "parameter", "mean", "std", "2.5%", "50%", "97.5%", "rhat", "ess_bulk", "ess_tail"
        );
        let ess = |e: Option<f64>| e.map_or_else(|| "-".to_string(), |v| format!("{v:.0}"));
        for p in &self.params {
            let _ = writeln!(
                s,
                "{:<width$} {:>11.4} {:>10.4} {:>11.4} {:>11.4} {:>11.4} {:>7.4} {:>8} {:>8}{}",
                p.name,
                p.mean,
                p.std,
                p.q2_5,
                p.q50,
                p.q97_5,
                p.rhat,
                ess(p.ess_bulk),
                ess(p.ess_tail),
                if p.rhat_degenerate { "  (degenerate)" } else { "" }
            );
        }
        let _ = writeln!(
            s,
            "{} chains x {} draws, {} divergent transitions",
            self.n_chains, self.n_samples, self.divergences
        );
        s
    }

    pub fn write(&self, json: &Path, text: &Path) -> Result<()> {
        std::fs::write(json, serde_json::to_string_pretty(self)?)?;
        std::fs::write(text, self.to_text())?;
        Ok(())
    }
}
