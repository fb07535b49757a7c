//! Multi-chain driver: warmup adaptation, sampling, and chain persistence.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{find_reasonable_step, nuts_draw, DualAveraging, LogDensity, Metric, PhasePoint, WindowedVariance};
use crate::error::{Error, Result};

const MAX_INIT_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_warmup: usize,
    pub n_samples: usize,
    pub n_chains: usize,
    pub target_accept: f64,
    pub max_tree_depth: u32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_warmup: 4000,
            n_samples: 2000,
            n_chains: 4,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_chains == 0 || self.max_tree_depth == 0 {
            return Err(Error::Config(
                "n_samples, n_chains and max_tree_depth must be positive".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        Ok(())
    }
}

/// Per-draw sampler statistics of one chain, stored column-wise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub seed: u64,
    pub stream: u64,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub accept_stat: Vec<f64>,
    pub tree_depth: Vec<u32>,
    pub n_leapfrog: Vec<u32>,
    pub divergent: Vec<bool>,
    pub energy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    /// Row-major `[draw][param]`, constrained space.
    pub constrained: Vec<f64>,
    /// Row-major `[draw][param]`, unconstrained space. Empty when the chain
    /// was reloaded from CSV.
    pub unconstrained: Vec<f64>,
    pub stats: ChainStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chains {
    pub names: Vec<String>,
    pub n_samples: usize,
    pub chains: Vec<ChainDraws>,
}

impl Chains {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_total(&self) -> usize {
        self.n_chains() * self.n_samples
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Draws of parameter `j`, one vector per chain.
    pub fn param(&self, j: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        self.chains
            .iter()
            .map(|c| c.constrained.iter().skip(j).step_by(d).copied().collect())
            .collect()
    }

    pub fn param_by_name(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        Ok(self.param(self.index_of(name)?))
    }

    /// Draws of parameter `name` with all chains concatenated in index order.
    pub fn flat(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.param_by_name(name)?.concat())
    }

    pub fn divergences(&self) -> usize {
        self.chains.iter().map(|c| c.stats.divergences).sum()
    }

    pub fn divergence_rate(&self) -> f64 {
        self.divergences() as f64 / self.n_total().max(1) as f64
    }

    pub fn mean_accept_stat(&self) -> f64 {
        let total: f64 = self.chains.iter().flat_map(|c| &c.stats.accept_stat).sum();
        total / self.n_total().max(1) as f64
    }

    /// Writes `chain_<c>.csv` per chain (constrained draws, header = parameter
    /// names) and `stats.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let d = self.dim();
        for (c, chain) in self.chains.iter().enumerate() {
            let mut w = csv::Writer::from_path(dir.join(format!("chain_{c}.csv")))?;
            w.write_record(&self.names)?;
            for row in chain.constrained.chunks(d) {
                w.write_record(row.iter().map(|v| format!("{v:?}")))?;
            }
            w.flush()?;
        }
        let stats: Vec<&ChainStats> = self.chains.iter().map(|c| &c.stats).collect();
        fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
        Ok(())
    }

    /// Reloads chains written by [`Chains::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let stats: Vec<ChainStats> = serde_json::from_str(&fs::read_to_string(dir.join("stats.json"))?)?;
        let mut names = Vec::new();
        let mut chains = Vec::with_capacity(stats.len());
        let mut n_samples = None;
        for (c, st) in stats.into_iter().enumerate() {
            let mut r = csv::Reader::from_path(dir.join(format!("chain_{c}.csv")))?;
            let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
            if c == 0 {
                names = header;
            } else if header != names {
                return Err(Error::Parse(format!("chain {c} has a different header")));
            }
            let mut constrained = Vec::new();
            let mut rows = 0;
            for rec in r.records() {
                let rec = rec?;
                for field in rec.iter() {
                    let v: f64 = field
                        .parse()
                        .map_err(|_| Error::Parse(format!("chain {c}: bad value {field:?}")))?;
                    constrained.push(v);
                }
                rows += 1;
            }
            if *n_samples.get_or_insert(rows) != rows {
                return Err(Error::Parse(format!("chain {c} has {rows} draws")));
            }
            chains.push(ChainDraws {
                constrained,
                unconstrained: Vec::new(),
                stats: st,
            });
        }
        Ok(Self {
            names,
            n_samples: n_samples.unwrap_or(0),
            chains,
        })
    }
}

fn initial_point<T: LogDensity + ?Sized>(target: &T, rng: &mut ChaCha8Rng) -> Result<PhasePoint> {
    for _ in 0..MAX_INIT_TRIES {
        let q: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = PhasePoint::new(target, q);
        if z.logp.is_finite() && z.grad.iter().all(|g| g.is_finite()) {
            return Ok(z);
        }
    }
    Err(Error::Sampler(format!(
        "no finite initial point after {MAX_INIT_TRIES} draws from Uniform(-1, 1)"
    )))
}

fn run_chain<T: LogDensity + ?Sized>(target: &T, cfg: &SamplerConfig, chain: usize) -> Result<ChainDraws> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);

    let mut z = initial_point(target, &mut rng)?;
    let mut metric = Metric::unit(dim);
    let mut step = find_reasonable_step(target, &z, 1.0, &metric, &mut rng);
    let mut dual = DualAveraging::new(cfg.target_accept, step);
    let mut windows = WindowedVariance::new(dim, cfg.n_warmup);

    let mut warmup_divergences = 0;
    for _ in 0..cfg.n_warmup {
        let (next, stats) = nuts_draw(target, &z, step, &metric, cfg.max_tree_depth, &mut rng);
        z = next;
        warmup_divergences += usize::from(stats.divergent);
        step = dual.update(stats.accept_stat);
        if let Some(inv_mass) = windows.observe(&z.q) {
            metric.inv_mass = inv_mass;
            step = find_reasonable_step(target, &z, step, &metric, &mut rng);
            dual.restart(step);
        }
    }
    if cfg.n_warmup > 0 {
        if warmup_divergences == cfg.n_warmup {
            return Err(Error::Sampler(format!(
                "chain {chain}: every warmup transition diverged (final step size {step:.3e}); \
                 the posterior geometry is likely degenerate"
            )));
        }
        step = dual.final_step();
    }
    log::debug!("chain {chain}: step size {step:.4e} after {} warmup draws", cfg.n_warmup);

    let mut constrained = Vec::with_capacity(cfg.n_samples * dim);
    let mut unconstrained = Vec::with_capacity(cfg.n_samples * dim);
    let mut row = vec![0.0; dim];
    let mut stats = ChainStats {
        seed: cfg.seed,
        stream: chain as u64,
        step_size: step,
        warmup_divergences,
        ..ChainStats::default()
    };
    for _ in 0..cfg.n_samples {
        let (next, s) = nuts_draw(target, &z, step, &metric, cfg.max_tree_depth, &mut rng);
        z = next;
        target.constrain(&z.q, &mut row);
        constrained.extend_from_slice(&row);
        unconstrained.extend_from_slice(&z.q);
        stats.divergences += usize::from(s.divergent);
        stats.accept_stat.push(s.accept_stat);
        stats.tree_depth.push(s.tree_depth);
        stats.n_leapfrog.push(s.n_leapfrog);
        stats.divergent.push(s.divergent);
        stats.energy.push(s.energy);
    }
    stats.inv_mass = metric.inv_mass;
    Ok(ChainDraws {
        constrained,
        unconstrained,
        stats,
    })
}

/// Runs `cfg.n_chains` independent chains in parallel. Chain `c` draws from
/// stream `c` of a generator seeded with `cfg.seed`, so the result does not
/// depend on scheduling.
pub fn run_chains<T: LogDensity + ?Sized>(target: &T, names: Vec<String>, cfg: &SamplerConfig) -> Result<Chains> {
    cfg.validate()?;
    if names.len() != target.dim() {
        return Err(Error::InvalidParameter(format!(
            "{} names for a {}-dimensional target",
            names.len(),
            target.dim()
        )));
    }
    let chains = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Chains {
        names,
        n_samples: cfg.n_samples,
        chains,
    })
}
