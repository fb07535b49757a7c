//! Pipeline configuration. Every field has a default, so an empty file (or
//! no file at all) describes the reference setup.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hbshm::predictive::DEFAULT_LEVELS;
use hbshm::{DatasetConfig, Hyperpriors, SamplerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingSource {
    /// A uniform amplitude grid pushed through the strain oracle.
    Grid,
    /// The plate's own observed `(amplitude, strain)` pairs.
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub source: TrainingSource,
    pub grid_points: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    /// Noise std (με) added to the grid strains.
    pub noise_std: f64,
    pub optimize: bool,
    pub restarts: usize,
    pub max_iter: usize,
    /// Plates with fewer training pairs borrow the pooled kernel.
    pub min_points: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            source: TrainingSource::Grid,
            grid_points: 30,
            grid_min: 0.0,
            grid_max: 12.0,
            noise_std: 5.0,
            optimize: true,
            restarts: 5,
            max_iter: 400,
            min_points: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub n_warmup: usize,
    pub n_samples: usize,
    pub n_chains: usize,
    pub target_accept: f64,
    pub max_tree_depth: u32,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            n_warmup: d.n_warmup,
            n_samples: d.n_samples,
            n_chains: d.n_chains,
            target_accept: d.target_accept,
            max_tree_depth: d.max_tree_depth,
        }
    }
}

impl SamplerSection {
    pub fn with_seed(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_warmup: self.n_warmup,
            n_samples: self.n_samples,
            n_chains: self.n_chains,
            target_accept: self.target_accept,
            max_tree_depth: self.max_tree_depth,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// Deflection levels (mm) turned into threshold strains.
    pub levels: Vec<f64>,
    /// Plate whose pooled and unpooled predictions must both exist; defaults
    /// to the last plate.
    pub focus_plate: Option<usize>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS.to_vec(),
            focus_plate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub surrogate: SurrogateConfig,
    pub priors: Hyperpriors,
    pub sampler: SamplerSection,
    pub detection: DetectionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dataset: DatasetConfig::default(),
            surrogate: SurrogateConfig::default(),
            priors: Hyperpriors::default(),
            sampler: SamplerSection::default(),
            detection: DetectionConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn n_plates(&self) -> usize {
        self.dataset.n_plates()
    }

    pub fn focus_plate(&self) -> usize {
        self.detection.focus_plate.unwrap_or(self.n_plates())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.priors.validate()?;
        self.sampler.with_seed(self.seed).validate()?;
        let s = &self.surrogate;
        if s.source == TrainingSource::Grid && (s.grid_points < 2 || !(s.grid_max > s.grid_min) || s.grid_min < 0.0) {
            bail!("surrogate grid needs at least 2 points on 0 <= grid_min < grid_max");
        }
        if !(s.noise_std >= 0.0) {
            bail!("surrogate noise_std must be >= 0");
        }
        let levels = &self.detection.levels;
        if levels.is_empty() || levels.iter().any(|&l| !(l > 0.0)) || levels.windows(2).any(|w| w[1] <= w[0]) {
            bail!("detection levels must be positive and strictly increasing, got {levels:?}");
        }
        let focus = self.focus_plate();
        if focus == 0 || focus > self.n_plates() {
            bail!("focus plate {focus} is not in 1..={}", self.n_plates());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with the seed left out; seeds are
    /// recorded separately in the run manifest.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("seed");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

/// Sub-seed for one pipeline stage: a SplitMix64 finalizer over the run
/// seed, a stage tag and an index.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.bytes().map(u64::from).chain(std::iter::once(index)) {
        h = mix(h.wrapping_add(b).wrapping_add(0x9e37_79b9_7f4a_7c15));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn partial_override() {
        let cfg = PipelineConfig::from_toml(
            "seed = 7\n[dataset]\nn_per_plate = [5]\n[sampler]\nn_warmup = 100\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset.n_per_plate, vec![5]);
        assert_eq!(cfg.dataset.noise_std, 5.0);
        assert_eq!(cfg.sampler.n_warmup, 100);
        assert_eq!(cfg.sampler.n_samples, 2000);
        assert_eq!(cfg.focus_plate(), 1);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(PipelineConfig::from_toml("[sampler]\nwarmup = 3\n").is_err());
        assert!(PipelineConfig::from_toml("[detection]\nlevels = [8.0, 4.0]\n").is_err());
        assert!(PipelineConfig::from_toml("[detection]\nfocus_plate = 9\n").is_err());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.sampler.n_samples = 10;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn derived_seeds_differ_by_tag_and_index() {
        let s = derive_seed(42, "infer", 0);
        assert_eq!(s, derive_seed(42, "infer", 0));
        assert_ne!(s, derive_seed(42, "infer", 1));
        assert_ne!(s, derive_seed(42, "train", 0));
        assert_ne!(s, derive_seed(43, "infer", 0));
    }
}
