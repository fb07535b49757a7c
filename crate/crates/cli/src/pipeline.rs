//! Stage execution. Every stage reads the configuration plus the artifacts
//! of earlier stages from the output directory and writes its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use hbshm::diagnostics::summarize;
use hbshm::model::build_independent_specs;
use hbshm::plate_synth::{generate_training_set, DatasetSidecar, PlateObservations};
use hbshm::predictive::{compare_pooling, draw_predictive, threshold_strains, DetectionReport, Source};
use hbshm::surrogate::{fit_plate_surrogates, FitOptions};
use hbshm::{
    generate_dataset, run_chains, Chains, GateOutcome, GprModel, ModelSpec, Observations, Summary, RHAT_THRESHOLD,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, PipelineConfig, TrainingSource};
use crate::report;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Hierarchical,
    /// 1-based plate index.
    Independent(usize),
}

impl ModelChoice {
    pub fn dir_name(self) -> String {
        match self {
            ModelChoice::Hierarchical => "hier".to_string(),
            ModelChoice::Independent(k) => format!("indep_plate_{k}"),
        }
    }

    fn seed(self, seed: u64) -> u64 {
        match self {
            ModelChoice::Hierarchical => derive_seed(seed, "infer-hier", 0),
            ModelChoice::Independent(k) => derive_seed(seed, "infer-indep", k as u64),
        }
    }
}

/// Artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset_csv(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }

    pub fn dataset_json(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn surrogate(&self, plate: usize) -> PathBuf {
        self.root.join("surrogates").join(format!("plate_{plate}.json"))
    }

    pub fn chains(&self, model: ModelChoice) -> PathBuf {
        self.root.join("chains").join(model.dir_name())
    }

    pub fn summary(&self, model: ModelChoice) -> PathBuf {
        self.chains(model).join("summary.json")
    }

    pub fn detection_json(&self) -> PathBuf {
        self.root.join("detection").join("report.json")
    }

    pub fn detection_kde(&self) -> PathBuf {
        self.root.join("detection").join("kde.csv")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn plot_data(&self) -> PathBuf {
        self.root.join("plot_data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
}

/// Reproducibility record. Wall times live in `timings.json` so that reruns
/// leave this file byte-identical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<String>,
    pub gates: BTreeMap<String, GateOutcome>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            layout: Layout::new(out),
        })
    }

    fn record(&self, stage: &str, seeds: &[(String, u64)], gate: Option<(String, GateOutcome)>, secs: f64) -> Result<()> {
        let path = self.layout.manifest();
        let mut m: RunManifest = if path.exists() { read_json(&path)? } else { RunManifest::default() };
        if m.config_hash != self.cfg.hash() || m.seed != self.cfg.seed {
            m = RunManifest::default();
        }
        m.version = env!("CARGO_PKG_VERSION").to_string();
        m.config_hash = self.cfg.hash();
        m.seed = self.cfg.seed;
        for (k, v) in seeds {
            m.seeds.insert(k.clone(), *v);
        }
        if !m.stages.iter().any(|s| s == stage) {
            m.stages.push(stage.to_string());
        }
        if let Some((k, g)) = gate {
            m.gates.insert(k, g);
        }
        write_json(&path, &m)?;

        let tpath = self.layout.timings();
        let mut t: BTreeMap<String, f64> = if tpath.exists() { read_json(&tpath)? } else { BTreeMap::new() };
        t.insert(stage.to_string(), secs);
        write_json(&tpath, &t)
    }

    pub fn generate(&self) -> Result<()> {
        let start = Instant::now();
        let seed = derive_seed(self.cfg.seed, "generate", 0);
        let ds = generate_dataset(&self.cfg.dataset, seed)?;
        fs::create_dir_all(&self.layout.root)
            .with_context(|| format!("creating {}", self.layout.root.display()))?;
        ds.write(
            &self.layout.dataset_csv(),
            &self.layout.dataset_json(),
            &self.cfg.dataset,
            seed,
        )?;
        log::info!(
            "generated {} observations over {} plates",
            ds.observations.total(),
            ds.observations.n_plates()
        );
        self.record(
            "generate",
            &[("generate".into(), seed)],
            None,
            start.elapsed().as_secs_f64(),
        )
    }

    pub fn observations(&self) -> Result<Observations> {
        let path = self.layout.dataset_csv();
        let obs = Observations::read_csv(&path)
            .with_context(|| format!("reading {} (run `generate` first)", path.display()))?;
        if obs.counts() != self.cfg.dataset.n_per_plate {
            bail!(
                "{} holds {:?} observations per plate, the configuration expects {:?}",
                path.display(),
                obs.counts(),
                self.cfg.dataset.n_per_plate
            );
        }
        Ok(obs)
    }

    pub fn sidecar(&self) -> Result<DatasetSidecar> {
        read_json(&self.layout.dataset_json())
    }

    pub fn train_surrogates(&self) -> Result<()> {
        let start = Instant::now();
        let s = &self.cfg.surrogate;
        let k_plates = self.cfg.n_plates();
        let mut seeds = Vec::new();
        let training: Vec<PlateObservations> = match s.source {
            TrainingSource::Grid => (1..=k_plates)
                .map(|k| {
                    let seed = derive_seed(self.cfg.seed, "train", k as u64);
                    seeds.push((format!("train_plate_{k}"), seed));
                    generate_training_set(
                        &self.cfg.dataset.oracle,
                        s.grid_points,
                        s.grid_min,
                        s.grid_max,
                        s.noise_std,
                        seed,
                    )
                })
                .collect::<hbshm::Result<_>>()?,
            TrainingSource::Dataset => self.observations()?.plates,
        };
        let fit_seed = derive_seed(self.cfg.seed, "fit", 0);
        seeds.push(("fit".into(), fit_seed));
        let models = fit_plate_surrogates(
            &training,
            FitOptions {
                optimize: s.optimize,
                restarts: s.restarts,
                max_iter: s.max_iter,
                seed: fit_seed,
            },
            s.min_points,
        )?;
        for (k, m) in models.iter().enumerate() {
            let path = self.layout.surrogate(k + 1);
            fs::create_dir_all(path.parent().expect("surrogate dir"))?;
            m.write_json(&path)?;
            log::info!("plate {}: kernel {:?}", k + 1, m.kernel());
        }
        self.record("train-surrogate", &seeds, None, start.elapsed().as_secs_f64())
    }

    pub fn surrogates(&self) -> Result<Vec<Arc<GprModel>>> {
        (1..=self.cfg.n_plates())
            .map(|k| {
                let path = self.layout.surrogate(k);
                GprModel::read_json(&path)
                    .map(Arc::new)
                    .with_context(|| format!("reading {} (run `train-surrogate` first)", path.display()))
            })
            .collect()
    }

    fn spec(&self, model: ModelChoice) -> Result<ModelSpec> {
        let obs = self.observations()?;
        let strains: Vec<Vec<f64>> = obs.plates.iter().map(|p| p.strains.clone()).collect();
        let surrogates = self.surrogates()?;
        Ok(match model {
            ModelChoice::Hierarchical => ModelSpec::hierarchical(&strains, &surrogates, self.cfg.priors)?,
            ModelChoice::Independent(k) => {
                if k == 0 || k > strains.len() {
                    bail!("plate {k} is not in 1..={}", strains.len());
                }
                build_independent_specs(&strains, &surrogates, self.cfg.priors)?.swap_remove(k - 1)
            }
        })
    }

    /// Samples one model, writes its chains, parameter manifest and summary,
    /// and returns the R̂ gate outcome.
    pub fn infer(&self, model: ModelChoice) -> Result<GateOutcome> {
        let start = Instant::now();
        let spec = self.spec(model)?;
        let seed = model.seed(self.cfg.seed);
        let sampler = self.cfg.sampler.with_seed(seed);
        log::info!(
            "sampling {} ({} parameters, {} chains x {} + {} warmup)",
            model.dir_name(),
            spec.dim(),
            sampler.n_chains,
            sampler.n_samples,
            sampler.n_warmup
        );
        let chains = run_chains(&spec, spec.layout().names(), &sampler)?;
        let dir = self.layout.chains(model);
        chains.write(&dir)?;
        write_json(&dir.join("manifest.json"), &spec.layout().manifest())?;
        let summary = summarize(&chains)?;
        summary.write(&dir.join("summary.json"), &dir.join("summary.txt"))?;
        let gate = summary.gate(RHAT_THRESHOLD);
        log::info!(
            "{}: max rhat {:.4} ({}), {} divergences ({:.2}%)",
            model.dir_name(),
            gate.max_rhat,
            gate.worst_parameter,
            chains.divergences(),
            100.0 * chains.divergence_rate()
        );
        if !gate.passed {
            log::warn!(
                "{}: rhat >= {} for {}",
                model.dir_name(),
                RHAT_THRESHOLD,
                gate.failing.join(", ")
            );
        }
        self.record(
            &format!("infer-{}", model.dir_name()),
            &[(format!("infer_{}", model.dir_name()), seed)],
            Some((model.dir_name(), gate.clone())),
            start.elapsed().as_secs_f64(),
        )?;
        Ok(gate)
    }

    pub fn chains(&self, model: ModelChoice) -> Result<Chains> {
        let dir = self.layout.chains(model);
        Chains::read(&dir).with_context(|| format!("reading chains from {} (run `infer` first)", dir.display()))
    }

    pub fn summary(&self, model: ModelChoice) -> Result<Summary> {
        read_json(&self.layout.summary(model))
    }

    /// Plates with stored no-pooling chains.
    pub fn independent_plates(&self) -> Vec<usize> {
        (1..=self.cfg.n_plates())
            .filter(|&k| self.layout.chains(ModelChoice::Independent(k)).join("stats.json").exists())
            .collect()
    }

    pub fn detect(&self) -> Result<DetectionReport> {
        let start = Instant::now();
        let hier = self.chains(ModelChoice::Hierarchical)?;
        let surrogates = self.surrogates()?;
        let focus = self.cfg.focus_plate();
        let plates = self.independent_plates();
        if !plates.contains(&focus) {
            bail!(
                "no-pooling chains for plate {focus} are missing (run `infer --model indep --plate {focus}`)"
            );
        }
        let gamma = hier.flat("gamma")?;
        let mut seeds = Vec::new();
        let mut out = Vec::with_capacity(plates.len());
        for k in plates {
            let indep = self.chains(ModelChoice::Independent(k))?;
            let sur = &surrogates[k - 1];
            let t_seed = derive_seed(self.cfg.seed, "thresholds", k as u64);
            let pp_seed = derive_seed(self.cfg.seed, "predictive-pooled", k as u64);
            let np_seed = derive_seed(self.cfg.seed, "predictive-unpooled", k as u64);
            seeds.extend([
                (format!("thresholds_plate_{k}"), t_seed),
                (format!("predictive_pooled_plate_{k}"), pp_seed),
                (format!("predictive_unpooled_plate_{k}"), np_seed),
            ]);
            let mut rng = ChaCha8Rng::seed_from_u64(t_seed);
            let thresholds = threshold_strains(&self.cfg.detection.levels, sur, &gamma, &mut rng)?;
            let pp = draw_predictive(&hier, k, sur, Source::PartialPooling, pp_seed)?;
            let np = draw_predictive(&indep, k, sur, Source::NoPooling, np_seed)?;
            let det = compare_pooling(&pp, &np, &thresholds)?;
            log::info!(
                "plate {k}: predictive std {:.2} (pooled) vs {:.2} (unpooled), ratio {:.3}",
                det.partial_pooling.std,
                det.no_pooling.std,
                det.std_ratio
            );
            out.push(det);
        }
        let report = DetectionReport { plates: out };
        fs::create_dir_all(self.layout.detection_json().parent().expect("detection dir"))?;
        report.write_json(&self.layout.detection_json())?;
        report.write_kde_csv(&self.layout.detection_kde())?;
        self.record("detect", &seeds, None, start.elapsed().as_secs_f64())?;
        Ok(report)
    }

    pub fn report(&self) -> Result<report::Report> {
        let start = Instant::now();
        let rep = report::build(self)?;
        write_json(&self.layout.report_json(), &rep)?;
        fs::write(self.layout.report_txt(), report::render(self, &rep)?)?;
        report::write_plot_data(self)?;
        self.record("report", &[], None, start.elapsed().as_secs_f64())?;
        Ok(rep)
    }

    /// All stages in order. Returns whether every convergence gate passed;
    /// later stages still run after a gate failure so the artifacts can be
    /// inspected.
    pub fn run_all(&self) -> Result<bool> {
        self.generate()?;
        self.train_surrogates()?;
        let mut passed = self.infer(ModelChoice::Hierarchical)?.passed;
        for k in 1..=self.cfg.n_plates() {
            passed &= self.infer(ModelChoice::Independent(k))?.passed;
        }
        self.detect()?;
        self.report()?;
        Ok(passed)
    }
}
