//! Analytic stand-in for the finite-element plate model and the two-level
//! synthetic dataset generator.
//!
//! Each plate `k` gets a local `(mu_k, sigma_k)` drawn from global Normals;
//! deflection amplitudes are drawn from `Normal(mu_k, sigma_k²)` and mapped to
//! transverse strain through [`strain_oracle`] plus white measurement noise.
//! All negative draws are rejected and redrawn, never clamped.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{sample_normal, NormalParams};
use crate::error::{Error, Result};
use crate::textfmt::sig9;

const MAX_REJECTIONS: usize = 100_000;

/// Plate dimensions in mm: `a` is the long side, `b` the short side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateGeometry {
    pub a: f64,
    pub b: f64,
    pub t: f64,
}

impl Default for PlateGeometry {
    fn default() -> Self {
        Self {
            a: 3200.0,
            b: 800.0,
            t: 15.0,
        }
    }
}

impl PlateGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite() && self.t.is_finite()) {
            return Err(Error::NonFinite("plate geometry"));
        }
        if !(self.b > 0.0 && self.a >= self.b && self.t > 0.0) {
            return Err(Error::Config(format!(
                "plate geometry needs a >= b > 0 and t > 0, got a={} b={} t={}",
                self.a, self.b, self.t
            )));
        }
        Ok(())
    }
}

/// Quadratic deflection-to-strain map `eps0 + kappa1·w + kappa2·w²` (με, w in
/// mm). Stands in for the FE operator; loads and material constants are
/// folded into the three coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub eps0: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            eps0: -50.0,
            kappa1: 25.0,
            kappa2: 1.5,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps0.is_finite() && self.kappa1.is_finite() && self.kappa2.is_finite()) {
            return Err(Error::NonFinite("oracle coefficients"));
        }
        if self.kappa1 <= 0.0 {
            return Err(Error::Config(format!(
                "oracle kappa1 must be > 0, got {}",
                self.kappa1
            )));
        }
        Ok(())
    }
}

/// Out-of-plane deflection `amp · sin(πu/a) · sin(πv/b)` at `(u, v)`.
pub fn deflection_field(u: f64, v: f64, geom: &PlateGeometry, amp: f64) -> Result<f64> {
    geom.validate()?;
    if !(0.0..=geom.a).contains(&u) {
        return Err(Error::Domain {
            what: "u",
            value: u,
            domain: "[0, a]",
        });
    }
    if !(0.0..=geom.b).contains(&v) {
        return Err(Error::Domain {
            what: "v",
            value: v,
            domain: "[0, b]",
        });
    }
    if !(amp >= 0.0) {
        return Err(Error::Domain {
            what: "amplitude",
            value: amp,
            domain: "[0, inf)",
        });
    }
    Ok(amp * (PI * u / geom.a).sin() * (PI * v / geom.b).sin())
}

pub fn strain_oracle(amp: f64, cfg: &OracleConfig) -> Result<f64> {
    if !(amp >= 0.0) || !amp.is_finite() {
        return Err(Error::Domain {
            what: "amplitude",
            value: amp,
            domain: "[0, inf)",
        });
    }
    Ok(cfg.eps0 + cfg.kappa1 * amp + cfg.kappa2 * amp * amp)
}

/// Global (population-level) generation values, all in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalTruth {
    pub mu_mu: f64,
    pub sigma_mu: f64,
    pub mu_sigma: f64,
    pub sigma_sigma: f64,
}

impl Default for GlobalTruth {
    fn default() -> Self {
        Self {
            mu_mu: 5.0,
            sigma_mu: 1.2,
            mu_sigma: 0.5,
            sigma_sigma: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Observation count per plate; its length is the number of plates K.
    pub n_per_plate: Vec<usize>,
    pub truth: GlobalTruth,
    pub oracle: OracleConfig,
    /// Measurement noise std in με.
    pub noise_std: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_per_plate: vec![20, 20, 20, 20, 20, 2],
            truth: GlobalTruth::default(),
            oracle: OracleConfig::default(),
            noise_std: 5.0,
        }
    }
}

impl DatasetConfig {
    pub fn n_plates(&self) -> usize {
        self.n_per_plate.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_plate.is_empty() {
            return Err(Error::Config("dataset needs at least one plate".into()));
        }
        if let Some(k) = self.n_per_plate.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!(
                "plate {} has zero observations",
                k + 1
            )));
        }
        self.oracle.validate()?;
        let t = &self.truth;
        if ![t.mu_mu, t.sigma_mu, t.mu_sigma, t.sigma_sigma, self.noise_std]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("dataset ground truth"));
        }
        if !(t.sigma_mu > 0.0 && t.sigma_sigma > 0.0 && t.mu_sigma > 0.0) {
            return Err(Error::Config(
                "ground-truth sigma_mu, mu_sigma and sigma_sigma must be > 0".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateTruth {
    pub mu: f64,
    pub sigma: f64,
}

/// Generation values behind a dataset. Kept for audit and reporting only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub global: GlobalTruth,
    pub plates: Vec<PlateTruth>,
    pub noise_std: f64,
}

/// Observed `(amplitude, strain)` pairs of one plate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlateObservations {
    pub amplitudes: Vec<f64>,
    pub strains: Vec<f64>,
}

impl PlateObservations {
    pub fn len(&self) -> usize {
        self.strains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strains.is_empty()
    }
}

/// Per-plate observations of the whole group, plate `k` at index `k - 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Observations {
    pub plates: Vec<PlateObservations>,
}

pub const DATASET_CSV_HEADER: [&str; 4] = ["plate_index", "obs_index", "amplitude_mm", "strain_microeps"];

impl Observations {
    pub fn n_plates(&self) -> usize {
        self.plates.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.plates.iter().map(PlateObservations::len).collect()
    }

    pub fn total(&self) -> usize {
        self.plates.iter().map(PlateObservations::len).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(DATASET_CSV_HEADER)?;
        for (k, plate) in self.plates.iter().enumerate() {
            for (i, (a, e)) in plate.amplitudes.iter().zip(&plate.strains).enumerate() {
                w.write_record([
                    (k + 1).to_string(),
                    (i + 1).to_string(),
                    sig9(*a),
                    sig9(*e),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the dataset CSV. Plates must be numbered `1..=K` and every plate
    /// needs at least one row.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != DATASET_CSV_HEADER {
            return Err(Error::Parse(format!(
                "{}: expected header {:?}, got {:?}",
                path.display(),
                DATASET_CSV_HEADER,
                header
            )));
        }
        let mut plates: Vec<PlateObservations> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| -> Result<&str> {
                rec.get(i)
                    .ok_or_else(|| Error::Parse(format!("row {}: missing column {i}", line + 2)))
            };
            let parse_err = |e: &dyn std::fmt::Display| Error::Parse(format!("row {}: {e}", line + 2));
            let k: usize = field(0)?.parse().map_err(|e| parse_err(&e))?;
            let amp: f64 = field(2)?.parse().map_err(|e| parse_err(&e))?;
            let strain: f64 = field(3)?.parse().map_err(|e| parse_err(&e))?;
            if k == 0 {
                return Err(Error::Parse(format!("row {}: plate_index starts at 1", line + 2)));
            }
            if plates.len() < k {
                plates.resize_with(k, PlateObservations::default);
            }
            plates[k - 1].amplitudes.push(amp);
            plates[k - 1].strains.push(strain);
        }
        if let Some(k) = plates.iter().position(PlateObservations::is_empty) {
            return Err(Error::Parse(format!("plate {} has no rows", k + 1)));
        }
        Ok(Self { plates })
    }
}

/// A generated dataset. Inference code only ever receives
/// [`Dataset::observations`]; the ground truth travels in its own sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observations: Observations,
    pub ground_truth: GroundTruth,
}

#[derive(Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub seed: u64,
    pub config: DatasetConfig,
    pub ground_truth: GroundTruth,
}

impl Dataset {
    pub fn write(&self, csv_path: &Path, sidecar_path: &Path, cfg: &DatasetConfig, seed: u64) -> Result<()> {
        self.observations.write_csv(csv_path)?;
        let sidecar = DatasetSidecar {
            seed,
            config: cfg.clone(),
            ground_truth: self.ground_truth.clone(),
        };
        let mut f = BufWriter::new(File::create(sidecar_path)?);
        serde_json::to_writer_pretty(&mut f, &sidecar)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

fn draw_positive(p: NormalParams, floor: f64, rng: &mut ChaCha8Rng, what: &str) -> Result<f64> {
    for _ in 0..MAX_REJECTIONS {
        let x = sample_normal(p, rng);
        if x >= floor {
            return Ok(x);
        }
    }
    Err(Error::Config(format!(
        "could not draw {what} >= {floor} from N({}, {}²)",
        p.mean, p.std
    )))
}

pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.truth;
    let sigma_dist = NormalParams::new(t.mu_sigma, t.sigma_sigma)?;
    let mu_dist = NormalParams::new(t.mu_mu, t.sigma_mu)?;

    let mut plates_truth = Vec::with_capacity(cfg.n_plates());
    for _ in 0..cfg.n_plates() {
        let sigma = draw_positive(sigma_dist, f64::MIN_POSITIVE, &mut rng, "sigma_k")?;
        // keep P(w < 0) below ~0.13% so truncation of the local Normal stays negligible
        let mu = draw_positive(mu_dist, 3.0 * sigma, &mut rng, "mu_k")?;
        plates_truth.push(PlateTruth { mu, sigma });
    }

    let mut plates = Vec::with_capacity(cfg.n_plates());
    for (pt, &n) in plates_truth.iter().zip(&cfg.n_per_plate) {
        let local = NormalParams::new(pt.mu, pt.sigma)?;
        let mut obs = PlateObservations {
            amplitudes: Vec::with_capacity(n),
            strains: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let amp = draw_positive(local, 0.0, &mut rng, "amplitude")?;
            let noise = if cfg.noise_std > 0.0 {
                sample_normal(NormalParams::new(0.0, cfg.noise_std)?, &mut rng)
            } else {
                0.0
            };
            obs.amplitudes.push(amp);
            obs.strains.push(strain_oracle(amp, &cfg.oracle)? + noise);
        }
        plates.push(obs);
    }

    Ok(Dataset {
        observations: Observations { plates },
        ground_truth: GroundTruth {
            global: t,
            plates: plates_truth,
            noise_std: cfg.noise_std,
        },
    })
}

/// Surrogate training design: `n` amplitudes on a uniform grid over
/// `[lo, hi]` mapped through the oracle, plus Normal noise of `noise_std`.
pub fn generate_training_set(
    oracle: &OracleConfig,
    n: usize,
    lo: f64,
    hi: f64,
    noise_std: f64,
    seed: u64,
) -> Result<PlateObservations> {
    oracle.validate()?;
    if n < 2 || !(hi > lo) || lo < 0.0 {
        return Err(Error::Config(format!(
            "training grid needs n >= 2 and 0 <= lo < hi, got n={n} lo={lo} hi={hi}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PlateObservations::default();
    for i in 0..n {
        let amp = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let noise = if noise_std > 0.0 {
            sample_normal(NormalParams::new(0.0, noise_std)?, &mut rng)
        } else {
            0.0
        };
        out.amplitudes.push(amp);
        out.strains.push(strain_oracle(amp, oracle)? + noise);
    }
    Ok(out)
}
