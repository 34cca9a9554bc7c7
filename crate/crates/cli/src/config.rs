//! Run configuration: a single TOML file drives every pipeline stage.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spfmm::basis::WaveletSpec;
use spfmm::design::ModelSpec;
use spfmm::wavelet::{Boundary, FilterKind};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub wavelet: WaveletSection,
    #[serde(default)]
    pub transform: TransformSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub select: SelectSection,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Path to a dataset manifest; defaults to the simulate stage output.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveletSection {
    pub filter: String,
    pub levels: usize,
    pub boundary_meridional: String,
    pub boundary_circumferential: String,
}

impl Default for WaveletSection {
    fn default() -> Self {
        WaveletSection {
            filter: "db3".into(),
            levels: 5,
            boundary_meridional: "reflection".into(),
            boundary_circumferential: "periodic".into(),
        }
    }
}

impl WaveletSection {
    pub fn to_spec(&self) -> Result<WaveletSpec> {
        let parse_boundary = |s: &str| -> Result<Boundary> {
            match s {
                "reflection" => Ok(Boundary::Reflection),
                "periodic" => Ok(Boundary::Periodic),
                other => bail!("unknown boundary {other:?} (expected reflection or periodic)"),
            }
        };
        if self.levels == 0 {
            bail!("wavelet levels must be >= 1");
        }
        Ok(WaveletSpec {
            filter: FilterKind::parse(&self.filter)?,
            levels: self.levels,
            boundary_meridional: parse_boundary(&self.boundary_meridional)?,
            boundary_circumferential: parse_boundary(&self.boundary_circumferential)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSection {
    pub spike_ratio: f64,
    pub energy_threshold: f64,
    /// Optional principal-component reduction after compression.
    pub pc_scree_threshold: Option<f64>,
}

impl Default for TransformSection {
    fn default() -> Self {
        TransformSection { spike_ratio: 100.0, energy_threshold: 0.995, pc_scree_threshold: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub formula: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            formula: "value ~ np(age) + hyper(iop) + (hyper(iop) | unit)".into(),
        }
    }
}

impl ModelSection {
    pub fn to_spec(&self) -> Result<ModelSpec> {
        ModelSpec::parse(&self.formula)
            .with_context(|| format!("parsing model formula {:?}", self.formula))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateEntry {
    pub id: String,
    pub formula: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    /// "abic" or "aaic"; both are always reported.
    pub criterion: String,
    /// "joint" (one-stage vote) or "two_step" (fixed first, then random).
    pub mode: String,
    pub candidates: Vec<CandidateEntry>,
    /// Random-structure candidates for two-step mode, as full formulas whose
    /// random parts are compared under the stage-1 winner.
    pub random_candidates: Vec<CandidateEntry>,
}

impl Default for SelectSection {
    fn default() -> Self {
        SelectSection {
            criterion: "abic".into(),
            mode: "two_step".into(),
            candidates: vec![
                CandidateEntry { id: "null".into(), formula: "value ~ 1".into() },
                CandidateEntry { id: "lin_age".into(), formula: "value ~ lin(age)".into() },
                CandidateEntry {
                    id: "np_age_hyper".into(),
                    formula: "value ~ np(age) + hyper(iop)".into(),
                },
            ],
            random_candidates: vec![
                CandidateEntry { id: "unit_const".into(), formula: "value ~ (1 | unit)".into() },
                CandidateEntry {
                    id: "unit_hyper".into(),
                    formula: "value ~ (hyper(iop) | unit)".into(),
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub n_burn: usize,
    pub n_keep: usize,
    pub thin: usize,
    pub workers: usize,
    /// Spike-slab hyperparameters: "empirical_bayes" or "none" (pi = 1,
    /// tau = 1e6).
    pub shrinkage: String,
    /// Minimum coefficients per regularization set before merging.
    pub min_set_size: usize,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection {
            n_burn: 5000,
            n_keep: 10_000,
            thin: 10,
            workers: 1,
            shrinkage: "empirical_bayes".into(),
            min_set_size: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub alpha: f64,
    pub n_ages: usize,
    /// Keep every n-th grid location for the full-surface summaries.
    pub location_stride: usize,
    /// Coarser stride for age-crossed surfaces (draws scale with
    /// n_ages x locations).
    pub age_location_stride: usize,
    /// Locations per axis for the degrees-of-freedom map.
    pub df_locations: usize,
    /// Posterior draws used for the DF map (subsampled evenly).
    pub df_draws: usize,
    pub serial_range: (f64, f64),
    pub heatmaps: bool,
    /// Meridional bands [theta_lo, theta_hi] to aggregate, with labels.
    pub regions: Vec<RegionEntry>,
    /// Use uniform instead of spherical-area weights in aggregation.
    pub flat_weights: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionEntry {
    pub label: String,
    pub theta_lo: f64,
    pub theta_hi: f64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            alpha: 0.05,
            n_ages: 71,
            location_stride: 1,
            age_location_stride: 8,
            df_locations: 8,
            df_draws: 200,
            serial_range: (7.0, 45.0),
            heatmaps: false,
            regions: vec![
                RegionEntry { label: "pp".into(), theta_lo: 9.0, theta_hi: 17.0 },
                RegionEntry { label: "mp".into(), theta_lo: 17.0, theta_hi: 24.0 },
            ],
            flat_weights: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub subjects: usize,
    /// Units (eyes) that contribute; subjects beyond this count lend one eye.
    pub single_unit_subjects: usize,
    pub n_meridional: usize,
    pub n_circumferential: usize,
    pub age_range: (f64, f64),
    pub serial_levels: Vec<f64>,
    /// Coefficients carrying structured signal.
    pub k_active: usize,
    /// Fraction of total signal energy contributed by broadband noise.
    pub noise_fraction: f64,
    /// Scale of the random-effect variances relative to the fixed signal.
    pub re_scale: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            subjects: 19,
            single_unit_subjects: 4,
            n_meridional: 120,
            n_circumferential: 120,
            age_range: (20.0, 90.0),
            serial_levels: vec![7.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0],
            k_active: 300,
            noise_fraction: 0.001,
            re_scale: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 20260810, output_dir: PathBuf::from("spfmm_out") }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.wavelet.to_spec()?;
        self.model.to_spec()?;
        if !(self.transform.energy_threshold > 0.0 && self.transform.energy_threshold <= 1.0) {
            bail!("transform.energy_threshold must lie in (0, 1]");
        }
        if self.transform.spike_ratio <= 1.0 {
            bail!("transform.spike_ratio must exceed 1");
        }
        if let Some(t) = self.transform.pc_scree_threshold {
            if !(t > 0.0 && t <= 1.0) {
                bail!("transform.pc_scree_threshold must lie in (0, 1]");
            }
        }
        if !(self.inference.alpha > 0.0 && self.inference.alpha < 1.0) {
            bail!("inference.alpha must lie in (0, 1)");
        }
        if self.chain.thin == 0 || self.chain.n_keep % self.chain.thin != 0 {
            bail!("chain.thin must divide chain.n_keep");
        }
        match self.select.criterion.as_str() {
            "abic" | "aaic" => {}
            other => bail!("select.criterion {other:?} (expected abic or aaic)"),
        }
        match self.select.mode.as_str() {
            "joint" | "two_step" => {}
            other => bail!("select.mode {other:?} (expected joint or two_step)"),
        }
        for c in self.select.candidates.iter().chain(&self.select.random_candidates) {
            ModelSpec::parse(&c.formula)
                .with_context(|| format!("candidate {:?} formula {:?}", c.id, c.formula))?;
        }
        match self.chain.shrinkage.as_str() {
            "empirical_bayes" | "none" => {}
            other => bail!("chain.shrinkage {other:?} (expected empirical_bayes or none)"),
        }
        if self.simulate.subjects == 0 || self.simulate.serial_levels.len() < 3 {
            bail!("simulate needs subjects >= 1 and >= 3 serial levels");
        }
        Ok(())
    }

    /// Canonical hash of the configuration (stable serialization).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex::encode(&hasher.finalize()[..16])
    }
}
