//! JSON run configurations, schema-validated before any compute.
//!
//! Every document carries a `version` field and rejects unknown keys,
//! so typos in tuning grids or design fields fail loudly instead of
//! silently using defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mrglmm_core::mcem::{McemConfig, Mode, SigmaThetaPolicy};
use mrglmm_core::model::{DiagonalPolicy, Family};
use mrglmm_core::mstep::MstepConfig;
use mrglmm_core::sampler::MwgConfig;
use mrglmm_core::sim::SimDesign;
use mrglmm_core::tuning::TuningGrid;

use crate::dataio::{self, CliError};

pub const SCHEMA_VERSION: u32 = 1;

fn default_version() -> u32 {
    SCHEMA_VERSION
}

fn check_version(version: u32) -> Result<(), CliError> {
    if version != SCHEMA_VERSION {
        return Err(CliError::invalid(format!(
            "unsupported config version {version}, expected {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

/// Sampler settings (the seed comes from the top-level config).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MwgSpec {
    pub m: usize,
    pub burn_in: usize,
    pub proposal_sd: f64,
    pub adapt: bool,
    pub whole_matrix: bool,
}

impl Default for MwgSpec {
    fn default() -> Self {
        let d = MwgConfig::default();
        MwgSpec {
            m: d.m,
            burn_in: d.burn_in,
            proposal_sd: d.proposal_sd,
            adapt: d.adapt,
            whole_matrix: d.whole_matrix,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MstepSpec {
    pub gamma: f64,
    pub s: f64,
    pub c0: f64,
    pub eps_m: f64,
    pub max_inner_iters: usize,
    pub step_multipliers: [f64; 3],
}

impl Default for MstepSpec {
    fn default() -> Self {
        let d = MstepConfig::default();
        MstepSpec {
            gamma: d.gamma,
            s: d.s,
            c0: d.c0,
            eps_m: d.eps_m,
            max_inner_iters: d.max_inner_iters,
            step_multipliers: d.step_multipliers,
        }
    }
}

/// Random-intercept variance policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaThetaSpec {
    /// One shared fixed variance.
    Fixed { value: f64 },
    /// Fixed variance matrix loaded from a dense CSV.
    FixedMatrix { path: PathBuf },
    /// Monte Carlo moment refresh from the given starting value.
    MomentRefresh { init: f64 },
}

impl Default for SigmaThetaSpec {
    fn default() -> Self {
        SigmaThetaSpec::Fixed { value: 1.0 }
    }
}

impl SigmaThetaSpec {
    pub fn to_policy(&self) -> Result<SigmaThetaPolicy, CliError> {
        Ok(match self {
            SigmaThetaSpec::Fixed { value } => SigmaThetaPolicy::FixedScalar(*value),
            SigmaThetaSpec::FixedMatrix { path } => {
                SigmaThetaPolicy::FixedMatrix(dataio::read_dense_matrix(path)?)
            }
            SigmaThetaSpec::MomentRefresh { init } => {
                SigmaThetaPolicy::MomentRefresh { init: *init }
            }
        })
    }
}

/// EM loop settings shared by `fit`, `tune` and `replicate`.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct McemSpec {
    pub mwg: MwgSpec,
    pub mstep: MstepSpec,
    pub eps_em: Option<f64>,
    pub max_outer_iters: Option<usize>,
    pub sigma_e2_update: Option<bool>,
    pub sigma_theta: SigmaThetaSpec,
    pub quad_points: Option<usize>,
}

impl McemSpec {
    pub fn to_core(&self, r: usize, seed: u64, mode: Mode) -> Result<McemConfig, CliError> {
        let mut config = McemConfig::new(r);
        config.mwg = MwgConfig {
            m: self.mwg.m,
            burn_in: self.mwg.burn_in,
            proposal_sd: self.mwg.proposal_sd,
            seed,
            adapt: self.mwg.adapt,
            whole_matrix: self.mwg.whole_matrix,
        };
        config.mstep = MstepConfig {
            gamma: self.mstep.gamma,
            s: self.mstep.s,
            c0: self.mstep.c0,
            eps_m: self.mstep.eps_m,
            max_inner_iters: self.mstep.max_inner_iters,
            step_multipliers: self.mstep.step_multipliers,
        };
        if let Some(v) = self.eps_em {
            config.eps_em = v;
        }
        if let Some(v) = self.max_outer_iters {
            config.max_outer_iters = v;
        }
        if let Some(v) = self.sigma_e2_update {
            config.sigma_e2_update = v;
        }
        if let Some(v) = self.quad_points {
            config.quad_points = v;
        }
        config.mode = mode;
        config.sigma_theta = self.sigma_theta.to_policy()?;
        Ok(config)
    }
}

/// Synthetic design shared by `simulate` and `replicate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSpec {
    pub n: usize,
    pub p: usize,
    pub n_subjects: usize,
    pub t_obs: usize,
    pub r: usize,
    pub s: f64,
    pub family: Family,
    pub theta_var: f64,
    pub noise_var: f64,
    pub b_value: f64,
}

impl Default for DesignSpec {
    fn default() -> Self {
        let d = SimDesign::default();
        DesignSpec {
            n: d.n,
            p: d.p,
            n_subjects: d.n_subjects,
            t_obs: d.t_obs,
            r: d.r,
            s: d.s,
            family: d.family,
            theta_var: d.theta_var,
            noise_var: d.noise_var,
            b_value: d.b_value,
        }
    }
}

impl DesignSpec {
    pub fn to_core(&self, replicates: usize, master_seed: u64) -> SimDesign {
        SimDesign {
            n: self.n,
            p: self.p,
            n_subjects: self.n_subjects,
            t_obs: self.t_obs,
            r: self.r,
            s: self.s,
            family: self.family,
            theta_var: self.theta_var,
            noise_var: self.noise_var,
            b_value: self.b_value,
            replicates,
            master_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub r_candidates: Vec<usize>,
    pub s_candidates: Vec<f64>,
    pub c: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        let d = TuningGrid::default();
        GridSpec { r_candidates: d.r_candidates, s_candidates: d.s_candidates, c: d.c }
    }
}

impl GridSpec {
    pub fn to_core(&self) -> TuningGrid {
        TuningGrid {
            r_candidates: self.r_candidates.clone(),
            s_candidates: self.s_candidates.clone(),
            c: self.c,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub design: DesignSpec,
    /// Which replicate sub-stream to draw (defaults to 0).
    #[serde(default)]
    pub replicate_index: usize,
    /// Diagonal policy recorded in the manifest for downstream fits.
    /// The generators draw every entry; `exclude` drops diagonal rows
    /// from the written responses.
    #[serde(default = "include_policy")]
    pub diagonal_policy: DiagonalPolicy,
}

fn include_policy() -> DiagonalPolicy {
    DiagonalPolicy::Include
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSpec {
    Asymmetric,
    SymmetricRefine,
}

impl ModeSpec {
    pub fn to_core(self) -> Mode {
        match self {
            ModeSpec::Asymmetric => Mode::Asymmetric,
            ModeSpec::SymmetricRefine => Mode::SymmetricRefine,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub r: usize,
    #[serde(default = "asymmetric_mode")]
    pub mode: ModeSpec,
    #[serde(default)]
    pub mcem: McemSpec,
    /// Optional warm start from a saved parameter directory.
    #[serde(default)]
    pub init_params_dir: Option<PathBuf>,
    /// Required when `mode` is `symmetric_refine`.
    #[serde(default)]
    pub asym_params_dir: Option<PathBuf>,
    /// Overrides the dataset manifest's diagonal policy.
    #[serde(default)]
    pub diagonal_policy: Option<DiagonalPolicy>,
}

fn asymmetric_mode() -> ModeSpec {
    ModeSpec::Asymmetric
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub mcem: McemSpec,
    #[serde(default)]
    pub diagonal_policy: Option<DiagonalPolicy>,
}

/// Per-replicate `(r, s)` choice for the replication harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TableFitSpec {
    /// Fit at the design's generating values.
    Oracle,
    /// Two-stage EBIC selection with the given grid.
    Tuned { grid: GridSpec },
}

impl Default for TableFitSpec {
    fn default() -> Self {
        TableFitSpec::Oracle
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub design: DesignSpec,
    pub replicates: usize,
    #[serde(default)]
    pub fit: TableFitSpec,
    #[serde(default)]
    pub mcem: McemSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub fitted_dir: PathBuf,
    pub truth_dir: PathBuf,
    pub out_dir: PathBuf,
}

/// Parse a config file, rejecting unknown keys and bad versions.
pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::invalid(format!("cannot read config {}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let config: T = serde_path_to_error(&mut de, path)?;
    Ok(config)
}

fn serde_path_to_error<'de, T: serde::de::Deserialize<'de>>(
    de: &mut serde_json::Deserializer<serde_json::de::StrRead<'de>>,
    path: &Path,
) -> Result<T, CliError> {
    T::deserialize(de)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn validate_version(version: u32) -> Result<(), CliError> {
    check_version(version)
}

/// Hash of the effective configuration (output directory excluded, so
/// equal-hash runs are byte-comparable wherever they write).
pub fn config_hash<T: Serialize>(effective: &T) -> Result<String, CliError> {
    let mut value = serde_json::to_value(effective)
        .map_err(|e| CliError::invalid(format!("cannot serialize config: {e}")))?;
    if let Some(map) = value.as_object_mut() {
        map.remove("out_dir");
    }
    let canonical = value.to_string();
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
