//! Run configuration: one flat TOML table of key/value pairs.
//!
//! Every key is optional and falls back to the defaults below; unknown keys
//! are rejected. Command-line `--set key=value` pairs are applied on top of
//! the file, with values parsed as TOML (bare words are read as strings).
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seed` | 0 | master seed for synthesis and dictionary learning |
//! | `mode` | `"given-2d"` | solve mode, `given-2d` or `heatmaps` |
//! | `alpha`, `beta`, `gamma`, `nu` | 0.1, 5, 0.5, 4 | objective weights |
//! | `bcd_tol`, `bcd_max_iters` | 1e-6, 100 | outer solver stopping rule |
//! | `apg_tol`, `apg_max_iters` | 1e-7, 500 | coefficient step |
//! | `rot_grad_tol`, `rot_max_iters` | 1e-8, 100 | rotation step |
//! | `em_tol`, `em_max_iters` | 8e-4, 50 | EM stopping rule (box units) |
//! | `init_inner_rounds`, `init_robust_delta`, `init_ridge` | 5, 0.4, 1e-4 | initializer |
//! | `init_restarts`, `init_candidates` | 8, 4 | initializer search |
//! | `frames`, `active_atoms`, `coeff_scale`, `coeff_walk_std` | 100, 3, 2.5, 0.02 | synthetic coefficients |
//! | `camera_rotation_rate`, `frame_rate` | 15, 10 | synthetic camera (deg/s, Hz) |
//! | `noise_std_2d` | 0 | 2D noise, box units |
//! | `grid_height`, `grid_width`, `blob_sigma` | 32, 32, 1.5 | heat maps |
//! | `corruption_fraction`, `distractor_count`, `distractor_weight`, `swap_probability` | 0, 1, 1.5, 0 | heat-map corruption |
//! | `synth_atom_count`, `synth_atom_angle_std` | 16, 0.4 | generated dictionary when none is given |
//! | `dict_atom_count`, `dict_sparsity_weight`, `dict_outer_iters` | 64, 0.03, 50 | dictionary learning |
//! | `skeleton` | `"human15"` | `human15` or `chain` (joint count from the data) |
//! | `box_pixels`, `pck_threshold_pixels` | 256, 10 | 2D metrics |
//! | `target_mean_limb` | unset | rescale estimates to this mean limb length before scoring |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dict::DictLearnConfig;
use crate::error::{Error, Result};
use crate::init::InitConfig;
use crate::metrics::EvalOptions;
use crate::synth::{CorruptionConfig, SynthConfig};
use crate::types::{ModelParams, SkeletonSpec};
use crate::validate::Validate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    #[serde(rename = "given-2d")]
    Given2d,
    Heatmaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkeletonKind {
    Human15,
    Chain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: SolveMode,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub nu: f64,
    pub bcd_tol: f64,
    pub bcd_max_iters: usize,
    pub apg_tol: f64,
    pub apg_max_iters: usize,
    pub rot_grad_tol: f64,
    pub rot_max_iters: usize,
    pub em_tol: f64,
    pub em_max_iters: usize,

    pub init_inner_rounds: usize,
    pub init_robust_delta: f64,
    pub init_ridge: f64,
    pub init_restarts: usize,
    pub init_candidates: usize,

    pub frames: usize,
    pub active_atoms: usize,
    pub coeff_scale: f64,
    pub coeff_walk_std: f64,
    pub camera_rotation_rate: f64,
    pub frame_rate: f64,
    pub noise_std_2d: f64,
    pub grid_height: usize,
    pub grid_width: usize,
    pub blob_sigma: f64,
    pub corruption_fraction: f64,
    pub distractor_count: usize,
    pub distractor_weight: f64,
    pub swap_probability: f64,
    pub synth_atom_count: usize,
    pub synth_atom_angle_std: f64,

    pub dict_atom_count: usize,
    pub dict_sparsity_weight: f64,
    pub dict_outer_iters: usize,
    pub skeleton: SkeletonKind,

    pub box_pixels: f64,
    pub pck_threshold_pixels: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_mean_limb: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelParams::default();
        let init = InitConfig::default();
        let synth = SynthConfig::default();
        let dict = DictLearnConfig::default();
        let eval = EvalOptions::default();
        RunConfig {
            seed: 0,
            mode: SolveMode::Given2d,
            alpha: model.alpha,
            beta: model.beta,
            gamma: model.gamma,
            nu: model.nu,
            bcd_tol: model.bcd_tol,
            bcd_max_iters: model.bcd_max_iters,
            apg_tol: model.apg_tol,
            apg_max_iters: model.apg_max_iters,
            rot_grad_tol: model.rot_grad_tol,
            rot_max_iters: model.rot_max_iters,
            em_tol: model.em_tol,
            em_max_iters: model.em_max_iters,
            init_inner_rounds: init.inner_rounds,
            init_robust_delta: init.robust_delta,
            init_ridge: init.ridge,
            init_restarts: init.restarts,
            init_candidates: init.candidates,
            frames: synth.frames,
            active_atoms: synth.active_atoms,
            coeff_scale: synth.coeff_scale,
            coeff_walk_std: synth.coeff_walk_std,
            camera_rotation_rate: synth.camera_rotation_rate,
            frame_rate: synth.frame_rate,
            noise_std_2d: synth.noise_std_2d,
            grid_height: synth.grid_height,
            grid_width: synth.grid_width,
            blob_sigma: synth.blob_sigma,
            corruption_fraction: synth.corruption.fraction,
            distractor_count: synth.corruption.distractor_count,
            distractor_weight: synth.corruption.distractor_weight,
            swap_probability: synth.corruption.swap_probability,
            synth_atom_count: 16,
            synth_atom_angle_std: 0.4,
            dict_atom_count: dict.atom_count,
            dict_sparsity_weight: dict.sparsity_weight,
            dict_outer_iters: dict.outer_iters,
            skeleton: SkeletonKind::Human15,
            box_pixels: eval.box_pixels,
            pck_threshold_pixels: eval.pck_threshold_pixels,
            target_mean_limb: eval.target_mean_limb,
        }
    }
}

/// Parses one override value: TOML syntax first, a bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Reads an optional TOML file, applies `key=value` overrides and checks
    /// every derived parameter set.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.check()?;
        Ok(config)
    }

    pub fn check(&self) -> Result<()> {
        self.model_params().check()?;
        self.synth_config().check()?;
        self.dict_config().check()?;
        if !(self.box_pixels > 0.0 && self.pck_threshold_pixels >= 0.0) {
            return Err(Error::InvalidParameter(
                "box_pixels must be positive and pck_threshold_pixels non-negative".into(),
            ));
        }
        if self.synth_atom_count == 0 || !(self.synth_atom_angle_std >= 0.0) {
            return Err(Error::InvalidParameter(
                "synth_atom_count must be positive and synth_atom_angle_std non-negative".into(),
            ));
        }
        if let Some(t) = self.target_mean_limb {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidParameter("target_mean_limb must be positive".into()));
            }
        }
        self.init_config().check()?;
        Ok(())
    }

    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            nu: self.nu,
            bcd_tol: self.bcd_tol,
            bcd_max_iters: self.bcd_max_iters,
            apg_tol: self.apg_tol,
            apg_max_iters: self.apg_max_iters,
            rot_grad_tol: self.rot_grad_tol,
            rot_max_iters: self.rot_max_iters,
            em_tol: self.em_tol,
            em_max_iters: self.em_max_iters,
        }
    }

    pub fn init_config(&self) -> InitConfig {
        InitConfig {
            inner_rounds: self.init_inner_rounds,
            robust_delta: self.init_robust_delta,
            ridge: self.init_ridge,
            restarts: self.init_restarts,
            candidates: self.init_candidates,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            frames: self.frames,
            active_atoms: self.active_atoms,
            coeff_scale: self.coeff_scale,
            coeff_walk_std: self.coeff_walk_std,
            camera_rotation_rate: self.camera_rotation_rate,
            frame_rate: self.frame_rate,
            noise_std_2d: self.noise_std_2d,
            grid_height: self.grid_height,
            grid_width: self.grid_width,
            blob_sigma: self.blob_sigma,
            corruption: CorruptionConfig {
                fraction: self.corruption_fraction,
                distractor_count: self.distractor_count,
                distractor_weight: self.distractor_weight,
                swap_probability: self.swap_probability,
            },
            seed: self.seed,
        }
    }

    pub fn dict_config(&self) -> DictLearnConfig {
        DictLearnConfig {
            atom_count: self.dict_atom_count,
            sparsity_weight: self.dict_sparsity_weight,
            outer_iters: self.dict_outer_iters,
            seed: self.seed,
            ..DictLearnConfig::default()
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            box_pixels: self.box_pixels,
            pck_threshold_pixels: self.pck_threshold_pixels,
            target_mean_limb: self.target_mean_limb,
        }
    }

    /// Skeleton for `joints` joints; `human15` requires exactly 15.
    pub fn skeleton_for(&self, joints: usize) -> Result<SkeletonSpec> {
        match self.skeleton {
            SkeletonKind::Human15 => {
                let s = SkeletonSpec::human15();
                if s.joint_count() != joints {
                    return Err(Error::DimensionMismatch(format!(
                        "human15 skeleton needs 15 joints, data has {joints}"
                    )));
                }
                Ok(s)
            }
            SkeletonKind::Chain => Ok(SkeletonSpec::chain(joints)),
        }
    }
}
