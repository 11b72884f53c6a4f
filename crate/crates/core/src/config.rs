//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{MeshKind, RigParams};
use crate::texture::TextureKind;
use crate::trainer::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub meshes: Vec<MeshKind>,
    pub textures: Vec<TextureKind>,
    /// OBJ file baked in addition to the procedural meshes.
    pub mesh_file: Option<PathBuf>,
    /// Held-out scenes per (mesh, texture) pair.
    pub held_out: usize,
    pub uv_size: usize,
    pub rig: RigParams,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            meshes: MeshKind::ALL.to_vec(),
            textures: TextureKind::ALL.to_vec(),
            mesh_file: None,
            held_out: 2,
            uv_size: 128,
            rig: RigParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BakeConfig {
    pub weight_power: i32,
    pub conflict_threshold: f32,
    /// Temperature of the weight-free oracle attention.
    pub tau: f64,
}

impl Default for BakeConfig {
    fn default() -> Self {
        Self {
            weight_power: crate::baker::DEFAULT_WEIGHT_POWER,
            conflict_threshold: crate::baker::DEFAULT_CONFLICT_THRESHOLD,
            tau: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bake: BakeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            threads: None,
            out_dir: PathBuf::from("out"),
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            bake: BakeConfig::default(),
        }
    }
}

pub const RESOLVED_CONFIG_NAME: &str = "resolved_config.toml";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the global seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.model.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if s.meshes.is_empty() && s.mesh_file.is_none() {
            return Err(Error::Config("scene needs at least one mesh".into()));
        }
        if s.textures.is_empty() {
            return Err(Error::Config("scene needs at least one texture".into()));
        }
        let deepest = 2 * crate::encoding::ENTRY_UNSHUFFLE;
        for (what, n) in [("uv_size", s.uv_size), ("rig.width", s.rig.width), ("rig.height", s.rig.height)] {
            if n == 0 || n % deepest != 0 {
                return Err(Error::Config(format!("{what} = {n} must be a positive multiple of {deepest}")));
            }
        }
        if s.rig.views == 0 {
            return Err(Error::Config("rig needs at least one view".into()));
        }
        if !(s.rig.fov_deg > 0.0 && s.rig.fov_deg < 180.0) {
            return Err(Error::Config(format!("field of view {} outside (0, 180)", s.rig.fov_deg)));
        }
        if !(self.bake.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be positive", self.bake.tau)));
        }
        if self.bake.weight_power < 0 {
            return Err(Error::Config("weight_power must be non-negative".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        let m = &self.model;
        if m.heads == 0 || m.widths.iter().any(|w| *w == 0 || w % m.heads != 0) {
            return Err(Error::Config(format!(
                "widths {:?} must be positive multiples of {} heads",
                m.widths, m.heads
            )));
        }
        if m.bands == 0 {
            return Err(Error::Config("bands must be positive".into()));
        }
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = RunConfig::from_toml("[scene]\nuv_sise = 64\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        // Component seeds all follow the run seed.
        let e = RunConfig::from_toml("[train]\nseed = 4\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[scene]\nmeshes = [\"quad\"]\nuv_size = 32\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!((c.train.seed, c.model.init_seed), (3, 3));
        assert_eq!(c.scene.meshes, vec![MeshKind::Quad]);
        assert_eq!(c.scene.rig, RigParams::default());
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "[scene]\nuv_size = 60\n",
            "[train]\ndrop_view_p = 1.0\n",
            "[model]\nwidths = [30, 64]\nheads = 4\n",
            "[bake]\ntau = 0.0\n",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
