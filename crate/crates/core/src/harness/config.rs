use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::FocalParams;
use crate::scene::SceneConfig;
use crate::tsfg::TsfgParts;

/// Version of the JSON config layout accepted by this build.
pub const SCHEMA_VERSION: u32 = 1;

/// Which task-oriented prototypes feed scene-prototype aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaSources {
    pub det: bool,
    pub map: bool,
}

impl Default for SpaSources {
    fn default() -> Self {
        Self { det: true, map: true }
    }
}

/// Architecture switches. All off gives the shared-feature baseline; all on
/// gives the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub use_cpg: bool,
    pub use_tsfg_det: bool,
    pub use_tsfg_map: bool,
    pub use_tsfg_occ: bool,
    pub use_spa: bool,
    #[serde(default)]
    pub spa_stop_gradient: bool,
    #[serde(default)]
    pub tsfg_parts: TsfgParts,
    #[serde(default)]
    pub spa_sources: SpaSources,
}

impl Toggles {
    pub const BASELINE: Self = Self {
        use_cpg: false,
        use_tsfg_det: false,
        use_tsfg_map: false,
        use_tsfg_occ: false,
        use_spa: false,
        spa_stop_gradient: false,
        tsfg_parts: TsfgParts::ALL,
        spa_sources: SpaSources { det: true, map: true },
    };

    pub const FULL: Self = Self {
        use_cpg: true,
        use_tsfg_det: true,
        use_tsfg_map: true,
        use_tsfg_occ: true,
        use_spa: true,
        ..Self::BASELINE
    };

    pub fn tsfg(&self) -> [bool; 3] {
        [self.use_tsfg_det, self.use_tsfg_map, self.use_tsfg_occ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_spa && !self.use_cpg {
            return Err(Error::Config("use_spa requires use_cpg (aggregation starts from the occupancy group)".into()));
        }
        if self.spa_stop_gradient && !self.use_spa {
            return Err(Error::Config("spa_stop_gradient has no effect without use_spa".into()));
        }
        if self.tsfg().iter().any(|&b| b) && self.tsfg_parts.uses_prototypes() && !self.use_cpg {
            return Err(Error::Config(
                "prototype-wise and prototype-aware features require use_cpg".into(),
            ));
        }
        Ok(())
    }

    /// Short human-readable tag, e.g. `cpg+tsfg(det,map,occ)+spa`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_cpg {
            parts.push("cpg".to_string());
        }
        let tasks: Vec<&str> = ["det", "map", "occ"]
            .iter()
            .zip(self.tsfg())
            .filter_map(|(n, on)| on.then_some(*n))
            .collect();
        if !tasks.is_empty() {
            parts.push(format!("tsfg({})", tasks.join(",")));
        }
        if self.use_spa {
            parts.push("spa".into());
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

/// Loss settings: focal shape for the suppression, detection and map terms,
/// and the gradient-norm ceiling that aborts a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossClamps {
    pub focal: FocalParams,
    pub max_grad_norm: f64,
}

impl Default for LossClamps {
    fn default() -> Self {
        Self {
            focal: FocalParams::default(),
            max_grad_norm: 1e6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub toggles: Toggles,
    pub scene_config: SceneConfig,
    #[serde(default)]
    pub loss_clamps: LossClamps,
    /// Heatmap threshold for decoded boxes, used both for evaluation and for
    /// the boxes pooled into detection prototypes.
    pub decode_threshold: f64,
    /// Probability threshold for map masks (evaluation and map prototypes).
    pub map_threshold: f64,
    /// RoIAlign lattice side.
    pub roi_lattice: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            train_scenes: 256,
            val_scenes: 64,
            toggles: Toggles::FULL,
            scene_config: SceneConfig::default(),
            loss_clamps: LossClamps::default(),
            decode_threshold: 0.3,
            map_threshold: 0.5,
            roi_lattice: 3,
        }
    }
}

impl TrainConfig {
    /// A few small scenes and two epochs: seconds to run, for tests and demos.
    pub fn smoke() -> Self {
        let mut scene_config = SceneConfig::default();
        scene_config.geometry.x = 16;
        scene_config.geometry.y = 16;
        scene_config.geometry.z = 3;
        scene_config.channels = 8;
        scene_config.box_count = [1, 3];
        Self {
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            train_scenes: 6,
            val_scenes: 3,
            scene_config,
            ..Self::default()
        }
    }

    pub fn with_toggles(mut self, toggles: Toggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Parses JSON and validates; any problem is a config rejection.
    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        match probe.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Config("missing schema_version".into())),
        }
        let cfg: Self = serde_json::from_value(probe).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let reject = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return reject(format!("schema_version {} is not supported", self.schema_version));
        }
        self.toggles.validate()?;
        if self.batch_size == 0 {
            return reject("batch_size must be at least 1".into());
        }
        if self.train_scenes == 0 || self.val_scenes == 0 {
            return reject("train_scenes and val_scenes must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return reject(format!("learning_rate {} must be finite and ≥ 0", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return reject(format!("weight_decay {} must be finite and ≥ 0", self.weight_decay));
        }
        for (name, t) in [("decode_threshold", self.decode_threshold), ("map_threshold", self.map_threshold)] {
            if !(t > 0.0 && t < 1.0) {
                return reject(format!("{name} {t} must lie in (0,1)"));
            }
        }
        if self.roi_lattice == 0 {
            return reject("roi_lattice must be at least 1".into());
        }
        let f = self.loss_clamps.focal;
        if !(f.alpha > 0.0 && f.alpha < 1.0 && f.gamma >= 0.0 && f.gamma.is_finite()) {
            return reject(format!("focal parameters {f:?} out of range"));
        }
        if !(self.loss_clamps.max_grad_norm > 0.0) {
            return reject("max_grad_norm must be positive".into());
        }
        self.scene_config.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("scene_config: {m}")),
            other => Error::Config(format!("scene_config: {other}")),
        })
    }

    /// SHA-256 of the canonical JSON encoding, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(TRAIN_OFFSET).wrapping_add(i as u64)
    }

    pub fn val_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(VAL_OFFSET).wrapping_add(i as u64)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_scenes.div_ceil(self.batch_size)
    }
}

const TRAIN_OFFSET: u64 = 1_000_000;
const VAL_OFFSET: u64 = 2_000_000;
