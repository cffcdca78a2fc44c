//! Experiment description. Files are TOML written with flat dotted keys
//! (`model.bottleneck_k = 64`); every field has a default, so a file only
//! lists what it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workspace::{BottleneckConfig, ImportanceScores, MemoryInit, NormScope, TopkScope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub memory_slots: usize,
    pub slot_dim: usize,
    pub bottleneck_heads: usize,
    pub bottleneck_k: usize,
    pub beta: f64,
    pub memory_init: MemoryInit,
    pub norm_scope: NormScope,
    pub topk_scope: TopkScope,
    pub hopfield_iters: usize,
    pub hopfield_tol: f64,
    pub pre_norm: bool,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            embed_dim: 768,
            heads: 12,
            mlp_dim: 3072,
            memory_slots: 32,
            slot_dim: 32,
            bottleneck_heads: 8,
            bottleneck_k: 512,
            beta: 1.0,
            memory_init: MemoryInit::Gaussian,
            norm_scope: NormScope::Memory,
            topk_scope: TopkScope::Slot,
            hopfield_iters: 1,
            hopfield_tol: 1e-4,
            pre_norm: true,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub use_memory: bool,
    pub use_hopfield: bool,
    pub use_bottleneck: bool,
    pub use_sa: bool,
    pub use_ff: bool,
    pub reset_memory_each_epoch: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_memory: true,
            use_hopfield: true,
            use_bottleneck: true,
            use_sa: true,
            use_ff: true,
            reset_memory_each_epoch: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub min_lr: f64,
    /// Learning rate at step 0; warmup rises linearly from here.
    pub warmup_start_lr: f64,
    pub cosine: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_epochs: 5,
            total_epochs: 100,
            min_lr: 1e-6,
            warmup_start_lr: 1e-6,
            cosine: true,
        }
    }
}

/// How per-layer balance losses combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub sigma: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub layer_reduction: LayerReduction,
    pub importance: ImportanceScores,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            sigma: 1e-2,
            epsilon: 1e-10,
            alpha: 0.9,
            layer_reduction: LayerReduction::Sum,
            importance: ImportanceScores::PreMask,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Triangle,
    TwoBlob,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// AITDATA1 files when `source = "file"`.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub train_count: usize,
    pub test_count: usize,
    pub side: usize,
    pub triangle_spread: f64,
    pub triangle_tolerance: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hflip: bool,
    pub vflip: bool,
    /// Random row/column swap; square images only.
    pub transpose: bool,
    pub normalize_mean: Option<Vec<f32>>,
    pub normalize_std: Option<Vec<f32>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Triangle,
            train_path: None,
            test_path: None,
            train_count: 5000,
            test_count: 1000,
            side: 32,
            triangle_spread: 1.0,
            triangle_tolerance: 0.05,
            batch_size: 512,
            seed: 0,
            hflip: false,
            vflip: false,
            transpose: false,
            normalize_mean: None,
            normalize_std: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every_epochs: usize,
    pub resume_from: Option<PathBuf>,
    /// Stop after this many optimizer steps in total (schedule unaffected).
    pub max_steps: Option<u64>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            checkpoint_dir: None,
            metrics_path: None,
            checkpoint_every_epochs: 1,
            resume_from: None,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub ablation: AblationConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl TrainConfig {
    /// Two layers, E=64, four heads, eight 8-dimensional slots, k=4: the
    /// desk-scale model used throughout the tests.
    pub fn tiny() -> Self {
        let mut c = TrainConfig::default();
        c.model = ModelConfig {
            layers: 2,
            embed_dim: 64,
            heads: 4,
            mlp_dim: 128,
            memory_slots: 8,
            slot_dim: 8,
            bottleneck_heads: 4,
            bottleneck_k: 4,
            patch_size: 8,
            image_size: 32,
            channels: 1,
            classes: 2,
            ..ModelConfig::default()
        };
        c.data.batch_size = 32;
        c
    }

    pub fn bottleneck(&self) -> BottleneckConfig {
        BottleneckConfig {
            heads: self.model.bottleneck_heads,
            k: self.ablation.use_bottleneck.then_some(self.model.bottleneck_k),
            topk_scope: self.model.topk_scope,
            sigma: self.loss.sigma,
            epsilon: self.loss.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let a = &self.ablation;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.layers == 0 || m.embed_dim == 0 || m.heads == 0 || m.classes == 0 || m.channels == 0 {
            return bad("layers, embed_dim, heads, channels and classes must be positive".into());
        }
        if m.embed_dim % m.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", m.embed_dim, m.heads));
        }
        if m.patch_size == 0 || m.image_size % m.patch_size != 0 || m.image_size == 0 {
            return bad(format!("image_size {} not divisible by patch_size {}", m.image_size, m.patch_size));
        }
        if a.use_ff && m.mlp_dim == 0 {
            return bad("mlp_dim must be positive".into());
        }
        if !a.use_memory && a.use_hopfield {
            return bad("ablation.use_hopfield requires ablation.use_memory".into());
        }
        if !a.use_memory && a.use_bottleneck {
            return bad("ablation.use_bottleneck requires ablation.use_memory".into());
        }
        if !a.use_memory && a.reset_memory_each_epoch {
            return bad("ablation.reset_memory_each_epoch requires ablation.use_memory".into());
        }
        if a.use_memory {
            if m.memory_slots == 0 || m.slot_dim == 0 || m.bottleneck_heads == 0 {
                return bad("memory_slots, slot_dim and bottleneck_heads must be positive".into());
            }
            if m.bottleneck_k == 0 {
                return bad("bottleneck_k must be >= 1".into());
            }
            if !(m.beta > 0.0) {
                return bad(format!("beta must be > 0, got {}", m.beta));
            }
            if m.hopfield_iters == 0 {
                return bad("hopfield_iters must be >= 1".into());
            }
            self.bottleneck().validate()?;
            let l = &self.loss;
            if !(l.alpha > 0.0 && l.alpha < 1.0) {
                return bad(format!("loss.alpha must lie in (0,1), got {}", l.alpha));
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer needs lr > 0, weight_decay >= 0 and betas in [0,1)".into());
        }
        let s = &self.schedule;
        if s.total_epochs == 0 || s.warmup_epochs > s.total_epochs {
            return bad(format!(
                "schedule needs total_epochs >= 1 and warmup_epochs <= total_epochs ({} / {})",
                s.warmup_epochs, s.total_epochs
            ));
        }
        if !(s.min_lr >= 0.0) || s.min_lr > o.lr {
            return bad(format!("min_lr {} must lie in [0, lr]", s.min_lr));
        }
        if self.data.batch_size == 0 {
            return bad("data.batch_size must be >= 1".into());
        }
        if self.data.source == DataSource::File && self.data.train_path.is_none() {
            return bad("data.source = \"file\" needs data.train_path".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("cannot parse config: {e}")))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Apply one `dotted.key=value` override. The value is read as a TOML
/// literal when possible, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
