//! Run configuration. Serialized as one JSON document whose sections mirror
//! the hyperparameter table in snake_case.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pooling applied to every pyramid level before flattening into memory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    None,
    Grid(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Resize factors, finest first.
    pub scales: Vec<f64>,
    pub channels: usize,
    /// Stride-2 convolution + Swish blocks in the feature extractor.
    pub extract_blocks: usize,
    pub bifpn_depth: usize,
    pub fusion_eps: f64,
    pub pool: Pool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            scales: vec![1.0, 0.5, 0.25],
            channels: 16,
            extract_blocks: 2,
            bifpn_depth: 3,
            fusion_eps: 1e-4,
            pool: Pool::Grid(4),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("encoder scales must be non-empty".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Config(format!(
                "encoder scales must lie in (0, 1], got {:?}",
                self.scales
            )));
        }
        if self.scales.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "encoder scales must be strictly decreasing, got {:?}",
                self.scales
            )));
        }
        if self.bifpn_depth == 0 {
            return Err(Error::Config("bifpn_depth must be at least 1".into()));
        }
        if self.channels == 0 || self.extract_blocks == 0 {
            return Err(Error::Config("channels and extract_blocks must be positive".into()));
        }
        if !(self.fusion_eps > 0.0) {
            return Err(Error::Config("fusion_eps must be positive".into()));
        }
        if self.pool == Pool::Grid(0) {
            return Err(Error::Config("pool grid must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Zero means `4 * d_model`.
    pub d_ff: usize,
    pub max_len: usize,
    /// Filled in from the vocabulary when the model is built.
    pub vocab_size: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    /// Adds a per-finding sigmoid probe head over pooled memory.
    pub finding_probe: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 64,
            n_layers: 6,
            n_heads: 8,
            d_ff: 0,
            max_len: 512,
            vocab_size: 0,
            dropout: 0.3,
            layer_norm_eps: 1e-5,
            finding_probe: false,
        }
    }
}

impl DecoderConfig {
    pub fn ff_dim(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model, n_layers and n_heads must be positive".into()));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model must be even for sinusoidal positions, got {}",
                self.d_model
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-6,
            threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gradient_clipping: f64,
    pub scheduler: PlateauConfig,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Validate on the training split instead of `val` (memorisation runs).
    pub validate_on_train: bool,
    /// Weight of the finding-probe loss when the probe is enabled.
    pub probe_weight: f64,
    /// Stop once validation loss drops below this value; 0 disables.
    pub target_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 16,
            epochs: 50,
            gradient_clipping: 1.0,
            scheduler: PlateauConfig::default(),
            early_stop_patience: 10,
            seed: 42,
            validate_on_train: false,
            probe_weight: 0.0,
            target_loss: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config(
                "batch_size, epochs and early_stop_patience must be positive".into(),
            ));
        }
        if !(self.probe_weight >= 0.0) || !(self.target_loss >= 0.0) {
            return Err(Error::Config("probe_weight and target_loss must be non-negative".into()));
        }
        if !(self.gradient_clipping > 0.0) {
            return Err(Error::Config("gradient_clipping must be positive".into()));
        }
        let s = &self.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) {
            return Err(Error::Config(format!("scheduler factor {} outside (0, 1)", s.factor)));
        }
        if s.patience == 0 || !(s.min_lr >= 0.0) || !(s.threshold >= 0.0) {
            return Err(Error::Config("invalid scheduler settings".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub beam: usize,
    pub alpha: f64,
    /// Total positions including the leading CLS token.
    pub max_len: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            beam: 3,
            alpha: 0.6,
            max_len: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// `ac-bifpn` (pyramid) or `baseline` (single scale).
    pub encoder_kind: EncoderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            encoder_kind: EncoderKind::Pyramid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "ac-bifpn")]
    Pyramid,
    #[serde(rename = "baseline")]
    Baseline,
}

impl EncoderKind {
    pub fn label(self) -> &'static str {
        match self {
            EncoderKind::Pyramid => "ac-bifpn",
            EncoderKind::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<String>,
    pub out: Option<String>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data: None, out: None }
    }
}

/// Named hyperparameter profiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    /// Hyperparameter table values.
    #[serde(rename = "default")]
    Default,
    /// Training-procedure values reported for the full-scale run:
    /// lr 1e-4, batch 8, dropout 0.5.
    #[serde(rename = "rsna-paper")]
    RsnaPaper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: Profile::Default,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut cfg = RunConfig {
            profile,
            ..RunConfig::default()
        };
        if profile == Profile::RsnaPaper {
            cfg.train.learning_rate = 1e-4;
            cfg.train.batch_size = 8;
            cfg.model.decoder.dropout = 0.5;
        }
        cfg
    }

    /// Parses a JSON config. Fields absent from the document take the values
    /// of the named profile (or `default`).
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let profile = match raw.get("profile") {
            Some(p) => serde_json::from_value(p.clone())?,
            None => Profile::Default,
        };
        let mut base = serde_json::to_value(RunConfig::for_profile(profile))?;
        merge(&mut base, raw);
        let cfg: RunConfig = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        self.train.validate()?;
        if self.generation.beam == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.generation.max_len == 0 {
            return Err(Error::Config("generation max_len must be positive".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_hyperparameter_table() {
        let c = RunConfig::default();
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.model.decoder.dropout, 0.3);
        assert_eq!(c.train.gradient_clipping, 1.0);
        assert_eq!(c.model.encoder.bifpn_depth, 3);
        assert_eq!(c.model.decoder.n_layers, 6);
        assert_eq!(c.model.decoder.n_heads, 8);
        assert_eq!(c.model.decoder.max_len, 512);
        assert_eq!(c.train.early_stop_patience, 10);
    }

    #[test]
    fn rsna_profile_overrides() {
        let c = RunConfig::from_json(r#"{"profile": "rsna-paper"}"#).unwrap();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.model.decoder.dropout, 0.5);
        // explicit values still win
        let c = RunConfig::from_json(r#"{"profile": "rsna-paper", "train": {"batch_size": 4}}"#).unwrap();
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.learning_rate, 1e-4);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_json(r#"{"model": {"decoder": {"d_model": 9, "n_heads": 3}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"decoder": {"d_model": 12, "n_heads": 5}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"encoder": {"scales": [0.5, 1.0]}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"encoder": {"bifpn_depth": 0}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"scheduler": {"factor": 1.5}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"bogus": 1}}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::for_profile(Profile::RsnaPaper);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
