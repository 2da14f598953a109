//! Training configuration: a flat TOML document with dotted keys, strict
//! about unknown fields, plus `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Which Stage-1 objective to minimize over mined triplets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletLossKind {
    /// `softplus((a·n − a·p) / τ)`
    Softmax,
    /// `max(0, m − a·p + a·n)`
    Hinge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub style_dim: usize,
    /// Widths of the convolutional trunk; every stage after the first halves
    /// the resolution.
    pub channels: Vec<usize>,
    /// How many trailing trunk stages contribute Gram statistics.
    pub gram_stages: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    /// Classes drawn per Stage-1 batch (0 = every class).
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub loss: TripletLossKind,
    pub temperature: f32,
    pub margin: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            style_dim: 64,
            channels: vec![16, 32, 64],
            gram_stages: 2,
            epochs: 20,
            learning_rate: 1e-4,
            classes_per_batch: 0,
            samples_per_class: 8,
            loss: TripletLossKind::Softmax,
            temperature: 0.1,
            margin: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Stem width followed by the width after each stride-2 downsampling.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    pub mapping_hidden: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128],
            res_blocks: 4,
            mapping_hidden: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Stem width followed by the width after each stride-2 stage.
    pub channels: Vec<usize>,
    /// Adds a branch for the source domain as well.
    pub normal_as_target: bool,
    /// Relative finite-difference step for the R1 parameter gradient.
    pub r1_fd_step: f32,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 128],
            normal_as_target: false,
            r1_fd_step: 1e-2,
        }
    }
}

/// Every hyperparameter of both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub resolution: usize,
    pub channels: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    /// Stop after this many global steps (0 = run all epochs).
    pub max_steps: u64,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub r1_gamma: f32,
    /// Apply R1 every this many steps.
    pub r1_interval: u64,
    pub seed: u64,
    /// Write a resumable checkpoint every this many steps (0 = only at the end).
    pub checkpoint_interval: u64,
    pub device: String,
    /// The optional joint fine-tuning stage; rejected when set.
    pub joint_finetune: bool,
    pub weights: LossWeights,
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            channels: 1,
            batch_size: 8,
            learning_rate: 1e-4,
            epochs: 100,
            max_steps: 0,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            r1_gamma: 1.0,
            r1_interval: 1,
            seed: 0,
            checkpoint_interval: 0,
            device: "cpu".to_string(),
            joint_finetune: false,
            weights: LossWeights::default(),
            encoder: EncoderConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies `key=value` overrides, where `key` is a dotted field path such
    /// as `weights.lambda_cyc`. Unknown keys are errors.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Table::try_from(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
            let key = key.trim();
            let value = parse_override_value(raw.trim());
            set_dotted(&mut doc, key, value)?;
        }
        let cfg: TrainConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical flat rendering (`dotted.key = value`, one per line, sorted),
    /// suitable for the effective-config manifest.
    pub fn to_toml_string(&self) -> String {
        let doc = toml::Table::try_from(self).expect("config is always serializable");
        let mut lines = Vec::new();
        flatten(&doc, "", &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Short stable digest of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.joint_finetune {
            return fail("joint fine-tuning of encoder and generator is not supported");
        }
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return fail("resolution must be a positive multiple of 4");
        }
        if self.channels != 1 && self.channels != 3 {
            return fail("channels must be 1 or 3");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.encoder.learning_rate > 0.0) {
            return fail("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.r1_gamma >= 0.0) || self.r1_interval == 0 {
            return fail("r1_gamma must be >= 0 and r1_interval positive");
        }
        if !(self.weights.lambda_cyc >= 0.0) || !(self.weights.lambda_sty >= 0.0) {
            return fail("loss weights must be non-negative");
        }
        if self.encoder.style_dim == 0 || self.encoder.channels.is_empty() {
            return fail("encoder needs a positive style_dim and at least one stage");
        }
        if self.encoder.gram_stages == 0 || self.encoder.gram_stages > self.encoder.channels.len() {
            return fail("encoder.gram_stages must be between 1 and the number of stages");
        }
        if self.encoder.samples_per_class < 2 {
            return fail("encoder.samples_per_class must be at least 2");
        }
        if !(self.encoder.temperature > 0.0) {
            return fail("encoder.temperature must be positive");
        }
        if self.generator.channels.len() < 2 {
            return fail("generator.channels needs a stem width and at least one downsampling");
        }
        let downs = self.generator.channels.len() - 1;
        if self.resolution % (1 << downs) != 0 {
            return fail("resolution must be divisible by the generator's downsampling factor");
        }
        if self.discriminator.channels.is_empty() {
            return fail("discriminator.channels must not be empty");
        }
        if !(self.discriminator.r1_fd_step > 0.0) {
            return fail("discriminator.r1_fd_step must be positive");
        }
        if self.device != "cpu" {
            return fail("only the 'cpu' device is available");
        }
        Ok(())
    }
}

fn flatten(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in table {
        let full = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match value {
            toml::Value::Table(inner) => flatten(inner, &full, out),
            v => out.push(format!("{full} = {v}")),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Let TOML decide the type; anything unparsable is a bare string.
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut table = doc;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            let slot = table
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
            if slot.is_table() {
                return Err(Error::Config(format!("'{key}' is a section, not a field")));
            }
            // Integers are accepted where floats are expected.
            *slot = match (&*slot, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            return Ok(());
        }
        table = table
            .get_mut(part)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
    }
    Err(Error::Config("empty override key".to_string()))
}
