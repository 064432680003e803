//! Run configuration: one TOML document binding every stage's settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctc::Alphabet;
use crate::decoder::{DecoderConfig, FusionUnit};
use crate::error::{Error, Result};
use crate::features::FeatureParams;
use crate::lm::{ArpaModel, Tokenization};
use crate::model::ModelConfig;
use crate::synth::{SynthConfig, SYNTH_SYMBOLS};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSettings {
    pub beam_width: usize,
    pub lm_weight: f64,
    pub insertion_bonus: f64,
    pub fusion: FusionUnit,
    pub lm_order: usize,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        DecoderSettings {
            beam_width: 32,
            lm_weight: 1.0,
            insertion_bonus: 1.5,
            fusion: FusionUnit::Char,
            lm_order: 4,
        }
    }
}

impl DecoderSettings {
    pub fn with_lm<'a>(&self, lm: Option<&'a ArpaModel>) -> DecoderConfig<'a> {
        DecoderConfig {
            beam_width: self.beam_width,
            lm_weight: self.lm_weight,
            insertion_bonus: self.insertion_bonus,
            fusion: self.fusion,
            lm,
        }
    }

    pub fn tokenization(&self) -> Tokenization {
        match self.fusion {
            FusionUnit::Char => Tokenization::Char,
            FusionUnit::Word => Tokenization::Word,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output symbols in label order (blank excluded).
    pub alphabet: String,
    /// Normalize each utterance's features to zero mean and unit variance.
    pub normalize_features: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decoder: DecoderSettings,
    pub features: FeatureParams,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let features = FeatureParams::default();
        RunConfig {
            alphabet: SYNTH_SYMBOLS.to_string(),
            normalize_features: true,
            model: ModelConfig {
                input_features: features.num_bins(),
                alphabet_size: SYNTH_SYMBOLS.chars().count(),
                ..Default::default()
            },
            train: TrainConfig::default(),
            decoder: DecoderSettings::default(),
            features,
            synth: SynthConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Toy-task settings used by the four-variant comparison.
    pub fn toy() -> Self {
        let mut cfg = RunConfig::default();
        cfg.features.fft_size = 512;
        cfg.model.input_features = cfg.features.num_bins();
        cfg.model.width = 32;
        cfg.train = TrainConfig {
            lr0: 0.05,
            momentum: 0.9,
            lr_drop_epochs: vec![82, 123],
            lr_drop_factor: 10.0,
            epochs: 200,
            batch_size: 4,
            seed: 7,
            clip_norm: Some(5.0),
            target_train_cer: None,
            parallel: true,
        };
        cfg
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::new(self.alphabet.chars())
    }

    /// Cross-section consistency checks, run before any work starts.
    pub fn validate(&self) -> Result<()> {
        let alphabet = self.alphabet()?;
        self.model.validate()?;
        self.train.validate()?;
        self.features.validate()?;
        self.with_decoder_defaults().validate()?;
        if self.model.alphabet_size != alphabet.len() {
            return Err(Error::config(
                "model.alphabet_size",
                format!("{} but the alphabet {:?} has {} symbols", self.model.alphabet_size, self.alphabet, alphabet.len()),
            ));
        }
        if self.model.input_features != self.features.num_bins() {
            return Err(Error::config(
                "model.input_features",
                format!("{} but features.fft_size gives {} bins", self.model.input_features, self.features.num_bins()),
            ));
        }
        if self.decoder.lm_order == 0 {
            return Err(Error::config("decoder.lm_order", "must be at least 1"));
        }
        if self.synth.sample_rate != self.features.sample_rate {
            return Err(Error::config("synth.sample_rate", "must match features.sample_rate"));
        }
        Ok(())
    }

    fn with_decoder_defaults(&self) -> DecoderConfig<'static> {
        self.decoder.with_lm(None)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parse a config and apply `section.key=value` overrides. Values are read
    /// as TOML literals and fall back to plain strings. Keys missing from a
    /// section keep the run defaults, not the section's own defaults.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        let mut doc: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults parse");
        merge(&mut doc, user);
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must look like key=value"))?;
            set_dotted(&mut doc, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: RunConfig = toml::Table::try_into(doc).map_err(|e| Error::config("config", e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always serializable")
    }

    /// Write the resolved config as `config.toml` inside `dir`.
    pub fn embed(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key.to_string(), "empty key segment"));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key.to_string(), format!("{p} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
