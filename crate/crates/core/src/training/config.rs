use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{IMAGE_CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Every knob of a training run. Flat so it can be read from `key=value` text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
    pub embed: usize,
    pub gcn_layers: usize,
    pub lr: f64,
    pub lambda_tv: f64,
    pub batch_pair: usize,
    pub batch_single: usize,
    pub max_iters: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub max_len: usize,
    pub rouge_beta: f64,
    pub no_semantic_pool: bool,
    pub no_tv: bool,
    pub no_gcn: bool,
    pub no_single_task: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// Full-size settings.
    pub fn full() -> Self {
        TrainConfig {
            d: 512,
            k: 9,
            hidden: 512,
            embed: 256,
            gcn_layers: 2,
            lr: 1e-4,
            lambda_tv: 1.0,
            batch_pair: 16,
            batch_single: 128,
            max_iters: 10_000,
            eval_every: 500,
            seed: 0,
            clip_norm: 5.0,
            max_len: 40,
            rouge_beta: 1.0,
            no_semantic_pool: false,
            no_tv: false,
            no_gcn: false,
            no_single_task: false,
        }
    }

    /// Settings that train on one core in about a minute.
    pub fn desk() -> Self {
        TrainConfig {
            d: 32,
            k: 4,
            hidden: 64,
            embed: 32,
            lr: 1e-3,
            batch_pair: 8,
            batch_single: 16,
            max_iters: 500,
            eval_every: 100,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("d", self.d),
            ("k", self.k),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("gcn_layers", self.gcn_layers),
            ("batch_pair", self.batch_pair),
            ("batch_single", self.batch_single),
            ("eval_every", self.eval_every),
            ("max_len", self.max_len),
        ] {
            if v < 1 {
                bad.push(format!("{name} must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda_tv >= 0.0 && self.lambda_tv.is_finite()) {
            bad.push(format!("lambda_tv must be nonnegative, got {}", self.lambda_tv));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            bad.push(format!("clip_norm must be nonnegative, got {}", self.clip_norm));
        }
        if !(self.rouge_beta > 0.0 && self.rouge_beta.is_finite()) {
            bad.push(format!("rouge_beta must be positive, got {}", self.rouge_beta));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            in_channels: IMAGE_CHANNELS,
            image_size: IMAGE_SIZE,
            d: self.d,
            k: self.k,
            hidden: self.hidden,
            embed: self.embed,
            gcn_layers: self.gcn_layers,
            vocab_size,
            init_seed: self.seed,
            no_semantic_pool: self.no_semantic_pool,
            no_gcn: self.no_gcn,
        }
    }

    /// Override one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut json = serde_json::to_value(&*self)?;
        let fields = json.as_object_mut().expect("config serializes to an object");
        let slot = fields
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let invalid = || Error::Config(format!("invalid value {value:?} for {key}"));
        *slot = match slot {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| invalid())?),
            Value::Number(n) if n.is_u64() => Value::from(value.parse::<u64>().map_err(|_| invalid())?),
            Value::Number(_) => {
                let x: f64 = value.parse().map_err(|_| invalid())?;
                serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(invalid)?
            }
            _ => return Err(invalid()),
        };
        *self = serde_json::from_value(json).map_err(|_| invalid())?;
        Ok(())
    }

    /// Apply `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// `key=value` lines in field order; `apply_text` reads them back.
    pub fn to_text(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (k, v) in json.as_object().expect("object") {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let desk = TrainConfig::desk();
        assert_eq!((desk.d, desk.k, desk.hidden, desk.embed), (32, 4, 64, 32));
        assert_eq!(desk.lr, 1e-3);
        let full = TrainConfig::preset("full").unwrap();
        assert_eq!((full.d, full.k, full.batch_pair, full.batch_single), (512, 9, 16, 128));
        assert_eq!(full.lr, 1e-4);
        assert!(TrainConfig::preset("huge").is_err());
        desk.validate().unwrap();
    }

    #[test]
    fn set_parses_by_field_type() {
        let mut c = TrainConfig::desk();
        c.set("k", "6").unwrap();
        c.set("lr", "0.5").unwrap();
        c.set("lambda_tv", "0").unwrap();
        c.set("no_gcn", "true").unwrap();
        assert_eq!((c.k, c.lr, c.lambda_tv, c.no_gcn), (6, 0.5, 0.0, true));
        assert!(c.set("k", "-1").is_err());
        assert!(c.set("k", "1.5").is_err());
        assert!(c.set("no_gcn", "yes").is_err());
        assert!(c.set("colour", "red").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::desk();
        c.set("lr", "0.000123456789").unwrap();
        c.set("no_tv", "true").unwrap();
        let mut back = TrainConfig::full();
        back.apply_text(&format!("# comment\n\n{}", c.to_text())).unwrap();
        assert_eq!(back, c);
        assert!(back.apply_text("k 3").is_err());
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::desk();
        c.batch_pair = 0;
        c.lr = 0.0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_pair") && msg.contains("lr"), "{msg}");
    }
}
