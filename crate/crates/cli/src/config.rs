//! Flat dotted-key run settings: defaults, then a JSON config file, then
//! `--set key=value` overrides and dedicated flags.

use std::collections::BTreeMap;
use std::path::Path;

use mvaema_core::inference::{Decoding, GenerationConfig, Scoring};
use mvaema_core::model::{ModelConfig, QuestionRouting, Variant};
use mvaema_core::objectives::LossWeights;
use mvaema_core::trainer::TrainConfig;
use serde_json::{json, Map, Value};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Str,
    OptInt,
    OptFloat,
    IntList,
    StrList,
}

fn defaults() -> Vec<(&'static str, Kind, Value)> {
    use Kind::*;
    vec![
        ("seed", Int, json!(0)),
        ("model.preset", Str, json!("small")),
        ("model.embed_dim", OptInt, Value::Null),
        ("model.heads", OptInt, Value::Null),
        ("model.layers", OptInt, Value::Null),
        ("model.ffn_mult", OptInt, Value::Null),
        ("model.itc_proj_dim", OptInt, Value::Null),
        ("model.tau_init", Float, json!(0.07)),
        ("model.init_std", Float, json!(0.02)),
        ("model.share_fusion_text", Bool, json!(false)),
        ("model.question_routing", Str, json!("prefix")),
        ("vocab.min_freq", Int, json!(1)),
        ("train.epochs", Int, json!(50)),
        ("train.lr", Float, json!(1e-3)),
        ("train.batch", Int, json!(48)),
        ("train.scheduler_patience", Int, json!(5)),
        ("train.early_stop_patience", Int, json!(10)),
        ("train.min_delta", Float, json!(1e-4)),
        ("train.folds", Int, json!(10)),
        ("train.cross_validate", Bool, json!(false)),
        ("train.variant", Str, json!("none")),
        ("train.weights.itc", Float, json!(1.0)),
        ("train.weights.itm", Float, json!(1.0)),
        ("train.weights.lm", Float, json!(1.0)),
        ("train.hard_negatives", Bool, json!(false)),
        ("train.target_loss", OptFloat, Value::Null),
        ("train.max_steps", OptInt, Value::Null),
        ("gen.decoding", Str, json!("greedy")),
        ("gen.beam_k", Int, json!(3)),
        ("gen.length_penalty", Float, json!(1.0)),
        ("gen.max_len", Int, json!(96)),
        ("classify.scoring", Str, json!("itm")),
        ("teacher.endpoint", Str, json!("https://api.openai.com/v1/chat/completions")),
        ("teacher.model", Str, json!("gpt-4o")),
        ("teacher.templates", IntList, json!([1, 2, 3, 4, 5, 6, 7, 8, 9, 10])),
        ("teacher.include_caption", Bool, json!(true)),
        ("teacher.concurrency", Int, json!(4)),
        ("teacher.max_attempts", Int, json!(3)),
        ("teacher.backoff_ms", Int, json!(500)),
        ("teacher.timeout_secs", Int, json!(120)),
        ("ablate.variants", StrList, json!(["no_itc", "no_ctc", "no_sa", "no_ca", "no_csa"])),
    ]
}

fn conforms(kind: Kind, v: &Value) -> bool {
    let int = |v: &Value| v.as_u64().is_some();
    match kind {
        Kind::Int => int(v),
        Kind::Float => v.is_number(),
        Kind::Bool => v.is_boolean(),
        Kind::Str => v.is_string(),
        Kind::OptInt => v.is_null() || int(v),
        Kind::OptFloat => v.is_null() || v.is_number(),
        Kind::IntList => v.as_array().is_some_and(|a| a.iter().all(int)),
        Kind::StrList => v.as_array().is_some_and(|a| a.iter().all(Value::is_string)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, Value>,
    kinds: BTreeMap<String, Kind>,
}

impl Default for Settings {
    fn default() -> Self {
        let mut values = BTreeMap::new();
        let mut kinds = BTreeMap::new();
        for (k, kind, v) in defaults() {
            values.insert(k.to_string(), v);
            kinds.insert(k.to_string(), kind);
        }
        Settings { values, kinds }
    }
}

impl Settings {
    /// Defaults, overlaid by `file`, then by each `key=value` in `sets`,
    /// then by `seed`.
    pub fn load(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let obj: Map<String, Value> = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: expected a flat JSON object ({e})", path.display())))?;
            for (k, v) in obj {
                s.set(&k, v)?;
            }
        }
        for kv in sets {
            let (k, raw) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{kv}` is not of the form key=value")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            s.set(k.trim(), v)?;
        }
        if let Some(seed) = seed {
            s.set("seed", json!(seed))?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, v: Value) -> Result<()> {
        let kind = *self.kinds.get(key).ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
        // a bare word given on the command line arrives as a string
        let v = match (&v, kind) {
            (Value::String(s), Kind::Str) => Value::String(s.clone()),
            (Value::String(s), Kind::StrList) => json!(s.split(',').map(str::trim).collect::<Vec<_>>()),
            _ => v,
        };
        if !conforms(kind, &v) {
            return Err(CliError::Config(format!("`{key}` expects {kind:?}, got {v}")));
        }
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> &Value {
        &self.values[key]
    }

    fn int(&self, key: &str) -> usize {
        self.get(key).as_u64().expect("checked on set") as usize
    }

    fn float(&self, key: &str) -> f64 {
        self.get(key).as_f64().expect("checked on set")
    }

    fn bool(&self, key: &str) -> bool {
        self.get(key).as_bool().expect("checked on set")
    }

    fn str(&self, key: &str) -> &str {
        self.get(key).as_str().expect("checked on set")
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").as_u64().expect("checked on set")
    }

    /// Sorted flat JSON object of every key.
    pub fn to_json(&self) -> String {
        let obj: Map<String, Value> = self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        serde_json::to_string_pretty(&Value::Object(obj)).expect("plain JSON values") + "\n"
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut c = match self.str("model.preset") {
            "default" => ModelConfig::new(vocab_size),
            "small" => ModelConfig::small(vocab_size),
            "micro" => ModelConfig::micro(vocab_size),
            other => return Err(CliError::Config(format!("unknown model.preset `{other}`"))),
        };
        let opt = |k: &str| self.get(k).as_u64().map(|v| v as usize);
        c.embed_dim = opt("model.embed_dim").unwrap_or(c.embed_dim);
        c.heads = opt("model.heads").unwrap_or(c.heads);
        c.layers = opt("model.layers").unwrap_or(c.layers);
        c.ffn_mult = opt("model.ffn_mult").unwrap_or(c.ffn_mult);
        c.itc_proj_dim = opt("model.itc_proj_dim").unwrap_or(c.itc_proj_dim);
        c.tau_init = self.float("model.tau_init");
        c.init_std = self.float("model.init_std");
        c.share_fusion_text = self.bool("model.share_fusion_text");
        c.question_routing = self.str("model.question_routing").parse::<QuestionRouting>()?;
        c.validate()?;
        Ok(c)
    }

    pub fn variant(&self) -> Result<Variant> {
        Ok(self.str("train.variant").parse()?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.int("train.epochs"),
            lr: self.float("train.lr"),
            batch: self.int("train.batch"),
            scheduler_patience: self.int("train.scheduler_patience"),
            early_stop_patience: self.int("train.early_stop_patience"),
            min_delta: self.float("train.min_delta"),
            folds: self.int("train.folds"),
            seed: self.seed(),
            variant: self.variant()?,
            weights: LossWeights {
                itc: self.float("train.weights.itc"),
                itm: self.float("train.weights.itm"),
                lm: self.float("train.weights.lm"),
            },
            hard_negatives: self.bool("train.hard_negatives"),
            target_loss: self.get("train.target_loss").as_f64(),
            max_steps: self.get("train.max_steps").as_u64(),
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn cross_validate(&self) -> bool {
        self.bool("train.cross_validate")
    }

    pub fn min_freq(&self) -> usize {
        self.int("vocab.min_freq")
    }

    pub fn generation(&self) -> Result<GenerationConfig> {
        let decoding = match self.str("gen.decoding") {
            "greedy" => Decoding::Greedy,
            "beam" => Decoding::Beam {
                k: self.int("gen.beam_k"),
                length_penalty: self.float("gen.length_penalty"),
            },
            other => return Err(CliError::Config(format!("unknown gen.decoding `{other}`"))),
        };
        Ok(GenerationConfig {
            decoding,
            max_len: self.int("gen.max_len"),
        })
    }

    pub fn scoring(&self) -> Result<Scoring> {
        Ok(self.str("classify.scoring").parse()?)
    }

    pub fn ablation_variants(&self) -> Result<Vec<Variant>> {
        let list = self.get("ablate.variants").as_array().expect("checked on set");
        list.iter().map(|v| Ok(v.as_str().expect("checked on set").parse()?)).collect()
    }

    pub fn teacher_templates(&self) -> Vec<u8> {
        let list = self.get("teacher.templates").as_array().expect("checked on set");
        list.iter().map(|v| v.as_u64().expect("checked on set").min(255) as u8).collect()
    }

    pub fn teacher_str(&self, key: &str) -> &str {
        self.str(&format!("teacher.{key}"))
    }

    pub fn teacher_int(&self, key: &str) -> usize {
        self.int(&format!("teacher.{key}"))
    }

    pub fn include_caption(&self) -> bool {
        self.bool("teacher.include_caption")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"train.epochs": 7, "seed": 3, "train.variant": "no_sa"}"#).unwrap();
        let s = Settings::load(Some(&file), &["train.epochs=9".into()], Some(11)).unwrap();
        assert_eq!(s.train_config().unwrap().epochs, 9);
        assert_eq!(s.seed(), 11);
        assert_eq!(s.variant().unwrap(), Variant::NoSa);

        std::fs::write(&file, r#"{"train.epoch": 7}"#).unwrap();
        assert!(matches!(Settings::load(Some(&file), &[], None), Err(CliError::Config(_))));
        std::fs::write(&file, r#"{"train": {"epochs": 7}}"#).unwrap();
        assert!(matches!(Settings::load(Some(&file), &[], None), Err(CliError::Config(_))));
        assert!(Settings::load(None, &["train.lr=fast".into()], None).is_err());
        assert!(Settings::load(None, &["noequals".into()], None).is_err());
        assert!(Settings::load(None, &["train.batch=1".into()], None).unwrap().train_config().is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = Settings::load(None, &["gen.decoding=beam".into(), "ablate.variants=no_itc,no_ca".into(), "train.target_loss=0.1".into()], None)
            .unwrap();
        let path = dir.path().join("effective_config.json");
        s.write_snapshot(&path).unwrap();
        let back = Settings::load(Some(&path), &[], None).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.ablation_variants().unwrap(), vec![Variant::NoItc, Variant::NoCa]);
        assert!(matches!(back.generation().unwrap().decoding, Decoding::Beam { k: 3, .. }));
        assert_eq!(back.train_config().unwrap().target_loss, Some(0.1));
    }
}
