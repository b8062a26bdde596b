//! The run configuration: defaults, then an optional preset, then a JSON
//! config file, then command-line flags. Every flag is the hyphenated name
//! of exactly one key.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use vmelab::augmentation::AugmentationPolicy;
use vmelab::data::SyntheticSpec;
use vmelab::encoder::ModelConfig;
use vmelab::objectives::ObjectiveConfig;
use vmelab::training::TrainConfig;
use vmelab::Error;

pub const RUN_DIR_ENV: &str = "VMELAB_RUN_DIR";
pub const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Pre-seed token embeddings with the supplied vectors.
    pub seed_embeddings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: Option<usize>,
    pub clip_norm: Option<f64>,
    pub linear_decay: bool,
    pub freeze_token_embeddings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub replace_prob: f64,
    pub copies: usize,
    pub dictionary_scale: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub translations: Option<PathBuf>,
    pub token_vectors: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives initialisation, shuffling, dropout, noise and augmentation.
    pub seed: u64,
    pub model: ModelSection,
    pub objective: ObjectiveConfig,
    pub train: TrainSection,
    pub augment: AugmentSection,
    pub corpus: SyntheticSpec,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ModelConfig::toy(0, 2);
        let train = TrainConfig::default();
        let aug = AugmentationPolicy::default();
        Self {
            seed: 0,
            model: ModelSection {
                n_layers: toy.n_layers,
                n_heads: toy.n_heads,
                hidden: toy.hidden,
                ffn: toy.ffn,
                max_len: toy.max_len,
                dropout: toy.dropout,
                seed_embeddings: true,
            },
            objective: ObjectiveConfig::default(),
            train: TrainSection {
                lr: train.lr,
                batch_size: train.batch_size,
                epochs: train.epochs,
                eval_every: None,
                clip_norm: None,
                linear_decay: false,
                freeze_token_embeddings: false,
            },
            augment: AugmentSection {
                replace_prob: aug.replace_prob,
                copies: aug.copies,
                dictionary_scale: 1.0,
            },
            corpus: SyntheticSpec::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self, vocab_size: usize, n_classes: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            hidden: m.hidden,
            ffn: m.ffn,
            vocab_size,
            max_len: m.max_len,
            n_classes,
            dropout: m.dropout,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: self.seed,
            objective: self.objective.clone(),
            eval_every: t.eval_every,
            clip_norm: t.clip_norm,
            linear_decay: t.linear_decay,
            freeze_token_embeddings: t.freeze_token_embeddings,
        }
    }

    pub fn augmentation_policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            replace_prob: self.augment.replace_prob,
            copies: self.augment.copies,
            seed: self.seed,
        }
    }
}

/// `(flag, key)` pairs; a flag always names exactly one key.
pub const FLAG_KEYS: &[(&str, &str)] = &[
    ("seed", "seed"),
    ("n-layers", "model.n_layers"),
    ("n-heads", "model.n_heads"),
    ("hidden", "model.hidden"),
    ("ffn", "model.ffn"),
    ("max-len", "model.max_len"),
    ("dropout", "model.dropout"),
    ("seed-embeddings", "model.seed_embeddings"),
    ("alpha", "objective.alpha"),
    ("beta", "objective.beta"),
    ("apt-layer", "objective.apt_layer"),
    ("variant", "objective.variant"),
    ("nt-sigma", "objective.nt_sigma"),
    ("pool-specials", "objective.pool_specials"),
    ("ept-cap", "objective.ept_cap"),
    ("lr", "train.lr"),
    ("batch-size", "train.batch_size"),
    ("epochs", "train.epochs"),
    ("eval-every", "train.eval_every"),
    ("clip-norm", "train.clip_norm"),
    ("linear-decay", "train.linear_decay"),
    ("freeze-token-embeddings", "train.freeze_token_embeddings"),
    ("replace-prob", "augment.replace_prob"),
    ("copies", "augment.copies"),
    ("dictionary-scale", "augment.dictionary_scale"),
    ("n-concepts", "corpus.n_concepts"),
    ("n-languages", "corpus.n_languages"),
    ("synonyms-per-concept", "corpus.synonyms_per_concept"),
    ("sentence-min-len", "corpus.sentence_min_len"),
    ("sentence-max-len", "corpus.sentence_max_len"),
    ("n-classes", "corpus.n_classes"),
    ("label-seed", "corpus.label_seed"),
    ("cluster-offset", "corpus.cluster_offset"),
    ("noise", "corpus.noise"),
    ("vector-dim", "corpus.vector_dim"),
    ("n-train", "corpus.n_train"),
    ("n-test", "corpus.n_test"),
    ("corpus-seed", "corpus.corpus_seed"),
    ("train-file", "paths.train_file"),
    ("test-file", "paths.test_file"),
    ("dictionary", "paths.dictionary"),
    ("pairs", "paths.pairs"),
    ("vocab", "paths.vocab"),
    ("checkpoint", "paths.checkpoint"),
    ("translations", "paths.translations"),
    ("token-vectors", "paths.token_vectors"),
];

/// Keys whose flags may be given without a value to mean `true`.
pub fn is_switch(key: &str) -> bool {
    matches!(
        RunConfig::default().lookup(key),
        Some(Value::Bool(_))
    )
}

impl RunConfig {
    fn lookup(&self, key: &str) -> Option<Value> {
        let mut v = serde_json::to_value(self).ok()?;
        for part in key.split('.') {
            v = v.get(part)?.clone();
        }
        Some(v)
    }
}

pub fn preset(name: &str) -> Result<Value, Error> {
    match name {
        "paper-xnli" => Ok(serde_json::json!({
            "model": { "max_len": 128 },
            "train": { "batch_size": 32, "lr": 2e-5, "epochs": 1 },
            "augment": { "copies": 3 }
        })),
        "desk" => Ok(serde_json::json!({ "train": { "epochs": 3 } })),
        _ => Err(Error::Config(format!("unknown preset {name:?} (expected paper-xnli or desk)"))),
    }
}

/// Deep-merge `overlay` into `base`, rejecting keys `base` does not have.
fn merge(base: &mut Value, overlay: &Value, prefix: &str) -> Result<(), Error> {
    let Value::Object(over) = overlay else {
        return Err(Error::Config(format!("{} must be an object", display_key(prefix))));
    };
    let Value::Object(target) = base else {
        return Err(Error::Config(format!("{} is not a section", display_key(prefix))));
    };
    for (k, v) in over {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = target.get_mut(k) else {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        };
        if slot.is_object() {
            merge(slot, v, &key)?;
        } else {
            *slot = v.clone();
        }
    }
    Ok(())
}

fn display_key(prefix: &str) -> &str {
    if prefix.is_empty() {
        "the config document"
    } else {
        prefix
    }
}

/// Turn a flag's text into a JSON value typed after the key's default.
fn flag_value(key: &str, raw: &str, current: &Value) -> Value {
    if key.starts_with("paths.") || current.is_string() {
        return Value::String(raw.to_string());
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_key(doc: &mut Value, key: &str, raw: &str) -> Result<(), Error> {
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    if slot.is_object() {
        return Err(Error::Config(format!("{key:?} is a section, not a key")));
    }
    *slot = flag_value(key, raw, slot);
    Ok(())
}

/// Everything that shapes the resolved configuration.
#[derive(Default)]
pub struct Sources<'a> {
    pub preset: Option<&'a str>,
    pub file: Option<&'a Path>,
    /// `(key, raw value)` in command-line order.
    pub overrides: Vec<(String, String)>,
}

pub fn resolve(sources: &Sources<'_>) -> Result<RunConfig, Error> {
    let mut doc = serde_json::to_value(RunConfig::default())?;
    if let Some(p) = sources.preset {
        merge(&mut doc, &preset(p)?, "")?;
    }
    if let Some(path) = sources.file {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut doc, &file, "")?;
    }
    for (key, raw) in &sources.overrides {
        set_key(&mut doc, key, raw)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = resolve(&Sources::default()).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn precedence_flag_over_file_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"lr": 0.5, "epochs": 4}, "objective": {"beta": 0.3}}"#).unwrap();
        let c = resolve(&Sources {
            preset: Some("paper-xnli"),
            file: Some(&p),
            overrides: vec![("train.epochs".into(), "7".into()), ("objective.variant".into(), "rsda".into())],
        })
        .unwrap();
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.model.max_len, 128);
        assert_eq!(c.augment.copies, 3);
        assert_eq!(c.objective.beta, 0.3);
        assert_eq!(c.objective.variant, vmelab::objectives::Variant::Rsda);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"learning_rate": 0.5}}"#).unwrap();
        let err = resolve(&Sources {
            file: Some(&p),
            ..Default::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"));
        assert!(resolve(&Sources {
            overrides: vec![("model.depth".into(), "3".into())],
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn every_flag_names_a_key() {
        let doc = serde_json::to_value(RunConfig::default()).unwrap();
        for (flag, key) in FLAG_KEYS {
            let mut d = doc.clone();
            let sample = if is_switch(key) { "true" } else { "1" };
            set_key(&mut d, key, sample).unwrap_or_else(|e| panic!("{flag}: {e}"));
            assert_eq!(key.rsplit('.').next().unwrap().replace('_', "-"), *flag);
        }
    }
}
