//! End-to-end desk experiment: synthetic corpus, vocabulary, seeded
//! embedding geometry, augmentation, training and zero-shot evaluation.

use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_dataset, AugmentationPolicy};
use crate::data::{
    build_vocab, encode_example, encode_pair, gen_synthetic_corpus, EncodedPair, PairedExample, SyntheticCorpus,
    SyntheticSpec, Vocab,
};
use crate::diagnostics::{evaluate_accuracy, EvalReport};
use crate::encoder::{init_params, ModelConfig, Parameters};
use crate::error::Result;
use crate::objectives::Variant;
use crate::training::{train, StepMetrics, TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: SyntheticSpec,
    /// `vocab_size` and `n_classes` are filled in from the corpus.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentationPolicy,
    /// Overwrite token-embedding rows with the corpus' cluster geometry.
    pub seed_embeddings: bool,
}

impl ExperimentConfig {
    /// Toy model, 3 epochs, default corpus; every stream keyed by `seed`.
    pub fn desk(seed: u64) -> Self {
        let corpus = SyntheticSpec {
            corpus_seed: seed,
            ..SyntheticSpec::default()
        };
        let model = ModelConfig {
            seed,
            ..ModelConfig::toy(0, corpus.n_classes)
        };
        Self {
            corpus,
            model,
            train: TrainConfig {
                epochs: 3,
                seed,
                ..TrainConfig::default()
            },
            augment: AugmentationPolicy {
                seed,
                ..AugmentationPolicy::default()
            },
            seed_embeddings: true,
        }
    }
}

/// Everything a training run needs, built once and shared across variants.
pub struct Prepared {
    pub corpus: SyntheticCorpus,
    pub vocab: Vocab,
    pub model: ModelConfig,
    pub init: Parameters,
    pub augmented: Vec<EncodedPair>,
    pub identity: Vec<EncodedPair>,
    pub test_sets: Vec<(String, Vec<EncodedPair>)>,
}

impl Prepared {
    /// Training pairs for a variant: identity pairs for single-view training.
    pub fn pairs_for(&self, variant: Variant) -> &[EncodedPair] {
        if variant.uses_pairs() {
            &self.augmented
        } else {
            &self.identity
        }
    }

    pub fn source_language(&self) -> String {
        "l0".to_string()
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let corpus = gen_synthetic_corpus(&config.corpus)?;
    let lexicon = corpus.lexicon();
    let vocab = build_vocab(corpus.all_sentences().into_iter().chain(std::iter::once(&lexicon[..])));
    let model = ModelConfig {
        vocab_size: vocab.len(),
        n_classes: config.corpus.n_classes,
        ..config.model.clone()
    };
    let mut init = init_params(&model)?;
    if config.seed_embeddings && !corpus.token_vectors.is_empty() {
        let rows: Vec<(usize, Vec<f64>)> = corpus
            .token_vectors
            .iter()
            .filter_map(|(t, v)| vocab.get(t).map(|id| (id, v.clone())))
            .collect();
        init.seed_token_embeddings(&rows)?;
    }
    let max_len = model.max_len;
    let augmented = augment_dataset(&corpus.train, &corpus.dictionary, &config.augment)?
        .iter()
        .map(|p| encode_pair(&vocab, p, max_len))
        .collect::<Result<Vec<_>>>()?;
    let identity = corpus
        .train
        .iter()
        .map(|e| encode_pair(&vocab, &PairedExample::identity(e), max_len))
        .collect::<Result<Vec<_>>>()?;
    let test_sets = corpus
        .test
        .iter()
        .map(|(lang, set)| {
            let enc = set.iter().map(|e| encode_example(&vocab, e, max_len)).collect::<Result<Vec<_>>>()?;
            Ok((lang.clone(), enc))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        corpus,
        vocab,
        model,
        init,
        augmented,
        identity,
        test_sets,
    })
}

pub struct ExperimentResult {
    pub variant: Variant,
    pub report: EvalReport,
    /// Mean accuracy over every language except the training language.
    pub zero_shot: f64,
    pub metrics: Vec<StepMetrics>,
    pub params: Parameters,
}

pub fn run_variant(prepared: &Prepared, train_config: &TrainConfig) -> Result<ExperimentResult> {
    let variant = train_config.objective.variant;
    let out = train(
        &prepared.model,
        TrainState::new(prepared.init.clone()),
        prepared.pairs_for(variant),
        train_config,
    )?;
    let report = evaluate_accuracy(&out.state.params, &prepared.model, &prepared.test_sets)?;
    let zero_shot = report.zero_shot_average(&prepared.source_language()).unwrap_or(f64::NAN);
    Ok(ExperimentResult {
        variant,
        report,
        zero_shot,
        metrics: out.metrics,
        params: out.state.params,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_variant(&prepare(config)?, &config.train)
}
