//! Seeded fine-tuning loop, Adam, checkpoints and the hyperparameter sweep.
//!
//! Every random stream is a function of `(seed, step)`: the batch order of
//! epoch `e` comes from the `Shuffle` stream `e`, dropout and embedding noise
//! of global step `s` from the `Dropout`/`Noise` streams `s`. Resuming at
//! step `s` therefore reproduces the uninterrupted run exactly.

mod adam;
mod checkpoint;
pub mod sweep;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, global_norm, OptimizerState, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{collate, EncodedPair, PairedBatch, BATCH_SIZE};
use crate::encoder::{encode_batch, BoundParameters, EncodeOptions, EncodeOutput, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::objectives::{nt_perturb, total_loss, LossBreakdown, LossTerms, ObjectiveConfig, Variant};
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    /// Call the evaluation hook every this many steps.
    pub eval_every: Option<usize>,
    /// Global-norm gradient clip.
    pub clip_norm: Option<f64>,
    /// Decay the learning rate linearly to 0 over the run.
    pub linear_decay: bool,
    /// Keep the token-embedding table fixed.
    pub freeze_token_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: BATCH_SIZE,
            epochs: 1,
            seed: 0,
            objective: ObjectiveConfig::default(),
            eval_every: None,
            clip_norm: None,
            linear_decay: false,
            freeze_token_embeddings: false,
        }
    }
}

impl TrainConfig {
    /// lr 2e-5, batch 32, one epoch.
    pub fn paper() -> Self {
        Self {
            lr: 2e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be finite and >= 0", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be >= 1".into());
        }
        if self.eval_every == Some(0) {
            return fail("eval_every must be >= 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("clip_norm {c} must be > 0"));
            }
        }
        self.objective.validate(model)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Parameters,
    pub optimizer: OptimizerState,
    /// Global steps completed.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: Parameters) -> Self {
        Self {
            optimizer: OptimizerState::new(&params),
            params,
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// 0-based global step.
    pub step: u64,
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

pub type EvalHook<'a> = &'a mut dyn FnMut(u64, &Parameters) -> Result<()>;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stop once this many global steps are complete.
    pub stop_at: Option<u64>,
    /// Called with the step count every `eval_every` steps.
    pub on_eval: Option<EvalHook<'a>>,
}

pub fn steps_per_epoch(n_pairs: usize, batch_size: usize) -> u64 {
    n_pairs.div_ceil(batch_size) as u64
}

/// Batch order for one epoch.
pub fn epoch_order(n_pairs: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut stream(seed, Purpose::Shuffle, epoch));
    order
}

fn encode_view(
    params: &BoundParameters,
    model: &ModelConfig,
    batch: &PairedBatch,
    augmented: bool,
    config: &TrainConfig,
    dropout: &mut rand_chacha::ChaCha8Rng,
    noise: &mut rand_chacha::ChaCha8Rng,
) -> Result<EncodeOutput> {
    let input = if augmented { batch.view_xa() } else { batch.view_x() };
    let sigma = config.objective.nt_sigma;
    let mut perturb = |e: Tensor| nt_perturb(&e, &batch.valid, sigma, noise);
    let opts = EncodeOptions {
        dropout_rng: Some(dropout),
        embedding_hook: if config.objective.variant == Variant::NtApt {
            Some(&mut perturb)
        } else {
            None
        },
    };
    encode_batch(params, model, input, opts)
}

/// Forward pass of one training step with the step's dropout and noise streams.
pub fn step_loss(
    params: &BoundParameters,
    model: &ModelConfig,
    batch: &PairedBatch,
    config: &TrainConfig,
    step: u64,
) -> Result<LossTerms> {
    let mut dropout = stream(config.seed, Purpose::Dropout, step);
    let mut noise = stream(config.seed, Purpose::Noise, step);
    let out_x = encode_view(params, model, batch, false, config, &mut dropout, &mut noise)?;
    let out_xa = if config.objective.variant.uses_pairs() {
        Some(encode_view(params, model, batch, true, config, &mut dropout, &mut noise)?)
    } else {
        None
    };
    total_loss(params, model, batch, &out_x, out_xa.as_ref(), &config.objective)
}

pub fn train(model: &ModelConfig, state: TrainState, data: &[EncodedPair], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, state, data, config, TrainOptions::default())
}

pub fn train_with(
    model: &ModelConfig,
    mut state: TrainState,
    data: &[EncodedPair],
    config: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate(model)?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if let Some(bad) = data.iter().position(|p| p.x.len() != p.xa.len()) {
        return Err(Error::Pairing(format!("pair {bad} has views of different length")));
    }
    if config.objective.variant == Variant::CeOnly {
        log::debug!("ce_only: augmented views are ignored");
    }
    let per_epoch = steps_per_epoch(data.len(), config.batch_size);
    let total = per_epoch * config.epochs as u64;
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let mut metrics = Vec::new();
    let mut order: Option<(u64, Vec<usize>)> = None;

    while state.step < end {
        let step = state.step;
        let epoch = step / per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(data.len(), config.seed, epoch)));
        }
        let idx = &order.as_ref().expect("set above").1;
        let k = (step % per_epoch) as usize * config.batch_size;
        let members: Vec<&EncodedPair> = idx[k..(k + config.batch_size).min(idx.len())]
            .iter()
            .map(|&i| &data[i])
            .collect();
        let batch = collate(&members, model.max_len)?;

        let bound = state.params.bind(true);
        let terms = step_loss(&bound, model, &batch, config, step)?;
        let loss = terms.breakdown();
        if !loss.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        terms.total.backward()?;
        let mut grads = bound.grads();
        drop(terms);
        drop(bound);
        if config.freeze_token_embeddings {
            grads.token_embedding.data.fill(0.0);
        }
        if let Some(c) = config.clip_norm {
            let n = global_norm(&grads);
            if n > c {
                let f = c / n;
                for g in grads.leaves_mut() {
                    g.data.iter_mut().for_each(|x| *x *= f);
                }
            }
        }
        let lr = if config.linear_decay {
            config.lr * (1.0 - step as f64 / total as f64)
        } else {
            config.lr
        };
        adam_step(&mut state.params, &grads, &mut state.optimizer, lr)?;
        state.step += 1;
        metrics.push(StepMetrics { step, loss });

        if let (Some(every), Some(hook)) = (config.eval_every, opts.on_eval.as_mut()) {
            if state.step % every as u64 == 0 {
                hook(state.step, &state.params)?;
            }
        }
    }
    Ok(TrainOutcome { state, metrics })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `step,ce,ept,apt,srpt,total`; terms absent from the variant stay empty.
pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut s = String::from("step,ce,ept,apt,srpt,total\n");
    for m in metrics {
        let l = &m.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.step,
            l.ce,
            cell(l.ept),
            cell(l.apt),
            cell(l.srpt),
            l.total
        );
    }
    s
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    fs::write(path, metrics_csv(metrics)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_pair, PairedExample, Vocab};
    use crate::encoder::init_params;

    fn tiny_model(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            hidden: 8,
            ffn: 8,
            vocab_size: vocab,
            max_len: 16,
            n_classes: 2,
            dropout: 0.1,
            seed: 5,
        }
    }

    fn data() -> (Vocab, Vec<EncodedPair>) {
        let words = ["a", "b", "c", "d", "e", "f"];
        let vocab = crate::data::build_vocab(std::iter::once(&words.map(String::from)[..]));
        let pairs = (0..20)
            .map(|i| {
                let s1: Vec<String> = (0..3).map(|j| words[(i + j) % 6].to_string()).collect();
                let s2: Vec<String> = (0..2).map(|j| words[(i * 2 + j) % 6].to_string()).collect();
                let mut aug = s1.clone();
                aug[0] = words[(i + 3) % 6].to_string();
                let e = crate::data::Example {
                    sentence1: s1,
                    sentence2: s2.clone(),
                    label: i % 2,
                    lang: "l0".into(),
                };
                let a = crate::data::Example {
                    sentence1: aug,
                    ..e.clone()
                };
                encode_pair(
                    &vocab,
                    &PairedExample {
                        original: e,
                        augmented: a,
                    },
                    16,
                )
                .unwrap()
            })
            .collect();
        (vocab, pairs)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (vocab, pairs) = data();
        let model = tiny_model(vocab.len());
        let p = init_params(&model).unwrap();
        let out = train(&model, TrainState::new(p.clone()), &pairs, &TrainConfig { lr: 0.0, ..cfg() }).unwrap();
        assert_eq!(out.state.params, p);
        assert_eq!(out.metrics.len(), 10);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let (vocab, pairs) = data();
        let model = tiny_model(vocab.len());
        let p = init_params(&model).unwrap();
        let a = train(&model, TrainState::new(p.clone()), &pairs, &cfg()).unwrap();
        let b = train(&model, TrainState::new(p), &pairs, &cfg()).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (vocab, pairs) = data();
        let model = tiny_model(vocab.len());
        let p = init_params(&model).unwrap();
        let full = train(&model, TrainState::new(p.clone()), &pairs, &cfg()).unwrap();
        let first = train_with(
            &model,
            TrainState::new(p),
            &pairs,
            &cfg(),
            TrainOptions {
                stop_at: Some(7),
                ..Default::default()
            },
        )
        .unwrap();
        let rest = train(&model, first.state, &pairs, &cfg()).unwrap();
        assert_eq!(rest.state, full.state);
        let joined: Vec<_> = first.metrics.into_iter().chain(rest.metrics).collect();
        assert_eq!(joined, full.metrics);
    }

    #[test]
    fn frozen_embeddings_do_not_move() {
        let (vocab, pairs) = data();
        let model = tiny_model(vocab.len());
        let p = init_params(&model).unwrap();
        let c = TrainConfig {
            freeze_token_embeddings: true,
            ..cfg()
        };
        let out = train(&model, TrainState::new(p.clone()), &pairs, &c).unwrap();
        assert_eq!(out.state.params.token_embedding, p.token_embedding);
        assert_ne!(out.state.params.classifier_weight, p.classifier_weight);
    }

    #[test]
    fn eval_hook_cadence() {
        let (vocab, pairs) = data();
        let model = tiny_model(vocab.len());
        let p = init_params(&model).unwrap();
        let mut seen = Vec::new();
        let mut hook = |s: u64, _: &Parameters| {
            seen.push(s);
            Ok(())
        };
        let c = TrainConfig {
            eval_every: Some(4),
            ..cfg()
        };
        train_with(
            &model,
            TrainState::new(p),
            &pairs,
            &c,
            TrainOptions {
                on_eval: Some(&mut hook),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(seen, vec![4, 8]);
    }

    #[test]
    fn metrics_columns_follow_variant() {
        let (vocab, pairs) = data();
        let model = tiny_model(vocab.len());
        let p = init_params(&model).unwrap();
        let mut c = cfg();
        c.epochs = 1;
        c.objective.variant = Variant::CeOnly;
        let out = train(&model, TrainState::new(p), &pairs, &c).unwrap();
        let csv = metrics_csv(&out.metrics);
        let line = csv.lines().nth(1).unwrap();
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 6);
        assert_eq!(&cols[2..5], ["", "", ""]);
        assert_eq!(cols[1], cols[5]);
    }
}
