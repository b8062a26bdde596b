//! Miniature BERT-style encoder. Both views of a training pair are encoded
//! with the same bound parameters, so their gradients land in one set of
//! leaves.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{self, BatchShape};
use crate::numerics::ops;
use crate::numerics::{Array, Tensor};
use crate::rng::{stream, Purpose};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;
pub const N_SEGMENTS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers, 4 heads, d=64, ffn=128, L_max=32.
    pub fn toy(vocab_size: usize, n_classes: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            hidden: 64,
            ffn: 128,
            vocab_size,
            max_len: 32,
            n_classes,
            dropout: 0.1,
            seed: 0,
        }
    }

    /// BERT-base geometry with a 128-token window.
    pub fn paper_compatible(vocab_size: usize, n_classes: usize) -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            hidden: 768,
            ffn: 3072,
            vocab_size,
            max_len: 128,
            n_classes,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("n_layers must be >= 1".into());
        }
        if self.n_heads == 0 || self.hidden == 0 || self.hidden % self.n_heads != 0 {
            return fail(format!("hidden {} must be a positive multiple of n_heads {}", self.hidden, self.n_heads));
        }
        if self.ffn == 0 {
            return fail("ffn must be >= 1".into());
        }
        if self.max_len < 3 {
            return fail(format!("max_len {} leaves no room for [CLS] x [SEP]", self.max_len));
        }
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} is smaller than the reserved tokens", self.vocab_size));
        }
        if self.n_classes < 2 {
            return fail("n_classes must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// 1-based index of the middle layer, `ceil(n_layers / 2)`.
    pub fn middle_layer(&self) -> usize {
        self.n_layers.div_ceil(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub attention_norm: Norm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: Norm<T>,
}

/// The full parameter tree, generic over storage: [`Array`] for owned
/// values/gradients/moments and [`Tensor`] for a graph binding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub segment_embedding: T,
    pub embedding_norm: Norm<T>,
    pub layers: Vec<Layer<T>>,
    /// `n_classes × d`
    pub classifier_weight: T,
    pub classifier_bias: T,
}

pub type Parameters = Weights<Array>;
pub type BoundParameters = Weights<Tensor>;

impl<T> Weights<T> {
    /// Leaves in canonical order with dotted names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
            ("segment_embedding".to_string(), &self.segment_embedding),
            ("embedding_norm.gain".to_string(), &self.embedding_norm.gain),
            ("embedding_norm.bias".to_string(), &self.embedding_norm.bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let lin = [
                ("query", &l.query),
                ("key", &l.key),
                ("value", &l.value),
                ("output", &l.output),
                ("ffn_in", &l.ffn_in),
                ("ffn_out", &l.ffn_out),
            ];
            for (n, lin) in lin {
                out.push((format!("layers.{i}.{n}.weight"), &lin.weight));
                out.push((format!("layers.{i}.{n}.bias"), &lin.bias));
            }
            for (n, norm) in [("attention_norm", &l.attention_norm), ("ffn_norm", &l.ffn_norm)] {
                out.push((format!("layers.{i}.{n}.gain"), &norm.gain));
                out.push((format!("layers.{i}.{n}.bias"), &norm.bias));
            }
        }
        out.push(("classifier.weight".to_string(), &self.classifier_weight));
        out.push(("classifier.bias".to_string(), &self.classifier_bias));
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.segment_embedding,
            &mut self.embedding_norm.gain,
            &mut self.embedding_norm.bias,
        ];
        for l in &mut self.layers {
            for lin in [
                &mut l.query,
                &mut l.key,
                &mut l.value,
                &mut l.output,
                &mut l.ffn_in,
                &mut l.ffn_out,
            ] {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
            for norm in [&mut l.attention_norm, &mut l.ffn_norm] {
                out.push(&mut norm.gain);
                out.push(&mut norm.bias);
            }
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        let lin = |l: &Linear<T>, f: &mut dyn FnMut(&T) -> U| Linear {
            weight: f(&l.weight),
            bias: f(&l.bias),
        };
        let norm = |n: &Norm<T>, f: &mut dyn FnMut(&T) -> U| Norm {
            gain: f(&n.gain),
            bias: f(&n.bias),
        };
        Weights {
            token_embedding: f(&self.token_embedding),
            position_embedding: f(&self.position_embedding),
            segment_embedding: f(&self.segment_embedding),
            embedding_norm: norm(&self.embedding_norm, &mut f),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    query: lin(&l.query, &mut f),
                    key: lin(&l.key, &mut f),
                    value: lin(&l.value, &mut f),
                    output: lin(&l.output, &mut f),
                    attention_norm: norm(&l.attention_norm, &mut f),
                    ffn_in: lin(&l.ffn_in, &mut f),
                    ffn_out: lin(&l.ffn_out, &mut f),
                    ffn_norm: norm(&l.ffn_norm, &mut f),
                })
                .collect(),
            classifier_weight: f(&self.classifier_weight),
            classifier_bias: f(&self.classifier_bias),
        }
    }
}

impl<T: Clone> Weights<T> {
    /// A tree shaped like `template` holding `leaves` in canonical order.
    pub fn from_leaves<U>(template: &Weights<U>, leaves: Vec<T>) -> Result<Self> {
        let mut slots: Weights<Option<T>> = template.map(|_| None);
        let targets = slots.leaves_mut();
        if targets.len() != leaves.len() {
            return Err(Error::Contract(format!(
                "expected {} leaves, got {}",
                targets.len(),
                leaves.len()
            )));
        }
        for (slot, leaf) in targets.into_iter().zip(leaves) {
            *slot = Some(leaf);
        }
        Ok(slots.map(|o| o.clone().expect("every slot filled")))
    }
}

impl Parameters {
    pub fn bind(&self, requires_grad: bool) -> BoundParameters {
        self.map(|a| a.to_tensor(requires_grad))
    }

    pub fn zeros_like(&self) -> Parameters {
        self.map(|a| Array::zeros(&a.shape))
    }

    pub fn count(&self) -> usize {
        self.leaves().iter().map(|a| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|a| a.is_finite())
    }

    /// Rebuild from leaves in canonical order, checking shapes against `self`.
    pub fn with_leaves(&self, leaves: Vec<Array>) -> Result<Parameters> {
        let mut out = self.clone();
        let slots = out.leaves_mut();
        if slots.len() != leaves.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter arrays, got {}",
                slots.len(),
                leaves.len()
            )));
        }
        for (slot, a) in slots.into_iter().zip(leaves) {
            if slot.shape != a.shape {
                return Err(Error::dim("with_leaves", &slot.shape, &a.shape));
            }
            *slot = a;
        }
        Ok(out)
    }

    /// Overwrite token-embedding rows (e.g. with pre-seeded cluster geometry).
    pub fn seed_token_embeddings(&mut self, rows: &[(usize, Vec<f64>)]) -> Result<()> {
        let [v, d] = self.token_embedding.shape[..] else {
            unreachable!("token embedding is rank 2")
        };
        for (id, vec) in rows {
            if *id >= v || vec.len() != d {
                return Err(Error::dim("seed_token_embeddings", &[*id, vec.len()], &[v, d]));
            }
            self.token_embedding.row_mut(*id).copy_from_slice(vec);
        }
        Ok(())
    }
}

impl BoundParameters {
    /// Gradients collected after `backward`; untouched leaves give zeros.
    pub fn grads(&self) -> Parameters {
        self.map(|t| Array {
            shape: t.shape().to_vec(),
            data: t.grad().unwrap_or_else(|| vec![0.0; t.len()]),
        })
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect()
}

/// Seeded initialisation: tables and projections from a truncated
/// `N(0, 0.02²)`, layer-norm gains 1, all biases 0.
pub fn init_params(config: &ModelConfig) -> Result<Parameters> {
    config.validate()?;
    let mut rng = stream(config.seed, Purpose::Init, 0);
    let d = config.hidden;
    let mut normal = |shape: &[usize]| {
        let n = shape.iter().product();
        Array::new(shape, truncated_normal(&mut rng, n)).expect("valid shape")
    };
    let mut linear = |i: usize, o: usize| Linear {
        weight: normal(&[i, o]),
        bias: Array::zeros(&[o]),
    };
    let norm = || Norm {
        gain: Array::filled(&[d], 1.0),
        bias: Array::zeros(&[d]),
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(Layer {
            query: linear(d, d),
            key: linear(d, d),
            value: linear(d, d),
            output: linear(d, d),
            attention_norm: norm(),
            ffn_in: linear(d, config.ffn),
            ffn_out: linear(config.ffn, d),
            ffn_norm: norm(),
        });
    }
    Ok(Weights {
        token_embedding: normal(&[config.vocab_size, d]),
        position_embedding: normal(&[config.max_len, d]),
        segment_embedding: normal(&[N_SEGMENTS, d]),
        embedding_norm: norm(),
        layers,
        classifier_weight: normal(&[config.n_classes, d]),
        classifier_bias: Array::zeros(&[config.n_classes]),
    })
}

/// A padded batch of token sequences laid out row-major as `B×L`.
#[derive(Clone, Copy, Debug)]
pub struct EncodeInput<'a> {
    pub token_ids: &'a [usize],
    pub segment_ids: &'a [usize],
    pub valid: &'a [bool],
    pub batch: usize,
    pub len: usize,
}

/// Training-time randomness. Both fields absent means evaluation mode.
#[derive(Default)]
pub struct EncodeOptions<'r> {
    pub dropout_rng: Option<&'r mut dyn RngCore>,
    /// Applied to the embedding output before the first layer; the result is
    /// what `EncodeOutput::embedding_output` reports.
    pub embedding_hook: Option<&'r mut dyn FnMut(Tensor) -> Result<Tensor>>,
}

pub struct EncodeOutput {
    /// `(B·L)×d`, after the embedding sum and layer norm.
    pub embedding_output: Tensor,
    /// Per layer, `(B·L)×d`.
    pub hidden: Vec<Tensor>,
    /// Per layer, `B×H×L×L` post-softmax probabilities.
    pub attention: Vec<Tensor>,
    /// `B×d`, last-layer state at position 0.
    pub cls_state: Tensor,
    pub shape: BatchShape,
    pub valid: Vec<bool>,
}

impl EncodeOutput {
    /// The `L×L` attention matrix of one head for one sequence (0-based layer).
    pub fn attention_matrix(&self, layer: usize, item: usize, head: usize) -> &[f64] {
        let BatchShape { len, heads, .. } = self.shape;
        let base = (item * heads + head) * len * len;
        &self.attention[layer].values()[base..base + len * len]
    }
}

fn linear(x: &Tensor, p: &Linear<Tensor>) -> Result<Tensor> {
    ops::add_row_bias(&ops::matmul(x, &p.weight)?, &p.bias)
}

fn norm(x: &Tensor, p: &Norm<Tensor>) -> Result<Tensor> {
    nn::layer_norm(x, &p.gain, &p.bias, LAYER_NORM_EPS)
}

fn maybe_dropout(x: Tensor, rate: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Tensor> {
    match rng {
        Some(r) if rate > 0.0 => nn::dropout(&x, rate, *r),
        _ => Ok(x),
    }
}

/// Encode a padded batch.
pub fn encode_batch(
    params: &BoundParameters,
    config: &ModelConfig,
    input: EncodeInput<'_>,
    opts: EncodeOptions<'_>,
) -> Result<EncodeOutput> {
    let EncodeInput {
        token_ids,
        segment_ids,
        valid,
        batch,
        len,
    } = input;
    let n = batch * len;
    if batch == 0 || len == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if token_ids.len() != n || segment_ids.len() != n || valid.len() != n {
        return Err(Error::Input(format!(
            "batch {batch}×{len} needs {n} ids, got {}/{}/{}",
            token_ids.len(),
            segment_ids.len(),
            valid.len()
        )));
    }
    if len > config.max_len {
        return Err(Error::Input(format!("sequence length {len} exceeds max_len {}", config.max_len)));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!("token id {bad} >= vocab size {}", config.vocab_size)));
    }
    if let Some(&bad) = segment_ids.iter().find(|&&s| s >= N_SEGMENTS) {
        return Err(Error::Input(format!("segment id {bad} not in {{0, 1}}")));
    }
    let shape = BatchShape {
        batch,
        len,
        heads: config.n_heads,
    };
    let EncodeOptions {
        mut dropout_rng,
        embedding_hook,
    } = opts;

    let positions: Vec<usize> = (0..n).map(|r| r % len).collect();
    let tok = nn::gather_rows(&params.token_embedding, token_ids)?;
    let pos = nn::gather_rows(&params.position_embedding, &positions)?;
    let seg = nn::gather_rows(&params.segment_embedding, segment_ids)?;
    let mut emb = norm(&ops::add(&ops::add(&tok, &pos)?, &seg)?, &params.embedding_norm)?;
    if let Some(hook) = embedding_hook {
        emb = hook(emb)?;
    }

    let rate = config.dropout;
    let mut h = maybe_dropout(emb.clone(), rate, &mut dropout_rng)?;
    let mut hidden = Vec::with_capacity(config.n_layers);
    let mut attention = Vec::with_capacity(config.n_layers);
    for layer in &params.layers {
        let q = linear(&h, &layer.query)?;
        let k = linear(&h, &layer.key)?;
        let v = linear(&h, &layer.value)?;
        let probs = nn::attention_probs(&q, &k, valid, shape)?;
        attention.push(probs.clone());
        let probs = maybe_dropout(probs, rate, &mut dropout_rng)?;
        let ctx = nn::attention_context(&probs, &v, shape)?;
        let attn_out = maybe_dropout(linear(&ctx, &layer.output)?, rate, &mut dropout_rng)?;
        let h1 = norm(&ops::add(&h, &attn_out)?, &layer.attention_norm)?;
        let f = nn::gelu(&linear(&h1, &layer.ffn_in)?);
        let f = maybe_dropout(linear(&f, &layer.ffn_out)?, rate, &mut dropout_rng)?;
        h = norm(&ops::add(&h1, &f)?, &layer.ffn_norm)?;
        hidden.push(h.clone());
    }
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * len).collect();
    let cls_state = nn::gather_rows(&h, &cls_rows)?;
    Ok(EncodeOutput {
        embedding_output: emb,
        hidden,
        attention,
        cls_state,
        shape,
        valid: valid.to_vec(),
    })
}

/// Encode one sequence in evaluation mode.
pub fn encode(
    params: &BoundParameters,
    config: &ModelConfig,
    token_ids: &[usize],
    segment_ids: &[usize],
    valid: &[bool],
) -> Result<EncodeOutput> {
    encode_batch(
        params,
        config,
        EncodeInput {
            token_ids,
            segment_ids,
            valid,
            batch: 1,
            len: token_ids.len(),
        },
        EncodeOptions::default(),
    )
}

/// `softmax(W·h + b)` for a `d` vector or a `B×d` batch of [CLS] states.
pub fn classify(params: &BoundParameters, cls_state: &Tensor) -> Result<Tensor> {
    let h = match *cls_state.shape() {
        [d] => ops::reshape(cls_state, &[1, d])?,
        [_, _] => cls_state.clone(),
        _ => return Err(Error::dim("classify", cls_state.shape(), params.classifier_weight.shape())),
    };
    let logits = ops::add_row_bias(&ops::matmul_nt(&h, &params.classifier_weight)?, &params.classifier_bias)?;
    let probs = ops::softmax_rows(&logits, None)?;
    if cls_state.shape().len() == 1 {
        let c = probs.len();
        ops::reshape(&probs, &[c])
    } else {
        Ok(probs)
    }
}
