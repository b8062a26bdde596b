//! Training targets: the paired robust cross-entropy, the embedding push, the
//! attention pull, and the two ablation replacements (Gaussian noise for the
//! push, sentence-embedding pull for the attention pull).

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::PairedBatch;
use crate::encoder::{classify, BoundParameters, EncodeOutput, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ops, BatchShape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `ℓ_CE + α·ℓ_EPT + β·ℓ_APT`
    EptApt,
    /// Paired cross-entropy on augmented pairs only.
    Rsda,
    /// Single-view cross-entropy, no augmentation.
    CeOnly,
    /// Gaussian-perturbed embeddings with `ℓ_CE + β·ℓ_APT`.
    NtApt,
    /// `ℓ_CE + α·ℓ_EPT + β·ℓ_SRPT`
    EptSrpt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::EptApt,
        Variant::Rsda,
        Variant::CeOnly,
        Variant::NtApt,
        Variant::EptSrpt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EptApt => "ept_apt",
            Variant::Rsda => "rsda",
            Variant::CeOnly => "ce_only",
            Variant::NtApt => "nt_apt",
            Variant::EptSrpt => "ept_srpt",
        }
    }

    /// Whether the second (augmented) view is encoded at all.
    pub fn uses_pairs(self) -> bool {
        self != Variant::CeOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '+'], "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub beta: f64,
    /// 1-based; `None` means the model's middle layer.
    pub apt_layer: Option<usize>,
    pub variant: Variant,
    pub nt_sigma: f64,
    /// Count `[CLS]`/`[SEP]` as valid positions when mean pooling.
    pub pool_specials: bool,
    /// Optional ceiling on each pair's push distance.
    pub ept_cap: Option<f64>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            apt_layer: None,
            variant: Variant::EptApt,
            nt_sigma: 0.01,
            pool_specials: true,
            ept_cap: None,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("alpha {} and beta {} must be finite and >= 0", self.alpha, self.beta));
        }
        if let Some(l) = self.apt_layer {
            if l == 0 || l > model.n_layers {
                return fail(format!("apt_layer {l} outside 1..={}", model.n_layers));
            }
        }
        if !(self.nt_sigma > 0.0 && self.nt_sigma.is_finite()) {
            return fail(format!("nt_sigma {} must be > 0", self.nt_sigma));
        }
        if let Some(c) = self.ept_cap {
            if !(c > 0.0) {
                return fail(format!("ept_cap {c} must be > 0"));
            }
        }
        Ok(())
    }

    /// Resolved 1-based layer.
    pub fn apt_layer(&self, model: &ModelConfig) -> usize {
        self.apt_layer.unwrap_or_else(|| model.middle_layer())
    }
}

/// Scalar loss components of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ept: Option<f64>,
    pub apt: Option<f64>,
    pub srpt: Option<f64>,
    pub total: f64,
}

pub struct LossTerms {
    pub ce: Tensor,
    pub ept: Option<Tensor>,
    pub apt: Option<Tensor>,
    pub srpt: Option<Tensor>,
    pub total: Tensor,
}

impl LossTerms {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            ce: self.ce.item(),
            ept: self.ept.as_ref().map(Tensor::item),
            apt: self.apt.as_ref().map(Tensor::item),
            srpt: self.srpt.as_ref().map(Tensor::item),
            total: self.total.item(),
        }
    }
}

fn check_batch(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Pairing(format!(
            "{op}: views have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `−(1/|B|) Σ mean_d (M(E_x) − M(E_xa))²` over pooled `B×d` batches.
/// With `cap`, each pair's distance is clipped before averaging.
pub fn ept_loss(pooled_x: &Tensor, pooled_xa: &Tensor, cap: Option<f64>) -> Result<Tensor> {
    check_batch("ept_loss", pooled_x, pooled_xa)?;
    let per_pair = ops::row_mean_sq_diff(pooled_x, pooled_xa)?;
    let per_pair = match cap {
        Some(c) => ops::clamp_max(&per_pair, c),
        None => per_pair,
    };
    Ok(ops::scale(&ops::sum(&per_pair), -1.0 / per_pair.len() as f64))
}

/// `(1/(|B|·H)) Σ_pairs Σ_heads` mean over the valid `n×n` block of squared
/// attention differences. Inputs are `B×H×L×L`.
pub fn apt_loss(attn_x: &Tensor, attn_xa: &Tensor, lengths: &[usize], shape: BatchShape) -> Result<Tensor> {
    check_batch("apt_loss", attn_x, attn_xa)?;
    let BatchShape { batch, len, heads } = shape;
    if attn_x.shape() != [batch, heads, len, len] || lengths.len() != batch {
        return Err(Error::Pairing(format!(
            "apt_loss: attention shape {:?} does not match {batch} pairs × {heads} heads × {len}",
            attn_x.shape()
        )));
    }
    let mut weights = vec![0.0; attn_x.len()];
    for (b, &n) in lengths.iter().enumerate() {
        if n == 0 || n > len {
            return Err(Error::Pairing(format!("pair {b} has {n} valid tokens")));
        }
        let w = 1.0 / (batch * heads * n * n) as f64;
        for h in 0..heads {
            let base = (b * heads + h) * len * len;
            for i in 0..n {
                weights[base + i * len..base + i * len + n].fill(w);
            }
        }
    }
    ops::weighted_sq_diff(attn_x, attn_xa, weights)
}

/// `−(1/|B|) Σ (log P_x[y] + log P_xa[y])`; both views, normalised by `|B|`.
pub fn ce_pair_loss(probs_x: &Tensor, probs_xa: &Tensor, gold: &[usize]) -> Result<Tensor> {
    check_batch("ce_pair_loss", probs_x, probs_xa)?;
    let n = gold.len() as f64;
    let both = ops::add(&ops::nll_sum(probs_x, gold)?, &ops::nll_sum(probs_xa, gold)?)?;
    Ok(ops::scale(&both, 1.0 / n))
}

/// `−(1/|B|) Σ log P_x[y]`.
pub fn ce_single_loss(probs_x: &Tensor, gold: &[usize]) -> Result<Tensor> {
    Ok(ops::scale(&ops::nll_sum(probs_x, gold)?, 1.0 / gold.len() as f64))
}

/// `(1/|B|) Σ mean_d (Sent(x) − Sent(xa))²` over pooled `B×d` batches.
pub fn srpt_loss(sent_x: &Tensor, sent_xa: &Tensor) -> Result<Tensor> {
    check_batch("srpt_loss", sent_x, sent_xa)?;
    let per_pair = ops::row_mean_sq_diff(sent_x, sent_xa)?;
    Ok(ops::scale(&ops::sum(&per_pair), 1.0 / per_pair.len() as f64))
}

/// Adds i.i.d. `N(0, σ²)` noise to every valid row of an `(B·L)×d` embedding
/// output; padded rows pass through unchanged.
pub fn nt_perturb(embedding_output: &Tensor, valid: &[bool], sigma: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(Error::Config(format!("nt_sigma {sigma} must be > 0")));
    }
    let [rows, d] = *embedding_output.shape() else {
        return Err(Error::Contract(format!("nt_perturb on shape {:?}", embedding_output.shape())));
    };
    if valid.len() != rows {
        return Err(Error::dim("nt_perturb", embedding_output.shape(), &[valid.len()]));
    }
    let noise: Vec<f64> = (0..rows * d)
        .map(|i| {
            if valid[i / d] {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            } else {
                0.0
            }
        })
        .collect();
    ops::add_constant(embedding_output, &noise)
}

/// `ce + α·push + β·pull`. Absent terms and terms with a zero weight are left
/// out of the graph, so they receive no gradient at all.
pub fn combine(ce: &Tensor, push: Option<&Tensor>, pull: Option<&Tensor>, alpha: f64, beta: f64) -> Result<Tensor> {
    let mut total = ce.clone();
    for (term, weight) in [(push, alpha), (pull, beta)] {
        if let Some(t) = term.filter(|_| weight != 0.0) {
            total = ops::add(&total, &ops::scale(t, weight))?;
        }
    }
    Ok(total)
}

/// Combines the configured targets for one batch.
///
/// `out_xa` may be `None` only for [`Variant::CeOnly`]. For
/// [`Variant::NtApt`] the caller is expected to have applied [`nt_perturb`]
/// while encoding.
pub fn total_loss(
    params: &BoundParameters,
    model: &ModelConfig,
    batch: &PairedBatch,
    out_x: &EncodeOutput,
    out_xa: Option<&EncodeOutput>,
    config: &ObjectiveConfig,
) -> Result<LossTerms> {
    config.validate(model)?;
    let probs_x = classify(params, &out_x.cls_state)?;
    if config.variant == Variant::CeOnly {
        let ce = ce_single_loss(&probs_x, &batch.labels)?;
        return Ok(LossTerms {
            total: ce.clone(),
            ce,
            ept: None,
            apt: None,
            srpt: None,
        });
    }
    let out_xa = out_xa.ok_or_else(|| {
        Error::Config(format!("variant {} needs the augmented view", config.variant))
    })?;
    let probs_xa = classify(params, &out_xa.cls_state)?;
    let ce = ce_pair_loss(&probs_x, &probs_xa, &batch.labels)?;

    let layer = config.apt_layer(model) - 1;
    let pool_mask = batch.pool_mask(config.pool_specials);
    let pooled = |t: &Tensor| ops::mean_pool_groups(t, &pool_mask, batch.batch);

    let ept = if matches!(config.variant, Variant::EptApt | Variant::EptSrpt) {
        Some(ept_loss(
            &pooled(&out_x.embedding_output)?,
            &pooled(&out_xa.embedding_output)?,
            config.ept_cap,
        )?)
    } else {
        None
    };
    let apt = if matches!(config.variant, Variant::EptApt | Variant::NtApt) {
        Some(apt_loss(
            &out_x.attention[layer],
            &out_xa.attention[layer],
            &batch.lengths(),
            out_x.shape,
        )?)
    } else {
        None
    };
    let srpt = if config.variant == Variant::EptSrpt {
        Some(srpt_loss(&pooled(&out_x.hidden[layer])?, &pooled(&out_xa.hidden[layer])?)?)
    } else {
        None
    };

    let total = combine(&ce, ept.as_ref(), apt.as_ref().or(srpt.as_ref()), config.alpha, config.beta)?;
    Ok(LossTerms {
        ce,
        ept,
        apt,
        srpt,
        total,
    })
}
