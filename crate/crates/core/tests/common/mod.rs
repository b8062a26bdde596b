#![allow(dead_code)]

use vmelab::data::{collate, EncodedPair, PairedBatch};
use vmelab::encoder::{BoundParameters, ModelConfig};

pub fn model(n_layers: usize, hidden: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads: heads,
        hidden,
        ffn: 2 * hidden,
        vocab_size: 12,
        max_len: 10,
        n_classes: 2,
        dropout: 0.0,
        seed: 17,
    }
}

/// Two pairs of different lengths; the augmented view swaps some tokens.
pub fn pairs() -> Vec<EncodedPair> {
    vec![
        EncodedPair {
            x: vec![1, 4, 5, 6, 2, 7, 2],
            xa: vec![1, 8, 5, 6, 2, 7, 2],
            segments: vec![0, 0, 0, 0, 0, 1, 1],
            label: 1,
        },
        EncodedPair {
            x: vec![1, 9, 2, 10, 11, 2],
            xa: vec![1, 9, 2, 10, 4, 2],
            segments: vec![0, 0, 0, 1, 1, 1],
            label: 0,
        },
    ]
}

pub fn identity_pairs() -> Vec<EncodedPair> {
    pairs()
        .into_iter()
        .map(|p| EncodedPair {
            xa: p.x.clone(),
            ..p
        })
        .collect()
}

pub fn batch(pairs: &[EncodedPair], max_len: usize) -> PairedBatch {
    let refs: Vec<&EncodedPair> = pairs.iter().collect();
    collate(&refs, max_len).unwrap()
}

pub fn bind_leaves(template: &vmelab::encoder::Parameters, leaves: &[vmelab::numerics::Tensor]) -> BoundParameters {
    BoundParameters::from_leaves(template, leaves.to_vec()).unwrap()
}
