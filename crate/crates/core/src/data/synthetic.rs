//! Synthetic multilingual corpus with controllable language-cluster geometry.
//!
//! Each concept has a latent vector; language `l` realises concept `c` as the
//! surface token `l{l}_c{c}` and language 0 additionally has synonym forms
//! `l0_c{c}_s{k}`. Labels are the argmax over per-class concept-group counts
//! in the pair, so every translation of an item shares its label.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augmentation::SynonymDictionary;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_concepts: usize,
    pub n_languages: usize,
    /// Surface forms per concept in language 0 (headword included).
    pub synonyms_per_concept: usize,
    pub sentence_min_len: usize,
    pub sentence_max_len: usize,
    pub n_classes: usize,
    pub label_seed: u64,
    /// Scale of each non-source language's shared offset vector.
    pub cluster_offset: f64,
    /// Per-token jitter around `latent + offset`.
    pub noise: f64,
    /// Width of the emitted token vectors; 0 disables them.
    pub vector_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub corpus_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_concepts: 60,
            n_languages: 3,
            synonyms_per_concept: 2,
            sentence_min_len: 3,
            sentence_max_len: 6,
            n_classes: 2,
            label_seed: 7,
            cluster_offset: 0.8,
            noise: 0.6,
            vector_dim: 64,
            n_train: 2000,
            n_test: 500,
            corpus_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.n_languages < 2 {
            return fail("n_languages must be >= 2");
        }
        if self.synonyms_per_concept < 2 {
            return fail("synonyms_per_concept must be >= 2");
        }
        if self.n_classes < 2 {
            return fail("n_classes must be >= 2");
        }
        if self.n_concepts < 2 * self.n_classes {
            return fail("n_concepts must be at least twice n_classes");
        }
        if self.sentence_min_len == 0 || self.sentence_min_len > self.sentence_max_len {
            return fail("sentence length range must satisfy 1 <= sentence_min_len <= sentence_max_len");
        }
        if self.cluster_offset < 0.0 || self.noise < 0.0 || !self.cluster_offset.is_finite() || !self.noise.is_finite() {
            return fail("cluster_offset and noise must be finite and >= 0");
        }
        if self.n_train == 0 {
            return fail("n_train must be >= 1");
        }
        Ok(())
    }

    pub fn languages(&self) -> Vec<String> {
        (0..self.n_languages).map(|l| format!("l{l}")).collect()
    }
}

pub fn surface(concept: usize, lang: usize, form: usize) -> String {
    if form == 0 {
        format!("l{lang}_c{concept}")
    } else {
        format!("l{lang}_c{concept}_s{form}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationPair {
    pub src_token: String,
    pub tgt_token: String,
    pub lang: String,
}

impl TranslationPair {
    pub fn write_csv(path: &Path, pairs: &[TranslationPair]) -> Result<()> {
        let mut s = String::from("src_token,tgt_token,lang\n");
        for p in pairs {
            let _ = writeln!(s, "{},{},{}", p.src_token, p.tgt_token, p.lang);
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<TranslationPair>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line.starts_with("src_token") || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let [src, tgt, lang] = cols[..] else {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("expected 3 columns, got {}", cols.len()),
                });
            };
            out.push(TranslationPair {
                src_token: src.to_string(),
                tgt_token: tgt.to_string(),
                lang: lang.to_string(),
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    /// Language-0 training items.
    pub train: Vec<Example>,
    /// Per language, the same items realised in that language.
    pub test: Vec<(String, Vec<Example>)>,
    pub dictionary: SynonymDictionary,
    pub translations: Vec<TranslationPair>,
    /// `(token, vector)` for every surface form, when `spec.vector_dim > 0`.
    pub token_vectors: Vec<(String, Vec<f64>)>,
}

impl SyntheticCorpus {
    /// Every token sequence in the corpus, for vocabulary construction.
    pub fn all_sentences(&self) -> Vec<&[String]> {
        let mut out: Vec<&[String]> = Vec::new();
        for e in self.train.iter().chain(self.test.iter().flat_map(|(_, v)| v)) {
            out.push(&e.sentence1);
            out.push(&e.sentence2);
        }
        out
    }

    /// All surface tokens, so forms absent from sampled sentences still get ids.
    pub fn lexicon(&self) -> Vec<String> {
        let s = &self.spec;
        let mut out = Vec::new();
        for c in 0..s.n_concepts {
            for f in 0..s.synonyms_per_concept {
                out.push(surface(c, 0, f));
            }
            for l in 1..s.n_languages {
                out.push(surface(c, l, 0));
            }
        }
        out
    }
}

/// A concept sequence: sentence 1, sentence 2, label.
type Item = (Vec<usize>, Vec<usize>, usize);

fn sample_item<R: Rng>(rng: &mut R, spec: &SyntheticSpec, group: &[Option<usize>]) -> Item {
    loop {
        let sent = |rng: &mut R| -> Vec<usize> {
            let n = rng.random_range(spec.sentence_min_len..=spec.sentence_max_len);
            (0..n).map(|_| rng.random_range(0..spec.n_concepts)).collect()
        };
        let s1 = sent(rng);
        let s2 = sent(rng);
        let mut counts = vec![0usize; spec.n_classes];
        for &c in s1.iter().chain(&s2) {
            if let Some(g) = group[c] {
                counts[g] += 1;
            }
        }
        let max = *counts.iter().max().expect("n_classes >= 2");
        if counts.iter().filter(|&&c| c == max).count() == 1 {
            let label = counts.iter().position(|&c| c == max).expect("max exists");
            return (s1, s2, label);
        }
    }
}

fn realise(item: &Item, lang: usize) -> Example {
    Example {
        sentence1: item.0.iter().map(|&c| surface(c, lang, 0)).collect(),
        sentence2: item.1.iter().map(|&c| surface(c, lang, 0)).collect(),
        label: item.2,
        lang: format!("l{lang}"),
    }
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Pure function of the spec.
pub fn gen_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;

    // Half the concepts carry class signal, spread evenly over the classes.
    let mut group_rng = stream(spec.label_seed, Purpose::Corpus, 0);
    let mut order: Vec<usize> = (0..spec.n_concepts).collect();
    order.shuffle(&mut group_rng);
    let n_signal = ((spec.n_concepts / 2) / spec.n_classes).max(1) * spec.n_classes;
    let mut group = vec![None; spec.n_concepts];
    for (i, &c) in order.iter().take(n_signal).enumerate() {
        group[c] = Some(i % spec.n_classes);
    }

    let mut train_rng = stream(spec.corpus_seed, Purpose::Corpus, 1);
    let train = (0..spec.n_train)
        .map(|_| realise(&sample_item(&mut train_rng, spec, &group), 0))
        .collect();

    let mut test_rng = stream(spec.corpus_seed, Purpose::Corpus, 2);
    let test_items: Vec<Item> = (0..spec.n_test)
        .map(|_| sample_item(&mut test_rng, spec, &group))
        .collect();
    let test = (0..spec.n_languages)
        .map(|l| (format!("l{l}"), test_items.iter().map(|it| realise(it, l)).collect()))
        .collect();

    let entries = (0..spec.n_concepts)
        .map(|c| {
            let syns = (1..spec.synonyms_per_concept).map(|f| surface(c, 0, f)).collect();
            (surface(c, 0, 0), syns)
        })
        .collect();
    let dictionary = SynonymDictionary::from_entries(entries, "synthetic")?;

    let translations = (1..spec.n_languages)
        .flat_map(|l| {
            (0..spec.n_concepts).map(move |c| TranslationPair {
                src_token: surface(c, 0, 0),
                tgt_token: surface(c, l, 0),
                lang: format!("l{l}"),
            })
        })
        .collect();

    let mut token_vectors = Vec::new();
    if spec.vector_dim > 0 {
        let mut geo = stream(spec.corpus_seed, Purpose::Corpus, 3);
        let latents: Vec<Vec<f64>> = (0..spec.n_concepts).map(|_| gaussian(&mut geo, spec.vector_dim, 1.0)).collect();
        let mut offsets = vec![vec![0.0; spec.vector_dim]];
        for _ in 1..spec.n_languages {
            offsets.push(gaussian(&mut geo, spec.vector_dim, spec.cluster_offset));
        }
        let jitter = |base: &[f64], off: &[f64], geo: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            let n = gaussian(geo, spec.vector_dim, spec.noise);
            base.iter().zip(off).zip(n).map(|((b, o), e)| b + o + e).collect()
        };
        for (c, latent) in latents.iter().enumerate() {
            for f in 0..spec.synonyms_per_concept {
                let v = jitter(latent, &offsets[0], &mut geo);
                token_vectors.push((surface(c, 0, f), v));
            }
            for (l, off) in offsets.iter().enumerate().skip(1) {
                let v = jitter(latent, off, &mut geo);
                token_vectors.push((surface(c, l, 0), v));
            }
        }
    }

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        train,
        test,
        dictionary,
        translations,
        token_vectors,
    })
}
