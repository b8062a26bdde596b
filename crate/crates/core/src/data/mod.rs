//! Tokens, vocabulary, pair-input construction, batching and dataset files.

mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncodeInput;
use crate::error::{Error, Result};

pub use synthetic::{gen_synthetic_corpus, SyntheticCorpus, SyntheticSpec, TranslationPair};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Default batch size.
pub const BATCH_SIZE: usize = 32;

/// Whitespace tokenisation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub sentence1: Vec<String>,
    pub sentence2: Vec<String>,
    pub label: usize,
    pub lang: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    premise: String,
    hypothesis: String,
    label: usize,
    lang: String,
}

impl From<&Example> for ExampleRecord {
    fn from(e: &Example) -> Self {
        Self {
            premise: e.sentence1.join(" "),
            hypothesis: e.sentence2.join(" "),
            label: e.label,
            lang: e.lang.clone(),
        }
    }
}

/// An original example and its augmented view; both carry the same label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedExample {
    pub original: Example,
    pub augmented: Example,
}

impl PairedExample {
    pub fn identity(e: &Example) -> Self {
        Self {
            original: e.clone(),
            augmented: e.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    premise: String,
    hypothesis: String,
    premise_aug: String,
    hypothesis_aug: String,
    label: usize,
    lang: String,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn check_example(e: &Example, path: &Path, line: usize) -> Result<()> {
    if e.sentence1.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            line,
            message: "empty premise".into(),
        });
    }
    Ok(())
}

/// Dataset JSONL: `{"premise", "hypothesis", "label", "lang"}` per line.
pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let recs: Vec<ExampleRecord> = read_jsonl(path)?;
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let e = Example {
                sentence1: tokenize(&r.premise),
                sentence2: tokenize(&r.hypothesis),
                label: r.label,
                lang: r.lang,
            };
            check_example(&e, path, i + 1).map(|_| e)
        })
        .collect()
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    write_jsonl(path, examples.iter().map(ExampleRecord::from))
}

/// Paired JSONL: dataset fields plus `premise_aug` and `hypothesis_aug`.
pub fn read_pairs(path: &Path) -> Result<Vec<PairedExample>> {
    let recs: Vec<PairRecord> = read_jsonl(path)?;
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let original = Example {
                sentence1: tokenize(&r.premise),
                sentence2: tokenize(&r.hypothesis),
                label: r.label,
                lang: r.lang.clone(),
            };
            let augmented = Example {
                sentence1: tokenize(&r.premise_aug),
                sentence2: tokenize(&r.hypothesis_aug),
                label: r.label,
                lang: r.lang,
            };
            check_example(&original, path, i + 1)?;
            if original.sentence1.len() != augmented.sentence1.len()
                || original.sentence2.len() != augmented.sentence2.len()
            {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: "augmented view changes sentence length".into(),
                });
            }
            Ok(PairedExample { original, augmented })
        })
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[PairedExample]) -> Result<()> {
    write_jsonl(
        path,
        pairs.iter().map(|p| PairRecord {
            premise: p.original.sentence1.join(" "),
            hypothesis: p.original.sentence2.join(" "),
            premise_aug: p.augmented.sentence1.join(" "),
            hypothesis_aug: p.augmented.sentence2.join(" "),
            label: p.original.label,
            lang: p.original.lang.clone(),
        }),
    )
}

/// Split a dataset into per-language test sets, languages in first-seen order.
pub fn group_by_lang(examples: Vec<Example>) -> Vec<(String, Vec<Example>)> {
    let mut out: Vec<(String, Vec<Example>)> = Vec::new();
    for e in examples {
        match out.iter_mut().find(|(l, _)| *l == e.lang) {
            Some((_, v)) => v.push(e),
            None => out.push((e.lang.clone(), vec![e])),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, falling back to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format {
                path: path.display().to_string(),
                line: 1,
                message: "vocabulary must start with [PAD] [CLS] [SEP] [UNK]".into(),
            });
        }
        Self::from_tokens(tokens)
    }
}

/// Reserved ids first, then tokens by descending frequency, ties broken
/// lexicographically.
pub fn build_vocab<'a, I>(corpus: I) -> Vocab
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for t in doc {
            if !RESERVED.contains(&t.as_str()) {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocab::from_tokens(tokens).expect("tokens are unique")
}

/// `[CLS] s1 [SEP] s2 [SEP]` (or `[CLS] s1 [SEP]` when `s2` is empty) with
/// segment 0 through the first `[SEP]` and 1 afterwards. Over-long pairs are
/// cut to exactly `max_len`, trimming `s2` before `s1`.
pub fn construct_input(s1: &[usize], s2: &[usize], max_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if s1.is_empty() {
        return Err(Error::Input("first sentence is empty".into()));
    }
    let specials = if s2.is_empty() { 2 } else { 3 };
    if max_len < specials + 1 {
        return Err(Error::Input(format!("max_len {max_len} too small for a pair input")));
    }
    let budget = max_len - specials;
    let (mut n1, mut n2) = (s1.len(), s2.len());
    while n1 + n2 > budget {
        if n2 > 0 {
            n2 -= 1;
        } else {
            n1 -= 1;
        }
    }
    let mut ids = Vec::with_capacity(n1 + n2 + specials);
    ids.push(CLS);
    ids.extend_from_slice(&s1[..n1]);
    ids.push(SEP);
    let mut segs = vec![0; ids.len()];
    if specials == 3 {
        ids.extend_from_slice(&s2[..n2]);
        ids.push(SEP);
        segs.resize(ids.len(), 1);
    }
    Ok((ids, segs))
}

/// Token ids of both views of one training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub x: Vec<usize>,
    pub xa: Vec<usize>,
    pub segments: Vec<usize>,
    pub label: usize,
}

pub fn encode_pair(vocab: &Vocab, pair: &PairedExample, max_len: usize) -> Result<EncodedPair> {
    let (x, segments) = construct_input(
        &vocab.encode(&pair.original.sentence1),
        &vocab.encode(&pair.original.sentence2),
        max_len,
    )?;
    let (xa, seg_a) = construct_input(
        &vocab.encode(&pair.augmented.sentence1),
        &vocab.encode(&pair.augmented.sentence2),
        max_len,
    )?;
    if x.len() != xa.len() || segments != seg_a {
        return Err(Error::Pairing(format!(
            "views differ in length ({} vs {})",
            x.len(),
            xa.len()
        )));
    }
    Ok(EncodedPair {
        x,
        xa,
        segments,
        label: pair.original.label,
    })
}

pub fn encode_example(vocab: &Vocab, e: &Example, max_len: usize) -> Result<EncodedPair> {
    encode_pair(vocab, &PairedExample::identity(e), max_len)
}

/// A right-padded batch of pairs, row-major `B×L`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub x: Vec<usize>,
    pub xa: Vec<usize>,
    pub segments: Vec<usize>,
    pub valid: Vec<bool>,
    pub labels: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl PairedBatch {
    pub fn view_x(&self) -> EncodeInput<'_> {
        self.view(&self.x)
    }

    pub fn view_xa(&self) -> EncodeInput<'_> {
        self.view(&self.xa)
    }

    fn view<'a>(&'a self, ids: &'a [usize]) -> EncodeInput<'a> {
        EncodeInput {
            token_ids: ids,
            segment_ids: &self.segments,
            valid: &self.valid,
            batch: self.batch,
            len: self.len,
        }
    }

    /// Positions that count for mean pooling; optionally drops `[CLS]`/`[SEP]`.
    pub fn pool_mask(&self, include_specials: bool) -> Vec<bool> {
        self.valid
            .iter()
            .zip(&self.x)
            .map(|(&v, &t)| v && (include_specials || (t != CLS && t != SEP)))
            .collect()
    }

    /// Number of valid tokens per row.
    pub fn lengths(&self) -> Vec<usize> {
        self.valid
            .chunks_exact(self.len)
            .map(|r| r.iter().filter(|&&v| v).count())
            .collect()
    }
}

/// Right-pad to the longest row of the batch.
pub fn collate(pairs: &[&EncodedPair], max_len: usize) -> Result<PairedBatch> {
    if pairs.is_empty() {
        return Err(Error::Input("cannot collate an empty batch".into()));
    }
    let len = pairs.iter().map(|p| p.x.len()).max().unwrap_or(0);
    if len > max_len {
        return Err(Error::Input(format!("row of length {len} exceeds max_len {max_len}")));
    }
    let n = pairs.len() * len;
    let mut batch = PairedBatch {
        x: Vec::with_capacity(n),
        xa: Vec::with_capacity(n),
        segments: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
        labels: Vec::with_capacity(pairs.len()),
        batch: pairs.len(),
        len,
    };
    for p in pairs {
        if p.xa.len() != p.x.len() || p.segments.len() != p.x.len() {
            return Err(Error::Pairing("views of a pair differ in length".into()));
        }
        let pad = len - p.x.len();
        batch.x.extend(p.x.iter().copied().chain(std::iter::repeat_n(PAD, pad)));
        batch.xa.extend(p.xa.iter().copied().chain(std::iter::repeat_n(PAD, pad)));
        batch.segments.extend(p.segments.iter().copied().chain(std::iter::repeat_n(0, pad)));
        batch.valid.extend(std::iter::repeat_n(true, p.x.len()).chain(std::iter::repeat_n(false, pad)));
        batch.labels.push(p.label);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn vocab_reserved_and_order() {
        let docs = [words("b a c a"), words("c a")];
        let v = build_vocab(docs.iter().map(Vec::as_slice));
        assert_eq!(&v.tokens()[..4], &RESERVED.map(String::from));
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("c"), 5);
        assert_eq!(v.id("b"), 6);
        assert_eq!(v.id("zzz"), UNK);
        let again = build_vocab(docs.iter().map(Vec::as_slice));
        assert_eq!(v, again);
    }

    #[test]
    fn construct_input_pair() {
        let (ids, segs) = construct_input(&[10, 11], &[12], 16).unwrap();
        assert_eq!(ids, vec![CLS, 10, 11, SEP, 12, SEP]);
        assert_eq!(segs, vec![0, 0, 0, 0, 1, 1]);
        let (ids, segs) = construct_input(&[10, 11], &[], 16).unwrap();
        assert_eq!(ids, vec![CLS, 10, 11, SEP]);
        assert_eq!(segs, vec![0; 4]);
        assert!(matches!(construct_input(&[], &[1], 16), Err(Error::Input(_))));
    }

    #[test]
    fn construct_input_truncates_second_sentence_first() {
        let s1: Vec<usize> = (10..16).collect();
        let s2: Vec<usize> = (20..26).collect();
        let (ids, segs) = construct_input(&s1, &s2, 10).unwrap();
        assert_eq!(ids.len(), 10);
        assert_eq!(ids, vec![CLS, 10, 11, 12, 13, 14, 15, SEP, 20, SEP]);
        assert_eq!(segs, vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1]);
        let (ids, _) = construct_input(&s1, &s2, 5).unwrap();
        assert_eq!(ids, vec![CLS, 10, 11, SEP, SEP]);
    }

    #[test]
    fn collate_pads_right() {
        let p = |n: usize| EncodedPair {
            x: vec![5; n],
            xa: vec![6; n],
            segments: vec![0; n],
            label: 1,
        };
        let (a, b) = (p(5), p(9));
        let batch = collate(&[&a, &b], 32).unwrap();
        assert_eq!(batch.len, 9);
        assert_eq!(batch.valid[..9].iter().filter(|&&v| !v).count(), 4);
        assert_eq!(&batch.x[5..9], &[PAD; 4]);
        assert_eq!(batch.lengths(), vec![5, 9]);
        let same = collate(&[&b, &b], 32).unwrap();
        assert!(same.valid.iter().all(|&v| v));
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ex = vec![Example {
            sentence1: words("a b"),
            sentence2: words("c"),
            label: 1,
            lang: "l0".into(),
        }];
        write_dataset(&path, &ex).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ex);
        fs::write(&path, "{\"premise\": \"a\"}\n").unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, Error::Format { line: 1, .. }));
    }
}
