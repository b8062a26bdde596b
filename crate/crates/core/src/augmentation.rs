//! Synonym dictionaries and synonym-replacement augmentation.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, PairedExample};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Headword → single-token synonyms, in insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynonymDictionary {
    entries: Vec<(String, Vec<String>)>,
    index: HashMap<String, usize>,
    source: String,
    /// Synonyms discarded at load time because they span several tokens.
    dropped_multi_token: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    word: String,
    synonyms: Vec<String>,
}

impl SynonymDictionary {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            source: "empty".into(),
            dropped_multi_token: 0,
        }
    }

    /// Builds a dictionary, dropping self-references and multi-token synonyms.
    /// Repeated headwords are merged; entries left without synonyms vanish.
    pub fn from_entries(entries: Vec<(String, Vec<String>)>, source: &str) -> Result<Self> {
        let mut dict = Self {
            source: source.to_string(),
            ..Self::empty()
        };
        for (word, syns) in entries {
            dict.insert(word, syns)?;
        }
        dict.entries.retain(|(_, s)| !s.is_empty());
        dict.index = dict
            .entries
            .iter()
            .enumerate()
            .map(|(i, (w, _))| (w.clone(), i))
            .collect();
        Ok(dict)
    }

    fn insert(&mut self, word: String, syns: Vec<String>) -> Result<()> {
        if word.split_whitespace().count() != 1 {
            return Err(Error::Input(format!("headword {word:?} is not a single token")));
        }
        let slot = match self.index.get(&word) {
            Some(&i) => i,
            None => {
                self.entries.push((word.clone(), Vec::new()));
                self.index.insert(word.clone(), self.entries.len() - 1);
                self.entries.len() - 1
            }
        };
        for s in syns {
            if s.split_whitespace().count() != 1 {
                self.dropped_multi_token += 1;
                continue;
            }
            let list = &mut self.entries[slot].1;
            if s != word && !list.contains(&s) {
                list.push(s);
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn dropped_multi_token(&self) -> usize {
        self.dropped_multi_token
    }

    pub fn synonyms(&self, word: &str) -> Option<&[String]> {
        self.index.get(word).map(|&i| self.entries[i].1.as_slice())
    }

    pub fn entries(&self) -> &[(String, Vec<String>)] {
        &self.entries
    }

    /// JSONL, one `{"word": w, "synonyms": [...]}` per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for (word, synonyms) in &self.entries {
            serde_json::to_writer(
                &mut buf,
                &EntryRecord {
                    word: word.clone(),
                    synonyms: synonyms.clone(),
                },
            )?;
            buf.push(b'\n');
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

pub fn load_dictionary(path: &Path) -> Result<SynonymDictionary> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fmt_err = |message: String| Error::Format {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let rec: EntryRecord = serde_json::from_str(&line).map_err(|e| fmt_err(e.to_string()))?;
        if rec.word.split_whitespace().count() != 1 {
            return Err(fmt_err(format!("headword {:?} is not a single token", rec.word)));
        }
        entries.push((rec.word, rec.synonyms));
    }
    let dict = SynonymDictionary::from_entries(entries, &path.display().to_string())?;
    if dict.dropped_multi_token > 0 {
        log::warn!(
            "{}: dropped {} multi-token synonyms",
            path.display(),
            dict.dropped_multi_token
        );
    }
    Ok(dict)
}

/// Uniform seeded subset of `floor(scale · size)` entries, original order kept.
pub fn scale_dictionary(dict: &SynonymDictionary, scale: f64, seed: u64) -> Result<SynonymDictionary> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Config(format!("dictionary scale {scale} not in (0, 1]")));
    }
    let keep = (scale * dict.size() as f64).floor() as usize;
    let mut rng = stream(seed, Purpose::Scale, 0);
    let mut picked = index::sample(&mut rng, dict.size(), keep).into_vec();
    picked.sort_unstable();
    let entries = picked.into_iter().map(|i| dict.entries[i].clone()).collect();
    let mut out = SynonymDictionary::from_entries(entries, &dict.source)?;
    out.dropped_multi_token = dict.dropped_multi_token;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub replace_prob: f64,
    pub copies: usize,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            replace_prob: 0.25,
            copies: 1,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return Err(Error::Config(format!("replace_prob {} not in [0, 1]", self.replace_prob)));
        }
        if self.copies == 0 {
            return Err(Error::Config("copies must be >= 1".into()));
        }
        Ok(())
    }
}

/// Each token with a dictionary entry is replaced, with probability `p`, by a
/// uniformly chosen synonym. Length is always preserved.
pub fn augment_example<R: Rng + ?Sized>(
    tokens: &[String],
    dict: &SynonymDictionary,
    p: f64,
    rng: &mut R,
) -> Vec<String> {
    tokens
        .iter()
        .map(|t| match dict.synonyms(t) {
            Some(syns) if rng.random_bool(p) => syns.choose(rng).expect("non-empty list").clone(),
            _ => t.clone(),
        })
        .collect()
}

/// `copies` pairs per example; every copy draws its own replacements from a
/// stream keyed by (seed, example index, copy).
pub fn augment_dataset(
    dataset: &[Example],
    dict: &SynonymDictionary,
    policy: &AugmentationPolicy,
) -> Result<Vec<PairedExample>> {
    policy.validate()?;
    let mut out = Vec::with_capacity(dataset.len() * policy.copies);
    for (i, e) in dataset.iter().enumerate() {
        for k in 0..policy.copies {
            let mut rng = stream(policy.seed, Purpose::Augment, ((i as u64) << 16) | k as u64);
            let augmented = Example {
                sentence1: augment_example(&e.sentence1, dict, policy.replace_prob, &mut rng),
                sentence2: augment_example(&e.sentence2, dict, policy.replace_prob, &mut rng),
                label: e.label,
                lang: e.lang.clone(),
            };
            out.push(PairedExample {
                original: e.clone(),
                augmented,
            });
        }
    }
    Ok(out)
}
