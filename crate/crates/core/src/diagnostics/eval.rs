use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{collate, EncodedPair};
use crate::encoder::{classify, encode_batch, EncodeOptions, ModelConfig, Parameters};
use crate::error::{Error, Result};

pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageAccuracy {
    pub lang: String,
    /// `None` for an empty test set.
    pub accuracy: Option<f64>,
    pub n: usize,
}

/// Per-language accuracies in the order the test sets were given.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub languages: Vec<LanguageAccuracy>,
    /// Unweighted mean over the languages that have an accuracy.
    pub average: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    /// From `(lang, correct, total)` triples.
    pub fn from_counts(counts: Vec<(String, usize, usize)>) -> Self {
        let languages: Vec<LanguageAccuracy> = counts
            .into_iter()
            .map(|(lang, correct, n)| LanguageAccuracy {
                lang,
                accuracy: (n > 0).then(|| correct as f64 / n as f64),
                n,
            })
            .collect();
        let average = mean(languages.iter().filter_map(|l| l.accuracy));
        Self { languages, average }
    }

    pub fn accuracy(&self, lang: &str) -> Option<f64> {
        self.languages.iter().find(|l| l.lang == lang).and_then(|l| l.accuracy)
    }

    /// Unweighted mean over every language except `source`.
    pub fn zero_shot_average(&self, source: &str) -> Option<f64> {
        mean(self.languages.iter().filter(|l| l.lang != source).filter_map(|l| l.accuracy))
    }

    pub fn language_names(&self) -> Vec<&str> {
        self.languages.iter().map(|l| l.lang.as_str()).collect()
    }

    /// `run,<languages...>,avg`, accuracies as fractions; absent ones empty.
    pub fn to_csv(&self, run: &str) -> String {
        let mut s = String::from("run");
        for l in &self.languages {
            let _ = write!(s, ",{}", l.lang);
        }
        s.push_str(",avg\n");
        s.push_str(run);
        for l in &self.languages {
            let _ = write!(s, ",{}", format_accuracy(l.accuracy));
        }
        let _ = writeln!(s, ",{}", format_accuracy(self.average));
        s
    }

    pub fn write_csv(&self, path: &Path, run: &str) -> Result<()> {
        fs::write(path, self.to_csv(run)).map_err(|e| Error::io(path, e))
    }
}

pub fn format_accuracy(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Argmax class per example in evaluation mode; ties go to the lowest class.
pub fn predict(params: &Parameters, model: &ModelConfig, examples: &[EncodedPair]) -> Result<Vec<usize>> {
    let bound = params.bind(false);
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&EncodedPair> = chunk.iter().collect();
        let batch = collate(&refs, model.max_len)?;
        let enc = encode_batch(&bound, model, batch.view_x(), EncodeOptions::default())?;
        let probs = classify(&bound, &enc.cls_state)?;
        for row in probs.values().chunks_exact(model.n_classes) {
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

pub fn evaluate_accuracy(
    params: &Parameters,
    model: &ModelConfig,
    test_sets: &[(String, Vec<EncodedPair>)],
) -> Result<EvalReport> {
    let mut counts = Vec::with_capacity(test_sets.len());
    for (lang, set) in test_sets {
        if set.is_empty() {
            log::warn!("test set {lang} is empty; reported as absent");
            counts.push((lang.clone(), 0, 0));
            continue;
        }
        let preds = predict(params, model, set)?;
        let correct = preds.iter().zip(set).filter(|(p, e)| **p == e.label).count();
        counts.push((lang.clone(), correct, set.len()));
    }
    Ok(EvalReport::from_counts(counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_is_unweighted_and_skips_absent() {
        let r = EvalReport::from_counts(vec![
            ("en".into(), 9, 10),
            ("de".into(), 1, 2),
            ("fr".into(), 0, 0),
        ]);
        assert_eq!(r.accuracy("fr"), None);
        assert!((r.average.unwrap() - 0.7).abs() < 1e-12);
        assert!((r.zero_shot_average("en").unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(r.to_csv("x"), "run,en,de,fr,avg\nx,0.900000,0.500000,,0.700000\n");
    }
}
