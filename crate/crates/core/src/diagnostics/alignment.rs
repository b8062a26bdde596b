use crate::data::{TranslationPair, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Array;

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageAlignment {
    /// Target language of the pairs.
    pub lang: String,
    pub precision_at_1: f64,
    /// Mean cosine between each source token and its translation.
    pub mean_cosine: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    pub languages: Vec<LanguageAlignment>,
    /// Pairs dropped because a token is not in the vocabulary.
    pub skipped: usize,
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Index of the most cosine-similar candidate per query, lowest index on ties.
pub fn nearest_neighbours(queries: &[&[f64]], candidates: &[&[f64]]) -> Vec<usize> {
    queries
        .iter()
        .map(|q| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (j, c) in candidates.iter().enumerate() {
                let s = cosine(q, c);
                if s > best_sim {
                    best = j;
                    best_sim = s;
                }
            }
            best
        })
        .collect()
}

/// For each target language, retrieve every source token's nearest neighbour
/// among that language's translation tokens.
pub fn alignment_retrieval(table: &Array, vocab: &Vocab, pairs: &[TranslationPair]) -> Result<AlignmentReport> {
    if table.shape.len() != 2 || table.shape[0] < vocab.len() {
        return Err(Error::dim("alignment_retrieval", &table.shape, &[vocab.len()]));
    }
    let mut langs: Vec<&str> = Vec::new();
    for p in pairs {
        if !langs.contains(&p.lang.as_str()) {
            langs.push(&p.lang);
        }
    }
    let mut skipped = 0;
    let mut out = Vec::new();
    for lang in langs {
        let mut candidates: Vec<usize> = Vec::new();
        let mut queries: Vec<(usize, usize)> = Vec::new();
        for p in pairs.iter().filter(|p| p.lang == lang) {
            let (Some(s), Some(t)) = (vocab.get(&p.src_token), vocab.get(&p.tgt_token)) else {
                skipped += 1;
                continue;
            };
            let slot = match candidates.iter().position(|&c| c == t) {
                Some(k) => k,
                None => {
                    candidates.push(t);
                    candidates.len() - 1
                }
            };
            queries.push((s, slot));
        }
        if queries.is_empty() {
            continue;
        }
        let cand_rows: Vec<&[f64]> = candidates.iter().map(|&t| table.row(t)).collect();
        let query_rows: Vec<&[f64]> = queries.iter().map(|&(s, _)| table.row(s)).collect();
        let nn = nearest_neighbours(&query_rows, &cand_rows);
        let hits = nn.iter().zip(&queries).filter(|(n, q)| **n == q.1).count();
        let cos: f64 = queries.iter().map(|&(s, k)| cosine(table.row(s), cand_rows[k])).sum();
        out.push(LanguageAlignment {
            lang: lang.to_string(),
            precision_at_1: hits as f64 / queries.len() as f64,
            mean_cosine: cos / queries.len() as f64,
            n: queries.len(),
        });
    }
    if skipped > 0 {
        log::warn!("alignment: skipped {skipped} pairs with out-of-vocabulary tokens");
    }
    Ok(AlignmentReport {
        languages: out,
        skipped,
    })
}
