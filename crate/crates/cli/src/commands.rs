use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vmelab::augmentation::{augment_dataset, load_dictionary, scale_dictionary, SynonymDictionary};
use vmelab::data::{
    build_vocab, encode_example, encode_pair, gen_synthetic_corpus, group_by_lang, read_dataset, read_pairs,
    write_dataset, write_pairs, EncodedPair, Example, PairedExample, TranslationPair, Vocab, CLS, RESERVED, SEP,
};
use vmelab::diagnostics::{
    alignment_retrieval, evaluate_accuracy, format_accuracy, project_embeddings, write_projection_csv,
    write_projection_svg, EvalReport, Method, ProjectedPoint,
};
use vmelab::encoder::{encode, init_params, ModelConfig, Parameters};
use vmelab::training::sweep::{sweep as run_sweep, write_sweep_csv, SweepGrid};
use vmelab::training::{train_with, write_metrics, Checkpoint, TrainOptions, TrainState};
use vmelab::{Error, Result};

use crate::config::RunConfig;

pub fn create_run_dir(root: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-seed{}", cfg.seed);
    let mut dir = root.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let text = serde_json::to_string_pretty(cfg)? + "\n";
    let path = dir.join("config.json");
    fs::write(&path, text).map_err(|e| io(&path, e))?;
    eprintln!("run directory: {}", dir.display());
    Ok(dir)
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorRecord {
    token: String,
    vector: Vec<f64>,
}

fn write_vectors(path: &Path, vectors: &[(String, Vec<f64>)]) -> Result<()> {
    let mut s = String::new();
    for (token, vector) in vectors {
        s += &serde_json::to_string(&VectorRecord {
            token: token.clone(),
            vector: vector.clone(),
        })?;
        s.push('\n');
    }
    write(path, &s)
}

fn read_vectors(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let file = fs::File::open(path).map_err(|e| io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: VectorRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((r.token, r.vector));
    }
    Ok(out)
}

/// Training and test material, from files when `paths.train_file` is set and
/// from the synthetic generator otherwise.
struct DataBundle {
    train: Vec<Example>,
    test: Vec<(String, Vec<Example>)>,
    dictionary: SynonymDictionary,
    translations: Vec<TranslationPair>,
    token_vectors: Vec<(String, Vec<f64>)>,
    lexicon: Vec<String>,
    n_classes: usize,
    source_lang: String,
}

fn load_data(cfg: &RunConfig) -> Result<DataBundle> {
    let p = &cfg.paths;
    let Some(train_path) = &p.train_file else {
        let corpus = gen_synthetic_corpus(&cfg.corpus)?;
        let lexicon = corpus.lexicon();
        let dictionary = match &p.dictionary {
            Some(d) => load_dictionary(d)?,
            None => corpus.dictionary,
        };
        return Ok(DataBundle {
            train: corpus.train,
            test: corpus.test,
            dictionary,
            translations: corpus.translations,
            token_vectors: corpus.token_vectors,
            lexicon,
            n_classes: cfg.corpus.n_classes,
            source_lang: "l0".into(),
        });
    };
    let train = read_dataset(train_path)?;
    if train.is_empty() {
        return Err(Error::Input(format!("{} has no examples", train_path.display())));
    }
    let test = match &p.test_file {
        Some(t) => group_by_lang(read_dataset(t)?),
        None => Vec::new(),
    };
    let n_classes = train
        .iter()
        .chain(test.iter().flat_map(|(_, v)| v))
        .map(|e| e.label + 1)
        .max()
        .unwrap_or(2)
        .max(2);
    Ok(DataBundle {
        source_lang: train[0].lang.clone(),
        train,
        test,
        dictionary: match &p.dictionary {
            Some(d) => load_dictionary(d)?,
            None => SynonymDictionary::empty(),
        },
        translations: match &p.translations {
            Some(t) => TranslationPair::read_csv(t)?,
            None => Vec::new(),
        },
        token_vectors: match &p.token_vectors {
            Some(t) => read_vectors(t)?,
            None => Vec::new(),
        },
        lexicon: Vec::new(),
        n_classes,
    })
}

impl DataBundle {
    fn build_vocab(&self) -> Vocab {
        let mut extra: Vec<String> = self.lexicon.clone();
        for (w, syns) in self.dictionary.entries() {
            extra.push(w.clone());
            extra.extend(syns.iter().cloned());
        }
        extra.extend(self.token_vectors.iter().map(|(t, _)| t.clone()));
        for t in &self.translations {
            extra.push(t.src_token.clone());
            extra.push(t.tgt_token.clone());
        }
        let mut docs: Vec<&[String]> = Vec::new();
        for e in self.train.iter().chain(self.test.iter().flat_map(|(_, v)| v)) {
            docs.push(&e.sentence1);
            docs.push(&e.sentence2);
        }
        docs.push(&extra);
        build_vocab(docs)
    }

    fn encoded_test(&self, vocab: &Vocab, max_len: usize) -> Result<Vec<(String, Vec<EncodedPair>)>> {
        self.test
            .iter()
            .map(|(lang, set)| {
                let enc = set.iter().map(|e| encode_example(vocab, e, max_len)).collect::<Result<_>>()?;
                Ok((lang.clone(), enc))
            })
            .collect()
    }
}

fn resolve_vocab(cfg: &RunConfig, data: &DataBundle) -> Result<Vocab> {
    if let Some(v) = &cfg.paths.vocab {
        return Vocab::load(v);
    }
    if let Some(sibling) = cfg.paths.checkpoint.as_ref().and_then(|c| c.parent()).map(|d| d.join("vocab.txt")) {
        if sibling.exists() {
            return Vocab::load(&sibling);
        }
    }
    Ok(data.build_vocab())
}

fn initial_params(cfg: &RunConfig, model: &ModelConfig, vocab: &Vocab, data: &DataBundle) -> Result<Parameters> {
    let mut params = init_params(model)?;
    if cfg.model.seed_embeddings && !data.token_vectors.is_empty() {
        if let Some((t, v)) = data.token_vectors.iter().find(|(_, v)| v.len() != model.hidden) {
            return Err(Error::Config(format!(
                "token vector for {t:?} has width {} but model.hidden is {}; set corpus.vector_dim or seed_embeddings=false",
                v.len(),
                model.hidden
            )));
        }
        let rows: Vec<(usize, Vec<f64>)> = data
            .token_vectors
            .iter()
            .filter_map(|(t, v)| vocab.get(t).map(|id| (id, v.clone())))
            .collect();
        params.seed_token_embeddings(&rows)?;
    }
    Ok(params)
}

/// Model and parameters from `paths.checkpoint`, or freshly initialised.
fn model_and_params(cfg: &RunConfig, vocab: &Vocab, data: &DataBundle) -> Result<(ModelConfig, Parameters)> {
    match &cfg.paths.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if vocab.len() > ck.model.vocab_size {
                return Err(Error::Input(format!(
                    "vocabulary has {} entries but the checkpoint was trained with {}",
                    vocab.len(),
                    ck.model.vocab_size
                )));
            }
            Ok((ck.model, ck.params))
        }
        None => {
            let model = cfg.model_config(vocab.len(), data.n_classes);
            let params = initial_params(cfg, &model, vocab, data)?;
            Ok((model, params))
        }
    }
}

fn print_report(report: &EvalReport) {
    for l in &report.languages {
        println!("{:>8}  {}  (n={})", l.lang, format_accuracy(l.accuracy), l.n);
    }
    println!("{:>8}  {}", "avg", format_accuracy(report.average));
}

pub fn gen_corpus(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = gen_synthetic_corpus(&cfg.corpus)?;
    write_dataset(&dir.join("train.jsonl"), &corpus.train)?;
    let test: Vec<Example> = corpus.test.iter().flat_map(|(_, v)| v.iter().cloned()).collect();
    write_dataset(&dir.join("test.jsonl"), &test)?;
    corpus.dictionary.save(&dir.join("dictionary.jsonl"))?;
    TranslationPair::write_csv(&dir.join("translations.csv"), &corpus.translations)?;
    write_vectors(&dir.join("token_vectors.jsonl"), &corpus.token_vectors)?;
    println!(
        "{} training items, {} test items in {} languages, {} dictionary entries",
        corpus.train.len(),
        test.len(),
        corpus.test.len(),
        corpus.dictionary.size()
    );
    Ok(())
}

fn training_dictionary(cfg: &RunConfig, data: &DataBundle) -> Result<SynonymDictionary> {
    if cfg.augment.dictionary_scale < 1.0 {
        scale_dictionary(&data.dictionary, cfg.augment.dictionary_scale, cfg.seed)
    } else if cfg.augment.dictionary_scale == 1.0 {
        Ok(data.dictionary.clone())
    } else {
        Err(Error::Config(format!(
            "dictionary_scale {} not in (0, 1]",
            cfg.augment.dictionary_scale
        )))
    }
}

pub fn augment(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let dict = training_dictionary(cfg, &data)?;
    if dict.is_empty() {
        log::warn!("dictionary is empty; augmented views equal the originals");
    }
    let pairs = augment_dataset(&data.train, &dict, &cfg.augmentation_policy())?;
    let changed = pairs.iter().filter(|p| p.original != p.augmented).count();
    write_pairs(&dir.join("pairs.jsonl"), &pairs)?;
    println!(
        "{} pairs from {} examples ({} changed), dictionary {} entries",
        pairs.len(),
        data.train.len(),
        changed,
        dict.size()
    );
    Ok(())
}

fn training_pairs(cfg: &RunConfig, data: &DataBundle) -> Result<Vec<PairedExample>> {
    if let Some(p) = &cfg.paths.pairs {
        return read_pairs(p);
    }
    if !cfg.objective.variant.uses_pairs() {
        return Ok(data.train.iter().map(PairedExample::identity).collect());
    }
    let dict = training_dictionary(cfg, data)?;
    if dict.is_empty() {
        log::warn!("no synonym dictionary; both views of every pair are identical");
    }
    augment_dataset(&data.train, &dict, &cfg.augmentation_policy())
}

fn eval_log_csv(rows: &[(u64, EvalReport)]) -> String {
    let mut s = String::from("step");
    if let Some((_, r)) = rows.first() {
        for l in r.language_names() {
            s += &format!(",{l}");
        }
    }
    s += ",avg\n";
    for (step, r) in rows {
        s += &step.to_string();
        for l in &r.languages {
            s += &format!(",{}", format_accuracy(l.accuracy));
        }
        s += &format!(",{}\n", format_accuracy(r.average));
    }
    s
}

pub fn train(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let vocab = resolve_vocab(cfg, &data)?;
    let train_cfg = cfg.train_config();
    let (model, state) = if resume {
        let path = cfg
            .paths
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("--resume needs paths.checkpoint".into()))?;
        let ck = Checkpoint::load(path)?;
        (ck.model.clone(), ck.state())
    } else {
        let model = cfg.model_config(vocab.len(), data.n_classes);
        let params = initial_params(cfg, &model, &vocab, &data)?;
        (model, TrainState::new(params))
    };
    train_cfg.validate(&model)?;
    let pairs = training_pairs(cfg, &data)?
        .iter()
        .map(|p| encode_pair(&vocab, p, model.max_len))
        .collect::<Result<Vec<_>>>()?;
    let test = data.encoded_test(&vocab, model.max_len)?;

    let mut evals: Vec<(u64, EvalReport)> = Vec::new();
    let mut hook = |step: u64, params: &Parameters| -> Result<()> {
        if !test.is_empty() {
            let r = evaluate_accuracy(params, &model, &test)?;
            log::info!("step {step}: avg accuracy {}", format_accuracy(r.average));
            evals.push((step, r));
        }
        Ok(())
    };
    let outcome = train_with(
        &model,
        state,
        &pairs,
        &train_cfg,
        TrainOptions {
            stop_at: None,
            on_eval: Some(&mut hook),
        },
    )?;
    write_metrics(&dir.join("metrics.csv"), &outcome.metrics)?;
    vocab.save(&dir.join("vocab.txt"))?;
    Checkpoint::from_state(&model, &train_cfg, &outcome.state).save(&dir.join("checkpoint.bin"))?;
    if !evals.is_empty() {
        write(&dir.join("eval_log.csv"), &eval_log_csv(&evals))?;
    }
    println!(
        "{} steps, variant {}, {} pairs, final loss {}",
        outcome.metrics.len(),
        train_cfg.objective.variant,
        pairs.len(),
        outcome.metrics.last().map(|m| m.loss.total.to_string()).unwrap_or_else(|| "-".into())
    );
    if !test.is_empty() {
        let report = evaluate_accuracy(&outcome.state.params, &model, &test)?;
        report.write_csv(&dir.join("eval.csv"), train_cfg.objective.variant.name())?;
        print_report(&report);
        if let Some(z) = report.zero_shot_average(&data.source_lang) {
            println!("zero-shot avg (excluding {}): {}", data.source_lang, format_accuracy(Some(z)));
        }
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let vocab = resolve_vocab(cfg, &data)?;
    let (model, params) = model_and_params(cfg, &vocab, &data)?;
    let test = data.encoded_test(&vocab, model.max_len)?;
    if test.is_empty() {
        return Err(Error::Input("no test data (set paths.test_file)".into()));
    }
    let report = evaluate_accuracy(&params, &model, &test)?;
    let run = if cfg.paths.checkpoint.is_some() { "checkpoint" } else { "untrained" };
    report.write_csv(&dir.join("eval.csv"), run)?;
    print_report(&report);
    Ok(())
}

pub fn sweep(cfg: &RunConfig, dir: &Path, preset: Option<&str>, axes: &[String]) -> Result<()> {
    let data = load_data(cfg)?;
    let vocab = resolve_vocab(cfg, &data)?;
    let model = cfg.model_config(vocab.len(), data.n_classes);
    let init = initial_params(cfg, &model, &vocab, &data)?;
    let mut grid = match preset {
        Some(p) => SweepGrid::preset(p)?,
        None => SweepGrid::single(cfg.objective.apt_layer(&model), cfg.objective.alpha, cfg.objective.beta),
    };
    for a in axes {
        grid.set_axis(a)?;
    }
    let pairs = training_pairs(cfg, &data)?
        .iter()
        .map(|p| encode_pair(&vocab, p, model.max_len))
        .collect::<Result<Vec<_>>>()?;
    let test = data.encoded_test(&vocab, model.max_len)?;
    if test.is_empty() {
        return Err(Error::Input("sweep needs test data (set paths.test_file)".into()));
    }
    let base = cfg.train_config();
    let total = grid.cells().len();
    let mut done = 0;
    let cells = run_sweep(&grid, &base.objective, |objective| {
        done += 1;
        eprintln!(
            "cell {done}/{total}: apt_layer={:?} alpha={} beta={}",
            objective.apt_layer, objective.alpha, objective.beta
        );
        let tc = vmelab::training::TrainConfig {
            objective: objective.clone(),
            ..base.clone()
        };
        let out = train_with(&model, TrainState::new(init.clone()), &pairs, &tc, TrainOptions::default())?;
        evaluate_accuracy(&out.state.params, &model, &test)
    });
    let path = dir.join("sweep.csv");
    write_sweep_csv(&path, &cells)?;
    print!("{}", vmelab::training::sweep::sweep_csv(&cells));
    let failed = cells.iter().filter(|c| c.result.is_err()).count();
    if failed == cells.len() {
        return Err(Error::Config(format!("all {failed} sweep cells failed; see {}", path.display())));
    }
    Ok(())
}

pub struct ProjectOptions {
    pub method: Method,
    pub langs: Option<Vec<String>>,
    pub layer: usize,
    pub max_points: usize,
}

pub fn project(cfg: &RunConfig, dir: &Path, opts: &ProjectOptions) -> Result<()> {
    let data = load_data(cfg)?;
    let vocab = resolve_vocab(cfg, &data)?;
    let (model, params) = model_and_params(cfg, &vocab, &data)?;
    if opts.layer > model.n_layers {
        return Err(Error::Config(format!("layer {} but the model has {}", opts.layer, model.n_layers)));
    }
    let langs: Vec<String> = opts
        .langs
        .clone()
        .unwrap_or_else(|| data.test.iter().map(|(l, _)| l.clone()).collect());
    let mut picked: Vec<(String, String, usize)> = Vec::new();
    for lang in &langs {
        let Some((_, set)) = data.test.iter().find(|(l, _)| l == lang) else {
            return Err(Error::Input(format!("no test set for language {lang:?}")));
        };
        for e in set {
            for t in e.sentence1.iter().chain(&e.sentence2) {
                if RESERVED.contains(&t.as_str()) || picked.iter().any(|(w, _, _)| w == t) {
                    continue;
                }
                if let Some(id) = vocab.get(t) {
                    picked.push((t.clone(), lang.clone(), id));
                }
            }
        }
    }
    if picked.len() > opts.max_points {
        log::warn!("keeping the first {} of {} words", opts.max_points, picked.len());
        picked.truncate(opts.max_points);
    }
    let bound = params.bind(false);
    let vectors: Vec<Vec<f64>> = picked
        .iter()
        .map(|(_, _, id)| {
            if opts.layer == 0 {
                Ok(params.token_embedding.row(*id).to_vec())
            } else {
                let out = encode(&bound, &model, &[CLS, *id, SEP], &[0, 0, 0], &[true; 3])?;
                let d = model.hidden;
                Ok(out.hidden[opts.layer - 1].values()[d..2 * d].to_vec())
            }
        })
        .collect::<Result<_>>()?;
    let coords = project_embeddings(&vectors, opts.method, cfg.seed)?;
    let points: Vec<ProjectedPoint> = picked
        .iter()
        .zip(coords)
        .map(|((w, l, _), [x, y])| ProjectedPoint {
            id: w.clone(),
            lang: l.clone(),
            x,
            y,
        })
        .collect();
    write_projection_csv(&dir.join("projection.csv"), &points)?;
    write_projection_svg(&dir.join("projection.svg"), &points)?;
    println!("projected {} words from {}", points.len(), langs.join(", "));
    if !data.translations.is_empty() {
        let report = alignment_retrieval(&params.token_embedding, &vocab, &data.translations)?;
        let mut s = String::from("lang,precision_at_1,mean_cosine,n\n");
        for l in &report.languages {
            s += &format!("{},{:.6},{:.6},{}\n", l.lang, l.precision_at_1, l.mean_cosine, l.n);
            println!("{:>8}  P@1 {:.4}  mean cos {:.4}  (n={})", l.lang, l.precision_at_1, l.mean_cosine, l.n);
        }
        write(&dir.join("alignment.csv"), &s)?;
    }
    Ok(())
}
