mod common;

use std::time::{Duration, Instant};

use rand::Rng;
use vmelab::augmentation::{augment_example, scale_dictionary, SynonymDictionary};
use vmelab::data::{build_vocab, SyntheticSpec, TranslationPair};
use vmelab::diagnostics::{alignment_retrieval, EvalReport};
use vmelab::encoder::{encode_batch, init_params, EncodeOptions, ModelConfig, Parameters};
use vmelab::experiment::{prepare, run_variant, ExperimentConfig, Prepared};
use vmelab::numerics::{grad_check, Array, BatchShape, Tensor};
use vmelab::objectives::{apt_loss, ce_pair_loss, ept_loss, nt_perturb, total_loss, ObjectiveConfig, Variant};
use vmelab::rng::{stream, Purpose};
use vmelab::training::sweep::{sweep, sweep_csv, SweepGrid};
use vmelab::training::{metrics_csv, step_loss, train_with, TrainConfig, TrainOptions, TrainState};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<T>(r: vmelab::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let model = common::model(2, 16, 2);
    let params = e2s(init_params(&model))?;
    let leaves: Vec<Array> = params.leaves().into_iter().cloned().collect();
    let batch = common::batch(&common::pairs(), model.max_len);
    let mut worst = 0.0f64;
    for variant in Variant::ALL {
        let cfg = ObjectiveConfig {
            variant,
            ..ObjectiveConfig::default()
        };
        let report = e2s(grad_check(
            |p| {
                let bound = common::bind_leaves(&params, p);
                let mut noise = stream(3, Purpose::Noise, 0);
                let mut hook = |e: Tensor| nt_perturb(&e, &batch.valid, cfg.nt_sigma, &mut noise);
                let x = encode_batch(
                    &bound,
                    &model,
                    batch.view_x(),
                    EncodeOptions {
                        dropout_rng: None,
                        embedding_hook: if variant == Variant::NtApt { Some(&mut hook) } else { None },
                    },
                )?;
                let xa = encode_batch(&bound, &model, batch.view_xa(), EncodeOptions::default())?;
                Ok(total_loss(&bound, &model, &batch, &x, Some(&xa), &cfg)?.total)
            },
            &leaves,
            1e-4,
        ))?;
        check(report.pass, format!("{variant}: max relative error {:.3e}", report.max_rel_error))?;
        worst = worst.max(report.max_rel_error);
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(60), format!("took {took:.1?}"))?;
    Ok(format!(
        "{} variants, {} parameters, max relative error {worst:.2e}, {took:.1?}",
        Variant::ALL.len(),
        params.count()
    ))
}

fn snapshot(p: &Parameters) -> Vec<f64> {
    p.leaves().into_iter().flat_map(|a| a.data.iter().copied()).collect()
}

fn loss_identities() -> Outcome {
    let model = common::model(2, 16, 2);
    let params = e2s(init_params(&model))?;
    let bound = params.bind(false);
    let batch = common::batch(&common::identity_pairs(), model.max_len);
    for variant in [Variant::EptApt, Variant::EptSrpt, Variant::Rsda] {
        let config = TrainConfig {
            objective: ObjectiveConfig {
                variant,
                ..ObjectiveConfig::default()
            },
            ..TrainConfig::default()
        };
        let terms = e2s(step_loss(&bound, &model, &batch, &config, 0))?.breakdown();
        for (name, v) in [("ept", terms.ept), ("apt", terms.apt), ("srpt", terms.srpt)] {
            check(v.is_none_or(|v| v == 0.0), format!("{variant}: {name} = {v:?}"))?;
        }
        check(terms.total.to_bits() == terms.ce.to_bits(), format!("{variant}: total != ce"))?;
    }

    let dropout_model = ModelConfig {
        dropout: 0.1,
        ..model.clone()
    };
    let init = e2s(init_params(&dropout_model))?;
    let run = |variant| -> Result<(Vec<f64>, Vec<Vec<f64>>), String> {
        let config = TrainConfig {
            batch_size: 1,
            epochs: 25,
            seed: 5,
            eval_every: Some(1),
            objective: ObjectiveConfig {
                variant,
                alpha: 0.0,
                beta: 0.0,
                ..ObjectiveConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut snaps = Vec::new();
        let mut hook = |_: u64, p: &Parameters| {
            snaps.push(snapshot(p));
            Ok(())
        };
        let out = e2s(train_with(
            &dropout_model,
            TrainState::new(init.clone()),
            &common::pairs(),
            &config,
            TrainOptions {
                stop_at: None,
                on_eval: Some(&mut hook),
            },
        ))?;
        Ok((out.metrics.iter().map(|m| m.loss.ce).collect(), snaps))
    };
    let (ce_a, p_a) = run(Variant::EptApt)?;
    let (ce_b, p_b) = run(Variant::Rsda)?;
    check(ce_a.len() == 50 && p_a.len() == 50, format!("{} steps", ce_a.len()))?;
    check(ce_a == ce_b, "ce trajectories differ")?;
    check(p_a == p_b, "parameter trajectories differ")?;
    Ok("zero targets on identity pairs, 50-step trajectories identical at alpha=beta=0".into())
}

fn hand_values() -> Outcome {
    let bs = BatchShape {
        batch: 1,
        len: 2,
        heads: 1,
    };
    let a = e2s(Tensor::constant(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]))?;
    let b = e2s(Tensor::constant(&[1, 1, 2, 2], vec![0.5; 4]))?;
    let apt = e2s(apt_loss(&a, &b, &[2], bs))?.item();
    check((apt - 0.25).abs() <= 1e-12, format!("apt {apt}"))?;

    let x = e2s(Tensor::constant(&[1, 2], vec![1.0, 0.0]))?;
    let xa = e2s(Tensor::constant(&[1, 2], vec![0.0, 0.0]))?;
    let ept = e2s(ept_loss(&x, &xa, None))?.item();
    check((ept + 0.5).abs() <= 1e-12, format!("ept {ept}"))?;

    let u = e2s(Tensor::constant(&[1, 2], vec![0.5, 0.5]))?;
    let ce = e2s(ce_pair_loss(&u, &u, &[1]))?.item();
    check((ce - 2.0 * 2f64.ln()).abs() <= 1e-9, format!("ce {ce}"))?;
    Ok(format!("apt {apt}, ept {ept}, ce {ce:.12}"))
}

fn dictionary_scaling() -> Outcome {
    let entries = (0..49975).map(|i| (format!("w{i}"), vec![format!("s{i}")])).collect();
    let dict = e2s(SynonymDictionary::from_entries(entries, "synthetic"))?;
    let mut sizes = Vec::new();
    for scale in [1.0, 0.75, 0.5, 0.25] {
        sizes.push(e2s(scale_dictionary(&dict, scale, 11))?.size());
    }
    check(sizes == [49975, 37481, 24987, 12493], format!("{sizes:?}"))?;
    Ok(format!("{sizes:?}"))
}

fn attention_contract() -> Outcome {
    let model = common::model(2, 16, 2);
    let params = e2s(init_params(&model))?.bind(false);
    let batch = common::batch(&common::pairs(), model.max_len);
    let out = e2s(encode_batch(&params, &model, batch.view_x(), EncodeOptions::default()))?;
    let mut worst = 0.0f64;
    for layer in 0..model.n_layers {
        for item in 0..batch.batch {
            for head in 0..model.n_heads {
                let m = out.attention_matrix(layer, item, head);
                for (i, row) in m.chunks_exact(batch.len).enumerate() {
                    if batch.valid[item * batch.len + i] {
                        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    } else {
                        check(row.iter().all(|&v| v == 0.0), "padded query row is not zero")?;
                    }
                }
            }
        }
    }
    check(worst <= 1e-6, format!("row sum off by {worst:e}"))?;

    let losses = |b: &vmelab::data::PairedBatch| -> Result<Vec<Option<f64>>, String> {
        let mut v = Vec::new();
        for variant in [Variant::EptApt, Variant::EptSrpt] {
            let cfg = ObjectiveConfig {
                variant,
                ..ObjectiveConfig::default()
            };
            let x = e2s(encode_batch(&params, &model, b.view_x(), EncodeOptions::default()))?;
            let xa = e2s(encode_batch(&params, &model, b.view_xa(), EncodeOptions::default()))?;
            let t = e2s(total_loss(&params, &model, b, &x, Some(&xa), &cfg))?.breakdown();
            v.extend([t.ept, t.apt, t.srpt, Some(t.total)]);
        }
        Ok(v)
    };
    let base = losses(&batch)?;
    let padded = batch.valid.iter().filter(|v| !**v).count();
    check(padded > 0, "batch has no padding")?;
    let mut rng = stream(9, Purpose::Init, 0);
    for _ in 0..5 {
        let mut mutated = batch.clone();
        for i in (0..mutated.valid.len()).filter(|&i| !mutated.valid[i]) {
            mutated.x[i] = rng.random_range(0..model.vocab_size);
            mutated.xa[i] = rng.random_range(0..model.vocab_size);
            mutated.segments[i] = rng.random_range(0..2);
        }
        check(losses(&mutated)? == base, "loss changed when padding was mutated")?;
    }
    Ok(format!("max row-sum error {worst:.1e}, {padded} padded positions mutated 5 times"))
}

fn augmentation_sampler() -> Outcome {
    let dict = e2s(SynonymDictionary::from_entries(
        vec![("a".into(), vec!["b".into(), "c".into()])],
        "pair",
    ))?;
    let mut rng = stream(21, Purpose::Augment, 0);
    let input = vec!["a".to_string()];
    let n = 100_000;
    let mut b = 0usize;
    for _ in 0..n {
        let out = augment_example(&input, &dict, 1.0, &mut rng);
        check(out.len() == 1, "length changed")?;
        match out[0].as_str() {
            "b" => b += 1,
            "c" => {}
            other => return Err(format!("unexpected token {other}")),
        }
    }
    let fb = b as f64 / n as f64;
    let fc = 1.0 - fb;
    check((0.49..=0.51).contains(&fb) && (0.49..=0.51).contains(&fc), format!("b {fb}, c {fc}"))?;
    for len in 0..40 {
        let tokens: Vec<String> = (0..len).map(|i| if i % 3 == 0 { "a".into() } else { format!("t{i}") }).collect();
        check(augment_example(&tokens, &dict, 1.0, &mut rng).len() == len, "length changed")?;
    }
    Ok(format!("b {fb:.4}, c {fc:.4}"))
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn alignment_oracle() -> Outcome {
    let d = 6;
    for seed in 0..5u64 {
        let mut rng = stream(seed, Purpose::Projection, 77);
        let names: Vec<String> = (0..50).map(|i| format!("p{i}")).collect();
        let vocab = build_vocab(std::iter::once(&names[..]));
        let mut table = Array::zeros(&[vocab.len(), d]);
        for n in &names {
            let id = vocab.get(n).ok_or("missing token")?;
            for v in table.row_mut(id) {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let mut pairs = Vec::new();
        for i in 0..40 {
            let lang = if i % 2 == 0 { "xx" } else { "yy" };
            let tgt = 25 + rng.random_range(0..25);
            pairs.push(TranslationPair {
                src_token: format!("p{}", i % 25),
                tgt_token: format!("p{tgt}"),
                lang: lang.into(),
            });
        }
        pairs.push(TranslationPair {
            src_token: "absent".into(),
            tgt_token: "p30".into(),
            lang: "xx".into(),
        });
        let report = e2s(alignment_retrieval(&table, &vocab, &pairs))?;
        check(report.skipped == 1, format!("seed {seed}: skipped {}", report.skipped))?;

        for lang in ["xx", "yy"] {
            let lp: Vec<&TranslationPair> = pairs
                .iter()
                .filter(|p| p.lang == lang && vocab.get(&p.src_token).is_some())
                .collect();
            let mut cands: Vec<usize> = Vec::new();
            for p in &lp {
                let t = vocab.get(&p.tgt_token).ok_or("missing target")?;
                if !cands.contains(&t) {
                    cands.push(t);
                }
            }
            let mut hits = 0;
            for p in &lp {
                let s = table.row(vocab.get(&p.src_token).ok_or("missing source")?);
                let sims: Vec<f64> = cands.iter().map(|&c| oracle_cos(s, table.row(c))).collect();
                let best = (0..sims.len())
                    .find(|&j| sims.iter().all(|&o| sims[j] >= o))
                    .ok_or("no candidate")?;
                if cands[best] == vocab.get(&p.tgt_token).ok_or("missing target")? {
                    hits += 1;
                }
            }
            let got = report.languages.iter().find(|l| l.lang == lang).ok_or("language missing")?;
            let want = hits as f64 / lp.len() as f64;
            check(
                got.n == lp.len() && got.precision_at_1 == want,
                format!("seed {seed} {lang}: {} vs oracle {want}", got.precision_at_1),
            )?;
        }
    }
    Ok("5 seeds x 50 points match the exhaustive oracle".into())
}

fn variant_config(base: &TrainConfig, variant: Variant) -> TrainConfig {
    TrainConfig {
        objective: ObjectiveConfig {
            variant,
            ..base.objective.clone()
        },
        ..base.clone()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

fn transfer_experiment(seed0_metrics: &mut Option<String>) -> Outcome {
    let mut ours = Vec::new();
    let mut ce_only = Vec::new();
    let mut margins = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in 0..10 {
        let start = Instant::now();
        let config = ExperimentConfig::desk(seed);
        let prepared = e2s(prepare(&config))?;
        let full = e2s(run_variant(&prepared, &config.train))?;
        let ce = e2s(run_variant(&prepared, &variant_config(&config.train, Variant::CeOnly)))?;
        let rsda = e2s(run_variant(&prepared, &variant_config(&config.train, Variant::Rsda)))?;
        let took = start.elapsed();
        slowest = slowest.max(took);
        println!(
            "    seed {seed}: full {:.4} ce_only {:.4} rsda {:.4} ({took:.1?})",
            full.zero_shot, ce.zero_shot, rsda.zero_shot
        );
        if seed == 0 {
            *seed0_metrics = Some(metrics_csv(&full.metrics));
        }
        ours.push(full.zero_shot);
        ce_only.push(ce.zero_shot);
        margins.push(full.zero_shot - rsda.zero_shot);
    }
    let (m_ours, _) = mean_std(&ours);
    let (m_ce, _) = mean_std(&ce_only);
    let (m_margin, s_margin) = mean_std(&margins);
    let detail = format!(
        "zero-shot full {m_ours:.4} vs ce_only {m_ce:.4}; margin vs rsda {m_margin:+.4} +/- {s_margin:.4}; slowest seed {slowest:.1?}"
    );
    check(m_ours >= m_ce, detail.clone())?;
    check(slowest < Duration::from_secs(15 * 60), detail.clone())?;
    Ok(detail)
}

fn determinism(seed0_metrics: Option<String>) -> Outcome {
    let first = seed0_metrics.ok_or("transfer experiment did not produce seed 0 metrics")?;
    let config = ExperimentConfig::desk(0);
    let prepared = e2s(prepare(&config))?;
    let again = metrics_csv(&e2s(run_variant(&prepared, &config.train))?.metrics);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    std::fs::write(&a, &first).map_err(|e| e.to_string())?;
    std::fs::write(&b, &again).map_err(|e| e.to_string())?;
    let same = std::fs::read(&a).map_err(|e| e.to_string())? == std::fs::read(&b).map_err(|e| e.to_string())?;
    check(same, "metrics CSVs differ")?;
    Ok(format!("{} metric rows identical", first.lines().count() - 1))
}

fn tiny_prepared() -> Result<Prepared, String> {
    let corpus = SyntheticSpec {
        n_concepts: 8,
        n_train: 16,
        n_test: 6,
        vector_dim: 0,
        ..SyntheticSpec::default()
    };
    let model = ModelConfig {
        n_layers: 12,
        n_heads: 2,
        hidden: 8,
        ffn: 16,
        ..ModelConfig::toy(0, corpus.n_classes)
    };
    e2s(prepare(&ExperimentConfig {
        corpus,
        model,
        seed_embeddings: false,
        ..ExperimentConfig::desk(0)
    }))
}

fn parse_axis(csv: &str, col: usize) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::new();
    for line in csv.lines().skip(1) {
        let x: f64 = line.split(',').nth(col).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
        if !v.contains(&x) {
            v.push(x);
        }
    }
    v
}

fn sweep_harness() -> Outcome {
    let prepared = tiny_prepared()?;
    let base = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    let run = |obj: &ObjectiveConfig| -> vmelab::Result<EvalReport> {
        let cfg = TrainConfig {
            objective: obj.clone(),
            ..base.clone()
        };
        Ok(run_variant(&prepared, &cfg)?.report)
    };
    let tables: [(&str, SweepGrid, usize, Vec<f64>); 3] = [
        ("a1", SweepGrid::table_a1(), 0, vec![3.0, 6.0, 9.0, 12.0]),
        ("a2", SweepGrid::table_a2(), 2, vec![0.1, 0.2, 0.3, 0.5, 0.7, 0.9]),
        ("a3", SweepGrid::table_a3(), 1, vec![0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8]),
    ];
    let mut rows = Vec::new();
    for (name, grid, col, want) in tables {
        let cells = sweep(&grid, &base.objective, run);
        let csv = sweep_csv(&cells);
        let header: Vec<&str> = csv.lines().next().unwrap_or("").split(',').collect();
        check(
            header[..4] == ["apt_layer", "alpha", "beta", "status"] && header.last() == Some(&"avg"),
            format!("{name}: header {header:?}"),
        )?;
        let n = csv.lines().count() - 1;
        check(n == want.len(), format!("{name}: {n} rows"))?;
        check(csv.lines().skip(1).all(|l| l.contains(",ok,")), format!("{name}: failed cell"))?;
        let got = parse_axis(&csv, col);
        check(got == want, format!("{name}: grid {got:?}"))?;
        rows.push(n);
    }
    Ok(format!("rows per table {rows:?}, average column last"))
}

fn main() {
    let mut seed0 = None;
    let criteria: Vec<(usize, &str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        (1, "gradient fidelity", Box::new(gradient_fidelity)),
        (2, "loss identities", Box::new(loss_identities)),
        (3, "hand values", Box::new(hand_values)),
        (4, "dictionary scaling", Box::new(dictionary_scaling)),
        (5, "attention contract", Box::new(attention_contract)),
        (6, "augmentation sampler", Box::new(augmentation_sampler)),
        (7, "alignment oracle", Box::new(alignment_oracle)),
        (8, "transfer experiment", Box::new(|| transfer_experiment(&mut seed0))),
    ];
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Outcome| match r {
        Ok(d) => println!("[criterion {n}] PASS {name}: {d}"),
        Err(d) => {
            failed += 1;
            println!("[criterion {n}] FAIL {name}: {d}");
        }
    };
    for (n, name, f) in criteria {
        report(n, name, f());
    }
    report(9, "determinism", determinism(seed0));
    report(10, "sweep harness", sweep_harness());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
