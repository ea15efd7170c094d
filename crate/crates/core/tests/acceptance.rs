//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach stdout; exits non-zero when any
//! criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use lexjudge::augment::{augment, ingest_foreign};
use lexjudge::corpus::{Dataset, Dimension, Lang, Provenance, Split};
use lexjudge::encoder::optim::Adam;
use lexjudge::encoder::params::{ParamGrads, ParamGroup};
use lexjudge::encoder::{EncoderConfig, HierarchicalClassifier};
use lexjudge::evaluator::{aggregate, diff, format_cell, format_score, macro_f1_pairs};
use lexjudge::pipeline::{cmd_prepare, cmd_report, cmd_run, PrepareOptions, RunOptions};
use lexjudge::rng::stream_rng;
use lexjudge::stats::{aso_epsilon, aso_matrix, wasserstein_1d, AsoConfig};
use lexjudge::synthetic::SyntheticSpec;
use lexjudge::trainer::{build_training_set, dev_set, predict_examples, train_once, ExperimentConfig, PreparedRun, TrainHooks};
use lexjudge::translator::MockBackend;

use common::*;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// 1. Randomizing ids under masked positions leaves logits unchanged.
fn mask_invariance() -> Outcome {
    let config = EncoderConfig::default();
    let model = HierarchicalClassifier::new(config.clone(), 11).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(1, "acceptance-mask");
    let mut worst: f64 = 0.0;
    let mut pad_blocks = 0;
    let max_words = (config.blocking.max_blocks - 1) * (config.blocking.block_len - 2);
    for _ in 0..100 {
        let row = random_row(&mut rng, &config, max_words);
        let mut noisy = row.clone();
        for (id, m) in noisy.token_ids.iter_mut().zip(&row.token_mask) {
            if *m == 0 {
                *id = rng.random_range(0..config.vocab_size as u32);
            }
        }
        pad_blocks += row.block_mask.iter().filter(|m| **m == 0).count();
        let a = model.logits(&row).map_err(|e| e.to_string())?;
        let b = model.logits(&noisy).map_err(|e| e.to_string())?;
        for k in 0..2 {
            worst = worst.max((a[k] - b[k]).abs());
        }
    }
    ensure(pad_blocks >= 100, "documents had no pad blocks")?;
    ensure(worst <= 1e-6, format!("max |Δlogit| = {worst:e}"))?;
    Ok(format!("max |Δlogit| = {worst:e} over 100 docs ({pad_blocks} pad blocks)"))
}

// 2. Central finite differences against backprop on an H = 16 model.
fn gradient_check() -> Outcome {
    let config = tiny_encoder(16, 64, 16);
    let mut model = HierarchicalClassifier::new(config.clone(), 5).map_err(|e| e.to_string())?;
    model.configure_adapters(4).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(2, "acceptance-grad");
    let noise = Normal::new(0.0, 0.05).unwrap();
    for p in model.store.iter_mut() {
        if p.group == ParamGroup::Adapter && p.name.contains(".up.") {
            p.value.data.iter_mut().for_each(|v| *v = noise.sample(&mut rng));
        }
        p.trainable = true;
    }
    let row = random_row(&mut rng, &config, 40);
    let row = if row.block_mask.iter().sum::<u8>() >= 2 {
        row
    } else {
        lexjudge::encoder::tokenize_blocks(&random_text(&mut rng, 40), &config.tokenizer(), &config.blocking)
    };
    let label = 1u8;
    let mut grads = ParamGrads::new(&model.store);
    {
        let (g, loss) = model.loss_graph(&row, label, None);
        g.backward(loss, 1.0, &mut grads);
    }
    let loss_at = |m: &HierarchicalClassifier| {
        let (g, loss) = m.loss_graph(&row, label, None);
        g.value(loss).data[0]
    };
    let mut slots = Vec::new();
    for (id, p) in model.store.iter() {
        for i in 0..p.value.len() {
            slots.push((id, i));
        }
    }
    let picks: Vec<_> = slots.choose_multiple(&mut rng, 200).copied().collect();
    let h = 1e-5;
    let tol = 1e-3;
    // Difference quotients carry roundoff of about eps·|L|/h, so gradients
    // smaller than roundoff/tol cannot be resolved to `tol` relative error.
    let roundoff = f64::EPSILON * loss_at(&model).abs().max(1.0) / h;
    let floor = roundoff / tol;
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut resolved = 0;
    for (id, i) in picks {
        let orig = model.store.value(id).data[i];
        model.store.get_mut(id).value.data[i] = orig + h;
        let up = loss_at(&model);
        model.store.get_mut(id).value.data[i] = orig - h;
        let down = loss_at(&model);
        model.store.get_mut(id).value.data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g.data[i]);
        let scale = numeric.abs().max(analytic.abs());
        if scale >= floor {
            resolved += 1;
        } else {
            worst_abs = worst_abs.max((numeric - analytic).abs());
        }
        worst = worst.max((numeric - analytic).abs() / scale.max(floor));
    }
    ensure(resolved >= 100, format!("only {resolved} sampled gradients exceed the roundoff floor {floor:.1e}"))?;
    ensure(worst < tol, format!("max relative error {worst:e}"))?;
    ensure(worst_abs <= 4.0 * roundoff, format!("sub-floor absolute error {worst_abs:e}"))?;
    Ok(format!(
        "max relative error {worst:.2e} over 200 parameters ({resolved} above the {floor:.1e} roundoff floor)"
    ))
}

// 3. Adapter insertion is an identity at init, freezes the backbone and
//    trains only adapters, layer norms and the head.
fn adapter_contract() -> Outcome {
    let config = EncoderConfig::default();
    let base = HierarchicalClassifier::new(config.clone(), 3).map_err(|e| e.to_string())?;
    let mut adapted = HierarchicalClassifier::new(config.clone(), 3).map_err(|e| e.to_string())?;
    adapted.configure_adapters(4).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(3, "acceptance-adapter");
    let rows: Vec<_> = (0..8).map(|_| random_row(&mut rng, &config, 600)).collect();
    let mut worst: f64 = 0.0;
    for row in &rows {
        let a = base.logits(row).map_err(|e| e.to_string())?;
        let b = adapted.logits(row).map_err(|e| e.to_string())?;
        worst = worst.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
    }
    ensure(worst <= 1e-6, format!("adapted forward differs by {worst:e}"))?;

    let expected: BTreeSet<String> = adapted
        .store
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| n.contains(".adapter.") || n.contains(".norm.") || n.starts_with("head."))
        .collect();
    let trainable: BTreeSet<String> = adapted
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.name.clone())
        .collect();
    ensure(trainable == expected, "trainable set differs from adapters ∪ layer norms ∪ head")?;
    ensure(
        trainable == adapted.partition().trainable_in_adapter_mode(),
        "partition disagrees with trainable flags",
    )?;

    let before = adapted.store.clone();
    let mut grads = ParamGrads::new(&adapted.store);
    let mut dropout = stream_rng(3, "dropout");
    for (k, row) in rows.iter().enumerate() {
        let (g, loss) = adapted.loss_graph(row, (k % 2) as u8, Some(&mut dropout));
        g.backward(loss, 1.0 / rows.len() as f64, &mut grads);
    }
    Adam::new(&adapted.store).step(&mut adapted.store, &grads, 1e-3);
    let mut changed = 0;
    for ((_, old), (_, new)) in before.iter().zip(adapted.store.iter()) {
        let same = old.value.data.iter().zip(&new.value.data).all(|(a, b)| a.to_bits() == b.to_bits());
        if !old.trainable {
            ensure(same, format!("frozen {} moved", old.name))?;
        } else if !same {
            changed += 1;
        }
    }
    ensure(changed > 0, "no trainable parameter moved")?;

    let total = adapted.store.scalar_count();
    let count = adapted.store.trainable_count();
    let closed = HierarchicalClassifier::adapter_mode_trainable(&adapted.config);
    ensure(count == closed, format!("trainable {count} != closed form {closed}"))?;
    let fraction = count as f64 / total as f64;
    ensure(fraction < 0.10, format!("trainable fraction {fraction:.4}"))?;
    Ok(format!(
        "init Δ = {worst:e}; frozen bit-identical; {count}/{total} trainable ({:.2}%)",
        100.0 * fraction
    ))
}

// 4. macro-F1 and aggregate against independent oracles.
fn metric_oracle() -> Outcome {
    fn oracle_f1(pairs: &[(u8, u8)]) -> f64 {
        let mut total = 0.0;
        for class in [0u8, 1] {
            let tp = pairs.iter().filter(|(g, p)| *g == class && *p == class).count() as f64;
            let pred = pairs.iter().filter(|(_, p)| *p == class).count() as f64;
            let gold = pairs.iter().filter(|(g, _)| *g == class).count() as f64;
            let precision = if pred == 0.0 { 0.0 } else { tp / pred };
            let recall = if gold == 0.0 { 0.0 } else { tp / gold };
            total += if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
        }
        total / 2.0
    }
    let mut rng = stream_rng(4, "acceptance-metric");
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let pairs: Vec<(u8, u8)> = (0..n).map(|_| (rng.random_range(0..2), rng.random_range(0..2))).collect();
        let (a, b) = (macro_f1_pairs(pairs.iter().copied()), oracle_f1(&pairs));
        ensure(a == b, format!("macro_f1 {a} vs oracle {b} on {pairs:?}"))?;
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..10);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let agg = aggregate(&xs).unwrap();
        worst = worst.max((agg.mean - mean).abs()).max((agg.std - var.sqrt()).abs());
    }
    ensure(worst <= 1e-12, format!("aggregate off by {worst:e}"))?;
    Ok(format!("1000 exact macro-F1 matches; aggregate max error {worst:e}"))
}

// 5. Published arithmetic reproduced after one-decimal rounding.
fn arithmetic_anchors() -> Outcome {
    let cell = format_cell(&aggregate(&[68.2, 69.9, 65.9]).unwrap());
    ensure(cell == "68.0 ± 2.0", format!("aggregate renders {cell}"))?;
    let m = |v: [f64; 3]| BTreeMap::from([(Lang::De, v[0]), (Lang::Fr, v[1]), (Lang::It, v[2])]);
    let d1 = format_score(diff(&m([68.5, 70.2, 57.1])).unwrap());
    let d2 = format_score(diff(&m([70.5, 71.8, 73.5])).unwrap());
    ensure(d1 == "13.1", format!("diff renders {d1}"))?;
    ensure(d2 == "3.0", format!("diff renders {d2}"))?;
    Ok(format!("\"{cell}\", ( {d1} ), ( {d2} )"))
}

// 6. Augmentation triples the corpus; foreign ingestion yields only
//    translations.
fn augmentation_cardinality() -> Outcome {
    let mut rng = stream_rng(6, "acceptance-augment");
    let langs = [Lang::De, Lang::Fr, Lang::It];
    let n = 300;
    let originals = Dataset::new(
        Split::Train,
        (0..n).map(|i| random_case(&mut rng, format!("c{i:04}"), langs[i % 3])).collect(),
    );
    let (backend, translator) = mock_translator();
    let augmented = augment(&originals, &swiss(), &translator).map_err(|e| e.to_string())?;
    ensure(augmented.len() == 3 * n, format!("{} cases from {n} originals", augmented.len()))?;
    let by_id: BTreeMap<&str, _> = originals.cases.iter().map(|c| (c.id.as_str(), c)).collect();
    for c in &augmented.cases {
        let source_id = c.id.split(':').next().unwrap();
        let orig = by_id[source_id];
        ensure(
            c.label == orig.label
                && c.year == orig.year
                && c.region == orig.region
                && c.legal_area == orig.legal_area
                && c.jurisdiction == orig.jurisdiction
                && c.source_language == orig.language,
            format!("metadata of {} not preserved", c.id),
        )?;
        if c.provenance == Provenance::Mt {
            ensure(c.language != orig.language, format!("{} translated into its own language", c.id))?;
        }
    }
    let per_lang: BTreeMap<Lang, usize> = augmented.cases.iter().fold(BTreeMap::new(), |mut m, c| {
        *m.entry(c.language).or_default() += 1;
        m
    });
    ensure(per_lang.values().all(|v| *v == n), format!("per-language counts {per_lang:?}"))?;

    let foreign = Dataset::new(
        Split::Train,
        (0..150)
            .map(|i| {
                let year = rng.random_range(1995..=2020);
                foreign_case(&mut rng, format!("f{i:04}"), year)
            })
            .collect(),
    );
    let cutoff = 2014;
    let m = foreign.cases.iter().filter(|c| c.year.unwrap() <= cutoff).count();
    let translated = ingest_foreign(&foreign, cutoff, &swiss(), &translator).map_err(|e| e.to_string())?;
    ensure(translated.len() == 3 * m, format!("{} translations from {m} foreign cases", translated.len()))?;
    ensure(
        translated.cases.iter().all(|c| c.language != Lang::En && c.provenance == Provenance::Mt),
        "English case in foreign output",
    )?;
    Ok(format!(
        "{n} → {} cases; {m} foreign (≤ {cutoff}) → {} translations, 0 English; {} backend texts",
        augmented.len(),
        translated.len(),
        backend.texts_translated()
    ))
}

// 7. Zero-shot training sets exclude the target language.
fn zero_shot_composition() -> Outcome {
    let corpora = synthetic_corpora(&SyntheticSpec::default());
    let mut sizes = Vec::new();
    for lang in [Lang::De, Lang::Fr, Lang::It] {
        for dir in ["", "synthetic/"] {
            let path = config_path(&format!("{dir}c_zeroshot_{lang}.toml"));
            let mut config = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
            for with_mt in [false, true] {
                config.include_mt_swiss = with_mt;
                config.train_filter.provenances = None;
                let train = build_training_set(&config, &corpora, 1).map_err(|e| e.to_string())?;
                ensure(!train.is_empty(), "empty training set")?;
                ensure(
                    train.cases.iter().all(|c| c.language != lang),
                    format!("{} training set contains {lang}", config.name),
                )?;
                let dev = dev_set(&config, &corpora).map_err(|e| e.to_string())?;
                ensure(dev.cases.iter().all(|c| c.language != lang), "target language in dev")?;
                if dir.is_empty() && with_mt {
                    sizes.push(format!("{lang}: {}", train.len()));
                }
            }
        }
    }
    Ok(format!("0 target-language cases in every group-C set ({})", sizes.join(", ")))
}

// 8. ASO trivial cases, complement and the ordered dominance pattern.
fn aso_properties() -> Outcome {
    let config = AsoConfig::default();
    let sep = aso_epsilon(&[10.0, 11.0, 12.0], &[1.0, 2.0, 3.0], &config).map_err(|e| e.to_string())?;
    ensure(sep.eps_min.abs() <= 0.02, format!("separated eps_min {}", sep.eps_min))?;
    let same = aso_epsilon(&[1.0, 5.0, 3.0], &[1.0, 5.0, 3.0], &config).map_err(|e| e.to_string())?;
    ensure(same.eps_min == 0.5, format!("identical eps_min {}", same.eps_min))?;

    let mut rng = stream_rng(8, "acceptance-aso");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let shift = rng.random_range(-1.0..1.0);
        let a: Vec<f64> = (0..5).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..5).map(|_| normal.sample(&mut rng) + shift).collect();
        let ab = aso_epsilon(&a, &b, &config).map_err(|e| e.to_string())?.eps_hat;
        let ba = aso_epsilon(&b, &a, &config).map_err(|e| e.to_string())?.eps_hat;
        worst = worst.max((ab + ba - 1.0).abs());
    }
    ensure(worst <= 0.05, format!("complement off by {worst}"))?;

    let runs: Vec<(String, Vec<f64>)> = (0..4)
        .map(|k| {
            let base = 60.0 + 4.0 * k as f64;
            (format!("M{}", k + 1), (0..3).map(|_| base + rng.random_range(-1.0..1.0)).collect())
        })
        .collect();
    let matrix = aso_matrix(&runs, &config).map_err(|e| e.to_string())?;
    for i in 0..4 {
        for j in 0..4 {
            let want = if i <= j { 1.0 } else { 0.0 };
            let got = (matrix.eps_min[i][j] * 10.0).round() / 10.0;
            ensure(got == want, format!("entry ({i},{j}) = {}", matrix.eps_min[i][j]))?;
        }
    }
    Ok(format!(
        "separated {:.2}, identical {}, complement max dev {worst:.1e}, 4×4 triangular pattern",
        sep.eps_min, same.eps_min
    ))
}

// 9. CDF-form W1 against north-west-corner transport on sorted supports.
fn wasserstein_oracle() -> Outcome {
    fn transport(p: &[f64], q: &[f64]) -> f64 {
        let (mut p, mut q) = (p.to_vec(), q.to_vec());
        let (mut i, mut j, mut cost) = (0, 0, 0.0);
        while i < p.len() && j < q.len() {
            let flow = p[i].min(q[j]);
            cost += flow * (i as f64 - j as f64).abs();
            p[i] -= flow;
            q[j] -= flow;
            if p[i] <= 1e-15 {
                i += 1;
            } else {
                j += 1;
            }
        }
        cost
    }
    let mut rng = stream_rng(9, "acceptance-w1");
    let mut random_dist = || {
        let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let mut p: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let rest: f64 = p[..3].iter().sum();
        p[3] = 1.0 - rest;
        p
    };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (p, q) = (random_dist(), random_dist());
        let w = wasserstein_1d(&p, &q).map_err(|e| e.to_string())?;
        worst = worst.max((w - transport(&p, &q)).abs());
    }
    ensure(worst <= 1e-9, format!("oracle gap {worst:e}"))?;
    for _ in 0..1000 {
        let (p, q, r) = (random_dist(), random_dist(), random_dist());
        let d = |a: &[f64], b: &[f64]| wasserstein_1d(a, b).unwrap();
        ensure(d(&p, &p) == 0.0, "d(p, p) != 0")?;
        ensure(d(&p, &q) > 0.0, "distinct distributions at distance 0")?;
        ensure((d(&p, &q) - d(&q, &p)).abs() <= 1e-9, "asymmetric")?;
        ensure(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-9, "triangle inequality violated")?;
    }
    Ok(format!("max |W1 − transport| = {worst:.1e}; axioms hold on 1000 triples"))
}

fn language_cell(report: &lexjudge::pipeline::ReportOutput, row: &str, lang: &str) -> Result<f64, String> {
    let grid = &report.grid;
    let r = grid.rows.iter().position(|x| x == row).ok_or(format!("no row {row}"))?;
    let c = grid.columns.iter().position(|x| x == lang).ok_or(format!("no column {lang}"))?;
    grid.cells[r][c]
        .as_ref()
        .map(|cell| cell.score.mean)
        .ok_or(format!("empty cell {row}/{lang}"))
}

// 10. Cross-lingual training with translations beats monolingual training
//     on the low-resource language.
fn end_to_end_direction(tmp: &Path) -> Outcome {
    let corpus = tmp.join("corpus");
    let out = tmp.join("runs");
    cmd_prepare(&PrepareOptions {
        corpus_root: corpus.clone(),
        targets: swiss(),
        synthetic: Some(SyntheticSpec::default()),
        backend: Arc::new(MockBackend::new()),
        foreign_year_cutoff: None,
    })
    .map_err(|e| e.to_string())?;
    let mut dirs = Vec::new();
    for name in ["a1_monolingual_it", "b2_crosslingual_mt"] {
        let dir = cmd_run(&RunOptions {
            config: config_path(&format!("synthetic/{name}.toml")),
            corpus_root: corpus.clone(),
            out: out.clone(),
            seeds: None,
        })
        .map_err(|e| e.to_string())?;
        dirs.push(dir);
    }
    let report = cmd_report(&dirs, Dimension::Language, None, Some(&out)).map_err(|e| e.to_string())?;
    let mono = language_cell(&report, "A1 monolingual", "it")?;
    let cross = language_cell(&report, "B2 cross-lingual + MT", "it")?;
    ensure(
        cross >= mono + 5.0,
        format!("it macro-F1: cross-lingual+MT {cross:.1} vs monolingual {mono:.1}"),
    )?;
    Ok(format!(
        "it macro-F1 over 3 seeds: monolingual {mono:.1} → cross-lingual+MT {cross:.1} (+{:.1})",
        cross - mono
    ))
}

// 11. Early stopping on a scripted dev curve restores the epoch-3 weights.
fn early_stopping(tmp: &Path) -> Outcome {
    let text = std::fs::read_to_string(config_path("synthetic/b1_crosslingual.toml")).map_err(|e| e.to_string())?;
    let mut config = ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())?;
    config.early_stop_patience = 3;
    config.epochs_max = 10;
    let spec = SyntheticSpec {
        train_cases: 120,
        dev_cases: 10,
        test_cases: 20,
        ..SyntheticSpec::default()
    };
    let corpora = synthetic_corpora(&spec);
    let data = PreparedRun::new(&config, &corpora, 1).map_err(|e| e.to_string())?;
    let curve = [0.50, 0.60, 0.70, 0.65, 0.64, 0.63, 0.80, 0.90, 0.95, 0.99];
    let ckpt = tmp.join("epochs");
    let mut hooks = TrainHooks {
        dev_score: Some(Box::new(|epoch, _| curve[epoch - 1])),
        epoch_checkpoints: Some(ckpt.clone()),
    };
    let run = train_once(&config, &data, 1, 1e-3, &mut hooks).map_err(|e| e.to_string())?;
    let r = &run.result;
    ensure(r.stopped_epoch <= 6, format!("stopped at epoch {}", r.stopped_epoch))?;
    ensure(r.best_epoch == 3, format!("best epoch {}", r.best_epoch))?;
    ensure(!ckpt.join("epoch-7").exists(), "trained past the stopping epoch")?;
    let loaded = HierarchicalClassifier::load(&ckpt.join("epoch-3")).map_err(|e| e.to_string())?;
    let direct = predict_examples(&loaded, &data.test).map_err(|e| e.to_string())?;
    ensure(direct == r.predictions, "predictions differ from the epoch-3 checkpoint")?;
    for e in &data.test {
        let a = run.model.logits(&e.row).map_err(|e| e.to_string())?;
        let b = loaded.logits(&e.row).map_err(|e| e.to_string())?;
        ensure(a == b, "restored logits differ from the epoch-3 checkpoint")?;
    }
    let later = HierarchicalClassifier::load(&ckpt.join(format!("epoch-{}", r.stopped_epoch))).map_err(|e| e.to_string())?;
    let moved = later.store.iter().zip(run.model.store.iter()).any(|((_, a), (_, b))| a.value != b.value);
    ensure(moved, "final-epoch weights equal the restored weights")?;
    Ok(format!(
        "stopped at epoch {}, restored epoch {}; {} test predictions match the loaded checkpoint",
        r.stopped_epoch,
        r.best_epoch,
        direct.len()
    ))
}

// 12. Two `run` invocations produce byte-identical predictions and reports.
fn determinism(tmp: &Path) -> Outcome {
    let exe = env!("CARGO_BIN_EXE_lexjudge");
    let corpus = tmp.join("corpus");
    let status = Command::new(exe)
        .args(["prepare", "--synthetic", "--corpus"])
        .arg(&corpus)
        .env_remove(lexjudge::translator::ENDPOINT_ENV)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), String::from_utf8_lossy(&status.stderr).to_string())?;
    let mut reports = Vec::new();
    let mut predictions = Vec::new();
    for k in 0..2 {
        let out = tmp.join(format!("out{k}"));
        let run = Command::new(exe)
            .args(["run", "--seeds", "5", "--config"])
            .arg(config_path("synthetic/b1_crosslingual.toml"))
            .arg("--corpus")
            .arg(&corpus)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(run.status.success(), String::from_utf8_lossy(&run.stderr).to_string())?;
        let exp = out.join("b1_crosslingual");
        predictions.push(std::fs::read(exp.join("5/predictions.jsonl")).map_err(|e| e.to_string())?);
        for _ in 0..2 {
            let report = Command::new(exe)
                .arg("report")
                .arg(&exp)
                .output()
                .map_err(|e| e.to_string())?;
            ensure(report.status.success(), String::from_utf8_lossy(&report.stderr).to_string())?;
            reports.push(report.stdout);
        }
    }
    ensure(!predictions[0].is_empty() && predictions[0] == predictions[1], "prediction files differ")?;
    ensure(reports.iter().all(|r| r == &reports[0] && !r.is_empty()), "reports differ")?;
    Ok(format!(
        "prediction files identical ({} bytes); 4 reports identical",
        predictions[0].len()
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let t = tmp.path();
    let criteria: Vec<(&str, Check)> = vec![
        ("mask invariance", Box::new(mask_invariance)),
        ("gradient check", Box::new(gradient_check)),
        ("adapter contract", Box::new(adapter_contract)),
        ("metric oracle", Box::new(metric_oracle)),
        ("arithmetic anchors", Box::new(arithmetic_anchors)),
        ("augmentation cardinality", Box::new(augmentation_cardinality)),
        ("zero-shot composition", Box::new(zero_shot_composition)),
        ("ASO properties", Box::new(aso_properties)),
        ("Wasserstein oracle", Box::new(wasserstein_oracle)),
        ("end-to-end direction", Box::new(move || end_to_end_direction(&t.join("e2e")))),
        ("early stopping", Box::new(move || early_stopping(&t.join("early")))),
        ("determinism", Box::new(move || determinism(&t.join("det")))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
