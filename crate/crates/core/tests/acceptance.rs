//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use collabonet::autodiff::finite_diff_check;
use collabonet::collab::{
    collaborator_signals, continue_collabonet, evaluate_split, run_collab_phase, run_preparation_phase, train_epoch,
    CollaboState, ModelDims, RowInput, Slot, Stm, ALPHA,
};
use collabonet::corpus::{bio_to_bioes, bioes_to_bio, bioes_to_spans, BioMode, DatasetBundle, EntityType};
use collabonet::crf::{crf_nll, log_partition, viterbi, Emissions, NUM_STATES, START, STOP, TRANSITIONS};
use collabonet::embedding::{CharVocab, EmbeddingDims, WordVocab, WORD_ROWS};
use collabonet::encoder::EncodedSequence;
use collabonet::eval::{exact_match_score, repair_bioes};
use collabonet::rng::stream;
use collabonet::synthetic::{overfit_corpus, polysemy_corpus, PolysemySpec};
use collabonet::train::{read_checkpoint, write_checkpoint, RunConfig, SignalKind};
use collabonet::{Error, Span, Tag, Tensor, NUM_TAGS};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ms(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- oracles

fn index_tag(i: usize) -> Tag {
    [Tag::B, Tag::I, Tag::O, Tag::E, Tag::S][i]
}

/// Score of a path written out term by term.
fn oracle_score(z: &Emissions, a: &Tensor, path: &[usize]) -> f64 {
    let mut s = a.at(START, path[0]) + z[0][path[0]];
    for t in 1..path.len() {
        s += a.at(path[t - 1], path[t]) + z[t][path[t]];
    }
    s + a.at(path[path.len() - 1], STOP)
}

/// All 5^T paths in lexicographic order.
fn all_paths(t: usize) -> Vec<Vec<usize>> {
    (0..NUM_TAGS.pow(t as u32))
        .map(|mut code| {
            let mut p = vec![0; t];
            for slot in p.iter_mut().rev() {
                *slot = code % NUM_TAGS;
                code /= NUM_TAGS;
            }
            p
        })
        .collect()
}

fn random_instance(seed: u64, i: u64, max_t: usize) -> (Emissions, Tensor) {
    let mut r = stream(seed, "acceptance.crf", &[i]);
    let t = r.gen_range(1..=max_t);
    let z: Emissions = (0..t)
        .map(|_| std::array::from_fn(|_| r.gen_range(-3.0..3.0)))
        .collect();
    let a = Tensor::matrix(
        NUM_STATES,
        NUM_STATES,
        (0..NUM_STATES * NUM_STATES).map(|_| r.gen_range(-2.0..2.0)).collect(),
    );
    (z, a)
}

// --------------------------------------------------------------- criteria

fn crf_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..500 {
        let (z, a) = random_instance(1, i, 6);
        let paths = all_paths(z.len());
        let scores: Vec<f64> = paths.iter().map(|p| oracle_score(&z, &a, p)).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        let err = (log_partition(&z, &a) - log_z).abs();
        worst = worst.max(err);
        check(err <= 1e-8, format!("instance {i}: log Z off by {err:e}"))?;
        let best = scores.iter().enumerate().fold(0, |b, (k, s)| if *s > scores[b] { k } else { b });
        let (tags, score) = viterbi(&z, &a);
        let expected: Vec<Tag> = paths[best].iter().map(|&k| index_tag(k)).collect();
        check(tags == expected, format!("instance {i}: viterbi path {tags:?} != {expected:?}"))?;
        check(
            (score - scores[best]).abs() <= 1e-12,
            format!("instance {i}: viterbi score {score} != {}", scores[best]),
        )?;
    }
    Ok(format!("500 instances, max |log Z error| {worst:.1e}"))
}

fn probability_normalization() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (z, a) = random_instance(2, i, 5);
        let total: f64 = all_paths(z.len())
            .iter()
            .map(|p| {
                let tags: Vec<Tag> = p.iter().map(|&k| index_tag(k)).collect();
                (-crf_nll(&z, &a, &tags)).exp()
            })
            .sum();
        worst = worst.max((total - 1.0).abs());
        check((total - 1.0).abs() <= 1e-10, format!("instance {i}: total probability {total}"))?;
    }
    Ok(format!("100 instances, max |Σp − 1| {worst:.1e}"))
}

fn toy_dims() -> ModelDims {
    ModelDims {
        embedding: EmbeddingDims {
            d_word: 4,
            d_char: 3,
            windows: vec![3, 5, 7],
            filters: 2,
        },
        d_lstm: 5,
        signal: SignalKind::Bidirectional,
    }
}

fn toy_model(name: &str, dims: &ModelDims, words: &Arc<WordVocab>, chars: &Arc<CharVocab>, seed: u64) -> Stm {
    let mut r = stream(seed, "acceptance.toy", &[]);
    let d = dims.embedding.d_word;
    let matrix = Tensor::matrix(words.len(), d, (0..words.len() * d).map(|_| r.gen_range(-0.5..0.5)).collect());
    let mut m = Stm::new(name, dims.clone(), Arc::clone(words), Arc::clone(chars), Arc::new(matrix), 1, false, &mut r).unwrap();
    // nonzero transitions and biases so every term carries gradient
    for name in [TRANSITIONS, collabonet::crf::EMIT_B] {
        let t = m.params[name].clone();
        let data = (0..t.len()).map(|_| r.gen_range(-0.5..0.5)).collect();
        m.params.insert(name.into(), Arc::new(Tensor::new(t.shape().to_vec(), data).unwrap()));
    }
    m.params.insert(ALPHA.into(), Arc::new(Tensor::vector(vec![0.8])));
    m
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let dims = toy_dims();
    let tokens: Vec<String> = ["IL-2", "gene", "x"].iter().map(|s| s.to_string()).collect();
    let words = Arc::new(WordVocab::new(&tokens));
    let chars = Arc::new(CharVocab::from_words(&tokens));
    let target = toy_model("target", &dims, &words, &chars, 3);
    let collaborator = toy_model("collaborator", &dims, &words, &chars, 4);
    let signals = vec![collaborator.collab_inference(&tokens).map_err(|e| e.to_string())?];
    let gold = [Tag::B, Tag::E, Tag::O];
    let row = RowInput {
        tokens: &tokens,
        mask: None,
        gold: Some(&gold),
        slot: Slot::Collaborators(&signals),
        dropout: None,
    };
    let fwd = target.build(&[row], true).map_err(|e| e.to_string())?;
    let loss = fwd.loss.ok_or("no loss node")?;
    let params = target.bindings(&fwd.word_rows).map_err(|e| e.to_string())?;
    let mut graph = fwd.graph;
    let (_, analytic) = {
        graph.evaluate(loss, &params).map_err(|e| e.to_string())?;
        (0.0, graph.backward(loss).map_err(|e| e.to_string())?)
    };
    let groups = ["char.", "lstm.", "emit.", TRANSITIONS, ALPHA, WORD_ROWS];
    for g in groups {
        let touched = analytic
            .iter()
            .filter(|(n, _)| n.starts_with(g))
            .any(|(_, t)| t.data().iter().any(|v| *v != 0.0));
        check(touched, format!("no gradient reaches {g}"))?;
    }
    let report = finite_diff_check(
        |b| -> Result<_, Error> {
            let v = graph.evaluate(loss, b)?.item();
            Ok((v, graph.backward(loss)?))
        },
        &params,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    check(
        report.max_relative_error <= 1e-4,
        format!("max relative error {:.2e} at {:?}", report.max_relative_error, report.worst),
    )?;
    check(start.elapsed() < Duration::from_secs(60), format!("took {}", ms(start.elapsed())))?;
    Ok(format!(
        "{} coordinates, max relative error {:.1e}, {}",
        report.coordinates,
        report.max_relative_error,
        ms(start.elapsed())
    ))
}

fn random_sentence(r: &mut impl Rng, vocab: &[String]) -> Vec<String> {
    let n = r.gen_range(1..=10);
    (0..n)
        .map(|_| {
            if r.gen_bool(0.1) {
                format!("unseen{}", r.gen_range(0..1000))
            } else {
                vocab[r.gen_range(0..vocab.len())].clone()
            }
        })
        .collect()
}

fn zero_slot_equivalence() -> Outcome {
    let dims = toy_dims();
    let vocab: Vec<String> = (0..30).map(|i| format!("tok{i}")).collect();
    let words = Arc::new(WordVocab::new(&vocab));
    let chars = Arc::new(CharVocab::from_words(&vocab));
    let model = toy_model("m", &dims, &words, &chars, 5);
    let mut r = stream(6, "acceptance.sentences", &[]);
    let bits = |z: &Emissions| z.iter().flat_map(|row| row.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    for i in 0..100 {
        let tokens = random_sentence(&mut r, &vocab);
        let n = tokens.len();
        let p0 = model.emissions(&tokens, Slot::Zero).map_err(|e| e.to_string())?;
        let zeros = EncodedSequence(Tensor::zeros(&[n, dims.slot_width()]));
        let fixed = model.emissions(&tokens, Slot::Fixed(&zeros)).map_err(|e| e.to_string())?;
        let pooled = model
            .emissions(&tokens, Slot::Collaborators(std::slice::from_ref(&zeros)))
            .map_err(|e| e.to_string())?;
        check(bits(&p0) == bits(&fixed), format!("sentence {i}: zero aggregated slot differs"))?;
        check(bits(&p0) == bits(&pooled), format!("sentence {i}: pooled zero signals differ"))?;
    }
    Ok("100 sentences bit-identical".into())
}

fn single_type_bundle(name: &str, seed: u64, n: usize) -> DatasetBundle {
    let s = overfit_corpus(seed, n);
    let dev = s[..n / 5].to_vec();
    DatasetBundle {
        name: name.into(),
        entity_type: EntityType::Other,
        entity_suffix: None,
        train: s,
        dev,
        test: Vec::new(),
    }
}

fn toy_config(seed: u64) -> RunConfig {
    RunConfig::parse(&format!(
        "seed = {seed}\nd_word = 16\nd_char = 8\nd_clwe = 12\nchar_windows = 3\nd_lstm = 16\nlearning_rate = 0.05\n"
    ))
    .expect("valid config")
}

fn frozen_collaborators() -> Outcome {
    let datasets: Vec<DatasetBundle> = (0..3).map(|k| single_type_bundle(&format!("d{k}"), 10 + k, 30)).collect();
    let cfg = toy_config(7);
    let mut state = CollaboState::init(&datasets, &cfg, None).map_err(|e| e.to_string())?;
    let target = 1;
    let before: Vec<String> = state.models.iter().map(Stm::checksum).collect();
    let alphas: Vec<Vec<f64>> = state.models.iter().map(Stm::alphas).collect();
    let tokens: Vec<&[String]> = datasets[target].train.iter().map(|s| s.tokens.as_slice()).collect();
    let signals = collaborator_signals(&state.models, target, &tokens).map_err(|e| e.to_string())?;
    train_epoch(&mut state, target, &datasets[target].train, Some(&signals), &cfg, true).map_err(|e| e.to_string())?;
    for k in [0, 2] {
        check(state.models[k].checksum() == before[k], format!("collaborator {k} changed"))?;
        check(state.models[k].alphas() == alphas[k], format!("α of model {k} changed"))?;
    }
    check(state.models[target].checksum() != before[target], "target did not train")?;
    let new = state.models[target].alphas();
    check(
        new.iter().zip(&alphas[target]).all(|(a, b)| a != b),
        format!("target α not all updated: {:?} -> {new:?}", alphas[target]),
    )?;
    Ok(format!("collaborators unchanged, α_target {:?} -> {new:.4?}", alphas[target]))
}

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let sentences = overfit_corpus(1, 50);
    let vocab: BTreeSet<&String> = sentences.iter().flat_map(|s| s.tokens.iter()).collect();
    check(vocab.len() <= 40, format!("vocabulary {}", vocab.len()))?;
    let ds = DatasetBundle {
        name: "overfit".into(),
        entity_type: EntityType::Other,
        entity_suffix: None,
        train: sentences.clone(),
        dev: sentences,
        test: Vec::new(),
    };
    let mut cfg = RunConfig::default();
    cfg.seed = 1;
    cfg.max_epochs = 100;
    let prep = run_preparation_phase(std::slice::from_ref(&ds), &cfg, None).map_err(|e| e.to_string())?;
    let history = &prep.histories[0];
    let hit = history.iter().find(|h| h.dev_f1 >= 0.99);
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(300), format!("took {}", ms(elapsed)))?;
    match hit {
        Some(h) => Ok(format!("dev F1 {:.4} after epoch {}, {}", h.dev_f1, h.epoch + 1, ms(elapsed))),
        None => Err(format!(
            "best dev F1 {:.4} in {} epochs",
            history.iter().map(|h| h.dev_f1).fold(0.0, f64::max),
            history.len()
        )),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn polysemy_reduction() -> Outcome {
    let start = Instant::now();
    let (mut stm_fp, mut col_fp, mut stm_f1, mut col_f1) = (vec![], vec![], vec![], vec![]);
    for seed in 1..=5u64 {
        let corpus = polysemy_corpus(seed, &PolysemySpec::default());
        let mut cfg = toy_config(seed);
        cfg.max_epochs = 30;
        cfg.prep_patience = 5;
        cfg.max_phases = 3;
        let prep = run_preparation_phase(&corpus.datasets, &cfg, None).map_err(|e| e.to_string())?;
        let test = &corpus.datasets[0].test;
        let other = Some(corpus.other_type_test.as_slice());
        let stm = evaluate_split(&prep.state, 0, test, other, true, false).map_err(|e| e.to_string())?;
        let out = continue_collabonet(prep.state, &corpus.datasets, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
        check(out.last.phase >= 1, "no collaboration phase ran")?;
        let col = evaluate_split(&out.last, 0, test, other, true, false).map_err(|e| e.to_string())?;
        stm_fp.push(stm.taxonomy.bio_entity as f64);
        col_fp.push(col.taxonomy.bio_entity as f64);
        stm_f1.push(stm.f1());
        col_f1.push(col.f1());
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "bio-entity FP median STM {} vs CollaboNet {} (per seed {stm_fp:?} vs {col_fp:?}), F1 median {:.4} vs {:.4}, {}",
        median(stm_fp.clone()),
        median(col_fp.clone()),
        median(stm_f1.clone()),
        median(col_f1.clone()),
        ms(elapsed)
    );
    check(median(col_fp) < median(stm_fp), detail.clone())?;
    check(median(col_f1) >= median(stm_f1) - 0.01, detail.clone())?;
    check(elapsed < Duration::from_secs(900), detail.clone())?;
    Ok(detail)
}

fn metric_fixtures() -> Outcome {
    let start = Instant::now();
    let gold = vec![vec![Span::new(0, 0), Span::new(2, 3), Span::new(5, 5)], vec![Span::new(1, 2), Span::new(4, 4)]];
    let pred = vec![vec![Span::new(0, 0), Span::new(2, 3), Span::new(6, 6)], vec![Span::new(1, 2)]];
    let c = exact_match_score(&pred, &gold);
    check((c.correct, c.predicted, c.gold) == (3, 4, 5), format!("counts {c:?}"))?;
    let shown = format!("{:.4}/{:.4}/{:.4}", c.precision(), c.recall(), c.f1());
    check(shown == "0.7500/0.6000/0.6667", format!("got {shown}"))?;
    let mut valid_inputs = 0;
    for code in 0..NUM_TAGS.pow(5) {
        let seq: Vec<Tag> = all_paths(5)[code].iter().map(|&k| index_tag(k)).collect();
        let fixed = repair_bioes(&seq);
        check(repair_bioes(&fixed) == fixed, format!("not idempotent on {seq:?}"))?;
        check(bioes_to_spans(&fixed).is_ok(), format!("invalid output for {seq:?}"))?;
        if bioes_to_spans(&seq).is_ok() {
            valid_inputs += 1;
            check(fixed == seq, format!("valid input {seq:?} was changed"))?;
        }
    }
    check(start.elapsed() < Duration::from_secs(5), format!("took {}", ms(start.elapsed())))?;
    Ok(format!("P/R/F1 {shown}; 3125 sequences repaired ({valid_inputs} already valid)"))
}

/// Spans of a valid BIO sequence, read independently of the library.
fn bio_oracle(tags: &[usize]) -> Vec<Span> {
    // 0 = B, 1 = I, 2 = O
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if tags[i] == 0 {
            let mut j = i;
            while j + 1 < tags.len() && tags[j + 1] == 1 {
                j += 1;
            }
            out.push(Span::new(i, j));
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

fn scheme_roundtrip() -> Outcome {
    let mut count = 0;
    for t in 1..=6u32 {
        for mut code in 0..3usize.pow(t) {
            let mut seq = Vec::with_capacity(t as usize);
            for _ in 0..t {
                seq.push(code % 3);
                code /= 3;
            }
            let valid = seq.iter().enumerate().all(|(i, &x)| x != 1 || (i > 0 && seq[i - 1] != 2));
            if !valid {
                continue;
            }
            count += 1;
            let bio: Vec<Tag> = seq.iter().map(|&x| [Tag::B, Tag::I, Tag::O][x]).collect();
            let bioes = bio_to_bioes(&bio, BioMode::Strict).map_err(|e| format!("{bio:?}: {e}"))?;
            let spans = bioes_to_spans(&bioes).map_err(|e| format!("{bio:?}: {e}"))?;
            check(spans == bio_oracle(&seq), format!("{bio:?}: spans {spans:?}"))?;
            check(bioes_to_bio(&bioes).ok() == Some(bio.clone()), format!("{bio:?}: BIO roundtrip"))?;
        }
    }
    Ok(format!("{count} valid BIO sequences of length 1..=6"))
}

fn small_polysemy(seed: u64) -> Vec<DatasetBundle> {
    polysemy_corpus(
        seed,
        &PolysemySpec {
            train: 40,
            dev: 10,
            test: 10,
            shared: 20,
        },
    )
    .datasets
}

fn determinism_and_resume() -> Outcome {
    let datasets = small_polysemy(21);
    let mut cfg = toy_config(21);
    cfg.max_epochs = 3;
    cfg.max_phases = 2;

    let run = || -> Result<(String, Vec<u8>, Vec<u8>), Error> {
        let mut log = String::new();
        let out = collabonet::collab::train_collabonet(&datasets, &cfg, None, &mut |r| log.push_str(&format!("{r}\n")))?;
        Ok((log, write_checkpoint(&out.best)?, write_checkpoint(&out.last)?))
    };
    let a = run().map_err(|e| e.to_string())?;
    let b = run().map_err(|e| e.to_string())?;
    check(a.0 == b.0, "metrics logs differ between identical runs")?;
    check(a.1 == b.1 && a.2 == b.2, "checkpoints differ between identical runs")?;

    let prep = run_preparation_phase(&datasets, &cfg, None).map_err(|e| e.to_string())?;
    let trace = |state: &mut CollaboState, phases: usize| -> Result<Vec<u64>, Error> {
        let mut losses = Vec::new();
        for _ in 0..phases {
            losses.extend(run_collab_phase(state, &datasets, &cfg)?.iter().map(|r| r.loss.to_bits()));
        }
        Ok(losses)
    };
    let mut straight = prep.state.clone();
    let full = trace(&mut straight, 5).map_err(|e| e.to_string())?;
    let mut first = prep.state.clone();
    let mut resumed_trace = trace(&mut first, 2).map_err(|e| e.to_string())?;
    let bytes = write_checkpoint(&first).map_err(|e| e.to_string())?;
    let mut resumed = read_checkpoint(&bytes).map_err(|e| e.to_string())?;
    check(resumed.phase == 2, format!("resumed at phase {}", resumed.phase))?;
    resumed_trace.extend(trace(&mut resumed, 3).map_err(|e| e.to_string())?);
    check(full == resumed_trace, "loss trace differs after resume")?;
    let end_a = write_checkpoint(&straight).map_err(|e| e.to_string())?;
    let end_b = write_checkpoint(&resumed).map_err(|e| e.to_string())?;
    check(end_a == end_b, "final checkpoints differ after resume")?;
    Ok(format!(
        "reruns byte-identical ({} log bytes, {} checkpoint bytes); resume matches over 5 phases ({} losses)",
        a.0.len(),
        a.2.len(),
        full.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("CRF oracle equivalence", crf_oracle),
        ("probability normalization", probability_normalization),
        ("gradient correctness", gradient_correctness),
        ("zero-slot equivalence", zero_slot_equivalence),
        ("frozen-collaborator invariant", frozen_collaborators),
        ("overfit smoke test", overfit_smoke),
        ("polysemy reduction", polysemy_reduction),
        ("metric fixtures", metric_fixtures),
        ("scheme roundtrip", scheme_roundtrip),
        ("determinism and resume", determinism_and_resume),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{}]", i + 1, ms(start.elapsed())),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {why} [{}]", i + 1, ms(start.elapsed()));
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
