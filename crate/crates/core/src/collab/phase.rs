use std::fmt;
use std::sync::Arc;

use rand::Rng;

use super::model::{ModelDims, RowDropout, RowInput, Slot, Stm, ALPHA};
use crate::corpus::{bioes_to_spans, make_batches, DatasetBundle, LabeledSentence};
use crate::embedding::{CharVocab, WordEmbeddingTable, WordVocab};
use crate::encoder::EncodedSequence;
use crate::eval::{raw_spans, repaired_spans, EvalReport};
use crate::rng;
use crate::train::config::RunConfig;
use crate::train::optim::AdaGrad;
use crate::{Error, Result, Span, Tag};

/// One line of the metrics log: `phase,dataset,split,P,R,F1,loss`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub phase: usize,
    pub dataset: String,
    pub split: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean training loss per sentence of the epoch that produced the model.
    pub loss: f64,
}

impl MetricsRecord {
    pub const HEADER: &'static str = "phase,dataset,split,P,R,F1,loss";

    pub fn new(phase: usize, dataset: &str, split: &str, report: &EvalReport, loss: f64) -> Self {
        Self {
            phase,
            dataset: dataset.to_string(),
            split: split.to_string(),
            precision: report.precision(),
            recall: report.recall(),
            f1: report.f1(),
            loss,
        }
    }
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.phase, self.dataset, self.split, self.precision, self.recall, self.f1, self.loss
        )
    }
}

/// One preparation-phase epoch of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_f1: f64,
    /// Whether this epoch became the retained checkpoint.
    pub retained: bool,
}

/// Every model, its optimizer and the schedule position.
#[derive(Debug, Clone)]
pub struct CollaboState {
    /// One model per dataset, in configuration order.
    pub models: Vec<Stm>,
    pub optimizers: Vec<AdaGrad>,
    /// Epochs trained per model; drives the learning-rate decay.
    pub epochs: Vec<usize>,
    /// Completed phases after the preparation phase.
    pub phase: usize,
    pub best_macro_f1: Option<f64>,
    pub stale_phases: usize,
    pub config_fingerprint: String,
}

impl CollaboState {
    /// Fresh models sharing one word vocabulary and character vocabulary.
    ///
    /// Without pretrained vectors the vocabulary is every training token and
    /// the table is random.
    pub fn init(datasets: &[DatasetBundle], cfg: &RunConfig, embeddings: Option<&WordEmbeddingTable>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Invalid("at least one dataset is required".into()));
        }
        for d in datasets {
            d.validate()?;
        }
        cfg.validate()?;
        let dims = ModelDims::from_config(cfg);
        let train_tokens = || datasets.iter().flat_map(|d| d.train.iter().flat_map(|s| s.tokens.iter()));
        let table = match embeddings {
            Some(t) => {
                if t.dim() != cfg.d_word {
                    return Err(Error::Config(format!(
                        "embedding file has width {} but d_word is {}",
                        t.dim(),
                        cfg.d_word
                    )));
                }
                t.clone()
            }
            None => WordEmbeddingTable::random(
                WordVocab::new(train_tokens()),
                cfg.d_word,
                &mut rng::stream(cfg.seed, "init.words", &[]),
            ),
        };
        let words = Arc::new(table.vocab);
        let matrix = Arc::new(table.matrix);
        let chars = Arc::new(CharVocab::from_words(train_tokens()));
        let n = datasets.len();
        let mut models = Vec::with_capacity(n);
        for (k, ds) in datasets.iter().enumerate() {
            let mut m = Stm::new(
                ds.name.clone(),
                dims.clone(),
                Arc::clone(&words),
                Arc::clone(&chars),
                Arc::clone(&matrix),
                n - 1,
                cfg.freeze_embeddings,
                &mut rng::stream(cfg.seed, "init", &[k as u64]),
            )?;
            m.entity_suffix = ds.entity_suffix.clone();
            models.push(m);
        }
        Ok(Self {
            models,
            optimizers: vec![AdaGrad::new(cfg.adagrad_epsilon); n],
            epochs: vec![0; n],
            phase: 0,
            best_macro_f1: None,
            stale_phases: 0,
            config_fingerprint: cfg.fingerprint(),
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn model_index(&self, name: &str) -> Option<usize> {
        self.models.iter().position(|m| m.name == name)
    }

    /// Position of collaborator `k` in target `d`'s α vector.
    pub fn collaborator_slot(&self, target: usize, k: usize) -> Option<usize> {
        if k == target || k >= self.len() || target >= self.len() {
            None
        } else {
            Some(if k < target { k } else { k - 1 })
        }
    }

    /// `α_{target,k}`.
    pub fn alpha(&self, target: usize, k: usize) -> Option<f64> {
        let i = self.collaborator_slot(target, k)?;
        self.models[target].params.get(ALPHA).map(|a| a.data()[i])
    }
}

fn token_slices(sentences: &[LabeledSentence]) -> Vec<&[String]> {
    sentences.iter().map(|s| s.tokens.as_slice()).collect()
}

/// Signals of every model but `target`, per sentence, in collaborator order.
pub fn collaborator_signals(models: &[Stm], target: usize, sentences: &[&[String]]) -> Result<Vec<Vec<EncodedSequence>>> {
    sentences
        .iter()
        .map(|toks| {
            models
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != target)
                .map(|(_, m)| m.collab_inference(toks))
                .collect()
        })
        .collect()
}

/// Tags model `d` assigns to each sentence. After the preparation phase the
/// other current models act as collaborators.
pub fn predict_split(state: &CollaboState, d: usize, sentences: &[&[String]], constrained: bool) -> Result<Vec<Vec<Tag>>> {
    let model = state
        .models
        .get(d)
        .ok_or_else(|| Error::Invalid(format!("no model {d}")))?;
    let signals = if state.phase > 0 && state.len() > 1 {
        Some(collaborator_signals(&state.models, d, sentences)?)
    } else {
        None
    };
    sentences
        .iter()
        .enumerate()
        .map(|(i, toks)| {
            let slot = match &signals {
                Some(s) => Slot::Collaborators(&s[i]),
                None => Slot::Zero,
            };
            model.predict(toks, slot, constrained)
        })
        .collect()
}

/// Scores model `d` on labelled sentences. `repair` selects repaired or
/// lenient span reading of the predictions; `other` supplies spans of other
/// entity types for the error taxonomy.
pub fn evaluate_split(
    state: &CollaboState,
    d: usize,
    sentences: &[LabeledSentence],
    other: Option<&[Vec<Span>]>,
    repair: bool,
    constrained: bool,
) -> Result<EvalReport> {
    let preds = predict_split(state, d, &token_slices(sentences), constrained)?;
    let pred: Vec<Vec<Span>> = preds
        .iter()
        .map(|p| if repair { repaired_spans(p) } else { raw_spans(p) })
        .collect();
    let gold = sentences
        .iter()
        .map(|s| bioes_to_spans(&s.tags))
        .collect::<Result<Vec<_>>>()?;
    let none = vec![Vec::new(); sentences.len()];
    let other = other.unwrap_or(&none);
    if other.len() != sentences.len() {
        return Err(Error::Invalid("other-type spans must cover every sentence".into()));
    }
    Ok(EvalReport::new(&pred, &gold, other))
}

/// Union of the spans every other model predicts on `sentences`.
pub fn other_type_spans(state: &CollaboState, d: usize, sentences: &[&[String]], constrained: bool) -> Result<Vec<Vec<Span>>> {
    let mut out = vec![Vec::new(); sentences.len()];
    for k in (0..state.len()).filter(|k| *k != d) {
        for (acc, tags) in out.iter_mut().zip(predict_split(state, k, sentences, constrained)?) {
            acc.extend(repaired_spans(&tags));
        }
    }
    for spans in &mut out {
        spans.sort_by_key(|s| (s.start, s.end));
        spans.dedup();
    }
    Ok(out)
}

/// One epoch of model `d` on `sentences`; returns the mean loss per
/// sentence. `signals`, when given, holds per-sentence collaborator signals
/// pooled with the model's α, which then trains along with it.
pub fn train_epoch(
    state: &mut CollaboState,
    d: usize,
    sentences: &[LabeledSentence],
    signals: Option<&[Vec<EncodedSequence>]>,
    cfg: &RunConfig,
    token_loss: bool,
) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    if signals.is_some_and(|s| s.len() != sentences.len()) {
        return Err(Error::Invalid("collaborator signals must cover every sentence".into()));
    }
    let epoch = state.epochs[d];
    let coords = [d as u64, epoch as u64];
    let lr = cfg.lr_schedule().lr_for_epoch(epoch);
    let shuffle = rng::stream(cfg.seed, "shuffle", &coords).gen::<u64>();
    let batches = make_batches(sentences, cfg.batch_size, shuffle)?;
    let mut drop_rng = rng::stream(cfg.seed, "dropout", &coords);
    let mut total = 0.0;
    for batch in &batches {
        let dims = &state.models[d].dims;
        let drops: Vec<RowDropout> = batch
            .indices
            .iter()
            .map(|&i| RowDropout::sample(&mut drop_rng, sentences[i].len(), dims, cfg.dropout_clwe, cfg.dropout_bilstm))
            .collect();
        let rows: Vec<RowInput<'_>> = batch
            .indices
            .iter()
            .enumerate()
            .map(|(r, &i)| RowInput {
                tokens: &batch.tokens[r],
                mask: Some(&batch.mask[r]),
                gold: Some(&sentences[i].tags),
                slot: match signals {
                    Some(s) => Slot::Collaborators(&s[i]),
                    None => Slot::Zero,
                },
                dropout: Some(&drops[r]),
            })
            .collect();
        let (loss, grads, word_rows) = state.models[d].loss_and_grads(&rows, token_loss)?;
        state.models[d].apply(&grads, &word_rows, &mut state.optimizers[d], lr)?;
        total += loss;
    }
    state.epochs[d] += 1;
    Ok(total / sentences.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PrepOutcome {
    pub state: CollaboState,
    /// Per dataset, one record per epoch trained.
    pub histories: Vec<Vec<EpochRecord>>,
    /// Dev scores of the retained checkpoints, phase 0.
    pub records: Vec<MetricsRecord>,
}

struct Retained {
    f1: f64,
    loss: f64,
    report: EvalReport,
    model: Stm,
    optimizer: AdaGrad,
    epochs: usize,
}

/// Trains every model alone with a zero slot, stopping each after
/// `prep_patience` epochs without dev-F1 improvement and keeping its best
/// epoch (parameters, optimizer state and epoch counter).
pub fn run_preparation_phase(
    datasets: &[DatasetBundle],
    cfg: &RunConfig,
    embeddings: Option<&WordEmbeddingTable>,
) -> Result<PrepOutcome> {
    let mut state = CollaboState::init(datasets, cfg, embeddings)?;
    let mut histories = Vec::with_capacity(datasets.len());
    let mut records = Vec::with_capacity(datasets.len());
    for (d, ds) in datasets.iter().enumerate() {
        let mut best: Option<Retained> = None;
        let mut stale = 0;
        let mut history = Vec::new();
        for _ in 0..cfg.max_epochs {
            let loss = train_epoch(&mut state, d, &ds.train, None, cfg, true)?;
            let report = evaluate_split(&state, d, &ds.dev, None, true, cfg.constrained_viterbi)?;
            let f1 = report.f1();
            let improved = best.as_ref().is_none_or(|b| f1 > b.f1);
            log::info!("phase 0 {} epoch {} loss {loss:.4} dev F1 {f1:.4}", ds.name, state.epochs[d]);
            history.push(EpochRecord {
                epoch: state.epochs[d] - 1,
                loss,
                dev_f1: f1,
                retained: improved,
            });
            if improved {
                best = Some(Retained {
                    f1,
                    loss,
                    report,
                    model: state.models[d].clone(),
                    optimizer: state.optimizers[d].clone(),
                    epochs: state.epochs[d],
                });
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.prep_patience {
                    break;
                }
            }
        }
        let record = match best {
            Some(b) => {
                state.models[d] = b.model;
                state.optimizers[d] = b.optimizer;
                state.epochs[d] = b.epochs;
                MetricsRecord::new(0, &ds.name, "dev", &b.report, b.loss)
            }
            None => {
                let report = evaluate_split(&state, d, &ds.dev, None, true, cfg.constrained_viterbi)?;
                MetricsRecord::new(0, &ds.name, "dev", &report, f64::NAN)
            }
        };
        histories.push(history);
        records.push(record);
    }
    state.best_macro_f1 = Some(macro_f1(&records));
    Ok(PrepOutcome {
        state,
        histories,
        records,
    })
}

fn macro_f1(records: &[MetricsRecord]) -> f64 {
    records.iter().map(|r| r.f1).sum::<f64>() / records.len().max(1) as f64
}

/// One phase: each model in dataset order trains one epoch as the target,
/// with collaborators frozen at their state from the start of the phase.
/// Dev scores are taken once every target has had its turn.
pub fn run_collab_phase(state: &mut CollaboState, datasets: &[DatasetBundle], cfg: &RunConfig) -> Result<Vec<MetricsRecord>> {
    if datasets.len() != state.len() {
        return Err(Error::Invalid(format!("{} datasets for {} models", datasets.len(), state.len())));
    }
    let snapshot = state.models.clone();
    let mut losses = Vec::with_capacity(datasets.len());
    for (d, ds) in datasets.iter().enumerate() {
        let signals = if state.len() > 1 {
            Some(collaborator_signals(&snapshot, d, &token_slices(&ds.train))?)
        } else {
            None
        };
        losses.push(train_epoch(state, d, &ds.train, signals.as_deref(), cfg, cfg.token_loss_in_phases)?);
    }
    state.phase += 1;
    let mut records = Vec::with_capacity(datasets.len());
    for (d, ds) in datasets.iter().enumerate() {
        let report = evaluate_split(state, d, &ds.dev, None, true, cfg.constrained_viterbi)?;
        log::info!("phase {} {} loss {:.4} dev F1 {:.4}", state.phase, ds.name, losses[d], report.f1());
        records.push(MetricsRecord::new(state.phase, &ds.name, "dev", &report, losses[d]));
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State with the best macro-average dev F1 seen.
    pub best: CollaboState,
    pub last: CollaboState,
    pub records: Vec<MetricsRecord>,
}

/// Runs phases from `state` until `max_phases` or until `phase_patience`
/// phases pass without a macro-average dev-F1 improvement.
pub fn continue_collabonet(
    mut state: CollaboState,
    datasets: &[DatasetBundle],
    cfg: &RunConfig,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let mut best = state.clone();
    let mut records = Vec::new();
    while state.phase < cfg.max_phases && state.stale_phases < cfg.phase_patience {
        let recs = run_collab_phase(&mut state, datasets, cfg)?;
        recs.iter().for_each(&mut *sink);
        let score = macro_f1(&recs);
        if state.best_macro_f1.is_none_or(|b| score > b) {
            state.best_macro_f1 = Some(score);
            state.stale_phases = 0;
            best = state.clone();
        } else {
            state.stale_phases += 1;
        }
        records.extend(recs);
    }
    Ok(TrainOutcome {
        best,
        last: state,
        records,
    })
}

/// Preparation phase followed by collaboration phases.
pub fn train_collabonet(
    datasets: &[DatasetBundle],
    cfg: &RunConfig,
    embeddings: Option<&WordEmbeddingTable>,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let prep = run_preparation_phase(datasets, cfg, embeddings)?;
    prep.records.iter().for_each(&mut *sink);
    let mut out = continue_collabonet(prep.state, datasets, cfg, sink)?;
    let mut records = prep.records;
    records.append(&mut out.records);
    out.records = records;
    Ok(out)
}
