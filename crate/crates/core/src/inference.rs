//! Test-time input selection and prediction.
//!
//! Three regimes decide what the reader sees: the single paragraph with
//! the highest estimated answerability, the best paragraph pair by the
//! same score, or the top-k sentences ranked by a selector trained on
//! extracted evidence labels. Answerability of a candidate passage is
//! `1 - p_none` from the class head.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    tokenize, MultiHopExample, Passage, SentenceRef, TokenizedInput, Vocabulary,
};
use crate::error::{Error, Result};
use crate::interpreter::EvidenceSet;
use crate::model::{
    decode, Adam, EncoderConfig, EncoderInput, Prediction, QaModel, SelectorModel,
};
use crate::setgen::{ClassLabel, SetTag, TrainingInstance};
use crate::trainer::LOG_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    SingleParagraph,
    PairedParagraph,
    SelectedEvidences,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::SingleParagraph => "single_paragraph",
            InferenceMode::PairedParagraph => "paired_paragraph",
            InferenceMode::SelectedEvidences => "selected_evidences",
        })
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<InferenceMode> {
        match s {
            "single_paragraph" => Ok(InferenceMode::SingleParagraph),
            "paired_paragraph" => Ok(InferenceMode::PairedParagraph),
            "selected_evidences" => Ok(InferenceMode::SelectedEvidences),
            other => Err(Error::Usage(format!(
                "unknown mode '{other}' (expected single_paragraph, paired_paragraph, \
                 or selected_evidences)"
            ))),
        }
    }
}

/// Estimated answerability of a paragraph subset of one example.
pub trait AnswerabilityScorer {
    /// `1 - p_none` over the concatenation of the given paragraphs.
    fn answerability(&self, ex: &MultiHopExample, pids: &[usize]) -> Result<f64>;
}

pub struct ModelScorer<'a> {
    pub model: &'a QaModel,
    pub vocab: &'a Vocabulary,
    pub budget: usize,
}

impl AnswerabilityScorer for ModelScorer<'_> {
    fn answerability(&self, ex: &MultiHopExample, pids: &[usize]) -> Result<f64> {
        let passage = Passage::from_example(ex, ex.units_of(pids))?;
        let tok = tokenize(&ex.question, &passage, self.vocab, self.budget, false)?;
        let out = self.model.forward_output(&EncoderInput::from(&tok))?;
        Ok(1.0 - out.pcls[ClassLabel::None.index()])
    }
}

/// Scores every unordered paragraph pair (concatenated in ascending pid
/// order) and returns the argmax pair's passage. Ties go to the smaller
/// (i, j).
pub fn select_pair(scorer: &dyn AnswerabilityScorer, ex: &MultiHopExample) -> Result<Passage> {
    let n = ex.paragraphs.len();
    let mut best: Option<(f64, (usize, usize))> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            let s = scorer.answerability(ex, &[i, j])?;
            if best.map_or(true, |(b, _)| s > b) {
                best = Some((s, (i, j)));
            }
        }
    }
    let (_, (i, j)) = best.ok_or_else(|| {
        Error::Internal(format!("{}: fewer than two paragraphs", ex.qid))
    })?;
    Passage::from_example(ex, ex.units_of(&[i, j]))
}

/// Scores each paragraph alone and returns the argmax paragraph's
/// passage. Ties go to the smaller pid.
pub fn select_single(scorer: &dyn AnswerabilityScorer, ex: &MultiHopExample) -> Result<Passage> {
    let mut best: Option<(f64, usize)> = None;
    for pid in 0..ex.paragraphs.len() {
        let s = scorer.answerability(ex, &[pid])?;
        if best.map_or(true, |(b, _)| s > b) {
            best = Some((s, pid));
        }
    }
    let (_, pid) =
        best.ok_or_else(|| Error::Internal(format!("{}: no paragraphs", ex.qid)))?;
    Passage::from_example(ex, ex.units_of(&[pid]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub token_budget: usize,
}

impl Default for SelectorTrainConfig {
    fn default() -> Self {
        SelectorTrainConfig { lr: 1e-3, epochs: 5, batch_size: 8, seed: 7, token_budget: 128 }
    }
}

impl SelectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("selector lr must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("selector epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

pub struct SelectorOutcome {
    pub model: SelectorModel,
    /// Sentences lost to the token budget, hence never scored in training.
    pub dropped_sentences: usize,
    /// Mean per-sentence binary cross-entropy per epoch.
    pub epoch_bce: Vec<f64>,
}

struct SelectorItem {
    tok: TokenizedInput,
    /// One binary target per surviving marker, in marker order.
    targets: Vec<f64>,
}

/// Trains the sentence selector on extracted evidence labels.
///
/// Each label's answerable instance is encoded with a marker after every
/// sentence; the marker logit is pushed toward 1 for member sentences and
/// 0 for the rest. Sentences whose markers fall past the token budget are
/// excluded and counted.
pub fn train_selector(
    instances: &[TrainingInstance],
    labels: &[EvidenceSet],
    vocab: &Vocabulary,
    enc_cfg: &EncoderConfig,
    cfg: &SelectorTrainConfig,
) -> Result<SelectorOutcome> {
    cfg.validate()?;
    let by_qid: HashMap<&str, &TrainingInstance> = instances
        .iter()
        .filter(|i| i.set_tag() == SetTag::APos)
        .map(|i| (i.qid.as_str(), i))
        .collect();

    let mut dropped_sentences = 0usize;
    let mut items = Vec::with_capacity(labels.len());
    for ev in labels {
        let inst = by_qid.get(ev.qid.as_str()).ok_or_else(|| {
            Error::Config(format!("evidence label {} has no answerable instance", ev.qid))
        })?;
        let tok = tokenize(&inst.question, &inst.passage, vocab, cfg.token_budget, true)?;
        dropped_sentences += inst.passage.len() - tok.markers.len();
        let members = ev.member_set();
        let targets = tok
            .markers
            .iter()
            .map(|&(_, si)| f64::from(members.contains(&inst.passage.units[si])))
            .collect();
        items.push(SelectorItem { tok, targets });
    }

    let mut model = SelectorModel::new(enc_cfg, cfg.seed)?;
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(2));
    let mut epoch_bce = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        let mut bce_sum = 0.0;
        let mut bce_n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            model.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for &ix in chunk {
                let item = &items[ix];
                if item.targets.is_empty() {
                    continue;
                }
                let markers: Vec<usize> = item.tok.markers.iter().map(|&(p, _)| p).collect();
                let (probs, trace) =
                    model.forward(&EncoderInput::from(&item.tok), &markers)?;
                let m = probs.len() as f64;
                let mut d_logits = Vec::with_capacity(probs.len());
                for (&p, &y) in probs.iter().zip(&item.targets) {
                    bce_sum -= y * p.max(LOG_EPS).ln() + (1.0 - y) * (1.0 - p).max(LOG_EPS).ln();
                    bce_n += 1;
                    d_logits.push((p - y) / m * scale);
                }
                model.backward(&trace, &d_logits);
            }
            adam.step(&mut model.trainable_params_mut())?;
        }
        epoch_bce.push(if bce_n > 0 { bce_sum / bce_n as f64 } else { 0.0 });
    }

    Ok(SelectorOutcome { model, dropped_sentences, epoch_bce })
}

/// Scores every sentence of every paragraph, one forward pass per
/// paragraph. Sentences lost to the budget are absent from the output.
pub fn score_sentences(
    selector: &SelectorModel,
    vocab: &Vocabulary,
    ex: &MultiHopExample,
    budget: usize,
) -> Result<Vec<(SentenceRef, f64)>> {
    let mut scored = Vec::new();
    for pid in 0..ex.paragraphs.len() {
        let passage = Passage::from_example(ex, ex.units_of(&[pid]))?;
        let tok = tokenize(&ex.question, &passage, vocab, budget, true)?;
        let markers: Vec<usize> = tok.markers.iter().map(|&(p, _)| p).collect();
        let (probs, _) = selector.forward(&EncoderInput::from(&tok), &markers)?;
        for (&(_, si), p) in tok.markers.iter().zip(probs) {
            scored.push((passage.units[si], p));
        }
    }
    Ok(scored)
}

/// Takes the k highest-scoring sentences across all paragraphs (ties to
/// the smaller (pid, sid)) and reassembles them in document order. Fewer
/// than k sentences total means all of them.
pub fn select_evidences(
    selector: &SelectorModel,
    vocab: &Vocabulary,
    ex: &MultiHopExample,
    k: usize,
    budget: usize,
) -> Result<Passage> {
    let mut scored = score_sentences(selector, vocab, ex, budget)?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).expect("sentence scores are finite").then(a.0.cmp(&b.0))
    });
    scored.truncate(k);
    let mut units: Vec<SentenceRef> = scored.into_iter().map(|(r, _)| r).collect();
    units.sort_unstable();
    Passage::from_example(ex, units)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub qid: String,
    pub answer_text: String,
    pub class: ClassLabel,
    pub confidence: f64,
    pub mode: InferenceMode,
    /// Sentences the reader saw, in document order.
    pub selected_units: Vec<SentenceRef>,
}

/// Builds the passage for the requested mode, runs the reader, decodes.
pub fn predict(
    model: &QaModel,
    selector: Option<&SelectorModel>,
    ex: &MultiHopExample,
    mode: InferenceMode,
    vocab: &Vocabulary,
    budget: usize,
    max_span_len: usize,
    select_k: usize,
) -> Result<PredictionRecord> {
    let scorer = ModelScorer { model, vocab, budget };
    let passage = match mode {
        InferenceMode::SingleParagraph => select_single(&scorer, ex)?,
        InferenceMode::PairedParagraph => select_pair(&scorer, ex)?,
        InferenceMode::SelectedEvidences => {
            let sel = selector.ok_or_else(|| {
                Error::Usage("selected_evidences mode requires a selector checkpoint".into())
            })?;
            select_evidences(sel, vocab, ex, select_k, budget)?
        }
    };
    let pred = predict_over_passage(model, vocab, &ex.question, &passage, budget, max_span_len)?;
    Ok(PredictionRecord {
        qid: ex.qid.clone(),
        answer_text: pred.answer_text,
        class: pred.class,
        confidence: pred.confidence,
        mode,
        selected_units: passage.units,
    })
}

/// One reader pass over a fixed passage.
pub fn predict_over_passage(
    model: &QaModel,
    vocab: &Vocabulary,
    question: &str,
    passage: &Passage,
    budget: usize,
    max_span_len: usize,
) -> Result<Prediction> {
    let tok = tokenize(question, passage, vocab, budget, false)?;
    let out = model.forward_output(&EncoderInput::from(&tok))?;
    Ok(decode(&out, &tok, &passage.text, max_span_len))
}

/// The gold paragraph pair exists in every well-formed example; used by
/// tests and the evidence-quality probes.
pub fn gold_pair_passage(ex: &MultiHopExample) -> Result<Passage> {
    Passage::from_example(ex, ex.units_of(&ex.positive_pids()))
}

impl PredictionRecord {
    pub fn selected_set(&self) -> BTreeSet<SentenceRef> {
        self.selected_units.iter().copied().collect()
    }
}
