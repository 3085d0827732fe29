//! Metrics, challenge-set construction, and confidence analysis.
//!
//! Answer strings are compared at word level after the usual extractive-QA
//! normalization; evidence sets are compared as sets of sentence
//! references. The challenge set keeps only dev examples a
//! single-paragraph baseline cannot score on at all. Confidence curves
//! contrast the reader's certainty on evidence-sufficient and
//! evidence-insufficient views of the same dev questions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    locate_answer, tokenize, MultiHopExample, Passage, SentenceRef, Vocabulary,
};
use crate::error::{Error, Result};
use crate::inference::{InferenceMode, PredictionRecord};
use crate::model::{
    answer_confidence, decode, AnswerTarget, EncoderInput, HeadKind, QaModel,
};

/// Lowercases, strips punctuation, drops the articles a/an/the, and
/// collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let stripped: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let mut out = String::with_capacity(stripped.len());
    for w in stripped.split_whitespace() {
        if matches!(w, "a" | "an" | "the") {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

fn token_counts(s: &str) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for w in s.split(' ').filter(|w| !w.is_empty()) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Word-level F1 between normalized answers. Yes/no answers compare as
/// exact strings, everything else as token multisets.
pub fn qa_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    if p == "yes" || p == "no" || g == "yes" || g == "no" {
        return f64::from(p == g);
    }
    let pc = token_counts(&p);
    let gc = token_counts(&g);
    let np: usize = pc.values().sum();
    let ng: usize = gc.values().sum();
    if np == 0 || ng == 0 {
        return f64::from(np == ng);
    }
    let overlap: usize = pc
        .iter()
        .map(|(w, &c)| c.min(gc.get(w).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / np as f64;
    let recall = overlap as f64 / ng as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Exact match after normalization.
pub fn qa_em(pred: &str, gold: &str) -> f64 {
    f64::from(normalize_answer(pred) == normalize_answer(gold))
}

/// Set precision/recall/F1 over sentence references. An empty prediction
/// scores (0, 0, 0); gold must be non-empty.
pub fn evidence_prf(
    pred: &BTreeSet<SentenceRef>,
    gold: &BTreeSet<SentenceRef>,
) -> (f64, f64, f64) {
    assert!(!gold.is_empty(), "gold evidence must be non-empty");
    if pred.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let hit = pred.intersection(gold).count() as f64;
    let precision = hit / pred.len() as f64;
    let recall = hit / gold.len() as f64;
    let f1 = if hit == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (precision, recall, f1)
}

/// A single-paragraph answerer, the baseline regime of the challenge
/// filter.
pub trait ParagraphAnswerer {
    /// Predicted answer string for the question read against one
    /// paragraph of the example.
    fn answer(&self, ex: &MultiHopExample, pid: usize) -> Result<String>;
}

pub struct ModelAnswerer<'a> {
    pub model: &'a QaModel,
    pub vocab: &'a Vocabulary,
    pub budget: usize,
    pub max_span_len: usize,
}

impl ParagraphAnswerer for ModelAnswerer<'_> {
    fn answer(&self, ex: &MultiHopExample, pid: usize) -> Result<String> {
        let passage = Passage::from_example(ex, ex.units_of(&[pid]))?;
        let tok = tokenize(&ex.question, &passage, self.vocab, self.budget, false)?;
        let out = self.model.forward_output(&EncoderInput::from(&tok))?;
        Ok(decode(&out, &tok, &passage.text, self.max_span_len).answer_text)
    }
}

/// Runs the baseline on each positive paragraph alone and keeps the
/// examples where its best word-level F1 is exactly zero. Negative
/// paragraphs never contain the answer, so they cannot change the
/// maximum.
pub fn build_challenge_set(
    baseline: &dyn ParagraphAnswerer,
    dev: &[MultiHopExample],
) -> Result<BTreeSet<String>> {
    let mut survivors = BTreeSet::new();
    for ex in dev {
        let mut best = 0.0f64;
        for pid in ex.positive_pids() {
            best = best.max(qa_f1(&baseline.answer(ex, pid)?, &ex.answer.text));
        }
        if best == 0.0 {
            survivors.insert(ex.qid.clone());
        }
    }
    Ok(survivors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceCurves {
    /// Ascending target-head confidences on gold-evidence passages.
    pub e_plus: Vec<f64>,
    /// Ascending confidences on the answer sentence alone.
    pub e_minus: Vec<f64>,
    pub mean_plus: f64,
    pub mean_minus: f64,
    /// Dev examples without a usable (span, gold evidence) pair.
    pub skipped: usize,
}

impl ConfidenceCurves {
    pub fn gap(&self) -> f64 {
        self.mean_plus - self.mean_minus
    }
}

/// Confidence of the gold answer when the reader sees all gold evidence
/// (E+) versus only the answer sentence (E−). Both views of an example
/// must resolve, otherwise the example is skipped, so the two curves
/// cover the same questions.
pub fn confidence_curves(
    model: &QaModel,
    dev: &[MultiHopExample],
    vocab: &Vocabulary,
    budget: usize,
) -> Result<ConfidenceCurves> {
    let mut e_plus = Vec::new();
    let mut e_minus = Vec::new();
    let mut skipped = 0usize;

    for ex in dev {
        let confidence = |units: Vec<SentenceRef>| -> Option<f64> {
            let passage = Passage::from_example(ex, units).ok()?;
            let sstar = ex.answer_sentence()?;
            let anchor = passage.position_of(sstar).map(|_| sstar);
            let span = locate_answer(&passage, &ex.answer.text, anchor).ok()?;
            let tok = tokenize(&ex.question, &passage, vocab, budget, false).ok()?;
            let (ts, te) = tok.span_to_tokens(span).ok()?;
            let out = model.forward_output(&EncoderInput::from(&tok)).ok()?;
            Some(answer_confidence(&out, AnswerTarget::Span(ts, te), HeadKind::Target))
        };
        let sstar = ex.answer_sentence();
        let pair = match (sstar, ex.gold_evidence.is_empty()) {
            (Some(sstar), false) => {
                confidence(ex.gold_evidence.clone()).zip(confidence(vec![sstar]))
            }
            _ => None,
        };
        match pair {
            Some((cp, cm)) => {
                e_plus.push(cp);
                e_minus.push(cm);
            }
            None => skipped += 1,
        }
    }

    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mean_plus = mean(&e_plus);
    let mean_minus = mean(&e_minus);
    e_plus.sort_by(|a, b| a.partial_cmp(b).expect("confidences are finite"));
    e_minus.sort_by(|a, b| a.partial_cmp(b).expect("confidences are finite"));
    Ok(ConfidenceCurves { e_plus, e_minus, mean_plus, mean_minus, skipped })
}

/// Rows of (index, confidence, set) for both sorted curves. A plot file
/// is not emitted; the CSV is the machine-readable output.
pub fn write_curves_csv(path: &Path, curves: &ConfidenceCurves) -> Result<()> {
    let mut body = String::from("index,confidence,set\n");
    for (i, c) in curves.e_plus.iter().enumerate() {
        body.push_str(&format!("{i},{c},e_plus\n"));
    }
    for (i, c) in curves.e_minus.iter().enumerate() {
        body.push_str(&format!("{i},{c},e_minus\n"));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub qa_f1: f64,
    pub qa_em: f64,
    /// Macro-averaged evidence (precision, recall, F1); present when
    /// selected-evidences predictions meet gold evidence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_prf: Option<(f64, f64, f64)>,
    /// qid -> challenge-set membership; empty unless computed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub challenge_membership: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<ConfidenceCurves>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub qid: String,
    pub f1: f64,
    pub em: f64,
}

/// Scores a prediction file against its dev corpus. Every example must
/// have exactly one prediction.
pub fn evaluate_predictions(
    records: &[PredictionRecord],
    dev: &[MultiHopExample],
) -> Result<(EvalReport, Vec<ExampleScore>)> {
    let mut by_qid: HashMap<&str, &PredictionRecord> = HashMap::new();
    for r in records {
        if by_qid.insert(r.qid.as_str(), r).is_some() {
            return Err(Error::Config(format!("duplicate prediction for {}", r.qid)));
        }
    }

    let mut scores = Vec::with_capacity(dev.len());
    let mut sum_f1 = 0.0;
    let mut sum_em = 0.0;
    let mut prf_sum = (0.0, 0.0, 0.0);
    let mut prf_n = 0usize;
    for ex in dev {
        let rec = by_qid.get(ex.qid.as_str()).ok_or_else(|| {
            Error::Config(format!("no prediction for {}", ex.qid))
        })?;
        let f1 = qa_f1(&rec.answer_text, &ex.answer.text);
        let em = qa_em(&rec.answer_text, &ex.answer.text);
        sum_f1 += f1;
        sum_em += em;
        scores.push(ExampleScore { qid: ex.qid.clone(), f1, em });

        let claims_evidence = rec.mode == InferenceMode::SelectedEvidences;
        if claims_evidence && !rec.selected_units.is_empty() && !ex.gold_evidence.is_empty() {
            let (p, r, f) = evidence_prf(&rec.selected_set(), &ex.gold_set());
            prf_sum.0 += p;
            prf_sum.1 += r;
            prf_sum.2 += f;
            prf_n += 1;
        }
    }

    let n = dev.len();
    let report = EvalReport {
        n_examples: n,
        qa_f1: if n > 0 { sum_f1 / n as f64 } else { 0.0 },
        qa_em: if n > 0 { sum_em / n as f64 } else { 0.0 },
        evidence_prf: (prf_n > 0).then(|| {
            let d = prf_n as f64;
            (prf_sum.0 / d, prf_sum.1 / d, prf_sum.2 / d)
        }),
        challenge_membership: BTreeMap::new(),
        confidence: None,
    };
    Ok((report, scores))
}

pub fn write_scores_csv(path: &Path, scores: &[ExampleScore]) -> Result<()> {
    let mut body = String::from("qid,f1,em\n");
    for s in scores {
        body.push_str(&format!("{},{},{}\n", s.qid, s.f1, s.em));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use crate::model::EncoderConfig;

    #[test]
    fn normalization_strips_case_articles_and_punctuation() {
        assert_eq!(normalize_answer("The  Korean War!"), "korean war");
        assert_eq!(normalize_answer("a an the"), "");
        assert_eq!(normalize_answer("1,945"), "1945");
        assert_eq!(normalize_answer("  spaced   out  "), "spaced out");
    }

    #[test]
    fn f1_golden_values() {
        assert_eq!(qa_f1("the Korean War", "Korean War"), 1.0);
        assert_eq!(qa_f1("Pacific War", "Korean War"), 0.5);
        assert_eq!(qa_f1("completely different", "Korean War"), 0.0);
        assert_eq!(qa_f1("", "Korean War"), 0.0);
        assert_eq!(qa_f1("", ""), 1.0);
        // Multiset counting: a repeated predicted word only matches once.
        let f1 = qa_f1("war war", "Korean War");
        let p = 0.5;
        let r = 0.5;
        assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    #[test]
    fn yes_no_compare_exactly_never_by_overlap() {
        assert_eq!(qa_f1("yes", "yes"), 1.0);
        assert_eq!(qa_f1("yes", "no"), 0.0);
        assert_eq!(qa_f1("yes it is", "yes"), 0.0);
        assert_eq!(qa_em("No!", "no"), 1.0);
    }

    #[test]
    fn exact_match_golden_values() {
        assert_eq!(qa_em("The Korean War", "korean war"), 1.0);
        assert_eq!(qa_em("Korean Wars", "Korean War"), 0.0);
    }

    #[test]
    fn evidence_prf_golden_values() {
        let pred: BTreeSet<SentenceRef> = [(0, 0), (0, 1), (1, 0)].into_iter().collect();
        let gold: BTreeSet<SentenceRef> = [(0, 0), (0, 1)].into_iter().collect();
        let (p, r, f) = evidence_prf(&pred, &gold);
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
        assert!((f - 0.8).abs() < 1e-12);

        let empty = BTreeSet::new();
        assert_eq!(evidence_prf(&empty, &gold), (0.0, 0.0, 0.0));
        let disjoint: BTreeSet<SentenceRef> = [(5, 5)].into_iter().collect();
        assert_eq!(evidence_prf(&disjoint, &gold), (0.0, 0.0, 0.0));
        assert_eq!(evidence_prf(&gold, &gold), (1.0, 1.0, 1.0));
    }

    struct StubAnswerer {
        right: std::collections::HashSet<String>,
    }

    impl ParagraphAnswerer for StubAnswerer {
        fn answer(&self, ex: &MultiHopExample, pid: usize) -> Result<String> {
            // Answers correctly from the answer-side paragraph only when the
            // example is marked solvable; otherwise returns off-target text.
            let sstar = ex.answer_sentence();
            if self.right.contains(&ex.qid) && sstar.map(|(p, _)| p) == Some(pid) {
                Ok(ex.answer.text.clone())
            } else {
                Ok("irrelevant words".into())
            }
        }
    }

    fn dev_fixture() -> Vec<MultiHopExample> {
        generate_synthetic(&SyntheticConfig { n_examples: 6, seed: 21, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn challenge_set_keeps_exactly_the_unsolvable_examples() {
        let dev = dev_fixture();
        let right: std::collections::HashSet<String> =
            [dev[0].qid.clone(), dev[3].qid.clone()].into_iter().collect();
        let stub = StubAnswerer { right: right.clone() };
        let survivors = build_challenge_set(&stub, &dev).unwrap();
        let expected: BTreeSet<String> = dev
            .iter()
            .map(|e| e.qid.clone())
            .filter(|q| !right.contains(q))
            .collect();
        assert_eq!(survivors, expected);
    }

    #[test]
    fn solving_everything_empties_the_challenge_set() {
        let dev = dev_fixture();
        let stub = StubAnswerer { right: dev.iter().map(|e| e.qid.clone()).collect() };
        assert!(build_challenge_set(&stub, &dev).unwrap().is_empty());
    }

    #[test]
    fn curves_cover_the_same_questions_and_preserve_means() {
        let dev = dev_fixture();
        let vocab = Vocabulary::build(&dev);
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            max_len: 128,
            hidden_dim: 32,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 32,
        };
        let model = QaModel::new(&cfg, 5).unwrap();
        let curves = confidence_curves(&model, &dev, &vocab, 128).unwrap();
        assert_eq!(curves.e_plus.len(), curves.e_minus.len());
        assert_eq!(curves.e_plus.len() + curves.skipped, dev.len());
        assert_eq!(curves.skipped, 0);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&curves.e_plus) - curves.mean_plus).abs() < 1e-12);
        assert!((mean(&curves.e_minus) - curves.mean_minus).abs() < 1e-12);
        assert!(curves.e_plus.windows(2).all(|w| w[0] <= w[1]));
        assert!(curves.e_minus.windows(2).all(|w| w[0] <= w[1]));
        assert!((curves.gap() - (curves.mean_plus - curves.mean_minus)).abs() < 1e-15);
        for c in curves.e_plus.iter().chain(&curves.e_minus) {
            assert!((0.0..=1.0).contains(c));
        }
    }

    #[test]
    fn evaluation_requires_exactly_one_prediction_per_example() {
        let dev = dev_fixture();
        let mut records: Vec<PredictionRecord> = dev
            .iter()
            .map(|ex| PredictionRecord {
                qid: ex.qid.clone(),
                mode: InferenceMode::PairedParagraph,
                class: crate::setgen::ClassLabel::Span,
                answer_text: ex.answer.text.clone(),
                confidence: 1.0,
                selected_units: vec![],
            })
            .collect();

        let (report, scores) = evaluate_predictions(&records, &dev).unwrap();
        assert_eq!(report.n_examples, dev.len());
        assert_eq!(report.qa_f1, 1.0);
        assert_eq!(report.qa_em, 1.0);
        assert_eq!(report.evidence_prf, None);
        assert_eq!(scores.len(), dev.len());

        let extra = records[0].clone();
        records.push(extra);
        assert!(evaluate_predictions(&records, &dev).is_err());
        records.pop();
        records.pop();
        assert!(evaluate_predictions(&records, &dev).is_err());
    }

    #[test]
    fn evidence_scores_come_only_from_selected_evidence_predictions() {
        let dev = dev_fixture();
        let records: Vec<PredictionRecord> = dev
            .iter()
            .map(|ex| PredictionRecord {
                qid: ex.qid.clone(),
                mode: InferenceMode::SelectedEvidences,
                class: crate::setgen::ClassLabel::Span,
                answer_text: ex.answer.text.clone(),
                confidence: 1.0,
                selected_units: ex.gold_evidence.clone(),
            })
            .collect();
        let (report, _) = evaluate_predictions(&records, &dev).unwrap();
        assert_eq!(report.evidence_prf, Some((1.0, 1.0, 1.0)));
    }
}
