//! Greedy counterfactual evidence extraction.
//!
//! Starting from the answer sentence, each step scores every remaining
//! sentence and admits the best one. The combined strategy scores a
//! candidate by inserting it next to the collected evidence and erasing
//! that union from the passage:
//!
//! ```text
//! score(S_i) = P(A | Q, S_i ∪ E) − P(A | Q, D \ (S_i ∪ E))
//! ```
//!
//! The accumulative baseline drops the erasure term and compares against
//! `P(A | Q, E)` instead. Extraction stops when the best score is strictly
//! negative (zero-gain sentences are admitted) or when the set holds T+1
//! sentences. Ties go to the smallest (pid, sid).
//!
//! Confidence comes from an oracle so the procedure can be driven by the
//! real model or by test stubs, and cross-checked against
//! [`brute_force_extract`], which precomputes every subset confidence and
//! replays the greedy definition from that table.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{locate_answer, AnswerType, SentenceRef, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{answer_confidence, AnswerTarget, EncoderInput, HeadKind, QaModel};
use crate::setgen::TrainingInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Combined,
    Accumulative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpreterConfig {
    pub strategy: Strategy,
    /// Maximum admitted sentences beyond S*; the set never exceeds T+1.
    pub t_max: usize,
}

impl Default for InterpreterConfig {
    fn default() -> Self {
        InterpreterConfig { strategy: Strategy::Combined, t_max: 5 }
    }
}

impl InterpreterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max < 1 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NegativeGain,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub qid: String,
    /// Insertion order; `members[0]` is the answer sentence S*.
    pub members: Vec<SentenceRef>,
    /// Score of each admitted member after S*; length `members.len() - 1`.
    pub scores: Vec<f64>,
    pub stopped_by: StopReason,
}

impl EvidenceSet {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        let fail = |m: &str| Error::Internal(format!("{}: {}", self.qid, m));
        if self.members.is_empty() {
            return Err(fail("evidence set must contain S*"));
        }
        if self.members.len() > t_max + 1 {
            return Err(fail("evidence set exceeds T+1 members"));
        }
        if self.scores.len() + 1 != self.members.len() {
            return Err(fail("scores must cover every member after S*"));
        }
        let set: BTreeSet<_> = self.members.iter().collect();
        if set.len() != self.members.len() {
            return Err(fail("members must not repeat"));
        }
        Ok(())
    }

    pub fn member_set(&self) -> BTreeSet<SentenceRef> {
        self.members.iter().copied().collect()
    }
}

/// Answer confidence of a unit subset, `P(A | Q, units)`. Units arrive in
/// document order; the empty subset means a passage with no sentences.
pub trait ConfidenceOracle {
    fn confidence(&self, inst: &TrainingInstance, units: &[SentenceRef]) -> f64;
}

/// Oracle backed by a model snapshot. A sub-passage in which the answer
/// cannot be located (or no longer fits the budget) reads as confidence 0;
/// such reads are counted.
pub struct ModelOracle<'a> {
    pub model: &'a QaModel,
    pub vocab: &'a Vocabulary,
    pub budget: usize,
    zero_reads: Cell<usize>,
}

impl<'a> ModelOracle<'a> {
    pub fn new(model: &'a QaModel, vocab: &'a Vocabulary, budget: usize) -> Self {
        ModelOracle { model, vocab, budget, zero_reads: Cell::new(0) }
    }

    pub fn zero_reads(&self) -> usize {
        self.zero_reads.get()
    }

    fn confidence_inner(&self, inst: &TrainingInstance, units: &[SentenceRef]) -> Result<f64> {
        let keep: BTreeSet<SentenceRef> = units.iter().copied().collect();
        let sub = inst.passage.subset(&keep);
        let tok = crate::corpus::tokenize(&inst.question, &sub, self.vocab, self.budget, false)?;
        let target = match inst.answer_kind {
            AnswerType::Yes => AnswerTarget::Yes,
            AnswerType::No => AnswerTarget::No,
            AnswerType::Span => {
                let anchor = (0..sub.len())
                    .find(|&i| sub.sentence_text(i).contains(&inst.answer_text))
                    .map(|i| sub.units[i]);
                match locate_answer(&sub, &inst.answer_text, anchor) {
                    Ok(span) => match tok.span_to_tokens(span) {
                        Ok((ts, te)) => AnswerTarget::Span(ts, te),
                        Err(_) => {
                            self.zero_reads.set(self.zero_reads.get() + 1);
                            return Ok(0.0);
                        }
                    },
                    Err(_) => {
                        self.zero_reads.set(self.zero_reads.get() + 1);
                        return Ok(0.0);
                    }
                }
            }
        };
        let out = self.model.forward_output(&EncoderInput::from(&tok))?;
        Ok(answer_confidence(&out, target, HeadKind::Target))
    }
}

impl ConfidenceOracle for ModelOracle<'_> {
    fn confidence(&self, inst: &TrainingInstance, units: &[SentenceRef]) -> f64 {
        self.confidence_inner(inst, units).unwrap_or_else(|_| {
            self.zero_reads.set(self.zero_reads.get() + 1);
            0.0
        })
    }
}

/// Units of `all` present in `keep`, preserving document order, optionally
/// with one extra unit included.
fn ordered_subset(
    all: &[SentenceRef],
    keep: &BTreeSet<SentenceRef>,
    extra: Option<SentenceRef>,
) -> Vec<SentenceRef> {
    all.iter()
        .copied()
        .filter(|u| keep.contains(u) || Some(*u) == extra)
        .collect()
}

/// The answer sentence of an instance: the first unit, in passage order,
/// whose sentence text contains the answer string.
pub fn answer_unit(inst: &TrainingInstance) -> Result<SentenceRef> {
    if inst.answer_kind != AnswerType::Span {
        return Err(Error::NoAnswerSentence);
    }
    for (i, &u) in inst.passage.units.iter().enumerate() {
        if inst.passage.sentence_text(i).contains(&inst.answer_text) {
            return Ok(u);
        }
    }
    Err(Error::NoAnswerSentence)
}

/// Scores every candidate sentence outside `e_prev` for one greedy step.
pub fn step_scores(
    oracle: &dyn ConfidenceOracle,
    inst: &TrainingInstance,
    e_prev: &BTreeSet<SentenceRef>,
    strategy: Strategy,
) -> BTreeMap<SentenceRef, f64> {
    let all = &inst.passage.units;
    let base = match strategy {
        Strategy::Accumulative => {
            Some(oracle.confidence(inst, &ordered_subset(all, e_prev, None)))
        }
        Strategy::Combined => None,
    };
    let mut scores = BTreeMap::new();
    for &cand in all.iter().filter(|u| !e_prev.contains(u)) {
        let with = ordered_subset(all, e_prev, Some(cand));
        let ins = oracle.confidence(inst, &with);
        let score = match strategy {
            Strategy::Combined => {
                let erased: Vec<SentenceRef> = all
                    .iter()
                    .copied()
                    .filter(|u| !e_prev.contains(u) && *u != cand)
                    .collect();
                ins - oracle.confidence(inst, &erased)
            }
            Strategy::Accumulative => ins - base.expect("accumulative base"),
        };
        scores.insert(cand, score);
    }
    scores
}

fn greedy<FS>(qid: &str, sstar: SentenceRef, n_units: usize, t_max: usize, mut step: FS) -> EvidenceSet
where
    FS: FnMut(&BTreeSet<SentenceRef>) -> BTreeMap<SentenceRef, f64>,
{
    let mut members = vec![sstar];
    let mut set: BTreeSet<SentenceRef> = [sstar].into();
    let mut scores = Vec::new();
    let stopped_by = loop {
        if members.len() == t_max + 1 || members.len() == n_units {
            // Candidate exhaustion cannot grow the set further; it reports
            // as max_steps since no negative gain was observed.
            break StopReason::MaxSteps;
        }
        let step_map = step(&set);
        // BTreeMap iterates in ascending key order, so on equal scores the
        // smallest (pid, sid) is kept.
        let mut best: Option<(SentenceRef, f64)> = None;
        for (&cand, &score) in &step_map {
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((cand, score));
            }
        }
        let Some((cand, score)) = best else {
            break StopReason::MaxSteps;
        };
        if score < 0.0 {
            break StopReason::NegativeGain;
        }
        members.push(cand);
        set.insert(cand);
        scores.push(score);
    };
    EvidenceSet { qid: qid.to_string(), members, scores, stopped_by }
}

/// Greedy extraction from an answerable instance.
pub fn extract(
    oracle: &dyn ConfidenceOracle,
    inst: &TrainingInstance,
    cfg: &InterpreterConfig,
) -> Result<EvidenceSet> {
    cfg.validate()?;
    let sstar = answer_unit(inst)?;
    let out = greedy(&inst.qid, sstar, inst.passage.len(), cfg.t_max, |e_prev| {
        step_scores(oracle, inst, e_prev, cfg.strategy)
    });
    out.validate(cfg.t_max)?;
    Ok(out)
}

const BRUTE_FORCE_MAX: usize = 8;

/// Independent oracle for tests: evaluates the confidence of every subset
/// of the passage up front, then replays the greedy definition over that
/// table. Must agree with [`extract`] exactly.
pub fn brute_force_extract(
    oracle: &dyn ConfidenceOracle,
    inst: &TrainingInstance,
    cfg: &InterpreterConfig,
) -> Result<EvidenceSet> {
    cfg.validate()?;
    let all = &inst.passage.units;
    let n = all.len();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::PassageTooLarge { n, max: BRUTE_FORCE_MAX });
    }
    let sstar = answer_unit(inst)?;

    let units_of = |mask: usize| -> Vec<SentenceRef> {
        (0..n).filter(|i| mask & (1 << i) != 0).map(|i| all[i]).collect()
    };
    let table: Vec<f64> =
        (0..1usize << n).map(|mask| oracle.confidence(inst, &units_of(mask))).collect();
    let mask_of = |set: &BTreeSet<SentenceRef>| -> usize {
        all.iter().enumerate().filter(|(_, u)| set.contains(u)).map(|(i, _)| 1 << i).sum()
    };
    let full = (1usize << n) - 1;

    let out = greedy(&inst.qid, sstar, n, cfg.t_max, |e_prev| {
        let e_mask = mask_of(e_prev);
        let mut scores = BTreeMap::new();
        for (i, &u) in all.iter().enumerate() {
            let bit = 1usize << i;
            if e_mask & bit != 0 {
                continue;
            }
            let with = e_mask | bit;
            let score = match cfg.strategy {
                Strategy::Combined => table[with] - table[full & !with],
                Strategy::Accumulative => table[with] - table[e_mask],
            };
            scores.insert(u, score);
        }
        scores
    });
    out.validate(cfg.t_max)?;
    Ok(out)
}

/// Set precision and recall of extracted members against gold evidence,
/// S* included on both sides of the comparison.
pub fn evidentiality_recall_precision(
    pred: &EvidenceSet,
    gold: &BTreeSet<SentenceRef>,
) -> (f64, f64) {
    assert!(!gold.is_empty(), "gold evidence must be non-empty");
    let members = pred.member_set();
    let hits = members.intersection(gold).count() as f64;
    let precision = hits / members.len() as f64;
    let recall = hits / gold.len() as f64;
    (precision, recall)
}

/// Test stubs standing in for a trained model.
pub mod stubs {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// `P(A|Q,E) = |E ∩ gold| / |gold|`: confidence grows linearly with
    /// recalled gold evidence.
    pub struct RecallOracle {
        pub gold: BTreeSet<SentenceRef>,
    }

    impl ConfidenceOracle for RecallOracle {
        fn confidence(&self, _inst: &TrainingInstance, units: &[SentenceRef]) -> f64 {
            if self.gold.is_empty() {
                return 0.0;
            }
            let hits = units.iter().filter(|u| self.gold.contains(u)).count();
            hits as f64 / self.gold.len() as f64
        }
    }

    /// Arbitrary per-subset confidences, keyed by the ordered unit list.
    pub struct TableOracle {
        pub table: HashMap<Vec<SentenceRef>, f64>,
        pub default: f64,
    }

    impl ConfidenceOracle for TableOracle {
        fn confidence(&self, _inst: &TrainingInstance, units: &[SentenceRef]) -> f64 {
            self.table.get(units).copied().unwrap_or(self.default)
        }
    }

    impl TableOracle {
        /// Random subset table on a coarse grid so exact ties are common,
        /// exercising the tie-break rule.
        pub fn random(units: &[SentenceRef], rng: &mut ChaCha8Rng) -> TableOracle {
            let n = units.len();
            assert!(n <= super::BRUTE_FORCE_MAX);
            let mut table = HashMap::new();
            for mask in 0..(1usize << n) {
                let subset: Vec<SentenceRef> =
                    (0..n).filter(|i| mask & (1 << i) != 0).map(|i| units[i]).collect();
                let v = rng.random_range(0..=10) as f64 / 10.0;
                table.insert(subset, v);
            }
            TableOracle { table, default: 0.0 }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stubs::{RecallOracle, TableOracle};
    use super::*;
    use crate::corpus::{Answer, MultiHopExample, Paragraph, Passage, Polarity, Sentence};
    use crate::setgen::{Answerability, ClassLabel, Evidentiality, SetTag};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SSTAR: SentenceRef = (0, 0);
    const S1: SentenceRef = (0, 1);
    const S2: SentenceRef = (0, 2);
    const S3: SentenceRef = (0, 3);

    /// Four-sentence passage; the answer sits in the first sentence.
    fn stub_instance() -> TrainingInstance {
        let texts = [
            "Korea got independence in 1945.",
            "The treaty was signed in spring.",
            "The harbor reopened that year.",
            "Trade resumed along the coast.",
        ];
        let sentences: Vec<Sentence> = texts
            .iter()
            .enumerate()
            .map(|(sid, t)| Sentence { sid, text: (*t).to_string() })
            .collect();
        let ex = MultiHopExample {
            qid: "stub-1".into(),
            question: "When did Korea get independence?".into(),
            answer: Answer { text: "1945".into(), kind: AnswerType::Span },
            paragraphs: vec![Paragraph {
                pid: 0,
                title: "stub".into(),
                sentences,
                polarity: Polarity::Positive,
            }],
            gold_evidence: vec![S1, S2],
        };
        let passage =
            Passage::from_example(&ex, vec![SSTAR, S1, S2, S3]).unwrap();
        let answer_span = locate_answer(&passage, "1945", Some(SSTAR)).unwrap();
        TrainingInstance {
            qid: ex.qid.clone(),
            question: ex.question.clone(),
            answer_text: "1945".into(),
            answer_kind: AnswerType::Span,
            passage,
            answerability: Answerability::Answerable,
            evidentiality: Evidentiality::Unknown,
            neg_type: None,
            answer_span: Some(answer_span),
            class_label: ClassLabel::Span,
            set: SetTag::APos,
        }
    }

    fn gold() -> BTreeSet<SentenceRef> {
        [S1, S2].into_iter().collect()
    }

    #[test]
    fn combined_step_scores_match_hand_evaluation() {
        let inst = stub_instance();
        let oracle = RecallOracle { gold: gold() };
        let e_prev: BTreeSet<SentenceRef> = [SSTAR].into();
        let scores = step_scores(&oracle, &inst, &e_prev, Strategy::Combined);
        assert_eq!(scores.len(), 3);
        assert_eq!(scores[&S1], 0.0);
        assert_eq!(scores[&S2], 0.0);
        assert_eq!(scores[&S3], -1.0);
    }

    #[test]
    fn accumulative_step_scores_match_hand_evaluation() {
        let inst = stub_instance();
        let oracle = RecallOracle { gold: gold() };
        let e_prev: BTreeSet<SentenceRef> = [SSTAR].into();
        let scores = step_scores(&oracle, &inst, &e_prev, Strategy::Accumulative);
        assert_eq!(scores[&S1], 0.5);
        assert_eq!(scores[&S2], 0.5);
        assert_eq!(scores[&S3], 0.0);
    }

    #[test]
    fn saturated_evidence_scores_nothing() {
        let inst = stub_instance();
        let oracle = RecallOracle { gold: gold() };
        let all: BTreeSet<SentenceRef> = inst.passage.units.iter().copied().collect();
        assert!(step_scores(&oracle, &inst, &all, Strategy::Combined).is_empty());
    }

    #[test]
    fn greedy_collects_both_gold_sentences() {
        let inst = stub_instance();
        let oracle = RecallOracle { gold: gold() };
        let cfg = InterpreterConfig { strategy: Strategy::Combined, t_max: 5 };
        let set = extract(&oracle, &inst, &cfg).unwrap();
        assert_eq!(set.members[0], SSTAR);
        // Step one ties s1 and s2 at zero gain; the smaller reference wins.
        assert_eq!(set.members[1], S1);
        assert_eq!(set.members[2], S2);
        assert!(set.member_set().is_superset(&gold()));
        assert_eq!(set.scores.len(), set.members.len() - 1);
    }

    #[test]
    fn single_sentence_passage_returns_the_answer_sentence_alone() {
        let mut inst = stub_instance();
        inst.passage = inst.passage.subset(&[SSTAR].into());
        let oracle = RecallOracle { gold: gold() };
        let cfg = InterpreterConfig::default();
        for strategy in [Strategy::Combined, Strategy::Accumulative] {
            let set = extract(&oracle, &inst, &InterpreterConfig { strategy, ..cfg }).unwrap();
            assert_eq!(set.members, vec![SSTAR]);
            assert!(set.scores.is_empty());
            assert_eq!(set.stopped_by, StopReason::MaxSteps);
        }
    }

    #[test]
    fn uniformly_negative_gains_stop_immediately() {
        let inst = stub_instance();
        let mut inst3 = inst.clone();
        inst3.passage = inst.passage.subset(&[SSTAR, S1, S2].into());
        // Complements score higher than any insertion, so the first step
        // already looks harmful.
        let mut table = HashMap::new();
        table.insert(vec![S1], 0.5);
        table.insert(vec![S2], 0.5);
        let oracle = TableOracle { table, default: 0.0 };
        let set = extract(&oracle, &inst3, &InterpreterConfig::default()).unwrap();
        assert_eq!(set.members, vec![SSTAR]);
        assert_eq!(set.stopped_by, StopReason::NegativeGain);
    }

    #[test]
    fn greedy_agrees_with_the_exhaustive_oracle() {
        let inst = stub_instance();
        let units = inst.passage.units.clone();
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let oracle = TableOracle::random(&units, &mut rng);
            for strategy in [Strategy::Combined, Strategy::Accumulative] {
                for t_max in [1, 2, 5] {
                    let cfg = InterpreterConfig { strategy, t_max };
                    let fast = extract(&oracle, &inst, &cfg).unwrap();
                    let slow = brute_force_extract(&oracle, &inst, &cfg).unwrap();
                    assert_eq!(fast, slow, "seed {seed} {strategy:?} t_max {t_max}");
                }
            }
        }
    }

    #[test]
    fn two_sentence_passages_make_both_strategies_agree() {
        // The reduction holds for confidences that never drop when evidence
        // is added, which the real oracle approximates; random tables are
        // closed upward to honor that here.
        let inst = stub_instance();
        let mut inst2 = inst.clone();
        inst2.passage = inst.passage.subset(&[SSTAR, S1].into());
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || rng.random_range(0..=10u32) as f64 / 10.0;
            let p_empty = draw();
            let p_sstar = p_empty.max(draw());
            let p_s1 = p_empty.max(draw());
            let p_both = p_sstar.max(p_s1).max(draw());
            let table = HashMap::from([
                (vec![], p_empty),
                (vec![SSTAR], p_sstar),
                (vec![S1], p_s1),
                (vec![SSTAR, S1], p_both),
            ]);
            let oracle = TableOracle { table, default: 0.0 };

            let combined = step_scores(&oracle, &inst2, &[SSTAR].into(), Strategy::Combined);
            assert_eq!(combined[&S1], p_both - p_empty, "seed {seed}");

            let a = extract(&oracle, &inst2, &InterpreterConfig { strategy: Strategy::Combined, t_max: 5 })
                .unwrap();
            let b = extract(
                &oracle,
                &inst2,
                &InterpreterConfig { strategy: Strategy::Accumulative, t_max: 5 },
            )
            .unwrap();
            assert_eq!(a.member_set(), b.member_set(), "seed {seed}");
        }
    }

    #[test]
    fn evidence_sets_validate_their_shape() {
        let good = EvidenceSet {
            qid: "q".into(),
            members: vec![SSTAR, S1],
            scores: vec![0.25],
            stopped_by: StopReason::MaxSteps,
        };
        good.validate(5).unwrap();

        let dup = EvidenceSet { members: vec![SSTAR, SSTAR], ..good.clone() };
        assert!(dup.validate(5).is_err());
        let long = EvidenceSet { members: vec![SSTAR, S1, S2], scores: vec![0.0, 0.0], ..good.clone() };
        assert!(long.validate(1).is_err());
        let miscounted = EvidenceSet { scores: vec![], ..good.clone() };
        assert!(miscounted.validate(5).is_err());
        let empty = EvidenceSet { members: vec![], scores: vec![], ..good };
        assert!(empty.validate(5).is_err());
    }

    #[test]
    fn precision_recall_golden_values() {
        let pred = EvidenceSet {
            qid: "q".into(),
            members: vec![SSTAR, S1, S2],
            scores: vec![0.0, 0.0],
            stopped_by: StopReason::MaxSteps,
        };
        let g: BTreeSet<SentenceRef> = [SSTAR, S1].into_iter().collect();
        let (p, r) = evidentiality_recall_precision(&pred, &g);
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);

        let exact: BTreeSet<SentenceRef> = pred.member_set();
        assert_eq!(evidentiality_recall_precision(&pred, &exact), (1.0, 1.0));
    }

    #[test]
    fn missing_answer_sentence_is_an_error() {
        let mut inst = stub_instance();
        inst.passage = inst.passage.subset(&[S1, S2].into());
        let oracle = RecallOracle { gold: gold() };
        assert!(matches!(
            extract(&oracle, &inst, &InterpreterConfig::default()),
            Err(Error::NoAnswerSentence)
        ));
    }
}
