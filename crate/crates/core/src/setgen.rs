//! Training-set construction.
//!
//! From each example we derive:
//!
//! - one answerable instance over both positive paragraphs (A+),
//! - up to `k_neg` unanswerable instances over negative-paragraph pairs that
//!   contain neither the answer nor any gold sentence (A-),
//! - up to three evidence-insufficient instances (E-) in which the answer
//!   string is present but the full evidence is not: the answer sentence
//!   alone, the answer sentence plus one negative paragraph, and the
//!   answer-side positive paragraph plus one negative paragraph.
//!
//! Evidence-sufficient instances (E+) are not built here; they come from
//! extraction during training.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    locate_answer, AnswerType, MultiHopExample, Passage, Polarity, SentenceRef,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answerability {
    Answerable,
    Unanswerable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Evidentiality {
    /// Evidence sufficient to derive the answer.
    Positive,
    /// Answer present, evidence insufficient.
    Negative,
    /// Not labeled (answerability-only instances).
    Unknown,
}

/// How an evidence-insufficient passage was assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegType {
    /// The answer sentence alone.
    AnswerOnly,
    /// The answer sentence plus one negative paragraph.
    AnswerPlusIrrelevant,
    /// The positive paragraph holding the answer sentence plus one negative
    /// paragraph: partial evidence with plausible but broken support.
    PartialPlusIrrelevant,
}

/// Supervision target for the four-way answer classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Span,
    Yes,
    No,
    None,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Span => 0,
            ClassLabel::Yes => 1,
            ClassLabel::No => 2,
            ClassLabel::None => 3,
        }
    }

    fn for_answer(kind: AnswerType) -> ClassLabel {
        match kind {
            AnswerType::Span => ClassLabel::Span,
            AnswerType::Yes => ClassLabel::Yes,
            AnswerType::No => ClassLabel::No,
        }
    }
}

/// Which training set an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetTag {
    #[serde(rename = "A+")]
    APos,
    #[serde(rename = "A-")]
    ANeg,
    #[serde(rename = "E+")]
    EPos,
    #[serde(rename = "E-")]
    ENeg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub qid: String,
    pub question: String,
    pub answer_text: String,
    pub answer_kind: AnswerType,
    pub passage: Passage,
    pub answerability: Answerability,
    pub evidentiality: Evidentiality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg_type: Option<NegType>,
    /// Byte span of the answer in the resolved passage text; present for
    /// every answerable span instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_span: Option<(usize, usize)>,
    pub class_label: ClassLabel,
    /// Explicit set tag, always equal to the derived [`SetTag`].
    pub set: SetTag,
}

impl TrainingInstance {
    pub fn set_tag(&self) -> SetTag {
        self.set
    }

    /// Tag implied by the answerability and evidentiality fields.
    pub fn derived_tag(&self) -> SetTag {
        match (self.answerability, self.evidentiality) {
            (Answerability::Unanswerable, _) => SetTag::ANeg,
            (Answerability::Answerable, Evidentiality::Negative) => SetTag::ENeg,
            (Answerability::Answerable, Evidentiality::Positive) => SetTag::EPos,
            (Answerability::Answerable, Evidentiality::Unknown) => SetTag::APos,
        }
    }

    /// Cross-field consistency; violations are construction bugs.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Error::Internal(format!("{}: {}", self.qid, m));
        if self.set != self.derived_tag() {
            return Err(fail("set tag does not match answerability/evidentiality"));
        }
        match self.answerability {
            Answerability::Unanswerable => {
                if self.class_label != ClassLabel::None {
                    return Err(fail("unanswerable instance must be class none"));
                }
                if self.answer_span.is_some() {
                    return Err(fail("unanswerable instance cannot carry a span"));
                }
                if self.neg_type.is_some() {
                    return Err(fail("neg_type is an evidentiality field"));
                }
            }
            Answerability::Answerable => {
                if self.class_label != ClassLabel::for_answer(self.answer_kind) {
                    return Err(fail("class label must match the answer kind"));
                }
                if self.answer_kind == AnswerType::Span {
                    let (s, e) = self.answer_span.ok_or_else(|| fail("span instance without span"))?;
                    if self.passage.text.get(s..e) != Some(self.answer_text.as_str()) {
                        return Err(fail("answer_span does not slice to the answer"));
                    }
                } else if self.answer_span.is_some() {
                    return Err(fail("yes/no instance cannot carry a span"));
                }
                if (self.evidentiality == Evidentiality::Negative) != self.neg_type.is_some() {
                    return Err(fail("neg_type present iff evidentiality is negative"));
                }
            }
        }
        Ok(())
    }
}

/// Counters for degenerate cases met during construction.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetGenStats {
    /// Negative pairs requested beyond what survived the answer filter.
    pub capped_negative_pairs: usize,
    /// E- variants skipped because the example has no answer sentence.
    pub skipped_neg_types: usize,
}

fn answerable_base(ex: &MultiHopExample) -> (String, String, AnswerType, ClassLabel) {
    (
        ex.qid.clone(),
        ex.question.clone(),
        ex.answer.kind,
        ClassLabel::for_answer(ex.answer.kind),
    )
}

/// Builds the A+ instance and up to `k_neg` A- instances.
///
/// A+ concatenates both positive paragraphs in pid order. A- samples
/// negative-paragraph pairs uniformly without replacement, keeping only
/// pairs free of the answer string (gold sentences are excluded by
/// polarity). Output pairs are sorted for determinism.
pub fn build_answer_sets(
    ex: &MultiHopExample,
    k_neg: usize,
    rng: &mut ChaCha8Rng,
    stats: &mut SetGenStats,
) -> Result<(TrainingInstance, Vec<TrainingInstance>)> {
    let (qid, question, answer_kind, class_label) = answerable_base(ex);

    let passage = Passage::from_example(ex, ex.units_of(&ex.positive_pids()))?;
    let answer_span = match answer_kind {
        AnswerType::Span => {
            Some(locate_answer(&passage, &ex.answer.text, ex.answer_sentence())?)
        }
        _ => None,
    };
    let a_pos = TrainingInstance {
        qid: qid.clone(),
        question: question.clone(),
        answer_text: ex.answer.text.clone(),
        answer_kind,
        passage,
        answerability: Answerability::Answerable,
        evidentiality: Evidentiality::Unknown,
        neg_type: None,
        answer_span,
        class_label,
        set: SetTag::APos,
    };
    a_pos.validate()?;

    let neg_pids = ex.negative_pids();
    let mut pairs = Vec::new();
    for i in 0..neg_pids.len() {
        for j in (i + 1)..neg_pids.len() {
            pairs.push((neg_pids[i], neg_pids[j]));
        }
    }
    if answer_kind == AnswerType::Span {
        pairs.retain(|&(a, b)| {
            let pa = &ex.paragraphs[a];
            let pb = &ex.paragraphs[b];
            !pa.sentences.iter().chain(&pb.sentences).any(|s| s.text.contains(&ex.answer.text))
        });
    }
    if pairs.len() > k_neg {
        let (sampled, _) = pairs.partial_shuffle(rng, k_neg);
        let mut kept = sampled.to_vec();
        kept.sort_unstable();
        pairs = kept;
    } else if pairs.len() < k_neg {
        stats.capped_negative_pairs += k_neg - pairs.len();
    }

    let mut a_neg = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let inst = TrainingInstance {
            qid: qid.clone(),
            question: question.clone(),
            answer_text: ex.answer.text.clone(),
            answer_kind,
            passage: Passage::from_example(ex, ex.units_of(&[a, b]))?,
            answerability: Answerability::Unanswerable,
            evidentiality: Evidentiality::Unknown,
            neg_type: None,
            answer_span: None,
            class_label: ClassLabel::None,
            set: SetTag::ANeg,
        };
        inst.validate()?;
        a_neg.push(inst);
    }
    Ok((a_pos, a_neg))
}

/// Builds the E- instances (up to three, one per [`NegType`]).
///
/// Span questions get all three variants anchored on the answer sentence.
/// Yes/no questions have no answer sentence, so only the partial variant is
/// built, seeded with the first positive paragraph.
pub fn build_evidence_negatives(
    ex: &MultiHopExample,
    rng: &mut ChaCha8Rng,
    stats: &mut SetGenStats,
) -> Result<Vec<TrainingInstance>> {
    let (qid, question, answer_kind, class_label) = answerable_base(ex);
    let neg_pids = ex.negative_pids();
    if neg_pids.is_empty() {
        return Err(Error::Internal(format!("{qid}: no negative paragraphs")));
    }
    let sstar = ex.answer_sentence();

    let mut out = Vec::new();
    let mut push = |units: Vec<SentenceRef>, neg_type: NegType| -> Result<()> {
        let passage = Passage::from_example(ex, units)?;
        let answer_span = match answer_kind {
            AnswerType::Span => Some(locate_answer(&passage, &ex.answer.text, sstar)?),
            _ => None,
        };
        let inst = TrainingInstance {
            qid: qid.clone(),
            question: question.clone(),
            answer_text: ex.answer.text.clone(),
            answer_kind,
            passage,
            answerability: Answerability::Answerable,
            evidentiality: Evidentiality::Negative,
            neg_type: Some(neg_type),
            answer_span,
            class_label,
            set: SetTag::ENeg,
        };
        inst.validate()?;
        out.push(inst);
        Ok(())
    };

    if let Some(sstar) = sstar {
        push(vec![sstar], NegType::AnswerOnly)?;

        let d = neg_pids[rng.random_range(0..neg_pids.len())];
        let mut units = vec![sstar];
        units.extend(ex.units_of(&[d]));
        push(units, NegType::AnswerPlusIrrelevant)?;
    } else {
        stats.skipped_neg_types += 2;
    }

    // Partial evidence: the whole paragraph on the answer side (or the
    // first positive paragraph for yes/no) plus one negative paragraph.
    // Skipped when the gold evidence sits entirely inside that paragraph,
    // which would make the passage sufficient and the label wrong.
    let d1 = match sstar {
        Some((pid, _)) => pid,
        None => *ex.positive_pids().iter().min().expect("validated example has a positive"),
    };
    if ex.gold_evidence.iter().any(|&(pid, _)| pid != d1) {
        let d2 = neg_pids[rng.random_range(0..neg_pids.len())];
        push(ex.units_of(&[d1, d2]), NegType::PartialPlusIrrelevant)?;
    } else {
        stats.skipped_neg_types += 1;
    }

    Ok(out)
}

/// Builds every instance for a corpus in one pass: A+, A-, and E- per
/// example, in that order, examples in input order.
pub fn build_all_sets(
    examples: &[MultiHopExample],
    k_neg: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<TrainingInstance>, SetGenStats)> {
    let mut stats = SetGenStats::default();
    let mut out = Vec::new();
    for ex in examples {
        let (a_pos, a_neg) = build_answer_sets(ex, k_neg, rng, &mut stats)?;
        out.push(a_pos);
        out.extend(a_neg);
        out.extend(build_evidence_negatives(ex, rng, &mut stats)?);
    }
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditViolation {
    pub qid: String,
    pub rule: String,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAudit {
    pub checked: usize,
    pub violations: Vec<AuditViolation>,
}

impl LabelAudit {
    pub fn merge(&mut self, other: LabelAudit) {
        self.checked += other.checked;
        self.violations.extend(other.violations);
    }
}

/// Re-checks constructed labels against the ground-truth example.
///
/// A+ must contain every gold sentence; A- must contain neither the answer
/// string (span answers) nor any gold sentence; E- must contain the answer
/// but not the full gold set. E+ instances are trusted extraction output
/// and only checked for answer presence.
pub fn audit_labels(instances: &[TrainingInstance], gt: &MultiHopExample) -> LabelAudit {
    let gold = gt.gold_set();
    let mut audit = LabelAudit::default();
    for inst in instances.iter().filter(|i| i.qid == gt.qid) {
        audit.checked += 1;
        let mut violate = |rule: &str| {
            audit.violations.push(AuditViolation { qid: gt.qid.clone(), rule: rule.to_string() })
        };
        let units: std::collections::BTreeSet<SentenceRef> =
            inst.passage.units.iter().copied().collect();
        let has_all_gold = !gold.is_empty() && gold.iter().all(|r| units.contains(r));
        let has_answer = inst.answer_kind != AnswerType::Span
            || inst.passage.text.contains(&inst.answer_text);

        match inst.set_tag() {
            SetTag::APos => {
                if !has_all_gold {
                    violate("A+ passage must contain all gold evidence");
                }
                if !has_answer {
                    violate("A+ passage must contain the answer");
                }
            }
            SetTag::ANeg => {
                if inst.answer_kind == AnswerType::Span
                    && inst.passage.text.contains(&inst.answer_text)
                {
                    violate("A- passage must not contain the answer");
                }
                if gold.iter().any(|r| units.contains(r)) {
                    violate("A- passage must not contain gold evidence");
                }
                if inst.passage.units.iter().any(|&(pid, _)| {
                    gt.paragraphs.get(pid).map(|p| p.polarity) == Some(Polarity::Positive)
                }) {
                    violate("A- passage must use negative paragraphs only");
                }
            }
            SetTag::ENeg => {
                if !has_answer {
                    violate("E- passage must contain the answer");
                }
                if has_all_gold {
                    violate("E- passage must not contain the full gold evidence");
                }
            }
            SetTag::EPos => {
                if !has_answer {
                    violate("E+ passage must contain the answer");
                }
            }
        }
    }
    audit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use rand::SeedableRng;

    fn example() -> MultiHopExample {
        generate_synthetic(&SyntheticConfig { n_examples: 1, seed: 5, ..Default::default() })
            .unwrap()
            .pop()
            .unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn answer_sets_have_one_positive_and_k_negatives() {
        let ex = example();
        let mut stats = SetGenStats::default();
        let (a_pos, a_neg) = build_answer_sets(&ex, 2, &mut rng(), &mut stats).unwrap();
        assert_eq!(a_pos.set_tag(), SetTag::APos);
        assert_eq!(a_neg.len(), 2);
        assert!(a_neg.iter().all(|i| i.set_tag() == SetTag::ANeg));
        assert_eq!(stats.capped_negative_pairs, 0);
    }

    #[test]
    fn negative_pair_demand_is_capped_at_the_supply() {
        let ex = example();
        let mut stats = SetGenStats::default();
        // 8 negative paragraphs admit C(8,2) = 28 distinct pairs.
        let (_, a_neg) = build_answer_sets(&ex, 30, &mut rng(), &mut stats).unwrap();
        assert_eq!(a_neg.len(), 28);
        assert_eq!(stats.capped_negative_pairs, 2);
        let distinct: std::collections::BTreeSet<Vec<SentenceRef>> =
            a_neg.iter().map(|i| i.passage.units.clone()).collect();
        assert_eq!(distinct.len(), 28);
    }

    #[test]
    fn positive_instance_holds_every_gold_sentence() {
        let ex = example();
        let (a_pos, _) =
            build_answer_sets(&ex, 2, &mut rng(), &mut SetGenStats::default()).unwrap();
        for gold in &ex.gold_evidence {
            assert!(a_pos.passage.units.contains(gold));
        }
        assert!(a_pos.passage.text.contains(&ex.answer.text));
    }

    #[test]
    fn negative_instances_are_unanswerable_and_answer_free() {
        let ex = example();
        let (_, a_neg) =
            build_answer_sets(&ex, 2, &mut rng(), &mut SetGenStats::default()).unwrap();
        for inst in &a_neg {
            assert_eq!(inst.answerability, Answerability::Unanswerable);
            assert_eq!(inst.class_label, ClassLabel::None);
            assert!(!inst.passage.text.contains(&ex.answer.text));
            assert_eq!(inst.answer_span, None);
        }
    }

    #[test]
    fn first_evidence_negative_is_the_answer_sentence_alone() {
        let ex = example();
        let en =
            build_evidence_negatives(&ex, &mut rng(), &mut SetGenStats::default()).unwrap();
        let sstar = ex.answer_sentence().unwrap();
        assert_eq!(en[0].neg_type, Some(NegType::AnswerOnly));
        assert_eq!(en[0].passage.units, vec![sstar]);
        assert_eq!(en[0].passage.text, ex.sentence_text(sstar).unwrap());
    }

    #[test]
    fn second_evidence_negative_adds_one_whole_distractor() {
        let ex = example();
        let en =
            build_evidence_negatives(&ex, &mut rng(), &mut SetGenStats::default()).unwrap();
        let inst = &en[1];
        assert_eq!(inst.neg_type, Some(NegType::AnswerPlusIrrelevant));
        let d_pid = inst.passage.units.last().unwrap().0;
        let d_len = ex.paragraphs[d_pid].sentences.len();
        assert_eq!(inst.passage.units.len(), 1 + d_len);
    }

    #[test]
    fn every_evidence_negative_misses_some_gold() {
        let ex = example();
        let en =
            build_evidence_negatives(&ex, &mut rng(), &mut SetGenStats::default()).unwrap();
        assert_eq!(en.len(), 3);
        for inst in &en {
            assert!(
                ex.gold_evidence.iter().any(|g| !inst.passage.units.contains(g)),
                "{:?} contains the full gold set",
                inst.neg_type
            );
            assert!(inst.passage.text.contains(&ex.answer.text));
        }
    }

    #[test]
    fn audit_passes_on_faithful_construction() {
        let ex = example();
        let (instances, _) = build_all_sets(std::slice::from_ref(&ex), 2, &mut rng()).unwrap();
        assert_eq!(instances.len(), 6);
        let audit = audit_labels(&instances, &ex);
        assert_eq!(audit.checked, 6);
        assert!(audit.violations.is_empty(), "{:?}", audit.violations);
    }

    #[test]
    fn audit_flags_a_planted_label_fault() {
        let ex = example();
        let (mut instances, _) =
            build_all_sets(std::slice::from_ref(&ex), 2, &mut rng()).unwrap();
        // Relabel the A+ instance as E-: it still holds the full gold set,
        // which E- forbids.
        let target = instances.iter_mut().find(|i| i.set == SetTag::APos).unwrap();
        target.evidentiality = Evidentiality::Negative;
        target.neg_type = Some(NegType::AnswerOnly);
        target.set = SetTag::ENeg;
        let audit = audit_labels(&instances, &ex);
        assert_eq!(audit.violations.len(), 1);
        assert!(audit.violations[0].rule.contains("full gold"));
    }

    #[test]
    fn audit_of_nothing_checks_nothing() {
        let ex = example();
        let audit = audit_labels(&[], &ex);
        assert_eq!(audit.checked, 0);
        assert!(audit.violations.is_empty());
    }

    #[test]
    fn instances_survive_a_serde_round_trip() {
        let ex = example();
        let (instances, _) = build_all_sets(std::slice::from_ref(&ex), 2, &mut rng()).unwrap();
        for inst in &instances {
            let json = serde_json::to_string(inst).unwrap();
            let back: TrainingInstance = serde_json::from_str(&json).unwrap();
            assert_eq!(&back, inst);
            back.validate().unwrap();
        }
    }

    #[test]
    fn set_tags_serialize_as_signed_names() {
        assert_eq!(serde_json::to_string(&SetTag::APos).unwrap(), "\"A+\"");
        assert_eq!(serde_json::to_string(&SetTag::ENeg).unwrap(), "\"E-\"");
    }
}
