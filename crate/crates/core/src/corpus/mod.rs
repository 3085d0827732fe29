//! Document model for the distractor setting.
//!
//! An example carries one question, ten paragraphs (two positive, the rest
//! negative), and sentence-level gold evidence references. Training and
//! inference never look at whole examples directly; they look at a
//! [`Passage`], an ordered selection of sentences joined into one string.

mod hotpot;
mod synthetic;
mod token;

pub use hotpot::{load_distractor_json, LoadOutcome};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use token::{
    split_words, tokenize, TokenizedInput, Vocabulary, CLS_ID, CLS_TOKEN, EOS_ID, EOS_TOKEN,
    MARKER_ID, MARKER_TOKEN, PAD_ID, PAD_TOKEN, SEP_ID, SEP_TOKEN, UNK_ID, UNK_TOKEN,
};

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies one sentence as (paragraph id, sentence id). Tuple ordering
/// doubles as the document order used for every deterministic tie-break.
pub type SentenceRef = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Span,
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    #[serde(rename = "type")]
    pub kind: AnswerType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sid: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub pid: usize,
    pub title: String,
    pub sentences: Vec<Sentence>,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHopExample {
    pub qid: String,
    pub question: String,
    pub answer: Answer,
    pub paragraphs: Vec<Paragraph>,
    /// Gold evidence sentences, sorted. Empty when the source has none.
    #[serde(default)]
    pub gold_evidence: Vec<SentenceRef>,
}

impl MultiHopExample {
    /// Structural well-formedness: contiguous ids, valid gold references,
    /// gold only inside positive paragraphs, a nonempty answer for spans.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str| Error::MalformedRecord {
            qid: self.qid.clone(),
            field: field.to_string(),
        };
        if self.question.trim().is_empty() {
            return Err(fail("question"));
        }
        if self.answer.kind == AnswerType::Span && self.answer.text.is_empty() {
            return Err(fail("answer.text"));
        }
        for (i, p) in self.paragraphs.iter().enumerate() {
            if p.pid != i {
                return Err(fail("paragraphs.pid"));
            }
            if p.sentences.is_empty() {
                return Err(fail("paragraphs.sentences"));
            }
            for (j, s) in p.sentences.iter().enumerate() {
                if s.sid != j {
                    return Err(fail("sentences.sid"));
                }
                if s.text.trim().is_empty() {
                    return Err(fail("sentences.text"));
                }
            }
        }
        if !self.paragraphs.iter().any(|p| p.polarity == Polarity::Positive) {
            return Err(fail("paragraphs.polarity"));
        }
        let mut prev: Option<SentenceRef> = None;
        for &(pid, sid) in &self.gold_evidence {
            if let Some(pr) = prev {
                if pr >= (pid, sid) {
                    return Err(fail("gold_evidence.order"));
                }
            }
            prev = Some((pid, sid));
            match self.paragraphs.get(pid) {
                None => return Err(fail("gold_evidence.pid")),
                Some(p) => {
                    if sid >= p.sentences.len() {
                        return Err(fail("gold_evidence.sid"));
                    }
                    if p.polarity != Polarity::Positive {
                        return Err(fail("gold_evidence.polarity"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn positive_pids(&self) -> Vec<usize> {
        self.paragraphs
            .iter()
            .filter(|p| p.polarity == Polarity::Positive)
            .map(|p| p.pid)
            .collect()
    }

    pub fn negative_pids(&self) -> Vec<usize> {
        self.paragraphs
            .iter()
            .filter(|p| p.polarity == Polarity::Negative)
            .map(|p| p.pid)
            .collect()
    }

    pub fn sentence_text(&self, r: SentenceRef) -> Option<&str> {
        self.paragraphs
            .get(r.0)
            .and_then(|p| p.sentences.get(r.1))
            .map(|s| s.text.as_str())
    }

    /// All sentence refs of the given paragraphs in document order.
    pub fn units_of(&self, pids: &[usize]) -> Vec<SentenceRef> {
        let mut sorted = pids.to_vec();
        sorted.sort_unstable();
        let mut out = Vec::new();
        for pid in sorted {
            if let Some(p) = self.paragraphs.get(pid) {
                for s in &p.sentences {
                    out.push((pid, s.sid));
                }
            }
        }
        out
    }

    /// The answer sentence S*: the first sentence, in (pid, sid) order over
    /// positive paragraphs, whose text contains the answer verbatim.
    /// Only span answers have one.
    pub fn answer_sentence(&self) -> Option<SentenceRef> {
        if self.answer.kind != AnswerType::Span {
            return None;
        }
        let mut pids = self.positive_pids();
        pids.sort_unstable();
        for pid in pids {
            for s in &self.paragraphs[pid].sentences {
                if s.text.contains(&self.answer.text) {
                    return Some((pid, s.sid));
                }
            }
        }
        None
    }

    pub fn gold_set(&self) -> BTreeSet<SentenceRef> {
        self.gold_evidence.iter().copied().collect()
    }
}

/// An ordered selection of sentences resolved into one string.
///
/// Invariants: `units`, `boundaries`, and the sentence slices of `text` are
/// parallel; sentences are joined by exactly one space; an empty selection
/// resolves to the empty string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub units: Vec<SentenceRef>,
    pub text: String,
    /// Byte range of each sentence inside `text`.
    pub boundaries: Vec<(usize, usize)>,
}

impl Passage {
    pub fn new<S: AsRef<str>>(units: Vec<SentenceRef>, texts: &[S]) -> Passage {
        assert_eq!(units.len(), texts.len(), "one text per unit");
        let mut text = String::new();
        let mut boundaries = Vec::with_capacity(units.len());
        for (i, t) in texts.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            let start = text.len();
            text.push_str(t.as_ref());
            boundaries.push((start, text.len()));
        }
        Passage { units, text, boundaries }
    }

    pub fn from_example(ex: &MultiHopExample, units: Vec<SentenceRef>) -> Result<Passage> {
        let mut texts = Vec::with_capacity(units.len());
        for &r in &units {
            let t = ex.sentence_text(r).ok_or_else(|| {
                Error::Internal(format!("{}: passage unit ({}, {}) out of range", ex.qid, r.0, r.1))
            })?;
            texts.push(t);
        }
        Ok(Passage::new(units, &texts))
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn sentence_text(&self, i: usize) -> &str {
        let (s, e) = self.boundaries[i];
        &self.text[s..e]
    }

    pub fn position_of(&self, r: SentenceRef) -> Option<usize> {
        self.units.iter().position(|&u| u == r)
    }

    /// Rebuilds a passage from the units in `keep`, preserving this
    /// passage's order. Units not present here are ignored.
    pub fn subset(&self, keep: &BTreeSet<SentenceRef>) -> Passage {
        let mut units = Vec::new();
        let mut texts = Vec::new();
        for (i, &u) in self.units.iter().enumerate() {
            if keep.contains(&u) {
                units.push(u);
                texts.push(self.sentence_text(i).to_string());
            }
        }
        Passage::new(units, &texts)
    }

    /// The units of this passage not in `drop`, as a passage.
    pub fn complement(&self, drop: &BTreeSet<SentenceRef>) -> Passage {
        let keep: BTreeSet<SentenceRef> =
            self.units.iter().copied().filter(|u| !drop.contains(u)).collect();
        self.subset(&keep)
    }
}

/// Finds the answer's byte span in a resolved passage.
///
/// When `anchor` names a sentence, an occurrence inside that sentence is
/// preferred; otherwise the first occurrence wins. Returns
/// [`Error::AnswerNotFound`] when the string does not occur at all.
pub fn locate_answer(
    passage: &Passage,
    answer: &str,
    anchor: Option<SentenceRef>,
) -> Result<(usize, usize)> {
    if answer.is_empty() {
        return Err(Error::AnswerNotFound { answer: String::new() });
    }
    let mut first: Option<(usize, usize)> = None;
    let anchor_bounds = anchor
        .and_then(|r| passage.position_of(r))
        .map(|i| passage.boundaries[i]);
    for (start, m) in passage.text.match_indices(answer) {
        let span = (start, start + m.len());
        if first.is_none() {
            first = Some(span);
        }
        if let Some((lo, hi)) = anchor_bounds {
            if span.0 >= lo && span.1 <= hi {
                return Ok(span);
            }
        } else {
            return Ok(span);
        }
    }
    first.ok_or_else(|| Error::AnswerNotFound { answer: answer.to_string() })
}

/// Reads newline-delimited JSON, one `T` per nonempty line.
pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source: e,
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Writes newline-delimited JSON, one item per line.
pub fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            line: 0,
            source: e,
        })?;
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a corpus written by [`write_ndjson`], validating every example.
pub fn load_corpus(path: &Path) -> Result<Vec<MultiHopExample>> {
    let examples: Vec<MultiHopExample> = read_ndjson(path)?;
    for ex in &examples {
        ex.validate()?;
    }
    Ok(examples)
}

pub fn save_corpus(path: &Path, examples: &[MultiHopExample]) -> Result<()> {
    write_ndjson(path, examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn para(pid: usize, polarity: Polarity, texts: &[&str]) -> Paragraph {
        Paragraph {
            pid,
            title: format!("p{pid}"),
            sentences: texts
                .iter()
                .enumerate()
                .map(|(sid, t)| Sentence { sid, text: t.to_string() })
                .collect(),
            polarity,
        }
    }

    fn example() -> MultiHopExample {
        MultiHopExample {
            qid: "q0".into(),
            question: "When did Korea get independence?".into(),
            answer: Answer { text: "1945".into(), kind: AnswerType::Span },
            paragraphs: vec![
                para(0, Polarity::Positive, &["Korea got independence in 1945.", "Seoul is a city."]),
                para(1, Polarity::Positive, &["The war ended in 1945.", "Busan is a port."]),
                para(2, Polarity::Negative, &["Cats purr.", "Dogs bark."]),
                para(3, Polarity::Negative, &["Rust compiles.", "Tests pass."]),
            ],
            gold_evidence: vec![(0, 0), (1, 0)],
        }
    }

    #[test]
    fn locate_finds_character_span() {
        let p = Passage::new(vec![(0, 0)], &["Korea got independence in 1945."]);
        assert_eq!(locate_answer(&p, "1945", None).unwrap(), (26, 30));
    }

    #[test]
    fn locate_prefers_anchor_sentence() {
        let ex = example();
        let p = Passage::from_example(&ex, ex.units_of(&[0, 1])).unwrap();
        let first = locate_answer(&p, "1945", None).unwrap();
        let anchored = locate_answer(&p, "1945", Some((1, 0))).unwrap();
        assert!(anchored.0 > first.0);
        let (s, e) = p.boundaries[p.position_of((1, 0)).unwrap()];
        assert!(anchored.0 >= s && anchored.1 <= e);
    }

    #[test]
    fn locate_missing_answer_fails() {
        let p = Passage::new(vec![(0, 0)], &["Korea got independence in 1945."]);
        assert!(matches!(
            locate_answer(&p, "Busan", None),
            Err(Error::AnswerNotFound { .. })
        ));
    }

    #[test]
    fn boundaries_slice_back_to_sentences() {
        let ex = example();
        let p = Passage::from_example(&ex, ex.units_of(&[0, 1])).unwrap();
        for (i, &(s, e)) in p.boundaries.iter().enumerate() {
            assert_eq!(&p.text[s..e], ex.sentence_text(p.units[i]).unwrap());
        }
    }

    #[test]
    fn subset_and_complement_partition_units() {
        let ex = example();
        let p = Passage::from_example(&ex, ex.units_of(&[0, 1])).unwrap();
        let keep: BTreeSet<SentenceRef> = [(0, 0), (1, 1)].into_iter().collect();
        let sub = p.subset(&keep);
        let rest = p.complement(&keep);
        assert_eq!(sub.units, vec![(0, 0), (1, 1)]);
        assert_eq!(rest.units, vec![(0, 1), (1, 0)]);
        let mut merged = sub.units.clone();
        merged.extend(&rest.units);
        merged.sort_unstable();
        assert_eq!(merged, p.units);
    }

    #[test]
    fn empty_passage_resolves_to_empty_text() {
        let p = Passage::new(vec![], &[] as &[&str]);
        assert_eq!(p.text, "");
        assert_eq!(p.boundaries.len(), 0);
    }

    #[test]
    fn answer_sentence_scans_positive_paragraphs_in_order() {
        let ex = example();
        assert_eq!(ex.answer_sentence(), Some((0, 0)));
    }

    #[test]
    fn validate_rejects_gold_in_negative_paragraph() {
        let mut ex = example();
        ex.gold_evidence = vec![(2, 0)];
        assert!(matches!(
            ex.validate(),
            Err(Error::MalformedRecord { field, .. }) if field == "gold_evidence.polarity"
        ));
    }

    #[test]
    fn validate_rejects_noncontiguous_pids() {
        let mut ex = example();
        ex.paragraphs[3].pid = 7;
        assert!(ex.validate().is_err());
    }

    #[test]
    fn ndjson_round_trip_preserves_examples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ndjson");
        let examples = vec![example()];
        save_corpus(&path, &examples).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), examples);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ndjson");
        std::fs::write(&path, "{\"qid\": \"x\"}\n").unwrap();
        match load_corpus(&path) {
            Err(Error::Json { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected a json error, got {other:?}"),
        }
    }
}
