//! Whitespace-and-punctuation tokenizer with a closed word vocabulary.
//!
//! Inputs follow one template: `[CLS] question [SEP] passage [EOS]`, capped
//! at a token budget. Overflow drops passage tokens from the end, never
//! question tokens. Passage tokens keep their byte spans in the resolved
//! passage text so answer spans can be mapped in both directions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{MultiHopExample, Passage};
use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const EOS_TOKEN: &str = "[EOS]";
pub const UNK_TOKEN: &str = "[UNK]";
/// Sentence marker appended after each sentence for the selector model.
pub const MARKER_TOKEN: &str = "[S]";

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const UNK_ID: usize = 4;
pub const MARKER_ID: usize = 5;

const SPECIALS: [&str; 6] = [PAD_TOKEN, CLS_TOKEN, SEP_TOKEN, EOS_TOKEN, UNK_TOKEN, MARKER_TOKEN];

/// Characters that always stand alone as tokens.
fn is_punct(c: char) -> bool {
    matches!(
        c,
        '.' | ',' | '!' | '?' | ';' | ':' | '"' | '\'' | '(' | ')' | '[' | ']' | '{' | '}'
    )
}

/// Splits text into lowercased word tokens with their byte spans.
/// Whitespace separates tokens; punctuation characters stand alone.
pub fn split_words(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let flush = |out: &mut Vec<(String, usize, usize)>, text: &str, s: usize, e: usize| {
        if e > s {
            out.push((text[s..e].to_lowercase(), s, e));
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                flush(&mut out, text, s, i);
            }
        } else if is_punct(c) {
            if let Some(s) = start.take() {
                flush(&mut out, text, s, i);
            }
            out.push((c.to_string(), i, i + c.len_utf8()));
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        flush(&mut out, text, s, text.len());
    }
    out
}

/// Closed vocabulary: specials first, then every distinct lowercased word of
/// the corpus in sorted order. Unknown words map to `[UNK]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", from = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build(examples: &[MultiHopExample]) -> Vocabulary {
        let mut words = std::collections::BTreeSet::new();
        for ex in examples {
            for (w, _, _) in split_words(&ex.question) {
                words.insert(w);
            }
            for p in &ex.paragraphs {
                for s in &p.sentences {
                    for (w, _, _) in split_words(&s.text) {
                        words.insert(w);
                    }
                }
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        Vocabulary::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// One encoded input. `ids` holds only real tokens; padding is the model's
/// concern. Passage tokens occupy `[passage_lo, passage_hi)` and `spans[i]`
/// is the byte span of passage token `passage_lo + i` in the passage text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedInput {
    pub ids: Vec<usize>,
    pub passage_lo: usize,
    pub passage_hi: usize,
    pub spans: Vec<(usize, usize)>,
    /// (token position, sentence index in the passage) of each emitted
    /// sentence marker. Empty unless tokenized with markers.
    pub markers: Vec<(usize, usize)>,
    /// True when passage tokens were dropped to fit the budget.
    pub truncated: bool,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token position covering (or next after) the passage byte offset.
    /// `None` once the offset falls beyond the kept tokens.
    pub fn char_to_token(&self, offset: usize) -> Option<usize> {
        for (i, &(_, e)) in self.spans.iter().enumerate() {
            if e > offset {
                return Some(self.passage_lo + i);
            }
        }
        None
    }

    /// Maps an answer byte span to inclusive token positions. The span must
    /// survive truncation whole, otherwise [`Error::TruncatedAnswer`].
    pub fn span_to_tokens(&self, span: (usize, usize)) -> Result<(usize, usize)> {
        let (s, e) = span;
        assert!(e > s, "empty answer span");
        let ts = self.char_to_token(s).ok_or(Error::TruncatedAnswer)?;
        let te = self
            .spans
            .iter()
            .position(|&(_, end)| end >= e)
            .map(|i| self.passage_lo + i)
            .ok_or(Error::TruncatedAnswer)?;
        Ok((ts, te))
    }

    /// Byte span in the passage text covered by inclusive token positions.
    pub fn tokens_to_span(&self, ts: usize, te: usize) -> (usize, usize) {
        let s = self.spans[ts - self.passage_lo].0;
        let e = self.spans[te - self.passage_lo].1;
        (s, e)
    }
}

/// Encodes a (question, passage) pair under the token budget.
///
/// With `with_markers`, a `[S]` token follows each sentence; markers count
/// toward the budget and are recorded with their sentence index. An empty
/// passage encodes to `[CLS] question [SEP] [EOS]`.
pub fn tokenize(
    question: &str,
    passage: &Passage,
    vocab: &Vocabulary,
    budget: usize,
    with_markers: bool,
) -> Result<TokenizedInput> {
    let mut ids = vec![CLS_ID];
    for (w, _, _) in split_words(question) {
        ids.push(vocab.id(&w));
    }
    ids.push(SEP_ID);
    let needed = ids.len() + 1;
    if needed > budget {
        return Err(Error::BudgetTooSmall { needed, budget });
    }
    let room = budget - needed;

    // Full passage token stream first, then keep a prefix.
    let mut ptok: Vec<(usize, usize, usize, Option<usize>)> = Vec::new();
    for i in 0..passage.len() {
        let (lo, _) = passage.boundaries[i];
        let sent = passage.sentence_text(i);
        for (w, s, e) in split_words(sent) {
            ptok.push((vocab.id(&w), lo + s, lo + e, None));
        }
        if with_markers {
            let end = passage.boundaries[i].1;
            ptok.push((MARKER_ID, end, end, Some(i)));
        }
    }
    let truncated = ptok.len() > room;
    ptok.truncate(room);

    let passage_lo = ids.len();
    let mut spans = Vec::with_capacity(ptok.len());
    let mut markers = Vec::new();
    for (id, s, e, sent_idx) in ptok {
        if let Some(si) = sent_idx {
            markers.push((ids.len(), si));
        }
        spans.push((s, e));
        ids.push(id);
    }
    let passage_hi = ids.len();
    ids.push(EOS_ID);

    Ok(TokenizedInput { ids, passage_lo, passage_hi, spans, markers, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(words: &[&str]) -> Vocabulary {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.to_string()));
        Vocabulary::from(tokens)
    }

    fn passage(texts: &[&str]) -> Passage {
        let units = (0..texts.len()).map(|i| (0usize, i)).collect();
        Passage::new(units, texts)
    }

    #[test]
    fn special_ids_are_dense_and_distinct() {
        let v = vocab_of(&[]);
        let ids = [PAD_ID, CLS_ID, SEP_ID, EOS_ID, UNK_ID, MARKER_ID];
        let mut sorted = ids;
        sorted.sort_unstable();
        assert_eq!(sorted, [0, 1, 2, 3, 4, 5]);
        assert_eq!(v.id(PAD_TOKEN), PAD_ID);
        assert_eq!(v.id(MARKER_TOKEN), MARKER_ID);
        assert_eq!(v.token(UNK_ID), UNK_TOKEN);
    }

    #[test]
    fn split_separates_punctuation_and_lowercases() {
        let words: Vec<String> =
            split_words("The war ended, in 1945.").into_iter().map(|(w, _, _)| w).collect();
        assert_eq!(words, ["the", "war", "ended", ",", "in", "1945", "."]);
    }

    #[test]
    fn empty_passage_is_skeleton_only() {
        let v = vocab_of(&["when", "?"]);
        let tok = tokenize("When?", &passage(&[]), &v, 16, false).unwrap();
        assert_eq!(tok.ids, vec![CLS_ID, v.id("when"), v.id("?"), SEP_ID, EOS_ID]);
        assert_eq!(tok.passage_lo, tok.passage_hi);
        assert!(!tok.truncated);
    }

    #[test]
    fn long_passage_fills_budget_exactly() {
        let v = vocab_of(&["q", "a", "b"]);
        let text = vec!["a b a b a b a b a b"; 10];
        let tok = tokenize("q", &passage(&text), &v, 32, false).unwrap();
        assert_eq!(tok.len(), 32);
        assert!(tok.truncated);
        for w in tok.spans.windows(2) {
            assert!(w[0].0 <= w[1].0, "alignment must be monotone");
        }
    }

    #[test]
    fn truncated_answer_span_is_an_error() {
        let v = vocab_of(&["q", "a", "answer"]);
        let texts = vec!["a a a a a a a a", "the answer sits here"];
        let p = passage(&texts);
        let lo = p.text.find("answer").unwrap();
        let tok = tokenize("q", &p, &v, 8, false).unwrap();
        assert!(tok.truncated);
        assert!(matches!(
            tok.span_to_tokens((lo, lo + "answer".len())),
            Err(Error::TruncatedAnswer)
        ));
    }

    #[test]
    fn budget_too_small_for_question_is_an_error() {
        let v = vocab_of(&["a"]);
        let p = passage(&["a"]);
        assert!(matches!(
            tokenize("a a a a a a", &p, &v, 6, false),
            Err(Error::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn span_token_round_trip() {
        let v = vocab_of(&["when", "korea", "got", "independence", "in", "1945", ".", "did"]);
        let p = passage(&["Korea got independence in 1945."]);
        let tok = tokenize("When did Korea", &p, &v, 32, false).unwrap();
        let (ts, te) = tok.span_to_tokens((26, 30)).unwrap();
        assert_eq!(ts, te);
        assert_eq!(tok.tokens_to_span(ts, te), (26, 30));
        assert_eq!(tok.ids[ts], v.id("1945"));
    }

    #[test]
    fn markers_follow_each_sentence() {
        let v = vocab_of(&["q", "cats", "purr", ".", "dogs", "bark"]);
        let p = passage(&["Cats purr.", "Dogs bark."]);
        let tok = tokenize("q", &p, &v, 32, true).unwrap();
        assert_eq!(tok.markers.len(), 2);
        assert_eq!(tok.markers[0].1, 0);
        assert_eq!(tok.markers[1].1, 1);
        for &(pos, _) in &tok.markers {
            assert_eq!(tok.ids[pos], MARKER_ID);
        }
        let n_marker = tok.ids.iter().filter(|&&id| id == MARKER_ID).count();
        assert_eq!(n_marker, 2);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = vocab_of(&["known"]);
        let p = passage(&["known stranger"]);
        let tok = tokenize("known", &p, &v, 16, false).unwrap();
        assert_eq!(tok.ids[tok.passage_lo], v.id("known"));
        assert_eq!(tok.ids[tok.passage_lo + 1], UNK_ID);
    }

    #[test]
    fn vocabulary_build_is_sorted_and_deduplicated() {
        let ex = crate::corpus::MultiHopExample {
            qid: "q".into(),
            question: "zebra apple".into(),
            answer: crate::corpus::Answer {
                text: "apple".into(),
                kind: crate::corpus::AnswerType::Span,
            },
            paragraphs: vec![crate::corpus::Paragraph {
                pid: 0,
                title: "t".into(),
                sentences: vec![crate::corpus::Sentence { sid: 0, text: "Apple zebra apple.".into() }],
                polarity: crate::corpus::Polarity::Positive,
            }],
            gold_evidence: vec![],
        };
        let v = Vocabulary::build(std::slice::from_ref(&ex));
        assert_eq!(v.len(), SPECIALS.len() + 3);
        assert!(v.id("apple") < v.id("zebra"));
        assert_eq!(v.id("apple"), v.id("Apple".to_lowercase().as_str()));
    }
}
