//! Loader for distractor-format JSON: a top-level array of records with
//! `_id`, `question`, `answer`, `context` (ten `[title, [sentences]]`
//! pairs), and `supporting_facts` (`[title, sid]` pairs).
//!
//! Structural defects inside an otherwise parseable record (wrong paragraph
//! count, missing positives, an unfindable span answer) skip the record and
//! count it; a record missing a required field is an error.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::corpus::{Answer, AnswerType, MultiHopExample, Paragraph, Polarity, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub examples: Vec<MultiHopExample>,
    /// Records dropped for structural reasons.
    pub skipped_records: usize,
    /// Supporting facts dropped for out-of-range sentence ids.
    pub dropped_facts: usize,
}

fn field<'a>(rec: &'a Value, qid: &str, name: &str) -> Result<&'a Value> {
    rec.get(name).ok_or_else(|| Error::MalformedRecord {
        qid: qid.to_string(),
        field: name.to_string(),
    })
}

fn as_str<'a>(v: &'a Value, qid: &str, name: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::MalformedRecord {
        qid: qid.to_string(),
        field: name.to_string(),
    })
}

pub fn load_distractor_json(path: &Path) -> Result<LoadOutcome> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if raw.trim().is_empty() {
        return Ok(LoadOutcome::default());
    }
    let root: Value = serde_json::from_str(&raw).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        line: e.line(),
        source: e,
    })?;
    let records = root.as_array().ok_or_else(|| Error::MalformedRecord {
        qid: "<root>".to_string(),
        field: "top-level array".to_string(),
    })?;

    let mut out = LoadOutcome::default();
    for rec in records {
        let qid = rec
            .get("_id")
            .or_else(|| rec.get("id"))
            .and_then(Value::as_str)
            .ok_or_else(|| Error::MalformedRecord {
                qid: "<unknown>".to_string(),
                field: "_id".to_string(),
            })?
            .to_string();

        let question = as_str(field(rec, &qid, "question")?, &qid, "question")?.to_string();
        let answer_text = as_str(field(rec, &qid, "answer")?, &qid, "answer")?.to_string();
        let context = field(rec, &qid, "context")?
            .as_array()
            .ok_or_else(|| Error::MalformedRecord { qid: qid.clone(), field: "context".into() })?;
        let facts = field(rec, &qid, "supporting_facts")?
            .as_array()
            .ok_or_else(|| Error::MalformedRecord {
                qid: qid.clone(),
                field: "supporting_facts".into(),
            })?;

        if context.len() != 10 {
            out.skipped_records += 1;
            continue;
        }

        // Paragraphs keep source order; empty sentences are dropped with
        // sentence ids remapped, so supporting facts are mapped through.
        let mut paragraphs = Vec::with_capacity(context.len());
        let mut title_to_pid: HashMap<&str, usize> = HashMap::new();
        let mut sid_maps: Vec<HashMap<usize, usize>> = Vec::with_capacity(context.len());
        for (pid, entry) in context.iter().enumerate() {
            let pair = entry.as_array().filter(|a| a.len() == 2).ok_or_else(|| {
                Error::MalformedRecord { qid: qid.clone(), field: format!("context[{pid}]") }
            })?;
            let title = as_str(&pair[0], &qid, "context.title")?;
            let sents = pair[1].as_array().ok_or_else(|| Error::MalformedRecord {
                qid: qid.clone(),
                field: format!("context[{pid}].sentences"),
            })?;
            let mut sentences = Vec::with_capacity(sents.len());
            let mut sid_map = HashMap::new();
            for (raw_sid, s) in sents.iter().enumerate() {
                let text = as_str(s, &qid, "context.sentence")?.trim().to_string();
                if text.is_empty() {
                    continue;
                }
                sid_map.insert(raw_sid, sentences.len());
                sentences.push(Sentence { sid: sentences.len(), text });
            }
            title_to_pid.insert(title, pid);
            sid_maps.push(sid_map);
            paragraphs.push(Paragraph {
                pid,
                title: title.to_string(),
                sentences,
                polarity: Polarity::Negative,
            });
        }

        let mut gold = Vec::new();
        let mut positives = std::collections::BTreeSet::new();
        let mut fact_ok = true;
        for f in facts {
            let pair = f.as_array().filter(|a| a.len() == 2);
            let (title, raw_sid) = match pair {
                Some(p) => match (p[0].as_str(), p[1].as_u64()) {
                    (Some(t), Some(s)) => (t, s as usize),
                    _ => {
                        fact_ok = false;
                        break;
                    }
                },
                None => {
                    fact_ok = false;
                    break;
                }
            };
            let Some(&pid) = title_to_pid.get(title) else {
                out.dropped_facts += 1;
                continue;
            };
            positives.insert(pid);
            match sid_maps[pid].get(&raw_sid) {
                Some(&sid) => gold.push((pid, sid)),
                None => out.dropped_facts += 1,
            }
        }
        if !fact_ok {
            return Err(Error::MalformedRecord { qid, field: "supporting_facts".into() });
        }

        // Two positive paragraphs, each contributing at least one surviving
        // gold sentence; evidence must genuinely span both.
        let gold_pids: std::collections::BTreeSet<usize> =
            gold.iter().map(|&(pid, _)| pid).collect();
        if positives.len() != 2 || gold_pids != positives {
            out.skipped_records += 1;
            continue;
        }
        for &pid in &positives {
            paragraphs[pid].polarity = Polarity::Positive;
        }

        let kind = match answer_text.as_str() {
            "yes" => AnswerType::Yes,
            "no" => AnswerType::No,
            _ => AnswerType::Span,
        };
        let ex = MultiHopExample {
            qid,
            question,
            answer: Answer { text: answer_text, kind },
            paragraphs,
            gold_evidence: {
                gold.sort_unstable();
                gold.dedup();
                gold
            },
        };

        // A span answer must be locatable in some positive paragraph and
        // every paragraph must have kept at least one sentence.
        let span_ok = ex.answer_sentence().is_some() || ex.answer.kind != AnswerType::Span;
        let structure_ok = ex.paragraphs.iter().all(|p| !p.sentences.is_empty());
        if !span_ok || !structure_ok || ex.validate().is_err() {
            out.skipped_records += 1;
            continue;
        }
        out.examples.push(ex);
    }
    Ok(out)
}
