//! Synthetic distractor-setting corpus.
//!
//! Each example is a chain of facts `The r of X is Y.` whose hops are split
//! across the two positive paragraphs; every other sentence is a filler fact
//! over the same closed vocabulary. Filler subjects and objects never use
//! the chain's entities, so the answer string occurs exactly once in the
//! whole example and removing any hop breaks the chain.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Answer, AnswerType, MultiHopExample, Paragraph, Polarity, Sentence};
use crate::error::{Error, Result};

/// Relation words. None of these contains a six-letter window matching the
/// consonant-vowel shape of entity names, so an entity string can never
/// appear inside a relation word.
const RELATIONS: [&str; 12] = [
    "birthplace", "employer", "leader", "anthem", "emblem", "motto", "founder", "mascot",
    "patron", "harbor", "summit", "garrison",
];

const ENTITY_POOL_SIZE: usize = 4096;
const CONSONANTS: [char; 14] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

/// Pronounceable six-letter names (CVCVCV) drawn from a hashed counter.
/// Entities are pairwise distinct and, being all the same length, one can
/// never be a substring of another.
fn entity_pool() -> &'static [String] {
    static POOL: OnceLock<Vec<String>> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut names = Vec::with_capacity(ENTITY_POOL_SIZE);
        let mut seen = HashSet::new();
        let mut k: u64 = 0;
        while names.len() < ENTITY_POOL_SIZE {
            // splitmix64 scrambles the counter so names vary early.
            let mut h = k.wrapping_add(0x9e37_79b9_7f4a_7c15);
            h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            h ^= h >> 31;
            let mut name = String::with_capacity(6);
            for pos in 0..6 {
                if pos % 2 == 0 {
                    name.push(CONSONANTS[(h % 14) as usize]);
                    h /= 14;
                } else {
                    name.push(VOWELS[(h % 5) as usize]);
                    h /= 5;
                }
            }
            if seen.insert(name.clone()) {
                names.push(name);
            }
            k += 1;
        }
        names
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_examples: usize,
    /// Facts in the reasoning chain (hops). The answer is the tail entity.
    pub chain_length: usize,
    /// Negative paragraphs per example.
    pub n_distractors: usize,
    pub sentences_per_paragraph: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_examples: 100,
            chain_length: 2,
            n_distractors: 8,
            sentences_per_paragraph: 3,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(Error::Config("n_examples must be positive".into()));
        }
        if self.chain_length < 2 {
            return Err(Error::Config("chain_length must be at least 2".into()));
        }
        if self.chain_length > RELATIONS.len() {
            return Err(Error::Config(format!(
                "chain_length {} exceeds the {} available relations",
                self.chain_length,
                RELATIONS.len()
            )));
        }
        if self.chain_length + 1 > ENTITY_POOL_SIZE / 2 {
            return Err(Error::Config("chain_length leaves too few filler entities".into()));
        }
        if self.n_distractors < 2 {
            return Err(Error::Config("n_distractors must be at least 2".into()));
        }
        let per_positive = self.chain_length.div_ceil(2);
        if self.sentences_per_paragraph < per_positive {
            return Err(Error::Config(format!(
                "sentences_per_paragraph {} cannot hold {} chain facts",
                self.sentences_per_paragraph, per_positive
            )));
        }
        Ok(())
    }
}

fn fact(rel: &str, subj: &str, obj: &str) -> String {
    format!("The {rel} of {subj} is {obj}.")
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let (sampled, _) = idx.partial_shuffle(rng, k);
    sampled.to_vec()
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<MultiHopExample>> {
    cfg.validate()?;
    let entities = entity_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_examples);

    for i in 0..cfg.n_examples {
        let qid = format!("synth-{}-{i:05}", cfg.seed);
        let l = cfg.chain_length;

        let chain_ents = sample_distinct(&mut rng, entities.len(), l + 1);
        let chain_rels = sample_distinct(&mut rng, RELATIONS.len(), l);
        let chain_set: HashSet<usize> = chain_ents.iter().copied().collect();
        let filler_ents: Vec<usize> =
            (0..entities.len()).filter(|e| !chain_set.contains(e)).collect();

        // One (relation, subject) pair states at most one fact per example.
        let mut stated: HashSet<(usize, usize)> = HashSet::new();
        for k in 0..l {
            stated.insert((chain_rels[k], chain_ents[k]));
        }

        let fill = |rng: &mut ChaCha8Rng, stated: &mut HashSet<(usize, usize)>| -> Result<String> {
            for _ in 0..10_000 {
                let r = rng.random_range(0..RELATIONS.len());
                let s = filler_ents[rng.random_range(0..filler_ents.len())];
                if stated.insert((r, s)) {
                    let o = filler_ents[rng.random_range(0..filler_ents.len())];
                    return Ok(fact(RELATIONS[r], &entities[s], &entities[o]));
                }
            }
            Err(Error::Internal("filler pool exhausted".into()))
        };

        // Paragraph texts before shuffling; chain fact k lives in positive
        // paragraph k mod 2. `true` marks chain sentences.
        let n_paragraphs = 2 + cfg.n_distractors;
        let mut drafts: Vec<(Polarity, Vec<(String, bool)>)> = Vec::with_capacity(n_paragraphs);
        for p in 0..2 {
            let mut sents: Vec<(String, bool)> = Vec::new();
            for k in (p..l).step_by(2) {
                let text = fact(
                    RELATIONS[chain_rels[k]],
                    &entities[chain_ents[k]],
                    &entities[chain_ents[k + 1]],
                );
                sents.push((text, true));
            }
            while sents.len() < cfg.sentences_per_paragraph {
                sents.push((fill(&mut rng, &mut stated)?, false));
            }
            sents.shuffle(&mut rng);
            drafts.push((Polarity::Positive, sents));
        }
        for _ in 0..cfg.n_distractors {
            let mut sents = Vec::with_capacity(cfg.sentences_per_paragraph);
            for _ in 0..cfg.sentences_per_paragraph {
                sents.push((fill(&mut rng, &mut stated)?, false));
            }
            drafts.push((Polarity::Negative, sents));
        }
        drafts.shuffle(&mut rng);

        let mut paragraphs = Vec::with_capacity(n_paragraphs);
        let mut gold = Vec::new();
        for (pid, (polarity, sents)) in drafts.into_iter().enumerate() {
            let sentences: Vec<Sentence> = sents
                .iter()
                .enumerate()
                .map(|(sid, (text, _))| Sentence { sid, text: text.clone() })
                .collect();
            for (sid, (_, is_chain)) in sents.iter().enumerate() {
                if *is_chain {
                    gold.push((pid, sid));
                }
            }
            paragraphs.push(Paragraph {
                pid,
                title: format!("{qid}-p{pid}"),
                sentences,
                polarity,
            });
        }
        gold.sort_unstable();

        // "What is the r_l of the r_{l-1} of ... the r_1 of e_0?"
        let mut inner = entities[chain_ents[0]].clone();
        for k in 0..l {
            inner = format!("the {} of {}", RELATIONS[chain_rels[k]], inner);
        }
        let question = format!("What is {inner}?");
        let answer = Answer { text: entities[chain_ents[l]].clone(), kind: AnswerType::Span };

        let ex = MultiHopExample { qid, question, answer, paragraphs, gold_evidence: gold };
        debug_assert!(ex.validate().is_ok());
        out.push(ex);
    }
    Ok(out)
}
