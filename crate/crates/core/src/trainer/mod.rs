//! The delayed curriculum.
//!
//! Epochs 1..=K train on A+, A-, and E- (the E- term uses the configured
//! regularizer). At the end of epoch K the frozen snapshot extracts pseudo
//! evidence sets from every A+ instance; epochs K+1.. train on all four
//! sets, the extracted E+ entering the answer loss. With
//! `regularizer=none` both E sets are dropped (ablation of the evidence
//! supervision); with `uniform_kl` the decorrelation term is replaced by
//! the uniform pull (keeping E+ extraction).

mod loss;

pub use loss::{
    answer_loss, bias_decorrelation_loss, delayed_step, merge_grads, prepare_instance,
    uniform_kl_regularizer, ClampCounter, Prepared, LOG_EPS,
};

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{locate_answer, AnswerType, Vocabulary};
use crate::error::{Error, Result};
use crate::interpreter::{extract, EvidenceSet, InterpreterConfig, ModelOracle};
use crate::model::{Adam, EncoderConfig, EncoderInput, QaModel};
use crate::setgen::{
    Answerability, ClassLabel, Evidentiality, SetTag, TrainingInstance,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// Answerability only: no E- term, no E+ extraction.
    None,
    /// Uniform pull on the target span heads over E-.
    UniformKl,
    /// Biased-head cross-entropy minus the detached divergence term.
    BiasDecorrelate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_total: usize,
    /// Pseudo-evidence extraction epoch; the E+ term activates after it.
    pub k_epochs: usize,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub seed: u64,
    pub token_budget: usize,
    /// Let biased-head gradients reach the encoder (off by default).
    pub bias_backprop_encoder: bool,
    pub interpreter: InterpreterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            epochs_total: 6,
            k_epochs: 3,
            lambda: 0.01,
            regularizer: Regularizer::BiasDecorrelate,
            seed: 7,
            token_budget: 128,
            bias_backprop_encoder: false,
            interpreter: InterpreterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_epochs < 1 || self.k_epochs >= self.epochs_total {
            return Err(Error::Config(format!(
                "k_epochs must satisfy 1 <= K < epochs_total (K={}, total={})",
                self.k_epochs, self.epochs_total
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        self.interpreter.validate()
    }
}

/// Per-epoch numbers, one CSV row each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub n_apos: usize,
    pub n_aneg: usize,
    pub n_eneg: usize,
    pub n_epos: usize,
    /// Mean answer loss over A+, A-, and active E+ instances.
    pub answer_loss: f64,
    /// Mean regularizer value over active E- instances (R or R-hat).
    pub regularizer: f64,
    /// Mean per-instance total.
    pub total: f64,
}

pub const LOG_HEADER: &str = "epoch,n_apos,n_aneg,n_eneg,n_epos,answer_loss,regularizer,total";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.n_apos,
            self.n_aneg,
            self.n_eneg,
            self.n_epos,
            self.answer_loss,
            self.regularizer,
            self.total
        )
    }
}

pub struct TrainOutcome {
    pub model: QaModel,
    pub logs: Vec<EpochLog>,
    /// Extraction output at epoch K (empty for regularizer=none).
    pub evidence: Vec<EvidenceSet>,
    /// E+ instances derived from `evidence`.
    pub epos: Vec<Prepared>,
    /// Instances dropped because the gold span fell outside the budget.
    pub dropped_truncated: usize,
    /// A+ instances that failed extraction at epoch K.
    pub extraction_failures: usize,
    /// Probability-floor clamps seen during training.
    pub clamp_hits: usize,
}

/// Builds an evidence-positive training instance from extraction output.
pub fn epos_instance(apos: &TrainingInstance, ev: &EvidenceSet) -> Result<TrainingInstance> {
    let keep = ev.member_set();
    let passage = apos.passage.subset(&keep);
    let answer_span = match apos.answer_kind {
        AnswerType::Span => {
            Some(locate_answer(&passage, &apos.answer_text, Some(ev.members[0]))?)
        }
        _ => None,
    };
    let inst = TrainingInstance {
        qid: apos.qid.clone(),
        question: apos.question.clone(),
        answer_text: apos.answer_text.clone(),
        answer_kind: apos.answer_kind,
        passage,
        answerability: Answerability::Answerable,
        evidentiality: Evidentiality::Positive,
        neg_type: None,
        answer_span,
        class_label: apos.class_label,
        set: SetTag::EPos,
    };
    inst.validate()?;
    Ok(inst)
}

enum Contribution {
    Answer,
    Evidence,
}

fn contribution(tag: SetTag) -> Contribution {
    match tag {
        SetTag::APos | SetTag::ANeg | SetTag::EPos => Contribution::Answer,
        SetTag::ENeg => Contribution::Evidence,
    }
}

pub fn run_curriculum(
    instances: &[TrainingInstance],
    vocab: &Vocabulary,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    enc_cfg.validate()?;

    let mut model = QaModel::new(enc_cfg, cfg.seed)?;
    model.bias_backprop_encoder = cfg.bias_backprop_encoder;
    let mut adam = Adam::new(cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));

    let mut dropped_truncated = 0usize;
    let mut base: Vec<Prepared> = Vec::with_capacity(instances.len());
    for inst in instances {
        inst.validate()?;
        if inst.set_tag() == SetTag::EPos {
            return Err(Error::Config(
                "input instances must not contain E+; it is extracted during training".into(),
            ));
        }
        match prepare_instance(inst, vocab, cfg.token_budget) {
            Ok(p) => base.push(p),
            Err(Error::TruncatedAnswer) => dropped_truncated += 1,
            Err(e) => return Err(e),
        }
    }

    let use_evidence = cfg.regularizer != Regularizer::None;
    let mut epos: Vec<Prepared> = Vec::new();
    let mut evidence: Vec<EvidenceSet> = Vec::new();
    let mut extraction_failures = 0usize;
    let mut clamp = ClampCounter::default();
    let mut logs = Vec::with_capacity(cfg.epochs_total);

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 1..=cfg.epochs_total {
        let epos_active = use_evidence && delayed_step(epoch, cfg.k_epochs) > 0.0;

        // Indices into `base` (>= 0) and `epos` (< 0 offset by 1).
        let mut order: Vec<isize> = Vec::new();
        for (i, p) in base.iter().enumerate() {
            match p.inst.set_tag() {
                SetTag::ENeg if !use_evidence => {}
                _ => order.push(i as isize),
            }
        }
        if epos_active {
            order.extend((0..epos.len()).map(|i| -1 - i as isize));
        }
        order.shuffle(&mut shuffle_rng);

        let mut counts = [0usize; 4];
        let mut sum_answer = 0.0;
        let mut sum_reg = 0.0;
        let mut sum_total = 0.0;
        let mut n_answer = 0usize;
        let mut n_reg = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            model.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for &ix in chunk {
                let prep =
                    if ix >= 0 { &base[ix as usize] } else { &epos[(-1 - ix) as usize] };
                let tag = prep.inst.set_tag();
                counts[match tag {
                    SetTag::APos => 0,
                    SetTag::ANeg => 1,
                    SetTag::ENeg => 2,
                    SetTag::EPos => 3,
                }] += 1;

                let (out, trace) = model.forward(&EncoderInput::from(&prep.tok))?;
                let (value, mut grads) = match contribution(tag) {
                    Contribution::Answer => {
                        let (v, g) = answer_loss(&out, prep, &mut clamp);
                        sum_answer += v;
                        n_answer += 1;
                        (v, g)
                    }
                    Contribution::Evidence => {
                        let (v, g) = match cfg.regularizer {
                            Regularizer::UniformKl => uniform_kl_regularizer(&out, prep),
                            Regularizer::BiasDecorrelate => {
                                bias_decorrelation_loss(&out, prep, cfg.lambda, &mut clamp)
                            }
                            Regularizer::None => unreachable!("E- filtered out above"),
                        };
                        sum_reg += v;
                        n_reg += 1;
                        (v, g)
                    }
                };
                sum_total += value;
                grads.scale(scale);
                model.backward(&trace, &grads);
            }
            adam.step(&mut model.trainable_params_mut())?;
        }

        let n_total = n_answer + n_reg;
        logs.push(EpochLog {
            epoch,
            n_apos: counts[0],
            n_aneg: counts[1],
            n_eneg: counts[2],
            n_epos: counts[3],
            answer_loss: if n_answer > 0 { sum_answer / n_answer as f64 } else { 0.0 },
            regularizer: if n_reg > 0 { sum_reg / n_reg as f64 } else { 0.0 },
            total: if n_total > 0 { sum_total / n_total as f64 } else { 0.0 },
        });

        if epoch == cfg.k_epochs && use_evidence {
            let oracle = ModelOracle::new(&model, vocab, cfg.token_budget);
            for prep in base.iter().filter(|p| p.inst.set_tag() == SetTag::APos) {
                if prep.inst.class_label != ClassLabel::Span {
                    extraction_failures += 1;
                    continue;
                }
                let ev = match extract(&oracle, &prep.inst, &cfg.interpreter) {
                    Ok(ev) => ev,
                    Err(_) => {
                        extraction_failures += 1;
                        continue;
                    }
                };
                let made = epos_instance(&prep.inst, &ev)
                    .and_then(|inst| prepare_instance(&inst, vocab, cfg.token_budget));
                match made {
                    Ok(p) => {
                        evidence.push(ev);
                        epos.push(p);
                    }
                    Err(_) => extraction_failures += 1,
                }
            }
            evidence.sort_by(|a, b| a.qid.cmp(&b.qid));
            epos.sort_by(|a, b| a.inst.qid.cmp(&b.inst.qid));
        }

        if let Some(dir) = out_dir {
            let path = dir.join(format!("checkpoint-epoch{epoch}.ckpt"));
            model.save(&path, vocab)?;
        }
    }

    if let Some(dir) = out_dir {
        model.save(&dir.join("model.ckpt"), vocab)?;
        let mut csv = String::from(LOG_HEADER);
        csv.push('\n');
        for log in &logs {
            csv.push_str(&log.csv_row());
            csv.push('\n');
        }
        let log_path = dir.join("train_log.csv");
        let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        f.write_all(csv.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        crate::corpus::write_ndjson(&dir.join("eplus.ndjson"), &evidence)?;
    }

    Ok(TrainOutcome {
        model,
        logs,
        evidence,
        epos,
        dropped_truncated,
        extraction_failures,
        clamp_hits: clamp.hits,
    })
}
