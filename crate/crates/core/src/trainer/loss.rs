//! Loss terms and their gradients with respect to head logits.
//!
//! Working in logit space keeps the softmax chain rule analytic: for
//! cross-entropy the logit gradient is `p - onehot(gold)`, for the
//! uniform-pull regularizer it is `p (ln p + H(p))`, and for the detached
//! decorrelation term it is `lambda (p_hat - p)` on the target heads. All
//! formulas vanish automatically outside the passage support, where the
//! masked softmax put exactly zero mass.

use ndarray::Array1;

use crate::corpus::{tokenize, AnswerType, TokenizedInput, Vocabulary};
use crate::error::Result;
use crate::model::{AnswerTarget, HeadGrads, ModelOutput, N_CLASSES};
use crate::setgen::{ClassLabel, TrainingInstance};

/// Probability floor under the logarithm. Hits are counted, not hidden.
pub const LOG_EPS: f64 = 1e-12;

fn safe_ln(p: f64, clamped: &mut usize) -> f64 {
    if p < LOG_EPS {
        *clamped += 1;
        LOG_EPS.ln()
    } else {
        p.ln()
    }
}

/// An instance with its encoding and resolved supervision target.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub inst: TrainingInstance,
    pub tok: TokenizedInput,
    /// Gold target for answerable instances; `None` for unanswerable.
    pub target: Option<AnswerTarget>,
}

/// Encodes an instance and maps its answer span to token positions.
/// Fails with [`crate::Error::TruncatedAnswer`] when the gold span did not
/// survive the budget.
pub fn prepare_instance(
    inst: &TrainingInstance,
    vocab: &Vocabulary,
    budget: usize,
) -> Result<Prepared> {
    let tok = tokenize(&inst.question, &inst.passage, vocab, budget, false)?;
    let target = match inst.class_label {
        ClassLabel::Span => {
            let span = inst.answer_span.expect("validated span instance has a span");
            let (ts, te) = tok.span_to_tokens(span)?;
            Some(AnswerTarget::Span(ts, te))
        }
        ClassLabel::Yes => Some(AnswerTarget::Yes),
        ClassLabel::No => Some(AnswerTarget::No),
        ClassLabel::None => None,
    };
    Ok(Prepared { inst: inst.clone(), tok, target })
}

/// Counts of probability-floor clamps, for honest logging.
#[derive(Debug, Default, Clone, Copy)]
pub struct ClampCounter {
    pub hits: usize,
}

/// Answer loss: span instances pay cross-entropy on start, end, and class;
/// yes/no on class; unanswerable on the none class.
pub fn answer_loss(
    out: &ModelOutput,
    prep: &Prepared,
    clamp: &mut ClampCounter,
) -> (f64, HeadGrads) {
    let mut grads = HeadGrads::default();
    let c = prep.inst.class_label.index();

    let mut d_cls = out.pcls;
    d_cls[c] -= 1.0;
    grads.d_cls = Some(d_cls);
    let mut loss = -safe_ln(out.pcls[c], &mut clamp.hits);

    if let Some(AnswerTarget::Span(ts, te)) = prep.target {
        loss -= safe_ln(out.ps[ts], &mut clamp.hits);
        loss -= safe_ln(out.pe[te], &mut clamp.hits);
        let mut d_s = out.ps.clone();
        d_s[ts] -= 1.0;
        let mut d_e = out.pe.clone();
        d_e[te] -= 1.0;
        grads.d_f_start = Some(d_s);
        grads.d_f_end = Some(d_e);
    }
    (loss, grads)
}

fn kl_from_uniform(p: &Array1<f64>, support_size: f64) -> f64 {
    // KL(P || U) over the support = sum p ln p + ln m.
    let neg_entropy: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    neg_entropy + support_size.ln()
}

fn kl_from_uniform_grad(p: &Array1<f64>) -> Array1<f64> {
    let neg_entropy: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    p.mapv(|v| if v > 0.0 { v * (v.ln() - neg_entropy) } else { 0.0 })
}

/// Pull the target span distributions toward uniform over the support:
/// `KL(Ps||U) + KL(Pe||U)`. Non-negative; zero on non-span instances and
/// empty supports.
pub fn uniform_kl_regularizer(out: &ModelOutput, prep: &Prepared) -> (f64, HeadGrads) {
    if prep.inst.answer_kind != AnswerType::Span {
        return (0.0, HeadGrads::default());
    }
    let m = out.support.iter().filter(|&&b| b).count();
    if m == 0 {
        return (0.0, HeadGrads::default());
    }
    let m = m as f64;
    let value = kl_from_uniform(&out.ps, m) + kl_from_uniform(&out.pe, m);
    let grads = HeadGrads {
        d_f_start: Some(kl_from_uniform_grad(&out.ps)),
        d_f_end: Some(kl_from_uniform_grad(&out.pe)),
        ..Default::default()
    };
    (value, grads)
}

fn kl_divergence(p_hat: &Array1<f64>, p: &Array1<f64>, clamp: &mut ClampCounter) -> f64 {
    let mut kl = 0.0;
    for (&ph, &pv) in p_hat.iter().zip(p.iter()) {
        if ph > 0.0 {
            kl += ph * (safe_ln(ph, &mut clamp.hits) - safe_ln(pv, &mut clamp.hits));
        }
    }
    kl
}

/// Decorrelation term for evidence-insufficient instances:
///
/// ```text
/// R_hat = CE(P_hat, A) - lambda [KL(P_hat_s || Ps) + KL(P_hat_e || Pe)]
/// ```
///
/// `P_hat` is read as a constant in the KL term, so that term carries no
/// gradient for the biased heads; its gradient on the target-head logits is
/// `lambda (p_hat - p)` and flows into the encoder. The CE term supervises
/// the biased heads only. Yes/no instances have no span target and
/// contribute nothing.
pub fn bias_decorrelation_loss(
    out: &ModelOutput,
    prep: &Prepared,
    lambda: f64,
    clamp: &mut ClampCounter,
) -> (f64, HeadGrads) {
    let Some(AnswerTarget::Span(ts, te)) = prep.target else {
        return (0.0, HeadGrads::default());
    };
    let mut grads = HeadGrads::default();

    let ce = -safe_ln(out.ps_hat[ts], &mut clamp.hits) - safe_ln(out.pe_hat[te], &mut clamp.hits);
    let mut d_gs = out.ps_hat.clone();
    d_gs[ts] -= 1.0;
    let mut d_ge = out.pe_hat.clone();
    d_ge[te] -= 1.0;
    grads.d_g_start = Some(d_gs);
    grads.d_g_end = Some(d_ge);

    let kl = kl_divergence(&out.ps_hat, &out.ps, clamp) + kl_divergence(&out.pe_hat, &out.pe, clamp);
    if lambda != 0.0 {
        let d_fs = (&out.ps_hat - &out.ps).mapv(|v| lambda * v);
        let d_fe = (&out.pe_hat - &out.pe).mapv(|v| lambda * v);
        grads.d_f_start = Some(d_fs);
        grads.d_f_end = Some(d_fe);
    }
    (ce - lambda * kl, grads)
}

/// The delayed step function: 1 once the epoch is strictly past k.
pub fn delayed_step(epoch: usize, k: usize) -> f64 {
    if epoch > k {
        1.0
    } else {
        0.0
    }
}

/// Merges head gradients from several loss terms on the same forward pass.
pub fn merge_grads(mut a: HeadGrads, b: HeadGrads) -> HeadGrads {
    fn add(dst: &mut Option<Array1<f64>>, src: Option<Array1<f64>>) {
        match (dst.as_mut(), src) {
            (Some(d), Some(s)) => *d += &s,
            (None, Some(s)) => *dst = Some(s),
            _ => {}
        }
    }
    add(&mut a.d_f_start, b.d_f_start);
    add(&mut a.d_f_end, b.d_f_end);
    add(&mut a.d_g_start, b.d_g_start);
    add(&mut a.d_g_end, b.d_g_end);
    match (a.d_cls.as_mut(), b.d_cls) {
        (Some(d), Some(s)) => {
            for i in 0..N_CLASSES {
                d[i] += s[i];
            }
        }
        (None, Some(s)) => a.d_cls = Some(s),
        _ => {}
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Passage, SyntheticConfig, Vocabulary};
    use crate::model::{EncoderConfig, EncoderInput, QaModel};
    use crate::setgen::{build_all_sets, SetTag};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        prepared: Vec<Prepared>,
        outputs: Vec<ModelOutput>,
    }

    /// Model outputs with every distribution forced uniform, so the loss
    /// values below are closed-form.
    fn uniform_fixture() -> Fixture {
        let examples =
            generate_synthetic(&SyntheticConfig { n_examples: 2, seed: 13, ..Default::default() })
                .unwrap();
        let vocab = Vocabulary::build(&examples);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (instances, _) = build_all_sets(&examples, 2, &mut rng).unwrap();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            max_len: 128,
            hidden_dim: 32,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 32,
        };
        let model = QaModel::new(&cfg, 3).unwrap();
        let mut prepared = Vec::new();
        let mut outputs = Vec::new();
        for inst in &instances {
            let prep = prepare_instance(inst, &vocab, 128).unwrap();
            let inp = EncoderInput::from(&prep.tok);
            let (mut out, _) = model.forward(&inp).unwrap();
            let m = out.support.iter().filter(|&&b| b).count() as f64;
            for dist in [&mut out.ps, &mut out.pe, &mut out.ps_hat, &mut out.pe_hat] {
                for (i, v) in dist.iter_mut().enumerate() {
                    *v = if out.support[i] { 1.0 / m } else { 0.0 };
                }
            }
            out.pcls = [0.25; N_CLASSES];
            prepared.push(prep);
            outputs.push(out);
        }
        Fixture { prepared, outputs }
    }

    fn support_size(out: &ModelOutput) -> f64 {
        out.support.iter().filter(|&&b| b).count() as f64
    }

    #[test]
    fn span_answer_loss_is_class_plus_two_span_terms() {
        let fx = uniform_fixture();
        let mut seen = 0;
        for (prep, out) in fx.prepared.iter().zip(&fx.outputs) {
            if prep.inst.set != SetTag::APos {
                continue;
            }
            seen += 1;
            let m = support_size(out);
            let mut clamp = ClampCounter::default();
            let (loss, grads) = answer_loss(out, prep, &mut clamp);
            let expected = (4.0f64).ln() + 2.0 * m.ln();
            assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
            assert_eq!(clamp.hits, 0);

            let Some(AnswerTarget::Span(ts, te)) = prep.target else { panic!() };
            let ds = grads.d_f_start.unwrap();
            let de = grads.d_f_end.unwrap();
            assert!((ds[ts] - (1.0 / m - 1.0)).abs() < 1e-12);
            assert!((de[te] - (1.0 / m - 1.0)).abs() < 1e-12);
            assert!(grads.d_g_start.is_none());
            let dc = grads.d_cls.unwrap();
            assert!((dc[prep.inst.class_label.index()] - (0.25 - 1.0)).abs() < 1e-12);
            assert!((dc.iter().sum::<f64>()).abs() < 1e-12);
        }
        assert_eq!(seen, 2);
    }

    #[test]
    fn unanswerable_loss_is_the_class_term_alone() {
        let fx = uniform_fixture();
        let mut seen = 0;
        for (prep, out) in fx.prepared.iter().zip(&fx.outputs) {
            if prep.inst.set != SetTag::ANeg {
                continue;
            }
            seen += 1;
            let mut clamp = ClampCounter::default();
            let (loss, grads) = answer_loss(out, prep, &mut clamp);
            assert!((loss - (4.0f64).ln()).abs() < 1e-12);
            assert!(grads.d_f_start.is_none());
            assert!(grads.d_f_end.is_none());
            assert!(grads.d_g_start.is_none());
            assert!(grads.d_cls.is_some());
        }
        assert_eq!(seen, 4);
    }

    #[test]
    fn uniform_distributions_have_zero_uniform_kl() {
        let fx = uniform_fixture();
        for (prep, out) in fx.prepared.iter().zip(&fx.outputs) {
            let (value, grads) = uniform_kl_regularizer(out, prep);
            assert!(value.abs() < 1e-12);
            if let Some(ds) = grads.d_f_start {
                assert!(ds.iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn peaked_distribution_pays_positive_uniform_kl() {
        let fx = uniform_fixture();
        let (prep, out) = fx
            .prepared
            .iter()
            .zip(&fx.outputs)
            .find(|(p, _)| p.inst.set == SetTag::APos)
            .unwrap();
        let mut peaked = out.clone();
        let m = support_size(out);
        // Move half the mass of every non-support... support positions:
        // concentrate on the first support position.
        let first = peaked.support.iter().position(|&b| b).unwrap();
        for dist in [&mut peaked.ps, &mut peaked.pe] {
            for (i, v) in dist.iter_mut().enumerate() {
                *v = 0.0;
                if i == first {
                    *v = 0.5;
                }
            }
            // Spread the rest uniformly over the remaining support.
            for (i, v) in dist.iter_mut().enumerate() {
                if peaked.support[i] && i != first {
                    *v = 0.5 / (m - 1.0);
                }
            }
        }
        let (value, _) = uniform_kl_regularizer(&peaked, prep);
        let expected = 2.0
            * (0.5 * (0.5f64).ln()
                + 0.5 * (0.5 / (m - 1.0)).ln()
                + m.ln());
        assert!((value - expected).abs() < 1e-9, "{value} vs {expected}");
        assert!(value > 0.0);
    }

    #[test]
    fn matching_heads_reduce_decorrelation_to_plain_bias_ce() {
        let fx = uniform_fixture();
        for (prep, out) in fx.prepared.iter().zip(&fx.outputs) {
            if prep.inst.set != SetTag::ENeg {
                continue;
            }
            let m = support_size(out);
            let mut clamp = ClampCounter::default();
            let (loss, grads) = bias_decorrelation_loss(out, prep, 0.01, &mut clamp);
            // P_hat equals P here, so the KL vanishes and only the biased
            // cross-entropy remains.
            assert!((loss - 2.0 * m.ln()).abs() < 1e-9);
            let dfs = grads.d_f_start.unwrap();
            assert!(dfs.iter().all(|v| v.abs() < 1e-12));
            let dgs = grads.d_g_start.unwrap();
            let Some(AnswerTarget::Span(ts, _)) = prep.target else { panic!() };
            assert!((dgs[ts] - (1.0 / m - 1.0)).abs() < 1e-12);
            assert!(grads.d_cls.is_none());
        }
    }

    #[test]
    fn zero_lambda_sends_nothing_to_the_target_heads() {
        let fx = uniform_fixture();
        let (prep, out) = fx
            .prepared
            .iter()
            .zip(&fx.outputs)
            .find(|(p, _)| p.inst.set == SetTag::ENeg)
            .unwrap();
        let mut clamp = ClampCounter::default();
        let (_, grads) = bias_decorrelation_loss(out, prep, 0.0, &mut clamp);
        assert!(grads.d_f_start.is_none());
        assert!(grads.d_f_end.is_none());
        assert!(grads.d_g_start.is_some());
    }

    #[test]
    fn probability_floor_clamps_are_counted() {
        let fx = uniform_fixture();
        let (prep, out) = fx
            .prepared
            .iter()
            .zip(&fx.outputs)
            .find(|(p, _)| p.inst.set == SetTag::APos)
            .unwrap();
        let mut broken = out.clone();
        let Some(AnswerTarget::Span(ts, _)) = prep.target else { panic!() };
        broken.ps[ts] = 0.0;
        let mut clamp = ClampCounter::default();
        let (loss, _) = answer_loss(&broken, prep, &mut clamp);
        assert_eq!(clamp.hits, 1);
        assert!(loss > -LOG_EPS.ln() - 1.0);
    }

    #[test]
    fn gate_opens_strictly_after_k() {
        assert_eq!(delayed_step(1, 3), 0.0);
        assert_eq!(delayed_step(3, 3), 0.0);
        assert_eq!(delayed_step(4, 3), 1.0);
        assert_eq!(delayed_step(100, 3), 1.0);
    }

    #[test]
    fn merging_adds_overlapping_terms_and_keeps_disjoint_ones() {
        let a = HeadGrads {
            d_f_start: Some(Array1::from_vec(vec![1.0, 2.0])),
            d_cls: Some([1.0, 0.0, 0.0, 0.0]),
            ..Default::default()
        };
        let b = HeadGrads {
            d_f_start: Some(Array1::from_vec(vec![0.5, 0.5])),
            d_g_end: Some(Array1::from_vec(vec![3.0, 3.0])),
            d_cls: Some([0.0, 1.0, 0.0, 0.0]),
            ..Default::default()
        };
        let m = merge_grads(a, b);
        assert_eq!(m.d_f_start.unwrap().to_vec(), vec![1.5, 2.5]);
        assert_eq!(m.d_g_end.unwrap().to_vec(), vec![3.0, 3.0]);
        assert_eq!(m.d_cls.unwrap(), [1.0, 1.0, 0.0, 0.0]);
        assert!(m.d_f_end.is_none());
    }

    #[test]
    fn empty_support_contributes_no_regularizer() {
        let examples =
            generate_synthetic(&SyntheticConfig { n_examples: 1, seed: 13, ..Default::default() })
                .unwrap();
        let ex = &examples[0];
        let vocab = Vocabulary::build(&examples);
        let passage = Passage::from_example(ex, Vec::new()).unwrap();
        let tok = tokenize(&ex.question, &passage, &vocab, 128, false).unwrap();
        let n = tok.ids.len();
        let out = ModelOutput {
            h: Array2::zeros((n, 1)),
            ps: Array1::zeros(n),
            pe: Array1::zeros(n),
            ps_hat: Array1::zeros(n),
            pe_hat: Array1::zeros(n),
            pcls: [0.25; 4],
            support: vec![false; n],
        };
        let inst_like = fx_unanswerable(ex, passage, &vocab);
        let (value, grads) = uniform_kl_regularizer(&out, &inst_like);
        assert_eq!(value, 0.0);
        assert!(grads.d_f_start.is_none());
    }

    fn fx_unanswerable(
        ex: &crate::corpus::MultiHopExample,
        passage: Passage,
        vocab: &Vocabulary,
    ) -> Prepared {
        use crate::setgen::{Answerability, Evidentiality, TrainingInstance};
        let tok = tokenize(&ex.question, &passage, vocab, 128, false).unwrap();
        let inst = TrainingInstance {
            qid: ex.qid.clone(),
            question: ex.question.clone(),
            answer_text: ex.answer.text.clone(),
            answer_kind: ex.answer.kind,
            passage,
            answerability: Answerability::Answerable,
            evidentiality: Evidentiality::Negative,
            neg_type: Some(crate::setgen::NegType::AnswerOnly),
            answer_span: None,
            class_label: ClassLabel::Span,
            set: SetTag::ENeg,
        };
        Prepared { inst, tok, target: None }
    }
}
