//! The trainable reader.
//!
//! A small pre-norm transformer encodes `[CLS] question [SEP] passage
//! [EOS]`. On top of the final hidden states sit five linear probes, none
//! with a bias term:
//!
//! - target span heads `f_start`, `f_end`: per-position scores softmaxed
//!   over passage positions only;
//! - biased span heads `g_start`, `g_end`: same shape, trained to prefer
//!   reasoning shortcuts so the target heads can be pushed away from them;
//! - a four-way answer class head over the `[CLS]` state:
//!   (span, yes, no, none).
//!
//! The backward pass takes gradients with respect to head logits, so loss
//! code works in probability space and the chain rule through each softmax
//! stays in one place. Gradients from the biased heads stop at the encoder
//! boundary unless `bias_backprop_encoder` is set.

mod adam;
mod checkpoint;
pub mod math;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointKind, LoadedModel};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedInput, Vocabulary};
use crate::error::{Error, Result};
use crate::setgen::ClassLabel;
use math::{masked_softmax_row, Block, BlockTrace, LayerNorm, LnTrace, Param};

pub const N_CLASSES: usize = 4;
const INIT_STD: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
}

impl EncoderConfig {
    /// Desk-scale default sized for synthetic corpora.
    pub fn desk(vocab_size: usize, max_len: usize) -> EncoderConfig {
        EncoderConfig { vocab_size, max_len, hidden_dim: 64, n_layers: 3, n_heads: 8, ffn_hidden: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::Config("vocab_size and max_len must be positive".into()));
        }
        Ok(())
    }
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    pub tok_emb: Param,
    pub pos_emb: Param,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
}

pub struct EncTrace {
    ids: Vec<usize>,
    xs: Vec<Array2<f64>>,
    block_traces: Vec<BlockTrace>,
    final_ln: LnTrace,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Encoder {
        let blocks = (0..cfg.n_layers)
            .map(|_| Block::new(cfg.hidden_dim, cfg.n_heads, cfg.ffn_hidden, rng, INIT_STD))
            .collect();
        Encoder {
            cfg: cfg.clone(),
            tok_emb: Param::randn(cfg.vocab_size, cfg.hidden_dim, INIT_STD, rng),
            pos_emb: Param::randn(cfg.max_len, cfg.hidden_dim, INIT_STD, rng),
            blocks,
            final_ln: LayerNorm::new(cfg.hidden_dim),
        }
    }

    /// `real[i]` is false for padding; padded columns receive no attention.
    pub fn forward(&self, ids: &[usize], real: &[bool]) -> Result<(Array2<f64>, EncTrace)> {
        let n = ids.len();
        if n == 0 || n > self.cfg.max_len {
            return Err(Error::Internal(format!(
                "sequence length {n} outside 1..={}",
                self.cfg.max_len
            )));
        }
        let d = self.cfg.hidden_dim;
        let mut x = Array2::zeros((n, d));
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.cfg.vocab_size {
                return Err(Error::Internal(format!("token id {id} outside vocabulary")));
            }
            let mut row = x.row_mut(i);
            row.assign(&self.tok_emb.v.row(id));
            row += &self.pos_emb.v.row(i);
        }

        let mut xs = vec![x.clone()];
        let mut block_traces = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, tr) = b.forward(&x, real);
            block_traces.push(tr);
            xs.push(next.clone());
            x = next;
        }
        let (h, final_ln) = self.final_ln.forward(&x);
        Ok((h, EncTrace { ids: ids.to_vec(), xs, block_traces, final_ln }))
    }

    pub fn backward(&mut self, tr: &EncTrace, dh: &Array2<f64>) {
        let mut dx = self.final_ln.backward(&tr.final_ln, dh);
        for (b, btr) in self.blocks.iter_mut().zip(&tr.block_traces).rev() {
            dx = b.backward(btr, &dx);
        }
        for (i, &id) in tr.ids.iter().enumerate() {
            let src = dx.row(i);
            let mut t = self.tok_emb.g.row_mut(id);
            t += &src;
            let mut p = self.pos_emb.g.row_mut(i);
            p += &src;
        }
        let _ = &tr.xs;
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = vec![
            ("enc.tok_emb".into(), &self.tok_emb),
            ("enc.pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("enc.layer{i}.{n}");
            out.push((p("ln1.gamma"), &b.ln1.gamma));
            out.push((p("ln1.beta"), &b.ln1.beta));
            out.push((p("attn.wq"), &b.attn.wq));
            out.push((p("attn.bq"), &b.attn.bq));
            out.push((p("attn.wk"), &b.attn.wk));
            out.push((p("attn.bk"), &b.attn.bk));
            out.push((p("attn.wv"), &b.attn.wv));
            out.push((p("attn.bv"), &b.attn.bv));
            out.push((p("attn.wo"), &b.attn.wo));
            out.push((p("attn.bo"), &b.attn.bo));
            out.push((p("attn.rel"), &b.attn.rel));
            out.push((p("ln2.gamma"), &b.ln2.gamma));
            out.push((p("ln2.beta"), &b.ln2.beta));
            out.push((p("ffn.w1"), &b.ffn.w1));
            out.push((p("ffn.b1"), &b.ffn.b1));
            out.push((p("ffn.w2"), &b.ffn.w2));
            out.push((p("ffn.b2"), &b.ffn.b2));
        }
        out.push(("enc.final_ln.gamma".into(), &self.final_ln.gamma));
        out.push(("enc.final_ln.beta".into(), &self.final_ln.beta));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = vec![
            ("enc.tok_emb".into(), &mut self.tok_emb),
            ("enc.pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("enc.layer{i}.{n}");
            out.push((p("ln1.gamma"), &mut b.ln1.gamma));
            out.push((p("ln1.beta"), &mut b.ln1.beta));
            out.push((p("attn.wq"), &mut b.attn.wq));
            out.push((p("attn.bq"), &mut b.attn.bq));
            out.push((p("attn.wk"), &mut b.attn.wk));
            out.push((p("attn.bk"), &mut b.attn.bk));
            out.push((p("attn.wv"), &mut b.attn.wv));
            out.push((p("attn.bv"), &mut b.attn.bv));
            out.push((p("attn.wo"), &mut b.attn.wo));
            out.push((p("attn.bo"), &mut b.attn.bo));
            out.push((p("attn.rel"), &mut b.attn.rel));
            out.push((p("ln2.gamma"), &mut b.ln2.gamma));
            out.push((p("ln2.beta"), &mut b.ln2.beta));
            out.push((p("ffn.w1"), &mut b.ffn.w1));
            out.push((p("ffn.b1"), &mut b.ffn.b1));
            out.push((p("ffn.w2"), &mut b.ffn.w2));
            out.push((p("ffn.b2"), &mut b.ffn.b2));
        }
        out.push(("enc.final_ln.gamma".into(), &mut self.final_ln.gamma));
        out.push(("enc.final_ln.beta".into(), &mut self.final_ln.beta));
        out
    }

    /// Parameters the optimizer may update. Token embeddings stay at their
    /// random initialization: rare entity tokens would otherwise act as
    /// per-example storage and the model memorizes the training corpus
    /// instead of learning a lookup that transfers to unseen entities.
    /// Frozen embeddings still support token matching because a vector
    /// always matches itself.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = self.params_mut();
        out.retain(|(name, _)| name != "enc.tok_emb");
        out
    }
}

/// The token layout the model consumes. `real_len` tokens are real; the
/// rest is padding. Passage positions are `[passage_lo, passage_hi)`.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    pub ids: Vec<usize>,
    pub real_len: usize,
    pub passage_lo: usize,
    pub passage_hi: usize,
}

impl From<&TokenizedInput> for EncoderInput {
    fn from(t: &TokenizedInput) -> Self {
        EncoderInput {
            ids: t.ids.clone(),
            real_len: t.ids.len(),
            passage_lo: t.passage_lo,
            passage_hi: t.passage_hi,
        }
    }
}

impl EncoderInput {
    fn real_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.real_len).collect()
    }

    fn span_support(&self) -> Vec<bool> {
        (0..self.ids.len())
            .map(|i| i >= self.passage_lo && i < self.passage_hi && i < self.real_len)
            .collect()
    }
}

/// Forward results in probability space.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Final hidden states, one row per token.
    pub h: Array2<f64>,
    /// Target span start/end distributions over all positions; zero outside
    /// the passage support.
    pub ps: Array1<f64>,
    pub pe: Array1<f64>,
    /// Biased span distributions, same support.
    pub ps_hat: Array1<f64>,
    pub pe_hat: Array1<f64>,
    /// (span, yes, no, none) probabilities from the `[CLS]` state.
    pub pcls: [f64; 4],
    pub support: Vec<bool>,
}

pub struct QaTrace {
    enc: EncTrace,
    h: Array2<f64>,
}

/// Gradients of a loss with respect to head logits. Omitted heads
/// contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct HeadGrads {
    pub d_f_start: Option<Array1<f64>>,
    pub d_f_end: Option<Array1<f64>>,
    pub d_g_start: Option<Array1<f64>>,
    pub d_g_end: Option<Array1<f64>>,
    pub d_cls: Option<[f64; 4]>,
}

impl HeadGrads {
    pub fn scale(&mut self, c: f64) {
        for g in [&mut self.d_f_start, &mut self.d_f_end, &mut self.d_g_start, &mut self.d_g_end]
            .into_iter()
            .flatten()
        {
            *g *= c;
        }
        if let Some(dc) = &mut self.d_cls {
            dc.iter_mut().for_each(|v| *v *= c);
        }
    }
}

pub struct QaModel {
    pub cfg: EncoderConfig,
    pub enc: Encoder,
    pub f_start: Param,
    pub f_end: Param,
    pub g_start: Param,
    pub g_end: Param,
    pub cls: Param,
    /// Whether biased-head gradients continue into the encoder. The default
    /// stops them at the head boundary.
    pub bias_backprop_encoder: bool,
}

impl QaModel {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<QaModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden_dim;
        Ok(QaModel {
            cfg: cfg.clone(),
            enc: Encoder::new(cfg, &mut rng),
            f_start: Param::randn(d, 1, INIT_STD, &mut rng),
            f_end: Param::randn(d, 1, INIT_STD, &mut rng),
            g_start: Param::randn(d, 1, INIT_STD, &mut rng),
            g_end: Param::randn(d, 1, INIT_STD, &mut rng),
            cls: Param::randn(d, N_CLASSES, INIT_STD, &mut rng),
            bias_backprop_encoder: false,
        })
    }

    pub fn forward(&self, inp: &EncoderInput) -> Result<(ModelOutput, QaTrace)> {
        let real = inp.real_mask();
        let support = inp.span_support();
        let (h, enc_tr) = self.enc.forward(&inp.ids, &real)?;

        let span_head = |w: &Param| -> Array1<f64> {
            let mut logits: Array1<f64> = h.dot(&w.v).column(0).to_owned();
            masked_softmax_row(logits.as_slice_mut().expect("contiguous"), &support);
            logits
        };
        let ps = span_head(&self.f_start);
        let pe = span_head(&self.f_end);
        let ps_hat = span_head(&self.g_start);
        let pe_hat = span_head(&self.g_end);

        let cls_logits = h.row(0).dot(&self.cls.v);
        let mut pcls = [0.0; N_CLASSES];
        for (i, v) in cls_logits.iter().enumerate() {
            pcls[i] = *v;
        }
        let all = [true; N_CLASSES];
        masked_softmax_row(&mut pcls, &all);

        let out = ModelOutput { h: h.clone(), ps, pe, ps_hat, pe_hat, pcls, support };
        Ok((out, QaTrace { enc: enc_tr, h }))
    }

    pub fn forward_output(&self, inp: &EncoderInput) -> Result<ModelOutput> {
        Ok(self.forward(inp)?.0)
    }

    /// Accumulates parameter gradients for one example. `grads` holds
    /// logit-space gradients; the softmax chain rule is the caller's
    /// responsibility (loss code derives logit gradients directly).
    pub fn backward(&mut self, tr: &QaTrace, grads: &HeadGrads) {
        let n = tr.h.nrows();
        let d = self.cfg.hidden_dim;
        let mut dh = Array2::zeros((n, d));

        let apply_span = |w: &mut Param, dlogits: &Array1<f64>, dh: &mut Array2<f64>, into_enc: bool| {
            debug_assert_eq!(dlogits.len(), n);
            for i in 0..n {
                let dl = dlogits[i];
                if dl == 0.0 {
                    continue;
                }
                let hrow = tr.h.row(i);
                let mut wg = w.g.column_mut(0);
                for j in 0..d {
                    wg[j] += hrow[j] * dl;
                }
                if into_enc {
                    let wv = w.v.column(0);
                    let mut dhrow = dh.row_mut(i);
                    for j in 0..d {
                        dhrow[j] += wv[j] * dl;
                    }
                }
            }
        };

        if let Some(dl) = &grads.d_f_start {
            apply_span(&mut self.f_start, dl, &mut dh, true);
        }
        if let Some(dl) = &grads.d_f_end {
            apply_span(&mut self.f_end, dl, &mut dh, true);
        }
        let bias_into_enc = self.bias_backprop_encoder;
        if let Some(dl) = &grads.d_g_start {
            apply_span(&mut self.g_start, dl, &mut dh, bias_into_enc);
        }
        if let Some(dl) = &grads.d_g_end {
            apply_span(&mut self.g_end, dl, &mut dh, bias_into_enc);
        }
        if let Some(dc) = &grads.d_cls {
            let h0 = tr.h.row(0);
            for c in 0..N_CLASSES {
                if dc[c] == 0.0 {
                    continue;
                }
                let mut wg = self.cls.g.column_mut(c);
                for j in 0..d {
                    wg[j] += h0[j] * dc[c];
                }
            }
            let mut dh0 = dh.row_mut(0);
            for j in 0..d {
                let mut acc = 0.0;
                for c in 0..N_CLASSES {
                    acc += self.cls.v[(j, c)] * dc[c];
                }
                dh0[j] += acc;
            }
        }
        self.enc.backward(&tr.enc, &dh);
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out = self.enc.params();
        out.push(("f_start.w".into(), &self.f_start));
        out.push(("f_end.w".into(), &self.f_end));
        out.push(("g_start.w".into(), &self.g_start));
        out.push(("g_end.w".into(), &self.g_end));
        out.push(("cls.w".into(), &self.cls));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = self.enc.params_mut();
        out.push(("f_start.w".into(), &mut self.f_start));
        out.push(("f_end.w".into(), &mut self.f_end));
        out.push(("g_start.w".into(), &mut self.g_start));
        out.push(("g_end.w".into(), &mut self.g_end));
        out.push(("cls.w".into(), &mut self.cls));
        out
    }

    /// Optimizer view: everything except the frozen token embeddings.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = self.enc.trainable_params_mut();
        out.push(("f_start.w".into(), &mut self.f_start));
        out.push(("f_end.w".into(), &mut self.f_end));
        out.push(("g_start.w".into(), &mut self.g_start));
        out.push(("g_end.w".into(), &mut self.g_end));
        out.push(("cls.w".into(), &mut self.cls));
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Sentence-evidence scorer: the same encoder architecture with one
/// sigmoid head read at the `[S]` marker position after each sentence.
pub struct SelectorModel {
    pub cfg: EncoderConfig,
    pub enc: Encoder,
    pub w: Param,
    pub b: Param,
}

pub struct SelectorTrace {
    enc: EncTrace,
    h: Array2<f64>,
    markers: Vec<usize>,
}

impl SelectorModel {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<SelectorModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5e1ec7));
        Ok(SelectorModel {
            cfg: cfg.clone(),
            enc: Encoder::new(cfg, &mut rng),
            w: Param::randn(cfg.hidden_dim, 1, INIT_STD, &mut rng),
            b: Param::zeros(1, 1),
        })
    }

    /// Evidence probability per marker, in marker order.
    pub fn forward(
        &self,
        inp: &EncoderInput,
        markers: &[usize],
    ) -> Result<(Vec<f64>, SelectorTrace)> {
        let real = inp.real_mask();
        let (h, enc_tr) = self.enc.forward(&inp.ids, &real)?;
        let mut probs = Vec::with_capacity(markers.len());
        for &m in markers {
            if m >= h.nrows() {
                return Err(Error::Internal(format!("marker position {m} out of range")));
            }
            let z = h.row(m).dot(&self.w.v.column(0)) + self.b.v[(0, 0)];
            probs.push(1.0 / (1.0 + (-z).exp()));
        }
        Ok((probs, SelectorTrace { enc: enc_tr, h, markers: markers.to_vec() }))
    }

    /// `d_logits[i]` is the loss gradient at marker i's pre-sigmoid score.
    pub fn backward(&mut self, tr: &SelectorTrace, d_logits: &[f64]) {
        let d = self.cfg.hidden_dim;
        let mut dh = Array2::zeros(tr.h.raw_dim());
        for (&m, &dz) in tr.markers.iter().zip(d_logits) {
            if dz == 0.0 {
                continue;
            }
            let hrow = tr.h.row(m);
            let mut wg = self.w.g.column_mut(0);
            for j in 0..d {
                wg[j] += hrow[j] * dz;
            }
            self.b.g[(0, 0)] += dz;
            let wv = self.w.v.column(0);
            let mut dhrow = dh.row_mut(m);
            for j in 0..d {
                dhrow[j] += wv[j] * dz;
            }
        }
        self.enc.backward(&tr.enc, &dh);
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out = self.enc.params();
        out.push(("sel.w".into(), &self.w));
        out.push(("sel.b".into(), &self.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = self.enc.params_mut();
        out.push(("sel.w".into(), &mut self.w));
        out.push(("sel.b".into(), &mut self.b));
        out
    }

    /// Optimizer view: everything except the frozen token embeddings.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = self.enc.trainable_params_mut();
        out.push(("sel.w".into(), &mut self.w));
        out.push(("sel.b".into(), &mut self.b));
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn save(&self, path: &std::path::Path, vocab: &Vocabulary) -> Result<()> {
        save_checkpoint(path, CheckpointKind::Selector, &self.cfg, vocab, &self.params())
    }
}

impl QaModel {
    pub fn save(&self, path: &std::path::Path, vocab: &Vocabulary) -> Result<()> {
        save_checkpoint(path, CheckpointKind::Qa, &self.cfg, vocab, &self.params())
    }
}

/// What the model should have predicted, for confidence reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerTarget {
    /// Inclusive token positions of the gold span.
    Span(usize, usize),
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Target,
    Biased,
}

/// Probability the model assigns to the gold answer: the product of the
/// gold start and end probabilities for spans, the class probability for
/// yes/no. Always in [0, 1]; zero when the span fell outside the support.
pub fn answer_confidence(out: &ModelOutput, target: AnswerTarget, head: HeadKind) -> f64 {
    match target {
        AnswerTarget::Span(ts, te) => {
            let (ps, pe) = match head {
                HeadKind::Target => (&out.ps, &out.pe),
                HeadKind::Biased => (&out.ps_hat, &out.pe_hat),
            };
            if ts >= ps.len() || te >= pe.len() {
                return 0.0;
            }
            ps[ts] * pe[te]
        }
        AnswerTarget::Yes => out.pcls[ClassLabel::Yes.index()],
        AnswerTarget::No => out.pcls[ClassLabel::No.index()],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: ClassLabel,
    pub answer_text: String,
    /// Inclusive token positions when the class is span.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
    /// Probability of the decoded answer under the target heads.
    pub confidence: f64,
}

/// Greedy decode: argmax class (ties to the smaller index); for span, the
/// highest `ps[s] * pe[e]` with `s <= e <= s + max_span_len`, ties to the
/// smaller (s, e).
pub fn decode(
    out: &ModelOutput,
    tok: &TokenizedInput,
    passage_text: &str,
    max_span_len: usize,
) -> Prediction {
    let mut class_idx = 0;
    for c in 1..N_CLASSES {
        if out.pcls[c] > out.pcls[class_idx] {
            class_idx = c;
        }
    }
    let class = match class_idx {
        0 => ClassLabel::Span,
        1 => ClassLabel::Yes,
        2 => ClassLabel::No,
        _ => ClassLabel::None,
    };
    match class {
        ClassLabel::Yes => Prediction {
            class,
            answer_text: "yes".into(),
            span: None,
            confidence: out.pcls[1],
        },
        ClassLabel::No => Prediction {
            class,
            answer_text: "no".into(),
            span: None,
            confidence: out.pcls[2],
        },
        ClassLabel::None => Prediction {
            class,
            answer_text: String::new(),
            span: None,
            confidence: out.pcls[3],
        },
        ClassLabel::Span => {
            let n = out.ps.len();
            let mut best: Option<(usize, usize, f64)> = None;
            for s in 0..n {
                if !out.support[s] || out.ps[s] == 0.0 {
                    continue;
                }
                let hi = (s + max_span_len).min(n - 1);
                for e in s..=hi {
                    if !out.support[e] {
                        continue;
                    }
                    let score = out.ps[s] * out.pe[e];
                    if best.map_or(true, |(_, _, b)| score > b) {
                        best = Some((s, e, score));
                    }
                }
            }
            match best {
                Some((s, e, score)) if score > 0.0 => {
                    let (cs, ce) = tok.tokens_to_span(s, e);
                    Prediction {
                        class,
                        answer_text: passage_text[cs..ce].to_string(),
                        span: Some((s, e)),
                        confidence: score,
                    }
                }
                // No decodable span (empty support). A span class without a
                // span would break the prediction contract, so demote.
                _ => Prediction {
                    class: ClassLabel::None,
                    answer_text: String::new(),
                    span: None,
                    confidence: 0.0,
                },
            }
        }
    }
}
