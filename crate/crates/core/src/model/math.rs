//! Encoder building blocks in f64 with handwritten backward passes.
//!
//! Every block returns a trace holding exactly the activations its backward
//! pass needs. Gradients accumulate into [`Param::g`]; nothing is applied
//! until the optimizer steps.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One trainable tensor and its gradient accumulator. All parameters are
/// two-dimensional; vectors are single-row matrices.
#[derive(Debug, Clone)]
pub struct Param {
    pub v: Array2<f64>,
    pub g: Array2<f64>,
}

impl Param {
    pub fn zeros(rows: usize, cols: usize) -> Param {
        Param { v: Array2::zeros((rows, cols)), g: Array2::zeros((rows, cols)) }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Param {
        let dist = Normal::new(0.0, std).expect("finite std");
        let v = Array2::from_shape_fn((rows, cols), |_| dist.sample(rng));
        Param { v, g: Array2::zeros((rows, cols)) }
    }

    pub fn ones(rows: usize, cols: usize) -> Param {
        Param { v: Array2::ones((rows, cols)), g: Array2::zeros((rows, cols)) }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }
}

/// In-place numerically stable softmax of one row, restricted to positions
/// where `valid` is true; invalid positions end up exactly zero.
pub fn masked_softmax_row(row: &mut [f64], valid: &[bool]) {
    debug_assert_eq!(row.len(), valid.len());
    let mut max = f64::NEG_INFINITY;
    for (x, &ok) in row.iter().zip(valid) {
        if ok && *x > max {
            max = *x;
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (x, &ok) in row.iter_mut().zip(valid) {
        if ok {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Gaussian error linear unit (tanh form) and its derivative.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

pub struct LnTrace {
    x_hat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> LayerNorm {
        LayerNorm { gamma: Param::ones(1, d), beta: Param::zeros(1, d), eps: 1e-5 }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnTrace) {
        let d = x.ncols() as f64;
        let mut x_hat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (i, mut row) in x_hat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let r = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd[i] = r;
        }
        let mut y = x_hat.clone();
        for mut row in y.rows_mut() {
            row.zip_mut_with(&self.gamma.v.row(0), |v, &g| *v *= g);
            row.zip_mut_with(&self.beta.v.row(0), |v, &b| *v += b);
        }
        (y, LnTrace { x_hat, rstd })
    }

    pub fn backward(&mut self, tr: &LnTrace, dy: &Array2<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        for (dyr, xr) in dy.rows().into_iter().zip(tr.x_hat.rows()) {
            let mut g = self.gamma.g.row_mut(0);
            let mut b = self.beta.g.row_mut(0);
            for j in 0..dyr.len() {
                g[j] += dyr[j] * xr[j];
                b[j] += dyr[j];
            }
        }
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dyr = dy.row(i);
            let xr = tr.x_hat.row(i);
            let g = self.gamma.v.row(0);
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for j in 0..dyr.len() {
                let dxh = dyr[j] * g[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xr[j];
            }
            let r = tr.rstd[i];
            let mut dxr = dx.row_mut(i);
            for j in 0..dyr.len() {
                let dxh = dyr[j] * g[j];
                dxr[j] = r * (dxh - sum_dxh / d - xr[j] * sum_dxh_xh / d);
            }
        }
        dx
    }
}

/// Relative offsets beyond this distance share the outermost bias bucket.
pub const REL_CLIP: usize = 8;
/// Bias buckets: offsets -REL_CLIP..=REL_CLIP.
pub const REL_BUCKETS: usize = 2 * REL_CLIP + 1;

fn rel_bucket(from: usize, to: usize) -> usize {
    let off = to as isize - from as isize;
    (off.clamp(-(REL_CLIP as isize), REL_CLIP as isize) + REL_CLIP as isize) as usize
}

pub struct Attention {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub bq: Param,
    pub bk: Param,
    pub bv: Param,
    pub bo: Param,
    /// Per-head additive score bias over clipped relative offsets. One
    /// scalar per (head, offset) lets position-relative moves transfer to
    /// absolute positions never seen with that move in training.
    pub rel: Param,
    pub n_heads: usize,
}

pub struct AttnTrace {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention per head.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

fn affine(x: &Array2<f64>, w: &Param, b: &Param) -> Array2<f64> {
    let mut y = x.dot(&w.v);
    for mut row in y.rows_mut() {
        row.zip_mut_with(&b.v.row(0), |v, &bv| *v += bv);
    }
    y
}

/// Accumulates gradients of `y = x.w + b` given dy; returns dx.
fn affine_backward(
    x: &Array2<f64>,
    w: &mut Param,
    b: &mut Param,
    dy: &Array2<f64>,
) -> Array2<f64> {
    w.g += &x.t().dot(dy);
    b.g += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&w.v.t())
}

/// Relative offsets the positional heads prefer at initialization, cycled
/// over the second half of the heads.
const HEAD_OFFSETS: [isize; 4] = [-2, -4, -5, 2];
/// Initial score bonus at a positional head's preferred offset.
const HEAD_OFFSET_BONUS: f64 = 4.0;

impl Attention {
    /// Heads start in two roles. The first half are matching heads: keys
    /// copy the queries so that q_i . k_j is largest when tokens i and j
    /// share an embedding. The rest are positional heads: a zeroed query
    /// block makes their scores pure relative-offset bias at first, with a
    /// bonus at one preferred offset each. Both roles stay fully trainable;
    /// an encoder this small never finds either pattern from independent
    /// random projections within the epoch budget.
    pub fn new(d: usize, n_heads: usize, rng: &mut ChaCha8Rng, std: f64) -> Attention {
        assert!(d % n_heads == 0, "hidden dim must divide into heads");
        let dh = d / n_heads;
        let mut wq = Param::randn(d, d, std, rng);
        let mut wk = Param::randn(d, d, std, rng);
        let mut rel = Param::zeros(n_heads, REL_BUCKETS);
        let n_matching = n_heads.div_ceil(2);
        for h in 0..n_heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            if h < n_matching {
                let block = wq.v.slice(cols).to_owned();
                wk.v.slice_mut(cols).assign(&block);
            } else {
                wq.v.slice_mut(cols).fill(0.0);
                let off = HEAD_OFFSETS[(h - n_matching) % HEAD_OFFSETS.len()];
                let bucket =
                    (off.clamp(-(REL_CLIP as isize), REL_CLIP as isize) + REL_CLIP as isize) as usize;
                rel.v[(h, bucket)] = HEAD_OFFSET_BONUS;
            }
        }
        Attention {
            wq,
            wk,
            wv: Param::randn(d, d, std, rng),
            wo: Param::randn(d, d, std, rng),
            bq: Param::zeros(1, d),
            bk: Param::zeros(1, d),
            bv: Param::zeros(1, d),
            bo: Param::zeros(1, d),
            rel,
            n_heads,
        }
    }

    /// `real` marks non-padding rows; padded columns receive no attention.
    pub fn forward(&self, x: &Array2<f64>, real: &[bool]) -> (Array2<f64>, AttnTrace) {
        let n = x.nrows();
        let d = x.ncols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = affine(x, &self.wq, &self.bq);
        let k = affine(x, &self.wk, &self.bk);
        let v = affine(x, &self.wv, &self.bv);

        let mut ctx = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]).to_owned();
            let kh = k.slice(ndarray::s![.., cols.clone()]).to_owned();
            let vh = v.slice(ndarray::s![.., cols.clone()]).to_owned();
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            for ((i, j), s) in scores.indexed_iter_mut() {
                *s += self.rel.v[(h, rel_bucket(i, j))];
            }
            for mut row in scores.rows_mut() {
                masked_softmax_row(row.as_slice_mut().expect("contiguous row"), real);
            }
            let ctx_h = scores.dot(&vh);
            ctx.slice_mut(ndarray::s![.., cols]).assign(&ctx_h);
            probs.push(scores);
        }
        let out = affine(&ctx, &self.wo, &self.bo);
        (out, AttnTrace { x: x.clone(), q, k, v, probs, ctx })
    }

    pub fn backward(&mut self, tr: &AttnTrace, dy: &Array2<f64>) -> Array2<f64> {
        let n = dy.nrows();
        let d = dy.ncols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dctx = affine_backward(&tr.ctx, &mut self.wo, &mut self.bo, dy);

        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..self.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &tr.probs[h];
            let kh = tr.k.slice(ndarray::s![.., cols.clone()]).to_owned();
            let vh = tr.v.slice(ndarray::s![.., cols.clone()]).to_owned();
            let qh = tr.q.slice(ndarray::s![.., cols.clone()]).to_owned();
            let dctx_h = dctx.slice(ndarray::s![.., cols.clone()]).to_owned();

            let dvh = p.t().dot(&dctx_h);
            let dp = dctx_h.dot(&vh.t());

            // Softmax rows: ds_j = p_j (dp_j - sum_k dp_k p_k). Masked
            // positions have p_j = 0 and so contribute nothing.
            let mut ds = dp;
            for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = dsr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                for (dsv, &pv) in dsr.iter_mut().zip(pr.iter()) {
                    *dsv = pv * (*dsv - dot);
                }
            }
            // The bias enters after scaling, so its gradient skips `scale`.
            for ((i, j), &dsv) in ds.indexed_iter() {
                self.rel.g[(h, rel_bucket(i, j))] += dsv;
            }
            ds *= scale;

            let dqh = ds.dot(&kh);
            let dkh = ds.t().dot(&qh);
            dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&dqh);
            dk.slice_mut(ndarray::s![.., cols.clone()]).assign(&dkh);
            dv.slice_mut(ndarray::s![.., cols]).assign(&dvh);
        }

        let mut dx = affine_backward(&tr.x, &mut self.wq, &mut self.bq, &dq);
        dx += &affine_backward(&tr.x, &mut self.wk, &mut self.bk, &dk);
        dx += &affine_backward(&tr.x, &mut self.wv, &mut self.bv, &dv);
        dx
    }
}

pub struct Ffn {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

pub struct FfnTrace {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Ffn {
    pub fn new(d: usize, hidden: usize, rng: &mut ChaCha8Rng, std: f64) -> Ffn {
        Ffn {
            w1: Param::randn(d, hidden, std, rng),
            b1: Param::zeros(1, hidden),
            w2: Param::randn(hidden, d, std, rng),
            b2: Param::zeros(1, d),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FfnTrace) {
        let pre = affine(x, &self.w1, &self.b1);
        let act = pre.mapv(gelu);
        let y = affine(&act, &self.w2, &self.b2);
        (y, FfnTrace { x: x.clone(), pre, act })
    }

    pub fn backward(&mut self, tr: &FfnTrace, dy: &Array2<f64>) -> Array2<f64> {
        let dact = affine_backward(&tr.act, &mut self.w2, &mut self.b2, dy);
        let mut dpre = dact;
        dpre.zip_mut_with(&tr.pre, |dv, &p| *dv *= gelu_grad(p));
        affine_backward(&tr.x, &mut self.w1, &mut self.b1, &dpre)
    }
}

/// Pre-norm residual block: `x + attn(ln1(x))`, then `+ ffn(ln2(.))`.
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

pub struct BlockTrace {
    ln1: LnTrace,
    attn: AttnTrace,
    ln2: LnTrace,
    ffn: FfnTrace,
}

impl Block {
    pub fn new(d: usize, n_heads: usize, ffn_hidden: usize, rng: &mut ChaCha8Rng, std: f64) -> Block {
        Block {
            ln1: LayerNorm::new(d),
            attn: Attention::new(d, n_heads, rng, std),
            ln2: LayerNorm::new(d),
            ffn: Ffn::new(d, ffn_hidden, rng, std),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, real: &[bool]) -> (Array2<f64>, BlockTrace) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&n1, real);
        let x1 = x + &a;
        let (n2, ln2) = self.ln2.forward(&x1);
        let (f, ffn) = self.ffn.forward(&n2);
        let x2 = &x1 + &f;
        (x2, BlockTrace { ln1, attn, ln2, ffn })
    }

    pub fn backward(&mut self, tr: &BlockTrace, dy: &Array2<f64>) -> Array2<f64> {
        let dn2 = self.ffn.backward(&tr.ffn, dy);
        let dx1 = dy + &self.ln2.backward(&tr.ln2, &dn2);
        let dn1 = self.attn.backward(&tr.attn, &dx1);
        &dx1 + &self.ln1.backward(&tr.ln1, &dn1)
    }
}
