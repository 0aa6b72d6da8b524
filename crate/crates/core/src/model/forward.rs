//! Forward pass, cross-entropy loss and hand-written backward pass.
//!
//! Block layout (post-layer-norm, BERT style):
//!
//! ```text
//! a   = LN1(h + drop(Attn(h)))
//! out = mask ⊙ LN2(a + drop(W2·gelu(W1·a)))
//! ```
//!
//! Token rows of all sentences in a batch are stacked so the dense layers run
//! as one matrix product; attention is computed per sentence and head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{linear, linear_backward, Mat, Scalar};

use super::params::{block_name, ParamSet, CLS_B, CLS_W, POS_EMB, TOK_EMB};
use super::TaggerModel;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Token ids of several sentences, stacked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// Sentence boundaries: sentence `s` occupies `offsets[s]..offsets[s+1]`.
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn new<S: AsRef<[usize]>>(sentences: &[S]) -> Self {
        let mut ids = Vec::new();
        let mut offsets = vec![0];
        for s in sentences {
            ids.extend_from_slice(s.as_ref());
            offsets.push(ids.len());
        }
        Self { ids, offsets }
    }

    pub fn n_tokens(&self) -> usize {
        self.ids.len()
    }

    pub fn n_sentences(&self) -> usize {
        self.offsets.len() - 1
    }

    fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.offsets.windows(2).map(|w| (w[0], w[1] - w[0]))
    }
}

pub struct ForwardOutput<T> {
    /// `tokens × n_tags`.
    pub logits: Mat<T>,
    /// Representations for layers `0..=L`, each `tokens × d`, post-mask.
    pub reps: Vec<Mat<T>>,
}

struct BlockCache<T> {
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Attention probabilities per (sentence, head), row-major `n×n`.
    probs: Vec<Vec<T>>,
    ctx: Mat<T>,
    drop1: Option<Vec<T>>,
    x1_hat: Mat<T>,
    x1_rstd: Vec<T>,
    a: Mat<T>,
    z1: Mat<T>,
    f: Mat<T>,
    drop2: Option<Vec<T>>,
    x2_hat: Mat<T>,
    x2_rstd: Vec<T>,
}

struct Cache<T> {
    blocks: Vec<BlockCache<T>>,
}

fn layer_norm<T: Scalar>(x: &Mat<T>, g: &[T], b: &[T]) -> (Mat<T>, Mat<T>, Vec<T>) {
    let d = x.cols;
    let dn = T::from_usize(d).unwrap();
    let eps = T::from_f64_lossy(LN_EPS);
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * rs;
        }
        let yr = y.row_mut(r);
        for c in 0..d {
            yr[c] = g[c] * xh[c] + b[c];
        }
    }
    (y, xhat, rstd)
}

/// Given `dy`, accumulates `dg`, `db` and returns `dx`.
fn layer_norm_backward<T: Scalar>(
    dy: &Mat<T>,
    xhat: &Mat<T>,
    rstd: &[T],
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Mat<T> {
    let d = dy.cols;
    let dn = T::from_usize(d).unwrap();
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = xhat.row(r);
        let mut sum = T::zero();
        let mut sum_x = T::zero();
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            sum += dxhat[c];
            sum_x += dxhat[c] * xh[c];
        }
        let mean = sum / dn;
        let mean_x = sum_x / dn;
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = rstd[r] * (dxhat[c] - mean - xh[c] * mean_x);
        }
    }
    dx
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(0.044_715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(0.044_715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Zeroes masked columns (writes +0.0, never -0.0).
fn apply_mask_rows<T: Scalar>(m: &mut Mat<T>, keep: &[bool]) {
    if keep.iter().all(|&k| k) {
        return;
    }
    for r in 0..m.rows {
        for (x, &k) in m.row_mut(r).iter_mut().zip(keep) {
            if !k {
                *x = T::zero();
            }
        }
    }
}

fn dropout_mask<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<T> {
    let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { scale })
        .collect()
}

fn mul_inplace<T: Scalar>(m: &mut Mat<T>, factors: &[T]) {
    for (x, &f) in m.data.iter_mut().zip(factors) {
        *x *= f;
    }
}

impl<T: Scalar> TaggerModel<T> {
    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range (vocab_size {})",
                self.config.vocab_size
            )));
        }
        if let Some((_, len)) = batch.spans().find(|&(_, n)| n > self.config.max_len) {
            return Err(Error::Input(format!(
                "sentence of length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass (no dropout).
    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput<T>> {
        self.check_batch(batch)?;
        Ok(self.forward_impl(batch, None).0)
    }

    fn attention(&self, batch: &Batch, q: &Mat<T>, k: &Mat<T>, v: &Mat<T>) -> (Mat<T>, Vec<Vec<T>>) {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut ctx = Mat::zeros(q.rows, d);
        let mut all_probs = Vec::with_capacity(batch.n_sentences() * heads);
        for (o, n) in batch.spans() {
            for h in 0..heads {
                let base = o * d + h * dh;
                let mut p = vec![T::zero(); n * n];
                if n > 0 {
                    T::gemm(
                        n, dh, n, scale,
                        &q.data[base..], d as isize, 1,
                        &k.data[base..], 1, d as isize,
                        T::zero(), &mut p, n as isize, 1,
                    );
                }
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    let lim = if self.config.causal { i + 1 } else { n };
                    let mx = row[..lim].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for x in row[..lim].iter_mut() {
                        *x = (*x - mx).exp();
                        sum += *x;
                    }
                    for x in row[..lim].iter_mut() {
                        *x /= sum;
                    }
                    for x in row[lim..].iter_mut() {
                        *x = T::zero();
                    }
                }
                if n > 0 {
                    T::gemm(
                        n, n, dh, T::one(),
                        &p, n as isize, 1,
                        &v.data[base..], d as isize, 1,
                        T::zero(), &mut ctx.data[base..], d as isize, 1,
                    );
                }
                all_probs.push(p);
            }
        }
        (ctx, all_probs)
    }

    fn forward_impl(&self, batch: &Batch, mut rng: Option<&mut ChaCha8Rng>) -> (ForwardOutput<T>, Cache<T>) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let n = batch.n_tokens();
        let p = &self.params;
        let train = rng.is_some() && cfg.dropout_rate > 0.0;

        let tok = &p.get(TOK_EMB).data;
        let pos = &p.get(POS_EMB).data;
        let mut h = Mat::zeros(n, d);
        for (o, len) in batch.spans() {
            for t in 0..len {
                let id = batch.ids[o + t];
                let row = h.row_mut(o + t);
                for c in 0..d {
                    row[c] = tok[id * d + c] + pos[t * d + c];
                }
            }
        }
        apply_mask_rows(&mut h, self.mask.layer(0));
        let mut reps = vec![h];
        let mut blocks = Vec::with_capacity(cfg.n_layers);

        for b in 0..cfg.n_layers {
            let h = reps.last().unwrap();
            let q = linear(h, p.block(b, "wq"), p.block(b, "bq"), d);
            let k = linear(h, p.block(b, "wk"), p.block(b, "bk"), d);
            let v = linear(h, p.block(b, "wv"), p.block(b, "bv"), d);
            let (ctx, probs) = self.attention(batch, &q, &k, &v);
            let mut attn = linear(&ctx, p.block(b, "wo"), p.block(b, "bo"), d);
            let drop1 = if train {
                let m = dropout_mask(rng.as_deref_mut().unwrap(), n * d, cfg.dropout_rate);
                mul_inplace(&mut attn, &m);
                Some(m)
            } else {
                None
            };
            let mut x1 = attn;
            for (x, &r) in x1.data.iter_mut().zip(&h.data) {
                *x += r;
            }
            let (a, x1_hat, x1_rstd) = layer_norm(&x1, p.block(b, "ln1_g"), p.block(b, "ln1_b"));
            let z1 = linear(&a, p.block(b, "w1"), p.block(b, "b1"), cfg.d_ffn);
            let f = Mat::from_vec(z1.rows, z1.cols, z1.data.iter().map(|&x| gelu(x)).collect());
            let mut f2 = linear(&f, p.block(b, "w2"), p.block(b, "b2"), d);
            let drop2 = if train {
                let m = dropout_mask(rng.as_deref_mut().unwrap(), n * d, cfg.dropout_rate);
                mul_inplace(&mut f2, &m);
                Some(m)
            } else {
                None
            };
            let mut x2 = f2;
            for (x, &r) in x2.data.iter_mut().zip(&a.data) {
                *x += r;
            }
            let (mut out, x2_hat, x2_rstd) =
                layer_norm(&x2, p.block(b, "ln2_g"), p.block(b, "ln2_b"));
            apply_mask_rows(&mut out, self.mask.layer(b + 1));
            blocks.push(BlockCache {
                q,
                k,
                v,
                probs,
                ctx,
                drop1,
                x1_hat,
                x1_rstd,
                a,
                z1,
                f,
                drop2,
                x2_hat,
                x2_rstd,
            });
            reps.push(out);
        }
        let logits = linear(
            reps.last().unwrap(),
            &p.get(CLS_W).data,
            &p.get(CLS_B).data,
            cfg.n_tags,
        );
        (ForwardOutput { logits, reps }, Cache { blocks })
    }

    /// Mean token cross-entropy and gradients for every parameter.
    ///
    /// `dropout_seed = None` runs in evaluation mode; `Some(seed)` samples
    /// dropout masks from a generator seeded with `seed`, so repeated calls
    /// with the same seed see identical masks.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch,
        gold: &[usize],
        dropout_seed: Option<u64>,
    ) -> Result<(T, ParamSet<T>)> {
        if batch.n_tokens() == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if gold.len() != batch.n_tokens() {
            return Err(Error::Input(format!(
                "{} gold tags for {} tokens",
                gold.len(),
                batch.n_tokens()
            )));
        }
        if let Some(&bad) = gold.iter().find(|&&g| g >= self.config.n_tags) {
            return Err(Error::Input(format!("gold tag id {bad} out of range")));
        }
        self.check_batch(batch)?;
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let (out, cache) = self.forward_impl(batch, rng.as_mut());
        let (loss, dlogits) = cross_entropy(&out.logits, gold);
        let grads = self.backward(batch, &out, &cache, &dlogits);
        Ok((loss, grads))
    }

    fn backward(
        &self,
        batch: &Batch,
        out: &ForwardOutput<T>,
        cache: &Cache<T>,
        dlogits: &Mat<T>,
    ) -> ParamSet<T> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let p = &self.params;
        let mut g = p.zeros_like();

        let (dw, db) = two_mut(&mut g, CLS_W, CLS_B);
        let mut dh_cur = linear_backward(out.reps.last().unwrap(), &p.get(CLS_W).data, dlogits, dw, db);

        for b in (0..cfg.n_layers).rev() {
            let c = &cache.blocks[b];
            let h_in = &out.reps[b];
            apply_mask_rows(&mut dh_cur, self.mask.layer(b + 1));

            // LN2
            let (dg2, db2) = two_mut(&mut g, &block_name(b, "ln2_g"), &block_name(b, "ln2_b"));
            let dx2 = layer_norm_backward(&dh_cur, &c.x2_hat, &c.x2_rstd, p.block(b, "ln2_g"), dg2, db2);
            let mut da = dx2.clone();
            let mut df2 = dx2;
            if let Some(m) = &c.drop2 {
                mul_inplace(&mut df2, m);
            }
            // FFN
            let (dw2, db2f) = two_mut(&mut g, &block_name(b, "w2"), &block_name(b, "b2"));
            let df = linear_backward(&c.f, p.block(b, "w2"), &df2, dw2, db2f);
            let dz1 = Mat::from_vec(
                df.rows,
                df.cols,
                df.data
                    .iter()
                    .zip(&c.z1.data)
                    .map(|(&gv, &z)| gv * gelu_grad(z))
                    .collect(),
            );
            let (dw1, db1f) = two_mut(&mut g, &block_name(b, "w1"), &block_name(b, "b1"));
            let da_ffn = linear_backward(&c.a, p.block(b, "w1"), &dz1, dw1, db1f);
            for (x, &y) in da.data.iter_mut().zip(&da_ffn.data) {
                *x += y;
            }
            // LN1
            let (dg1, db1) = two_mut(&mut g, &block_name(b, "ln1_g"), &block_name(b, "ln1_b"));
            let dx1 = layer_norm_backward(&da, &c.x1_hat, &c.x1_rstd, p.block(b, "ln1_g"), dg1, db1);
            let mut dh_next = dx1.clone();
            let mut dattn = dx1;
            if let Some(m) = &c.drop1 {
                mul_inplace(&mut dattn, m);
            }
            let (dwo, dbo) = two_mut(&mut g, &block_name(b, "wo"), &block_name(b, "bo"));
            let dctx = linear_backward(&c.ctx, p.block(b, "wo"), &dattn, dwo, dbo);

            // Attention
            let n_tok = h_in.rows;
            let mut dq = Mat::zeros(n_tok, d);
            let mut dk = Mat::zeros(n_tok, d);
            let mut dv = Mat::zeros(n_tok, d);
            let mut pi = 0;
            for (o, n) in batch.spans() {
                for hh in 0..heads {
                    let probs = &c.probs[pi];
                    pi += 1;
                    if n == 0 {
                        continue;
                    }
                    let base = o * d + hh * dh;
                    let mut dp = vec![T::zero(); n * n];
                    // dP = dctx_h · v_hᵀ
                    T::gemm(
                        n, dh, n, T::one(),
                        &dctx.data[base..], d as isize, 1,
                        &c.v.data[base..], 1, d as isize,
                        T::zero(), &mut dp, n as isize, 1,
                    );
                    // dv_h = Pᵀ · dctx_h
                    T::gemm(
                        n, n, dh, T::one(),
                        probs, 1, n as isize,
                        &dctx.data[base..], d as isize, 1,
                        T::zero(), &mut dv.data[base..], d as isize, 1,
                    );
                    // softmax backward, folded with the score scale
                    for i in 0..n {
                        let pr = &probs[i * n..(i + 1) * n];
                        let dr = &mut dp[i * n..(i + 1) * n];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    // dq_h = dS · k_h ; dk_h = dSᵀ · q_h
                    T::gemm(
                        n, n, dh, T::one(),
                        &dp, n as isize, 1,
                        &c.k.data[base..], d as isize, 1,
                        T::zero(), &mut dq.data[base..], d as isize, 1,
                    );
                    T::gemm(
                        n, n, dh, T::one(),
                        &dp, 1, n as isize,
                        &c.q.data[base..], d as isize, 1,
                        T::zero(), &mut dk.data[base..], d as isize, 1,
                    );
                }
            }
            for (w, bname, dmat) in [("wq", "bq", &dq), ("wk", "bk", &dk), ("wv", "bv", &dv)] {
                let (dw, dbias) = two_mut(&mut g, &block_name(b, w), &block_name(b, bname));
                let dx = linear_backward(h_in, p.block(b, w), dmat, dw, dbias);
                for (x, &y) in dh_next.data.iter_mut().zip(&dx.data) {
                    *x += y;
                }
            }
            dh_cur = dh_next;
        }

        apply_mask_rows(&mut dh_cur, self.mask.layer(0));
        let (dtok, dpos) = two_mut(&mut g, TOK_EMB, POS_EMB);
        for (o, len) in batch.spans() {
            for t in 0..len {
                let id = batch.ids[o + t];
                let row = dh_cur.row(o + t);
                for c in 0..d {
                    dtok[id * d + c] += row[c];
                    dpos[t * d + c] += row[c];
                }
            }
        }
        g
    }
}

/// Mean cross-entropy over rows and its gradient w.r.t. the logits.
fn cross_entropy<T: Scalar>(logits: &Mat<T>, gold: &[usize]) -> (T, Mat<T>) {
    let n = T::from_usize(logits.rows).unwrap();
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut loss = T::zero();
    for r in 0..logits.rows {
        let row = logits.row(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&x| (x - mx).exp()).sum();
        let lse = mx + sum.ln();
        loss += lse - row[gold[r]];
        let gr = grad.row_mut(r);
        for c in 0..row.len() {
            gr[c] = (row[c] - lse).exp() / n;
        }
        gr[gold[r]] -= T::one() / n;
    }
    (loss / n, grad)
}

#[cfg(test)]
fn softmax_rows<T: Scalar>(logits: &Mat<T>) -> Mat<T> {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

fn two_mut<'a, T: Scalar>(g: &'a mut ParamSet<T>, a: &str, b: &str) -> (&'a mut [T], &'a mut [T]) {
    let ia = g.tensors.iter().position(|t| t.name == a).expect("tensor a");
    let ib = g.tensors.iter().position(|t| t.name == b).expect("tensor b");
    assert_ne!(ia, ib);
    if ia < ib {
        let (lo, hi) = g.tensors.split_at_mut(ib);
        (&mut lo[ia].data, &mut hi[0].data)
    } else {
        let (lo, hi) = g.tensors.split_at_mut(ia);
        (&mut hi[0].data, &mut lo[ib].data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tag_inventory, ModelConfig};

    fn model<T: Scalar>(seed: u64, causal: bool) -> TaggerModel<T> {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            vocab_size: 11,
            n_tags: 5,
            max_len: 6,
            dropout_rate: 0.1,
            seed,
            causal,
            allow_revival: false,
        };
        let vocab = (0..11).map(|i| format!("w{i}")).collect();
        TaggerModel::init(cfg, vocab, tag_inventory(["A", "B"])).unwrap()
    }

    #[test]
    fn shapes_and_softmax() {
        let m = model::<f32>(1, false);
        let batch = Batch::new(&[vec![1, 2, 3], vec![4, 5, 6, 7, 8]]);
        let out = m.forward(&batch).unwrap();
        assert_eq!(out.logits.rows, 8);
        assert_eq!(out.logits.cols, 5);
        assert_eq!(out.reps.len(), 3);
        let sm = softmax_rows(&out.logits);
        for r in 0..sm.rows {
            let s: f32 = sm.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = model::<f32>(2, false);
        let batch = Batch::new(&[vec![1, 2, 3, 4]]);
        let a = m.forward(&batch).unwrap().logits;
        let b = m.forward(&batch).unwrap().logits;
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        let m = model::<f32>(3, false);
        assert!(matches!(m.forward(&Batch::new(&[vec![11]])), Err(Error::Input(_))));
        assert!(matches!(
            m.forward(&Batch::new(&[vec![1; 7]])),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            m.loss_and_gradients(&Batch::new::<Vec<usize>>(&[]), &[], None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn uniform_logits_loss_is_ln_n_tags() {
        let mut m = model::<f64>(4, false);
        m.config.n_tags = 4;
        m.tags.truncate(4);
        let d = m.config.d_model;
        *m.params.get_mut(CLS_W) = super::super::params::Tensor {
            name: CLS_W.into(),
            shape: vec![d, 4],
            data: vec![0.0; d * 4],
        };
        *m.params.get_mut(CLS_B) = super::super::params::Tensor {
            name: CLS_B.into(),
            shape: vec![4],
            data: vec![0.0; 4],
        };
        let batch = Batch::new(&[vec![1, 2, 3]]);
        let (loss, _) = m.loss_and_gradients(&batch, &[0, 1, 3], None).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn causal_attention_ignores_future_tokens() {
        let m = model::<f64>(5, true);
        let a = m.forward(&Batch::new(&[vec![1, 2, 3]])).unwrap();
        let b = m.forward(&Batch::new(&[vec![1, 2, 9]])).unwrap();
        for r in 0..2 {
            assert_eq!(a.logits.row(r), b.logits.row(r));
        }
        assert_ne!(a.logits.row(2), b.logits.row(2));
    }

    fn check_gradients(m: &TaggerModel<f64>, dropout: Option<u64>) {
        let batch = Batch::new(&[vec![1, 2, 3, 4], vec![5, 6, 7]]);
        let gold = [0, 1, 2, 0, 3, 4, 0];
        let (_, grads) = m.loss_and_gradients(&batch, &gold, dropout).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for (ti, t) in m.params.tensors.iter().enumerate() {
            for k in 0..t.data.len() {
                let mut p = m.clone();
                p.params.tensors[ti].data[k] += h;
                let (lp, _) = p.loss_and_gradients(&batch, &gold, dropout).unwrap();
                p.params.tensors[ti].data[k] -= 2.0 * h;
                let (lm, _) = p.loss_and_gradients(&batch, &gold, dropout).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grads.tensors[ti].data[k];
                let err = (numeric - analytic).abs();
                if err > 1e-9 {
                    let rel = err / (numeric.abs() + analytic.abs());
                    assert!(rel < 1e-4, "{}[{k}]: analytic {analytic} numeric {numeric}", t.name);
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(&model::<f64>(6, false), None);
    }

    #[test]
    fn gradients_match_with_dropout_causal_and_mask() {
        let mut m = model::<f64>(7, true);
        m.mask = crate::model::PruneMask::from_pruned(3, 8, [1, 9, 10, 20, 23]).unwrap();
        let mask = m.mask.clone();
        m.zero_masked_weights(&mask);
        check_gradients(&m, Some(99));
    }
}
