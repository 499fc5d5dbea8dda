//! Attention decoder with a local window and attention smoothing.
//!
//! At every step, content scores `v . tanh(W_a s + U_a h_i + b_a)` are
//! computed only inside a window of half-width `w` around the centroid of
//! the previous step's attention, normalized with a softmax, convolved with
//! [`SMOOTHING_KERNEL`] and renormalized. The resulting weights form a
//! context vector that, together with the embedding of the previous token,
//! drives a GRU cell. Output logits are computed from the new hidden state,
//! the context vector and the previous embedding.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::gru::{outer, GruCell};
use super::params::{Init, Mat, ParamLayout};

pub const SMOOTHING_KERNEL: [f64; 3] = [0.25, 0.5, 0.25];

#[derive(Debug, Clone)]
pub struct AttentionDecoder {
    pub emb: Mat,
    pub w_a: Mat,
    pub u_a: Mat,
    pub b_a: Mat,
    pub v_a: Mat,
    pub cell: GruCell,
    pub w_o: Mat,
    pub b_o: Mat,
    pub window: usize,
    pub enc_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    /// Attention weights over all encoder positions.
    pub attention: Array1<f64>,
    pub state: Array1<f64>,
    pub centroid: f64,
}

#[derive(Debug, Clone)]
pub struct StepCache {
    token: usize,
    s_prev: Array1<f64>,
    lo: usize,
    hi: usize,
    u: Array2<f64>,
    alpha: Array1<f64>,
    sup_lo: usize,
    beta_sum: f64,
    /// Normalized weights on `sup_lo..=sup_lo + attn.len() - 1`.
    attn: Array1<f64>,
    x: Array1<f64>,
    cell: super::gru::CellCache,
    feat: Array1<f64>,
}

/// Encoder-side quantities shared by all decode steps of one sequence.
pub struct EncoderContext<'a> {
    pub enc: &'a Array2<f64>,
    /// `enc . U_a^T`, shape `(N, attention_dim)`.
    pub uh: Array2<f64>,
}

pub fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

impl AttentionDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &mut ParamLayout,
        vocab: usize,
        classes: usize,
        enc_dim: usize,
        hidden: usize,
        embed: usize,
        attn_dim: usize,
        window: usize,
    ) -> Self {
        let xavier = |fan_in: usize, fan_out: usize| Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt());
        let feat = hidden + enc_dim + embed;
        Self {
            emb: layout.add("dec.emb", vocab, embed, Init::Normal(0.3)),
            w_a: layout.add("dec.att.w", attn_dim, hidden, xavier(hidden, attn_dim)),
            u_a: layout.add("dec.att.u", attn_dim, enc_dim, xavier(enc_dim, attn_dim)),
            b_a: layout.add("dec.att.b", attn_dim, 1, Init::Zeros),
            v_a: layout.add("dec.att.v", attn_dim, 1, xavier(attn_dim, 1)),
            cell: GruCell::new(layout, "dec.gru", embed + enc_dim, hidden),
            w_o: layout.add("dec.out.w", classes, feat, xavier(feat, classes)),
            b_o: layout.add("dec.out.b", classes, 1, Init::Zeros),
            window,
            enc_dim,
            hidden,
            embed,
            classes,
        }
    }

    pub fn context<'a>(&self, params: &[f64], enc: &'a Array2<f64>) -> EncoderContext<'a> {
        EncoderContext {
            enc,
            uh: enc.dot(&self.u_a.view(params).t()),
        }
    }

    pub fn initial_state(&self) -> Array1<f64> {
        Array1::zeros(self.hidden)
    }

    pub fn step(
        &self,
        params: &[f64],
        ctx: &EncoderContext,
        token: usize,
        s_prev: &Array1<f64>,
        prev_centroid: f64,
    ) -> (StepOutput, StepCache) {
        let n = ctx.enc.nrows();
        let centre = (prev_centroid.round().max(0.0) as usize).min(n - 1);
        let lo = centre.saturating_sub(self.window);
        let hi = (centre + self.window).min(n - 1);

        let ws = self.w_a.view(params).dot(s_prev) + &self.b_a.vec(params);
        let v = self.v_a.vec(params);
        let mut u = ctx.uh.slice(s![lo..=hi, ..]).to_owned();
        u += &ws;
        u.mapv_inplace(f64::tanh);
        let scores = u.dot(&v);
        let alpha = softmax(&scores);

        let sup_lo = lo.saturating_sub(1);
        let sup_hi = (hi + 1).min(n - 1);
        let mut beta = Array1::<f64>::zeros(sup_hi - sup_lo + 1);
        for (k, b) in beta.iter_mut().enumerate() {
            let i = sup_lo + k;
            for (off, kv) in SMOOTHING_KERNEL.iter().enumerate() {
                let j = i as isize + off as isize - 1;
                if j >= lo as isize && j <= hi as isize {
                    *b += kv * alpha[j as usize - lo];
                }
            }
        }
        let beta_sum = beta.sum();
        let attn = beta / beta_sum;
        let mut attention = Array1::<f64>::zeros(n);
        attention.slice_mut(s![sup_lo..=sup_hi]).assign(&attn);
        let centroid = attn
            .iter()
            .enumerate()
            .map(|(k, a)| (sup_lo + k) as f64 * a)
            .sum::<f64>();
        let context = attn.dot(&ctx.enc.slice(s![sup_lo..=sup_hi, ..]));

        let e = self.emb.view(params).row(token).to_owned();
        let x = ndarray::concatenate![Axis(0), e, context];
        let gi = self.cell.w_i.view(params).dot(&x) + &self.cell.b_i.vec(params);
        let (state, cell_cache) = self.cell.step(params, gi.view(), s_prev.view());

        let feat = ndarray::concatenate![Axis(0), state, context, e];
        let logits = self.w_o.view(params).dot(&feat) + &self.b_o.vec(params);
        let probs = softmax(&logits);
        (
            StepOutput {
                logits,
                probs,
                attention,
                state: state.clone(),
                centroid,
            },
            StepCache {
                token,
                s_prev: s_prev.clone(),
                lo,
                hi,
                u,
                alpha,
                sup_lo,
                beta_sum,
                attn,
                x,
                cell: cell_cache,
                feat,
            },
        )
    }

    /// Runs the decoder with the given input tokens (start token first).
    pub fn teacher_forced(
        &self,
        params: &[f64],
        ctx: &EncoderContext,
        inputs: &[usize],
    ) -> (Vec<StepOutput>, Vec<StepCache>) {
        let mut s = self.initial_state();
        let mut centroid = 0.0;
        let mut outs = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        for &tok in inputs {
            let (o, c) = self.step(params, ctx, tok, &s, centroid);
            s = o.state.clone();
            centroid = o.centroid;
            outs.push(o);
            caches.push(c);
        }
        (outs, caches)
    }

    /// Backpropagates logit gradients through all steps. Returns the gradient
    /// with respect to the encoder output.
    pub fn backward(
        &self,
        params: &[f64],
        ctx: &EncoderContext,
        caches: &[StepCache],
        d_logits: &[Array1<f64>],
        grad: &mut [f64],
    ) -> Array2<f64> {
        let (n, e_dim) = ctx.enc.dim();
        let hd = self.hidden;
        let mut d_enc = Array2::<f64>::zeros((n, e_dim));
        let mut d_uh = Array2::<f64>::zeros(ctx.uh.dim());
        let steps = caches.len();
        let mut xs = Array2::<f64>::zeros((steps, self.embed + e_dim));
        let mut d_gis = Array2::<f64>::zeros((steps, 3 * hd));
        let mut ds_next = Array1::<f64>::zeros(hd);

        let w_o = self.w_o.view(params);
        let w_a = self.w_a.view(params);
        let w_i = self.cell.w_i.view(params);
        let v = self.v_a.vec(params).to_owned();

        for t in (0..steps).rev() {
            let c = &caches[t];
            let dl = &d_logits[t];
            {
                let mut g = self.w_o.view_mut(grad);
                g += &outer(dl, &c.feat.view());
            }
            {
                let mut g = self.b_o.vec_mut(grad);
                g += dl;
            }
            let d_feat = w_o.t().dot(dl);
            let ds = &ds_next + &d_feat.slice(s![..hd]);
            let mut dc = d_feat.slice(s![hd..hd + e_dim]).to_owned();
            let mut de = d_feat.slice(s![hd + e_dim..]).to_owned();

            let cg = self.cell.step_backward(params, &c.cell, c.s_prev.view(), ds.view(), grad);
            xs.row_mut(t).assign(&c.x);
            d_gis.row_mut(t).assign(&cg.d_gi);
            let dx = w_i.t().dot(&cg.d_gi);
            de += &dx.slice(s![..self.embed]);
            dc += &dx.slice(s![self.embed..]);

            // context = sum_i attn_i enc_i
            let sup = c.attn.len();
            let enc_sup = ctx.enc.slice(s![c.sup_lo..c.sup_lo + sup, ..]);
            d_enc
                .slice_mut(s![c.sup_lo..c.sup_lo + sup, ..])
                .zip_mut_with(&outer(&c.attn, &dc.view()), |d, g| *d += g);
            let d_attn = enc_sup.dot(&dc);
            let dot = d_attn.dot(&c.attn);
            let d_beta = (d_attn - dot) / c.beta_sum;

            let win = c.hi - c.lo + 1;
            let mut d_alpha = Array1::<f64>::zeros(win);
            for (jj, da) in d_alpha.iter_mut().enumerate() {
                let j = c.lo + jj;
                for (off, kv) in SMOOTHING_KERNEL.iter().enumerate() {
                    // beta_i depends on alpha_{i + off - 1}
                    let i = j as isize - (off as isize - 1);
                    if i >= c.sup_lo as isize && ((i as usize) - c.sup_lo) < sup {
                        *da += kv * d_beta[i as usize - c.sup_lo];
                    }
                }
            }
            let dd = d_alpha.dot(&c.alpha);
            let d_score = &c.alpha * &(d_alpha - dd);

            {
                let mut g = self.v_a.vec_mut(grad);
                g += &c.u.t().dot(&d_score);
            }
            let mut dz = c.u.mapv(|u| 1.0 - u * u);
            for (mut row, &ds_j) in dz.axis_iter_mut(Axis(0)).zip(d_score.iter()) {
                row *= &v;
                row *= ds_j;
            }
            let d_ws = dz.sum_axis(Axis(0));
            d_uh.slice_mut(s![c.lo..c.lo + win, ..]).zip_mut_with(&dz, |d, g| *d += g);
            {
                let mut g = self.w_a.view_mut(grad);
                g += &outer(&d_ws, &c.s_prev.view());
            }
            {
                let mut g = self.b_a.vec_mut(grad);
                g += &d_ws;
            }
            ds_next = w_a.t().dot(&d_ws) + cg.d_h_prev;

            let mut g_emb = self.emb.view_mut(grad);
            let mut row = g_emb.row_mut(c.token);
            row += &de;
        }

        self.cell.project_backward(params, &xs, &d_gis, grad);
        {
            let mut g = self.u_a.view_mut(grad);
            ndarray::linalg::general_mat_mul(1.0, &d_uh.t(), ctx.enc, 1.0, &mut g);
        }
        d_enc += &d_uh.dot(&self.u_a.view(params));
        d_enc
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
