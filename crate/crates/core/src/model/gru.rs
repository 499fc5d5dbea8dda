//! Gated recurrent units: a single cell (used by the decoder) and
//! bidirectional sequence layers (used by the encoder).
//!
//! Gate layout follows the common `r, z, n` convention:
//! `n = tanh(W_in x + b_in + r * (W_hn h + b_hn))`, `h' = (1 - z) n + z h`.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::params::{Init, Mat, ParamLayout};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_i: Mat,
    pub w_h: Mat,
    pub b_i: Mat,
    pub b_h: Mat,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct CellCache {
    pub r: Array1<f64>,
    pub z: Array1<f64>,
    pub n: Array1<f64>,
    /// `W_hn h + b_hn`, needed for the reset-gate gradient.
    pub hn: Array1<f64>,
}

pub struct CellGrad {
    pub d_gi: Array1<f64>,
    pub d_h_prev: Array1<f64>,
}

impl GruCell {
    pub fn new(layout: &mut ParamLayout, name: &str, input: usize, hidden: usize) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        Self {
            w_i: layout.add(format!("{name}.w_i"), 3 * hidden, input, Init::Uniform(k)),
            w_h: layout.add(format!("{name}.w_h"), 3 * hidden, hidden, Init::Uniform(k)),
            b_i: layout.add(format!("{name}.b_i"), 3 * hidden, 1, Init::Uniform(k)),
            b_h: layout.add(format!("{name}.b_h"), 3 * hidden, 1, Init::Uniform(k)),
            input,
            hidden,
        }
    }

    /// Input projection `W_i x + b_i` for a whole `(T, input)` sequence.
    pub fn project_inputs(&self, params: &[f64], xs: &Array2<f64>) -> Array2<f64> {
        xs.dot(&self.w_i.view(params).t()) + &self.b_i.vec(params)
    }

    /// One step given the precomputed input projection `gi`.
    pub fn step(&self, params: &[f64], gi: ArrayView1<f64>, h: ArrayView1<f64>) -> (Array1<f64>, CellCache) {
        let hd = self.hidden;
        let gh = self.w_h.view(params).dot(&h) + &self.b_h.vec(params);
        let mut r = Array1::zeros(hd);
        let mut z = Array1::zeros(hd);
        let mut n = Array1::zeros(hd);
        let mut out = Array1::zeros(hd);
        for j in 0..hd {
            r[j] = sigmoid(gi[j] + gh[j]);
            z[j] = sigmoid(gi[hd + j] + gh[hd + j]);
            n[j] = (gi[2 * hd + j] + r[j] * gh[2 * hd + j]).tanh();
            out[j] = (1.0 - z[j]) * n[j] + z[j] * h[j];
        }
        let hn = gh.slice(s![2 * hd..]).to_owned();
        (out, CellCache { r, z, n, hn })
    }

    /// Backward through one step. Accumulates `W_h`/`b_h` gradients; the
    /// input-side gradient `d_gi` is returned so callers can batch the
    /// `W_i` update.
    pub fn step_backward(
        &self,
        params: &[f64],
        cache: &CellCache,
        h_prev: ArrayView1<f64>,
        d_out: ArrayView1<f64>,
        grad: &mut [f64],
    ) -> CellGrad {
        let hd = self.hidden;
        let mut d_gi = Array1::zeros(3 * hd);
        let mut d_gh = Array1::zeros(3 * hd);
        let mut d_h_direct = Array1::zeros(hd);
        for j in 0..hd {
            let (r, z, n) = (cache.r[j], cache.z[j], cache.n[j]);
            let dh = d_out[j];
            let dn = dh * (1.0 - z);
            let dz = dh * (h_prev[j] - n);
            d_h_direct[j] = dh * z;
            let dn_pre = dn * (1.0 - n * n);
            let dr = dn_pre * cache.hn[j];
            let dr_pre = dr * r * (1.0 - r);
            let dz_pre = dz * z * (1.0 - z);
            d_gi[j] = dr_pre;
            d_gi[hd + j] = dz_pre;
            d_gi[2 * hd + j] = dn_pre;
            d_gh[j] = dr_pre;
            d_gh[hd + j] = dz_pre;
            d_gh[2 * hd + j] = dn_pre * r;
        }
        {
            let mut gw = self.w_h.view_mut(grad);
            gw += &outer(&d_gh, &h_prev);
        }
        {
            let mut gb = self.b_h.vec_mut(grad);
            gb += &d_gh;
        }
        let d_h_prev = self.w_h.view(params).t().dot(&d_gh) + d_h_direct;
        CellGrad { d_gi, d_h_prev }
    }

    /// Accumulates `W_i`/`b_i` gradients for a batch of input projections.
    pub fn project_backward(&self, params: &[f64], xs: &Array2<f64>, d_gi: &Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        {
            let mut gw = self.w_i.view_mut(grad);
            ndarray::linalg::general_mat_mul(1.0, &d_gi.t(), xs, 1.0, &mut gw);
        }
        {
            let mut gb = self.b_i.vec_mut(grad);
            gb += &d_gi.sum_axis(Axis(0));
        }
        d_gi.dot(&self.w_i.view(params))
    }
}

pub fn outer(a: &Array1<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

pub struct SeqCache {
    xs: Array2<f64>,
    hs: Array2<f64>,
    cells: Vec<CellCache>,
}

/// Runs a cell over a sequence, optionally in reverse order. Output row `t`
/// always corresponds to input row `t`.
fn run_sequence(cell: &GruCell, params: &[f64], xs: &Array2<f64>, reverse: bool) -> (Array2<f64>, SeqCache) {
    let n = xs.nrows();
    let gi = cell.project_inputs(params, xs);
    let mut hs = Array2::<f64>::zeros((n, cell.hidden));
    let mut cells = Vec::with_capacity(n);
    let mut h = Array1::<f64>::zeros(cell.hidden);
    for k in 0..n {
        let t = if reverse { n - 1 - k } else { k };
        let (h_new, cache) = cell.step(params, gi.row(t), h.view());
        hs.row_mut(t).assign(&h_new);
        cells.push(cache);
        h = h_new;
    }
    (
        hs.clone(),
        SeqCache {
            xs: xs.clone(),
            hs,
            cells,
        },
    )
}

fn run_sequence_backward(
    cell: &GruCell,
    params: &[f64],
    cache: &SeqCache,
    d_hs: &Array2<f64>,
    reverse: bool,
    grad: &mut [f64],
) -> Array2<f64> {
    let n = d_hs.nrows();
    let mut d_gi = Array2::<f64>::zeros((n, 3 * cell.hidden));
    let mut d_next = Array1::<f64>::zeros(cell.hidden);
    let zeros = Array1::<f64>::zeros(cell.hidden);
    for k in (0..n).rev() {
        let t = if reverse { n - 1 - k } else { k };
        let h_prev = if k == 0 {
            zeros.view()
        } else {
            let tp = if reverse { t + 1 } else { t - 1 };
            cache.hs.row(tp)
        };
        let d_out = &d_hs.row(t) + &d_next;
        let g = cell.step_backward(params, &cache.cells[k], h_prev, d_out.view(), grad);
        d_gi.row_mut(t).assign(&g.d_gi);
        d_next = g.d_h_prev;
    }
    cell.project_backward(params, &cache.xs, &d_gi, grad)
}

#[derive(Debug, Clone)]
pub struct BiGru {
    fwd: GruCell,
    bwd: GruCell,
    pub hidden: usize,
}

pub struct BiGruCache {
    fwd: SeqCache,
    bwd: SeqCache,
}

impl BiGru {
    pub fn new(layout: &mut ParamLayout, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            fwd: GruCell::new(layout, &format!("{name}.fwd"), input, hidden),
            bwd: GruCell::new(layout, &format!("{name}.bwd"), input, hidden),
            hidden,
        }
    }

    /// `(N, input)` to `(N, 2 * hidden)`: forward states then backward states.
    pub fn forward(&self, params: &[f64], xs: &Array2<f64>) -> (Array2<f64>, BiGruCache) {
        let (hf, cf) = run_sequence(&self.fwd, params, xs, false);
        let (hb, cb) = run_sequence(&self.bwd, params, xs, true);
        let out = ndarray::concatenate![Axis(1), hf, hb];
        (out, BiGruCache { fwd: cf, bwd: cb })
    }

    pub fn backward(&self, params: &[f64], cache: &BiGruCache, d_out: &Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let h = self.hidden;
        let df = d_out.slice(s![.., ..h]).to_owned();
        let db = d_out.slice(s![.., h..]).to_owned();
        let dx_f = run_sequence_backward(&self.fwd, params, &cache.fwd, &df, false, grad);
        let dx_b = run_sequence_backward(&self.bwd, params, &cache.bwd, &db, true, grad);
        dx_f + dx_b
    }
}
