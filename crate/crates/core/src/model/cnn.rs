//! Convolutional feature extractor: blocks of 3x3 convolutions with ReLU,
//! each block closed by a max pool.

use ndarray::{s, Array2, Axis};

use super::params::{Init, Mat, ParamLayout};

#[derive(Debug, Clone)]
struct Conv {
    w: Mat,
    b: Mat,
    cin: usize,

}

#[derive(Debug, Clone)]
struct Block {
    convs: Vec<Conv>,
    pool: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<Block>,
    pub out_channels: usize,
    pub out_height: usize,
    pub stride: usize,
}

/// A `(channels, height * width)` activation.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array2<f64>,
    pub h: usize,
    pub w: usize,
}

struct ConvCache {
    cols: Array2<f64>,
    out: Array2<f64>,
    h: usize,
    w: usize,
}

struct PoolCache {
    argmax: Vec<usize>,
    in_len: usize,
}

pub struct BackboneCache {
    convs: Vec<ConvCache>,
    pools: Vec<PoolCache>,
}

impl Backbone {
    /// `blocks[i]` lists the output channels of the convolutions in block `i`.
    pub fn new(layout: &mut ParamLayout, blocks: &[(Vec<usize>, (usize, usize))], in_height: usize) -> Self {
        let mut cin = 1;
        let mut h = in_height;
        let mut stride = 1;
        let mut out = Vec::new();
        for (bi, (channels, pool)) in blocks.iter().enumerate() {
            let mut convs = Vec::new();
            for (ci, &cout) in channels.iter().enumerate() {
                let fan_in = cin * 9;
                let w = layout.add(
                    format!("cnn.{bi}.{ci}.w"),
                    cout,
                    fan_in,
                    Init::Normal((2.0 / fan_in as f64).sqrt()),
                );
                let b = layout.add(format!("cnn.{bi}.{ci}.b"), cout, 1, Init::Zeros);
                convs.push(Conv { w, b, cin });
                cin = cout;
            }
            h /= pool.0;
            stride *= pool.1;
            out.push(Block { convs, pool: *pool });
        }
        Self {
            blocks: out,
            out_channels: cin,
            out_height: h,
            stride,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.out_channels * self.out_height
    }

    pub fn forward(&self, params: &[f64], input: FeatureMap) -> (FeatureMap, BackboneCache) {
        let mut x = input;
        let mut cache = BackboneCache {
            convs: Vec::new(),
            pools: Vec::new(),
        };
        for block in &self.blocks {
            for conv in &block.convs {
                let cols = im2col(&x.data, conv.cin, x.h, x.w);
                let mut out = conv.w.view(params).dot(&cols);
                let bias = conv.b.vec(params);
                for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                    row.mapv_inplace(|v| (v + b).max(0.0));
                }
                cache.convs.push(ConvCache {
                    cols,
                    out: out.clone(),
                    h: x.h,
                    w: x.w,
                });
                x = FeatureMap { data: out, h: x.h, w: x.w };
            }
            let (pooled, pc) = max_pool(&x, block.pool);
            cache.pools.push(pc);
            x = pooled;
        }
        (x, cache)
    }

    /// Accumulates parameter gradients into `grad`. The input gradient is
    /// not needed and not computed.
    pub fn backward(&self, params: &[f64], cache: BackboneCache, d_out: Array2<f64>, grad: &mut [f64]) {
        let mut d = d_out;
        let mut convs = cache.convs.into_iter().rev();
        let mut pools = cache.pools.into_iter().rev();
        let n_blocks = self.blocks.len();
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let pc = pools.next().expect("one pool per block");
            let mut d_in = Array2::<f64>::zeros((d.nrows(), pc.in_len));
            for c in 0..d.nrows() {
                let src = d.row(c);
                let mut dst = d_in.row_mut(c);
                for (j, &g) in src.iter().enumerate() {
                    dst[pc.argmax[c * src.len() + j]] += g;
                }
            }
            d = d_in;
            for (ci, conv) in block.convs.iter().enumerate().rev() {
                let cc = convs.next().expect("one cache per conv");
                d.zip_mut_with(&cc.out, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
                {
                    let mut gw = conv.w.view_mut(grad);
                    ndarray::linalg::general_mat_mul(1.0, &d, &cc.cols.t(), 1.0, &mut gw);
                }
                {
                    let mut gb = conv.b.vec_mut(grad);
                    gb += &d.sum_axis(Axis(1));
                }
                let first = bi == 0 && ci == 0;
                if !first {
                    let dcols = conv.w.view(params).t().dot(&d);
                    d = col2im(&dcols, conv.cin, cc.h, cc.w);
                }
            }
        }
        debug_assert!(n_blocks == 0 || convs.next().is_none());
    }
}

fn im2col(x: &Array2<f64>, cin: usize, h: usize, w: usize) -> Array2<f64> {
    let hw = h * w;
    let mut cols = Array2::<f64>::zeros((cin * 9, hw));
    for c in 0..cin {
        let src = x.row(c);
        let src = src.as_slice().expect("contiguous rows");
        for ky in 0..3 {
            for kx in 0..3 {
                let mut dst = cols.row_mut(c * 9 + ky * 3 + kx);
                let dst = dst.as_slice_mut().expect("contiguous rows");
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, cin: usize, h: usize, w: usize) -> Array2<f64> {
    let mut x = Array2::<f64>::zeros((cin, h * w));
    for c in 0..cin {
        let mut dst = x.row_mut(c);
        let dst = dst.as_slice_mut().expect("contiguous rows");
        for ky in 0..3 {
            for kx in 0..3 {
                let src = cols.row(c * 9 + ky * 3 + kx);
                let src = src.as_slice().expect("contiguous rows");
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let crow = &src[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[..w - 1].iter_mut().zip(&crow[1..]).for_each(|(d, s)| *d += s),
                        1 => drow.iter_mut().zip(crow).for_each(|(d, s)| *d += s),
                        _ => drow[1..].iter_mut().zip(&crow[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

fn max_pool(x: &FeatureMap, (ph, pw): (usize, usize)) -> (FeatureMap, PoolCache) {
    let (oh, ow) = (x.h / ph, x.w / pw);
    let c = x.data.nrows();
    let mut out = Array2::<f64>::zeros((c, oh * ow));
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        let src = x.data.row(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for dy in 0..ph {
                    for dx in 0..pw {
                        let idx = (oy * ph + dy) * x.w + ox * pw + dx;
                        if src[idx] > best {
                            best = src[idx];
                            arg = idx;
                        }
                    }
                }
                out[[ch, oy * ow + ox]] = best;
                argmax[ch * oh * ow + oy * ow + ox] = arg;
            }
        }
    }
    (
        FeatureMap { data: out, h: oh, w: ow },
        PoolCache {
            argmax,
            in_len: x.h * x.w,
        },
    )
}

/// Turns a `(C, H' * N)` map into the `N x (C * H')` column sequence.
pub fn columns(map: &FeatureMap) -> Array2<f64> {
    let c = map.data.nrows();
    let mut out = Array2::<f64>::zeros((map.w, c * map.h));
    for ch in 0..c {
        for y in 0..map.h {
            out.slice_mut(s![.., ch * map.h + y])
                .assign(&map.data.slice(s![ch, y * map.w..(y + 1) * map.w]));
        }
    }
    out
}

/// Inverse of [`columns`] for gradients.
pub fn uncolumns(d: &Array2<f64>, channels: usize, h: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((channels, h * w));
    for ch in 0..channels {
        for y in 0..h {
            out.slice_mut(s![ch, y * w..(y + 1) * w])
                .assign(&d.slice(s![.., ch * h + y]));
        }
    }
    out
}
