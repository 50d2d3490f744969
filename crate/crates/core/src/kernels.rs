//! Raw forward/backward loops over `N×C×H×W` buffers.

use crate::error::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: [usize; 4], weight: &[usize], stride: usize, pad: usize) -> Result<Self, TensorError> {
        let [batch, in_c, in_h, in_w] = input;
        let &[out_c, w_in_c, k_h, k_w] = weight else {
            return Err(TensorError::Rank {
                expected: "4 (weight)",
                shape: weight.to_vec(),
            });
        };
        if w_in_c != in_c {
            return Err(TensorError::Geometry(format!(
                "weight expects {w_in_c} input channels, input has {in_c}"
            )));
        }
        if stride == 0 || k_h == 0 || k_w == 0 {
            return Err(TensorError::Geometry("zero stride or kernel".into()));
        }
        if in_h + 2 * pad < k_h || in_w + 2 * pad < k_w {
            return Err(TensorError::Geometry(format!(
                "kernel {k_h}x{k_w} does not fit padded input {in_h}x{in_w} (pad {pad})"
            )));
        }
        Ok(Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            k_h,
            k_w,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k_h) / stride + 1,
            out_w: (in_w + 2 * pad - k_w) / stride + 1,
        })
    }

    /// Output columns `[lo, hi)` whose input column `ow*s + kj - pad` is in range.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        range_for(kj, self.pad, self.stride, self.in_w, self.out_w)
    }

    fn row_range(&self, ki: usize) -> (usize, usize) {
        range_for(ki, self.pad, self.stride, self.in_h, self.out_h)
    }
}

fn range_for(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need o*stride + k >= pad and o*stride + k < in_len + pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let k_plane = g.k_h * g.k_w;
    let mut y = vec![0.0; g.batch * g.out_c * out_plane];
    for n in 0..g.batch {
        for o in 0..g.out_c {
            let y_off = (n * g.out_c + o) * out_plane;
            let yp = &mut y[y_off..y_off + out_plane];
            if let Some(b) = bias {
                yp.fill(b[o]);
            }
            for c in 0..g.in_c {
                let xp = &x[(n * g.in_c + c) * in_plane..][..in_plane];
                let wk = &w[(o * g.in_c + c) * k_plane..][..k_plane];
                for ki in 0..g.k_h {
                    let (r_lo, r_hi) = g.row_range(ki);
                    for kj in 0..g.k_w {
                        let wv = wk[ki * g.k_w + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (c_lo, c_hi) = g.col_range(kj);
                        for oh in r_lo..r_hi {
                            let ih = oh * g.stride + ki - g.pad;
                            let xrow = &xp[ih * g.in_w..][..g.in_w];
                            let yrow = &mut yp[oh * g.out_w..][..g.out_w];
                            for ow in c_lo..c_hi {
                                yrow[ow] += wv * xrow[ow * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let k_plane = g.k_h * g.k_w;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_c];
    for n in 0..g.batch {
        for o in 0..g.out_c {
            let dyp = &dy[(n * g.out_c + o) * out_plane..][..out_plane];
            db[o] += dyp.iter().sum::<f64>();
            for c in 0..g.in_c {
                let x_off = (n * g.in_c + c) * in_plane;
                let xp = &x[x_off..x_off + in_plane];
                let w_off = (o * g.in_c + c) * k_plane;
                for ki in 0..g.k_h {
                    let (r_lo, r_hi) = g.row_range(ki);
                    for kj in 0..g.k_w {
                        let (c_lo, c_hi) = g.col_range(kj);
                        let wv = w[w_off + ki * g.k_w + kj];
                        let mut acc = 0.0;
                        for oh in r_lo..r_hi {
                            let ih = oh * g.stride + ki - g.pad;
                            let xrow = &xp[ih * g.in_w..][..g.in_w];
                            let dyrow = &dyp[oh * g.out_w..][..g.out_w];
                            for ow in c_lo..c_hi {
                                acc += dyrow[ow] * xrow[ow * g.stride + kj - g.pad];
                            }
                        }
                        dw[w_off + ki * g.k_w + kj] += acc;
                        if let Some(dx) = dx.as_mut() {
                            if wv == 0.0 {
                                continue;
                            }
                            let dxp = &mut dx[x_off..x_off + in_plane];
                            for oh in r_lo..r_hi {
                                let ih = oh * g.stride + ki - g.pad;
                                let dyrow = &dyp[oh * g.out_w..][..g.out_w];
                                let dxrow = &mut dxp[ih * g.in_w..][..g.in_w];
                                for ow in c_lo..c_hi {
                                    dxrow[ow * g.stride + kj - g.pad] += wv * dyrow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Source taps for one output coordinate under the align-corners=false rule.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

pub fn bilinear_forward(
    x: &[f64],
    planes: usize,
    (in_h, in_w): (usize, usize),
    rows: &[Tap],
    cols: &[Tap],
) -> Vec<f64> {
    let (out_h, out_w) = (rows.len(), cols.len());
    let mut y = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let xp = &x[p * in_h * in_w..][..in_h * in_w];
        let yp = &mut y[p * out_h * out_w..][..out_h * out_w];
        for (oh, r) in rows.iter().enumerate() {
            let top = &xp[r.i0 * in_w..][..in_w];
            let bot = &xp[r.i1 * in_w..][..in_w];
            for (ow, c) in cols.iter().enumerate() {
                let t = top[c.i0] * (1.0 - c.frac) + top[c.i1] * c.frac;
                let b = bot[c.i0] * (1.0 - c.frac) + bot[c.i1] * c.frac;
                yp[oh * out_w + ow] = t * (1.0 - r.frac) + b * r.frac;
            }
        }
    }
    y
}

pub fn bilinear_backward(
    dy: &[f64],
    planes: usize,
    (in_h, in_w): (usize, usize),
    rows: &[Tap],
    cols: &[Tap],
) -> Vec<f64> {
    let (out_h, out_w) = (rows.len(), cols.len());
    let mut dx = vec![0.0; planes * in_h * in_w];
    for p in 0..planes {
        let dyp = &dy[p * out_h * out_w..][..out_h * out_w];
        let dxp = &mut dx[p * in_h * in_w..][..in_h * in_w];
        for (oh, r) in rows.iter().enumerate() {
            for (ow, c) in cols.iter().enumerate() {
                let g = dyp[oh * out_w + ow];
                let gt = g * (1.0 - r.frac);
                let gb = g * r.frac;
                dxp[r.i0 * in_w + c.i0] += gt * (1.0 - c.frac);
                dxp[r.i0 * in_w + c.i1] += gt * c.frac;
                dxp[r.i1 * in_w + c.i0] += gb * (1.0 - c.frac);
                dxp[r.i1 * in_w + c.i1] += gb * c.frac;
            }
        }
    }
    dx
}

/// `log(sigmoid(z))` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
