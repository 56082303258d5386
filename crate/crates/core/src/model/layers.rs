//! Forward and backward kernels on `[channel][time][freq]` row-major buffers.

/// Shape bookkeeping for one conv → ReLU → pool block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BlockShape {
    pub in_c: usize,
    pub out_c: usize,
    pub t: usize,
    pub f: usize,
    pub kt: usize,
    pub kf: usize,
    pub pt: usize,
    pub pf: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl BlockShape {
    pub fn out_t(&self) -> usize {
        self.t / self.pt
    }

    pub fn out_f(&self) -> usize {
        self.f / self.pf
    }

    pub fn n_weights(&self) -> usize {
        self.out_c * self.in_c * self.kt * self.kf
    }

    fn pads(&self) -> (isize, isize) {
        (((self.kt - 1) / 2) as isize, ((self.kf - 1) / 2) as isize)
    }

    /// Valid output index range `lo..hi` for a kernel tap at offset `shift`.
    fn span(len: usize, shift: isize) -> (usize, usize) {
        let lo = (-shift).max(0) as usize;
        let hi = (len as isize - shift).clamp(0, len as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// "Same"-padded stride-1 convolution: `out = W * input + b`.
pub(crate) fn conv_forward(s: &BlockShape, params: &[f64], input: &[f64], out: &mut [f64]) {
    let (t_len, f_len) = (s.t, s.f);
    let plane = t_len * f_len;
    let (pad_t, pad_f) = s.pads();
    let w = &params[s.w_off..s.w_off + s.n_weights()];
    let b = &params[s.b_off..s.b_off + s.out_c];
    for o in 0..s.out_c {
        let out_o = &mut out[o * plane..(o + 1) * plane];
        out_o.fill(b[o]);
        for c in 0..s.in_c {
            let in_c = &input[c * plane..(c + 1) * plane];
            let w_oc = &w[(o * s.in_c + c) * s.kt * s.kf..][..s.kt * s.kf];
            for dt in 0..s.kt {
                let st = dt as isize - pad_t;
                let (t_lo, t_hi) = BlockShape::span(t_len, st);
                for df in 0..s.kf {
                    let sf = df as isize - pad_f;
                    let (f_lo, f_hi) = BlockShape::span(f_len, sf);
                    let wv = w_oc[dt * s.kf + df];
                    for t in t_lo..t_hi {
                        let src_t = (t as isize + st) as usize;
                        let src = &in_c[src_t * f_len..(src_t + 1) * f_len];
                        let dst = &mut out_o[t * f_len..(t + 1) * f_len];
                        let src_lo = (f_lo as isize + sf) as usize;
                        for (d, &x) in dst[f_lo..f_hi].iter_mut().zip(&src[src_lo..src_lo + (f_hi - f_lo)]) {
                            *d += wv * x;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients into `grad` and, when `d_input` is
/// given, the input gradient.
pub(crate) fn conv_backward(
    s: &BlockShape,
    params: &[f64],
    input: &[f64],
    d_out: &[f64],
    grad: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let (t_len, f_len) = (s.t, s.f);
    let plane = t_len * f_len;
    let (pad_t, pad_f) = s.pads();
    let kk = s.kt * s.kf;
    if let Some(di) = d_input.as_deref_mut() {
        di.fill(0.0);
    }
    for o in 0..s.out_c {
        let d_o = &d_out[o * plane..(o + 1) * plane];
        grad[s.b_off + o] += d_o.iter().sum::<f64>();
        for c in 0..s.in_c {
            let in_c = &input[c * plane..(c + 1) * plane];
            let w_base = s.w_off + (o * s.in_c + c) * kk;
            for dt in 0..s.kt {
                let st = dt as isize - pad_t;
                let (t_lo, t_hi) = BlockShape::span(t_len, st);
                for df in 0..s.kf {
                    let sf = df as isize - pad_f;
                    let (f_lo, f_hi) = BlockShape::span(f_len, sf);
                    let n = f_hi - f_lo;
                    let src_lo = (f_lo as isize + sf) as usize;
                    let wi = w_base + dt * s.kf + df;
                    let wv = params[wi];
                    let mut acc = 0.0;
                    for t in t_lo..t_hi {
                        let src_t = (t as isize + st) as usize;
                        let g = &d_o[t * f_len + f_lo..][..n];
                        let x = &in_c[src_t * f_len + src_lo..][..n];
                        acc += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad[wi] += acc;
                    if let Some(di) = d_input.as_deref_mut() {
                        let di_c = &mut di[c * plane..(c + 1) * plane];
                        for t in t_lo..t_hi {
                            let src_t = (t as isize + st) as usize;
                            let g = &d_o[t * f_len + f_lo..][..n];
                            let dst = &mut di_c[src_t * f_len + src_lo..][..n];
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Floor-mode max pooling; records the flat argmax of every output cell.
pub(crate) fn max_pool_forward(s: &BlockShape, input: &[f64], out: &mut [f64], argmax: &mut [u32]) {
    let (ot, of) = (s.out_t(), s.out_f());
    for c in 0..s.out_c {
        let base = c * s.t * s.f;
        for i in 0..ot {
            for j in 0..of {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for a in 0..s.pt {
                    let row = base + (i * s.pt + a) * s.f + j * s.pf;
                    for b in 0..s.pf {
                        let v = input[row + b];
                        if v > best {
                            best = v;
                            best_at = row + b;
                        }
                    }
                }
                let k = (c * ot + i) * of + j;
                out[k] = best;
                argmax[k] = best_at as u32;
            }
        }
    }
}

pub(crate) fn avg_pool_forward(s: &BlockShape, input: &[f64], out: &mut [f64]) {
    let (ot, of) = (s.out_t(), s.out_f());
    let inv = 1.0 / (s.pt * s.pf) as f64;
    for c in 0..s.out_c {
        let base = c * s.t * s.f;
        for i in 0..ot {
            for j in 0..of {
                let mut acc = 0.0;
                for a in 0..s.pt {
                    let row = base + (i * s.pt + a) * s.f + j * s.pf;
                    acc += input[row..row + s.pf].iter().sum::<f64>();
                }
                out[(c * ot + i) * of + j] = acc * inv;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(s: &BlockShape, d_out: &[f64], d_input: &mut [f64]) {
    let (ot, of) = (s.out_t(), s.out_f());
    let inv = 1.0 / (s.pt * s.pf) as f64;
    d_input.fill(0.0);
    for c in 0..s.out_c {
        let base = c * s.t * s.f;
        for i in 0..ot {
            for j in 0..of {
                let g = d_out[(c * ot + i) * of + j] * inv;
                for a in 0..s.pt {
                    let row = base + (i * s.pt + a) * s.f + j * s.pf;
                    d_input[row..row + s.pf].iter_mut().for_each(|d| *d += g);
                }
            }
        }
    }
}
