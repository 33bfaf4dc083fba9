//! Per-sample layers with explicit forward and adjoint passes.
//!
//! Activations are `[C, H, W]` for spatial layers and flat vectors for
//! linear layers. Parameters live in a [`ParamStore`] and are referenced by
//! name; gradients go to an optional [`Grads`] sink so frozen networks can
//! pass input gradients through without touching their parameters.

use super::params::{Grads, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        w: String,
        b: String,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        w: String,
        b: String,
        in_f: usize,
        out_f: usize,
    },
    LeakyRelu(f64),
    Tanh,
    Upsample2x,
    Reshape(Vec<usize>),
}

pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + kk - pad < in_len
    let lo = if pad > kk { (pad - kk).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > kk {
        ((in_len + pad - kk - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl Layer {
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        // (name, shape, fan_in); fan_in == 0 marks a bias
        match self {
            Layer::Conv {
                w,
                b,
                in_c,
                out_c,
                k,
                ..
            } => vec![
                (w.clone(), vec![*out_c, *in_c, *k, *k], in_c * k * k),
                (b.clone(), vec![*out_c], 0),
            ],
            Layer::Linear { w, b, in_f, out_f } => vec![
                (w.clone(), vec![*out_f, *in_f], *in_f),
                (b.clone(), vec![*out_f], 0),
            ],
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv {
                w,
                b,
                in_c,
                out_c,
                k,
                stride,
                pad,
            } => {
                let (c, h, wd) = dims3(x);
                debug_assert_eq!(c, *in_c);
                let (oh, ow) = (conv_out(h, *k, *stride, *pad), conv_out(wd, *k, *stride, *pad));
                let wt = store.value(w).data();
                let bias = store.value(b).data();
                let xin = x.data();
                let mut out = vec![0.0; out_c * oh * ow];
                for oc in 0..*out_c {
                    let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
                    plane.fill(bias[oc]);
                    for ic in 0..c {
                        let xplane = &xin[ic * h * wd..(ic + 1) * h * wd];
                        for ky in 0..*k {
                            let (y0, y1) = valid_range(oh, h, ky, *stride, *pad);
                            for kx in 0..*k {
                                let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                                let (x0, x1) = valid_range(ow, wd, kx, *stride, *pad);
                                for oy in y0..y1 {
                                    let iy = oy * stride + ky - pad;
                                    let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                    let irow = &xplane[iy * wd..(iy + 1) * wd];
                                    if *stride == 1 {
                                        let off = x0 + kx - pad;
                                        for (o, i) in orow[x0..x1].iter_mut().zip(&irow[off..off + (x1 - x0)]) {
                                            *o += wv * i;
                                        }
                                    } else {
                                        for ox in x0..x1 {
                                            orow[ox] += wv * irow[ox * stride + kx - pad];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::from_vec(&[*out_c, oh, ow], out).expect("conv output shape")
            }
            Layer::Linear { w, b, in_f, out_f } => {
                debug_assert_eq!(x.len(), *in_f);
                let wt = store.value(w).data();
                let bias = store.value(b).data();
                let xin = x.data();
                let out = (0..*out_f)
                    .map(|o| {
                        let row = &wt[o * in_f..(o + 1) * in_f];
                        bias[o] + row.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                Tensor::vector(out)
            }
            Layer::LeakyRelu(slope) => {
                let data = x.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
                Tensor::from_vec(x.shape(), data).expect("same shape")
            }
            Layer::Tanh => {
                let data = x.data().iter().map(|v| v.tanh()).collect();
                Tensor::from_vec(x.shape(), data).expect("same shape")
            }
            Layer::Upsample2x => {
                let (c, h, wd) = dims3(x);
                let (oh, ow) = (2 * h, 2 * wd);
                let xin = x.data();
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        let irow = &xin[(ch * h + oy / 2) * wd..(ch * h + oy / 2 + 1) * wd];
                        let orow = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            *o = irow[ox / 2];
                        }
                    }
                }
                Tensor::from_vec(&[c, oh, ow], out).expect("upsample shape")
            }
            Layer::Reshape(shape) => x.clone().reshaped(shape),
        }
    }

    /// Adjoint pass: given the layer input `x`, its output `y` and `dy`,
    /// returns `dx` and accumulates parameter gradients into `sink`.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        y: &Tensor,
        dy: &Tensor,
        sink: Option<&mut Grads>,
    ) -> Tensor {
        match self {
            Layer::Conv {
                w,
                b,
                in_c: _,
                out_c,
                k,
                stride,
                pad,
            } => {
                let (c, h, wd) = dims3(x);
                let (_, oh, ow) = dims3(dy);
                let wt = store.value(w).data();
                let xin = x.data();
                let g = dy.data();
                let mut dx = vec![0.0; c * h * wd];
                let mut dw = sink.as_ref().map(|_| vec![0.0; wt.len()]);
                for oc in 0..*out_c {
                    let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                    for ic in 0..c {
                        let xplane = &xin[ic * h * wd..(ic + 1) * h * wd];
                        let dxplane = &mut dx[ic * h * wd..(ic + 1) * h * wd];
                        for ky in 0..*k {
                            let (y0, y1) = valid_range(oh, h, ky, *stride, *pad);
                            for kx in 0..*k {
                                let widx = ((oc * c + ic) * k + ky) * k + kx;
                                let wv = wt[widx];
                                let (x0, x1) = valid_range(ow, wd, kx, *stride, *pad);
                                let mut acc = 0.0;
                                for oy in y0..y1 {
                                    let iy = oy * stride + ky - pad;
                                    let grow = &gplane[oy * ow..(oy + 1) * ow];
                                    let irow = &xplane[iy * wd..(iy + 1) * wd];
                                    let drow = &mut dxplane[iy * wd..(iy + 1) * wd];
                                    if *stride == 1 {
                                        let off = x0 + kx - pad;
                                        let n = x1 - x0;
                                        for ((gv, iv), dv) in grow[x0..x1]
                                            .iter()
                                            .zip(&irow[off..off + n])
                                            .zip(&mut drow[off..off + n])
                                        {
                                            acc += gv * iv;
                                            *dv += wv * gv;
                                        }
                                    } else {
                                        for ox in x0..x1 {
                                            let ix = ox * stride + kx - pad;
                                            acc += grow[ox] * irow[ix];
                                            drow[ix] += wv * grow[ox];
                                        }
                                    }
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                if let (Some(sink), Some(dw)) = (sink, dw) {
                    sink.accumulate(w, store.value(w).shape(), &dw);
                    let db: Vec<f64> = (0..*out_c)
                        .map(|oc| g[oc * oh * ow..(oc + 1) * oh * ow].iter().sum())
                        .collect();
                    sink.accumulate(b, &[*out_c], &db);
                }
                Tensor::from_vec(x.shape(), dx).expect("conv dx shape")
            }
            Layer::Linear { w, b, in_f, out_f } => {
                let wt = store.value(w).data();
                let xin = x.data();
                let g = dy.data();
                let mut dx = vec![0.0; *in_f];
                for o in 0..*out_f {
                    let row = &wt[o * in_f..(o + 1) * in_f];
                    let go = g[o];
                    for (d, wv) in dx.iter_mut().zip(row) {
                        *d += wv * go;
                    }
                }
                if let Some(sink) = sink {
                    let mut dw = vec![0.0; wt.len()];
                    for o in 0..*out_f {
                        let go = g[o];
                        for (d, xv) in dw[o * in_f..(o + 1) * in_f].iter_mut().zip(xin) {
                            *d = go * xv;
                        }
                    }
                    sink.accumulate(w, &[*out_f, *in_f], &dw);
                    sink.accumulate(b, &[*out_f], g);
                }
                Tensor::from_vec(x.shape(), dx).expect("linear dx shape")
            }
            Layer::LeakyRelu(slope) => {
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
                    .collect();
                Tensor::from_vec(x.shape(), data).expect("same shape")
            }
            Layer::Tanh => {
                let data = y
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&t, &g)| g * (1.0 - t * t))
                    .collect();
                Tensor::from_vec(x.shape(), data).expect("same shape")
            }
            Layer::Upsample2x => {
                let (c, h, wd) = dims3(x);
                let ow = 2 * wd;
                let g = dy.data();
                let mut dx = vec![0.0; c * h * wd];
                for ch in 0..c {
                    for oy in 0..2 * h {
                        let grow = &g[(ch * 2 * h + oy) * ow..(ch * 2 * h + oy + 1) * ow];
                        let drow = &mut dx[(ch * h + oy / 2) * wd..(ch * h + oy / 2 + 1) * wd];
                        for (ox, gv) in grow.iter().enumerate() {
                            drow[ox / 2] += gv;
                        }
                    }
                }
                Tensor::from_vec(x.shape(), dx).expect("upsample dx shape")
            }
            Layer::Reshape(_) => dy.clone().reshaped(x.shape()),
        }
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    match t.shape() {
        &[c, h, w] => (c, h, w),
        s => panic!("expected a [C, H, W] activation, got {s:?}"),
    }
}
