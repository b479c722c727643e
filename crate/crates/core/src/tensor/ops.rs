//! Differentiable primitives. Each op validates shapes, computes the forward
//! value, and records a closure that routes d(loss)/d(output) into the
//! parents' gradient buffers.

use super::Tensor;

/// Lower clamp applied inside [`log`] so collapsed probabilities cannot
/// produce -inf.
pub const LOG_CLAMP: f64 = 1e-12;

/// Elementwise max(0, x). Subgradient at exactly 0 is 0.
pub fn relu(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    let shape = x.shape().to_vec();
    let xc = x.clone();
    Tensor::from_op(data, shape, vec![x.clone()], Box::new(move |g| {
        let xv = xc.data();
        let gx: Vec<f64> = g
            .iter()
            .zip(xv.iter())
            .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
            .collect();
        drop(xv);
        xc.accumulate_grad(&gx);
    }))
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let shape = a.shape().to_vec();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(data, shape, vec![a.clone(), b.clone()], Box::new(move |g| {
        ac.accumulate_grad(g);
        bc.accumulate_grad(g);
    }))
}

/// Elementwise product of two same-shape tensors (the ⊙ of the scale
/// vectors in feature and score chaining).
pub fn elementwise_scale(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.shape(),
        b.shape(),
        "elementwise_scale: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let shape = a.shape().to_vec();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(data, shape, vec![a.clone(), b.clone()], Box::new(move |g| {
        let (av, bv) = (ac.data(), bc.data());
        let ga: Vec<f64> = g.iter().zip(bv.iter()).map(|(gi, y)| gi * y).collect();
        let gb: Vec<f64> = g.iter().zip(av.iter()).map(|(gi, x)| gi * x).collect();
        drop(av);
        drop(bv);
        ac.accumulate_grad(&ga);
        bc.accumulate_grad(&gb);
    }))
}

/// Multiplication by a compile-time-known constant.
pub fn mul_scalar(x: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v * c).collect();
    let shape = x.shape().to_vec();
    let xc = x.clone();
    Tensor::from_op(data, shape, vec![x.clone()], Box::new(move |g| {
        let gx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
        xc.accumulate_grad(&gx);
    }))
}

/// Affine map: y = W x + b with W: [m, n], x: [n], b: [m].
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let n = x.numel();
    assert_eq!(w.shape().len(), 2, "linear: weight must be 2-d");
    let (m, wn) = (w.shape()[0], w.shape()[1]);
    assert_eq!(wn, n, "linear: weight shape {:?} does not accept input of length {n}", w.shape());
    assert_eq!(b.numel(), m, "linear: bias length {} != {m}", b.numel());

    let mut out = b.to_vec();
    {
        let xv = x.data();
        let wv = w.data();
        for i in 0..m {
            let row = &wv[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * xv[j];
            }
            out[i] += acc;
        }
    }

    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    Tensor::from_op(out, vec![m], vec![x.clone(), w.clone(), b.clone()], Box::new(move |g| {
        let xv = xc.data();
        let wv = wc.data();
        let mut gx = vec![0.0; n];
        let mut gw = vec![0.0; m * n];
        for i in 0..m {
            let gi = g[i];
            let row = &wv[i * n..(i + 1) * n];
            let grow = &mut gw[i * n..(i + 1) * n];
            for j in 0..n {
                gx[j] += gi * row[j];
                grow[j] = gi * xv[j];
            }
        }
        drop(xv);
        drop(wv);
        xc.accumulate_grad(&gx);
        wc.accumulate_grad(&gw);
        bc.accumulate_grad(g);
    }))
}

/// 2-d convolution with square kernel semantics taken from the shapes:
/// x: [c_in, h, w], weight: [c_out, c_in, kh, kw], bias: [c_out].
/// Output: [c_out, h_out, w_out] with `d_out = (d + 2*pad - k) / stride + 1`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    assert_eq!(x.shape().len(), 3, "conv2d: input must be [c, h, w], got {:?}", x.shape());
    assert_eq!(w.shape().len(), 4, "conv2d: weight must be [co, ci, kh, kw], got {:?}", w.shape());
    assert!(stride >= 1, "conv2d: stride must be >= 1");
    let (c_in, h_in, w_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(wci, c_in, "conv2d: weight expects {wci} input channels, input has {c_in}");
    assert_eq!(b.numel(), c_out, "conv2d: bias length {} != {c_out}", b.numel());
    assert!(
        h_in + 2 * pad >= kh && w_in + 2 * pad >= kw,
        "conv2d: kernel {kh}x{kw} larger than padded input {h_in}x{w_in} (pad {pad})"
    );
    let h_out = (h_in + 2 * pad - kh) / stride + 1;
    let w_out = (w_in + 2 * pad - kw) / stride + 1;

    // Valid output range along one axis for a given kernel offset k:
    // indices o with 0 <= o*stride + k - pad < extent.
    let axis_range = |extent: usize, out_len: usize, k: usize| -> (usize, usize) {
        let s = stride as i64;
        let shift = k as i64 - pad as i64;
        let lo = if shift < 0 { ((-shift) + s - 1) / s } else { 0 };
        let hi = (extent as i64 - 1 - shift).div_euclid(s).min(out_len as i64 - 1);
        if hi < lo {
            (1, 0) // empty
        } else {
            (lo as usize, hi as usize)
        }
    };

    let mut out = vec![0.0; c_out * h_out * w_out];
    {
        let xv = x.data();
        let wv = w.data();
        let bv = b.data();
        for co in 0..c_out {
            let out_ch = &mut out[co * h_out * w_out..(co + 1) * h_out * w_out];
            out_ch.fill(bv[co]);
            for ci in 0..c_in {
                let x_ch = &xv[ci * h_in * w_in..(ci + 1) * h_in * w_in];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = axis_range(h_in, h_out, ky);
                    if oy_lo > oy_hi {
                        continue;
                    }
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = axis_range(w_in, w_out, kx);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        let wval = wv[((co * c_in + ci) * kh + ky) * kw + kx];
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = &x_ch[iy * w_in..(iy + 1) * w_in];
                            let orow = &mut out_ch[oy * w_out..(oy + 1) * w_out];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo + 1;
                                let xs = &xrow[ix0..ix0 + len];
                                let os = &mut orow[ox_lo..ox_lo + len];
                                for (o, xi) in os.iter_mut().zip(xs) {
                                    *o += wval * xi;
                                }
                            } else {
                                for ox in ox_lo..=ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    orow[ox] += wval * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    Tensor::from_op(
        out,
        vec![c_out, h_out, w_out],
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let xv = xc.data();
            let wv = wc.data();
            let mut gx = vec![0.0; c_in * h_in * w_in];
            let mut gw = vec![0.0; c_out * c_in * kh * kw];
            let mut gb = vec![0.0; c_out];

            let axis_range = |extent: usize, out_len: usize, k: usize| -> (usize, usize) {
                let s = stride as i64;
                let shift = k as i64 - pad as i64;
                let lo = if shift < 0 { ((-shift) + s - 1) / s } else { 0 };
                let hi = (extent as i64 - 1 - shift).div_euclid(s).min(out_len as i64 - 1);
                if hi < lo {
                    (1, 0)
                } else {
                    (lo as usize, hi as usize)
                }
            };

            for co in 0..c_out {
                let g_ch = &g[co * h_out * w_out..(co + 1) * h_out * w_out];
                gb[co] += g_ch.iter().sum::<f64>();
                for ci in 0..c_in {
                    let x_ch = &xv[ci * h_in * w_in..(ci + 1) * h_in * w_in];
                    let gx_ch = &mut gx[ci * h_in * w_in..(ci + 1) * h_in * w_in];
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = axis_range(h_in, h_out, ky);
                        if oy_lo > oy_hi {
                            continue;
                        }
                        for kx in 0..kw {
                            let (ox_lo, ox_hi) = axis_range(w_in, w_out, kx);
                            if ox_lo > ox_hi {
                                continue;
                            }
                            let widx = ((co * c_in + ci) * kh + ky) * kw + kx;
                            let wval = wv[widx];
                            let mut wacc = 0.0;
                            for oy in oy_lo..=oy_hi {
                                let iy = oy * stride + ky - pad;
                                let grow = &g_ch[oy * w_out..(oy + 1) * w_out];
                                if stride == 1 {
                                    let ix0 = ox_lo + kx - pad;
                                    let len = ox_hi - ox_lo + 1;
                                    let xs = &x_ch[iy * w_in + ix0..iy * w_in + ix0 + len];
                                    let gxs = &mut gx_ch[iy * w_in + ix0..iy * w_in + ix0 + len];
                                    let gs = &grow[ox_lo..ox_lo + len];
                                    for i in 0..len {
                                        gxs[i] += wval * gs[i];
                                        wacc += gs[i] * xs[i];
                                    }
                                } else {
                                    for ox in ox_lo..=ox_hi {
                                        let ix = ox * stride + kx - pad;
                                        gx_ch[iy * w_in + ix] += wval * grow[ox];
                                        wacc += grow[ox] * x_ch[iy * w_in + ix];
                                    }
                                }
                            }
                            gw[widx] += wacc;
                        }
                    }
                }
            }
            drop(xv);
            drop(wv);
            xc.accumulate_grad(&gx);
            wc.accumulate_grad(&gw);
            bc.accumulate_grad(&gb);
        }),
    )
}

/// Max pooling over k×k windows. Gradient routes to the argmax cell of each
/// window (first scan-order maximum on ties).
pub fn max_pool(x: &Tensor, k: usize, stride: usize) -> Tensor {
    assert_eq!(x.shape().len(), 3, "max_pool: input must be [c, h, w]");
    assert!(k >= 1 && stride >= 1);
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h >= k && w >= k, "max_pool: window {k} larger than input {h}x{w}");
    let h_out = (h - k) / stride + 1;
    let w_out = (w - k) / stride + 1;

    let mut out = vec![0.0; c * h_out * w_out];
    let mut argmax = vec![0usize; c * h_out * w_out];
    {
        let xv = x.data();
        for ci in 0..c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (ci * h + oy * stride + dy) * w + ox * stride + dx;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * h_out + oy) * w_out + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }

    let xc = x.clone();
    let n_in = c * h * w;
    Tensor::from_op(out, vec![c, h_out, w_out], vec![x.clone()], Box::new(move |g| {
        let mut gx = vec![0.0; n_in];
        for (gi, idx) in g.iter().zip(&argmax) {
            gx[*idx] += gi;
        }
        xc.accumulate_grad(&gx);
    }))
}

/// Spatial mean per channel: [c, h, w] -> [c].
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    assert_eq!(x.shape().len(), 3, "global_avg_pool: input must be [c, h, w]");
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let area = (h * w) as f64;
    let data: Vec<f64> = {
        let xv = x.data();
        (0..c)
            .map(|ci| xv[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / area)
            .collect()
    };
    let xc = x.clone();
    Tensor::from_op(data, vec![c], vec![x.clone()], Box::new(move |g| {
        let mut gx = vec![0.0; c * h * w];
        for ci in 0..c {
            let gv = g[ci] / area;
            for cell in &mut gx[ci * h * w..(ci + 1) * h * w] {
                *cell = gv;
            }
        }
        xc.accumulate_grad(&gx);
    }))
}

/// Numerically stable softmax over a 1-d tensor.
pub fn softmax(x: &Tensor) -> Tensor {
    assert_eq!(x.shape().len(), 1, "softmax: input must be 1-d, got {:?}", x.shape());
    let xv = x.to_vec();
    let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xv.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / total).collect();

    let shape = x.shape().to_vec();
    let xc = x.clone();
    let p_saved = p.clone();
    Tensor::from_op(p, shape, vec![x.clone()], Box::new(move |g| {
        let dot: f64 = g.iter().zip(&p_saved).map(|(gi, pi)| gi * pi).sum();
        let gx: Vec<f64> = g.iter().zip(&p_saved).map(|(gi, pi)| pi * (gi - dot)).collect();
        xc.accumulate_grad(&gx);
    }))
}

/// Elementwise natural log with the input clamped below at [`LOG_CLAMP`].
/// In the clamped region the derivative is 0 (the output is constant there).
pub fn log(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v.max(LOG_CLAMP).ln()).collect();
    let shape = x.shape().to_vec();
    let xc = x.clone();
    Tensor::from_op(data, shape, vec![x.clone()], Box::new(move |g| {
        let xv = xc.data();
        let gx: Vec<f64> = g
            .iter()
            .zip(xv.iter())
            .map(|(gi, xi)| if *xi > LOG_CLAMP { gi / xi } else { 0.0 })
            .collect();
        drop(xv);
        xc.accumulate_grad(&gx);
    }))
}

/// Sum of all entries, as a scalar tensor.
pub fn sum(x: &Tensor) -> Tensor {
    let total: f64 = x.data().iter().sum();
    let n = x.numel();
    let xc = x.clone();
    Tensor::from_op(vec![total], vec![1], vec![x.clone()], Box::new(move |g| {
        xc.accumulate_grad(&vec![g[0]; n]);
    }))
}

/// Contiguous sub-range of a 1-d tensor.
pub fn slice(x: &Tensor, start: usize, len: usize) -> Tensor {
    assert_eq!(x.shape().len(), 1, "slice: input must be 1-d");
    let n = x.numel();
    assert!(start + len <= n, "slice: [{start}, {}) out of range for length {n}", start + len);
    let data = x.data()[start..start + len].to_vec();
    let xc = x.clone();
    Tensor::from_op(data, vec![len], vec![x.clone()], Box::new(move |g| {
        let mut gx = vec![0.0; n];
        gx[start..start + len].copy_from_slice(g);
        xc.accumulate_grad(&gx);
    }))
}
