//! Convolution, pooling and normalization primitives on NCHW tensors.

use crate::error::{NdError, Result};
use crate::real::{matmul_into, matmul_nt_into, matmul_tn_into, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Geometry of a square-kernel convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ow·stride + kj − pad` lies
/// inside `[0, w)`.
fn valid_range(g: &Geom, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj {
        (g.pad - kj).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let hw = g.col_cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(g, kj);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (v, s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of columns back onto the input plane (adjoint of `im2col`).
fn col2im<T: Real>(cols: &[T], g: &Geom, x: &mut [T]) {
    let hw = g.col_cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(g, kj);
                if lo >= hi {
                    continue;
                }
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let line = &src[oh * g.wo + lo..oh * g.wo + hi];
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + line.len()].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(line) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn nchw(tape_shape: &[usize], layer: &str) -> Result<(usize, usize, usize, usize)> {
    match *tape_shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(NdError::Shape {
            layer: layer.to_string(),
            got: tape_shape.to_vec(),
            expected: "[N, C, H, W]".into(),
        }),
    }
}

fn channel_sums<T: Real>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for s in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let base = (s * c + ch) * plane;
            let total: f64 = g[base..base + plane].iter().map(|v| v.f64()).sum();
            *acc = *acc + T::lit(total);
        }
    }
    out
}

impl<T: Real> Tape<T> {
    /// 2-D convolution. `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, wd) = nchw(self.shape(x), "conv2d")?;
        let sw = self.shape(w).to_vec();
        let bad = |expected: String| NdError::Shape {
            layer: "conv2d".into(),
            got: vec![n, ci, h, wd],
            expected,
        };
        if sw.len() != 4 || sw[1] != ci || sw[2] != sw[3] || self.shape(b) != [sw[0]] {
            return Err(bad(format!("[N, {}, H, W] for weight {:?}", sw.get(1).copied().unwrap_or(0), sw)));
        }
        let (co, k) = (sw[0], sw[2]);
        let g = Geom::new(ci, h, wd, k, stride, pad)
            .ok_or_else(|| bad(format!("spatial size >= kernel {k} (padding {pad})")))?;
        let (rows, hw) = (g.col_rows(), g.col_cols());
        let in_len = ci * h * wd;
        let out_len = co * hw;
        let mut out = vec![T::zero(); n * out_len];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * hw }];
            for s in 0..n {
                let dst = &mut out[s * out_len..(s + 1) * out_len];
                for (ch, plane) in dst.chunks_exact_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v = bv[ch]);
                }
                let src = &xv[s * in_len..(s + 1) * in_len];
                if g.is_pointwise() {
                    matmul_into(co, rows, hw, wv, src, dst, true);
                } else {
                    im2col(src, &g, &mut cols);
                    matmul_into(co, rows, hw, wv, &cols, dst, true);
                }
            }
        }
        let out = Tensor::new(vec![n, co, g.ho, g.wo], out)?;
        Ok(self.push(
            "conv2d",
            &[x, w, b],
            out,
            Box::new(move |ctx, grad| {
                let (xv, wv) = (ctx.input(0).data(), ctx.input(1).data());
                let need_x = ctx.needs_grad(0);
                let mut gx = vec![T::zero(); if need_x { n * in_len } else { 0 }];
                let mut gw = vec![T::zero(); co * rows];
                let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * hw }];
                let mut gcols = vec![T::zero(); if need_x { cols.len() } else { 0 }];
                for s in 0..n {
                    let gy = &grad[s * out_len..(s + 1) * out_len];
                    let src = &xv[s * in_len..(s + 1) * in_len];
                    if g.is_pointwise() {
                        matmul_nt_into(co, hw, rows, gy, src, &mut gw, true);
                        if need_x {
                            let dst = &mut gx[s * in_len..(s + 1) * in_len];
                            matmul_tn_into(rows, co, hw, wv, gy, dst, false);
                        }
                    } else {
                        im2col(src, &g, &mut cols);
                        matmul_nt_into(co, hw, rows, gy, &cols, &mut gw, true);
                        if need_x {
                            let dst = &mut gx[s * in_len..(s + 1) * in_len];
                            matmul_tn_into(rows, co, hw, wv, gy, &mut gcols, false);
                            col2im(&gcols, &g, dst);
                        }
                    }
                }
                let gb = channel_sums(grad, n, co, hw);
                vec![need_x.then_some(gx), Some(gw), Some(gb)]
            }),
        ))
    }

    /// Transposed 2-D convolution (adjoint of `conv2d` in its input).
    /// `w: [Ci, Co, k, k]`, `b: [Co]`; output side `(H - 1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, wd) = nchw(self.shape(x), "conv_transpose2d")?;
        let sw = self.shape(w).to_vec();
        let bad = |expected: String| NdError::Shape {
            layer: "conv_transpose2d".into(),
            got: vec![n, ci, h, wd],
            expected,
        };
        if sw.len() != 4 || sw[0] != ci || sw[2] != sw[3] || self.shape(b) != [sw[1]] {
            return Err(bad(format!("[N, {}, H, W] for weight {:?}", sw.first().copied().unwrap_or(0), sw)));
        }
        let (co, k) = (sw[1], sw[2]);
        if stride == 0 || h == 0 || wd == 0 || (h - 1) * stride + k < 2 * pad + 1 {
            return Err(bad("non-empty output".into()));
        }
        let (ho, wo) = ((h - 1) * stride + k - 2 * pad, (wd - 1) * stride + k - 2 * pad);
        // geometry of the forward convolution this layer is the adjoint of
        let g = Geom::new(co, ho, wo, k, stride, pad)
            .filter(|g| g.ho == h && g.wo == wd)
            .ok_or_else(|| bad("consistent transposed geometry".into()))?;
        let (rows, hw) = (g.col_rows(), g.col_cols());
        let in_len = ci * hw;
        let out_len = co * ho * wo;
        let mut out = vec![T::zero(); n * out_len];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            let mut cols = vec![T::zero(); rows * hw];
            for s in 0..n {
                let dst = &mut out[s * out_len..(s + 1) * out_len];
                for (ch, plane) in dst.chunks_exact_mut(ho * wo).enumerate() {
                    plane.iter_mut().for_each(|v| *v = bv[ch]);
                }
                let src = &xv[s * in_len..(s + 1) * in_len];
                matmul_tn_into(rows, ci, hw, wv, src, &mut cols, false);
                col2im(&cols, &g, dst);
            }
        }
        let out = Tensor::new(vec![n, co, ho, wo], out)?;
        Ok(self.push(
            "conv_transpose2d",
            &[x, w, b],
            out,
            Box::new(move |ctx, grad| {
                let (xv, wv) = (ctx.input(0).data(), ctx.input(1).data());
                let mut gx = vec![T::zero(); n * in_len];
                let mut gw = vec![T::zero(); ci * rows];
                let mut cols = vec![T::zero(); rows * hw];
                for s in 0..n {
                    let gy = &grad[s * out_len..(s + 1) * out_len];
                    im2col(gy, &g, &mut cols);
                    let src = &xv[s * in_len..(s + 1) * in_len];
                    matmul_into(ci, rows, hw, wv, &cols, &mut gx[s * in_len..(s + 1) * in_len], false);
                    matmul_nt_into(ci, hw, rows, src, &cols, &mut gw, true);
                }
                let gb = channel_sums(grad, n, co, ho * wo);
                vec![Some(gx), Some(gw), Some(gb)]
            }),
        ))
    }

    /// 2×2 average pooling with stride 2. Spatial sides must be even.
    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "avg_pool2d")?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(NdError::Shape {
                layer: "avg_pool2d".into(),
                got: vec![n, c, h, w],
                expected: "even spatial dimensions".into(),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                    let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * wo + j] = (a + b) * quarter;
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(
            "avg_pool2d",
            &[x],
            out,
            Box::new(move |_, grad| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &grad[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = src[i * wo + j] * quarter;
                            dst[2 * i * w + 2 * j] = v;
                            dst[2 * i * w + 2 * j + 1] = v;
                            dst[(2 * i + 1) * w + 2 * j] = v;
                            dst[(2 * i + 1) * w + 2 * j + 1] = v;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Group normalization over `[N, C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "group_norm")?;
        if groups == 0 || c % groups != 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NdError::Shape {
                layer: format!("group_norm({groups} groups)"),
                got: vec![n, c, h, w],
                expected: format!("channel count divisible by {groups} matching affine params {:?}", self.shape(gamma)),
            });
        }
        let plane = h * w;
        let per_group = c / groups;
        let span = per_group * plane;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); n * c * plane];
        let mut rstd = vec![0.0f64; n * groups];
        let mut out = vec![T::zero(); n * c * plane];
        for s in 0..n {
            for gi in 0..groups {
                let base = (s * c + gi * per_group) * plane;
                let seg = &xv[base..base + span];
                let mean = seg.iter().map(|v| v.f64()).sum::<f64>() / span as f64;
                let var = seg.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / span as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[s * groups + gi] = r;
                let (mean_t, r_t) = (T::lit(mean), T::lit(r));
                for k in 0..per_group {
                    let ch = gi * per_group + k;
                    let off = base + k * plane;
                    let (ga, be) = (gv[ch], bv[ch]);
                    for i in off..off + plane {
                        let xh = (xv[i] - mean_t) * r_t;
                        xhat[i] = xh;
                        out[i] = xh * ga + be;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            "group_norm",
            &[x, gamma, beta],
            out,
            Box::new(move |ctx, grad| {
                let gv = ctx.input(1).data();
                let mut gx = vec![T::zero(); n * c * plane];
                let mut ggamma = vec![0.0f64; c];
                let mut gbeta = vec![0.0f64; c];
                for s in 0..n {
                    for gi in 0..groups {
                        let base = (s * c + gi * per_group) * plane;
                        let mut mean_d = 0.0f64;
                        let mut mean_dx = 0.0f64;
                        for k in 0..per_group {
                            let ch = gi * per_group + k;
                            let off = base + k * plane;
                            let (mut sg, mut sb) = (0.0f64, 0.0f64);
                            for i in off..off + plane {
                                let dy = grad[i].f64();
                                sg += dy * xhat[i].f64();
                                sb += dy;
                            }
                            ggamma[ch] += sg;
                            gbeta[ch] += sb;
                            let ga = gv[ch].f64();
                            mean_d += sb * ga;
                            mean_dx += sg * ga;
                        }
                        mean_d /= span as f64;
                        mean_dx /= span as f64;
                        let r = rstd[s * groups + gi];
                        let (md, mdx) = (T::lit(mean_d), T::lit(mean_dx));
                        for k in 0..per_group {
                            let ch = gi * per_group + k;
                            let off = base + k * plane;
                            let ga = gv[ch];
                            let rt = T::lit(r);
                            for i in off..off + plane {
                                gx[i] = rt * (grad[i] * ga - md - xhat[i] * mdx);
                            }
                        }
                    }
                }
                vec![
                    Some(gx),
                    Some(ggamma.into_iter().map(T::lit).collect()),
                    Some(gbeta.into_iter().map(T::lit).collect()),
                ]
            }),
        ))
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// per-channel batch mean and (biased) variance for running averages.
    pub fn batch_norm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = nchw(self.shape(x), "batch_norm2d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || n * h * w < 2 {
            return Err(NdError::Shape {
                layer: "batch_norm2d".into(),
                got: vec![n, c, h, w],
                expected: format!("at least 2 values per channel and affine params of shape [{c}]"),
            });
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut means = vec![0.0f64; c];
        let mut vars = vec![0.0f64; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                means[ch] += xv[base..base + plane].iter().map(|v| v.f64()).sum::<f64>();
            }
        }
        means.iter_mut().for_each(|m| *m /= count);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                vars[ch] += xv[base..base + plane]
                    .iter()
                    .map(|v| (v.f64() - means[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        vars.iter_mut().for_each(|v| *v /= count);
        let rstd: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f64; n * c * plane];
        let mut out = vec![T::zero(); n * c * plane];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xv[i].f64() - means[ch]) * rstd[ch];
                    xhat[i] = xh;
                    out[i] = T::lit(xh * gv[ch].f64() + bv[ch].f64());
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let var = self.push(
            "batch_norm2d",
            &[x, gamma, beta],
            out,
            Box::new(move |ctx, grad| {
                let gv = ctx.input(1).data();
                let mut ggamma = vec![0.0f64; c];
                let mut gbeta = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            let dy = grad[i].f64();
                            ggamma[ch] += dy * xhat[i];
                            gbeta[ch] += dy;
                        }
                    }
                }
                let mut gx = vec![T::zero(); n * c * plane];
                for s in 0..n {
                    for ch in 0..c {
                        let g = gv[ch].f64();
                        let mean_d = gbeta[ch] * g / count;
                        let mean_dx = ggamma[ch] * g / count;
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            let d = grad[i].f64() * g;
                            gx[i] = T::lit(rstd[ch] * (d - mean_d - xhat[i] * mean_dx));
                        }
                    }
                }
                vec![
                    Some(gx),
                    Some(ggamma.into_iter().map(T::lit).collect()),
                    Some(gbeta.into_iter().map(T::lit).collect()),
                ]
            }),
        );
        Ok((var, means, vars))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "batch_norm2d")?;
        if self.shape(gamma) != [c] || mean.len() != c || var.len() != c {
            return Err(NdError::Shape {
                layer: "batch_norm2d".into(),
                got: vec![n, c, h, w],
                expected: format!("running statistics of length {c}"),
            });
        }
        let plane = h * w;
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v.f64() + eps).sqrt()).collect();
        let mean: Vec<f64> = mean.iter().map(|v| v.f64()).collect();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); n * c * plane];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xv[i].f64() - mean[ch]) * rstd[ch];
                    out[i] = T::lit(xh * gv[ch].f64() + bv[ch].f64());
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            "batch_norm2d_eval",
            &[x, gamma, beta],
            out,
            Box::new(move |ctx, grad| {
                let (xv, gv) = (ctx.input(0).data(), ctx.input(1).data());
                let mut gx = vec![T::zero(); n * c * plane];
                let mut ggamma = vec![0.0f64; c];
                let mut gbeta = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            let dy = grad[i].f64();
                            gx[i] = T::lit(dy * gv[ch].f64() * rstd[ch]);
                            ggamma[ch] += dy * (xv[i].f64() - mean[ch]) * rstd[ch];
                            gbeta[ch] += dy;
                        }
                    }
                }
                vec![
                    Some(gx),
                    Some(ggamma.into_iter().map(T::lit).collect()),
                    Some(gbeta.into_iter().map(T::lit).collect()),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| (i as f64).sin()).collect();
        let x = tape.constant(Tensor::from_f64(&[2, 3, 4, 5], &data).unwrap());
        let mut wdata = vec![0.0; 3 * 3];
        for c in 0..3 {
            wdata[c * 3 + c] = 1.0;
        }
        let w = tape.constant(Tensor::from_f64(&[3, 3, 1, 1], &wdata).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);

        // 3×3 kernel with a single centre tap and same padding
        let mut w3 = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            w3[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let w3 = tape.constant(Tensor::from_f64(&[3, 3, 3, 3], &w3).unwrap());
        let y3 = tape.conv2d(x, w3, b, 1, 1).unwrap();
        assert_eq!(tape.value(y3).data(), &data[..]);
    }

    #[test]
    fn conv_output_geometry() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let w = tape.constant(Tensor::zeros(&[32, 3, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[32]));
        let y = tape.conv2d(x, w, b, 4, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 32, 16, 16]);
        let wt = tape.constant(Tensor::zeros(&[32, 3, 4, 4]));
        let bt = tape.constant(Tensor::zeros(&[3]));
        let up = tape.conv_transpose2d(y, wt, bt, 4, 0).unwrap();
        assert_eq!(tape.shape(up), &[1, 3, 64, 64]);
    }

    #[test]
    fn conv_shape_error_names_layer_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let msg = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("conv2d") && msg.contains("[1, 2, 8, 8]") && msg.contains("[4, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn avg_pool_preserves_constants() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 6, 4], 0.3));
        let y = tape.avg_pool2d(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 3, 2]);
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let odd = tape.constant(Tensor::full(&[1, 1, 5, 4], 0.3));
        assert!(tape.avg_pool2d(odd).is_err());
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 8 * 3 * 3).map(|i| ((i * 7919) % 101) as f64 * 0.37 - 4.0).collect();
        let x = tape.constant(Tensor::from_f64(&[2, 8, 3, 3], &data).unwrap());
        let g = tape.constant(Tensor::full(&[8], 1.0));
        let b = tape.constant(Tensor::zeros(&[8]));
        let y = tape.group_norm(x, g, b, 4, 1e-12).unwrap();
        let out = tape.value(y).data();
        for chunk in out.chunks(2 * 9) {
            let mean: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
            let var: f64 = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / chunk.len() as f64;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "{mean} {var}");
        }
    }

    #[test]
    fn batch_norm_train_and_eval_modes() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..4 * 2 * 2 * 2).map(|i| (i as f64 * 1.3).cos() * 3.0 + 1.0).collect();
        let x = tape.constant(Tensor::from_f64(&[4, 2, 2, 2], &data).unwrap());
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, mean, var) = tape.batch_norm2d_train(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data().to_vec();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|s| out[(s * 2 + ch) * 4..(s * 2 + ch) * 4 + 4].to_vec())
                .collect();
            let m: f64 = vals.iter().sum::<f64>() / 16.0;
            let v: f64 = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5);
        }
        // eval with the batch statistics reproduces the training output
        let ye = tape.batch_norm2d_eval(x, g, b, &mean, &var, 1e-12).unwrap();
        for (a, b) in tape.value(ye).data().iter().zip(&out) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
