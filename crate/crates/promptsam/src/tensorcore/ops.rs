//! Primitive operations and their backward rules.
//!
//! Every primitive validates shapes up front, computes the forward value, and
//! records a closure that maps the incoming gradient to per-parent gradients.
//! No implicit broadcasting beyond the documented bias/channel forms.

use super::graph::{BackCtx, Graph, TensorData, Var};
use super::{Real, Result, TensorError};

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    /// Elementwise sum of two equal-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = TensorData::new(va.shape().to_vec(), data)?;
        Ok(self.emit(
            out,
            vec![a, b],
            Box::new(|ctx: &BackCtx<T>| vec![ctx.grad.clone(), ctx.grad.clone()]),
        ))
    }

    /// Elementwise product of two equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mul", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = TensorData::new(va.shape().to_vec(), data)?;
        Ok(self.emit(
            out,
            vec![a, b],
            Box::new(|ctx: &BackCtx<T>| {
                let ga = ew(ctx.grad, ctx.parents[1]);
                let gb = ew(ctx.grad, ctx.parents[0]);
                vec![ga, gb]
            }),
        ))
    }

    /// `x + b` with `x: [n, d]` and `b: [d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vx.shape().len() != 2 || vb.shape() != [vx.shape()[1]] {
            return Err(mismatch("add_bias", vx.shape(), vb.shape()));
        }
        let d = vx.shape()[1];
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % d])
            .collect();
        let out = TensorData::new(vx.shape().to_vec(), data)?;
        Ok(self.emit(
            out,
            vec![x, b],
            Box::new(move |ctx: &BackCtx<T>| {
                let mut gb = vec![T::zero(); d];
                for (i, &g) in ctx.grad.data().iter().enumerate() {
                    gb[i % d] = gb[i % d] + g;
                }
                vec![
                    ctx.grad.clone(),
                    TensorData::new(vec![d], gb).unwrap(),
                ]
            }),
        ))
    }

    /// `x + b` with `x: [c, h, w]` and `b: [c]` broadcast over the plane.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vx.shape().len() != 3 || vb.shape() != [vx.shape()[0]] {
            return Err(mismatch("add_channel_bias", vx.shape(), vb.shape()));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let plane = h * w;
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i / plane])
            .collect();
        let out = TensorData::new(vx.shape().to_vec(), data)?;
        Ok(self.emit(
            out,
            vec![x, b],
            Box::new(move |ctx: &BackCtx<T>| {
                let mut gb = vec![T::zero(); c];
                for (i, &g) in ctx.grad.data().iter().enumerate() {
                    gb[i / plane] = gb[i / plane] + g;
                }
                vec![
                    ctx.grad.clone(),
                    TensorData::new(vec![c], gb).unwrap(),
                ]
            }),
        ))
    }

    /// Multiply by a compile-time constant (no gradient for the constant).
    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let vx = self.value(x);
        let kk = T::from_f64(k);
        let data = vx.data().iter().map(|&v| v * kk).collect();
        let out = TensorData::new(vx.shape().to_vec(), data)?;
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx
                    .grad
                    .data()
                    .iter()
                    .map(|&v| v * kk)
                    .collect::<Vec<_>>();
                vec![TensorData::new(ctx.grad.shape().to_vec(), g).unwrap()]
            }),
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(mismatch("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = TensorData::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n))?;
        Ok(self.emit(
            out,
            vec![a, b],
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx.grad.data();
                let (da, db) = matmul_backward(ctx.parents[0].data(), ctx.parents[1].data(), g, m, k, n);
                vec![
                    TensorData::new(vec![m, k], da).unwrap(),
                    TensorData::new(vec![k, n], db).unwrap(),
                ]
            }),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(mismatch("transpose", vx.shape(), &[]));
        }
        let (m, n) = (vx.shape()[0], vx.shape()[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = vx.data()[i * n + j];
            }
        }
        let out = TensorData::new(vec![n, m], data)?;
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                vec![TensorData::new(vec![m, n], dx).unwrap()]
            }),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), |v, _| {
            if v > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Tanh-approximated GELU; the derivative matches the same approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = T::from_f64(0.044_715);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        self.unary(
            x,
            move |v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()),
            move |v, _| {
                let t = (c * (v + k * v * v * v)).tanh();
                half * (T::one() + t)
                    + half * v * (T::one() - t * t) * c * (T::one() + three * k * v * v)
            },
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.shape().len() {
            return Err(mismatch("softmax", vx.shape(), &[axis]));
        }
        let mid = vx.shape()[axis];
        let inner: usize = vx.shape()[axis + 1..].iter().product();
        let outer: usize = vx.shape()[..axis].iter().product();
        let mut data = vx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * mid * inner + i;
                let mut max = T::neg_infinity();
                for m in 0..mid {
                    max = max.max(data[base + m * inner]);
                }
                let mut sum = T::zero();
                for m in 0..mid {
                    let e = (data[base + m * inner] - max).exp();
                    data[base + m * inner] = e;
                    sum = sum + e;
                }
                for m in 0..mid {
                    data[base + m * inner] = data[base + m * inner] / sum;
                }
            }
        }
        let out = TensorData::new(vx.shape().to_vec(), data)?;
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let y = ctx.value.data();
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * mid * inner + i;
                        let mut dot = T::zero();
                        for m in 0..mid {
                            let idx = base + m * inner;
                            dot = dot + g[idx] * y[idx];
                        }
                        for m in 0..mid {
                            let idx = base + m * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![TensorData::new(ctx.value.shape().to_vec(), dx).unwrap()]
            }),
        ))
    }

    /// Layer normalization over the last axis with learnable gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *vx.shape().last().ok_or_else(|| mismatch("layer_norm", vx.shape(), &[]))?;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(mismatch("layer_norm", vx.shape(), vg.shape()));
        }
        assert!(eps > 0.0, "layer_norm requires eps > 0");
        let rows = vx.numel() / d;
        let epsv = T::from_f64(eps);
        let dinv = T::one() / T::from_f64(d as f64);
        let mut data = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * dinv;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * dinv;
            let sigma = (var + epsv).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) / sigma * vg.data()[j] + vb.data()[j];
            }
        }
        let out = TensorData::new(vx.shape().to_vec(), data)?;
        Ok(self.emit(
            out,
            vec![x, gamma, beta],
            Box::new(move |ctx: &BackCtx<T>| {
                let (x, gam) = (ctx.parents[0].data(), ctx.parents[1].data());
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); x.len()];
                let mut dgam = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let row = &x[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<T>() * dinv;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * dinv;
                    let sigma = (var + epsv).sqrt();
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let xh = (row[j] - mean) / sigma;
                        let dxh = grow[j] * gam[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xh;
                        dgam[j] = dgam[j] + grow[j] * xh;
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    m1 = m1 * dinv;
                    m2 = m2 * dinv;
                    for j in 0..d {
                        let xh = (row[j] - mean) / sigma;
                        let dxh = grow[j] * gam[j];
                        dx[r * d + j] = (dxh - m1 - xh * m2) / sigma;
                    }
                }
                vec![
                    TensorData::new(ctx.parents[0].shape().to_vec(), dx).unwrap(),
                    TensorData::new(vec![d], dgam).unwrap(),
                    TensorData::new(vec![d], dbeta).unwrap(),
                ]
            }),
        ))
    }

    /// 2D convolution, `x: [ci, h, w]`, `w: [co, ci, kh, kw]`, symmetric zero pad.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.shape().len() != 3 || vw.shape().len() != 4 || vx.shape()[0] != vw.shape()[1] {
            return Err(mismatch("conv2d", vx.shape(), vw.shape()));
        }
        let (ci, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (co, kh, kw) = (vw.shape()[0], vw.shape()[2], vw.shape()[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", vx.shape(), vw.shape()));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let out = conv2d_raw(vx.data(), vw.data(), ci, h, wd, co, kh, kw, stride, pad, ho, wo);
        let out = TensorData::new(vec![co, ho, wo], out)?;
        Ok(self.emit(
            out,
            vec![x, w],
            Box::new(move |ctx: &BackCtx<T>| {
                let (xv, wv) = (ctx.parents[0].data(), ctx.parents[1].data());
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                for oc in 0..co {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(oc * ho + oy) * wo + ox];
                            if gv == T::zero() {
                                continue;
                            }
                            for ic in 0..ci {
                                for ky in 0..kh {
                                    let iy = oy * stride + ky;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    for kx in 0..kw {
                                        let ix = ox * stride + kx;
                                        if ix < pad || ix - pad >= wd {
                                            continue;
                                        }
                                        let ix = ix - pad;
                                        let xi = (ic * h + iy) * wd + ix;
                                        let wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                                        dx[xi] = dx[xi] + gv * wv[wi];
                                        dw[wi] = dw[wi] + gv * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    TensorData::new(ctx.parents[0].shape().to_vec(), dx).unwrap(),
                    TensorData::new(ctx.parents[1].shape().to_vec(), dw).unwrap(),
                ]
            }),
        ))
    }

    /// Average pooling with a `k x k` window, `x: [c, h, w]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 3 || vx.shape()[1] < k || vx.shape()[2] < k || k == 0 {
            return Err(mismatch("avg_pool2d", vx.shape(), &[k, k]));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let inv = T::one() / T::from_f64((k * k) as f64);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc = acc + vx.data()[(ch * h + oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        let out = TensorData::new(vec![c, ho, wo], out)?;
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(ch * ho + oy) * wo + ox] * inv;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let xi = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                                    dx[xi] = dx[xi] + gv;
                                }
                            }
                        }
                    }
                }
                vec![TensorData::new(vec![c, h, w], dx).unwrap()]
            }),
        ))
    }

    /// `[c, h, w] -> [c]` mean over the spatial plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 3 {
            return Err(mismatch("global_avg_pool", vx.shape(), &[]));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let plane = h * w;
        let inv = T::one() / T::from_f64(plane as f64);
        let out: Vec<T> = (0..c)
            .map(|ch| vx.data()[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let out = TensorData::new(vec![c], out)?;
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); c * plane];
                for ch in 0..c {
                    let gv = g[ch] * inv;
                    for i in 0..plane {
                        dx[ch * plane + i] = gv;
                    }
                }
                vec![TensorData::new(vec![c, h, w], dx).unwrap()]
            }),
        ))
    }

    /// Per-channel rescaling, `x: [c, h, w]`, `s: [c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vx.shape().len() != 3 || vs.shape() != [vx.shape()[0]] {
            return Err(mismatch("scale_channels", vx.shape(), vs.shape()));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let plane = h * w;
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs.data()[i / plane])
            .collect();
        let out = TensorData::new(vx.shape().to_vec(), data)?;
        Ok(self.emit(
            out,
            vec![x, s],
            Box::new(move |ctx: &BackCtx<T>| {
                let (xv, sv) = (ctx.parents[0].data(), ctx.parents[1].data());
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut ds = vec![T::zero(); c];
                for (i, &gv) in g.iter().enumerate() {
                    let ch = i / plane;
                    dx[i] = gv * sv[ch];
                    ds[ch] = ds[ch] + gv * xv[i];
                }
                vec![
                    TensorData::new(ctx.parents[0].shape().to_vec(), dx).unwrap(),
                    TensorData::new(vec![c], ds).unwrap(),
                ]
            }),
        ))
    }

    /// Numerically stable softmax cross-entropy for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape().len() != 1 || label >= vl.shape()[0] {
            return Err(mismatch("cross_entropy", vl.shape(), &[label]));
        }
        let max = vl.data().iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + vl.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = lse - vl.data()[label];
        Ok(self.emit(
            TensorData::scalar(loss),
            vec![logits],
            Box::new(move |ctx: &BackCtx<T>| {
                let l = ctx.parents[0].data();
                let g = ctx.grad.scalar_value();
                let max = l.iter().copied().fold(T::neg_infinity(), T::max);
                let sum = l.iter().map(|&v| (v - max).exp()).sum::<T>();
                let mut dx: Vec<T> = l.iter().map(|&v| (v - max).exp() / sum * g).collect();
                dx[label] = dx[label] - g;
                vec![TensorData::new(ctx.parents[0].shape().to_vec(), dx).unwrap()]
            }),
        ))
    }

    /// Sum of all elements to a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.data().iter().copied().sum::<T>();
        Ok(self.emit(
            TensorData::scalar(s),
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx.grad.scalar_value();
                vec![TensorData::filled(ctx.parents[0].shape(), g)]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.numel() {
            return Err(mismatch("reshape", vx.shape(), shape));
        }
        let out = vx.clone().reshaped(shape.to_vec());
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                vec![ctx.grad.clone().reshaped(ctx.parents[0].shape().to_vec())]
            }),
        ))
    }

    /// Stack `a: [n1, d]` on top of `b: [n2, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[1] {
            return Err(mismatch("concat_rows", va.shape(), vb.shape()));
        }
        let (n1, n2, d) = (va.shape()[0], vb.shape()[0], va.shape()[1]);
        let mut data = Vec::with_capacity((n1 + n2) * d);
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = TensorData::new(vec![n1 + n2, d], data)?;
        Ok(self.emit(
            out,
            vec![a, b],
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx.grad.data();
                vec![
                    TensorData::new(vec![n1, d], g[..n1 * d].to_vec()).unwrap(),
                    TensorData::new(vec![n2, d], g[n1 * d..].to_vec()).unwrap(),
                ]
            }),
        ))
    }

    /// Rows `[start, end)` of `x: [n, d]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || start > end || end > vx.shape()[0] {
            return Err(mismatch("slice_rows", vx.shape(), &[start, end]));
        }
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        let out = TensorData::new(vec![end - start, d], vx.data()[start * d..end * d].to_vec())?;
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let mut dx = vec![T::zero(); n * d];
                dx[start * d..end * d].copy_from_slice(ctx.grad.data());
                vec![TensorData::new(vec![n, d], dx).unwrap()]
            }),
        ))
    }

    /// Columns `[start, start+width)` of `x: [n, d]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || start + width > vx.shape()[1] {
            return Err(mismatch("slice_cols", vx.shape(), &[start, width]));
        }
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            data.extend_from_slice(&vx.data()[r * d + start..r * d + start + width]);
        }
        let out = TensorData::new(vec![n, width], data)?;
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                vec![TensorData::new(vec![n, d], dx).unwrap()]
            }),
        ))
    }

    /// Concatenate equal-row-count matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_cols requires at least one input");
        let n = self.value(parts[0]).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let vp = self.value(p);
            if vp.shape().len() != 2 || vp.shape()[0] != n {
                return Err(mismatch("concat_cols", vp.shape(), &[n]));
            }
            widths.push(vp.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let vp = self.value(p);
                data.extend_from_slice(&vp.data()[r * w..(r + 1) * w]);
            }
        }
        let out = TensorData::new(vec![n, total], data)?;
        let widths_b = widths.clone();
        Ok(self.emit(
            out,
            parts.to_vec(),
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx.grad.data();
                let mut grads: Vec<Vec<T>> =
                    widths_b.iter().map(|&w| Vec::with_capacity(n * w)).collect();
                for r in 0..n {
                    let mut off = 0;
                    for (gi, &w) in widths_b.iter().enumerate() {
                        grads[gi].extend_from_slice(&g[r * total + off..r * total + off + w]);
                        off += w;
                    }
                }
                grads
                    .into_iter()
                    .zip(&widths_b)
                    .map(|(gv, &w)| TensorData::new(vec![n, w], gv).unwrap())
                    .collect()
            }),
        ))
    }

    /// `[c, H, W] -> [(H/p)*(W/p), c*p*p]`, patches in row-major grid order.
    pub fn im2patches(&mut self, x: Var, p: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 3 || p == 0 || vx.shape()[1] % p != 0 || vx.shape()[2] % p != 0 {
            return Err(mismatch("im2patches", vx.shape(), &[p]));
        }
        let (c, hh, ww) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (gh, gw) = (hh / p, ww / p);
        let row = c * p * p;
        let mut data = vec![T::zero(); gh * gw * row];
        for gy in 0..gh {
            for gx in 0..gw {
                let patch = gy * gw + gx;
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            data[patch * row + (ch * p + py) * p + px] =
                                vx.data()[(ch * hh + gy * p + py) * ww + gx * p + px];
                        }
                    }
                }
            }
        }
        let out = TensorData::new(vec![gh * gw, row], data)?;
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); c * hh * ww];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let patch = gy * gw + gx;
                        for ch in 0..c {
                            for py in 0..p {
                                for px in 0..p {
                                    dx[(ch * hh + gy * p + py) * ww + gx * p + px] =
                                        g[patch * row + (ch * p + py) * p + px];
                                }
                            }
                        }
                    }
                }
                vec![TensorData::new(vec![c, hh, ww], dx).unwrap()]
            }),
        ))
    }

    /// `[hp*wp, d] -> [d, hp, wp]`: token sequence to spatial feature map.
    pub fn tokens_to_map(&mut self, x: Var, hp: usize, wp: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || vx.shape()[0] != hp * wp {
            return Err(mismatch("tokens_to_map", vx.shape(), &[hp, wp]));
        }
        let d = vx.shape()[1];
        let mut data = vec![T::zero(); d * hp * wp];
        for t in 0..hp * wp {
            for j in 0..d {
                data[j * hp * wp + t] = vx.data()[t * d + j];
            }
        }
        let out = TensorData::new(vec![d, hp, wp], data)?;
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); hp * wp * d];
                for t in 0..hp * wp {
                    for j in 0..d {
                        dx[t * d + j] = g[j * hp * wp + t];
                    }
                }
                vec![TensorData::new(vec![hp * wp, d], dx).unwrap()]
            }),
        ))
    }

    /// Zero-pad channels of `x: [c, h, w]` up to `to_c`.
    pub fn pad_channels(&mut self, x: Var, to_c: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 3 || vx.shape()[0] > to_c {
            return Err(mismatch("pad_channels", vx.shape(), &[to_c]));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut data = vec![T::zero(); to_c * h * w];
        data[..c * h * w].copy_from_slice(vx.data());
        let out = TensorData::new(vec![to_c, h, w], data)?;
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let g = ctx.grad.data();
                vec![TensorData::new(vec![c, h, w], g[..c * h * w].to_vec()).unwrap()]
            }),
        ))
    }

    /// Multi-head scaled dot-product attention over `[n, d]` sequences,
    /// composed from the slicing/matmul/softmax primitives so the backward
    /// rule falls out of the record.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let d = {
            let vq = self.value(q);
            if vq.shape().len() != 2 {
                return Err(mismatch("multi_head_attention", vq.shape(), &[]));
            }
            vq.shape()[1]
        };
        for &side in &[k, v] {
            if self.value(side).shape() != self.value(q).shape() {
                return Err(mismatch(
                    "multi_head_attention",
                    self.value(q).shape(),
                    self.value(side).shape(),
                ));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(mismatch("multi_head_attention", &[d], &[heads]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, dh)?;
            let kh = self.slice_cols(k, h * dh, dh)?;
            let vh = self.slice_cols(v, h * dh, dh)?;
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scores = self.scale(scores, scale)?;
            let attn = self.softmax(scores, 1)?;
            outs.push(self.matmul(attn, vh)?);
        }
        self.concat_cols(&outs)
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T + Send + Sync + 'static,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let out = TensorData::new(vx.shape().to_vec(), data)?;
        Ok(self.emit(
            out,
            vec![x],
            Box::new(move |ctx: &BackCtx<T>| {
                let dx = ctx
                    .parents[0]
                    .data()
                    .iter()
                    .zip(ctx.value.data())
                    .zip(ctx.grad.data())
                    .map(|((&xv, &yv), &g)| g * df(xv, yv))
                    .collect();
                vec![TensorData::new(ctx.parents[0].shape().to_vec(), dx).unwrap()]
            }),
        ))
    }
}

fn ew<T: Real>(a: &TensorData<T>, b: &TensorData<T>) -> TensorData<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    TensorData::new(a.shape().to_vec(), data).unwrap()
}

fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aik * brow[j];
            }
        }
    }
    c
}

fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    // dA = g . B^T, dB = A^T . g
    let mut da = vec![T::zero(); m * k];
    let mut db = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + grow[j] * brow[j];
            }
            da[i * k + kk] = acc;
            let aik = a[i * k + kk];
            if aik != T::zero() {
                let dbrow = &mut db[kk * n..(kk + 1) * n];
                for j in 0..n {
                    dbrow[j] = dbrow[j] + aik * grow[j];
                }
            }
        }
    }
    (da, db)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw<T: Real>(
    x: &[T],
    w: &[T],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); co * ho * wo];
    for oc in 0..co {
        for ic in 0..ci {
            let wbase = (oc * ci + ic) * kh * kw;
            for oy in 0..ho {
                for ky in 0..kh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let xrow = &x[(ic * h + iy - pad) * wd..(ic * h + iy - pad + 1) * wd];
                    let wrow = &w[wbase + ky * kw..wbase + (ky + 1) * kw];
                    let orow = &mut out[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for kx in 0..kw {
                            let ix = ox * stride + kx;
                            if ix < pad || ix - pad >= wd {
                                continue;
                            }
                            acc = acc + xrow[ix - pad] * wrow[kx];
                        }
                        orow[ox] = orow[ox] + acc;
                    }
                }
            }
        }
    }
    out
}
