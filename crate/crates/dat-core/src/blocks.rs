//! Non-deformable building blocks: vanilla multi-head self-attention,
//! Neighborhood Attention, the local perception unit, ConvFFN, overlapped
//! patch embedding and downsampling, and the transformer block that chains
//! LPU -> LN -> attention -> LN -> ConvFFN with residuals.

use rand::RngCore;

use crate::dmha::{DmhaCache, DmhaLayer, DmhaTrace};
use crate::error::{DatError, Result};
use crate::tensor::{
    conv2d, conv2d_backward, gelu, gelu_backward, head_add, head_slice, head_write, layer_norm,
    layer_norm_backward, matmul, matmul_backward, softmax_lastdim, softmax_lastdim_backward,
    transpose2d, Conv2dSpec, GradStore, Tensor, LN_EPS,
};

// ---------------------------------------------------------------------------
// leaf layers

/// Fully connected layer over token matrices, weight layout `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug)]
pub struct LinearGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight)?;
        let out = self.bias.numel();
        for row in y.data_mut().chunks_mut(out) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, LinearGrads)> {
        let (gx, gw) = matmul_backward(x, &self.weight, grad_out)?;
        let out = self.bias.numel();
        let mut gb = vec![0.0; out];
        for row in grad_out.data().chunks(out) {
            for (acc, &g) in gb.iter_mut().zip(row) {
                *acc += g;
            }
        }
        Ok((
            gx,
            LinearGrads {
                weight: gw,
                bias: Tensor::new(vec![out], gb)?,
            },
        ))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl LinearGrads {
    pub fn store(self, prefix: &str, grads: &mut GradStore) {
        grads.accumulate(&format!("{prefix}.weight"), self.weight);
        grads.accumulate(&format!("{prefix}.bias"), self.bias);
    }
}

/// Channel-axis layer normalization with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug)]
pub struct LayerNormGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormLayer {
    pub fn new(channels: usize) -> Self {
        LayerNormLayer {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, LayerNormGrads)> {
        let (gx, gg, gb) = layer_norm_backward(x, &self.gamma, LN_EPS, grad_out)?;
        Ok((gx, LayerNormGrads { gamma: gg, beta: gb }))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

impl LayerNormGrads {
    pub fn store(self, prefix: &str, grads: &mut GradStore) {
        grads.accumulate(&format!("{prefix}.gamma"), self.gamma);
        grads.accumulate(&format!("{prefix}.beta"), self.beta);
    }
}

/// Convolution layer owning its weight, bias, and geometry.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Debug)]
pub struct Conv2dGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2dLayer {
    pub fn new(k: usize, cin_per_group: usize, cout: usize, stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dLayer {
            weight: Tensor::zeros(&[k, k, cin_per_group, cout]),
            bias: Tensor::zeros(&[cout]),
            stride,
            padding,
            groups,
        }
    }

    fn spec(&self) -> Conv2dSpec {
        Conv2dSpec {
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), &self.spec())
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Conv2dGrads)> {
        let (gx, gw, gb) = conv2d_backward(x, &self.weight, &self.spec(), grad_out)?;
        Ok((gx, Conv2dGrads { weight: gw, bias: gb }))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl Conv2dGrads {
    pub fn store(self, prefix: &str, grads: &mut GradStore) {
        grads.accumulate(&format!("{prefix}.weight"), self.weight);
        grads.accumulate(&format!("{prefix}.bias"), self.bias);
    }
}

// ---------------------------------------------------------------------------
// vanilla multi-head self-attention (the oracle for DMHA at r = 1)

#[derive(Debug, Clone)]
pub struct MhsaLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct MhsaCache {
    dims: (usize, usize, usize, usize),
    x2: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
    heads_out: Tensor,
}

#[derive(Debug)]
pub struct MhsaGrads {
    pub wq: LinearGrads,
    pub wk: LinearGrads,
    pub wv: LinearGrads,
    pub wo: LinearGrads,
}

impl MhsaLayer {
    pub fn new(channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(DatError::config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        Ok(MhsaLayer {
            wq: Linear::new(channels, channels),
            wk: Linear::new(channels, channels),
            wv: Linear::new(channels, channels),
            wo: Linear::new(channels, channels),
            heads,
        })
    }

    /// Flattens to `N = H*W` tokens and attends every query to every token.
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, MhsaCache)> {
        let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let n = h * w;
        let m_heads = self.heads;
        let d = c / m_heads;
        let x2 = x.reshaped(&[b * n, c])?;
        let q = self.wq.forward(&x2)?;
        let k = self.wk.forward(&x2)?;
        let v = self.wv.forward(&x2)?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut attn = Tensor::zeros(&[b, m_heads, n, n]);
        let mut heads_out = Tensor::zeros(&[b * n, c]);
        for bi in 0..b {
            for m in 0..m_heads {
                let qm = head_slice(&q, bi, n, m, d);
                let km = head_slice(&k, bi, n, m, d);
                let vm = head_slice(&v, bi, n, m, d);
                let scores = matmul(&qm, &transpose2d(&km))?.scale(scale);
                let a = softmax_lastdim(&scores)?;
                let out_m = matmul(&a, &vm)?;
                let abase = (bi * m_heads + m) * n * n;
                attn.data_mut()[abase..abase + n * n].copy_from_slice(a.data());
                head_write(&mut heads_out, &out_m, bi, n, m, d);
            }
        }
        let y = self.wo.forward(&heads_out)?.reshaped(&[b, h, w, c])?;
        Ok((
            y,
            MhsaCache { dims: (b, h, w, c), x2, q, k, v, attn, heads_out },
        ))
    }

    pub fn backward(&self, cache: &MhsaCache, grad_out: &Tensor) -> Result<(Tensor, MhsaGrads)> {
        let (b, h, w, c) = cache.dims;
        let n = h * w;
        let m_heads = self.heads;
        let d = c / m_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let g2 = grad_out.reshaped(&[b * n, c])?;
        let (g_heads_out, wo_grads) = self.wo.backward(&cache.heads_out, &g2)?;
        let mut g_q = Tensor::zeros(&[b * n, c]);
        let mut g_k = Tensor::zeros(&[b * n, c]);
        let mut g_v = Tensor::zeros(&[b * n, c]);
        for bi in 0..b {
            for m in 0..m_heads {
                let g_out_m = head_slice(&g_heads_out, bi, n, m, d);
                let abase = (bi * m_heads + m) * n * n;
                let a = Tensor::new(vec![n, n], cache.attn.data()[abase..abase + n * n].to_vec())?;
                let vm = head_slice(&cache.v, bi, n, m, d);
                let (g_a, g_vm) = matmul_backward(&a, &vm, &g_out_m)?;
                let g_scores = softmax_lastdim_backward(&a, &g_a)?;
                let qm = head_slice(&cache.q, bi, n, m, d);
                let km = head_slice(&cache.k, bi, n, m, d);
                let g_raw = g_scores.scale(scale);
                let (g_qm, g_km_t) = matmul_backward(&qm, &transpose2d(&km), &g_raw)?;
                head_add(&mut g_q, &g_qm, bi, n, m, d);
                head_add(&mut g_k, &transpose2d(&g_km_t), bi, n, m, d);
                head_add(&mut g_v, &g_vm, bi, n, m, d);
            }
        }
        let (mut g_x2, wq_grads) = self.wq.backward(&cache.x2, &g_q)?;
        let (g_xk, wk_grads) = self.wk.backward(&cache.x2, &g_k)?;
        let (g_xv, wv_grads) = self.wv.backward(&cache.x2, &g_v)?;
        g_x2.add_assign(&g_xk)?;
        g_x2.add_assign(&g_xv)?;
        Ok((
            g_x2.reshaped(&[b, h, w, c])?,
            MhsaGrads { wq: wq_grads, wk: wk_grads, wv: wv_grads, wo: wo_grads },
        ))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.wq.visit_params(&format!("{prefix}.wq"), f);
        self.wk.visit_params(&format!("{prefix}.wk"), f);
        self.wv.visit_params(&format!("{prefix}.wv"), f);
        self.wo.visit_params(&format!("{prefix}.wo"), f);
    }
}

// ---------------------------------------------------------------------------
// neighborhood attention

/// Local attention: each query attends to exactly `K^2` keys in a `K x K`
/// window translated (never shrunk) to stay inside the feature map, with a
/// per-head relative position bias indexed by integer displacement.
#[derive(Debug, Clone)]
pub struct NeighborhoodAttnLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub kernel: usize,
    /// `[M, 2K-1, 2K-1]`.
    pub rpb: Tensor,
}

pub struct NatCache {
    dims: (usize, usize, usize, usize),
    x2: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
    heads_out: Tensor,
}

#[derive(Debug)]
pub struct NatGrads {
    pub wq: LinearGrads,
    pub wk: LinearGrads,
    pub wv: LinearGrads,
    pub wo: LinearGrads,
    pub rpb: Tensor,
}

/// Top-left corner of the `K`-wide window centered on `i`, translated to
/// stay inside `[0, extent)`.
pub(crate) fn window_origin(i: usize, extent: usize, k: usize) -> usize {
    i.saturating_sub((k - 1) / 2).min(extent - k)
}

impl NeighborhoodAttnLayer {
    pub fn new(channels: usize, heads: usize, kernel: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(DatError::config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        if kernel % 2 == 0 {
            return Err(DatError::config(format!(
                "neighborhood kernel {kernel} must be odd"
            )));
        }
        Ok(NeighborhoodAttnLayer {
            wq: Linear::new(channels, channels),
            wk: Linear::new(channels, channels),
            wv: Linear::new(channels, channels),
            wo: Linear::new(channels, channels),
            heads,
            kernel,
            rpb: Tensor::zeros(&[heads, 2 * kernel - 1, 2 * kernel - 1]),
        })
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, NatCache)> {
        let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let kk = self.kernel;
        if kk > h || kk > w {
            return Err(DatError::config(format!(
                "neighborhood kernel {kk} exceeds feature map {h}x{w}"
            )));
        }
        let n = h * w;
        let m_heads = self.heads;
        let d = c / m_heads;
        let x2 = x.reshaped(&[b * n, c])?;
        let q = self.wq.forward(&x2)?;
        let k = self.wk.forward(&x2)?;
        let v = self.wv.forward(&x2)?;
        let scale = 1.0 / (d as f64).sqrt();
        let side = 2 * kk - 1;
        let mut attn = Tensor::zeros(&[b, m_heads, n, kk * kk]);
        let mut heads_out = Tensor::zeros(&[b * n, c]);
        let mut scores = vec![0.0; kk * kk];
        for bi in 0..b {
            for m in 0..m_heads {
                let qm = head_slice(&q, bi, n, m, d);
                let km = head_slice(&k, bi, n, m, d);
                let vm = head_slice(&v, bi, n, m, d);
                let rpb_m = &self.rpb.data()[m * side * side..(m + 1) * side * side];
                for qi in 0..h {
                    let oy = window_origin(qi, h, kk);
                    for qj in 0..w {
                        let ox = window_origin(qj, w, kk);
                        let qrow = &qm.data()[(qi * w + qj) * d..(qi * w + qj + 1) * d];
                        let mut max = f64::NEG_INFINITY;
                        for dy in 0..kk {
                            for dx in 0..kk {
                                let key = (oy + dy) * w + (ox + dx);
                                let krow = &km.data()[key * d..(key + 1) * d];
                                let mut dot = 0.0;
                                for t in 0..d {
                                    dot += qrow[t] * krow[t];
                                }
                                let bias = rpb_m[(oy + dy + kk - 1 - qi) * side
                                    + (ox + dx + kk - 1 - qj)];
                                let s = dot * scale + bias;
                                scores[dy * kk + dx] = s;
                                max = max.max(s);
                            }
                        }
                        let mut sum = 0.0;
                        for s in scores.iter_mut() {
                            *s = (*s - max).exp();
                            sum += *s;
                        }
                        let abase = ((bi * m_heads + m) * n + qi * w + qj) * kk * kk;
                        let arow = &mut attn.data_mut()[abase..abase + kk * kk];
                        for (dst, s) in arow.iter_mut().zip(&scores) {
                            *dst = s / sum;
                        }
                        let mut acc = vec![0.0; d];
                        for dy in 0..kk {
                            for dx in 0..kk {
                                let weight = arow[dy * kk + dx];
                                let key = (oy + dy) * w + (ox + dx);
                                let vrow = &vm.data()[key * d..(key + 1) * d];
                                for t in 0..d {
                                    acc[t] += weight * vrow[t];
                                }
                            }
                        }
                        let obase = (bi * n + qi * w + qj) * c + m * d;
                        heads_out.data_mut()[obase..obase + d].copy_from_slice(&acc);
                    }
                }
            }
        }
        let y = self.wo.forward(&heads_out)?.reshaped(&[b, h, w, c])?;
        Ok((
            y,
            NatCache { dims: (b, h, w, c), x2, q, k, v, attn, heads_out },
        ))
    }

    pub fn backward(&self, cache: &NatCache, grad_out: &Tensor) -> Result<(Tensor, NatGrads)> {
        let (b, h, w, c) = cache.dims;
        let kk = self.kernel;
        let n = h * w;
        let m_heads = self.heads;
        let d = c / m_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let side = 2 * kk - 1;
        let g2 = grad_out.reshaped(&[b * n, c])?;
        let (g_heads_out, wo_grads) = self.wo.backward(&cache.heads_out, &g2)?;
        let mut g_q = Tensor::zeros(&[b * n, c]);
        let mut g_k = Tensor::zeros(&[b * n, c]);
        let mut g_v = Tensor::zeros(&[b * n, c]);
        let mut g_rpb = Tensor::zeros(self.rpb.shape());
        let mut g_attn = vec![0.0; kk * kk];
        for bi in 0..b {
            for m in 0..m_heads {
                let qm = head_slice(&cache.q, bi, n, m, d);
                let km = head_slice(&cache.k, bi, n, m, d);
                let vm = head_slice(&cache.v, bi, n, m, d);
                for qi in 0..h {
                    let oy = window_origin(qi, h, kk);
                    for qj in 0..w {
                        let ox = window_origin(qj, w, kk);
                        let query = qi * w + qj;
                        let gobase = (bi * n + query) * c + m * d;
                        let g_out = &g_heads_out.data()[gobase..gobase + d];
                        let abase = ((bi * m_heads + m) * n + query) * kk * kk;
                        let arow = &cache.attn.data()[abase..abase + kk * kk];
                        // d loss / d attention weight, then softmax backward
                        let mut dot = 0.0;
                        for dy in 0..kk {
                            for dx in 0..kk {
                                let key = (oy + dy) * w + (ox + dx);
                                let vrow = &vm.data()[key * d..(key + 1) * d];
                                let mut ga = 0.0;
                                for t in 0..d {
                                    ga += g_out[t] * vrow[t];
                                }
                                g_attn[dy * kk + dx] = ga;
                                dot += ga * arow[dy * kk + dx];
                            }
                        }
                        let qrow = &qm.data()[query * d..(query + 1) * d];
                        let mut g_qrow = vec![0.0; d];
                        for dy in 0..kk {
                            for dx in 0..kk {
                                let t_idx = dy * kk + dx;
                                let gs = arow[t_idx] * (g_attn[t_idx] - dot);
                                let key = (oy + dy) * w + (ox + dx);
                                g_rpb.data_mut()[m * side * side
                                    + (oy + dy + kk - 1 - qi) * side
                                    + (ox + dx + kk - 1 - qj)] += gs;
                                let a_w = arow[t_idx];
                                let krow = &km.data()[key * d..(key + 1) * d];
                                let gk_base = (bi * n + key) * c + m * d;
                                let gv_base = gk_base;
                                for t in 0..d {
                                    g_qrow[t] += gs * scale * krow[t];
                                    g_k.data_mut()[gk_base + t] += gs * scale * qrow[t];
                                    g_v.data_mut()[gv_base + t] += a_w * g_out[t];
                                }
                            }
                        }
                        let gq_base = (bi * n + query) * c + m * d;
                        for t in 0..d {
                            g_q.data_mut()[gq_base + t] += g_qrow[t];
                        }
                    }
                }
            }
        }
        let (mut g_x2, wq_grads) = self.wq.backward(&cache.x2, &g_q)?;
        let (g_xk, wk_grads) = self.wk.backward(&cache.x2, &g_k)?;
        let (g_xv, wv_grads) = self.wv.backward(&cache.x2, &g_v)?;
        g_x2.add_assign(&g_xk)?;
        g_x2.add_assign(&g_xv)?;
        Ok((
            g_x2.reshaped(&[b, h, w, c])?,
            NatGrads { wq: wq_grads, wk: wk_grads, wv: wv_grads, wo: wo_grads, rpb: g_rpb },
        ))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.wq.visit_params(&format!("{prefix}.wq"), f);
        self.wk.visit_params(&format!("{prefix}.wk"), f);
        self.wv.visit_params(&format!("{prefix}.wv"), f);
        self.wo.visit_params(&format!("{prefix}.wo"), f);
        f(format!("{prefix}.rpb"), &self.rpb);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.wq.visit_params_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_params_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_params_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_params_mut(&format!("{prefix}.wo"), f);
        f(format!("{prefix}.rpb"), &mut self.rpb);
    }
}

impl NatGrads {
    pub fn store(self, prefix: &str, grads: &mut GradStore) {
        self.wq.store(&format!("{prefix}.wq"), grads);
        self.wk.store(&format!("{prefix}.wk"), grads);
        self.wv.store(&format!("{prefix}.wv"), grads);
        self.wo.store(&format!("{prefix}.wo"), grads);
        grads.accumulate(&format!("{prefix}.rpb"), self.rpb);
    }
}

// ---------------------------------------------------------------------------
// local perception unit and ConvFFN

/// Residual depthwise 3x3 convolution: `x + DWConv(x)`.
#[derive(Debug, Clone)]
pub struct Lpu {
    pub dw: Conv2dLayer,
}

pub struct LpuCache {
    x: Tensor,
}

impl Lpu {
    pub fn new(channels: usize) -> Self {
        Lpu {
            dw: Conv2dLayer::new(3, 1, channels, 1, 1, channels),
        }
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, LpuCache)> {
        let mut y = self.dw.forward(x)?;
        y.add_assign(x)?;
        Ok((y, LpuCache { x: x.clone() }))
    }

    pub fn backward(&self, cache: &LpuCache, grad_out: &Tensor) -> Result<(Tensor, Conv2dGrads)> {
        let (mut gx, grads) = self.dw.backward(&cache.x, grad_out)?;
        gx.add_assign(grad_out)?;
        Ok((gx, grads))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.dw.visit_params(prefix, f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.dw.visit_params_mut(prefix, f);
    }
}

/// Feed-forward block with a residual depthwise convolution between the two
/// linear layers: `fc2(GELU(h + DWConv(h)))`, `h = fc1(x)`.
#[derive(Debug, Clone)]
pub struct ConvFfn {
    pub fc1: Linear,
    pub dw: Conv2dLayer,
    pub fc2: Linear,
}

pub struct ConvFfnCache {
    dims: (usize, usize, usize, usize),
    x2: Tensor,
    h1: Tensor,
    h2: Tensor,
    act2: Tensor,
}

#[derive(Debug)]
pub struct ConvFfnGrads {
    pub fc1: LinearGrads,
    pub dw: Conv2dGrads,
    pub fc2: LinearGrads,
}

impl ConvFfn {
    pub fn new(channels: usize, hidden: usize) -> Self {
        ConvFfn {
            fc1: Linear::new(channels, hidden),
            dw: Conv2dLayer::new(3, 1, hidden, 1, 1, hidden),
            fc2: Linear::new(hidden, channels),
        }
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ConvFfnCache)> {
        let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let hidden = self.fc1.bias.numel();
        let x2 = x.reshaped(&[b * h * w, c])?;
        let h1 = self.fc1.forward(&x2)?.reshaped(&[b, h, w, hidden])?;
        let mut h2 = self.dw.forward(&h1)?;
        h2.add_assign(&h1)?;
        let act = gelu(&h2)?;
        let act2 = act.reshaped(&[b * h * w, hidden])?;
        let y = self.fc2.forward(&act2)?.reshaped(&[b, h, w, c])?;
        Ok((y, ConvFfnCache { dims: (b, h, w, c), x2, h1, h2, act2 }))
    }

    pub fn backward(&self, cache: &ConvFfnCache, grad_out: &Tensor) -> Result<(Tensor, ConvFfnGrads)> {
        let (b, h, w, c) = cache.dims;
        let hidden = self.fc1.bias.numel();
        let g2 = grad_out.reshaped(&[b * h * w, c])?;
        let (g_act2, fc2_grads) = self.fc2.backward(&cache.act2, &g2)?;
        let g_h2 = gelu_backward(&cache.h2, &g_act2.reshaped(&[b, h, w, hidden])?)?;
        let (g_h1_conv, dw_grads) = self.dw.backward(&cache.h1, &g_h2)?;
        let mut g_h1 = g_h2;
        g_h1.add_assign(&g_h1_conv)?;
        let (g_x2, fc1_grads) = self.fc1.backward(&cache.x2, &g_h1.reshaped(&[b * h * w, hidden])?)?;
        Ok((
            g_x2.reshaped(&[b, h, w, c])?,
            ConvFfnGrads { fc1: fc1_grads, dw: dw_grads, fc2: fc2_grads },
        ))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.fc1.visit_params(&format!("{prefix}.fc1"), f);
        self.dw.visit_params(&format!("{prefix}.dw"), f);
        self.fc2.visit_params(&format!("{prefix}.fc2"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.fc1.visit_params_mut(&format!("{prefix}.fc1"), f);
        self.dw.visit_params_mut(&format!("{prefix}.dw"), f);
        self.fc2.visit_params_mut(&format!("{prefix}.fc2"), f);
    }
}

impl ConvFfnGrads {
    pub fn store(self, prefix: &str, grads: &mut GradStore) {
        self.fc1.store(&format!("{prefix}.fc1"), grads);
        self.dw.store(&format!("{prefix}.dw"), grads);
        self.fc2.store(&format!("{prefix}.fc2"), grads);
    }
}

// ---------------------------------------------------------------------------
// patch embedding and downsampling

/// Overlapped patch embedding: two 3x3 stride-2 convolutions, each followed
/// by LayerNorm and GELU; maps `B x H x W x 3` to `B x H/4 x W/4 x C`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub conv1: Conv2dLayer,
    pub norm1: LayerNormLayer,
    pub conv2: Conv2dLayer,
    pub norm2: LayerNormLayer,
}

pub struct PatchEmbedCache {
    x: Tensor,
    c1: Tensor,
    n1: Tensor,
    a1: Tensor,
    c2: Tensor,
    n2: Tensor,
}

impl PatchEmbed {
    /// Stem with an intermediate width of `channels / 2`.
    pub fn new(in_channels: usize, channels: usize) -> Self {
        let mid = (channels / 2).max(1);
        PatchEmbed {
            conv1: Conv2dLayer::new(3, in_channels, mid, 2, 1, 1),
            norm1: LayerNormLayer::new(mid),
            conv2: Conv2dLayer::new(3, mid, channels, 2, 1, 1),
            norm2: LayerNormLayer::new(channels),
        }
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, PatchEmbedCache)> {
        let (h, w) = (x.dim(1), x.dim(2));
        if h % 4 != 0 || w % 4 != 0 {
            return Err(DatError::config(format!(
                "patch embedding requires dims divisible by 4, got {h}x{w}"
            )));
        }
        let c1 = self.conv1.forward(x)?;
        let n1 = self.norm1.forward(&c1)?;
        let a1 = gelu(&n1)?;
        let c2 = self.conv2.forward(&a1)?;
        let n2 = self.norm2.forward(&c2)?;
        let y = gelu(&n2)?;
        Ok((y, PatchEmbedCache { x: x.clone(), c1, n1, a1, c2, n2 }))
    }

    pub fn backward(
        &self,
        cache: &PatchEmbedCache,
        grad_out: &Tensor,
        prefix: &str,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let g_n2 = gelu_backward(&cache.n2, grad_out)?;
        let (g_c2, n2_grads) = self.norm2.backward(&cache.c2, &g_n2)?;
        let (g_a1, c2_grads) = self.conv2.backward(&cache.a1, &g_c2)?;
        let g_n1 = gelu_backward(&cache.n1, &g_a1)?;
        let (g_c1, n1_grads) = self.norm1.backward(&cache.c1, &g_n1)?;
        let (g_x, c1_grads) = self.conv1.backward(&cache.x, &g_c1)?;
        c1_grads.store(&format!("{prefix}.conv1"), grads);
        n1_grads.store(&format!("{prefix}.norm1"), grads);
        c2_grads.store(&format!("{prefix}.conv2"), grads);
        n2_grads.store(&format!("{prefix}.norm2"), grads);
        Ok(g_x)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.norm1.visit_params(&format!("{prefix}.norm1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.norm2.visit_params(&format!("{prefix}.norm2"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit_params_mut(&format!("{prefix}.conv1"), f);
        self.norm1.visit_params_mut(&format!("{prefix}.norm1"), f);
        self.conv2.visit_params_mut(&format!("{prefix}.conv2"), f);
        self.norm2.visit_params_mut(&format!("{prefix}.norm2"), f);
    }
}

/// Between-stage downsampling: 3x3 stride-2 convolution doubling channels,
/// followed by LayerNorm.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub conv: Conv2dLayer,
    pub norm: LayerNormLayer,
}

pub struct DownsampleCache {
    x: Tensor,
    c: Tensor,
}

impl Downsample {
    pub fn new(channels: usize) -> Self {
        Downsample {
            conv: Conv2dLayer::new(3, channels, 2 * channels, 2, 1, 1),
            norm: LayerNormLayer::new(2 * channels),
        }
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, DownsampleCache)> {
        let (h, w) = (x.dim(1), x.dim(2));
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DatError::config(format!(
                "downsampling requires even dims, got {h}x{w}"
            )));
        }
        let c = self.conv.forward(x)?;
        let y = self.norm.forward(&c)?;
        Ok((y, DownsampleCache { x: x.clone(), c }))
    }

    pub fn backward(
        &self,
        cache: &DownsampleCache,
        grad_out: &Tensor,
        prefix: &str,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let (g_c, norm_grads) = self.norm.backward(&cache.c, grad_out)?;
        let (g_x, conv_grads) = self.conv.backward(&cache.x, &g_c)?;
        conv_grads.store(&format!("{prefix}.conv"), grads);
        norm_grads.store(&format!("{prefix}.norm"), grads);
        Ok(g_x)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.norm.visit_params(&format!("{prefix}.norm"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv.visit_params_mut(&format!("{prefix}.conv"), f);
        self.norm.visit_params_mut(&format!("{prefix}.norm"), f);
    }
}

// ---------------------------------------------------------------------------
// the transformer block

/// Spatial mixing operator of a block: local or deformable attention.
#[derive(Debug, Clone)]
pub enum Attention {
    Local(NeighborhoodAttnLayer),
    Deformable(DmhaLayer),
}

pub enum AttnCache {
    Local(NatCache),
    Deformable(DmhaCache),
}

/// Enhanced transformer block: `z' = LPU(x)`, `z'' = Attn(LN(z')) + z'`,
/// `out = ConvFFN(LN(z'')) + z''`, with stochastic depth on both residual
/// branches during training.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub lpu: Lpu,
    pub norm1: LayerNormLayer,
    pub attn: Attention,
    pub norm2: LayerNormLayer,
    pub ffn: ConvFfn,
    pub drop_path: f64,
}

pub struct BlockCache {
    lpu: LpuCache,
    z1: Tensor,
    n1: Tensor,
    attn: AttnCache,
    attn_scale: Vec<f64>,
    z2: Tensor,
    n2: Tensor,
    ffn: ConvFfnCache,
    ffn_scale: Vec<f64>,
}

impl BlockCache {
    /// Attention trace when the block is deformable.
    pub fn dmha_trace(&self) -> Option<DmhaTrace> {
        match &self.attn {
            AttnCache::Deformable(c) => Some(c.trace()),
            AttnCache::Local(_) => None,
        }
    }
}

/// Multiplies each batch element of `t` by its branch scale.
fn scale_batch(t: &Tensor, scales: &[f64]) -> Tensor {
    if scales.iter().all(|&s| s == 1.0) {
        return t.clone();
    }
    let per = t.numel() / scales.len();
    let mut out = t.clone();
    for (bi, &s) in scales.iter().enumerate() {
        for v in &mut out.data_mut()[bi * per..(bi + 1) * per] {
            *v *= s;
        }
    }
    out
}

impl TransformerBlock {
    pub fn new(attn: Attention, channels: usize, mlp_ratio: usize, drop_path: f64) -> Self {
        TransformerBlock {
            lpu: Lpu::new(channels),
            norm1: LayerNormLayer::new(channels),
            attn,
            norm2: LayerNormLayer::new(channels),
            ffn: ConvFfn::new(channels, mlp_ratio * channels),
            drop_path,
        }
    }

    /// Samples per-batch-element keep/scale factors for one residual branch.
    fn branch_scales(&self, b: usize, rng: &mut Option<&mut dyn RngCore>) -> Vec<f64> {
        match rng {
            Some(rng) if self.drop_path > 0.0 => {
                use rand::Rng;
                (0..b)
                    .map(|_| {
                        if rng.gen::<f64>() < self.drop_path {
                            0.0
                        } else {
                            1.0 / (1.0 - self.drop_path)
                        }
                    })
                    .collect()
            }
            _ => vec![1.0; b],
        }
    }

    pub fn forward_cached(
        &self,
        x: &Tensor,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Tensor, BlockCache)> {
        let b = x.dim(0);
        let (z1, lpu_cache) = self.lpu.forward_cached(x)?;
        let n1 = self.norm1.forward(&z1)?;
        let (a, attn_cache) = match &self.attn {
            Attention::Local(layer) => {
                let (a, c) = layer.forward_cached(&n1)?;
                (a, AttnCache::Local(c))
            }
            Attention::Deformable(layer) => {
                let (a, c) = layer.forward_cached(&n1)?;
                (a, AttnCache::Deformable(c))
            }
        };
        let attn_scale = self.branch_scales(b, &mut rng);
        let mut z2 = scale_batch(&a, &attn_scale);
        z2.add_assign(&z1)?;
        let n2 = self.norm2.forward(&z2)?;
        let (f, ffn_cache) = self.ffn.forward_cached(&n2)?;
        let ffn_scale = self.branch_scales(b, &mut rng);
        let mut y = scale_batch(&f, &ffn_scale);
        y.add_assign(&z2)?;
        Ok((
            y,
            BlockCache {
                lpu: lpu_cache,
                z1,
                n1,
                attn: attn_cache,
                attn_scale,
                z2,
                n2,
                ffn: ffn_cache,
                ffn_scale,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        grad_out: &Tensor,
        prefix: &str,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let g_f = scale_batch(grad_out, &cache.ffn_scale);
        let (g_n2, ffn_grads) = self.ffn.backward(&cache.ffn, &g_f)?;
        ffn_grads.store(&format!("{prefix}.ffn"), grads);
        let (g_z2_norm, n2_grads) = self.norm2.backward(&cache.z2, &g_n2)?;
        n2_grads.store(&format!("{prefix}.norm2"), grads);
        let mut g_z2 = grad_out.clone();
        g_z2.add_assign(&g_z2_norm)?;
        let g_a = scale_batch(&g_z2, &cache.attn_scale);
        let g_n1 = match (&self.attn, &cache.attn) {
            (Attention::Local(layer), AttnCache::Local(c)) => {
                let (g, nat_grads) = layer.backward(c, &g_a)?;
                nat_grads.store(&format!("{prefix}.attn"), grads);
                g
            }
            (Attention::Deformable(layer), AttnCache::Deformable(c)) => {
                let (g, dmha_grads) = layer.backward(c, &g_a)?;
                dmha_grads.store(&format!("{prefix}.attn"), grads);
                g
            }
            _ => unreachable!("cache kind always matches the block kind"),
        };
        let (g_z1_norm, n1_grads) = self.norm1.backward(&cache.z1, &g_n1)?;
        n1_grads.store(&format!("{prefix}.norm1"), grads);
        let mut g_z1 = g_z2;
        g_z1.add_assign(&g_z1_norm)?;
        let (g_x, lpu_grads) = self.lpu.backward(&cache.lpu, &g_z1)?;
        lpu_grads.store(&format!("{prefix}.lpu"), grads);
        Ok(g_x)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.lpu.visit_params(&format!("{prefix}.lpu"), f);
        self.norm1.visit_params(&format!("{prefix}.norm1"), f);
        match &self.attn {
            Attention::Local(layer) => layer.visit_params(&format!("{prefix}.attn"), f),
            Attention::Deformable(layer) => layer.visit_params(&format!("{prefix}.attn"), f),
        }
        self.norm2.visit_params(&format!("{prefix}.norm2"), f);
        self.ffn.visit_params(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.lpu.visit_params_mut(&format!("{prefix}.lpu"), f);
        self.norm1.visit_params_mut(&format!("{prefix}.norm1"), f);
        match &mut self.attn {
            Attention::Local(layer) => layer.visit_params_mut(&format!("{prefix}.attn"), f),
            Attention::Deformable(layer) => layer.visit_params_mut(&format!("{prefix}.attn"), f),
        }
        self.norm2.visit_params_mut(&format!("{prefix}.norm2"), f);
        self.ffn.visit_params_mut(&format!("{prefix}.ffn"), f);
    }
}

impl MhsaGrads {
    pub fn store(self, prefix: &str, grads: &mut GradStore) {
        self.wq.store(&format!("{prefix}.wq"), grads);
        self.wk.store(&format!("{prefix}.wk"), grads);
        self.wv.store(&format!("{prefix}.wv"), grads);
        self.wo.store(&format!("{prefix}.wo"), grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn randomize_linear(lin: &mut Linear, rng: &mut ChaCha20Rng) {
        lin.weight = Tensor::trunc_normal(lin.weight.shape(), 0.3, rng);
        lin.bias = Tensor::trunc_normal(lin.bias.shape(), 0.1, rng);
    }

    fn random_mhsa(c: usize, heads: usize, seed: u64) -> MhsaLayer {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut layer = MhsaLayer::new(c, heads).unwrap();
        for lin in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo] {
            randomize_linear(lin, &mut rng);
        }
        layer
    }

    fn random_nat(c: usize, heads: usize, k: usize, seed: u64) -> NeighborhoodAttnLayer {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut layer = NeighborhoodAttnLayer::new(c, heads, k).unwrap();
        for lin in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo] {
            randomize_linear(lin, &mut rng);
        }
        layer.rpb = Tensor::trunc_normal(layer.rpb.shape(), 0.3, &mut rng);
        layer
    }

    // Naive per-query loop attention with an optional integer-displacement
    // bias; the oracle for both MHSA and whole-map neighborhood attention.
    fn attention_naive(
        layer_q: &Linear,
        layer_k: &Linear,
        layer_v: &Linear,
        layer_o: &Linear,
        heads: usize,
        x: &Tensor,
        bias: Option<&Tensor>, // [M, 2H-1, 2W-1] indexed by key - query
    ) -> Tensor {
        let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let n = h * w;
        let d = c / heads;
        let x2 = x.reshaped(&[b * n, c]).unwrap();
        let q = layer_q.forward(&x2).unwrap();
        let k = layer_k.forward(&x2).unwrap();
        let v = layer_v.forward(&x2).unwrap();
        let mut heads_out = Tensor::zeros(&[b * n, c]);
        for bi in 0..b {
            for m in 0..heads {
                for qi in 0..n {
                    let (qy, qx) = (qi / w, qi % w);
                    let mut scores = vec![0.0; n];
                    for ki in 0..n {
                        let mut dot = 0.0;
                        for t in 0..d {
                            dot += q.data()[(bi * n + qi) * c + m * d + t]
                                * k.data()[(bi * n + ki) * c + m * d + t];
                        }
                        scores[ki] = dot / (d as f64).sqrt();
                        if let Some(bias) = bias {
                            let (ky, kx) = (ki / w, ki % w);
                            let side = bias.dim(2);
                            scores[ki] += bias.data()[m * bias.dim(1) * side
                                + (ky + h - 1 - qy) * side
                                + (kx + w - 1 - qx)];
                        }
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for t in 0..d {
                        let mut acc = 0.0;
                        for ki in 0..n {
                            acc += scores[ki] / sum * v.data()[(bi * n + ki) * c + m * d + t];
                        }
                        heads_out.data_mut()[(bi * n + qi) * c + m * d + t] = acc;
                    }
                }
            }
        }
        layer_o
            .forward(&heads_out)
            .unwrap()
            .reshaped(&[b, h, w, c])
            .unwrap()
    }

    #[test]
    fn mhsa_single_token_is_value_path() {
        let layer = random_mhsa(6, 2, 60);
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let x = Tensor::from_fn(&[1, 1, 1, 6], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = layer.forward_cached(&x).unwrap();
        // softmax over one key is 1: output = (x Wv + bv) Wo + bo
        let v = layer.wv.forward(&x.reshaped(&[1, 6]).unwrap()).unwrap();
        let expect = layer.wo.forward(&v).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_constant_input_constant_output() {
        let layer = random_mhsa(8, 2, 62);
        let x = Tensor::full(&[1, 3, 3, 8], 0.21);
        let (y, _) = layer.forward_cached(&x).unwrap();
        for ci in 0..8 {
            let v0 = y.at(&[0, 0, 0, ci]);
            for p in 0..9 {
                assert!((y.data()[p * 8 + ci] - v0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mhsa_matches_naive_loop() {
        let layer = random_mhsa(8, 2, 63);
        let mut rng = ChaCha20Rng::seed_from_u64(64);
        let x = Tensor::from_fn(&[2, 3, 4, 8], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = layer.forward_cached(&x).unwrap();
        let oracle = attention_naive(&layer.wq, &layer.wk, &layer.wv, &layer.wo, 2, &x, None);
        let max = y
            .data()
            .iter()
            .zip(oracle.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max <= 1e-12, "max abs diff {max}");
    }

    #[test]
    fn nat_window_origins_translate_at_borders() {
        // interior query keeps a centered window; border windows translate
        assert_eq!(window_origin(4, 9, 7), 1);
        assert_eq!(window_origin(0, 9, 7), 0);
        assert_eq!(window_origin(8, 9, 7), 2);
        for i in 0..9 {
            let o = window_origin(i, 9, 7);
            assert!(o + 7 <= 9);
        }
        // K = 7 interior: keys exactly {i-3..i+3}
        assert_eq!(window_origin(5, 12, 7), 2);
    }

    #[test]
    fn nat_whole_map_window_equals_global_attention_with_bias() {
        let (c, heads, k) = (8, 2, 5);
        let layer = random_nat(c, heads, k, 65);
        let mut rng = ChaCha20Rng::seed_from_u64(66);
        let x = Tensor::from_fn(&[1, k, k, c], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = layer.forward_cached(&x).unwrap();
        let oracle = attention_naive(
            &layer.wq,
            &layer.wk,
            &layer.wv,
            &layer.wo,
            heads,
            &x,
            Some(&layer.rpb),
        );
        let max = y
            .data()
            .iter()
            .zip(oracle.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max <= 1e-10, "max abs diff {max}");
    }

    #[test]
    fn nat_constant_input_constant_output() {
        let layer = random_nat(6, 2, 3, 67);
        let x = Tensor::full(&[1, 5, 5, 6], -0.4);
        let (y, _) = layer.forward_cached(&x).unwrap();
        // attention weights vary with position (bias), but values are equal
        for ci in 0..6 {
            let v0 = y.at(&[0, 0, 0, ci]);
            for p in 0..25 {
                assert!((y.data()[p * 6 + ci] - v0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nat_kernel_larger_than_map_is_config_error() {
        let layer = random_nat(6, 2, 5, 68);
        let x = Tensor::zeros(&[1, 4, 4, 6]);
        assert!(matches!(
            layer.forward_cached(&x),
            Err(DatError::Config(_))
        ));
    }

    #[test]
    fn lpu_zero_weights_is_identity_and_shapes_hold() {
        let lpu = Lpu::new(5);
        let mut rng = ChaCha20Rng::seed_from_u64(69);
        let x = Tensor::from_fn(&[2, 4, 3, 5], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = lpu.forward_cached(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn convffn_zero_dwconv_reduces_to_plain_mlp() {
        let mut rng = ChaCha20Rng::seed_from_u64(70);
        let mut ffn = ConvFfn::new(4, 8);
        randomize_linear(&mut ffn.fc1, &mut rng);
        randomize_linear(&mut ffn.fc2, &mut rng);
        let x = Tensor::from_fn(&[1, 3, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = ffn.forward_cached(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 4]);
        let x2 = x.reshaped(&[9, 4]).unwrap();
        let h1 = ffn.fc1.forward(&x2).unwrap();
        let act = gelu(&h1).unwrap();
        let expect = ffn.fc2.forward(&act).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_embed_shapes_and_zero_case() {
        let pe = PatchEmbed::new(3, 16);
        let x = Tensor::zeros(&[1, 32, 32, 3]);
        let (y, _) = pe.forward_cached(&x).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 16]);
        // zero image, zero biases, LN beta = 0: everything stays zero
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = Tensor::zeros(&[1, 30, 32, 3]);
        assert!(pe.forward_cached(&x).is_err());
    }

    #[test]
    fn downsample_shapes_and_odd_rejection() {
        let mut rng = ChaCha20Rng::seed_from_u64(71);
        let mut ds = Downsample::new(4);
        ds.conv.weight = Tensor::trunc_normal(ds.conv.weight.shape(), 0.2, &mut rng);
        let x = Tensor::from_fn(&[2, 6, 8, 4], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = ds.forward_cached(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 8]);
        let x = Tensor::zeros(&[1, 5, 6, 4]);
        assert!(matches!(ds.forward_cached(&x), Err(DatError::Config(_))));
    }

    fn random_local_block(c: usize, heads: usize, k: usize, seed: u64) -> TransformerBlock {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut block = TransformerBlock::new(
            Attention::Local(random_nat(c, heads, k, seed + 1)),
            c,
            2,
            0.0,
        );
        block.lpu.dw.weight = Tensor::trunc_normal(block.lpu.dw.weight.shape(), 0.2, &mut rng);
        block.lpu.dw.bias = Tensor::trunc_normal(&[c], 0.05, &mut rng);
        randomize_linear(&mut block.ffn.fc1, &mut rng);
        block.ffn.dw.weight = Tensor::trunc_normal(block.ffn.dw.weight.shape(), 0.2, &mut rng);
        randomize_linear(&mut block.ffn.fc2, &mut rng);
        block
    }

    #[test]
    fn block_residual_identity_with_zeroed_projections() {
        let mut block = random_local_block(6, 2, 3, 72);
        // zero the attention and FFN output projections including biases
        if let Attention::Local(nat) = &mut block.attn {
            nat.wo = Linear::new(6, 6);
        }
        block.ffn.fc2 = Linear::new(12, 6);
        let mut rng = ChaCha20Rng::seed_from_u64(73);
        let x = Tensor::from_fn(&[1, 4, 4, 6], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = block.forward_cached(&x, None).unwrap();
        let (lpu_only, _) = block.lpu.forward_cached(&x).unwrap();
        assert_eq!(y, lpu_only);
    }

    #[test]
    fn block_full_gradient_check() {
        let block = random_local_block(16, 2, 3, 74);
        let mut rng = ChaCha20Rng::seed_from_u64(75);
        let x = Tensor::from_fn(&[1, 8, 8, 16], |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = block.forward_cached(&x, None).unwrap();
        assert_eq!(y.shape(), x.shape());
        let lw: Vec<f64> = (0..y.numel()).map(|_| rng.gen_range(0.5..1.5)).collect();
        let gout = Tensor::new(y.shape().to_vec(), lw.clone()).unwrap();
        let mut grads = GradStore::new();
        let gx = block.backward(&cache, &gout, "block", &mut grads).unwrap();

        let loss = |block: &TransformerBlock, x: &Tensor| -> f64 {
            let (y, _) = block.forward_cached(x, None).unwrap();
            y.data().iter().zip(&lw).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        // input gradient, sampled
        for i in (0..x.numel()).step_by(17) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&block, &xp) - loss(&block, &xm)) / (2.0 * h);
            let a = gx.data()[i];
            crate::testutil::assert_grad_close(a, num, 1e-4, &format!("x[{i}]"));
        }
        // every parameter block, sampled coordinates
        let mut paths = Vec::new();
        block.visit_params("block", &mut |path, t| paths.push((path, t.numel())));
        for (path, numel) in paths {
            let analytic = grads.get(&path).unwrap_or_else(|| panic!("no grad for {path}"));
            let step = (numel / 8).max(1);
            for i in (0..numel).step_by(step) {
                let poke = |delta: f64| {
                    let mut b2 = block.clone();
                    b2.visit_params_mut("block", &mut |p, t| {
                        if p == path {
                            t.data_mut()[i] += delta;
                        }
                    });
                    loss(&b2, &x)
                };
                let num = (poke(h) - poke(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                crate::testutil::assert_grad_close(a, num, 1e-4, &format!("{path}[{i}]"));
            }
        }
    }

    #[test]
    fn nat_gradient_check() {
        let layer = random_nat(6, 2, 3, 76);
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let x = Tensor::from_fn(&[1, 5, 4, 6], |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = layer.forward_cached(&x).unwrap();
        let lw: Vec<f64> = (0..y.numel()).map(|_| rng.gen_range(0.5..1.5)).collect();
        let gout = Tensor::new(y.shape().to_vec(), lw.clone()).unwrap();
        let (gx, grads) = layer.backward(&cache, &gout).unwrap();
        let loss = |layer: &NeighborhoodAttnLayer, x: &Tensor| -> f64 {
            let (y, _) = layer.forward_cached(x).unwrap();
            y.data().iter().zip(&lw).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let check = |analytic: &Tensor, poke: &mut dyn FnMut(usize, f64) -> f64, label: &str| {
            for i in 0..analytic.numel() {
                let num = (poke(i, h) - poke(i, -h)) / (2.0 * h);
                let a = analytic.data()[i];
                crate::testutil::assert_grad_close(a, num, 1e-4, &format!("{label}[{i}]"));
            }
        };
        check(&gx, &mut |i, delta| {
            let mut xp = x.clone();
            xp.data_mut()[i] += delta;
            loss(&layer, &xp)
        }, "x");
        check(&grads.rpb, &mut |i, delta| {
            let mut l = layer.clone();
            l.rpb.data_mut()[i] += delta;
            loss(&l, &x)
        }, "rpb");
        check(&grads.wq.weight, &mut |i, delta| {
            let mut l = layer.clone();
            l.wq.weight.data_mut()[i] += delta;
            loss(&l, &x)
        }, "wq.weight");
        check(&grads.wo.bias, &mut |i, delta| {
            let mut l = layer.clone();
            l.wo.bias.data_mut()[i] += delta;
            loss(&l, &x)
        }, "wo.bias");
    }

    #[test]
    fn lpu_and_convffn_gradient_checks() {
        let mut rng = ChaCha20Rng::seed_from_u64(78);
        let mut lpu = Lpu::new(4);
        lpu.dw.weight = Tensor::trunc_normal(lpu.dw.weight.shape(), 0.3, &mut rng);
        lpu.dw.bias = Tensor::trunc_normal(&[4], 0.1, &mut rng);
        let x = Tensor::from_fn(&[1, 4, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = lpu.forward_cached(&x).unwrap();
        let lw: Vec<f64> = (0..y.numel()).map(|_| rng.gen_range(0.5..1.5)).collect();
        let gout = Tensor::new(y.shape().to_vec(), lw.clone()).unwrap();
        let (gx, grads) = lpu.backward(&cache, &gout).unwrap();
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let f = |x: &Tensor| -> f64 {
                let (y, _) = lpu.forward_cached(x).unwrap();
                y.data().iter().zip(&lw).map(|(a, b)| a * b).sum()
            };
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = gx.data()[i];
            crate::testutil::assert_grad_close(a, num, 1e-6, &format!("lpu x[{i}]"));
        }
        for i in 0..grads.weight.numel() {
            let poke = |delta: f64| {
                let mut l2 = lpu.clone();
                l2.dw.weight.data_mut()[i] += delta;
                let (y, _) = l2.forward_cached(&x).unwrap();
                y.data().iter().zip(&lw).map(|(a, b)| a * b).sum::<f64>()
            };
            let num = (poke(h) - poke(-h)) / (2.0 * h);
            let a = grads.weight.data()[i];
            crate::testutil::assert_grad_close(a, num, 1e-6, &format!("lpu w[{i}]"));
        }

        let mut ffn = ConvFfn::new(4, 8);
        randomize_linear(&mut ffn.fc1, &mut rng);
        ffn.dw.weight = Tensor::trunc_normal(ffn.dw.weight.shape(), 0.2, &mut rng);
        randomize_linear(&mut ffn.fc2, &mut rng);
        let (y, cache) = ffn.forward_cached(&x).unwrap();
        let lw: Vec<f64> = (0..y.numel()).map(|_| rng.gen_range(0.5..1.5)).collect();
        let gout = Tensor::new(y.shape().to_vec(), lw.clone()).unwrap();
        let (gx, grads) = ffn.backward(&cache, &gout).unwrap();
        let floss = |ffn: &ConvFfn, x: &Tensor| -> f64 {
            let (y, _) = ffn.forward_cached(x).unwrap();
            y.data().iter().zip(&lw).map(|(a, b)| a * b).sum()
        };
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (floss(&ffn, &xp) - floss(&ffn, &xm)) / (2.0 * h);
            let a = gx.data()[i];
            crate::testutil::assert_grad_close(a, num, 1e-5, &format!("ffn x[{i}]"));
        }
        for i in 0..grads.dw.weight.numel() {
            let poke = |delta: f64| {
                let mut f2 = ffn.clone();
                f2.dw.weight.data_mut()[i] += delta;
                floss(&f2, &x)
            };
            let num = (poke(h) - poke(-h)) / (2.0 * h);
            let a = grads.dw.weight.data()[i];
            crate::testutil::assert_grad_close(a, num, 1e-5, &format!("ffn dw[{i}]"));
        }
    }
}
