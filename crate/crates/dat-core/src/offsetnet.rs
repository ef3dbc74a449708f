//! The lightweight offset generation network: a depthwise `k x k` stride-`r`
//! convolution, LayerNorm, GELU, and a bias-free `1 x 1` projection down to
//! two offset channels. One network is shared across all offset groups.

use crate::error::{DatError, Result};
use crate::tensor::{
    conv2d, conv2d_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, Conv2dSpec,
    GradStore, Tensor, LN_EPS,
};

/// Parameters of the offset generation network over one channel group.
#[derive(Debug, Clone)]
pub struct OffsetNetwork {
    /// Depthwise kernel, `[k, k, 1, C_g]`.
    pub dw_weight: Tensor,
    pub dw_bias: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    /// Pointwise projection to 2 offset channels, `[1, 1, C_g, 2]`; carries
    /// no bias so zero weights mean zero offsets.
    pub proj_weight: Tensor,
    pub kernel: usize,
    pub stride: usize,
}

/// Gradients mirroring [`OffsetNetwork`].
#[derive(Debug, Clone)]
pub struct OffsetNetworkGrads {
    pub dw_weight: Tensor,
    pub dw_bias: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub proj_weight: Tensor,
}

/// Intermediates retained by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct OffsetNetworkCache {
    input: Tensor,
    dw_out: Tensor,
    ln_out: Tensor,
    act: Tensor,
}

impl OffsetNetwork {
    /// Zero-initialized network; the model builder randomizes the depthwise
    /// weights and keeps the projection at zero so training starts from the
    /// undeformed reference grid.
    pub fn new(channels_per_group: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel < stride {
            return Err(DatError::config(format!(
                "offset kernel {kernel} must be at least the stride {stride}"
            )));
        }
        if kernel % 2 == 0 {
            return Err(DatError::config(format!(
                "offset kernel {kernel} must be odd for same padding"
            )));
        }
        let c = channels_per_group;
        Ok(OffsetNetwork {
            dw_weight: Tensor::zeros(&[kernel, kernel, 1, c]),
            dw_bias: Tensor::zeros(&[c]),
            ln_gamma: Tensor::full(&[c], 1.0),
            ln_beta: Tensor::zeros(&[c]),
            proj_weight: Tensor::zeros(&[1, 1, c, 2]),
            kernel,
            stride,
        })
    }

    pub fn channels_per_group(&self) -> usize {
        self.dw_weight.dim(3)
    }

    fn dw_spec(&self) -> Conv2dSpec {
        Conv2dSpec {
            stride: self.stride,
            padding: (self.kernel - 1) / 2,
            groups: self.channels_per_group(),
        }
    }

    /// Runs the network on one channel group `[B, H, W, C_g]`, producing an
    /// offset field `[B, H/r, W/r, 2]` in normalized coordinate units.
    pub fn forward(&self, group: &Tensor) -> Result<(Tensor, OffsetNetworkCache)> {
        let dw_out = conv2d(group, &self.dw_weight, Some(&self.dw_bias), &self.dw_spec())?;
        let ln_out = layer_norm(&dw_out, &self.ln_gamma, &self.ln_beta, LN_EPS)?;
        let act = gelu(&ln_out)?;
        let proj_spec = Conv2dSpec { stride: 1, padding: 0, groups: 1 };
        let offsets = conv2d(&act, &self.proj_weight, None, &proj_spec)?;
        Ok((
            offsets,
            OffsetNetworkCache { input: group.clone(), dw_out, ln_out, act },
        ))
    }

    /// Backward through the network, returning the gradient w.r.t. the group
    /// input and all parameter gradients.
    pub fn backward(
        &self,
        cache: &OffsetNetworkCache,
        grad_offsets: &Tensor,
    ) -> Result<(Tensor, OffsetNetworkGrads)> {
        let proj_spec = Conv2dSpec { stride: 1, padding: 0, groups: 1 };
        let (g_act, g_proj, _) =
            conv2d_backward(&cache.act, &self.proj_weight, &proj_spec, grad_offsets)?;
        let g_ln = gelu_backward(&cache.ln_out, &g_act)?;
        let (g_dw_out, g_gamma, g_beta) =
            layer_norm_backward(&cache.dw_out, &self.ln_gamma, LN_EPS, &g_ln)?;
        let (g_input, g_dww, g_dwb) =
            conv2d_backward(&cache.input, &self.dw_weight, &self.dw_spec(), &g_dw_out)?;
        Ok((
            g_input,
            OffsetNetworkGrads {
                dw_weight: g_dww,
                dw_bias: g_dwb,
                ln_gamma: g_gamma,
                ln_beta: g_beta,
                proj_weight: g_proj,
            },
        ))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.dw_weight"), &self.dw_weight);
        f(format!("{prefix}.dw_bias"), &self.dw_bias);
        f(format!("{prefix}.ln_gamma"), &self.ln_gamma);
        f(format!("{prefix}.ln_beta"), &self.ln_beta);
        f(format!("{prefix}.proj_weight"), &self.proj_weight);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.dw_weight"), &mut self.dw_weight);
        f(format!("{prefix}.dw_bias"), &mut self.dw_bias);
        f(format!("{prefix}.ln_gamma"), &mut self.ln_gamma);
        f(format!("{prefix}.ln_beta"), &mut self.ln_beta);
        f(format!("{prefix}.proj_weight"), &mut self.proj_weight);
    }
}

impl OffsetNetworkGrads {
    pub fn zeros_like(net: &OffsetNetwork) -> Self {
        OffsetNetworkGrads {
            dw_weight: Tensor::zeros(net.dw_weight.shape()),
            dw_bias: Tensor::zeros(net.dw_bias.shape()),
            ln_gamma: Tensor::zeros(net.ln_gamma.shape()),
            ln_beta: Tensor::zeros(net.ln_beta.shape()),
            proj_weight: Tensor::zeros(net.proj_weight.shape()),
        }
    }

    pub fn accumulate(&mut self, other: &OffsetNetworkGrads) -> Result<()> {
        self.dw_weight.add_assign(&other.dw_weight)?;
        self.dw_bias.add_assign(&other.dw_bias)?;
        self.ln_gamma.add_assign(&other.ln_gamma)?;
        self.ln_beta.add_assign(&other.ln_beta)?;
        self.proj_weight.add_assign(&other.proj_weight)
    }

    pub fn store(self, prefix: &str, grads: &mut GradStore) {
        grads.accumulate(&format!("{prefix}.dw_weight"), self.dw_weight);
        grads.accumulate(&format!("{prefix}.dw_bias"), self.dw_bias);
        grads.accumulate(&format!("{prefix}.ln_gamma"), self.ln_gamma);
        grads.accumulate(&format!("{prefix}.ln_beta"), self.ln_beta);
        grads.accumulate(&format!("{prefix}.proj_weight"), self.proj_weight);
    }
}

/// Splits `q` into G contiguous channel groups, runs the shared network on
/// each, and stacks the per-group offset fields as `[B, G, H/r, W/r, 2]`.
pub fn generate_offsets(
    net: &OffsetNetwork,
    q: &Tensor,
    groups: usize,
) -> Result<(Tensor, Vec<OffsetNetworkCache>)> {
    let (b, h, w, c) = (q.dim(0), q.dim(1), q.dim(2), q.dim(3));
    if groups == 0 || c % groups != 0 {
        return Err(DatError::config(format!(
            "channels {c} not divisible by offset groups {groups}"
        )));
    }
    let c_g = c / groups;
    if c_g != net.channels_per_group() {
        return Err(DatError::config(format!(
            "offset network expects {} channels per group, got {c_g}",
            net.channels_per_group()
        )));
    }
    let r = net.stride;
    if h % r != 0 || w % r != 0 {
        return Err(DatError::config(format!(
            "feature map {h}x{w} not divisible by downsample factor {r}"
        )));
    }
    let (h_g, w_g) = (h / r, w / r);
    let mut out = Tensor::zeros(&[b, groups, h_g, w_g, 2]);
    let mut caches = Vec::with_capacity(groups);
    let plane = h_g * w_g * 2;
    for g in 0..groups {
        let slice = q.slice_channels(g * c_g, (g + 1) * c_g);
        let (offsets, cache) = net.forward(&slice)?;
        for bi in 0..b {
            let src = &offsets.data()[bi * plane..(bi + 1) * plane];
            let dst = (bi * groups + g) * plane;
            out.data_mut()[dst..dst + plane].copy_from_slice(src);
        }
        caches.push(cache);
    }
    Ok((out, caches))
}

/// Backward of [`generate_offsets`]: scatters group input gradients back into
/// the query layout and accumulates the shared parameter gradients.
pub fn generate_offsets_backward(
    net: &OffsetNetwork,
    caches: &[OffsetNetworkCache],
    grad_offsets: &Tensor,
    q_shape: &[usize],
) -> Result<(Tensor, OffsetNetworkGrads)> {
    let (b, c) = (q_shape[0], q_shape[3]);
    let groups = grad_offsets.dim(1);
    let c_g = c / groups;
    let plane = grad_offsets.dim(2) * grad_offsets.dim(3) * 2;
    let mut grad_q = Tensor::zeros(q_shape);
    let mut grads = OffsetNetworkGrads::zeros_like(net);
    for (g, cache) in caches.iter().enumerate() {
        let mut per_group = Tensor::zeros(&[b, grad_offsets.dim(2), grad_offsets.dim(3), 2]);
        for bi in 0..b {
            let src = (bi * groups + g) * plane;
            let dst = bi * plane;
            per_group.data_mut()[dst..dst + plane]
                .copy_from_slice(&grad_offsets.data()[src..src + plane]);
        }
        let (g_slice, g_params) = net.backward(cache, &per_group)?;
        grad_q.add_into_channels(g * c_g, &g_slice);
        grads.accumulate(&g_params)?;
    }
    Ok((grad_q, grads))
}
