//! Deformable multi-head attention: queries attend to a shared set of
//! deformed key/value locations. Keys and values are bilinearly sampled at
//! reference-points-plus-learned-offsets, projected, and attended with a
//! continuous relative position bias sampled from a learned table.
//!
//! The backward pass is exact reverse-mode composition of the kernel
//! backwards, including the coordinate path: gradients flow into the offset
//! network both through the sampled features and through the bias table
//! displacements.

use crate::blocks::{Linear, LinearGrads};
use crate::error::{DatError, Result};
use crate::offsetnet::{
    generate_offsets, generate_offsets_backward, OffsetNetwork, OffsetNetworkCache,
    OffsetNetworkGrads,
};
use crate::sampling::{
    bilinear_sample, bilinear_sample_backward, clip_locations, clip_locations_backward,
    reference_grid, SampleGrid,
};
use crate::tensor::{
    head_add, head_slice, head_write, matmul, matmul_backward, softmax_lastdim,
    softmax_lastdim_backward, transpose2d, GradStore, Tensor,
};

/// Per-head relative position bias table with its nominal feature-map size.
#[derive(Debug, Clone)]
pub struct RelPosBias {
    /// `[M, 2H-1, 2W-1]` learned table, bilinearly sampled at continuous
    /// normalized displacements.
    pub table: Tensor,
    pub nominal_h: usize,
    pub nominal_w: usize,
}

impl RelPosBias {
    pub fn zeros(heads: usize, h: usize, w: usize) -> Self {
        RelPosBias {
            table: Tensor::zeros(&[heads, 2 * h - 1, 2 * w - 1]),
            nominal_h: h,
            nominal_w: w,
        }
    }
}

/// Parameters of one deformable attention layer.
#[derive(Debug, Clone)]
pub struct DmhaLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub offset_net: OffsetNetwork,
    pub heads: usize,
    pub groups: usize,
    /// Downsample factor r between the feature map and the sampling grid.
    pub downsample: usize,
    pub rpb: Option<RelPosBias>,
}

/// Gradients mirroring [`DmhaLayer`].
#[derive(Debug)]
pub struct DmhaGrads {
    pub wq: LinearGrads,
    pub wk: LinearGrads,
    pub wv: LinearGrads,
    pub wo: LinearGrads,
    pub offset_net: OffsetNetworkGrads,
    pub rpb_table: Option<Tensor>,
}

impl DmhaGrads {
    pub fn store(self, prefix: &str, grads: &mut GradStore) {
        self.wq.store(&format!("{prefix}.wq"), grads);
        self.wk.store(&format!("{prefix}.wk"), grads);
        self.wv.store(&format!("{prefix}.wv"), grads);
        self.wo.store(&format!("{prefix}.wo"), grads);
        self.offset_net.store(&format!("{prefix}.offset"), grads);
        if let Some(t) = self.rpb_table {
            grads.accumulate(&format!("{prefix}.rpb"), t);
        }
    }
}

/// Introspection record of one forward pass: the deformed sampling grid, the
/// post-softmax attention, and the assembled sampled features.
#[derive(Debug, Clone)]
pub struct DmhaTrace {
    pub sample_grid: SampleGrid,
    /// `[B, M, HW, N_s]`, rows sum to 1.
    pub attention: Tensor,
    /// `[B, H_G, W_G, C]`.
    pub sampled_features: Tensor,
}

/// Forward intermediates retained for the backward pass.
pub struct DmhaCache {
    dims: (usize, usize, usize, usize),
    x: Tensor,
    q: Tensor,
    offnet_caches: Vec<OffsetNetworkCache>,
    raw_locs: Tensor,
    locs: Tensor,
    sampled: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
    heads_out: Tensor,
    /// Normalized query-to-key displacement fields per `(batch, group)`,
    /// each `[HW, N_s, 2]`; present when the layer carries a bias table.
    disp: Vec<Tensor>,
}

impl DmhaCache {
    /// The introspection subset of the cache.
    pub fn trace(&self) -> DmhaTrace {
        DmhaTrace {
            sample_grid: SampleGrid::new(
                self.locs.clone(),
                self.locs.dim(1),
                self.locs.dim(2),
                self.locs.dim(3),
            )
            .expect("cache grid is well-formed"),
            attention: self.attn.clone(),
            sampled_features: self.sampled.clone(),
        }
    }
}

impl DmhaLayer {
    /// Zero-initialized layer; the model builder randomizes projections.
    pub fn new(
        channels: usize,
        heads: usize,
        groups: usize,
        downsample: usize,
        offset_kernel: usize,
        rpb_nominal: Option<(usize, usize)>,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(DatError::config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        if groups == 0 || heads % groups != 0 {
            return Err(DatError::config(format!(
                "heads {heads} not divisible by offset groups {groups}"
            )));
        }
        if channels % groups != 0 {
            return Err(DatError::config(format!(
                "channels {channels} not divisible by offset groups {groups}"
            )));
        }
        Ok(DmhaLayer {
            wq: Linear::new(channels, channels),
            wk: Linear::new(channels, channels),
            wv: Linear::new(channels, channels),
            wo: Linear::new(channels, channels),
            offset_net: OffsetNetwork::new(channels / groups, offset_kernel, downsample)?,
            heads,
            groups,
            downsample,
            rpb: rpb_nominal.map(|(h, w)| RelPosBias::zeros(heads, h, w)),
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.weight.dim(0)
    }

    /// Group index owning head `m`: heads are assigned to groups in
    /// contiguous blocks of `M / G`.
    pub fn group_of_head(&self, m: usize) -> usize {
        m / (self.heads / self.groups)
    }

    /// Runs the layer, optionally returning the attention trace.
    pub fn forward(&self, x: &Tensor, want_trace: bool) -> Result<(Tensor, Option<DmhaTrace>)> {
        let (y, cache) = self.forward_cached(x)?;
        Ok((y, want_trace.then(|| cache.trace())))
    }

    /// Forward pass retaining every intermediate needed by [`Self::backward`].
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, DmhaCache)> {
        if x.rank() != 4 {
            return Err(DatError::dim(
                "dmha",
                format!("input must be B x H x W x C, got {:?}", x.shape()),
            ));
        }
        let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if c != self.channels() {
            return Err(DatError::config(format!(
                "input channels {c} do not match layer width {}",
                self.channels()
            )));
        }
        let r = self.downsample;
        if h % r != 0 || w % r != 0 {
            return Err(DatError::config(format!(
                "feature map {h}x{w} not divisible by downsample factor {r}"
            )));
        }
        let (m_heads, g_groups) = (self.heads, self.groups);
        let d = c / m_heads;
        let (h_g, w_g) = (h / r, w / r);
        let n = h * w;
        let ns = h_g * w_g;
        let c_g = c / g_groups;

        let x2 = x.reshaped(&[b * n, c])?;
        let q = self.wq.forward(&x2)?;
        q.check_finite("dmha.query_projection")?;

        let q4 = q.reshaped(&[b, h, w, c])?;
        let (offsets, offnet_caches) = generate_offsets(&self.offset_net, &q4, g_groups)?;
        offsets.check_finite("dmha.offsets")?;

        // reference points broadcast over batch and group, plus offsets
        let reference = reference_grid(h_g, w_g);
        let plane = ns * 2;
        let mut raw_locs = Tensor::zeros(&[b, g_groups, h_g, w_g, 2]);
        for bg in 0..b * g_groups {
            let dst = &mut raw_locs.data_mut()[bg * plane..(bg + 1) * plane];
            dst.copy_from_slice(reference.data());
        }
        raw_locs.add_assign(&offsets)?;
        let locs = clip_locations(&raw_locs);

        // group-wise bilinear sampling of the deformed points
        let mut sampled = Tensor::zeros(&[b, h_g, w_g, c]);
        for g in 0..g_groups {
            let xg = x.slice_channels(g * c_g, (g + 1) * c_g);
            let grid = self.group_grid(&locs, b, g, h_g, w_g);
            let sg = bilinear_sample(&xg, &grid)?;
            sampled.set_channels(g * c_g, &sg);
        }
        sampled.check_finite("dmha.sampling")?;

        let s2 = sampled.reshaped(&[b * ns, c])?;
        let k = self.wk.forward(&s2)?;
        let v = self.wv.forward(&s2)?;

        // continuous relative position bias displacements per (batch, group)
        let disp = if self.rpb.is_some() {
            let query_grid = reference_grid(h, w);
            let mut fields = Vec::with_capacity(b * g_groups);
            for bi in 0..b {
                for g in 0..g_groups {
                    fields.push(displacement_field(&query_grid, &locs, bi, g));
                }
            }
            fields
        } else {
            Vec::new()
        };

        let scale = 1.0 / (d as f64).sqrt();
        let mut attn = Tensor::zeros(&[b, m_heads, n, ns]);
        let mut heads_out = Tensor::zeros(&[b * n, c]);
        for bi in 0..b {
            for m in 0..m_heads {
                let qm = head_slice(&q, bi, n, m, d);
                let km = head_slice(&k, bi, ns, m, d);
                let vm = head_slice(&v, bi, ns, m, d);
                let mut scores = matmul(&qm, &transpose2d(&km))?.scale(scale);
                if let Some(rpb) = &self.rpb {
                    let g = self.group_of_head(m);
                    let bias = sample_bias_table(&rpb.table, m, &disp[bi * g_groups + g])?;
                    scores.add_assign(&bias)?;
                }
                scores.check_finite("dmha.attention_scores")?;
                let a = softmax_lastdim(&scores)?;
                let out_m = matmul(&a, &vm)?;
                let abase = (bi * m_heads + m) * n * ns;
                attn.data_mut()[abase..abase + n * ns].copy_from_slice(a.data());
                head_write(&mut heads_out, &out_m, bi, n, m, d);
            }
        }
        let y2 = self.wo.forward(&heads_out)?;
        y2.check_finite("dmha.output_projection")?;
        let y = y2.reshaped(&[b, h, w, c])?;
        Ok((
            y,
            DmhaCache {
                dims: (b, h, w, c),
                x: x.clone(),
                q,
                offnet_caches,
                raw_locs,
                locs,
                sampled,
                k,
                v,
                attn,
                heads_out,
                disp,
            },
        ))
    }

    /// Exact reverse-mode gradients for the input and every parameter,
    /// including the coordinate path through sampling and the bias table.
    pub fn backward(&self, cache: &DmhaCache, grad_out: &Tensor) -> Result<(Tensor, DmhaGrads)> {
        let (b, h, w, c) = cache.dims;
        let r = self.downsample;
        let (m_heads, g_groups) = (self.heads, self.groups);
        let d = c / m_heads;
        let (h_g, w_g) = (h / r, w / r);
        let n = h * w;
        let ns = h_g * w_g;
        let c_g = c / g_groups;
        if grad_out.shape() != [b, h, w, c] {
            return Err(DatError::dim(
                "dmha_backward",
                format!("grad {:?}, expected [{b}, {h}, {w}, {c}]", grad_out.shape()),
            ));
        }
        let g_y2 = grad_out.reshaped(&[b * n, c])?;
        let (g_heads_out, wo_grads) = self.wo.backward(&cache.heads_out, &g_y2)?;

        let scale = 1.0 / (d as f64).sqrt();
        let mut g_q = Tensor::zeros(&[b * n, c]);
        let mut g_k = Tensor::zeros(&[b * ns, c]);
        let mut g_v = Tensor::zeros(&[b * ns, c]);
        let mut g_locs = Tensor::zeros(cache.locs.shape());
        let mut g_table = self
            .rpb
            .as_ref()
            .map(|rpb| Tensor::zeros(rpb.table.shape()));
        for bi in 0..b {
            for m in 0..m_heads {
                let g_out_m = head_slice(&g_heads_out, bi, n, m, d);
                let abase = (bi * m_heads + m) * n * ns;
                let a = Tensor::new(
                    vec![n, ns],
                    cache.attn.data()[abase..abase + n * ns].to_vec(),
                )?;
                let vm = head_slice(&cache.v, bi, ns, m, d);
                let (g_a, g_vm) = matmul_backward(&a, &vm, &g_out_m)?;
                let g_scores = softmax_lastdim_backward(&a, &g_a)?;
                if let (Some(rpb), Some(g_tab)) = (&self.rpb, g_table.as_mut()) {
                    let g = self.group_of_head(m);
                    let disp = &cache.disp[bi * g_groups + g];
                    let g_disp = sample_bias_table_backward(&rpb.table, m, disp, &g_scores, g_tab)?;
                    // disp = (u_query - u_key) / 2, so d disp / d u_key = -1/2
                    accumulate_key_grad(&mut g_locs, &g_disp, bi, g, ns);
                }
                let qm = head_slice(&cache.q, bi, n, m, d);
                let km = head_slice(&cache.k, bi, ns, m, d);
                let g_raw = g_scores.scale(scale);
                let (g_qm, g_km_t) = matmul_backward(&qm, &transpose2d(&km), &g_raw)?;
                head_add(&mut g_q, &g_qm, bi, n, m, d);
                head_add(&mut g_k, &transpose2d(&g_km_t), bi, ns, m, d);
                head_add(&mut g_v, &g_vm, bi, ns, m, d);
            }
        }

        let s2 = cache.sampled.reshaped(&[b * ns, c])?;
        let (g_s_from_k, wk_grads) = self.wk.backward(&s2, &g_k)?;
        let (g_s_from_v, wv_grads) = self.wv.backward(&s2, &g_v)?;
        let mut g_sampled = g_s_from_k;
        g_sampled.add_assign(&g_s_from_v)?;
        let g_sampled = g_sampled.reshaped(&[b, h_g, w_g, c])?;

        let mut g_x = Tensor::zeros(&[b, h, w, c]);
        for g in 0..g_groups {
            let xg = cache.x.slice_channels(g * c_g, (g + 1) * c_g);
            let grid = self.group_grid(&cache.locs, b, g, h_g, w_g);
            let g_sg = g_sampled.slice_channels(g * c_g, (g + 1) * c_g);
            let (g_xg, g_grid) = bilinear_sample_backward(&xg, &grid, &g_sg)?;
            g_x.add_into_channels(g * c_g, &g_xg);
            // scatter grid gradient back into the [B, G, ...] layout
            let plane = ns * 2;
            for bi in 0..b {
                let src = &g_grid.data()[bi * plane..(bi + 1) * plane];
                let dst = (bi * g_groups + g) * plane;
                for (i, v) in src.iter().enumerate() {
                    g_locs.data_mut()[dst + i] += v;
                }
            }
        }

        let g_raw_locs = clip_locations_backward(&cache.raw_locs, &g_locs);
        let (g_q4_off, offset_grads) = generate_offsets_backward(
            &self.offset_net,
            &cache.offnet_caches,
            &g_raw_locs,
            &[b, h, w, c],
        )?;
        g_q.add_assign(&g_q4_off.reshaped(&[b * n, c])?)?;

        let x2 = cache.x.reshaped(&[b * n, c])?;
        let (g_x_from_q, wq_grads) = self.wq.backward(&x2, &g_q)?;
        g_x.add_assign(&g_x_from_q.reshaped(&[b, h, w, c])?)?;

        Ok((
            g_x,
            DmhaGrads {
                wq: wq_grads,
                wk: wk_grads,
                wv: wv_grads,
                wo: wo_grads,
                offset_net: offset_grads,
                rpb_table: g_table,
            },
        ))
    }

    fn group_grid(&self, locs: &Tensor, b: usize, g: usize, h_g: usize, w_g: usize) -> Tensor {
        let plane = h_g * w_g * 2;
        let mut grid = Tensor::zeros(&[b, h_g, w_g, 2]);
        for bi in 0..b {
            let src = (bi * self.groups + g) * plane;
            grid.data_mut()[bi * plane..(bi + 1) * plane]
                .copy_from_slice(&locs.data()[src..src + plane]);
        }
        grid
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.wq.visit_params(&format!("{prefix}.wq"), f);
        self.wk.visit_params(&format!("{prefix}.wk"), f);
        self.wv.visit_params(&format!("{prefix}.wv"), f);
        self.wo.visit_params(&format!("{prefix}.wo"), f);
        self.offset_net.visit_params(&format!("{prefix}.offset"), f);
        if let Some(rpb) = &self.rpb {
            f(format!("{prefix}.rpb"), &rpb.table);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.wq.visit_params_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_params_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_params_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_params_mut(&format!("{prefix}.wo"), f);
        self.offset_net
            .visit_params_mut(&format!("{prefix}.offset"), f);
        if let Some(rpb) = &mut self.rpb {
            f(format!("{prefix}.rpb"), &mut rpb.table);
        }
    }
}

/// Normalized displacement field `(u_query - u_key) / 2` for one
/// `(batch, group)` slice, shape `[HW, N_s, 2]`; every entry lies in
/// `[-1, +1]` because both operands are clipped to that range.
fn displacement_field(query_grid: &Tensor, locs: &Tensor, b: usize, g: usize) -> Tensor {
    let n = query_grid.dim(0) * query_grid.dim(1);
    let groups = locs.dim(1);
    let ns = locs.dim(2) * locs.dim(3);
    let qd = query_grid.data();
    let base = (b * groups + g) * ns * 2;
    let kd = &locs.data()[base..base + ns * 2];
    let mut out = vec![0.0; n * ns * 2];
    for qi in 0..n {
        let (qx, qy) = (qd[qi * 2], qd[qi * 2 + 1]);
        let row = qi * ns * 2;
        for ki in 0..ns {
            out[row + ki * 2] = (qx - kd[ki * 2]) * 0.5;
            out[row + ki * 2 + 1] = (qy - kd[ki * 2 + 1]) * 0.5;
        }
    }
    Tensor::new(vec![n, ns, 2], out).unwrap()
}

/// Bilinearly samples head `m`'s bias table at a displacement field,
/// producing the `[HW, N_s]` additive attention bias.
fn sample_bias_table(table: &Tensor, m: usize, disp: &Tensor) -> Result<Tensor> {
    let (th, tw) = (table.dim(1), table.dim(2));
    let n = disp.dim(0);
    let ns = disp.dim(1);
    let plane = th * tw;
    let map = Tensor::new(
        vec![1, th, tw, 1],
        table.data()[m * plane..(m + 1) * plane].to_vec(),
    )?;
    let grid = disp.reshaped(&[1, n, ns, 2])?;
    let bias = bilinear_sample(&map, &grid)?;
    bias.reshaped(&[n, ns])
}

/// Backward of [`sample_bias_table`]: accumulates the table gradient in
/// place and returns the displacement gradient `[HW, N_s, 2]`.
fn sample_bias_table_backward(
    table: &Tensor,
    m: usize,
    disp: &Tensor,
    grad_bias: &Tensor,
    grad_table: &mut Tensor,
) -> Result<Tensor> {
    let (th, tw) = (table.dim(1), table.dim(2));
    let n = disp.dim(0);
    let ns = disp.dim(1);
    let plane = th * tw;
    let map = Tensor::new(
        vec![1, th, tw, 1],
        table.data()[m * plane..(m + 1) * plane].to_vec(),
    )?;
    let grid = disp.reshaped(&[1, n, ns, 2])?;
    let gout = grad_bias.reshaped(&[1, n, ns, 1])?;
    let (g_map, g_grid) = bilinear_sample_backward(&map, &grid, &gout)?;
    let dst = &mut grad_table.data_mut()[m * plane..(m + 1) * plane];
    for (acc, v) in dst.iter_mut().zip(g_map.data()) {
        *acc += v;
    }
    g_grid.reshaped(&[n, ns, 2])
}

/// Folds a displacement gradient into the key-location gradient for one
/// `(batch, group)` slice; the displacement is `(u_q - u_k)/2`.
fn accumulate_key_grad(g_locs: &mut Tensor, g_disp: &Tensor, b: usize, g: usize, ns: usize) {
    let groups = g_locs.dim(1);
    let n = g_disp.dim(0);
    let base = (b * groups + g) * ns * 2;
    let gd = g_disp.data();
    for qi in 0..n {
        let row = qi * ns * 2;
        for ki in 0..ns {
            let dst = base + ki * 2;
            let v = &mut g_locs.data_mut()[dst..dst + 2];
            v[0] += -0.5 * gd[row + ki * 2];
            v[1] += -0.5 * gd[row + ki * 2 + 1];
        }
    }
}

/// The public per-head bias computation: relative displacements between the
/// query grid and one group's key locations, bilinearly sampled from the
/// head's table. Returns `[B, HW, N_s]`.
pub fn deform_rpb(
    rpb_table: &Tensor,
    query_grid: &Tensor,
    key_locs: &Tensor,
    head: usize,
) -> Result<Tensor> {
    if rpb_table.rank() != 3 {
        return Err(DatError::dim(
            "deform_rpb",
            format!("table must be M x (2H-1) x (2W-1), got {:?}", rpb_table.shape()),
        ));
    }
    let b = key_locs.dim(0);
    let n = query_grid.dim(0) * query_grid.dim(1);
    let ns = key_locs.dim(1) * key_locs.dim(2);
    // view the key grid as a single-group location tensor
    let locs = key_locs.reshaped(&[b, 1, key_locs.dim(1), key_locs.dim(2), 2])?;
    let mut out = Tensor::zeros(&[b, n, ns]);
    for bi in 0..b {
        let disp = displacement_field(query_grid, &locs, bi, 0);
        let bias = sample_bias_table(rpb_table, head, &disp)?;
        out.data_mut()[bi * n * ns..(bi + 1) * n * ns].copy_from_slice(bias.data());
    }
    Ok(out)
}
