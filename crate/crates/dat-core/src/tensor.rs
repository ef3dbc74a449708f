//! Dense `f64` tensor storage and the numeric kernels everything else is
//! built from: matmul, softmax, layer normalization, GELU, grouped 2-D
//! convolution, and global average pooling. Every kernel has a hand-derived
//! backward pass; callers compose them explicitly (there is no autodiff
//! graph).
//!
//! Feature maps use row-major `B x H x W x C` layout, so flattening the
//! spatial axes to a token matrix `[B*H*W, C]` is free and channel-group
//! slices are contiguous at each position.

use crate::error::{DatError, Result};

/// Conventional layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Dense N-dimensional array of 64-bit floats with row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DatError::dim(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Truncated normal initialization: N(0, std) redrawn until |v| <= 2*std.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("std must be positive");
        Tensor::from_fn(shape, |_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                return v;
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(DatError::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Element accessor for tests and small lookups; not for hot loops.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0usize;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(DatError::dim(
                "add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(DatError::dim(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Errors if any element is NaN or infinite, naming the producing step.
    pub fn check_finite(&self, step: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(DatError::NonFinite { step: step.into() })
        }
    }

    /// Copies channels `[c0, c1)` of a `B x H x W x C` map into a new tensor.
    pub fn slice_channels(&self, c0: usize, c1: usize) -> Tensor {
        let c = *self.shape.last().expect("slice_channels on rank-0 tensor");
        debug_assert!(c0 < c1 && c1 <= c);
        let width = c1 - c0;
        let positions = self.data.len() / c;
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = width;
        let mut data = Vec::with_capacity(positions * width);
        for p in 0..positions {
            let base = p * c + c0;
            data.extend_from_slice(&self.data[base..base + width]);
        }
        Tensor { shape, data }
    }

    /// Adds `src` (a channel-sliced map) into channels `[c0, ...)` of self.
    pub fn add_into_channels(&mut self, c0: usize, src: &Tensor) {
        let c = *self.shape.last().unwrap();
        let width = *src.shape.last().unwrap();
        debug_assert!(c0 + width <= c);
        debug_assert_eq!(src.data.len() / width, self.data.len() / c);
        let positions = src.data.len() / width;
        for p in 0..positions {
            let dst = p * c + c0;
            let s = p * width;
            for i in 0..width {
                self.data[dst + i] += src.data[s + i];
            }
        }
    }

    /// Writes `src` into channels `[c0, ...)` of self, overwriting.
    pub fn set_channels(&mut self, c0: usize, src: &Tensor) {
        let c = *self.shape.last().unwrap();
        let width = *src.shape.last().unwrap();
        debug_assert!(c0 + width <= c);
        let positions = src.data.len() / width;
        for p in 0..positions {
            let dst = p * c + c0;
            let s = p * width;
            self.data[dst..dst + width].copy_from_slice(&src.data[s..s + width]);
        }
    }
}

/// A value together with its accumulated gradient; the reverse-mode state
/// carried around by the optimizer and the gradient checker.
#[derive(Debug, Clone)]
pub struct DualTensor {
    pub value: Tensor,
    pub gradient: Tensor,
}

impl DualTensor {
    /// Pairs a value with a zeroed gradient of identical shape.
    pub fn new(value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        DualTensor { value, gradient }
    }

    /// Resets the gradient to zero before a new backward traversal.
    pub fn zero_grad(&mut self) {
        self.gradient.data_mut().fill(0.0);
    }

    pub fn accumulate(&mut self, grad: &Tensor) -> Result<()> {
        self.gradient.add_assign(grad)
    }
}

/// Named gradient accumulator keyed by parameter path; mirrors the
/// checkpoint manifest so optimizer state and gradient checks line up.
#[derive(Debug, Default)]
pub struct GradStore {
    map: std::collections::BTreeMap<String, Tensor>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, path: &str, grad: Tensor) {
        match self.map.get_mut(path) {
            Some(existing) => {
                existing
                    .add_assign(&grad)
                    .expect("gradient shape changed between accumulations");
            }
            None => {
                self.map.insert(path.to_string(), grad);
            }
        }
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.map.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

// ---------------------------------------------------------------------------
// matmul

/// `a[m x k] * b[k x n]`, plain dense product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(DatError::dim(
            "matmul",
            format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(DatError::dim(
            "matmul",
            format!("inner dimensions disagree: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    let out = Tensor::new(vec![m, n], out)?;
    out.check_finite("matmul")?;
    Ok(out)
}

/// Gradients of `matmul`: `grad_a = g * b^T`, `grad_b = a^T * g`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = (a.dim(0), a.dim(1));
    let n = b.dim(1);
    if grad_out.shape() != [m, n] {
        return Err(DatError::dim(
            "matmul_backward",
            format!("grad shape {:?}, expected [{m}, {n}]", grad_out.shape()),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let gd = grad_out.data();
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        let garow = &mut ga[i * k..(i + 1) * k];
        for l in 0..k {
            let brow = &bd[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            garow[l] = acc;
        }
        let arow = &ad[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let gbrow = &mut gb[l * n..(l + 1) * n];
            for j in 0..n {
                gbrow[j] += av * grow[j];
            }
        }
    }
    Ok((Tensor::new(vec![m, k], ga)?, Tensor::new(vec![k, n], gb)?))
}

/// Copies rows `[b*rows, (b+1)*rows)` and columns `[m*d, (m+1)*d)` of a
/// `[B*rows, C]` token matrix: one attention head's view of one batch item.
pub(crate) fn head_slice(x: &Tensor, b: usize, rows: usize, m: usize, d: usize) -> Tensor {
    let c = x.dim(1);
    let mut out = vec![0.0; rows * d];
    for i in 0..rows {
        let src = (b * rows + i) * c + m * d;
        out[i * d..(i + 1) * d].copy_from_slice(&x.data()[src..src + d]);
    }
    Tensor::new(vec![rows, d], out).unwrap()
}

pub(crate) fn head_write(dst: &mut Tensor, src: &Tensor, b: usize, rows: usize, m: usize, d: usize) {
    let c = dst.dim(1);
    for i in 0..rows {
        let t = (b * rows + i) * c + m * d;
        dst.data_mut()[t..t + d].copy_from_slice(&src.data()[i * d..(i + 1) * d]);
    }
}

pub(crate) fn head_add(dst: &mut Tensor, src: &Tensor, b: usize, rows: usize, m: usize, d: usize) {
    let c = dst.dim(1);
    for i in 0..rows {
        let t = (b * rows + i) * c + m * d;
        for j in 0..d {
            dst.data_mut()[t + j] += src.data()[i * d + j];
        }
    }
}

/// Transpose of a rank-2 tensor.
pub fn transpose2d(t: &Tensor) -> Tensor {
    let (m, n) = (t.dim(0), t.dim(1));
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

// ---------------------------------------------------------------------------
// softmax over the last dimension

/// Max-stabilized softmax along the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let last = *x
        .shape()
        .last()
        .ok_or_else(|| DatError::dim("softmax_lastdim", "rank-0 input"))?;
    if last == 0 {
        return Err(DatError::dim("softmax_lastdim", "empty last dimension"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(last) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    out.check_finite("softmax_lastdim")?;
    Ok(out)
}

/// Backward of softmax given its own output `y`: `y .* (g - <g, y>)` per row.
pub fn softmax_lastdim_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if y.shape() != grad_out.shape() {
        return Err(DatError::dim(
            "softmax_lastdim_backward",
            format!("{:?} vs {:?}", y.shape(), grad_out.shape()),
        ));
    }
    let last = *y.shape().last().unwrap();
    let mut out = vec![0.0; y.numel()];
    for ((yrow, grow), orow) in y
        .data()
        .chunks(last)
        .zip(grad_out.data().chunks(last))
        .zip(out.chunks_mut(last))
    {
        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        for i in 0..last {
            orow[i] = yrow[i] * (grow[i] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// layer normalization over the channel (last) axis

/// Per-position layer norm over the last axis, then affine `gamma, beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| DatError::dim("layer_norm", "rank-0 input"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(DatError::dim(
            "layer_norm",
            format!(
                "channel axis {} but gamma {:?}, beta {:?}",
                c,
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![0.0; x.numel()];
    for (row, orow) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..c {
            orow[i] = (row[i] - mean) * inv * g[i] + b[i];
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    out.check_finite("layer_norm")?;
    Ok(out)
}

/// Standard layer-norm gradient; recomputes the row statistics.
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if x.shape() != grad_out.shape() {
        return Err(DatError::dim(
            "layer_norm_backward",
            format!("{:?} vs {:?}", x.shape(), grad_out.shape()),
        ));
    }
    let c = *x.shape().last().unwrap();
    let g = gamma.data();
    let mut gx = vec![0.0; x.numel()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ((row, grow), oxrow) in x
        .data()
        .chunks(c)
        .zip(grad_out.data().chunks(c))
        .zip(gx.chunks_mut(c))
    {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let mut m1 = 0.0; // mean of gamma .* g
        let mut m2 = 0.0; // mean of gamma .* g .* xhat
        for i in 0..c {
            let xhat = (row[i] - mean) * inv;
            let h = g[i] * grow[i];
            m1 += h;
            m2 += h * xhat;
            ggamma[i] += grow[i] * xhat;
            gbeta[i] += grow[i];
        }
        m1 /= c as f64;
        m2 /= c as f64;
        for i in 0..c {
            let xhat = (row[i] - mean) * inv;
            oxrow[i] = inv * (g[i] * grow[i] - m1 - xhat * m2);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(vec![c], ggamma)?,
        Tensor::new(vec![c], gbeta)?,
    ))
}

// ---------------------------------------------------------------------------
// GELU (exact Gaussian CDF form)

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

#[inline]
fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gauss_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Elementwise `x * Phi(x)` with the exact erf-based Gaussian CDF.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| v * gauss_cdf(v)).collect();
    let out = Tensor::new(x.shape().to_vec(), data)?;
    out.check_finite("gelu")?;
    Ok(out)
}

/// Backward of GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(DatError::dim(
            "gelu_backward",
            format!("{:?} vs {:?}", x.shape(), grad_out.shape()),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| g * (gauss_cdf(v) + v * gauss_pdf(v)))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// grouped 2-D convolution (cross-correlation), B x H x W x C layout

pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

fn conv2d_check(x: &Tensor, w: &Tensor, spec: &Conv2dSpec) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(DatError::dim(
            "conv2d",
            format!("expected rank-4 input/weight, got {:?} / {:?}", x.shape(), w.shape()),
        ));
    }
    let (kh, kw) = (w.dim(0), w.dim(1));
    if kh != kw {
        return Err(DatError::config(format!(
            "conv2d requires square kernels, got {kh}x{kw}"
        )));
    }
    let c_in = x.dim(3);
    let c_out = w.dim(3);
    if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(DatError::config(format!(
            "conv2d groups {} must divide c_in {} and c_out {}",
            spec.groups, c_in, c_out
        )));
    }
    if w.dim(2) != c_in / spec.groups {
        return Err(DatError::dim(
            "conv2d",
            format!(
                "weight per-group input channels {} but c_in/groups = {}",
                w.dim(2),
                c_in / spec.groups
            ),
        ));
    }
    let (h, wdt) = (x.dim(1), x.dim(2));
    let k = kh;
    if h + 2 * spec.padding < k || wdt + 2 * spec.padding < k {
        return Err(DatError::config(format!(
            "conv2d kernel {k} exceeds padded input {}x{}",
            h + 2 * spec.padding,
            wdt + 2 * spec.padding
        )));
    }
    let h_out = (h + 2 * spec.padding - k) / spec.stride + 1;
    let w_out = (wdt + 2 * spec.padding - k) / spec.stride + 1;
    if h_out == 0 || w_out == 0 {
        return Err(DatError::config("conv2d output would be empty".to_string()));
    }
    Ok((k, c_in, c_out, h_out))
}

/// Grouped cross-correlation over a `B x H x W x Cin` map.
///
/// Weight layout is `k x k x Cin_per_group x Cout`; covers depthwise
/// (`groups == Cin`) and pointwise (`k == 1`) as special cases.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &Conv2dSpec) -> Result<Tensor> {
    let (k, c_in, c_out, _) = conv2d_check(x, w, spec)?;
    let (b, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let h_out = (h + 2 * spec.padding - k) / spec.stride + 1;
    let w_out = (wd + 2 * spec.padding - k) / spec.stride + 1;
    if let Some(bt) = bias {
        if bt.shape() != [c_out] {
            return Err(DatError::dim(
                "conv2d",
                format!("bias {:?}, expected [{c_out}]", bt.shape()),
            ));
        }
    }
    let cin_g = c_in / spec.groups;
    let cout_g = c_out / spec.groups;
    let xd = x.data();
    let wdta = w.data();
    let mut out = vec![0.0; b * h_out * w_out * c_out];
    if let Some(bt) = bias {
        for chunk in out.chunks_mut(c_out) {
            chunk.copy_from_slice(bt.data());
        }
    }
    for bi in 0..b {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let obase = ((bi * h_out + oy) * w_out + ox) * c_out;
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let ibase = ((bi * h + iy as usize) * wd + ix as usize) * c_in;
                        let wbase = (ky * k + kx) * cin_g * c_out;
                        for g in 0..spec.groups {
                            for ic in 0..cin_g {
                                let xv = xd[ibase + g * cin_g + ic];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = wbase + ic * c_out + g * cout_g;
                                let orow = obase + g * cout_g;
                                for oc in 0..cout_g {
                                    out[orow + oc] += xv * wdta[wrow + oc];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::new(vec![b, h_out, w_out, c_out], out)?;
    out.check_finite("conv2d")?;
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input, weight, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &Conv2dSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (k, c_in, c_out, _) = conv2d_check(x, w, spec)?;
    let (b, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let h_out = (h + 2 * spec.padding - k) / spec.stride + 1;
    let w_out = (wd + 2 * spec.padding - k) / spec.stride + 1;
    if grad_out.shape() != [b, h_out, w_out, c_out] {
        return Err(DatError::dim(
            "conv2d_backward",
            format!(
                "grad shape {:?}, expected [{b}, {h_out}, {w_out}, {c_out}]",
                grad_out.shape()
            ),
        ));
    }
    let cin_g = c_in / spec.groups;
    let cout_g = c_out / spec.groups;
    let xd = x.data();
    let wdta = w.data();
    let gd = grad_out.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wdta.len()];
    let mut gb = vec![0.0; c_out];
    for chunk in gd.chunks(c_out) {
        for (acc, &g) in gb.iter_mut().zip(chunk) {
            *acc += g;
        }
    }
    for bi in 0..b {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let obase = ((bi * h_out + oy) * w_out + ox) * c_out;
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let ibase = ((bi * h + iy as usize) * wd + ix as usize) * c_in;
                        let wbase = (ky * k + kx) * cin_g * c_out;
                        for g in 0..spec.groups {
                            for ic in 0..cin_g {
                                let xi = ibase + g * cin_g + ic;
                                let xv = xd[xi];
                                let wrow = wbase + ic * c_out + g * cout_g;
                                let orow = obase + g * cout_g;
                                let mut acc = 0.0;
                                for oc in 0..cout_g {
                                    let go = gd[orow + oc];
                                    acc += go * wdta[wrow + oc];
                                    gw[wrow + oc] += xv * go;
                                }
                                gx[xi] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![c_out], gb)?,
    ))
}

// ---------------------------------------------------------------------------
// global average pooling

/// Spatial mean per channel: `B x H x W x C -> B x C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(DatError::dim(
            "global_avg_pool",
            format!("expected rank-4 input, got {:?}", x.shape()),
        ));
    }
    let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let inv = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        let obase = bi * c;
        for p in 0..h * w {
            let ibase = (bi * h * w + p) * c;
            for ci in 0..c {
                out[obase + ci] += x.data()[ibase + ci];
            }
        }
        for v in &mut out[obase..obase + c] {
            *v *= inv;
        }
    }
    Tensor::new(vec![b, c], out)
}

/// Backward of pooling: distributes the gradient uniformly over positions.
pub fn global_avg_pool_backward(h: usize, w: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (b, c) = (grad_out.dim(0), grad_out.dim(1));
    let inv = 1.0 / (h * w) as f64;
    let mut gx = vec![0.0; b * h * w * c];
    for bi in 0..b {
        let gbase = bi * c;
        for p in 0..h * w {
            let xbase = (bi * h * w + p) * c;
            for ci in 0..c {
                gx[xbase + ci] = grad_out.data()[gbase + ci] * inv;
            }
        }
    }
    Tensor::new(vec![b, h, w, c], gx)
}
