//! Model assembly: stem, four stages of alternating local/deformable blocks
//! (stage four is all-deformable), downsampling between stages, per-stage
//! feature normalization, the classification head, deterministic
//! initialization, and bit-exact checkpoint persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::blocks::{
    Attention, BlockCache, Downsample, DownsampleCache, LayerNormLayer, Linear,
    NeighborhoodAttnLayer, PatchEmbed, PatchEmbedCache, TransformerBlock,
};
use crate::dmha::{DmhaLayer, DmhaTrace};
use crate::error::{DatError, Result};
use crate::tensor::{global_avg_pool, global_avg_pool_backward, GradStore, Tensor};

/// One pyramid stage from the architecture table.
#[derive(Debug, Clone)]
pub struct StageConfig {
    /// Number of (local, deformable) block pairs; the fourth stage runs
    /// `2 * pairs` deformable blocks instead.
    pub pairs: usize,
    pub channels: usize,
    pub heads: usize,
    pub offset_groups: usize,
    /// Downsample factor r between feature map and sampling grid.
    pub downsample_factor: usize,
    /// Neighborhood attention kernel K; absent in the all-deformable stage.
    pub local_kernel: Option<usize>,
    /// Offset network kernel k.
    pub offset_kernel: usize,
}

/// Full architecture description.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub stages: [StageConfig; 4],
    pub num_classes: usize,
    pub input_resolution: usize,
    pub drop_path_max: f64,
}

impl ModelConfig {
    /// Named presets. The three paper-scale variants plus a desk-scale toy.
    pub fn preset(name: &str) -> Result<ModelConfig> {
        let table = |c: [usize; 4],
                     pairs: [usize; 4],
                     heads: [usize; 4],
                     groups: [usize; 4],
                     drop_path: f64| {
            let r = [8usize, 4, 2, 1];
            let k_off = [9usize, 7, 5, 3];
            let stages = std::array::from_fn(|i| StageConfig {
                pairs: pairs[i],
                channels: c[i],
                heads: heads[i],
                offset_groups: groups[i],
                downsample_factor: r[i],
                local_kernel: (i < 3).then_some(7),
                offset_kernel: k_off[i],
            });
            ModelConfig {
                stages,
                num_classes: 1000,
                input_resolution: 224,
                drop_path_max: drop_path,
            }
        };
        match name {
            "dat-tiny++" => Ok(table(
                [64, 128, 256, 512],
                [1, 2, 9, 1],
                [2, 4, 8, 16],
                [1, 2, 4, 8],
                0.2,
            )),
            "dat-small++" => Ok(table(
                [96, 192, 384, 768],
                [1, 2, 9, 1],
                [3, 6, 12, 24],
                [1, 2, 3, 6],
                0.4,
            )),
            // stage 3 uses r = 2 like the other variants; the printed r = 8
            // would make the sampling grid non-integral at 224^2
            "dat-base++" => Ok(table(
                [128, 256, 512, 1024],
                [1, 2, 9, 1],
                [4, 8, 16, 32],
                [2, 4, 8, 16],
                0.6,
            )),
            "dat-nano" => {
                let c = [16usize, 32, 64, 128];
                let pairs = [1usize, 1, 2, 1];
                let heads = [2usize, 2, 4, 8];
                let groups = [1usize, 2, 2, 4];
                let r = [2usize, 2, 2, 1];
                let local = [Some(3usize), Some(3), Some(1), None];
                let stages = std::array::from_fn(|i| StageConfig {
                    pairs: pairs[i],
                    channels: c[i],
                    heads: heads[i],
                    offset_groups: groups[i],
                    downsample_factor: r[i],
                    local_kernel: local[i],
                    offset_kernel: 3,
                });
                Ok(ModelConfig {
                    stages,
                    num_classes: 2,
                    input_resolution: 32,
                    drop_path_max: 0.0,
                })
            }
            other => Err(DatError::Argument(format!(
                "unknown preset '{other}' (expected dat-tiny++, dat-small++, dat-base++, dat-nano)"
            ))),
        }
    }

    pub fn preset_names() -> [&'static str; 4] {
        ["dat-tiny++", "dat-small++", "dat-base++", "dat-nano"]
    }

    /// Nominal feature-map side length of stage `i` at the configured
    /// input resolution (strides 4, 8, 16, 32).
    pub fn stage_size(&self, i: usize) -> usize {
        self.input_resolution / (4 << i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_resolution % 32 != 0 {
            return Err(DatError::config(format!(
                "input_resolution {} not divisible by 32",
                self.input_resolution
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.pairs == 0 {
                return Err(DatError::config(format!("stages[{i}].pairs must be positive")));
            }
            if s.heads == 0 || s.channels % s.heads != 0 {
                return Err(DatError::config(format!(
                    "stages[{i}].channels {} not divisible by heads {}",
                    s.channels, s.heads
                )));
            }
            if s.offset_groups == 0 || s.heads % s.offset_groups != 0 {
                return Err(DatError::config(format!(
                    "stages[{i}].heads {} not divisible by offset_groups {}",
                    s.heads, s.offset_groups
                )));
            }
            if s.channels % s.offset_groups != 0 {
                return Err(DatError::config(format!(
                    "stages[{i}].channels {} not divisible by offset_groups {}",
                    s.channels, s.offset_groups
                )));
            }
            let size = self.stage_size(i);
            if s.downsample_factor == 0 || size % s.downsample_factor != 0 {
                return Err(DatError::config(format!(
                    "stages[{i}].downsample_factor {} does not divide the stage size {size}",
                    s.downsample_factor
                )));
            }
            if let Some(k) = s.local_kernel {
                if k % 2 == 0 {
                    return Err(DatError::config(format!(
                        "stages[{i}].local_kernel {k} must be odd"
                    )));
                }
                if k > size {
                    return Err(DatError::config(format!(
                        "stages[{i}].local_kernel {k} exceeds the stage size {size}"
                    )));
                }
            }
            if i > 0 && s.channels != 2 * self.stages[i - 1].channels {
                return Err(DatError::config(format!(
                    "stages[{i}].channels {} must double the previous stage's {}",
                    s.channels,
                    self.stages[i - 1].channels
                )));
            }
        }
        if self.num_classes == 0 {
            return Err(DatError::config("num_classes must be positive".to_string()));
        }
        Ok(())
    }
}

pub struct Stage {
    pub blocks: Vec<TransformerBlock>,
}

/// The assembled backbone plus classification head.
pub struct Model {
    pub config: ModelConfig,
    pub stem: PatchEmbed,
    pub stages: Vec<Stage>,
    pub downsamples: Vec<Downsample>,
    /// Per-stage output normalization; the last one also feeds the head.
    pub stage_norms: Vec<LayerNormLayer>,
    pub head: Linear,
}

const MLP_RATIO: usize = 4;

/// Builds the block list of one stage: pairs of (local, deformable) in the
/// first three stages, all-deformable in the fourth.
fn build_stage(cfg: &ModelConfig, index: usize) -> Result<Stage> {
    let s = &cfg.stages[index];
    let nominal = cfg.stage_size(index);
    let mut blocks = Vec::new();
    let make_dmha = || {
        DmhaLayer::new(
            s.channels,
            s.heads,
            s.offset_groups,
            s.downsample_factor,
            s.offset_kernel,
            Some((nominal, nominal)),
        )
    };
    for _ in 0..s.pairs {
        if let Some(k) = s.local_kernel {
            blocks.push(TransformerBlock::new(
                Attention::Local(NeighborhoodAttnLayer::new(s.channels, s.heads, k)?),
                s.channels,
                MLP_RATIO,
                0.0,
            ));
        } else {
            blocks.push(TransformerBlock::new(
                Attention::Deformable(make_dmha()?),
                s.channels,
                MLP_RATIO,
                0.0,
            ));
        }
        blocks.push(TransformerBlock::new(
            Attention::Deformable(make_dmha()?),
            s.channels,
            MLP_RATIO,
            0.0,
        ));
    }
    Ok(Stage { blocks })
}

/// Deterministic initialization from a seed: truncated normal (std 0.02)
/// weights, zero biases, identity norms, zero offset projections, zero bias
/// tables, and a zeroed classifier head.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut stages = Vec::with_capacity(4);
    for i in 0..4 {
        stages.push(build_stage(config, i)?);
    }
    // linear stochastic-depth schedule over blocks in topological order
    let total: usize = stages.iter().map(|s| s.blocks.len()).sum();
    let mut t = 0usize;
    for stage in &mut stages {
        for block in &mut stage.blocks {
            block.drop_path = if total > 1 {
                config.drop_path_max * t as f64 / (total - 1) as f64
            } else {
                0.0
            };
            t += 1;
        }
    }
    let mut model = Model {
        config: config.clone(),
        stem: PatchEmbed::new(3, config.stages[0].channels),
        stages,
        downsamples: (0..3)
            .map(|i| Downsample::new(config.stages[i].channels))
            .collect(),
        stage_norms: (0..4)
            .map(|i| LayerNormLayer::new(config.stages[i].channels))
            .collect(),
        head: Linear::new(config.stages[3].channels, config.num_classes),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    model.visit_params_mut(&mut |path, tensor| {
        if path.starts_with("head.") || path.ends_with(".rpb") || path.ends_with(".proj_weight") {
            tensor.data_mut().fill(0.0);
        } else if path.ends_with(".gamma") {
            tensor.data_mut().fill(1.0);
        } else if path.ends_with(".beta") || path.ends_with(".bias") {
            tensor.data_mut().fill(0.0);
        } else {
            *tensor = Tensor::trunc_normal(tensor.shape(), 0.02, &mut rng);
        }
    });
    Ok(model)
}

fn reborrow_rng<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Everything the model backward pass needs from one forward pass.
pub struct ModelCache {
    stem: PatchEmbedCache,
    blocks: Vec<Vec<BlockCache>>,
    downsamples: Vec<DownsampleCache>,
    last: Tensor,
    normed: Tensor,
    pooled: Tensor,
    spatial: (usize, usize),
}

impl Model {
    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.rank() != 4 || image.dim(3) != 3 {
            return Err(DatError::dim(
                "model",
                format!("input must be B x H x W x 3, got {:?}", image.shape()),
            ));
        }
        let (h, w) = (image.dim(1), image.dim(2));
        if h % 32 != 0 || w % 32 != 0 {
            return Err(DatError::config(format!(
                "input dims {h}x{w} must be divisible by 32"
            )));
        }
        Ok(())
    }

    /// Features at strides 4/8/16/32, each layer-normalized.
    pub fn forward_features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(image)?;
        let (mut x, _) = self.stem.forward_cached(image)?;
        let mut features = Vec::with_capacity(4);
        for i in 0..4 {
            for block in &self.stages[i].blocks {
                let (y, _) = block.forward_cached(&x, None)?;
                x = y;
            }
            features.push(self.stage_norms[i].forward(&x)?);
            if i < 3 {
                let (y, _) = self.downsamples[i].forward_cached(&x)?;
                x = y;
            }
        }
        Ok(features)
    }

    /// Classification logits: final stage norm, pooled, linear head.
    pub fn forward_logits(&self, image: &Tensor) -> Result<Tensor> {
        let (logits, _) = self.forward_collect(image, false)?;
        Ok(logits)
    }

    /// Logits plus the attention trace of every deformable layer, ordered
    /// by depth.
    pub fn forward_traces(&self, image: &Tensor) -> Result<(Tensor, Vec<DmhaTrace>)> {
        self.forward_collect(image, true)
    }

    fn forward_collect(
        &self,
        image: &Tensor,
        want_traces: bool,
    ) -> Result<(Tensor, Vec<DmhaTrace>)> {
        self.check_input(image)?;
        let (mut x, _) = self.stem.forward_cached(image)?;
        let mut traces = Vec::new();
        for i in 0..4 {
            for block in &self.stages[i].blocks {
                let (y, cache) = block.forward_cached(&x, None)?;
                if want_traces {
                    if let Some(trace) = cache.dmha_trace() {
                        traces.push(trace);
                    }
                }
                x = y;
            }
            if i < 3 {
                let (y, _) = self.downsamples[i].forward_cached(&x)?;
                x = y;
            }
        }
        let normed = self.stage_norms[3].forward(&x)?;
        let pooled = global_avg_pool(&normed)?;
        let logits = self.head.forward(&pooled)?;
        Ok((logits, traces))
    }

    /// Training forward: retains every intermediate for [`Self::backward`].
    /// Stochastic depth uses `rng` when provided.
    pub fn forward_cached(
        &self,
        image: &Tensor,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Tensor, ModelCache)> {
        self.check_input(image)?;
        let (mut x, stem_cache) = self.stem.forward_cached(image)?;
        let mut blocks = Vec::with_capacity(4);
        let mut ds_caches = Vec::with_capacity(3);
        for i in 0..4 {
            let mut stage_caches = Vec::with_capacity(self.stages[i].blocks.len());
            for block in &self.stages[i].blocks {
                let (y, cache) = block.forward_cached(&x, reborrow_rng(&mut rng))?;
                stage_caches.push(cache);
                x = y;
            }
            blocks.push(stage_caches);
            if i < 3 {
                let (y, cache) = self.downsamples[i].forward_cached(&x)?;
                ds_caches.push(cache);
                x = y;
            }
        }
        let normed = self.stage_norms[3].forward(&x)?;
        let pooled = global_avg_pool(&normed)?;
        let logits = self.head.forward(&pooled)?;
        let spatial = (x.dim(1), x.dim(2));
        Ok((
            logits,
            ModelCache {
                stem: stem_cache,
                blocks,
                downsamples: ds_caches,
                last: x,
                normed,
                pooled,
                spatial,
            },
        ))
    }

    /// Reverse-mode pass through the whole model; returns gradients for
    /// every parameter on the classification path, keyed by parameter path.
    pub fn backward(&self, cache: &ModelCache, grad_logits: &Tensor) -> Result<GradStore> {
        let mut grads = GradStore::new();
        let (g_pooled, head_grads) = self.head.backward(&cache.pooled, grad_logits)?;
        head_grads.store("head", &mut grads);
        let (sh, sw) = cache.spatial;
        let g_normed =
            global_avg_pool_backward(sh, sw, &g_pooled)?.reshaped(cache.normed.shape())?;
        let (mut g_x, norm_grads) = self.stage_norms[3].backward(&cache.last, &g_normed)?;
        norm_grads.store("norms.3", &mut grads);
        for i in (0..4).rev() {
            if i < 3 {
                g_x = self.downsamples[i].backward(
                    &cache.downsamples[i],
                    &g_x,
                    &format!("downsamples.{i}"),
                    &mut grads,
                )?;
            }
            for (j, block) in self.stages[i].blocks.iter().enumerate().rev() {
                g_x = block.backward(
                    &cache.blocks[i][j],
                    &g_x,
                    &format!("stages.{i}.blocks.{j}"),
                    &mut grads,
                )?;
            }
        }
        self.stem.backward(&cache.stem, &g_x, "stem", &mut grads)?;
        Ok(grads)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.stem.visit_params("stem", f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.blocks.iter().enumerate() {
                block.visit_params(&format!("stages.{i}.blocks.{j}"), f);
            }
            if i < 3 {
                self.downsamples[i].visit_params(&format!("downsamples.{i}"), f);
            }
        }
        for (i, norm) in self.stage_norms.iter().enumerate() {
            norm.visit_params(&format!("norms.{i}"), f);
        }
        self.head.visit_params("head", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.visit_params_mut("stem", f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_params_mut(&format!("stages.{i}.blocks.{j}"), f);
            }
        }
        for (i, ds) in self.downsamples.iter_mut().enumerate() {
            ds.visit_params_mut(&format!("downsamples.{i}"), f);
        }
        for (i, norm) in self.stage_norms.iter_mut().enumerate() {
            norm.visit_params_mut(&format!("norms.{i}"), f);
        }
        self.head.visit_params_mut("head", f);
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Applies `f` to the parameter at `path`; errors if no such parameter.
    pub fn with_param_mut(&mut self, path: &str, f: impl FnOnce(&mut Tensor)) -> Result<()> {
        let mut f = Some(f);
        let mut hit = false;
        self.visit_params_mut(&mut |p, t| {
            if p == path {
                if let Some(f) = f.take() {
                    f(t);
                    hit = true;
                }
            }
        });
        if hit {
            Ok(())
        } else {
            Err(DatError::Argument(format!("no parameter named '{path}'")))
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut entries = Vec::new();
        self.visit_params(&mut |p, t| entries.push((p, t.clone())));
        write_tensor_container(path, &entries)
    }
}

/// Rebuilds a model from `config` and a checkpoint, validating the full
/// parameter manifest: every expected tensor present exactly once with the
/// right shape, nothing extra.
pub fn load_checkpoint(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Model> {
    let mut model = build_model(config, 0)?;
    let entries = read_tensor_container(path)?;
    let mut loaded: std::collections::BTreeMap<String, Tensor> = std::collections::BTreeMap::new();
    for (name, tensor) in entries {
        if loaded.insert(name.clone(), tensor).is_some() {
            return Err(DatError::Manifest(format!("duplicate tensor '{name}'")));
        }
    }
    let mut expected = Vec::new();
    model.visit_params(&mut |p, t| expected.push((p, t.shape().to_vec())));
    for (name, shape) in &expected {
        match loaded.get(name) {
            None => return Err(DatError::Manifest(format!("missing tensor '{name}'"))),
            Some(t) if t.shape() != &shape[..] => {
                return Err(DatError::Manifest(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            Some(_) => {}
        }
    }
    if loaded.len() != expected.len() {
        let known: std::collections::BTreeSet<_> =
            expected.iter().map(|(p, _)| p.clone()).collect();
        let extra = loaded
            .keys()
            .find(|k| !known.contains(*k))
            .cloned()
            .unwrap_or_default();
        return Err(DatError::Manifest(format!("unexpected tensor '{extra}'")));
    }
    model.visit_params_mut(&mut |p, t| {
        *t = loaded.remove(&p).expect("manifest was validated");
    });
    Ok(model)
}

// ---------------------------------------------------------------------------
// tensor container: magic DATW, u32 version, u32 count, then per entry
// path length (u32) + UTF-8 path, rank (u32), dims (u64 each), and raw
// little-endian f64 data

const MAGIC: &[u8; 4] = b"DATW";
const VERSION: u32 = 1;

pub fn write_tensor_container(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensor_container(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let mut input = BufReader::new(File::open(path.as_ref())?);
    let fail = |what: &str| DatError::Format(format!("{}: {what}", path.as_ref().display()));
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| fail("truncated header"))?;
    if &magic != MAGIC {
        return Err(fail("bad magic bytes"));
    }
    let mut u32buf = [0u8; 4];
    input
        .read_exact(&mut u32buf)
        .map_err(|_| fail("truncated version"))?;
    if u32::from_le_bytes(u32buf) != VERSION {
        return Err(fail("unsupported version"));
    }
    input
        .read_exact(&mut u32buf)
        .map_err(|_| fail("truncated count"))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        input
            .read_exact(&mut u32buf)
            .map_err(|_| fail("truncated path length"))?;
        let len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|_| fail("truncated path"))?;
        let name = String::from_utf8(name).map_err(|_| fail("path is not UTF-8"))?;
        input
            .read_exact(&mut u32buf)
            .map_err(|_| fail("truncated rank"))?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut u64buf = [0u8; 8];
        for _ in 0..rank {
            input
                .read_exact(&mut u64buf)
                .map_err(|_| fail("truncated dims"))?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            input
                .read_exact(&mut u64buf)
                .map_err(|_| fail("truncated tensor data"))?;
            data.push(f64::from_le_bytes(u64buf));
        }
        entries.push((name, Tensor::new(dims, data)?));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn tiny_preset_matches_architecture_table() {
        let cfg = ModelConfig::preset("dat-tiny++").unwrap();
        let c: Vec<_> = cfg.stages.iter().map(|s| s.channels).collect();
        let n: Vec<_> = cfg.stages.iter().map(|s| s.pairs).collect();
        let r: Vec<_> = cfg.stages.iter().map(|s| s.downsample_factor).collect();
        let m: Vec<_> = cfg.stages.iter().map(|s| s.heads).collect();
        let g: Vec<_> = cfg.stages.iter().map(|s| s.offset_groups).collect();
        assert_eq!(c, [64, 128, 256, 512]);
        assert_eq!(n, [1, 2, 9, 1]);
        assert_eq!(r, [8, 4, 2, 1]);
        assert_eq!(m, [2, 4, 8, 16]);
        assert_eq!(g, [1, 2, 4, 8]);
        for i in 0..3 {
            assert_eq!(cfg.stages[i].local_kernel, Some(7));
        }
        assert_eq!(cfg.stages[3].local_kernel, None);
        cfg.validate().unwrap();
    }

    #[test]
    fn tiny_parameter_count_near_24m() {
        let cfg = ModelConfig::preset("dat-tiny++").unwrap();
        let model = build_model(&cfg, 0).unwrap();
        let params = model.num_params() as f64;
        let target = 24.0e6;
        assert!(
            (params - target).abs() / target <= 0.05,
            "{params} params vs 24M"
        );
    }

    #[test]
    fn same_seed_bit_identical_parameters() {
        let cfg = ModelConfig::preset("dat-nano").unwrap();
        let a = build_model(&cfg, 7).unwrap();
        let b = build_model(&cfg, 7).unwrap();
        let mut pa = Vec::new();
        a.visit_params(&mut |p, t| pa.push((p, t.data().to_vec())));
        let mut i = 0;
        b.visit_params(&mut |p, t| {
            assert_eq!(pa[i].0, p);
            assert_eq!(pa[i].1, t.data(), "parameter {p} differs");
            i += 1;
        });
        let c = build_model(&cfg, 8).unwrap();
        let mut differs = false;
        let mut j = 0;
        c.visit_params(&mut |_, t| {
            if pa[j].1 != t.data() {
                differs = true;
            }
            j += 1;
        });
        assert!(differs, "different seeds should differ");
    }

    #[test]
    fn nano_feature_shapes_and_stride_arithmetic() {
        let cfg = ModelConfig::preset("dat-nano").unwrap();
        let model = build_model(&cfg, 1).unwrap();
        let image = Tensor::zeros(&[1, 64, 64, 3]);
        let feats = model.forward_features(&image).unwrap();
        let shapes: Vec<_> = feats.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 16, 16, 16],
                vec![1, 8, 8, 32],
                vec![1, 4, 4, 64],
                vec![1, 2, 2, 128]
            ]
        );
    }

    #[test]
    fn logits_shape_and_softmax_probability() {
        let cfg = ModelConfig::preset("dat-nano").unwrap();
        let model = build_model(&cfg, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(90);
        let image = Tensor::from_fn(&[2, 32, 32, 3], |_| rng.gen_range(-1.0..1.0));
        let logits = model.forward_logits(&image).unwrap();
        assert_eq!(logits.shape(), &[2, 2]);
        let probs = crate::tensor::softmax_lastdim(&logits).unwrap();
        for row in probs.data().chunks(2) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_forward_equals_concatenated_singles() {
        let cfg = ModelConfig::preset("dat-nano").unwrap();
        let model = build_model(&cfg, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(91);
        let batch = Tensor::from_fn(&[3, 32, 32, 3], |_| rng.gen_range(-1.0..1.0));
        let batched = model.forward_logits(&batch).unwrap();
        let per = 32 * 32 * 3;
        for bi in 0..3 {
            let single = Tensor::new(
                vec![1, 32, 32, 3],
                batch.data()[bi * per..(bi + 1) * per].to_vec(),
            )
            .unwrap();
            let one = model.forward_logits(&single).unwrap();
            for k in 0..2 {
                let diff = (one.data()[k] - batched.data()[bi * 2 + k]).abs();
                assert!(diff <= 1e-10, "batch item {bi} logit {k} differs by {diff}");
            }
        }
    }

    #[test]
    fn rejects_bad_resolution() {
        let cfg = ModelConfig::preset("dat-nano").unwrap();
        let model = build_model(&cfg, 4).unwrap();
        let image = Tensor::zeros(&[1, 40, 40, 3]);
        assert!(matches!(
            model.forward_features(&image),
            Err(DatError::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::preset("dat-nano").unwrap();
        let model = build_model(&cfg, 5).unwrap();
        model.save_checkpoint(&path).unwrap();
        let loaded = load_checkpoint(&cfg, &path).unwrap();
        let mut orig = Vec::new();
        model.visit_params(&mut |p, t| orig.push((p, t.data().to_vec())));
        let mut i = 0;
        loaded.visit_params(&mut |p, t| {
            assert_eq!(orig[i].0, p);
            assert_eq!(orig[i].1, t.data(), "parameter {p} not bit-exact");
            i += 1;
        });
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::preset("dat-nano").unwrap();
        let model = build_model(&cfg, 6).unwrap();
        model.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&cfg, &path),
            Err(DatError::Format(_))
        ));
    }

    #[test]
    fn checkpoint_rejected_by_other_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let nano = ModelConfig::preset("dat-nano").unwrap();
        let model = build_model(&nano, 7).unwrap();
        model.save_checkpoint(&path).unwrap();
        let tiny = ModelConfig::preset("dat-tiny++").unwrap();
        assert!(matches!(
            load_checkpoint(&tiny, &path),
            Err(DatError::Manifest(_))
        ));
    }

    #[test]
    fn drop_path_schedule_is_linear_to_max() {
        let mut cfg = ModelConfig::preset("dat-nano").unwrap();
        cfg.drop_path_max = 0.3;
        let model = build_model(&cfg, 8).unwrap();
        let rates: Vec<f64> = model
            .stages
            .iter()
            .flat_map(|s| s.blocks.iter().map(|b| b.drop_path))
            .collect();
        assert_eq!(rates.len(), 10);
        assert_eq!(rates[0], 0.0);
        assert!((rates[9] - 0.3).abs() < 1e-12);
        for w in rates.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn classifier_gradient_matches_finite_differences_on_subset() {
        let cfg = ModelConfig::preset("dat-nano").unwrap();
        let model = build_model(&cfg, 9).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(92);
        let image = Tensor::from_fn(&[1, 32, 32, 3], |_| rng.gen_range(-1.0..1.0));
        let label = 1usize;
        let loss_of = |m: &Model| -> f64 {
            let logits = m.forward_logits(&image).unwrap();
            let probs = crate::tensor::softmax_lastdim(&logits).unwrap();
            -probs.data()[label].ln()
        };
        let (logits, cache) = model.forward_cached(&image, None).unwrap();
        let probs = crate::tensor::softmax_lastdim(&logits).unwrap();
        let mut g = probs.clone();
        g.data_mut()[label] -= 1.0;
        let grads = model.backward(&cache, &g).unwrap();
        let h = 1e-6;
        // a handful of parameter blocks spread across the depth
        for path in [
            "stem.conv1.weight",
            "stages.0.blocks.1.attn.offset.dw_weight",
            "stages.2.blocks.0.attn.rpb",
            "stages.3.blocks.1.attn.wv.weight",
            "norms.3.gamma",
            "head.weight",
        ] {
            let analytic = grads
                .get(path)
                .unwrap_or_else(|| panic!("no grad for {path}"));
            let numel = analytic.numel();
            let step = (numel / 4).max(1);
            for i in (0..numel).step_by(step) {
                let mut poke = |delta: f64| {
                    let mut m2 = build_model(&cfg, 9).unwrap();
                    m2.with_param_mut(path, |t| t.data_mut()[i] += delta)
                        .unwrap();
                    loss_of(&m2)
                };
                let num = (poke(h) - poke(-h)) / (2.0 * h);
                crate::testutil::assert_grad_close(
                    analytic.data()[i],
                    num,
                    1e-4,
                    &format!("{path}[{i}]"),
                );
            }
        }
    }
}
