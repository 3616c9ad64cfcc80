//! U-shaped Mamba denoiser with a graph-guided control pathway whose features
//! enter the decoder through zero-initialized projections.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anatgraph::{control_representation, unpatchify_var, patchify_var, GraphConv, PatchGraph, PatchLayout};
use crate::diffusion::{Condition, Denoise, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Bound, LayerNorm, Linear, ParamStore, Tape, Tensor, Var};
use crate::ssm::{sinusoidal_embedding, GatedEncoderParams, MambaBlock};

/// Which graph operator the control pathway uses, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    None,
    Spatial,
    Fourier,
}

impl std::str::FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "spatial" => Ok(Self::Spatial),
            "fourier" => Ok(Self::Fourier),
            other => Err(Error::invalid(format!(
                "unknown control mode {other:?} (expected none, spatial or fourier)"
            ))),
        }
    }
}

impl std::fmt::Display for ControlMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Spatial => "spatial",
            Self::Fourier => "fourier",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    /// Token width at full resolution; doubles at every down stage.
    pub dim: usize,
    pub stages: usize,
    pub blocks: usize,
    pub state_dim: usize,
    /// Inner width of each Mamba block as a multiple of its token width.
    pub expand: usize,
    pub cheb_order: usize,
    pub time_dim: usize,
    /// Length of the covariate vector `(age_delta, sex)`.
    pub cond_dim: usize,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub control: ControlMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch: 4,
            dim: 64,
            stages: 2,
            blocks: 2,
            state_dim: 16,
            expand: 1,
            cheb_order: 3,
            time_dim: 64,
            cond_dim: 2,
            steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
            control: ControlMode::Fourier,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("model config: {msg}")));
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!(
                "patch size {} must divide image size {}",
                self.patch, self.image_size
            ));
        }
        let grid = self.image_size / self.patch;
        let shrink = 1usize << self.stages;
        if !grid.is_multiple_of(shrink) || (grid / shrink).pow(2) < 4 {
            return bad(format!(
                "{} stages leave fewer than 4 tokens at the bottleneck of a {grid}x{grid} grid",
                self.stages
            ));
        }
        if self.channels == 0 || self.dim == 0 || self.blocks == 0 || self.state_dim == 0 || self.expand == 0 {
            return bad("channels, dim, blocks, state_dim and expand must be positive".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim must be even and >= 2, got {}", self.time_dim));
        }
        if self.cond_dim != 2 {
            return bad(format!("cond_dim must be 2 (age_delta, sex), got {}", self.cond_dim));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }

    pub fn width(&self, level: usize) -> usize {
        self.dim << level
    }

    /// Token grid side at `level`.
    pub fn grid(&self, level: usize) -> usize {
        (self.image_size / self.patch) >> level
    }

    pub fn image_shape(&self) -> Vec<usize> {
        if self.channels == 1 {
            vec![self.image_size, self.image_size]
        } else {
            vec![self.image_size, self.image_size, self.channels]
        }
    }
}

fn merge_index(grid: usize, width: usize) -> Vec<usize> {
    let half = grid / 2;
    let mut idx = Vec::with_capacity(grid * grid * width);
    for by in 0..half {
        for bx in 0..half {
            for q in 0..4 {
                let tok = (2 * by + q / 2) * grid + 2 * bx + q % 2;
                idx.extend(tok * width..(tok + 1) * width);
            }
        }
    }
    idx
}

fn expand_index(grid: usize, width: usize) -> Vec<usize> {
    let half = grid / 2;
    let mut idx = Vec::with_capacity(grid * grid * width);
    for y in 0..grid {
        for x in 0..grid {
            let r = (y / 2) * half + x / 2;
            let q = (y % 2) * 2 + x % 2;
            let base = r * 4 * width + q * width;
            idx.extend(base..base + width);
        }
    }
    idx
}

fn check_grid(op: &'static str, h: &Var<'_>, grid: usize) -> Result<usize> {
    let (n, w) = h.value().dims2()?;
    if n != grid * grid {
        return Err(Error::shape(op, h.shape(), &[grid * grid, w]));
    }
    if !grid.is_multiple_of(2) {
        return Err(Error::invalid(format!("{op}: odd token grid {grid}x{grid}")));
    }
    Ok(w)
}

/// Concatenates every 2×2 neighborhood of a `grid × grid` token map and
/// projects it with `proj` (`4w → w'`).
pub fn merge_tokens<'t>(p: &Bound<'t>, proj: &Linear, h: &Var<'t>, grid: usize) -> Result<Var<'t>> {
    let w = check_grid("merge_tokens", h, grid)?;
    let quads = h.gather(Arc::new(merge_index(grid, w)), &[grid * grid / 4, 4 * w])?;
    proj.forward(p, &quads)
}

/// Projects each token of a `(grid/2)²` map with `proj` (`w' → 4w`) and
/// scatters the four slices back onto a `grid × grid` map.
pub fn expand_tokens<'t>(p: &Bound<'t>, proj: &Linear, h: &Var<'t>, grid: usize) -> Result<Var<'t>> {
    if !grid.is_multiple_of(2) {
        return Err(Error::invalid(format!("expand_tokens: odd token grid {grid}x{grid}")));
    }
    let (n, _) = h.value().dims2()?;
    if n * 4 != grid * grid || !proj.fan_out.is_multiple_of(4) {
        return Err(Error::shape("expand_tokens", h.shape(), &[grid * grid / 4, proj.fan_in]));
    }
    let wide = proj.forward(p, h)?;
    let w = proj.fan_out / 4;
    wide.gather(Arc::new(expand_index(grid, w)), &[grid * grid, w])
}

#[derive(Clone, Debug)]
struct TimeEmbedding {
    hidden: Linear,
    out: Linear,
    cond: Linear,
    /// One projection per resolution level.
    levels: Vec<Linear>,
}

impl TimeEmbedding {
    fn embed<'t>(&self, p: &Bound<'t>, tape: &'t Tape, cfg: &ModelConfig, t: usize, c: &Condition) -> Result<Vec<Var<'t>>> {
        let sin = tape.constant(sinusoidal_embedding(t as f64, cfg.time_dim).reshaped(&[1, cfg.time_dim])?);
        let cov = tape.constant(Tensor::new(&[1, 2], vec![c.age_delta, c.sex])?);
        let base = self
            .out
            .forward(p, &self.hidden.forward(p, &sin)?.silu())?
            .add(&self.cond.forward(p, &cov)?)?
            .silu();
        self.levels
            .iter()
            .map(|l| {
                let e = l.forward(p, &base)?;
                e.reshape(&[l.fan_out])
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct DiffusionPath {
    embed: Linear,
    encoder: Vec<Vec<MambaBlock>>,
    merges: Vec<Linear>,
    middle: Vec<MambaBlock>,
    expands: Vec<Linear>,
    fuses: Vec<Linear>,
    decoder: Vec<Vec<MambaBlock>>,
    head_norm: LayerNorm,
    head: Linear,
}

#[derive(Clone, Debug)]
struct ControlPath {
    embed: Linear,
    blocks: Vec<Vec<MambaBlock>>,
    encoders: Vec<GatedEncoderParams>,
    convs: Vec<GraphConv>,
    merges: Vec<Linear>,
}

/// Scalar parameter counts per pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    /// Diffusion pathway, including the shared time/covariate embedding.
    pub diffusion: usize,
    pub control: usize,
    pub injection: usize,
    pub total: usize,
}

/// Dual-pathway denoiser; all weights live in `store`, in declaration order.
#[derive(Clone, Debug)]
pub struct MambaControlModel {
    config: ModelConfig,
    store: ParamStore,
    time: TimeEmbedding,
    diffusion: DiffusionPath,
    control: Option<ControlPath>,
    injections: Vec<Linear>,
    in_layout: PatchLayout,
    out_layout: PatchLayout,
}

fn blocks(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig, level: usize) -> Vec<MambaBlock> {
    let w = cfg.width(level);
    (0..cfg.blocks)
        .map(|b| MambaBlock::new(store, rng, &format!("{name}.{b}"), w, w * cfg.expand, cfg.state_dim))
        .collect()
}

impl MambaControlModel {
    /// Fresh weights drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = cfg.stages;
        let token_in = cfg.patch * cfg.patch * 2 * cfg.channels;
        let token_out = cfg.patch * cfg.patch * cfg.channels;

        let time = TimeEmbedding {
            hidden: Linear::new(&mut store, &mut rng, "diff.time.hidden", cfg.time_dim, cfg.dim, true),
            out: Linear::new(&mut store, &mut rng, "diff.time.out", cfg.dim, cfg.dim, true),
            cond: Linear::new(&mut store, &mut rng, "diff.time.cond", cfg.cond_dim, cfg.dim, true),
            levels: (0..=s)
                .map(|l| Linear::new(&mut store, &mut rng, &format!("diff.time.level{l}"), cfg.dim, cfg.width(l), true))
                .collect(),
        };

        let embed = Linear::new(&mut store, &mut rng, "diff.embed", token_in, cfg.dim, true);
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for l in 0..s {
            encoder.push(blocks(&mut store, &mut rng, &format!("diff.enc{l}"), cfg, l));
            merges.push(Linear::new(&mut store, &mut rng, &format!("diff.merge{l}"), 4 * cfg.width(l), cfg.width(l + 1), true));
        }
        let middle = blocks(&mut store, &mut rng, "diff.mid", cfg, s);
        let mut expands = Vec::new();
        let mut fuses = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..s).rev() {
            let w = cfg.width(l);
            expands.push(Linear::new(&mut store, &mut rng, &format!("diff.expand{l}"), cfg.width(l + 1), 4 * w, true));
            fuses.push(Linear::new(&mut store, &mut rng, &format!("diff.fuse{l}"), 2 * w, w, true));
            decoder.push(blocks(&mut store, &mut rng, &format!("diff.dec{l}"), cfg, l));
        }
        let head_norm = LayerNorm::new(&mut store, "diff.head_norm", cfg.dim);
        let head = Linear::new(&mut store, &mut rng, "diff.head", cfg.dim, token_out, true);
        let diffusion = DiffusionPath {
            embed,
            encoder,
            merges,
            middle,
            expands,
            fuses,
            decoder,
            head_norm,
            head,
        };

        let control = match cfg.control {
            ControlMode::None => None,
            mode => {
                let embed = Linear::new(&mut store, &mut rng, "ctrl.embed", token_in, cfg.dim, true);
                let mut blocks_c = Vec::new();
                let mut encoders = Vec::new();
                let mut convs = Vec::new();
                let mut merges = Vec::new();
                for l in 0..=s {
                    let w = cfg.width(l);
                    blocks_c.push(blocks(&mut store, &mut rng, &format!("ctrl.level{l}"), cfg, l));
                    encoders.push(GatedEncoderParams::new(&mut store, &mut rng, &format!("ctrl.gated{l}"), w, w));
                    convs.push(match mode {
                        ControlMode::Spatial => GraphConv::spatial(&mut store, &format!("ctrl.graph{l}"), w),
                        _ => GraphConv::chebyshev(&mut store, &format!("ctrl.graph{l}"), cfg.cheb_order, w),
                    });
                    if l < s {
                        merges.push(Linear::new(&mut store, &mut rng, &format!("ctrl.merge{l}"), 4 * w, cfg.width(l + 1), true));
                    }
                }
                Some(ControlPath {
                    embed,
                    blocks: blocks_c,
                    encoders,
                    convs,
                    merges,
                })
            }
        };
        let injections = if control.is_some() {
            (0..=s)
                .map(|l| Linear::zeros(&mut store, &format!("inj.level{l}"), cfg.width(l), cfg.width(l)))
                .collect()
        } else {
            Vec::new()
        };

        let in_layout = PatchLayout::new(cfg.image_size, cfg.image_size, 2 * cfg.channels, cfg.patch)?;
        let out_layout = PatchLayout::new(cfg.image_size, cfg.image_size, cfg.channels, cfg.patch)?;
        Ok(Self {
            config,
            store,
            time,
            diffusion,
            control,
            injections,
            in_layout,
            out_layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_control(&self) -> bool {
        self.control.is_some()
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let mut c = ParamCounts {
            diffusion: 0,
            control: 0,
            injection: 0,
            total: 0,
        };
        for (name, t) in self.store.iter() {
            let n = t.numel();
            match name.split('.').next() {
                Some("ctrl") => c.control += n,
                Some("inj") => c.injection += n,
                _ => c.diffusion += n,
            }
            c.total += n;
        }
        c
    }

    /// Injection projection weights and biases, one pair per level.
    pub fn injection_params(&self) -> Vec<(&Tensor, &Tensor)> {
        self.injections
            .iter()
            .map(|l| (self.store.get(l.weight), self.store.get(l.bias.expect("injection bias"))))
            .collect()
    }

    /// Noise prediction on tape-bound parameters. When `graphs` is given, the
    /// per-level control graphs are appended to it.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x_t: &Var<'t>,
        t: usize,
        cond: &Condition,
        use_control: bool,
        mut graphs: Option<&mut Vec<PatchGraph>>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let shape = cfg.image_shape();
        if x_t.shape() != shape.as_slice() {
            return Err(Error::shape("denoise", x_t.shape(), &shape));
        }
        if cond.prior_image.shape() != shape.as_slice() {
            return Err(Error::shape("denoise", cond.prior_image.shape(), &shape));
        }
        if t == 0 || t > cfg.steps {
            return Err(Error::invalid(format!("diffusion step {t} outside 1..={}", cfg.steps)));
        }
        let tape = x_t.tape();
        let (h, w, c) = (cfg.image_size, cfg.image_size, cfg.channels);
        let prior = tape.constant(cond.prior_image.clone().reshaped(&[h, w, c])?);
        let joint = Var::concat(&[&x_t.reshape(&[h, w, c])?, &prior], 2)?;
        let tokens = patchify_var(&joint, &self.in_layout)?;
        let temb = self.time.embed(p, tape, cfg, t, cond)?;
        let s = cfg.stages;

        let ctrl = match (&self.control, use_control) {
            (Some(cp), true) => {
                let mut feats = Vec::with_capacity(s + 1);
                let mut hc = cp.embed.forward(p, &tokens)?;
                for l in 0..=s {
                    for b in &cp.blocks[l] {
                        hc = b.forward(p, &hc, &temb[l])?;
                    }
                    let out = control_representation(p, &hc, &temb[l], &cp.encoders[l], &cp.convs[l])?;
                    if let Some(g) = graphs.as_deref_mut() {
                        g.push(out.graph);
                    }
                    feats.push(self.injections[l].forward(p, &out.features)?);
                    if l < s {
                        hc = merge_tokens(p, &cp.merges[l], &hc, cfg.grid(l))?;
                    }
                }
                Some(feats)
            }
            _ => None,
        };

        let dp = &self.diffusion;
        let mut x = dp.embed.forward(p, &tokens)?;
        let mut skips = Vec::with_capacity(s);
        for l in 0..s {
            for b in &dp.encoder[l] {
                x = b.forward(p, &x, &temb[l])?;
            }
            skips.push(x.clone());
            x = merge_tokens(p, &dp.merges[l], &x, cfg.grid(l))?;
        }
        for b in &dp.middle {
            x = b.forward(p, &x, &temb[s])?;
        }
        if let Some(f) = &ctrl {
            x = x.add(&f[s])?;
        }
        for (i, l) in (0..s).rev().enumerate() {
            let up = expand_tokens(p, &dp.expands[i], &x, cfg.grid(l))?;
            x = dp.fuses[i].forward(p, &Var::concat(&[&up, &skips[l]], 1)?)?;
            if let Some(f) = &ctrl {
                x = x.add(&f[l])?;
            }
            for b in &dp.decoder[i] {
                x = b.forward(p, &x, &temb[l])?;
            }
        }
        let out = dp.head.forward(p, &dp.head_norm.forward(p, &x)?)?;
        let img = unpatchify_var(&out, &self.out_layout)?;
        img.reshape(&shape)
    }

    /// Inference-only noise prediction.
    pub fn denoise(&self, x_t: &Tensor, t: usize, cond: &Condition, use_control: bool) -> Result<Tensor> {
        let tape = Tape::inference();
        let p = self.store.bind_frozen(&tape);
        let x = tape.constant(x_t.clone());
        Ok(self.forward(&p, &x, t, cond, use_control, None)?.value().clone())
    }

    /// Control graphs built for one denoiser call, one per resolution level.
    pub fn control_graphs(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<Vec<PatchGraph>> {
        if self.control.is_none() {
            return Err(Error::invalid("model has no control pathway"));
        }
        let tape = Tape::inference();
        let p = self.store.bind_frozen(&tape);
        let mut graphs = Vec::new();
        self.forward(&p, &tape.constant(x_t.clone()), t, cond, true, Some(&mut graphs))?;
        Ok(graphs)
    }

    /// Pairs the model with parameters bound on a tape, for use in a loss.
    pub fn bind<'a, 't>(&'a self, p: &'a Bound<'t>) -> BoundModel<'a, 't> {
        BoundModel {
            model: self,
            params: p,
            use_control: self.control.is_some(),
        }
    }
}

impl Denoise for MambaControlModel {
    fn eps(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<Tensor> {
        self.denoise(x_t, t, cond, self.control.is_some())
    }
}

pub struct BoundModel<'a, 't> {
    model: &'a MambaControlModel,
    params: &'a Bound<'t>,
    pub use_control: bool,
}

impl<'t> NoisePredictor<'t> for BoundModel<'_, 't> {
    fn predict(&self, x_t: &Var<'t>, t: usize, cond: &Condition) -> Result<Var<'t>> {
        self.model.forward(self.params, x_t, t, cond, self.use_control, None)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MBCT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes config and weights:
/// magic, version (u32), config JSON length (u32) + bytes, tensor count (u32),
/// then per tensor: name length (u32) + UTF-8 name, rank (u32), dims (u64
/// each), values (f64 each). All integers and floats little-endian.
pub fn encode_checkpoint(model: &MambaControlModel) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&model.config)?;
    let mut out = Vec::with_capacity(16 + json.len() + model.store.scalar_count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("unexpected end of file (need {n} more bytes)")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Inverse of [`encode_checkpoint`]; `path` is only used in error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<MambaControlModel> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| r.fail(format!("config: {e}")))?;
    let mut model = MambaControlModel::new(config, 0).map_err(|e| r.fail(e.to_string()))?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(r.fail(format!(
            "checkpoint holds {count} tensors, config implies {}",
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| r.fail("tensor name is not UTF-8"))?.to_string();
        if name != model.store.name(id) {
            return Err(r.fail(format!("expected tensor {:?}, found {name:?}", model.store.name(id))));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != model.store.get(id).shape() {
            return Err(r.fail(format!(
                "tensor {name:?} has shape {shape:?}, expected {:?}",
                model.store.get(id).shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *model.store.get_mut(id) = Tensor::new(&shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok(model)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_checkpoint(model: &MambaControlModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<MambaControlModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
