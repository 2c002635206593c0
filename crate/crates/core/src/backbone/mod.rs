//! A small class-conditional diffusion transformer.
//!
//! Images are `[batch, channels, size, size]` tensors. Internally tokens are
//! kept as `[batch * len, hidden_dim]` matrices so every linear layer is one
//! matrix product over the whole batch; the noise prediction stays in patch
//! layout (`[batch * len, channels * patch^2]`) until [`unpatchify`].

mod block;
mod embed;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub use block::{BlockOutput, DiTBlock};
pub use embed::{timestep_features, ConditionEmbedding};

macro_rules! params {
    ($self:ident, [$($f:ident),* $(,)?]) => {
        vec![$((stringify!($f).to_string(), &$self.$f)),*]
    };
}

macro_rules! params_mut {
    ($self:ident, [$($f:ident),* $(,)?]) => {
        vec![$((stringify!($f).to_string(), &mut $self.$f)),*]
    };
}

pub(crate) use {params, params_mut};

pub(crate) fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -a, a, rng).into_param()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub n_classes: usize,
    /// Number of training diffusion steps.
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            hidden_dim: 64,
            n_heads: 4,
            n_blocks: 6,
            n_classes: 8,
            timesteps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: String| {
            Err(Error::Config {
                path: format!("backbone.{path}"),
                message,
            })
        };
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(
                "patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            );
        }
        if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return fail(
                "n_heads",
                format!("{} does not divide hidden_dim {}", self.n_heads, self.hidden_dim),
            );
        }
        if self.hidden_dim < 2 || !self.hidden_dim.is_multiple_of(2) {
            return fail("hidden_dim", format!("must be even and >= 2, got {}", self.hidden_dim));
        }
        if self.n_blocks < 2 {
            return fail("n_blocks", format!("must be >= 2, got {}", self.n_blocks));
        }
        if self.channels == 0 {
            return fail("channels", "must be >= 1".into());
        }
        if self.n_classes == 0 {
            return fail("n_classes", "must be >= 1".into());
        }
        if self.timesteps == 0 {
            return fail("T", "must be >= 1".into());
        }
        Ok(())
    }

    /// Tokens per image.
    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Pixels per patch (`channels * patch^2`).
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.channels, self.image_size, self.image_size]
    }
}

/// Per-block outputs of one forward pass, each `[batch * len, hidden_dim]`,
/// ordered by block index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTap {
    pub features: Vec<Tensor>,
    pub tokens: usize,
}

/// Rearranges `[batch, c, h, w]` images into `[batch * len, c * p * p]` patch rows.
/// Token order is row-major over the patch grid; within a patch the order is
/// `(channel, dy, dx)`.
pub fn patchify_pixels(images: &Tensor, patch: usize) -> Result<Tensor> {
    let &[b, c, h, w] = images.shape() else {
        return Err(Error::shape(
            "patchify",
            format!("expected [b, c, h, w], got {:?}", images.shape()),
        ));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{h}x{w} not divisible by patch {patch}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = images.data();
    let mut out = vec![0.0; b * gh * gw * pd];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = (bi * gh + gy) * gw + gx;
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let y = gy * patch + dy;
                            let x = gx * patch + dx;
                            out[tok * pd + (ch * patch + dy) * patch + dx] = src[((bi * c + ch) * h + y) * w + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b * gh * gw, pd], out)
}

/// Inverse of [`patchify_pixels`] for square images.
pub fn unpatchify(patches: &Tensor, channels: usize, size: usize, patch: usize) -> Result<Tensor> {
    let g = size / patch;
    let pd = channels * patch * patch;
    let &[rows, cols] = patches.shape() else {
        return Err(Error::shape(
            "unpatchify",
            format!("expected 2-d, got {:?}", patches.shape()),
        ));
    };
    if cols != pd || g == 0 || rows % (g * g) != 0 {
        return Err(Error::shape(
            "unpatchify",
            format!("[{rows}, {cols}] for {channels}x{size}x{size} with patch {patch}"),
        ));
    }
    let b = rows / (g * g);
    let src = patches.data();
    let mut out = vec![0.0; b * channels * size * size];
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                let tok = (bi * g + gy) * g + gx;
                for ch in 0..channels {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let y = gy * patch + dy;
                            let x = gx * patch + dx;
                            out[((bi * channels + ch) * size + y) * size + x] =
                                src[tok * pd + (ch * patch + dy) * patch + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, channels, size, size], out)
}

fn sincos_2d(d: usize, grid: usize) -> Vec<f32> {
    // half the channels encode the row, half the column
    let half = d / 2;
    let mut out = vec![0.0; grid * grid * d];
    for gy in 0..grid {
        for gx in 0..grid {
            let tok = gy * grid + gx;
            let row = &mut out[tok * d..(tok + 1) * d];
            row[..half].copy_from_slice(&timestep_features(gy as f64, half));
            row[half..2 * half].copy_from_slice(&timestep_features(gx as f64, half));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos_embed: Tensor,
    pub cond: ConditionEmbedding,
    pub blocks: Vec<DiTBlock>,
    pub final_mod_w: Tensor,
    pub final_mod_b: Tensor,
    pub final_w: Tensor,
    pub final_b: Tensor,
}

impl Backbone {
    /// Fresh model: adaLN-Zero blocks and a zero final projection, so the
    /// initial noise prediction is exactly zero.
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let pd = config.patch_dim();
        let grid = config.image_size / config.patch_size;
        let patch_w = xavier(pd, d, rng);
        let pos_embed = Tensor::new(&[config.tokens(), d], sincos_2d(d, grid))?.into_param();
        let cond = ConditionEmbedding::new(d, config.n_classes, rng);
        let blocks = (0..config.n_blocks)
            .map(|_| DiTBlock::new(d, config.n_heads, rng))
            .collect();
        Ok(Self {
            patch_w,
            patch_b: Tensor::zeros(&[d]).into_param(),
            pos_embed,
            cond,
            blocks,
            final_mod_w: Tensor::zeros(&[d, 2 * d]).into_param(),
            final_mod_b: Tensor::zeros(&[2 * d]).into_param(),
            final_w: Tensor::zeros(&[d, pd]).into_param(),
            final_b: Tensor::zeros(&[pd]).into_param(),
            config,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn null_class(&self) -> usize {
        self.config.n_classes
    }

    /// Every parameter with a stable, unique name. The order is fixed.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = params!(self, [patch_w, patch_b, pos_embed]);
        out.extend(
            self.cond
                .named_params()
                .into_iter()
                .map(|(n, t)| (format!("cond.{n}"), t)),
        );
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.named_params()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{i}.{n}"), t)),
            );
        }
        out.extend(params!(self, [final_mod_w, final_mod_b, final_w, final_b]));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = params_mut!(self, [patch_w, patch_b, pos_embed]);
        out.extend(
            self.cond
                .named_params_mut()
                .into_iter()
                .map(|(n, t)| (format!("cond.{n}"), t)),
        );
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.named_params_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{i}.{n}"), t)),
            );
        }
        out.extend(params_mut!(self, [final_mod_w, final_mod_b, final_w, final_b]));
        out
    }

    /// Toggles `requires_grad` on every parameter. A frozen backbone records
    /// as constants on a tape and never receives gradients.
    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, p) in self.named_params_mut() {
            p.requires_grad = trainable;
            p.grad = None;
        }
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let c = &self.config;
        match x.shape() {
            &[b, ch, h, w] if ch == c.channels && h == c.image_size && w == c.image_size && b > 0 => Ok(b),
            s => Err(Error::shape(
                "backbone input",
                format!(
                    "expected [b, {}, {}, {}], got {:?}",
                    c.channels, c.image_size, c.image_size, s
                ),
            )),
        }
    }

    fn check_t(&self, t: &[f64]) -> Result<()> {
        let max = self.config.timesteps as f64;
        match t.iter().find(|&&v| !(0.0..=max).contains(&v)) {
            Some(v) => Err(Error::invalid(format!("timestep {v} outside [0, {max}]"))),
            None => Ok(()),
        }
    }

    /// Token embeddings `[batch * len, d]`: patch projection plus positions.
    pub fn embed_tokens_on<'p>(&'p self, tape: &mut Tape<'p>, x: &Tensor) -> Result<Var> {
        let b = self.check_images(x)?;
        let patches = tape.constant(patchify_pixels(x, self.config.patch_size)?);
        let (w, bias) = (tape.param(&self.patch_w), tape.param(&self.patch_b));
        let tokens = tape.linear(patches, w, Some(bias))?;
        let len = self.config.tokens();
        let idx: Vec<usize> = (0..b).flat_map(|_| 0..len).collect();
        let pos = tape.param(&self.pos_embed);
        let pos = tape.gather_rows(pos, &idx)?;
        tape.add(tokens, pos)
    }

    pub fn condition_on<'p>(&'p self, tape: &mut Tape<'p>, t: &[f64], classes: &[usize]) -> Result<Var> {
        self.check_t(t)?;
        self.cond.forward_on(tape, t, classes)
    }

    /// Final adaLN + linear head; output in patch layout.
    pub fn final_layer_on<'p>(&'p self, tape: &mut Tape<'p>, h: Var, cond: Var) -> Result<Var> {
        let d = self.config.hidden_dim;
        let len = self.config.tokens();
        let c = tape.silu(cond);
        let (w, b) = (tape.param(&self.final_mod_w), tape.param(&self.final_mod_b));
        let m = tape.linear(c, w, Some(b))?;
        let shift = tape.slice_cols(m, 0, d)?;
        let scale = tape.slice_cols(m, d, d)?;
        let x = tape.layer_norm(h, block::LN_EPS)?;
        let x = tape.modulate(x, shift, scale, len)?;
        let (w, b) = (tape.param(&self.final_w), tape.param(&self.final_b));
        tape.linear(x, w, Some(b))
    }

    pub fn block_on<'p>(&'p self, tape: &mut Tape<'p>, idx: usize, h: Var, cond: Var) -> Result<BlockOutput> {
        let block = self
            .blocks
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("block {idx} out of range [0, {})", self.blocks.len())))?;
        let d = self.config.hidden_dim;
        let hs = tape.value(h).shape();
        let cs = tape.value(cond).shape();
        if hs.len() != 2 || hs[1] != d || cs.len() != 2 || cs[1] != d || hs[0] != cs[0] * self.config.tokens() {
            return Err(Error::shape("run_block", format!("h {:?}, cond {:?}", hs, cs)));
        }
        let batch = cs[0];
        block.forward_on(tape, h, cond, batch)
    }

    /// Full pass on `tape`. Returns the noise prediction in patch layout and
    /// the per-block outputs.
    pub fn forward_on<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        x: &Tensor,
        t: &[f64],
        classes: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let cond = self.condition_on(tape, t, classes)?;
        let mut h = self.embed_tokens_on(tape, x)?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            h = self.block_on(tape, i, h, cond)?.out;
            taps.push(h);
        }
        let eps = self.final_layer_on(tape, h, cond)?;
        Ok((eps, taps))
    }

    /// Tokens for one `[c, h, w]` image (or a `[b, c, h, w]` batch): `[len * b, d]`.
    pub fn patchify(&self, img: &Tensor) -> Result<Tensor> {
        let img = match img.shape().len() {
            3 => {
                let mut shape = vec![1];
                shape.extend_from_slice(img.shape());
                img.clone().reshape(&shape)?
            }
            _ => img.clone(),
        };
        let mut tape = Tape::no_grad();
        let v = self.embed_tokens_on(&mut tape, &img)?;
        Ok(tape.value(v).clone())
    }

    /// Condition vector `[d]` for a single timestep and class.
    pub fn embed_condition(&self, t: f64, class_id: usize) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let v = self.condition_on(&mut tape, &[t], &[class_id])?;
        let d = self.config.hidden_dim;
        tape.value(v).clone().reshape(&[d])
    }

    /// Runs block `idx` on tokens `h: [batch * len, d]` with `cond: [batch, d]` (or `[d]`).
    pub fn run_block(&self, idx: usize, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        Ok(self.run_block_parts(idx, h, cond)?.0)
    }

    /// Block output together with its gated attention and MLP residual contributions.
    pub fn run_block_parts(&self, idx: usize, h: &Tensor, cond: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let cond = if cond.shape().len() == 1 {
            cond.clone().reshape(&[1, cond.numel()])?
        } else {
            cond.clone()
        };
        let mut tape = Tape::no_grad();
        let hv = tape.constant(h.clone());
        let cv = tape.constant(cond);
        let o = self.block_on(&mut tape, idx, hv, cv)?;
        Ok((
            tape.value(o.out).clone(),
            tape.value(o.attn).clone(),
            tape.value(o.mlp).clone(),
        ))
    }

    /// Noise prediction `[b, c, h, w]` for noisy images `x_t`, plus per-block
    /// features when `tap` is set.
    pub fn forward(
        &self,
        x_t: &Tensor,
        t: &[f64],
        classes: &[usize],
        tap: bool,
    ) -> Result<(Tensor, Option<FeatureTap>)> {
        let mut tape = Tape::no_grad();
        let (eps, taps) = self.forward_on(&mut tape, x_t, t, classes)?;
        let c = &self.config;
        let out = unpatchify(tape.value(eps), c.channels, c.image_size, c.patch_size)?;
        let tap = tap.then(|| FeatureTap {
            features: taps.iter().map(|&v| tape.value(v).clone()).collect(),
            tokens: c.tokens(),
        });
        Ok((out, tap))
    }

    /// Classifier-free guidance: `eps_null + scale * (eps_class - eps_null)`.
    pub fn cfg_forward(&self, x_t: &Tensor, t: &[f64], classes: &[usize], scale: f32) -> Result<Tensor> {
        if scale.is_nan() || scale < 1.0 {
            return Err(Error::invalid(format!("guidance scale must be >= 1, got {scale}")));
        }
        let (cond, _) = self.forward(x_t, t, classes, false)?;
        if scale == 1.0 {
            return Ok(cond);
        }
        let null = vec![self.null_class(); classes.len()];
        let (uncond, _) = self.forward(x_t, t, &null, false)?;
        let data = uncond
            .data()
            .iter()
            .zip(cond.data())
            .map(|(&u, &c)| u + scale * (c - u))
            .collect();
        Tensor::new(cond.shape(), data)
    }
}
