//! Hierarchical windowed-attention encoder over video frames.
//!
//! Frames are cut into patches, embedded, and passed through a stack of
//! stages. Each stage runs windowed multi-head self-attention blocks
//! (alternating unshifted and shifted windows, per-window learnable
//! relative-position bias, seam masking for the shifted case) strictly
//! per frame, then adds a residual temporal adapter over the whole clip;
//! between stages a 2×2 patch merge halves the grid and doubles the
//! channels. The final stage's tokens are mean-pooled per frame, so the
//! encoder maps `(B, T, 3, H, W)` to `(B, T, D)`.
//!
//! Because attention never crosses frames, disabling the adapters makes
//! the whole encoder frame-wise equivariant — permuting input frames
//! permutes outputs exactly. That property (and its deliberate failure
//! once adapters are active) is what the test suite pins down.
//!
//! A flat (non-hierarchical) encoder variant reuses the same blocks at a
//! single width with no merging and places one adapter after every
//! `alpha` blocks; it exists to exercise the adapter-interval
//! configuration axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    init_layer_norm, init_linear, init_linear_no_bias, layer_norm, linear, FwdCtx, INIT_STD,
};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{self, TapeConfig};
use crate::tensor::graph::Var;
use crate::tensor::{Element, Tensor};

/// Hierarchical encoder configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub window_size: usize,
    /// Adapter placement: fixed to one adapter per stage here; for the
    /// flat encoder variant, one adapter after every `alpha` blocks.
    pub adapter_interval_alpha: usize,
    pub t_max: usize,
    /// When false no adapters are registered or run: the ablation case.
    pub tape_enabled: bool,
    pub tape_down_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 2,
            stage_depths: vec![2, 2, 2, 2],
            stage_dims: vec![16, 32, 64, 128],
            stage_heads: vec![2, 4, 4, 8],
            window_size: 4,
            adapter_interval_alpha: 1,
            t_max: 64,
            tape_enabled: true,
            tape_down_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.stage_depths.len();
        if s == 0 || self.stage_dims.len() != s || self.stage_heads.len() != s {
            return Err(Error::Config(
                "stage_depths, stage_dims, stage_heads must be equal-length and non-empty".into(),
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        for i in 0..s {
            if self.stage_dims[i] % self.stage_heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: dim {} not divisible by heads {}",
                    self.stage_dims[i], self.stage_heads[i]
                )));
            }
            if i + 1 < s && self.stage_dims[i + 1] != 2 * self.stage_dims[i] {
                return Err(Error::Config(format!(
                    "stage dims must double: dim[{}]={} but dim[{}]={}",
                    i,
                    self.stage_dims[i],
                    i + 1,
                    self.stage_dims[i + 1]
                )));
            }
        }
        // Every merge needs an even grid.
        let grid0 = self.image_size / self.patch_size;
        if grid0 >> (s - 1) == 0 || (grid0 % (1 << (s - 1))) != 0 {
            return Err(Error::Config(format!(
                "grid {grid0} cannot be halved {} times",
                s - 1
            )));
        }
        if self.adapter_interval_alpha == 0 {
            return Err(Error::Config("adapter_interval_alpha must be >= 1".into()));
        }
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be >= 1".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be >= 1".into()));
        }
        if self.tape_enabled {
            for (i, &dim) in self.stage_dims.iter().enumerate() {
                if dim % self.tape_down_ratio != 0 {
                    return Err(Error::Config(format!(
                        "stage {i} dim {dim} not divisible by adapter down_ratio {}",
                        self.tape_down_ratio
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Token-grid side length at stage `s`.
    pub fn grid_at(&self, s: usize) -> usize {
        (self.image_size / self.patch_size) >> s
    }

    /// Channel width of the per-frame feature the encoder emits.
    pub fn out_dim(&self) -> usize {
        *self.stage_dims.last().unwrap()
    }

    fn tape_cfg(&self, stage: usize) -> TapeConfig {
        TapeConfig {
            channels: self.stage_dims[stage],
            down_ratio: self.tape_down_ratio,
            t_max: self.t_max,
        }
    }
}

/// Window size and shift actually used on a `grid`-sized stage: the
/// window is clipped to the grid, and clipping forces the shift to zero
/// (a clipped window is full attention; shifting it would be a no-op
/// that only reshuffles summation order).
pub fn effective_window(window: usize, shift: usize, grid: usize) -> (usize, usize) {
    if window >= grid {
        (grid, 0)
    } else {
        (window, shift)
    }
}

/// Relative-position index for a `w`×`w` window: entry `i*w*w + j` is the
/// row of the bias table holding the bias between local tokens `i`, `j`.
pub fn rel_pos_index(w: usize) -> Vec<usize> {
    let span = 2 * w - 1;
    let mut idx = Vec::with_capacity(w * w * w * w);
    for i in 0..w * w {
        let (yi, xi) = (i / w, i % w);
        for j in 0..w * w {
            let (yj, xj) = (j / w, j % w);
            let dy = yi + w - 1 - yj;
            let dx = xi + w - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Region id of a rolled-grid coordinate for the shifted-window seam
/// mask: coordinates left of the last window, inside it but before the
/// wrapped strip, and the wrapped strip itself must not attend across
/// their boundaries.
fn region(coord: usize, n: usize, w: usize, s: usize) -> usize {
    if coord < n - w {
        0
    } else if coord < n - s {
        1
    } else {
        2
    }
}

/// Additive attention mask for shifted windows on an `n`×`n` grid:
/// shape `(windows, 1, w*w, w*w)` with 0 where a pair may attend and
/// -1e9 where the cyclic roll spliced together tokens that were not
/// neighbours.
fn seam_mask<E: Element>(n: usize, w: usize, s: usize) -> Tensor<E> {
    let per_side = n / w;
    let n_windows = per_side * per_side;
    let area = w * w;
    let mut ids = vec![0usize; n_windows * area];
    for wh in 0..per_side {
        for ww in 0..per_side {
            for a in 0..w {
                for b in 0..w {
                    let h = wh * w + a;
                    let wc = ww * w + b;
                    ids[(wh * per_side + ww) * area + a * w + b] =
                        3 * region(h, n, w, s) + region(wc, n, w, s);
                }
            }
        }
    }
    let mut mask = Tensor::zeros(&[n_windows, 1, area, area]);
    for win in 0..n_windows {
        for i in 0..area {
            for j in 0..area {
                if ids[win * area + i] != ids[win * area + j] {
                    mask.set(&[win, 0, i, j], E::of(-1e9));
                }
            }
        }
    }
    mask
}

/// Cyclic roll of the two grid axes of `(B, T, H, W, C)` by `-s` (toward
/// the origin); `inverse` rolls back.
fn roll_grid<E: Element>(
    ctx: &mut FwdCtx<E>,
    x: Var,
    s: usize,
    inverse: bool,
) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    let (h, w) = (shape[2], shape[3]);
    let offset = |n: usize| if inverse { n - s } else { s };
    let hi: Vec<usize> = (0..h).map(|i| (i + offset(h)) % h).collect();
    let wi: Vec<usize> = (0..w).map(|i| (i + offset(w)) % w).collect();
    let x = ctx.graph.index_select(x, 2, &hi)?;
    ctx.graph.index_select(x, 3, &wi)
}

/// Registers one attention block: pre-norms, fused qkv, output
/// projection, relative-position-bias table, and the 4× MLP.
pub fn init_swin_block<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    prefix: &str,
    dim: usize,
    heads: usize,
    window_eff: usize,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.norm1"), dim)?;
    init_linear(store, root, &format!("{prefix}.attn.qkv"), dim, 3 * dim)?;
    init_linear(store, root, &format!("{prefix}.attn.proj"), dim, dim)?;
    let span = 2 * window_eff - 1;
    store.add_trunc_normal(
        &format!("{prefix}.attn.rpb"),
        &[span * span, heads],
        INIT_STD,
        root,
    )?;
    init_layer_norm(store, &format!("{prefix}.norm2"), dim)?;
    init_linear(store, root, &format!("{prefix}.mlp.fc1"), dim, 4 * dim)?;
    init_linear(store, root, &format!("{prefix}.mlp.fc2"), 4 * dim, dim)?;
    Ok(())
}

/// Windowed multi-head self-attention on a pre-normalized feature volume
/// `(B, T, Hs, Ws, C)`; per frame, window `w`, cyclic shift `s`.
pub(crate) fn attn_core<E: Element>(
    ctx: &mut FwdCtx<E>,
    z: Var,
    prefix: &str,
    heads: usize,
    w: usize,
    s: usize,
) -> Result<Var> {
    let shape = ctx.graph.shape(z).to_vec();
    let (b, t, h, wg, c) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let hd = c / heads;
    let per_h = h / w;
    let per_w = wg / w;
    let n_windows = per_h * per_w;
    let area = w * w;

    let z = if s > 0 { roll_grid(ctx, z, s, false)? } else { z };

    // Partition into (BT, windows, w*w, C).
    let z = ctx.graph.reshape(z, &[b * t, per_h, w, per_w, w, c])?;
    let z = ctx.graph.permute(z, &[0, 1, 3, 2, 4, 5])?;
    let z = ctx.graph.reshape(z, &[b * t, n_windows, area, c])?;

    let qkv = linear(ctx, z, &format!("{prefix}.attn.qkv"))?;
    let q_idx: Vec<usize> = (0..c).collect();
    let k_idx: Vec<usize> = (c..2 * c).collect();
    let v_idx: Vec<usize> = (2 * c..3 * c).collect();
    let split_heads = |ctx: &mut FwdCtx<E>, part: Var| -> Result<Var> {
        let part = ctx.graph.reshape(part, &[b * t, n_windows, area, heads, hd])?;
        ctx.graph.permute(part, &[0, 1, 3, 2, 4])
    };
    let q = ctx.graph.index_select(qkv, 3, &q_idx)?;
    let q = split_heads(ctx, q)?;
    let k = ctx.graph.index_select(qkv, 3, &k_idx)?;
    let k = split_heads(ctx, k)?;
    let v = ctx.graph.index_select(qkv, 3, &v_idx)?;
    let v = split_heads(ctx, v)?;

    let q = ctx.graph.mul_scalar(q, 1.0 / (hd as f64).sqrt());
    let k_t = ctx.graph.permute(k, &[0, 1, 2, 4, 3])?;
    let mut logits = ctx.graph.matmul(q, k_t)?;

    let table = ctx.param(&format!("{prefix}.attn.rpb"))?;
    let bias = ctx.graph.index_select(table, 0, &rel_pos_index(w))?;
    let bias = ctx.graph.reshape(bias, &[area, area, heads])?;
    let bias = ctx.graph.permute(bias, &[2, 0, 1])?;
    logits = ctx.graph.add_b(logits, bias)?;

    if s > 0 {
        let mask = ctx.graph.constant(seam_mask::<E>(h, w, s));
        logits = ctx.graph.add_b(logits, mask)?;
    }

    let attn = ctx.graph.softmax(logits, 4)?;
    let out = ctx.graph.matmul(attn, v)?;
    let out = ctx.graph.permute(out, &[0, 1, 3, 2, 4])?;
    let out = ctx.graph.reshape(out, &[b * t, n_windows, area, c])?;
    let out = linear(ctx, out, &format!("{prefix}.attn.proj"))?;

    // Undo the partition (and the roll).
    let out = ctx.graph.reshape(out, &[b * t, per_h, per_w, w, w, c])?;
    let out = ctx.graph.permute(out, &[0, 1, 3, 2, 4, 5])?;
    let out = ctx.graph.reshape(out, &[b, t, h, wg, c])?;
    if s > 0 {
        roll_grid(ctx, out, s, true)
    } else {
        Ok(out)
    }
}

/// One full attention block on `(B, T, Hs, Ws, C)`: pre-norm windowed
/// attention with a residual, then a pre-norm 4× GELU MLP with a
/// residual. `window`/`shift` are clipped to the grid.
pub fn window_attention<E: Element>(
    ctx: &mut FwdCtx<E>,
    x: Var,
    prefix: &str,
    heads: usize,
    window: usize,
    shift: usize,
) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    if shape.len() != 5 {
        return Err(Error::BadShape {
            op: "window_attention",
            shape,
            detail: "expected (batch, frames, grid-h, grid-w, channels)".into(),
        });
    }
    let grid = shape[2].min(shape[3]);
    let (w, s) = effective_window(window, shift, grid);
    if shape[2] % w != 0 || shape[3] % w != 0 {
        return Err(Error::BadShape {
            op: "window_attention",
            shape,
            detail: format!("grid not divisible by window {w}"),
        });
    }

    let normed = layer_norm(ctx, x, &format!("{prefix}.norm1"))?;
    let attn = attn_core(ctx, normed, prefix, heads, w, s)?;
    let x = ctx.graph.add(x, attn)?;

    let normed = layer_norm(ctx, x, &format!("{prefix}.norm2"))?;
    let h = linear(ctx, normed, &format!("{prefix}.mlp.fc1"))?;
    let h = ctx.graph.gelu(h);
    let h = linear(ctx, h, &format!("{prefix}.mlp.fc2"))?;
    ctx.graph.add(x, h)
}

/// Registers the patch embedding: linear projection of flattened
/// `patch×patch×3` pixels plus a layer norm.
pub fn init_patch_embed<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    cfg: &BackboneConfig,
) -> Result<()> {
    let in_dim = cfg.patch_size * cfg.patch_size * 3;
    init_linear(store, root, "backbone.patch_embed.proj", in_dim, cfg.stage_dims[0])?;
    init_layer_norm(store, "backbone.patch_embed.norm", cfg.stage_dims[0])?;
    Ok(())
}

/// Embeds frames `(B, T, 3, H, W)` into the stage-0 feature volume
/// `(B, T, H/p, W/p, C0)`.
pub fn patch_embed<E: Element>(
    ctx: &mut FwdCtx<E>,
    frames: Var,
    cfg: &BackboneConfig,
) -> Result<Var> {
    let shape = ctx.graph.shape(frames).to_vec();
    if shape.len() != 5 || shape[2] != 3 {
        return Err(Error::BadShape {
            op: "patch_embed",
            shape,
            detail: "expected (batch, frames, 3, height, width)".into(),
        });
    }
    let (b, t, h, w) = (shape[0], shape[1], shape[3], shape[4]);
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Config(format!(
            "frames are {h}×{w}, encoder configured for {0}×{0}",
            cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let g = h / p;
    let x = ctx.graph.reshape(frames, &[b * t, 3, g, p, g, p])?;
    let x = ctx.graph.permute(x, &[0, 2, 4, 3, 5, 1])?;
    let x = ctx.graph.reshape(x, &[b * t, g, g, p * p * 3])?;
    let x = linear(ctx, x, "backbone.patch_embed.proj")?;
    let x = layer_norm(ctx, x, "backbone.patch_embed.norm")?;
    ctx.graph.reshape(x, &[b, t, g, g, cfg.stage_dims[0]])
}

/// Registers a stage-transition merge: layer norm over the concatenated
/// 2×2 neighbourhood, then a bias-free reduction from 4C to 2C.
pub fn init_patch_merging<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    stage: usize,
    dim: usize,
) -> Result<()> {
    init_layer_norm(store, &format!("backbone.merge{stage}.norm"), 4 * dim)?;
    init_linear_no_bias(
        store,
        root,
        &format!("backbone.merge{stage}.reduce"),
        4 * dim,
        2 * dim,
    )
}

/// Merges 2×2 token neighbourhoods: `(B,T,H,W,C) -> (B,T,H/2,W/2,2C)`.
pub fn patch_merging<E: Element>(ctx: &mut FwdCtx<E>, x: Var, stage: usize) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    let (b, t, h, w, c) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "patch merging needs an even grid, got {h}×{w}"
        )));
    }
    let x = ctx.graph.reshape(x, &[b, t, h / 2, 2, w / 2, 2, c])?;
    let x = ctx.graph.permute(x, &[0, 1, 2, 4, 3, 5, 6])?;
    let x = ctx.graph.reshape(x, &[b, t, h / 2, w / 2, 4 * c])?;
    let x = layer_norm(ctx, x, &format!("backbone.merge{stage}.norm"))?;
    linear(ctx, x, &format!("backbone.merge{stage}.reduce"))
}

/// Registers every parameter of the hierarchical encoder.
pub fn init_backbone<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    cfg: &BackboneConfig,
) -> Result<()> {
    cfg.validate()?;
    init_patch_embed(store, root, cfg)?;
    for s in 0..cfg.stages() {
        let grid = cfg.grid_at(s);
        let (w_eff, _) = effective_window(cfg.window_size, cfg.window_size / 2, grid);
        for b in 0..cfg.stage_depths[s] {
            init_swin_block(
                store,
                root,
                &format!("backbone.stage{s}.block{b}"),
                cfg.stage_dims[s],
                cfg.stage_heads[s],
                w_eff,
            )?;
        }
        if cfg.tape_enabled {
            tape::init_tape(
                store,
                root,
                &format!("backbone.stage{s}.tape"),
                &cfg.tape_cfg(s),
            )?;
        }
        if s + 1 < cfg.stages() {
            init_patch_merging(store, root, s, cfg.stage_dims[s])?;
        }
    }
    Ok(())
}

/// One stage: its attention blocks (alternating shift 0 and window/2),
/// then a residual adapter over the result. Merging between stages is
/// the caller's job.
pub fn stem_stage<E: Element>(
    ctx: &mut FwdCtx<E>,
    x: Var,
    cfg: &BackboneConfig,
    stage: usize,
) -> Result<Var> {
    let mut y = x;
    for b in 0..cfg.stage_depths[stage] {
        let shift = if b % 2 == 1 { cfg.window_size / 2 } else { 0 };
        y = window_attention(
            ctx,
            y,
            &format!("backbone.stage{stage}.block{b}"),
            cfg.stage_heads[stage],
            cfg.window_size,
            shift,
        )?;
    }
    if cfg.tape_enabled {
        let adapted = tape::tape_forward(
            ctx,
            y,
            &format!("backbone.stage{stage}.tape"),
            &cfg.tape_cfg(stage),
        )?;
        y = ctx.graph.add(y, adapted)?;
    }
    Ok(y)
}

/// Full encoder: frames `(B, T, 3, H, W)` to per-frame features
/// `(B, T, D)` via patch embedding, all stages, and a final spatial mean
/// pool.
pub fn backbone_forward<E: Element>(
    ctx: &mut FwdCtx<E>,
    frames: Var,
    cfg: &BackboneConfig,
) -> Result<Var> {
    let shape = ctx.graph.shape(frames).to_vec();
    if shape.len() != 5 {
        return Err(Error::BadShape {
            op: "backbone_forward",
            shape,
            detail: "expected (batch, frames, 3, height, width)".into(),
        });
    }
    let t = shape[1];
    if t > cfg.t_max {
        return Err(Error::Capacity {
            frames: t,
            t_max: cfg.t_max,
        });
    }
    let mut x = patch_embed(ctx, frames, cfg)?;
    for s in 0..cfg.stages() {
        x = stem_stage(ctx, x, cfg, s)?;
        if s + 1 < cfg.stages() {
            x = patch_merging(ctx, x, s)?;
        }
    }
    ctx.graph.mean_axes(x, &[2, 3], false)
}

/// Flat single-width encoder variant: `blocks` attention blocks at one
/// dimension, no merging, one adapter after every `alpha`-th block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlatEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub window_size: usize,
    pub adapter_interval_alpha: usize,
    pub t_max: usize,
    pub tape_enabled: bool,
    pub tape_down_ratio: usize,
}

impl Default for FlatEncoderConfig {
    fn default() -> Self {
        FlatEncoderConfig {
            image_size: 32,
            patch_size: 4,
            blocks: 6,
            dim: 32,
            heads: 4,
            window_size: 4,
            adapter_interval_alpha: 1,
            t_max: 64,
            tape_enabled: true,
            tape_down_ratio: 4,
        }
    }
}

impl FlatEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adapter_interval_alpha == 0 {
            return Err(Error::Config("adapter_interval_alpha must be >= 1".into()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.tape_enabled && self.dim % self.tape_down_ratio != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by adapter down_ratio {}",
                self.dim, self.tape_down_ratio
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    fn tape_cfg(&self) -> TapeConfig {
        TapeConfig {
            channels: self.dim,
            down_ratio: self.tape_down_ratio,
            t_max: self.t_max,
        }
    }

    /// Blocks followed by an adapter: every `alpha`-th, 1-based.
    fn adapter_after(&self, block: usize) -> bool {
        self.tape_enabled && (block + 1) % self.adapter_interval_alpha == 0
    }
}

/// Registers the flat encoder's parameters under `flat.*`.
pub fn init_flat_encoder<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    cfg: &FlatEncoderConfig,
) -> Result<()> {
    cfg.validate()?;
    let in_dim = cfg.patch_size * cfg.patch_size * 3;
    init_linear(store, root, "flat.patch_embed.proj", in_dim, cfg.dim)?;
    init_layer_norm(store, "flat.patch_embed.norm", cfg.dim)?;
    let (w_eff, _) = effective_window(cfg.window_size, cfg.window_size / 2, cfg.grid());
    for b in 0..cfg.blocks {
        init_swin_block(
            store,
            root,
            &format!("flat.block{b}"),
            cfg.dim,
            cfg.heads,
            w_eff,
        )?;
        if cfg.adapter_after(b) {
            tape::init_tape(store, root, &format!("flat.block{b}.tape"), &cfg.tape_cfg())?;
        }
    }
    Ok(())
}

/// Number of adapters a store actually holds for the flat encoder
/// (counted from registered parameters, not recomputed from the config).
pub fn flat_adapter_count<E: Element>(store: &ParamStore<E>) -> usize {
    store
        .iter()
        .filter(|p| p.name.starts_with("flat.") && p.name.ends_with(".tape.up.weight"))
        .count()
}

/// Flat encoder forward: `(B, T, 3, H, W) -> (B, T, dim)`.
pub fn flat_encoder_forward<E: Element>(
    ctx: &mut FwdCtx<E>,
    frames: Var,
    cfg: &FlatEncoderConfig,
) -> Result<Var> {
    let shape = ctx.graph.shape(frames).to_vec();
    if shape.len() != 5 || shape[2] != 3 {
        return Err(Error::BadShape {
            op: "flat_encoder_forward",
            shape,
            detail: "expected (batch, frames, 3, height, width)".into(),
        });
    }
    let (b, t, h) = (shape[0], shape[1], shape[3]);
    if t > cfg.t_max {
        return Err(Error::Capacity {
            frames: t,
            t_max: cfg.t_max,
        });
    }
    let p = cfg.patch_size;
    let g = h / p;
    let x = ctx.graph.reshape(frames, &[b * t, 3, g, p, g, p])?;
    let x = ctx.graph.permute(x, &[0, 2, 4, 3, 5, 1])?;
    let x = ctx.graph.reshape(x, &[b * t, g, g, p * p * 3])?;
    let x = linear(ctx, x, "flat.patch_embed.proj")?;
    let x = layer_norm(ctx, x, "flat.patch_embed.norm")?;
    let mut x = ctx.graph.reshape(x, &[b, t, g, g, cfg.dim])?;

    for blk in 0..cfg.blocks {
        let shift = if blk % 2 == 1 { cfg.window_size / 2 } else { 0 };
        x = window_attention(
            ctx,
            x,
            &format!("flat.block{blk}"),
            cfg.heads,
            cfg.window_size,
            shift,
        )?;
        if cfg.adapter_after(blk) {
            let adapted = tape::tape_forward(
                ctx,
                x,
                &format!("flat.block{blk}.tape"),
                &cfg.tape_cfg(),
            )?;
            x = ctx.graph.add(x, adapted)?;
        }
    }
    ctx.graph.mean_axes(x, &[2, 3], false)
}
