//! Layer primitives shared by the encoder and the temporal head: linear
//! projections, layer normalization, batch normalization, and the
//! [`FwdCtx`] that threads parameters from a [`ParamStore`] into a
//! [`Graph`] while a sample's forward pass is being recorded.
//!
//! Layers here are stateless functions; the model registers parameters
//! once by name at construction and forward passes look them up through
//! the context. The context also supports two testing hooks: parameters
//! can be loaded as constants (so a gradient check differentiates only
//! its probe input), and any single parameter can be overridden by an
//! arbitrary graph variable (so the same check can differentiate with
//! respect to one weight tensor).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Truncated-normal standard deviation for projection initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A freshly observed batchnorm statistic destined for a running-stat
/// parameter. Updates are collected during forward passes and applied
/// after the batch in sample order, so parallel per-sample graphs stay
/// bit-deterministic.
#[derive(Debug, Clone)]
pub struct StatUpdate<E> {
    pub index: usize,
    pub value: Tensor<E>,
}

/// Folds observed statistics into their running parameters:
/// `running = (1 - momentum) * running + momentum * observed`.
pub fn apply_stat_updates<E: Element>(
    store: &mut ParamStore<E>,
    updates: &[StatUpdate<E>],
    momentum: f64,
) -> Result<()> {
    for u in updates {
        let entry = store.entry_mut(u.index);
        if entry.value.shape() != u.value.shape() {
            return Err(Error::DimMismatch {
                op: "apply_stat_updates",
                lhs: entry.value.shape().to_vec(),
                rhs: u.value.shape().to_vec(),
            });
        }
        let keep = E::of(1.0 - momentum);
        let take = E::of(momentum);
        for (r, n) in entry.value.data_mut().iter_mut().zip(u.value.data()) {
            *r = *r * keep + *n * take;
        }
    }
    Ok(())
}

/// Forward-pass context: graph under construction plus parameter access.
pub struct FwdCtx<'g, 's, E: Element> {
    pub graph: &'g mut Graph<E>,
    store: &'s ParamStore<E>,
    mode: Mode,
    cache: HashMap<usize, Var>,
    overrides: HashMap<String, Var>,
    params_as_constants: bool,
    stat_updates: Vec<StatUpdate<E>>,
}

impl<'g, 's, E: Element> FwdCtx<'g, 's, E> {
    pub fn new(graph: &'g mut Graph<E>, store: &'s ParamStore<E>, mode: Mode) -> Self {
        FwdCtx {
            graph,
            store,
            mode,
            cache: HashMap::new(),
            overrides: HashMap::new(),
            params_as_constants: false,
            stat_updates: Vec::new(),
        }
    }

    /// Context for finite-difference checks: parameters enter the graph
    /// as constants, so only the probe input (or an overridden parameter)
    /// carries gradient.
    pub fn for_gradcheck(graph: &'g mut Graph<E>, store: &'s ParamStore<E>, mode: Mode) -> Self {
        let mut ctx = Self::new(graph, store, mode);
        ctx.params_as_constants = true;
        ctx
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<E> {
        self.store
    }

    /// Replaces a named parameter with an existing graph variable for
    /// this forward pass only.
    pub fn override_param(&mut self, name: &str, var: Var) {
        self.overrides.insert(name.to_string(), var);
    }

    /// Brings a parameter into the graph (once; later calls return the
    /// same variable).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.overrides.get(name) {
            return Ok(*v);
        }
        let idx = self.store.lookup(name)?;
        if let Some(v) = self.cache.get(&idx) {
            return Ok(*v);
        }
        let entry = self.store.entry(idx);
        let var = if self.params_as_constants {
            self.graph.constant(entry.value.clone())
        } else {
            self.graph
                .param_leaf(entry.value.clone(), idx, entry.trainable)
        };
        self.cache.insert(idx, var);
        Ok(var)
    }

    fn record_stat(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let index = self.store.lookup(name)?;
        self.stat_updates.push(StatUpdate { index, value });
        Ok(())
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<E>> {
        std::mem::take(&mut self.stat_updates)
    }
}

/// Registers `{prefix}.weight (f_in, f_out)` and `{prefix}.bias (f_out)`.
pub fn init_linear<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    prefix: &str,
    f_in: usize,
    f_out: usize,
) -> Result<()> {
    store.add_trunc_normal(&format!("{prefix}.weight"), &[f_in, f_out], INIT_STD, root)?;
    store.add_zeros(&format!("{prefix}.bias"), &[f_out], true)?;
    Ok(())
}

/// Registers `{prefix}.weight` only; [`linear`] skips the bias add when
/// no bias parameter exists.
pub fn init_linear_no_bias<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    prefix: &str,
    f_in: usize,
    f_out: usize,
) -> Result<()> {
    store.add_trunc_normal(&format!("{prefix}.weight"), &[f_in, f_out], INIT_STD, root)?;
    Ok(())
}

/// Linear layer whose weight AND bias start at zero (adapter
/// up-projections; makes the enclosing module an exact identity at
/// initialization).
pub fn init_linear_zero<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    f_in: usize,
    f_out: usize,
) -> Result<()> {
    store.add_zeros(&format!("{prefix}.weight"), &[f_in, f_out], true)?;
    store.add_zeros(&format!("{prefix}.bias"), &[f_out], true)?;
    Ok(())
}

/// `y = x @ W + b` over the last axis; any leading shape. The bias is
/// optional: layers registered without one skip the add.
pub fn linear<E: Element>(ctx: &mut FwdCtx<E>, x: Var, prefix: &str) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let bias_name = format!("{prefix}.bias");
    let b = if ctx.store.contains(&bias_name) || ctx.overrides.contains_key(&bias_name) {
        Some(ctx.param(&bias_name)?)
    } else {
        None
    };
    let xs = ctx.graph.shape(x).to_vec();
    if xs.is_empty() {
        return Err(Error::BadShape {
            op: "linear",
            shape: xs,
            detail: "input must have at least one axis".into(),
        });
    }
    let f_in = *xs.last().unwrap();
    let flat = ctx.graph.reshape(x, &[xs[..xs.len() - 1].iter().product(), f_in])?;
    let y = ctx.graph.matmul(flat, w)?;
    let f_out = ctx.graph.shape(y)[1];
    let mut out_shape = xs[..xs.len() - 1].to_vec();
    out_shape.push(f_out);
    let y = ctx.graph.reshape(y, &out_shape)?;
    match b {
        Some(b) => ctx.graph.add_b(y, b),
        None => Ok(y),
    }
}

/// Registers `{prefix}.gamma` (ones) and `{prefix}.beta` (zeros).
pub fn init_layer_norm<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    store.add_full(&format!("{prefix}.gamma"), &[dim], 1.0, true)?;
    store.add_zeros(&format!("{prefix}.beta"), &[dim], true)?;
    Ok(())
}

/// Layer normalization over the last axis.
pub fn layer_norm<E: Element>(ctx: &mut FwdCtx<E>, x: Var, prefix: &str) -> Result<Var> {
    let gamma = ctx.param(&format!("{prefix}.gamma"))?;
    let beta = ctx.param(&format!("{prefix}.beta"))?;
    let rank = ctx.graph.shape(x).len();
    if rank == 0 {
        return Err(Error::BadShape {
            op: "layer_norm",
            shape: vec![],
            detail: "input must have a channel axis".into(),
        });
    }
    let last = rank - 1;
    let mean = ctx.graph.mean_axes(x, &[last], true)?;
    let neg_mean = ctx.graph.mul_scalar(mean, -1.0);
    let centered = ctx.graph.add_b(x, neg_mean)?;
    let sq = ctx.graph.mul(centered, centered)?;
    let var = ctx.graph.mean_axes(sq, &[last], true)?;
    let var_eps = ctx.graph.add_scalar(var, LN_EPS);
    let std = ctx.graph.sqrt(var_eps);
    let inv = ctx.graph.recip(std);
    let normed = ctx.graph.mul_b(centered, inv)?;
    let scaled = ctx.graph.mul_b(normed, gamma)?;
    ctx.graph.add_b(scaled, beta)
}

/// Registers batchnorm parameters: learnable `gamma`/`beta` plus
/// non-trainable `running_mean`/`running_var`.
pub fn init_batch_norm<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    channels: usize,
) -> Result<()> {
    store.add_full(&format!("{prefix}.gamma"), &[channels], 1.0, true)?;
    store.add_zeros(&format!("{prefix}.beta"), &[channels], true)?;
    store.add_zeros(&format!("{prefix}.running_mean"), &[channels], false)?;
    store.add_full(&format!("{prefix}.running_var"), &[channels], 1.0, false)?;
    Ok(())
}

/// Shape that broadcasts a per-channel vector against a tensor of rank
/// `rank` whose channel axis is `channel_axis` (trailing-aligned).
fn channel_broadcast_shape(rank: usize, channel_axis: usize, channels: usize) -> Vec<usize> {
    let mut shape = vec![1; rank - channel_axis];
    shape[0] = channels;
    shape
}

/// Batch normalization over every axis except `channel_axis`.
///
/// Train mode standardizes with the biased batch statistics of this
/// graph's input and records running-stat updates (mean, and unbiased
/// variance) for later application; eval mode standardizes with the
/// stored running statistics and touches nothing.
pub fn batch_norm<E: Element>(
    ctx: &mut FwdCtx<E>,
    x: Var,
    prefix: &str,
    channel_axis: usize,
    eps: f64,
) -> Result<Var> {
    let gamma = ctx.param(&format!("{prefix}.gamma"))?;
    let beta = ctx.param(&format!("{prefix}.beta"))?;
    let xs = ctx.graph.shape(x).to_vec();
    if channel_axis >= xs.len() {
        return Err(Error::BadShape {
            op: "batch_norm",
            shape: xs,
            detail: format!("channel axis {channel_axis} out of range"),
        });
    }
    let channels = xs[channel_axis];
    let reduce_axes: Vec<usize> = (0..xs.len()).filter(|a| *a != channel_axis).collect();
    let count: usize = reduce_axes.iter().map(|a| xs[*a]).product();
    let bshape = channel_broadcast_shape(xs.len(), channel_axis, channels);

    let (centered, inv) = match ctx.mode {
        Mode::Train => {
            if count <= 1 {
                return Err(Error::DegenerateStats { count });
            }
            let mean = ctx.graph.mean_axes(x, &reduce_axes, true)?;
            let neg_mean = ctx.graph.mul_scalar(mean, -1.0);
            let centered = ctx.graph.add_b(x, neg_mean)?;
            let sq = ctx.graph.mul(centered, centered)?;
            let var = ctx.graph.mean_axes(sq, &reduce_axes, true)?;
            let var_eps = ctx.graph.add_scalar(var, eps);
            let std = ctx.graph.sqrt(var_eps);
            let inv = ctx.graph.recip(std);

            let batch_mean = ctx.graph.value(mean).clone().reshaped(&[channels])?;
            let correction = count as f64 / (count as f64 - 1.0);
            let batch_var = ctx
                .graph
                .value(var)
                .clone()
                .reshaped(&[channels])?
                .map(|v| v * E::of(correction));
            ctx.record_stat(&format!("{prefix}.running_mean"), batch_mean)?;
            ctx.record_stat(&format!("{prefix}.running_var"), batch_var)?;
            (centered, inv)
        }
        Mode::Eval => {
            let rm = ctx.param(&format!("{prefix}.running_mean"))?;
            let rv = ctx.param(&format!("{prefix}.running_var"))?;
            let rm = ctx.graph.reshape(rm, &bshape)?;
            let rv = ctx.graph.reshape(rv, &bshape)?;
            let neg_mean = ctx.graph.mul_scalar(rm, -1.0);
            let centered = ctx.graph.add_b(x, neg_mean)?;
            let var_eps = ctx.graph.add_scalar(rv, eps);
            let std = ctx.graph.sqrt(var_eps);
            let inv = ctx.graph.recip(std);
            (centered, inv)
        }
    };

    let normed = ctx.graph.mul_b(centered, inv)?;
    let gamma_b = ctx.graph.reshape(gamma, &bshape)?;
    let beta_b = ctx.graph.reshape(beta, &bshape)?;
    let scaled = ctx.graph.mul_b(normed, gamma_b)?;
    ctx.graph.add_b(scaled, beta_b)
}

/// Registers a dense 1-d convolution `{prefix}.weight (c_out, c_in, k)`
/// and optionally `{prefix}.bias (c_out)`.
pub fn init_conv1d<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    bias: bool,
) -> Result<()> {
    store.add_trunc_normal(&format!("{prefix}.weight"), &[c_out, c_in, k], INIT_STD, root)?;
    if bias {
        store.add_zeros(&format!("{prefix}.bias"), &[c_out], true)?;
    }
    Ok(())
}

/// 1-d convolution over `(B, C, T)` with optional per-channel bias.
pub fn conv1d<E: Element>(
    ctx: &mut FwdCtx<E>,
    x: Var,
    prefix: &str,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let y = ctx.graph.conv1d(x, w, stride, dilation, padding)?;
    let bias_name = format!("{prefix}.bias");
    if ctx.store.contains(&bias_name) || ctx.overrides.contains_key(&bias_name) {
        let b = ctx.param(&bias_name)?;
        let c_out = ctx.graph.shape(y)[1];
        let b = ctx.graph.reshape(b, &[c_out, 1])?;
        ctx.graph.add_b(y, b)
    } else {
        Ok(y)
    }
}
