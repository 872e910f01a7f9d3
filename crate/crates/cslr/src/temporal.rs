//! Temporal enhancement head: multi-scale temporal convolutions with
//! lifting-based downsampling, then a bidirectional LSTM, then two
//! independent classification heads.
//!
//! The convolutional front (`mstcn_forward`) runs `n + 2` parallel
//! branches per stage — `n` dilated kernel-3 convolutions plus a 1×1
//! conv and a max-pool → 1×1 conv pair — concatenates them back to the
//! working width, fuses with a kernel-5 convolution, and halves the
//! sequence with a lifting step (`tlp`). Two stages cut the length to a
//! quarter. The lifting step also emits two regularizer scalars per
//! stage: the detail energy `cu` and the mean absolute deviation of the
//! approximation from its temporal mean `cp`.
//!
//! The recurrent back (`bilstm_forward`) is a standard LSTM run in both
//! directions with separate parameters and per-timestep concatenation.
//! With all parameters zero its output is exactly zero (gates sit at
//! one half, the candidate at zero), which the tests pin down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv1d, init_conv1d, init_linear, linear, FwdCtx, INIT_STD};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::graph::Var;
use crate::tensor::Element;

/// Multi-scale temporal convolution configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MstcnConfig {
    /// Channels arriving from the frame encoder.
    pub in_dim: usize,
    /// Internal width; must be divisible by the branch count.
    pub ms_dim: usize,
    /// Number of dilated branches.
    pub n_dilations: usize,
    /// Dilation rate per dilated branch.
    pub dilations: Vec<usize>,
    /// Kernel size of the dilated branches.
    pub kernel: usize,
    /// Downsampling stages; each halves the sequence.
    pub stage_count: usize,
    /// Ablation: replace the dilated branches with 1×1 convolutions.
    pub dilated_as_pointwise: bool,
}

impl Default for MstcnConfig {
    fn default() -> Self {
        MstcnConfig {
            in_dim: 128,
            ms_dim: 96,
            n_dilations: 4,
            dilations: vec![1, 2, 3, 4],
            kernel: 3,
            stage_count: 2,
            dilated_as_pointwise: false,
        }
    }
}

impl MstcnConfig {
    /// Parallel branches per stage: the dilated ones plus the two
    /// dimensionality-reduction branches.
    pub fn branches(&self) -> usize {
        self.n_dilations + 2
    }

    /// Channels each branch produces.
    pub fn branch_dim(&self) -> usize {
        self.ms_dim / self.branches()
    }

    /// Minimum input length the stage stack can downsample.
    pub fn min_len(&self) -> usize {
        1 << self.stage_count.max(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.len() != self.n_dilations {
            return Err(Error::Config(format!(
                "{} dilation rates given for {} dilated branches",
                self.dilations.len(),
                self.n_dilations
            )));
        }
        if self.ms_dim == 0 || self.ms_dim % self.branches() != 0 {
            return Err(Error::Config(format!(
                "ms_dim {} not divisible by branch count {}",
                self.ms_dim,
                self.branches()
            )));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!(
                "dilated-branch kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::Config("dilation rates must be >= 1".into()));
        }
        if self.in_dim == 0 || self.stage_count == 0 {
            return Err(Error::Config(
                "in_dim and stage_count must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Bidirectional LSTM configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BilstmConfig {
    /// Hidden units per direction; the output is `2 * hidden` wide.
    pub hidden: usize,
    /// Stacked layers; layer `l > 0` consumes the previous layer's
    /// concatenated output.
    pub layers: usize,
}

impl Default for BilstmConfig {
    fn default() -> Self {
        BilstmConfig { hidden: 96, layers: 1 }
    }
}

impl BilstmConfig {
    pub fn out_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("hidden and layers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-stage lifting regularizers: detail energy and approximation
/// peakiness, both scalars in the graph.
#[derive(Debug, Clone, Copy)]
pub struct TlpCosts {
    pub cu: Var,
    pub cp: Var,
}

/// Registers the convolutional front's parameters under
/// `temporal.mstcn.*`.
pub fn init_mstcn<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    cfg: &MstcnConfig,
) -> Result<()> {
    cfg.validate()?;
    init_conv1d(store, root, "temporal.mstcn.entry", cfg.ms_dim, cfg.in_dim, 1, true)?;
    for s in 0..cfg.stage_count {
        for i in 0..cfg.n_dilations {
            let k = if cfg.dilated_as_pointwise { 1 } else { cfg.kernel };
            init_conv1d(
                store,
                root,
                &format!("temporal.mstcn.stage{s}.branch{i}"),
                cfg.branch_dim(),
                cfg.ms_dim,
                k,
                true,
            )?;
        }
        for i in [cfg.n_dilations, cfg.n_dilations + 1] {
            init_conv1d(
                store,
                root,
                &format!("temporal.mstcn.stage{s}.branch{i}"),
                cfg.branch_dim(),
                cfg.ms_dim,
                1,
                true,
            )?;
        }
        init_conv1d(
            store,
            root,
            &format!("temporal.mstcn.stage{s}.fuse"),
            cfg.ms_dim,
            cfg.ms_dim,
            5,
            true,
        )?;
        // Lifting predictor/updater: depthwise kernel-3 convolutions,
        // zero-initialized so the lift starts as an exact even-index
        // subsample.
        store.add_zeros(
            &format!("temporal.mstcn.stage{s}.tlp.predict.weight"),
            &[cfg.ms_dim, 3],
            true,
        )?;
        store.add_zeros(
            &format!("temporal.mstcn.stage{s}.tlp.update.weight"),
            &[cfg.ms_dim, 3],
            true,
        )?;
    }
    Ok(())
}

/// One branch of a stage on features `(B, ms_dim, T)`; length-preserving
/// and channel-reducing to `branch_dim`.
pub fn mstcn_branch<E: Element>(
    ctx: &mut FwdCtx<E>,
    x: Var,
    cfg: &MstcnConfig,
    stage: usize,
    branch: usize,
) -> Result<Var> {
    let prefix = format!("temporal.mstcn.stage{stage}.branch{branch}");
    if branch < cfg.n_dilations {
        if cfg.dilated_as_pointwise {
            conv1d(ctx, x, &prefix, 1, 1, 0)
        } else {
            let d = cfg.dilations[branch];
            // padding = dilation keeps kernel-3 convs length-preserving.
            conv1d(ctx, x, &prefix, 1, d, d)
        }
    } else if branch == cfg.n_dilations {
        conv1d(ctx, x, &prefix, 1, 1, 0)
    } else if branch == cfg.n_dilations + 1 {
        let pooled = ctx.graph.maxpool1d(x, 3, 1, 1)?;
        conv1d(ctx, pooled, &prefix, 1, 1, 0)
    } else {
        Err(Error::Contract(format!(
            "branch {branch} out of range for {} branches",
            cfg.branches()
        )))
    }
}

/// Lifting downsampler on `(B, C, T)`: splits into even/odd frames,
/// predicts the odd half from the even half (detail `D = X_o − P(X_e)`),
/// updates the even half with the detail (`A = X_e + U(D)`), and returns
/// the approximation plus `cu = mean(D²)` and
/// `cp = mean|A − mean_T(A)|`. Odd lengths are left-padded by edge
/// replication first, so the output holds `ceil(T/2)` frames.
pub fn tlp<E: Element>(ctx: &mut FwdCtx<E>, x: Var, prefix: &str) -> Result<(Var, TlpCosts)> {
    let shape = ctx.graph.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::BadShape {
            op: "tlp",
            shape,
            detail: "expected (batch, channels, time)".into(),
        });
    }
    let mut t = shape[2];
    if t < 2 {
        return Err(Error::SequenceTooShort { op: "tlp", len: t, min: 2 });
    }
    let mut x = x;
    if t % 2 == 1 {
        let mut idx = Vec::with_capacity(t + 1);
        idx.push(0);
        idx.extend(0..t);
        x = ctx.graph.index_select(x, 2, &idx)?;
        t += 1;
    }
    let even: Vec<usize> = (0..t).step_by(2).collect();
    let odd: Vec<usize> = (1..t).step_by(2).collect();
    let xe = ctx.graph.index_select(x, 2, &even)?;
    let xo = ctx.graph.index_select(x, 2, &odd)?;

    let pw = ctx.param(&format!("{prefix}.predict.weight"))?;
    let pred = ctx.graph.dwconv1d(xe, pw, 1)?;
    let d = ctx.graph.sub(xo, pred)?;

    let uw = ctx.param(&format!("{prefix}.update.weight"))?;
    let upd = ctx.graph.dwconv1d(d, uw, 1)?;
    let a = ctx.graph.add(xe, upd)?;

    let d2 = ctx.graph.mul(d, d)?;
    let cu = ctx.graph.mean_all(d2);

    let m = ctx.graph.mean_axes(a, &[2], true)?;
    let neg_m = ctx.graph.mul_scalar(m, -1.0);
    let dev = ctx.graph.add_b(a, neg_m)?;
    let dev = ctx.graph.abs(dev);
    let cp = ctx.graph.mean_all(dev);

    Ok((a, TlpCosts { cu, cp }))
}

/// Convolutional front: `(B, in_dim, T) -> (B, ms_dim, T/4)` for the
/// default two stages, plus one `TlpCosts` pair per stage.
pub fn mstcn_forward<E: Element>(
    ctx: &mut FwdCtx<E>,
    feat: Var,
    cfg: &MstcnConfig,
) -> Result<(Var, Vec<TlpCosts>)> {
    let shape = ctx.graph.shape(feat).to_vec();
    if shape.len() != 3 || shape[1] != cfg.in_dim {
        return Err(Error::BadShape {
            op: "mstcn_forward",
            shape,
            detail: format!("expected (batch, {}, time)", cfg.in_dim),
        });
    }
    let t = shape[2];
    let min = cfg.min_len();
    if t < min {
        return Err(Error::SequenceTooShort { op: "mstcn_forward", len: t, min });
    }

    let mut y = conv1d(ctx, feat, "temporal.mstcn.entry", 1, 1, 0)?;
    let mut costs = Vec::with_capacity(cfg.stage_count);
    for s in 0..cfg.stage_count {
        let outs = (0..cfg.branches())
            .map(|b| mstcn_branch(ctx, y, cfg, s, b))
            .collect::<Result<Vec<_>>>()?;
        y = ctx.graph.concat(&outs, 1)?;
        y = conv1d(ctx, y, &format!("temporal.mstcn.stage{s}.fuse"), 1, 1, 2)?;
        let (a, c) = tlp(ctx, y, &format!("temporal.mstcn.stage{s}.tlp"))?;
        y = a;
        costs.push(c);
    }
    Ok((y, costs))
}

/// Registers the bidirectional LSTM's parameters under
/// `temporal.bilstm.*`. Gate layout inside the fused matrices is
/// `[input, forget, candidate, output]`.
pub fn init_bilstm<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    input_dim: usize,
    cfg: &BilstmConfig,
) -> Result<()> {
    cfg.validate()?;
    for l in 0..cfg.layers {
        let in_dim = if l == 0 { input_dim } else { cfg.out_dim() };
        for dir in ["fwd", "bwd"] {
            let prefix = format!("temporal.bilstm.l{l}.{dir}");
            store.add_trunc_normal(
                &format!("{prefix}.w_ih"),
                &[in_dim, 4 * cfg.hidden],
                INIT_STD,
                root,
            )?;
            store.add_trunc_normal(
                &format!("{prefix}.w_hh"),
                &[cfg.hidden, 4 * cfg.hidden],
                INIT_STD,
                root,
            )?;
            store.add_zeros(&format!("{prefix}.bias"), &[4 * cfg.hidden], true)?;
        }
    }
    Ok(())
}

/// One LSTM direction over `(B, T, F)` with zero initial states,
/// returning hidden states `(B, T, H)` placed at their source timestep
/// (so `reverse` changes the recurrence order, not the output layout).
fn lstm_direction<E: Element>(
    ctx: &mut FwdCtx<E>,
    x: Var,
    prefix: &str,
    hidden: usize,
    reverse: bool,
) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    let (b, t, f) = (shape[0], shape[1], shape[2]);
    let w_ih = ctx.param(&format!("{prefix}.w_ih"))?;
    let w_hh = ctx.param(&format!("{prefix}.w_hh"))?;
    let bias = ctx.param(&format!("{prefix}.bias"))?;

    let gate_idx: Vec<Vec<usize>> = (0..4)
        .map(|g| (g * hidden..(g + 1) * hidden).collect())
        .collect();

    let mut h = ctx.graph.constant(crate::tensor::Tensor::zeros(&[b, hidden]));
    let mut c = ctx.graph.constant(crate::tensor::Tensor::zeros(&[b, hidden]));
    let mut outs: Vec<Option<Var>> = vec![None; t];

    let order: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    for step in order {
        let xt = ctx.graph.index_select(x, 1, &[step])?;
        let xt = ctx.graph.reshape(xt, &[b, f])?;
        let gi = ctx.graph.matmul(xt, w_ih)?;
        let gh = ctx.graph.matmul(h, w_hh)?;
        let mut gates = ctx.graph.add(gi, gh)?;
        gates = ctx.graph.add_b(gates, bias)?;

        let i_g = ctx.graph.index_select(gates, 1, &gate_idx[0])?;
        let f_g = ctx.graph.index_select(gates, 1, &gate_idx[1])?;
        let c_g = ctx.graph.index_select(gates, 1, &gate_idx[2])?;
        let o_g = ctx.graph.index_select(gates, 1, &gate_idx[3])?;
        let i_g = ctx.graph.sigmoid(i_g);
        let f_g = ctx.graph.sigmoid(f_g);
        let c_g = ctx.graph.tanh(c_g);
        let o_g = ctx.graph.sigmoid(o_g);

        let keep = ctx.graph.mul(f_g, c)?;
        let write = ctx.graph.mul(i_g, c_g)?;
        c = ctx.graph.add(keep, write)?;
        let c_act = ctx.graph.tanh(c);
        h = ctx.graph.mul(o_g, c_act)?;
        outs[step] = Some(ctx.graph.reshape(h, &[b, 1, hidden])?);
    }
    let outs: Vec<Var> = outs.into_iter().map(|v| v.unwrap()).collect();
    ctx.graph.concat(&outs, 1)
}

/// Bidirectional LSTM over `(B, T, F)`: per layer, the forward pass
/// walks t = 0..T and the backward pass t = T..0 with separate
/// parameters; their hidden states are concatenated per timestep to
/// `(B, T, 2·hidden)`.
pub fn bilstm_forward<E: Element>(
    ctx: &mut FwdCtx<E>,
    seq: Var,
    cfg: &BilstmConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = ctx.graph.shape(seq).to_vec();
    if shape.len() != 3 {
        return Err(Error::BadShape {
            op: "bilstm_forward",
            shape,
            detail: "expected (batch, time, features)".into(),
        });
    }
    let mut y = seq;
    for l in 0..cfg.layers {
        let fwd = lstm_direction(ctx, y, &format!("temporal.bilstm.l{l}.fwd"), cfg.hidden, false)?;
        let bwd = lstm_direction(ctx, y, &format!("temporal.bilstm.l{l}.bwd"), cfg.hidden, true)?;
        y = ctx.graph.concat(&[fwd, bwd], 2)?;
    }
    Ok(y)
}

/// Registers an affine classification head mapping `in_dim` features to
/// `vocab + 1` logits (the extra slot is the blank label).
pub fn init_classifier<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    name: &str,
    in_dim: usize,
    vocab: usize,
) -> Result<()> {
    init_linear(store, root, name, in_dim, vocab + 1)
}

/// Affine head on `(B, T, F)` producing per-timestep logits
/// `(B, T, V+1)`.
pub fn classifier<E: Element>(ctx: &mut FwdCtx<E>, seq: Var, name: &str) -> Result<Var> {
    let shape = ctx.graph.shape(seq).to_vec();
    if shape.len() != 3 {
        return Err(Error::BadShape {
            op: "classifier",
            shape,
            detail: "expected (batch, time, features)".into(),
        });
    }
    linear(ctx, seq, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::gradcheck::{gradcheck, DEFAULT_EPS};
    use crate::tensor::graph::Graph;
    use crate::tensor::Tensor;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::Rng::new(seed).derive("temporal.test");
        Tensor::from_fn(shape, |_| 2.0 * rng.next_f64() - 1.0)
    }

    fn randomize(store: &mut ParamStore<f64>, prefix: &str, scale: f64, seed: u64) {
        let names: Vec<String> = store
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.name.clone())
            .collect();
        let mut rng = crate::rng::Rng::new(seed).derive("randomize");
        for name in names {
            let shape = store.value(&name).unwrap().shape().to_vec();
            store
                .set_value(&name, Tensor::from_fn(&shape, |_| scale * (2.0 * rng.next_f64() - 1.0)))
                .unwrap();
        }
    }

    #[test]
    fn pointwise_branch_with_identity_weights_slices_channels() {
        let cfg = MstcnConfig::default();
        let mut store = ParamStore::<f64>::new();
        init_mstcn(&mut store, &crate::rng::Rng::new(1), &cfg).unwrap();
        // Identity-extended 1×1 kernel: output channel o copies input
        // channel o.
        let bd = cfg.branch_dim();
        let w = Tensor::from_fn(&[bd, cfg.ms_dim, 1], |flat| {
            let (o, i) = (flat / cfg.ms_dim, flat % cfg.ms_dim);
            if o == i { 1.0 } else { 0.0 }
        });
        store.set_value("temporal.mstcn.stage0.branch4.weight", w).unwrap();

        let x = rand_tensor(&[1, cfg.ms_dim, 5], 2);
        let mut g = Graph::new();
        let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
        let xv = ctx.graph.input(x.clone());
        let y = mstcn_branch(&mut ctx, xv, &cfg, 0, 4).unwrap();
        let y = ctx.graph.value(y);
        assert_eq!(y.shape(), &[1, bd, 5]);
        for ch in 0..bd {
            for t in 0..5 {
                assert_eq!(y.at(&[0, ch, t]), x.at(&[0, ch, t]));
            }
        }
    }

    #[test]
    fn dilated_branch_receptive_fields_are_3_5_7_9() {
        let cfg = MstcnConfig::default();
        let mut store = ParamStore::<f64>::new();
        init_mstcn(&mut store, &crate::rng::Rng::new(3), &cfg).unwrap();
        randomize(&mut store, "temporal.mstcn.stage0.branch", 0.5, 4);

        let t_len = 13;
        let t0 = 6;
        let x = rand_tensor(&[1, cfg.ms_dim, t_len], 5);
        for (b, &d) in cfg.dilations.iter().enumerate() {
            let run = |input: &Tensor<f64>| {
                let mut g = Graph::new();
                let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
                let xv = ctx.graph.input(input.clone());
                let y = mstcn_branch(&mut ctx, xv, &cfg, 0, b).unwrap();
                ctx.graph.value(y).clone()
            };
            let base = run(&x);
            let mut bumped = x.clone();
            bumped.set(&[0, 7, t0], x.at(&[0, 7, t0]) + 1.0);
            let moved = run(&bumped);
            let changed: Vec<usize> = (0..t_len)
                .filter(|&t| {
                    (0..cfg.branch_dim()).any(|ch| base.at(&[0, ch, t]) != moved.at(&[0, ch, t]))
                })
                .collect();
            // A kernel-3 conv at dilation d reads inputs t−d, t, t+d, so
            // the bump surfaces exactly at those offsets — all within
            // |Δt| ≤ d — and the affected span is the receptive field
            // 2d+1.
            assert_eq!(changed, vec![t0 - d, t0, t0 + d], "dilation {d}");
            assert!(changed.iter().all(|&t| t.abs_diff(t0) <= d));
            assert_eq!(changed.last().unwrap() - changed.first().unwrap() + 1, 2 * d + 1);
        }
    }

    #[test]
    fn maxpool_branch_is_constant_on_constant_input() {
        let cfg = MstcnConfig::default();
        let mut store = ParamStore::<f64>::new();
        init_mstcn(&mut store, &crate::rng::Rng::new(6), &cfg).unwrap();
        randomize(&mut store, "temporal.mstcn.stage0.branch5", 0.5, 7);

        let x = Tensor::full(&[1, cfg.ms_dim, 6], 0.4_f64);
        let mut g = Graph::new();
        let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
        let xv = ctx.graph.input(x);
        let y = mstcn_branch(&mut ctx, xv, &cfg, 0, 5).unwrap();
        let y = ctx.graph.value(y);
        // Pooling a constant is the constant, so every timestep carries
        // the same affine image of it.
        for ch in 0..cfg.branch_dim() {
            for t in 1..6 {
                assert_eq!(y.at(&[0, ch, t]), y.at(&[0, ch, 0]));
            }
        }
        let w = store.value("temporal.mstcn.stage0.branch5.weight").unwrap();
        let bias = store.value("temporal.mstcn.stage0.branch5.bias").unwrap();
        for ch in 0..cfg.branch_dim() {
            let mut want = bias.at(&[ch]);
            for i in 0..cfg.ms_dim {
                want += w.at(&[ch, i, 0]) * 0.4;
            }
            assert!((y.at(&[0, ch, 0]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_reduces_length_by_four_and_counts_channels() {
        let cfg = MstcnConfig::default();
        let mut store = ParamStore::<f64>::new();
        init_mstcn(&mut store, &crate::rng::Rng::new(8), &cfg).unwrap();
        assert_eq!(cfg.branches(), 6);
        assert_eq!(cfg.branch_dim() * cfg.branches(), 96);

        for t in [8usize, 16, 32, 40] {
            let mut g = Graph::new();
            let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
            let xv = ctx.graph.input(rand_tensor(&[2, 128, t], 9 + t as u64));
            let (y, costs) = mstcn_forward(&mut ctx, xv, &cfg).unwrap();
            assert_eq!(ctx.graph.shape(y), &[2, 96, t / 4], "input length {t}");
            assert_eq!(costs.len(), 2);
            for c in &costs {
                assert!(ctx.graph.value(c.cu).item() >= 0.0);
                assert!(ctx.graph.value(c.cp).item() >= 0.0);
            }
        }
    }

    #[test]
    fn forward_rejects_short_sequences() {
        let cfg = MstcnConfig::default();
        let mut store = ParamStore::<f64>::new();
        init_mstcn(&mut store, &crate::rng::Rng::new(10), &cfg).unwrap();
        let mut g = Graph::new();
        let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
        let xv = ctx.graph.input(rand_tensor(&[1, 128, 7], 11));
        match mstcn_forward(&mut ctx, xv, &cfg) {
            Err(Error::SequenceTooShort { op, len, min }) => {
                assert_eq!((op, len, min), ("mstcn_forward", 7, 8));
            }
            other => panic!("expected sequence-too-short, got {other:?}"),
        }
    }

    #[test]
    fn lift_with_zero_weights_is_even_subsample() {
        let mut store = ParamStore::<f64>::new();
        store.add_zeros("lift.predict.weight", &[4, 3], true).unwrap();
        store.add_zeros("lift.update.weight", &[4, 3], true).unwrap();

        for t in [2usize, 4, 6, 10] {
            let x = rand_tensor(&[2, 4, t], 12 + t as u64);
            let mut g = Graph::new();
            let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
            let xv = ctx.graph.input(x.clone());
            let (a, costs) = tlp(&mut ctx, xv, "lift").unwrap();
            let a = ctx.graph.value(a);
            assert_eq!(a.shape(), &[2, 4, t / 2]);
            for bi in 0..2 {
                for ch in 0..4 {
                    for ti in 0..t / 2 {
                        assert_eq!(a.at(&[bi, ch, ti]), x.at(&[bi, ch, 2 * ti]));
                    }
                }
            }
            // With P = 0 the detail is the odd subsequence itself.
            let mut want_cu = 0.0;
            let mut n = 0.0;
            for bi in 0..2 {
                for ch in 0..4 {
                    for ti in 0..t / 2 {
                        want_cu += x.at(&[bi, ch, 2 * ti + 1]).powi(2);
                        n += 1.0;
                    }
                }
            }
            let cu = ctx.graph.value(costs.cu).item();
            assert!((cu - want_cu / n).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_on_constant_input_has_zero_peakiness() {
        let mut store = ParamStore::<f64>::new();
        store.add_zeros("lift.predict.weight", &[2, 3], true).unwrap();
        store.add_zeros("lift.update.weight", &[2, 3], true).unwrap();

        let x = Tensor::full(&[1, 2, 8], 0.5_f64);
        let mut g = Graph::new();
        let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
        let xv = ctx.graph.input(x);
        let (a, costs) = tlp(&mut ctx, xv, "lift").unwrap();
        let a = ctx.graph.value(a).clone();
        assert!(a.data().iter().all(|&v| v == 0.5));
        // D is the constant itself (prediction is zero), so cu = c².
        assert_eq!(ctx.graph.value(costs.cu).item(), 0.25);
        assert_eq!(ctx.graph.value(costs.cp).item(), 0.0);
    }

    #[test]
    fn lift_pads_odd_lengths_by_edge_replication() {
        let mut store = ParamStore::<f64>::new();
        store.add_zeros("lift.predict.weight", &[1, 3], true).unwrap();
        store.add_zeros("lift.update.weight", &[1, 3], true).unwrap();

        let x = Tensor::new(&[1, 1, 7], (0..7).map(|v| v as f64 * 10.0).collect()).unwrap();
        let mut g = Graph::new();
        let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
        let xv = ctx.graph.input(x);
        let (a, _) = tlp(&mut ctx, xv, "lift").unwrap();
        let a = ctx.graph.value(a);
        // Padded sequence [x0 x0 x1 … x6]; even positions are x0 x1 x3 x5.
        assert_eq!(a.shape(), &[1, 1, 4]);
        assert_eq!(
            (0..4).map(|t| a.at(&[0, 0, t])).collect::<Vec<_>>(),
            vec![0.0, 10.0, 30.0, 50.0]
        );
    }

    #[test]
    fn lift_gradchecks_through_costs() {
        let mut store = ParamStore::<f64>::new();
        store.add_zeros("lift.predict.weight", &[3, 3], true).unwrap();
        store.add_zeros("lift.update.weight", &[3, 3], true).unwrap();
        randomize(&mut store, "lift.", 0.5, 13);

        let err = gradcheck(
            |g, v| {
                let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                let (a, costs) = tlp(&mut ctx, v, "lift")?;
                let am = ctx.graph.mean_all(a);
                let s = ctx.graph.add(am, costs.cu)?;
                ctx.graph.add(s, costs.cp)
            },
            &rand_tensor(&[1, 3, 6], 14),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "lift grad err {err}");
    }

    #[test]
    fn forward_gradchecks_on_toy_dims() {
        let cfg = MstcnConfig {
            in_dim: 8,
            ms_dim: 6,
            ..MstcnConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        init_mstcn(&mut store, &crate::rng::Rng::new(15), &cfg).unwrap();
        randomize(&mut store, "temporal.mstcn.stage0.tlp", 0.3, 16);
        randomize(&mut store, "temporal.mstcn.stage1.tlp", 0.3, 17);

        let err = gradcheck(
            |g, v| {
                let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                let (y, costs) = mstcn_forward(&mut ctx, v, &cfg)?;
                let mut s = ctx.graph.mean_all(y);
                for c in costs {
                    s = ctx.graph.add(s, c.cu)?;
                    s = ctx.graph.add(s, c.cp)?;
                }
                Ok(s)
            },
            &rand_tensor(&[1, 8, 8], 18),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "mstcn grad err {err}");
    }

    #[test]
    fn pointwise_ablation_still_typechecks() {
        let cfg = MstcnConfig {
            dilated_as_pointwise: true,
            ..MstcnConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        init_mstcn(&mut store, &crate::rng::Rng::new(19), &cfg).unwrap();
        let mut g = Graph::new();
        let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
        let xv = ctx.graph.input(rand_tensor(&[1, 128, 8], 20));
        let (y, _) = mstcn_forward(&mut ctx, xv, &cfg).unwrap();
        assert_eq!(ctx.graph.shape(y), &[1, 96, 2]);
    }

    #[test]
    fn zero_parameter_bilstm_outputs_exactly_zero() {
        let cfg = BilstmConfig { hidden: 4, layers: 1 };
        let mut store = ParamStore::<f64>::new();
        init_bilstm(&mut store, &crate::rng::Rng::new(21), 3, &cfg).unwrap();
        randomize(&mut store, "temporal.bilstm.", 0.0, 22);

        let mut g = Graph::new();
        let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
        let xv = ctx.graph.input(rand_tensor(&[2, 5, 3], 23));
        let y = bilstm_forward(&mut ctx, xv, &cfg).unwrap();
        let y = ctx.graph.value(y);
        assert_eq!(y.shape(), &[2, 5, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_direction_equals_forward_on_reversed_input() {
        let cfg = BilstmConfig { hidden: 5, layers: 1 };
        let mut store = ParamStore::<f64>::new();
        init_bilstm(&mut store, &crate::rng::Rng::new(24), 3, &cfg).unwrap();
        randomize(&mut store, "temporal.bilstm.", 0.5, 25);

        let x = rand_tensor(&[2, 6, 3], 26);
        let mut rev = Tensor::<f64>::zeros(x.shape());
        for bi in 0..2 {
            for t in 0..6 {
                for f in 0..3 {
                    rev.set(&[bi, t, f], x.at(&[bi, 5 - t, f]));
                }
            }
        }

        let run = |input: &Tensor<f64>, reverse: bool| {
            let mut g = Graph::new();
            let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
            let xv = ctx.graph.input(input.clone());
            let y =
                lstm_direction(&mut ctx, xv, "temporal.bilstm.l0.bwd", cfg.hidden, reverse)
                    .unwrap();
            ctx.graph.value(y).clone()
        };
        let direct = run(&x, true);
        let via_reversal = run(&rev, false);
        for bi in 0..2 {
            for t in 0..6 {
                for hch in 0..5 {
                    assert_eq!(
                        direct.at(&[bi, t, hch]),
                        via_reversal.at(&[bi, 5 - t, hch]),
                        "b {bi} t {t} h {hch}"
                    );
                }
            }
        }
    }

    #[test]
    fn bilstm_gradchecks_on_toy_dims() {
        let cfg = BilstmConfig { hidden: 4, layers: 1 };
        let mut store = ParamStore::<f64>::new();
        init_bilstm(&mut store, &crate::rng::Rng::new(27), 3, &cfg).unwrap();
        randomize(&mut store, "temporal.bilstm.", 0.4, 28);

        let err = gradcheck(
            |g, v| {
                let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                bilstm_forward(&mut ctx, v, &cfg)
            },
            &rand_tensor(&[1, 4, 3], 29),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "bilstm grad err {err}");
    }

    #[test]
    fn stacked_layers_change_width_correctly() {
        let cfg = BilstmConfig { hidden: 3, layers: 2 };
        let mut store = ParamStore::<f64>::new();
        init_bilstm(&mut store, &crate::rng::Rng::new(30), 5, &cfg).unwrap();
        let mut g = Graph::new();
        let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
        let xv = ctx.graph.input(rand_tensor(&[1, 4, 5], 31));
        let y = bilstm_forward(&mut ctx, xv, &cfg).unwrap();
        assert_eq!(ctx.graph.shape(y), &[1, 4, 6]);
    }

    #[test]
    fn classifier_constant_map_shape_and_gradient() {
        let mut store = ParamStore::<f64>::new();
        init_classifier(&mut store, &crate::rng::Rng::new(32), "temporal.head_seq", 192, 6)
            .unwrap();
        // Zero weights, patterned bias: every timestep outputs the bias.
        let zero = Tensor::zeros(&[192, 7]);
        store.set_value("temporal.head_seq.weight", zero).unwrap();
        let bias = Tensor::new(&[7], (0..7).map(|v| v as f64 * 0.3).collect()).unwrap();
        store.set_value("temporal.head_seq.bias", bias.clone()).unwrap();

        let mut g = Graph::new();
        let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
        let xv = ctx.graph.input(rand_tensor(&[2, 4, 192], 33));
        let y = classifier(&mut ctx, xv, "temporal.head_seq").unwrap();
        let y = ctx.graph.value(y).clone();
        assert_eq!(y.shape(), &[2, 4, 7]);
        for bi in 0..2 {
            for t in 0..4 {
                for v in 0..7 {
                    assert_eq!(y.at(&[bi, t, v]), bias.at(&[v]));
                }
            }
        }

        let mut store2 = ParamStore::<f64>::new();
        init_classifier(&mut store2, &crate::rng::Rng::new(34), "temporal.head_conv", 6, 3)
            .unwrap();
        let err = gradcheck(
            |g, v| {
                let mut ctx = FwdCtx::for_gradcheck(g, &store2, Mode::Eval);
                classifier(&mut ctx, v, "temporal.head_conv")
            },
            &rand_tensor(&[1, 3, 6], 35),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-7, "classifier grad err {err}");
    }

    #[test]
    fn two_heads_have_independent_parameters() {
        let mut store = ParamStore::<f64>::new();
        init_classifier(&mut store, &crate::rng::Rng::new(36), "temporal.head_conv", 96, 6)
            .unwrap();
        init_classifier(&mut store, &crate::rng::Rng::new(36), "temporal.head_seq", 192, 6)
            .unwrap();
        assert!(store.contains("temporal.head_conv.weight"));
        assert!(store.contains("temporal.head_seq.weight"));
        assert_eq!(store.value("temporal.head_conv.weight").unwrap().shape(), &[96, 7]);
        assert_eq!(store.value("temporal.head_seq.weight").unwrap().shape(), &[192, 7]);
    }
}
