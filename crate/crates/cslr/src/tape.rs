//! Residual temporal adapter for the windowed-attention encoder.
//!
//! The encoder's attention blocks are strictly per-frame; everything the
//! model knows about time it learns here. An adapter takes the stage
//! activation `(B, T, Hs, Ws, C)`, squeezes it into a low-dimensional
//! latent space, adds a learnable per-frame positional embedding, mixes
//! the volume with two parallel branches — a pointwise channel mixer and
//! a local spatio-temporal convolution stack — and projects back up to
//! `C` channels. The up-projection starts at exactly zero, so a freshly
//! initialized adapter is invisible: the caller adds the adapter output
//! residually, and at initialization that residual is identically zero.
//!
//! Branches:
//! * `cmix`: 1×1×1 volumetric convolution + batchnorm — recombines
//!   latent channels per voxel, no spatial or temporal reach.
//! * `lst`: two depthwise 3×3×3 convolutions, each conv → GELU →
//!   batchnorm — local reach of ±2 frames/±2 tokens per block. Two
//!   blocks run in series, so one adapter sees ±4 frames in eval mode.

use crate::error::{Error, Result};
use crate::nn::{
    self, batch_norm, init_batch_norm, init_layer_norm, init_linear_zero, layer_norm, linear,
    FwdCtx, BN_EPS, INIT_STD,
};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::graph::Var;
use crate::tensor::Element;

/// Configuration of one adapter instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TapeConfig {
    /// Channel count of the host stage.
    pub channels: usize,
    /// Down-projection ratio; the latent width is `channels / down_ratio`.
    pub down_ratio: usize,
    /// Capacity of the positional-embedding table.
    pub t_max: usize,
}

impl TapeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.down_ratio == 0 || self.channels == 0 {
            return Err(Error::Config(
                "adapter channels and down_ratio must be positive".into(),
            ));
        }
        if self.channels % self.down_ratio != 0 {
            return Err(Error::Config(format!(
                "adapter channels {} not divisible by down_ratio {}",
                self.channels, self.down_ratio
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Config("adapter t_max must be positive".into()));
        }
        Ok(())
    }

    pub fn latent(&self) -> usize {
        self.channels / self.down_ratio
    }
}

/// Registers every parameter of one adapter under `prefix`.
pub fn init_tape<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    prefix: &str,
    cfg: &TapeConfig,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.latent();
    init_layer_norm(store, &format!("{prefix}.norm_in"), cfg.channels)?;
    nn::init_linear(store, root, &format!("{prefix}.down"), cfg.channels, d)?;
    store.add_trunc_normal(&format!("{prefix}.posembed"), &[cfg.t_max, d], INIT_STD, root)?;
    // Convolutions feeding a batchnorm carry no bias; the norm's shift
    // plays that role.
    store.add_trunc_normal(
        &format!("{prefix}.cmix.conv.weight"),
        &[d, d, 1, 1, 1],
        INIT_STD,
        root,
    )?;
    init_batch_norm(store, &format!("{prefix}.cmix.bn"), d)?;
    for block in ["lst1", "lst2"] {
        for conv in ["conv1", "conv2"] {
            store.add_trunc_normal(
                &format!("{prefix}.{block}.{conv}.weight"),
                &[d, 3, 3, 3],
                INIT_STD,
                root,
            )?;
        }
        init_batch_norm(store, &format!("{prefix}.{block}.bn1"), d)?;
        init_batch_norm(store, &format!("{prefix}.{block}.bn2"), d)?;
    }
    init_layer_norm(store, &format!("{prefix}.norm_out"), d)?;
    init_linear_zero(store, &format!("{prefix}.up"), d, cfg.channels)?;
    Ok(())
}

/// Pointwise channel-mixing branch over the volumetric layout
/// `(B, d, T, Hs, Ws)`: 1×1×1 convolution then batchnorm.
pub fn cmix<E: Element>(ctx: &mut FwdCtx<E>, z: Var, prefix: &str) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.cmix.conv.weight"))?;
    let y = ctx.graph.conv3d(z, w, (0, 0, 0))?;
    batch_norm(ctx, y, &format!("{prefix}.cmix.bn"), 1, BN_EPS)
}

/// Local spatio-temporal branch: two depthwise 3×3×3 convolutions, each
/// conv → GELU → batchnorm. Preserves extents (padding 1 everywhere).
pub fn lst<E: Element>(ctx: &mut FwdCtx<E>, z: Var, prefix: &str) -> Result<Var> {
    let mut h = z;
    for (conv, bn) in [("conv1", "bn1"), ("conv2", "bn2")] {
        let w = ctx.param(&format!("{prefix}.{conv}.weight"))?;
        h = ctx.graph.dwconv3d(h, w, (1, 1, 1))?;
        h = ctx.graph.gelu(h);
        h = batch_norm(ctx, h, &format!("{prefix}.{bn}"), 1, BN_EPS)?;
    }
    Ok(h)
}

/// Runs one adapter on a stage activation `(B, T, Hs, Ws, C)` and
/// returns the same shape. The caller adds the result to its input; at
/// initialization the result is exactly zero.
pub fn tape_forward<E: Element>(
    ctx: &mut FwdCtx<E>,
    x: Var,
    prefix: &str,
    cfg: &TapeConfig,
) -> Result<Var> {
    let xs = ctx.graph.shape(x).to_vec();
    if xs.len() != 5 {
        return Err(Error::BadShape {
            op: "tape_forward",
            shape: xs,
            detail: "expected (batch, frames, grid-h, grid-w, channels)".into(),
        });
    }
    let (b, t, hs, ws, c) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    if c != cfg.channels {
        return Err(Error::Config(format!(
            "adapter configured for {} channels, input has {c}",
            cfg.channels
        )));
    }
    if t > cfg.t_max {
        return Err(Error::Capacity {
            frames: t,
            t_max: cfg.t_max,
        });
    }
    let d = cfg.latent();

    let z = layer_norm(ctx, x, &format!("{prefix}.norm_in"))?;
    let z = linear(ctx, z, &format!("{prefix}.down"))?;

    let table = ctx.param(&format!("{prefix}.posembed"))?;
    let rows: Vec<usize> = (0..t).collect();
    let pos = ctx.graph.index_select(table, 0, &rows)?;
    let pos = ctx.graph.reshape(pos, &[t, 1, 1, d])?;
    let z = ctx.graph.add_b(z, pos)?;

    // Volumetric layout for the convolution branches.
    let z = ctx.graph.permute(z, &[0, 4, 1, 2, 3])?;
    let a = cmix(ctx, z, prefix)?;
    let b_branch = lst(ctx, z, &format!("{prefix}.lst1"))?;
    let fused = ctx.graph.add(a, b_branch)?;
    let g = lst(ctx, fused, &format!("{prefix}.lst2"))?;
    let h = ctx.graph.add(fused, g)?;
    let h = ctx.graph.gelu(h);

    let h = ctx.graph.permute(h, &[0, 2, 3, 4, 1])?;
    let h = layer_norm(ctx, h, &format!("{prefix}.norm_out"))?;
    let out = linear(ctx, h, &format!("{prefix}.up"))?;
    debug_assert_eq!(ctx.graph.shape(out), &[b, t, hs, ws, c]);
    Ok(out)
}

/// Scalar count of an adapter's parameters (used by the lightweightness
/// check against its host stage).
pub fn tape_param_count<E: Element>(store: &ParamStore<E>, prefix: &str) -> usize {
    let dotted = format!("{prefix}.");
    store
        .iter()
        .filter(|p| p.name.starts_with(&dotted))
        .map(|p| p.value.numel())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::gradcheck::{gradcheck, DEFAULT_EPS};
    use crate::tensor::graph::Graph;
    use crate::tensor::Tensor;

    fn cfg(c: usize, r: usize) -> TapeConfig {
        TapeConfig {
            channels: c,
            down_ratio: r,
            t_max: 16,
        }
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed).derive("tape.test");
        Tensor::from_fn(shape, |_| 2.0 * rng.next_f64() - 1.0)
    }

    /// Gives the adapter a visible output by randomizing the zero-init
    /// up-projection (and nothing else).
    fn randomize_up(store: &mut ParamStore<f64>, prefix: &str, seed: u64) {
        let mut rng = Rng::new(seed).derive("tape.test.up");
        for name in [format!("{prefix}.up.weight"), format!("{prefix}.up.bias")] {
            let shape = store.value(&name).unwrap().shape().to_vec();
            let t = Tensor::from_fn(&shape, |_| 0.5 * (2.0 * rng.next_f64() - 1.0));
            store.set_value(&name, t).unwrap();
        }
    }

    fn forward(
        store: &ParamStore<f64>,
        x: &Tensor<f64>,
        c: &TapeConfig,
        mode: Mode,
    ) -> Tensor<f64> {
        let mut g = Graph::new();
        let mut ctx = FwdCtx::new(&mut g, store, mode);
        let xv = ctx.graph.input(x.clone());
        let y = tape_forward(&mut ctx, xv, "tape", c).unwrap();
        ctx.graph.value(y).clone()
    }

    #[test]
    fn zero_initialized_adapter_outputs_exactly_zero() {
        let c = cfg(16, 4);
        let mut store = ParamStore::<f64>::new();
        init_tape(&mut store, &Rng::new(5), "tape", &c).unwrap();
        let x = rand_input(&[2, 6, 4, 4, 16], 1);
        for mode in [Mode::Train, Mode::Eval] {
            let y = forward(&store, &x, &c, mode);
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shape_preserved_for_all_legal_configs() {
        for c in [8usize, 16, 32] {
            for r in [2usize, 4] {
                let tc = cfg(c, r);
                let mut store = ParamStore::<f64>::new();
                init_tape(&mut store, &Rng::new(7), "tape", &tc).unwrap();
                randomize_up(&mut store, "tape", 8);
                let x = rand_input(&[1, 3, 2, 2, c], 9);
                let y = forward(&store, &x, &tc, Mode::Train);
                assert_eq!(y.shape(), &[1, 3, 2, 2, c]);
                assert!(y.all_finite());
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_overlong_sequences() {
        let c = cfg(8, 2);
        let mut store = ParamStore::<f64>::new();
        init_tape(&mut store, &Rng::new(3), "tape", &c).unwrap();

        let mut g = Graph::new();
        let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
        let bad_c = ctx.graph.input(rand_input(&[1, 2, 2, 2, 16], 4));
        assert!(matches!(
            tape_forward(&mut ctx, bad_c, "tape", &c),
            Err(Error::Config(_))
        ));

        let long = ctx.graph.input(rand_input(&[1, 17, 2, 2, 8], 5));
        match tape_forward(&mut ctx, long, "tape", &c) {
            Err(Error::Capacity { frames, t_max }) => {
                assert_eq!((frames, t_max), (17, 16));
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn divisibility_is_enforced() {
        let bad = TapeConfig {
            channels: 10,
            down_ratio: 4,
            t_max: 8,
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn temporal_receptive_field_is_at_most_four_frames() {
        let c = cfg(8, 2);
        let mut store = ParamStore::<f64>::new();
        init_tape(&mut store, &Rng::new(11), "tape", &c).unwrap();
        randomize_up(&mut store, "tape", 12);

        let x = rand_input(&[1, 12, 2, 2, 8], 13);
        let base = forward(&store, &x, &c, Mode::Eval);

        // Perturb every value of frame 6; eval mode keeps batchnorm
        // statistics frozen so no global coupling leaks in.
        let mut bumped = x.clone();
        for h in 0..2 {
            for w in 0..2 {
                for ch in 0..8 {
                    let v = bumped.at(&[0, 6, h, w, ch]);
                    bumped.set(&[0, 6, h, w, ch], v + 0.31);
                }
            }
        }
        let moved = forward(&store, &bumped, &c, Mode::Eval);

        for t in 0..12usize {
            let mut delta: f64 = 0.0;
            for h in 0..2 {
                for w in 0..2 {
                    for ch in 0..8 {
                        delta = delta
                            .max((base.at(&[0, t, h, w, ch]) - moved.at(&[0, t, h, w, ch])).abs());
                    }
                }
            }
            if (t as i64 - 6).abs() <= 4 {
                if t == 6 {
                    assert!(delta > 0.0, "perturbed frame must change");
                }
            } else {
                assert_eq!(delta, 0.0, "frame {t} outside the ±4 reach changed");
            }
        }
    }

    #[test]
    fn frame_permutation_does_not_commute() {
        let c = cfg(8, 2);
        let mut store = ParamStore::<f64>::new();
        init_tape(&mut store, &Rng::new(21), "tape", &c).unwrap();
        randomize_up(&mut store, "tape", 22);

        let x = rand_input(&[1, 5, 2, 2, 8], 23);
        // Reverse the frame order.
        let perm: Vec<usize> = (0..5).rev().collect();
        let mut permuted = Tensor::<f64>::zeros(&[1, 5, 2, 2, 8]);
        for (t_new, &t_old) in perm.iter().enumerate() {
            for h in 0..2 {
                for w in 0..2 {
                    for ch in 0..8 {
                        permuted.set(&[0, t_new, h, w, ch], x.at(&[0, t_old, h, w, ch]));
                    }
                }
            }
        }

        let y_perm_in = forward(&store, &permuted, &c, Mode::Eval);
        let y = forward(&store, &x, &c, Mode::Eval);
        let mut perm_of_y = Tensor::<f64>::zeros(&[1, 5, 2, 2, 8]);
        for (t_new, &t_old) in perm.iter().enumerate() {
            for h in 0..2 {
                for w in 0..2 {
                    for ch in 0..8 {
                        perm_of_y.set(&[0, t_new, h, w, ch], y.at(&[0, t_old, h, w, ch]));
                    }
                }
            }
        }
        assert!(
            y_perm_in.max_abs_diff(&perm_of_y) > 1e-6,
            "adapter unexpectedly commutes with frame permutation"
        );
    }

    #[test]
    fn cmix_is_pointwise_and_gradchecks() {
        let c = cfg(8, 2);
        let mut store = ParamStore::<f64>::new();
        init_tape(&mut store, &Rng::new(31), "tape", &c).unwrap();

        // Locality: bump one voxel, watch only that voxel move (eval mode).
        let z = rand_input(&[1, 4, 3, 2, 2], 32);
        let run = |input: &Tensor<f64>| {
            let mut g = Graph::new();
            let mut ctx = FwdCtx::new(&mut g, &store, Mode::Eval);
            let zv = ctx.graph.input(input.clone());
            let y = cmix(&mut ctx, zv, "tape").unwrap();
            ctx.graph.value(y).clone()
        };
        let base = run(&z);
        let mut bumped = z.clone();
        for ch in 0..4 {
            let v = bumped.at(&[0, ch, 1, 1, 0]);
            bumped.set(&[0, ch, 1, 1, 0], v + 0.5);
        }
        let moved = run(&bumped);
        for t in 0..3 {
            for h in 0..2 {
                for w in 0..2 {
                    let changed = (0..4).any(|ch| {
                        base.at(&[0, ch, t, h, w]) != moved.at(&[0, ch, t, h, w])
                    });
                    assert_eq!(changed, (t, h, w) == (1, 1, 0));
                }
            }
        }

        let err = gradcheck(
            |g, v| {
                let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Train);
                cmix(&mut ctx, v, "tape")
            },
            &rand_input(&[1, 4, 3, 2, 2], 33),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "cmix grad err {err}");
    }

    #[test]
    fn lst_gradchecks() {
        let c = cfg(8, 2);
        let mut store = ParamStore::<f64>::new();
        init_tape(&mut store, &Rng::new(41), "tape", &c).unwrap();
        let err = gradcheck(
            |g, v| {
                let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Train);
                lst(&mut ctx, v, "tape.lst1")
            },
            &rand_input(&[1, 4, 3, 2, 2], 42),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "lst grad err {err}");
    }

    #[test]
    fn tape_forward_gradchecks_end_to_end() {
        let c = cfg(8, 4);
        let mut store = ParamStore::<f64>::new();
        init_tape(&mut store, &Rng::new(51), "tape", &c).unwrap();
        randomize_up(&mut store, "tape", 52);
        let err = gradcheck(
            |g, v| {
                let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Train);
                tape_forward(&mut ctx, v, "tape", &c)
            },
            &rand_input(&[1, 3, 2, 2, 8], 53),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "tape grad err {err}");
    }
}
