//! Finite-difference verification suites behind the `gradcheck`
//! subcommand.
//!
//! Every differentiable component of the network — attention blocks, the
//! temporal adapters and their two internal branches, the multi-scale
//! convolutions, the lifting downsampler with both of its cost terms,
//! the recurrent encoder, both classifier heads, the distillation term,
//! and the composite objective — is rebuilt here on toy shapes in `f64`
//! and its analytic gradient compared against a numeric one. A breach
//! aborts with the offending case named; the caller renders one report
//! per module.

use crate::backbone::{
    init_backbone, init_patch_embed, init_patch_merging, init_swin_block, patch_embed,
    patch_merging, stem_stage, window_attention, BackboneConfig,
};
use crate::error::{Error, Result};
use crate::nn::{FwdCtx, Mode};
use crate::objective::{composite_loss, distill_loss, LossWeights};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{cmix, init_tape, lst, tape_forward, TapeConfig};
use crate::temporal::{
    bilstm_forward, classifier, init_bilstm, init_classifier, init_mstcn, mstcn_branch,
    mstcn_forward, tlp, BilstmConfig, MstcnConfig,
};
use crate::tensor::gradcheck::{gradcheck, DEFAULT_EPS};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;
use serde::Serialize;

/// Verification outcome for one module: every case ran and stayed under
/// its threshold.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub module: String,
    pub cases: usize,
    pub max_rel_err: f64,
}

/// Module selectors accepted by [`verify`], besides `"all"`.
pub const MODULES: &[&str] = &[
    "tensor", "backbone", "tape", "mstcn", "tlp", "bilstm", "ctc", "objective",
];

/// One named check: builds its own weights, runs a finite-difference
/// comparison, and returns the worst relative error it saw.
struct Case {
    name: &'static str,
    threshold: f64,
    run: fn() -> Result<f64>,
}

impl Case {
    const fn new(name: &'static str, threshold: f64, run: fn() -> Result<f64>) -> Case {
        Case {
            name,
            threshold,
            run,
        }
    }
}

/// Runs the selected module's suite (or every suite for `"all"`),
/// returning one report per module. The first case over its threshold
/// aborts the run with a [`Error::Verification`] naming it.
pub fn verify(selector: &str) -> Result<Vec<VerifyReport>> {
    let selected: Vec<&str> = if selector == "all" {
        MODULES.to_vec()
    } else if MODULES.contains(&selector) {
        vec![selector]
    } else {
        return Err(Error::Config(format!(
            "unknown gradcheck selector {selector:?}; expected one of {}, all",
            MODULES.join(", ")
        )));
    };
    selected.iter().map(|m| run_module(m)).collect()
}

fn run_module(module: &str) -> Result<VerifyReport> {
    let cases = match module {
        "tensor" => tensor_cases(),
        "backbone" => backbone_cases(),
        "tape" => tape_cases(),
        "mstcn" => mstcn_cases(),
        "tlp" => tlp_cases(),
        "bilstm" => bilstm_cases(),
        "ctc" => ctc_cases(),
        "objective" => objective_cases(),
        other => {
            return Err(Error::Config(format!(
                "unknown gradcheck module {other:?}"
            )))
        }
    };
    let mut max_rel_err: f64 = 0.0;
    for case in &cases {
        let err = (case.run)()?;
        if !(err <= case.threshold) {
            return Err(Error::Verification {
                module: module.to_string(),
                case: case.name.to_string(),
                rel_err: err,
            });
        }
        max_rel_err = max_rel_err.max(err);
    }
    Ok(VerifyReport {
        module: module.to_string(),
        cases: cases.len(),
        max_rel_err,
    })
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed).derive("verify");
    Tensor::from_fn(shape, |_| rng.next_f64() - 0.5)
}

/// Replaces zero-initialized parameters with small random values so the
/// paths through them actually carry gradient during the check.
fn randomize(store: &mut ParamStore<f64>, names: &[&str], seed: u64) {
    let mut rng = Rng::new(seed).derive("randomize");
    for name in names {
        let shape = store.value(name).expect("known parameter").shape().to_vec();
        let t = Tensor::from_fn(&shape, |_| 0.4 * (rng.next_f64() - 0.5));
        store.set_value(name, t).expect("same shape");
    }
}

fn empty_store() -> ParamStore<f64> {
    ParamStore::new()
}

// ---------------------------------------------------------------------
// tensor: composite chains over the core differentiable operations.
// Per-op property tests live with the operations themselves; these
// chains verify that gradients survive composition.
// ---------------------------------------------------------------------

fn tensor_cases() -> Vec<Case> {
    vec![
        Case::new("elementwise-chain", 1e-6, || {
            gradcheck(
                |g, v| {
                    let a = g.gelu(v);
                    let b = g.tanh(a);
                    let c = g.sigmoid(b);
                    let d = g.mul(c, v)?;
                    Ok(g.add_scalar(d, 0.3))
                },
                &rand_tensor(&[2, 3, 4], 11),
                DEFAULT_EPS,
            )
        }),
        Case::new("matmul-softmax", 1e-6, || {
            gradcheck(
                |g, v| {
                    let w = g.constant(rand_tensor(&[4, 5], 12));
                    let y = g.matmul(v, w)?;
                    g.softmax(y, 1)
                },
                &rand_tensor(&[3, 4], 13),
                DEFAULT_EPS,
            )
        }),
        Case::new("reduce-broadcast", 1e-6, || {
            gradcheck(
                |g, v| {
                    let m = g.mean_axes(v, &[2], true)?;
                    let mb = g.broadcast(m, &[2, 3, 4])?;
                    let d = g.sub(v, mb)?;
                    let sq = g.mul(d, d)?;
                    g.sum_axes(sq, &[0, 2], false)
                },
                &rand_tensor(&[2, 3, 4], 14),
                DEFAULT_EPS,
            )
        }),
        Case::new("reshape-permute-concat", 1e-6, || {
            gradcheck(
                |g, v| {
                    let p = g.permute(v, &[2, 0, 1])?;
                    let r = g.reshape(p, &[4, 6])?;
                    let extra = g.constant(rand_tensor(&[2, 6], 15));
                    let c = g.concat(&[r, extra], 0)?;
                    g.index_select(c, 0, &[1, 5, 2])
                },
                &rand_tensor(&[2, 3, 4], 16),
                DEFAULT_EPS,
            )
        }),
        Case::new("pool-logsoftmax", 1e-6, || {
            gradcheck(
                |g, v| {
                    let p = g.maxpool1d(v, 3, 1, 1)?;
                    let r = g.reshape(p, &[3, 8])?;
                    g.log_softmax(r, 1)
                },
                &rand_tensor(&[1, 3, 8], 17),
                DEFAULT_EPS,
            )
        }),
    ]
}

// ---------------------------------------------------------------------
// backbone: attention blocks, patch handling, one adapted stage.
// ---------------------------------------------------------------------

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        patch_size: 2,
        stage_depths: vec![2],
        stage_dims: vec![16],
        stage_heads: vec![2],
        window_size: 4,
        t_max: 8,
        ..BackboneConfig::default()
    }
}

fn backbone_cases() -> Vec<Case> {
    vec![
        Case::new("window-attention", 1e-5, || {
            let mut store = empty_store();
            init_swin_block(&mut store, &Rng::new(21), "blk", 16, 2, 2)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    window_attention(&mut ctx, v, "blk", 2, 2, 0)
                },
                &rand_tensor(&[1, 2, 4, 4, 16], 22),
                DEFAULT_EPS,
            )
        }),
        Case::new("window-attention-shifted", 1e-5, || {
            let mut store = empty_store();
            init_swin_block(&mut store, &Rng::new(23), "blk", 16, 2, 2)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    window_attention(&mut ctx, v, "blk", 2, 2, 1)
                },
                &rand_tensor(&[1, 2, 4, 4, 16], 24),
                DEFAULT_EPS,
            )
        }),
        Case::new("patch-embed", 1e-6, || {
            let cfg = small_backbone();
            let mut store = empty_store();
            init_patch_embed(&mut store, &Rng::new(25), &cfg)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    patch_embed(&mut ctx, v, &cfg)
                },
                &rand_tensor(&[1, 2, 3, 16, 16], 26),
                DEFAULT_EPS,
            )
        }),
        Case::new("patch-merging", 1e-6, || {
            let mut store = empty_store();
            init_patch_merging(&mut store, &Rng::new(27), 0, 8)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    patch_merging(&mut ctx, v, 0)
                },
                &rand_tensor(&[1, 1, 4, 4, 8], 28),
                DEFAULT_EPS,
            )
        }),
        Case::new("stage-with-adapter", 1e-5, || {
            let cfg = small_backbone();
            let mut store = empty_store();
            init_backbone(&mut store, &Rng::new(29), &cfg)?;
            // The adapter's up-projection starts at zero; give it weight
            // so its whole path carries gradient.
            randomize(
                &mut store,
                &["backbone.stage0.tape.up.weight", "backbone.stage0.tape.up.bias"],
                30,
            );
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Train);
                    stem_stage(&mut ctx, v, &cfg, 0)
                },
                &rand_tensor(&[1, 3, 8, 8, 16], 31),
                DEFAULT_EPS,
            )
        }),
    ]
}

// ---------------------------------------------------------------------
// tape: the channel-mixing branch, the local spatio-temporal branch,
// and the full adapter.
// ---------------------------------------------------------------------

fn tape_cases() -> Vec<Case> {
    vec![
        Case::new("channel-mix-branch", 1e-6, || {
            let cfg = TapeConfig {
                channels: 8,
                down_ratio: 2,
                t_max: 8,
            };
            let mut store = empty_store();
            init_tape(&mut store, &Rng::new(41), "tape", &cfg)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Train);
                    cmix(&mut ctx, v, "tape")
                },
                &rand_tensor(&[1, 4, 3, 2, 2], 42),
                DEFAULT_EPS,
            )
        }),
        Case::new("local-spatiotemporal-branch", 1e-5, || {
            let cfg = TapeConfig {
                channels: 8,
                down_ratio: 2,
                t_max: 8,
            };
            let mut store = empty_store();
            init_tape(&mut store, &Rng::new(43), "tape", &cfg)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Train);
                    lst(&mut ctx, v, "tape.lst1")
                },
                &rand_tensor(&[1, 4, 3, 2, 2], 44),
                DEFAULT_EPS,
            )
        }),
        Case::new("adapter-end-to-end", 1e-5, || {
            let cfg = TapeConfig {
                channels: 8,
                down_ratio: 4,
                t_max: 8,
            };
            let mut store = empty_store();
            init_tape(&mut store, &Rng::new(45), "tape", &cfg)?;
            randomize(&mut store, &["tape.up.weight", "tape.up.bias"], 46);
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Train);
                    tape_forward(&mut ctx, v, "tape", &cfg)
                },
                &rand_tensor(&[1, 3, 2, 2, 8], 47),
                DEFAULT_EPS,
            )
        }),
    ]
}

// ---------------------------------------------------------------------
// mstcn: each branch kind plus the full two-stage front.
// ---------------------------------------------------------------------

fn small_mstcn() -> MstcnConfig {
    MstcnConfig {
        in_dim: 6,
        ms_dim: 8,
        n_dilations: 2,
        dilations: vec![1, 2],
        ..MstcnConfig::default()
    }
}

fn randomize_tlp(store: &mut ParamStore<f64>, cfg: &MstcnConfig, seed: u64) {
    let names: Vec<String> = (0..cfg.stage_count)
        .flat_map(|s| {
            [
                format!("temporal.mstcn.stage{s}.tlp.predict.weight"),
                format!("temporal.mstcn.stage{s}.tlp.update.weight"),
            ]
        })
        .collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    randomize(store, &refs, seed);
}

fn mstcn_cases() -> Vec<Case> {
    vec![
        Case::new("dilated-branch", 1e-6, || {
            let cfg = small_mstcn();
            let mut store = empty_store();
            init_mstcn(&mut store, &Rng::new(51), &cfg)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    mstcn_branch(&mut ctx, v, &cfg, 0, 1)
                },
                &rand_tensor(&[1, 8, 6], 52),
                DEFAULT_EPS,
            )
        }),
        Case::new("pointwise-branch", 1e-6, || {
            let cfg = small_mstcn();
            let mut store = empty_store();
            init_mstcn(&mut store, &Rng::new(53), &cfg)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    mstcn_branch(&mut ctx, v, &cfg, 0, 2)
                },
                &rand_tensor(&[1, 8, 6], 54),
                DEFAULT_EPS,
            )
        }),
        Case::new("pooled-branch", 1e-5, || {
            let cfg = small_mstcn();
            let mut store = empty_store();
            init_mstcn(&mut store, &Rng::new(55), &cfg)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    mstcn_branch(&mut ctx, v, &cfg, 0, 3)
                },
                &rand_tensor(&[1, 8, 6], 56),
                DEFAULT_EPS,
            )
        }),
        Case::new("front-end-to-end-with-costs", 1e-5, || {
            let cfg = small_mstcn();
            let mut store = empty_store();
            init_mstcn(&mut store, &Rng::new(57), &cfg)?;
            randomize_tlp(&mut store, &cfg, 58);
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    let (feat, costs) = mstcn_forward(&mut ctx, v, &cfg)?;
                    // Fold features and every downsampling cost into one
                    // scalar so all paths are checked at once.
                    let mut total = ctx.graph.mean_all(feat);
                    for (i, c) in costs.iter().enumerate() {
                        let wu = ctx.graph.mul_scalar(c.cu, 0.9 / (i + 1) as f64);
                        let wp = ctx.graph.mul_scalar(c.cp, 0.7 / (i + 1) as f64);
                        total = ctx.graph.add(total, wu)?;
                        total = ctx.graph.add(total, wp)?;
                    }
                    Ok(total)
                },
                &rand_tensor(&[1, 6, 8], 59),
                DEFAULT_EPS,
            )
        }),
    ]
}

// ---------------------------------------------------------------------
// tlp: the lifting downsampler’s output and both of its cost terms.
// ---------------------------------------------------------------------

fn tlp_store(seed: u64) -> Result<(ParamStore<f64>, MstcnConfig)> {
    let cfg = small_mstcn();
    let mut store = empty_store();
    init_mstcn(&mut store, &Rng::new(seed), &cfg)?;
    randomize_tlp(&mut store, &cfg, seed + 1);
    Ok((store, cfg))
}

fn tlp_cases() -> Vec<Case> {
    vec![
        Case::new("lift-output", 1e-5, || {
            let (store, _) = tlp_store(61)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    let (y, _) = tlp(&mut ctx, v, "temporal.mstcn.stage0.tlp")?;
                    Ok(y)
                },
                &rand_tensor(&[1, 8, 6], 62),
                DEFAULT_EPS,
            )
        }),
        Case::new("lift-update-cost", 1e-5, || {
            let (store, _) = tlp_store(63)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    let (_, costs) = tlp(&mut ctx, v, "temporal.mstcn.stage0.tlp")?;
                    Ok(costs.cu)
                },
                &rand_tensor(&[1, 8, 6], 64),
                DEFAULT_EPS,
            )
        }),
        Case::new("lift-predict-cost", 1e-5, || {
            let (store, _) = tlp_store(65)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    let (_, costs) = tlp(&mut ctx, v, "temporal.mstcn.stage0.tlp")?;
                    Ok(costs.cp)
                },
                &rand_tensor(&[1, 8, 6], 66),
                DEFAULT_EPS,
            )
        }),
        Case::new("lift-odd-length", 1e-5, || {
            let (store, _) = tlp_store(67)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    let (y, costs) = tlp(&mut ctx, v, "temporal.mstcn.stage0.tlp")?;
                    let m = ctx.graph.mean_all(y);
                    let s = ctx.graph.add(costs.cu, costs.cp)?;
                    ctx.graph.add(m, s)
                },
                &rand_tensor(&[1, 8, 5], 68),
                DEFAULT_EPS,
            )
        }),
    ]
}

// ---------------------------------------------------------------------
// bilstm: bidirectional recurrence, single and stacked.
// ---------------------------------------------------------------------

fn bilstm_cases() -> Vec<Case> {
    vec![
        Case::new("single-layer", 1e-5, || {
            let cfg = BilstmConfig {
                hidden: 4,
                layers: 1,
            };
            let mut store = empty_store();
            init_bilstm(&mut store, &Rng::new(71), 3, &cfg)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    bilstm_forward(&mut ctx, v, &cfg)
                },
                &rand_tensor(&[1, 4, 3], 72),
                DEFAULT_EPS,
            )
        }),
        Case::new("stacked-layers", 1e-5, || {
            let cfg = BilstmConfig {
                hidden: 3,
                layers: 2,
            };
            let mut store = empty_store();
            init_bilstm(&mut store, &Rng::new(73), 4, &cfg)?;
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    bilstm_forward(&mut ctx, v, &cfg)
                },
                &rand_tensor(&[1, 3, 4], 74),
                DEFAULT_EPS,
            )
        }),
    ]
}

// ---------------------------------------------------------------------
// ctc: the alignment loss under feasibility edge cases.
// ---------------------------------------------------------------------

fn ctc_case(shape: [usize; 2], targets: &[usize], seed: u64) -> Result<f64> {
    let t = targets.to_vec();
    let blank = shape[1] - 1;
    gradcheck(
        move |g: &mut Graph<f64>, v: Var| {
            let lp = g.log_softmax(v, 1)?;
            g.ctc_loss(lp, &t, blank)
        },
        &rand_tensor(&shape, seed),
        DEFAULT_EPS,
    )
}

fn ctc_cases() -> Vec<Case> {
    vec![
        Case::new("loose-alignment", 1e-7, || ctc_case([6, 4], &[0, 2, 1], 81)),
        Case::new("repeated-labels", 1e-6, || ctc_case([7, 4], &[1, 1, 2], 82)),
        Case::new("minimal-length", 1e-6, || ctc_case([5, 4], &[0, 0, 1], 83)),
        Case::new("single-label", 1e-7, || ctc_case([4, 3], &[1], 84)),
    ]
}

// ---------------------------------------------------------------------
// objective: the classifier heads, the distillation term, and the
// composite total from both heads' sides.
// ---------------------------------------------------------------------

fn objective_cases() -> Vec<Case> {
    vec![
        // The heads are checked with O(0.2) random weights: the training
        // initialization is so small that input gradients sink below the
        // f64 resolution of the loss across the probe step, which would
        // measure roundoff instead of the derivative.
        Case::new("recognition-head", 1e-6, || {
            let mut store = empty_store();
            init_classifier(&mut store, &Rng::new(91), "head.conv", 6, 3)?;
            randomize(&mut store, &["head.conv.weight", "head.conv.bias"], 191);
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    let logits = classifier(&mut ctx, v, "head.conv")?;
                    let flat = ctx.graph.reshape(logits, &[5, 4])?;
                    let lp = ctx.graph.log_softmax(flat, 1)?;
                    ctx.graph.ctc_loss(lp, &[0, 2], 3)
                },
                &rand_tensor(&[1, 5, 6], 92),
                DEFAULT_EPS,
            )
        }),
        Case::new("sequence-head", 1e-6, || {
            let mut store = empty_store();
            init_classifier(&mut store, &Rng::new(93), "head.seq", 6, 3)?;
            randomize(&mut store, &["head.seq.weight", "head.seq.bias"], 193);
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    let logits = classifier(&mut ctx, v, "head.seq")?;
                    let flat = ctx.graph.reshape(logits, &[5, 4])?;
                    let lp = ctx.graph.log_softmax(flat, 1)?;
                    ctx.graph.ctc_loss(lp, &[1, 2], 3)
                },
                &rand_tensor(&[1, 5, 6], 94),
                DEFAULT_EPS,
            )
        }),
        Case::new("distillation-student-side", 1e-6, || {
            let store = empty_store();
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    let teacher = ctx.graph.input(rand_tensor(&[4, 5], 95));
                    distill_loss(&mut ctx, v, teacher, 8.0)
                },
                &rand_tensor(&[4, 5], 96),
                DEFAULT_EPS,
            )
        }),
        Case::new("composite-student-side", 1e-5, || {
            let store = empty_store();
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    let seq = ctx.graph.input(rand_tensor(&[4, 4], 97));
                    let cu = ctx.graph.constant(Tensor::scalar(0.3));
                    let cp = ctx.graph.constant(Tensor::scalar(0.2));
                    let b = composite_loss(
                        &mut ctx,
                        v,
                        seq,
                        &[0, 2, 1],
                        cu,
                        cp,
                        &LossWeights::default(),
                    )?;
                    Ok(b.total)
                },
                &rand_tensor(&[4, 4], 98),
                DEFAULT_EPS,
            )
        }),
        Case::new("composite-teacher-side", 1e-5, || {
            // The distillation teacher is behind a stop-gradient: its
            // analytic derivative through that term is intentionally
            // zero, which a finite difference of the full total would
            // wrongly measure. Check the teacher head with the
            // distillation weight off; the module's own tests prove the
            // teacher gradient is identical either way.
            let store = empty_store();
            let w = LossWeights {
                lambda3: 0.0,
                ..LossWeights::default()
            };
            gradcheck(
                |g, v| {
                    let mut ctx = FwdCtx::for_gradcheck(g, &store, Mode::Eval);
                    let conv = ctx.graph.input(rand_tensor(&[4, 4], 99));
                    let cu = ctx.graph.constant(Tensor::scalar(0.3));
                    let cp = ctx.graph.constant(Tensor::scalar(0.2));
                    let b = composite_loss(&mut ctx, conv, v, &[0, 2, 1], cu, cp, &w)?;
                    Ok(b.total)
                },
                &rand_tensor(&[4, 4], 100),
                DEFAULT_EPS,
            )
        }),
    ]
}
