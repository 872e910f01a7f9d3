//! Full recognition model: video backbone, multi-scale temporal
//! convolution with lift pooling, bidirectional LSTM, and two
//! classification heads that feed the composite objective.
//!
//! Data flow for one clip of `T` frames:
//!
//! ```text
//! frames (B, T, 3, H, W)
//!   └─ backbone ──────────────► (B, T, D)      per-frame embeddings
//!        └─ permute ──────────► (B, D, T)      channels-first
//!             └─ ms-tcn + lift► (B, ms, T/4)   plus lift costs
//!                  └─ permute ► (B, T/4, ms)
//!                       ├─ conv head ────────► (B, T/4, V+1) logits
//!                       └─ bilstm ► seq head ► (B, T/4, V+1) logits
//! ```
//!
//! The sequence head (after the BiLSTM) is the recognition output used
//! for decoding; the convolutional head is an auxiliary branch that
//! receives its own alignment loss and distills from the sequence head.

use crate::backbone::{backbone_forward, init_backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{FwdCtx, Mode};
use crate::objective::{composite_loss, sum_tlp_costs, LossBreakdown, LossWeights};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::temporal::{
    bilstm_forward, classifier, init_bilstm, init_classifier, init_mstcn, mstcn_forward,
    BilstmConfig, MstcnConfig, TlpCosts,
};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

/// Architecture of the full model. The backbone's output width must
/// equal the temporal module's input width; `validate` checks this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of distinct gloss labels. Classifier heads emit
    /// `vocab_size + 1` logits; the extra slot is the blank.
    pub vocab_size: usize,
    pub backbone: BackboneConfig,
    pub mstcn: MstcnConfig,
    pub bilstm: BilstmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 6,
            backbone: BackboneConfig::default(),
            mstcn: MstcnConfig::default(),
            bilstm: BilstmConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        self.backbone.validate()?;
        self.mstcn.validate()?;
        self.bilstm.validate()?;
        let out = self.backbone.out_dim();
        if self.mstcn.in_dim != out {
            return Err(Error::Config(format!(
                "temporal module expects {} input channels but the backbone \
                 produces {}; set mstcn.in_dim to match",
                self.mstcn.in_dim, out
            )));
        }
        Ok(())
    }

    /// Frames shorter than this cannot pass the temporal module.
    pub fn min_frames(&self) -> usize {
        self.mstcn.min_len()
    }

    /// Downsampling factor from input frames to logit timesteps.
    pub fn time_stride(&self) -> usize {
        1 << self.mstcn.stage_count
    }
}

/// Logits and auxiliary costs produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Auxiliary head on the temporal-convolution features,
    /// `(B, T', V+1)`.
    pub conv_logits: Var,
    /// Recognition head on the BiLSTM features, `(B, T', V+1)`.
    pub seq_logits: Var,
    /// Lift-pooling costs, one pair per temporal stage.
    pub costs: Vec<TlpCosts>,
}

/// Registers every parameter of the model in dependency order.
pub fn init_model<E: Element>(
    store: &mut ParamStore<E>,
    root: &Rng,
    cfg: &ModelConfig,
) -> Result<()> {
    cfg.validate()?;
    init_backbone(store, root, &cfg.backbone)?;
    init_mstcn(store, root, &cfg.mstcn)?;
    init_bilstm(store, root, cfg.mstcn.ms_dim, &cfg.bilstm)?;
    init_classifier(store, root, "head.conv", cfg.mstcn.ms_dim, cfg.vocab_size)?;
    init_classifier(store, root, "head.seq", cfg.bilstm.out_dim(), cfg.vocab_size)?;
    Ok(())
}

/// Runs the whole model on a batch of clips `(B, T, 3, H, W)`.
pub fn model_forward<E: Element>(
    ctx: &mut FwdCtx<E>,
    frames: Var,
    cfg: &ModelConfig,
) -> Result<ModelOutput> {
    let emb = backbone_forward(ctx, frames, &cfg.backbone)?;
    let chan = ctx.graph.permute(emb, &[0, 2, 1])?;
    let (feat, costs) = mstcn_forward(ctx, chan, &cfg.mstcn)?;
    let seq = ctx.graph.permute(feat, &[0, 2, 1])?;
    let conv_logits = classifier(ctx, seq, "head.conv")?;
    let rnn = bilstm_forward(ctx, seq, &cfg.bilstm)?;
    let seq_logits = classifier(ctx, rnn, "head.seq")?;
    Ok(ModelOutput {
        conv_logits,
        seq_logits,
        costs,
    })
}

fn squeeze_batch<E: Element>(ctx: &mut FwdCtx<E>, logits: Var) -> Result<Var> {
    let shape = ctx.graph.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::BadShape {
            op: "squeeze_batch",
            shape,
            detail: "expected single-clip logits (1, time, vocab+1)".into(),
        });
    }
    ctx.graph.reshape(logits, &[shape[1], shape[2]])
}

/// Composite loss for a single clip, `frames` shaped `(1, T, 3, H, W)`.
/// `targets` is the gloss label sequence of the clip.
pub fn sample_loss<E: Element>(
    ctx: &mut FwdCtx<E>,
    frames: Var,
    targets: &[usize],
    cfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let out = model_forward(ctx, frames, cfg)?;
    let conv = squeeze_batch(ctx, out.conv_logits)?;
    let seq = squeeze_batch(ctx, out.seq_logits)?;
    let (cu, cp) = sum_tlp_costs(ctx, &out.costs)?;
    composite_loss(ctx, conv, seq, targets, cu, cp, weights)
}

/// Greedy-decodes one clip `(T, 3, H, W)` with the recognition head:
/// evaluation-mode forward, log-softmax over labels, per-step argmax,
/// collapse.
pub fn decode_sample<E: Element>(
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    frames: &Tensor<E>,
) -> Result<Vec<usize>> {
    let fs = frames.shape().to_vec();
    if fs.len() != 4 {
        return Err(Error::BadShape {
            op: "decode_sample",
            shape: fs,
            detail: "expected one clip (frames, 3, height, width)".into(),
        });
    }
    let mut graph = Graph::new();
    let batched = {
        let mut shape = vec![1];
        shape.extend_from_slice(&fs);
        frames.reshaped(&shape)?
    };
    let x = graph.constant(batched);
    let mut ctx = FwdCtx::new(&mut graph, store, Mode::Eval);
    let out = model_forward(&mut ctx, x, cfg)?;
    let seq = squeeze_batch(&mut ctx, out.seq_logits)?;
    let lp = ctx.graph.log_softmax(seq, 1)?;
    let values = graph.value(lp).clone();
    Ok(crate::alignment::greedy_decode(
        &values,
        cfg.vocab_size,
    ))
}
