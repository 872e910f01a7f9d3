//! Alignment-free sequence loss, decoding, and word-error-rate scoring.
//!
//! Recognition emits one distribution over `V + 1` classes per timestep:
//! the `V` gloss indices `0..V-1` plus a *blank* at index `V`. The loss is
//! the negative log-likelihood of the target gloss sequence summed over
//! every monotonic alignment, computed by the standard forward recursion
//! over the blank-interleaved target. All dynamic programming runs in log
//! space with max-shifted log-sum-exp; impossible states carry the
//! sentinel `f64::NEG_INFINITY`.
//!
//! The internal DP always works in `f64` regardless of the model element
//! type — it costs nothing at these sizes and keeps the loss and its
//! gradient well conditioned even for `f32` training graphs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Minimum number of timesteps that can carry `targets`: one per label
/// plus one separating blank per adjacent duplicate pair.
pub fn min_frames(targets: &[usize]) -> usize {
    let dups = targets.windows(2).filter(|w| w[0] == w[1]).count();
    targets.len() + dups
}

/// Blank-interleaved extension `[b, y1, b, y2, ..., ym, b]` of length 2m+1.
pub fn extend_with_blanks(targets: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(blank);
    for &t in targets {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

/// log(exp(a) + exp(b)) with a max shift; -inf is absorbing.
fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward table `alpha[t][s]` (log domain, rows T, cols S = ext.len())
/// and the total log-likelihood. `ext[0]` is always the blank.
pub(crate) fn forward_table<E: Element>(logprobs: &Tensor<E>, ext: &[usize]) -> (Tensor<f64>, f64) {
    let t_len = logprobs.shape()[0];
    let s_len = ext.len();
    let blank = ext[0];
    let lp = |t: usize, k: usize| logprobs.at(&[t, k]).as_f64();
    let mut alpha = Tensor::<f64>::full(&[t_len, s_len], f64::NEG_INFINITY);
    alpha.set(&[0, 0], lp(0, ext[0]));
    if s_len > 1 {
        alpha.set(&[0, 1], lp(0, ext[1]));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha.at(&[t - 1, s]);
            if s >= 1 {
                acc = lse2(acc, alpha.at(&[t - 1, s - 1]));
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                acc = lse2(acc, alpha.at(&[t - 1, s - 2]));
            }
            alpha.set(&[t, s], acc + lp(t, ext[s]));
        }
    }
    let mut logp = alpha.at(&[t_len - 1, s_len - 1]);
    if s_len > 1 {
        logp = lse2(logp, alpha.at(&[t_len - 1, s_len - 2]));
    }
    (alpha, logp)
}

/// Loss value: negative log-likelihood of the target under all alignments.
pub(crate) fn forward_loss<E: Element>(logprobs: &Tensor<E>, ext: &[usize]) -> E {
    let (_, logp) = forward_table(logprobs, ext);
    E::of(-logp)
}

/// Gradient of [`forward_loss`] w.r.t. the log-probabilities, from the
/// forward-backward decomposition.
pub(crate) fn loss_grad<E: Element>(logprobs: &Tensor<E>, ext: &[usize]) -> Tensor<E> {
    let t_len = logprobs.shape()[0];
    let v_len = logprobs.shape()[1];
    let s_len = ext.len();
    let blank = ext[0];
    let lp = |t: usize, k: usize| logprobs.at(&[t, k]).as_f64();
    let (alpha, logp) = forward_table(logprobs, ext);

    // Backward table, symmetric to alpha and *inclusive* of the emission
    // at t, so alpha[t][s] + beta[t][s] counts lp(t, ext[s]) twice.
    let mut beta = Tensor::<f64>::full(&[t_len, s_len], f64::NEG_INFINITY);
    beta.set(&[t_len - 1, s_len - 1], lp(t_len - 1, ext[s_len - 1]));
    if s_len > 1 {
        beta.set(&[t_len - 1, s_len - 2], lp(t_len - 1, ext[s_len - 2]));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta.at(&[t + 1, s]);
            if s + 1 < s_len {
                acc = lse2(acc, beta.at(&[t + 1, s + 1]));
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                acc = lse2(acc, beta.at(&[t + 1, s + 2]));
            }
            beta.set(&[t, s], acc + lp(t, ext[s]));
        }
    }

    let mut grad = Tensor::<E>::zeros(logprobs.shape());
    for t in 0..t_len {
        // Per-class log-sum of alpha*beta/emission, accumulated in state
        // order for determinism.
        let mut bucket = vec![f64::NEG_INFINITY; v_len];
        for (s, &k) in ext.iter().enumerate() {
            let term = alpha.at(&[t, s]) + beta.at(&[t, s]) - lp(t, k);
            bucket[k] = lse2(bucket[k], term);
        }
        for (k, &b) in bucket.iter().enumerate() {
            if b > f64::NEG_INFINITY {
                grad.set(&[t, k], E::of(-(b - logp).exp()));
            }
        }
    }
    grad
}

/// Exhaustive-enumeration oracle: sums the probability of every one of the
/// `(V+1)^T` paths whose collapse equals the target, in `f64`, in path
/// order. A target no path can produce yields `+inf`, not an error.
pub fn brute_force_ctc<E: Element>(
    logprobs: &Tensor<E>,
    targets: &[usize],
    blank: usize,
) -> Result<f64> {
    const LIMIT: f64 = 1e7;
    let t_len = logprobs.shape()[0];
    let v_len = logprobs.shape()[1];
    let paths = (v_len as f64).powi(t_len as i32);
    if paths > LIMIT {
        return Err(Error::OracleCapacity {
            paths,
            limit: LIMIT,
        });
    }
    let mut path = vec![0usize; t_len];
    let mut total = 0.0f64;
    loop {
        if collapse_path(&path, blank) == targets {
            let logp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| logprobs.at(&[t, k]).as_f64())
                .sum();
            total += logp.exp();
        }
        // Odometer over paths, least-significant timestep last.
        let mut d = t_len;
        loop {
            if d == 0 {
                return Ok(-total.ln());
            }
            d -= 1;
            path[d] += 1;
            if path[d] < v_len {
                break;
            }
            path[d] = 0;
        }
    }
}

/// Collapse a raw frame-label path: merge consecutive repeats, then drop
/// blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &k in path {
        if prev != Some(k) && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Best-path decoding: per-timestep argmax (ties go to the smallest class
/// index), then collapse. Never emits the blank.
pub fn greedy_decode<E: Element>(logprobs: &Tensor<E>, blank: usize) -> Vec<usize> {
    let t_len = logprobs.shape()[0];
    let v_len = logprobs.shape()[1];
    let mut path = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut best = 0usize;
        for k in 1..v_len {
            if logprobs.at(&[t, k]) > logprobs.at(&[t, best]) {
                best = k;
            }
        }
        path.push(best);
    }
    collapse_path(&path, blank)
}

/// Edit operations needed to align one hypothesis with one reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    /// Positions where hypothesis and reference disagree.
    pub subs: usize,
    /// Reference tokens with no hypothesis counterpart.
    pub dels: usize,
    /// Hypothesis tokens with no reference counterpart.
    pub ins: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.subs + self.dels + self.ins
    }
}

/// Minimal-cost Levenshtein alignment of `hyp` against `reference`, unit
/// costs, with a deterministic backtrace that prefers substitution over
/// deletion over insertion on ties.
pub fn edit_counts(reference: &[usize], hyp: &[usize]) -> Result<EditCounts> {
    if reference.is_empty() {
        return Err(Error::Contract(
            "word error rate needs a non-empty reference".into(),
        ));
    }
    let (r, h) = (reference.len(), hyp.len());
    let mut d = vec![0usize; (r + 1) * (h + 1)];
    let at = |i: usize, j: usize| i * (h + 1) + j;
    for i in 0..=r {
        d[at(i, 0)] = i;
    }
    for j in 0..=h {
        d[at(0, j)] = j;
    }
    for i in 1..=r {
        for j in 1..=h {
            let sub = d[at(i - 1, j - 1)] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[at(i - 1, j)] + 1;
            let ins = d[at(i, j - 1)] + 1;
            d[at(i, j)] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (r, h);
    while i > 0 || j > 0 {
        let cur = d[at(i, j)];
        if i > 0 && j > 0 {
            let mismatch = reference[i - 1] != hyp[j - 1];
            if cur == d[at(i - 1, j - 1)] + usize::from(mismatch) {
                if mismatch {
                    counts.subs += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cur == d[at(i - 1, j)] + 1 {
            counts.dels += 1;
            i -= 1;
            continue;
        }
        counts.ins += 1;
        j -= 1;
    }
    debug_assert_eq!(counts.total(), d[at(r, h)]);
    Ok(counts)
}

/// Corpus-level error rate report; serializes to the JSON shape
/// `{wer, sub, del, ins, ref_len}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WerReport {
    pub wer: f64,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub ref_len: usize,
}

/// Corpus word error rate: summed edit counts over summed reference
/// length. Can exceed 1 when hypotheses carry many extra tokens.
pub fn corpus_wer(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        return Err(Error::Contract(format!(
            "word error rate needs paired sequences, got {} references and {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut total = EditCounts::default();
    let mut ref_len = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        let c = edit_counts(r, h)?;
        total.subs += c.subs;
        total.dels += c.dels;
        total.ins += c.ins;
        ref_len += r.len();
    }
    Ok(WerReport {
        wer: total.total() as f64 / ref_len as f64,
        sub: total.subs,
        del: total.dels,
        ins: total.ins,
        ref_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::graph::Graph;
    use proptest::prelude::*;

    /// Random normalized log-probabilities of shape (T, V+1).
    fn random_logprobs(t: usize, classes: usize, rng: &mut Rng) -> Tensor<f64> {
        let logits = Tensor::<f64>::from_fn(&[t, classes], |_| 4.0 * rng.next_f64() - 2.0);
        let mut g = Graph::new();
        let x = g.constant(logits);
        let lp = g.log_softmax(x, 1).unwrap();
        g.value(lp).clone()
    }

    #[test]
    fn single_frame_single_label() {
        let mut rng = Rng::new(3);
        let lp = random_logprobs(1, 4, &mut rng);
        let ext = extend_with_blanks(&[2], 3);
        let loss = forward_loss(&lp, &ext);
        assert!((loss - (-lp.at(&[0, 2]))).abs() < 1e-15);
    }

    #[test]
    fn two_frames_uniform_logits_is_ln_3() {
        // Three classes, uniform: the paths cc, -c, c- each have mass 1/9.
        let lp = Tensor::<f64>::full(&[2, 3], (1.0f64 / 3.0).ln());
        let ext = extend_with_blanks(&[1], 2);
        let loss = forward_loss(&lp, &ext);
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dp_matches_brute_force_on_seeded_instance() {
        let mut rng = Rng::new(0);
        let lp = random_logprobs(5, 4, &mut rng); // V=3, blank=3
        let targets = [1usize, 0];
        let ext = extend_with_blanks(&targets, 3);
        let dp = forward_loss(&lp, &ext);
        let bf = brute_force_ctc(&lp, &targets, 3).unwrap();
        assert!((dp - bf).abs() < 1e-9, "dp {dp} vs brute force {bf}");
    }

    #[test]
    fn brute_force_certainty_and_impossibility() {
        // One-hot on class 1 at the single frame: loss 0.
        let mut onehot = Tensor::<f64>::full(&[1, 3], f64::NEG_INFINITY);
        onehot.set(&[0, 1], 0.0);
        assert_eq!(brute_force_ctc(&onehot, &[1], 2).unwrap(), 0.0);
        // All mass on blank but a non-empty target: +inf, not an error.
        let mut blanks = Tensor::<f64>::full(&[3, 3], f64::NEG_INFINITY);
        for t in 0..3 {
            blanks.set(&[t, 2], 0.0);
        }
        assert_eq!(brute_force_ctc(&blanks, &[0], 2).unwrap(), f64::INFINITY);
    }

    #[test]
    fn brute_force_rejects_oversized_instances() {
        let lp = Tensor::<f64>::zeros(&[30, 10]);
        match brute_force_ctc(&lp, &[1], 9) {
            Err(Error::OracleCapacity { .. }) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn min_frames_counts_duplicate_separators() {
        assert_eq!(min_frames(&[1, 2, 3]), 3);
        assert_eq!(min_frames(&[1, 1]), 3);
        assert_eq!(min_frames(&[2, 2, 2]), 5);
        assert_eq!(min_frames(&[]), 0);
    }

    #[test]
    fn forward_mass_never_exceeds_one() {
        // Sum over states of exp(alpha[t][s]) is a probability of disjoint
        // prefix events, so it must stay <= 1.
        let mut rng = Rng::new(21);
        for case in 0..50 {
            let t = 2 + (case % 5);
            let lp = random_logprobs(t, 5, &mut rng);
            let targets = [case % 4, (case + 1) % 4];
            let ext = extend_with_blanks(&targets, 4);
            let (alpha, _) = forward_table(&lp, &ext);
            for ti in 0..t {
                let mass: f64 = (0..ext.len()).map(|s| alpha.at(&[ti, s]).exp()).sum();
                assert!(mass <= 1.0 + 1e-9, "mass {mass} at t={ti}");
            }
        }
    }

    #[test]
    fn graph_ctc_loss_validates_and_differentiates() {
        let mut rng = Rng::new(7);
        let lp = random_logprobs(4, 4, &mut rng);
        let mut g = Graph::new();
        let x = g.input(lp.clone());
        // Adjacent duplicates need a separating blank: [1,1] needs 3 frames.
        let loss = g.ctc_loss(x, &[1, 1], 3).unwrap();
        let bf = brute_force_ctc(&lp, &[1, 1], 3).unwrap();
        assert!((g.value(loss).item() - bf).abs() < 1e-9);
        let grads = g.backward(loss).unwrap();
        let gx = grads.wrt(x).unwrap();
        // Loss decreases as target-class log-probabilities rise, so those
        // coordinates carry negative gradient.
        assert!(gx.data().iter().all(|v| v.is_finite()));
        assert!(gx.data().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn graph_ctc_loss_rejects_infeasible_targets() {
        let lp = Tensor::<f64>::full(&[2, 4], (1.0f64 / 4.0).ln());
        let mut g = Graph::new();
        let x = g.input(lp);
        match g.ctc_loss(x, &[1, 1], 3) {
            Err(Error::Infeasible { timesteps: 2, min: 3 }) => {}
            other => panic!("expected infeasibility, got {other:?}"),
        }
        let y = g.input(Tensor::<f64>::full(&[2, 4], (1.0f64 / 4.0).ln()));
        assert!(g.ctc_loss(y, &[], 3).is_err());
        assert!(g.ctc_loss(y, &[3], 3).is_err(), "blank may not be a target");
        assert!(g.ctc_loss(y, &[4], 3).is_err(), "label out of vocabulary");
    }

    #[test]
    fn greedy_decode_collapses_runs_and_blanks() {
        // Build log-probabilities whose argmax path is the one we want.
        let path_to_lp = |path: &[usize], classes: usize| {
            let mut lp = Tensor::<f64>::full(&[path.len(), classes], -3.0);
            for (t, &k) in path.iter().enumerate() {
                lp.set(&[t, k], -0.1);
            }
            lp
        };
        let blank = 2;
        let lp = path_to_lp(&[blank, 0, 0, blank, 1], 3);
        assert_eq!(greedy_decode(&lp, blank), vec![0, 1]);
        let lp = path_to_lp(&[0, blank, 0], 3);
        assert_eq!(greedy_decode(&lp, blank), vec![0, 0]);
        let lp = path_to_lp(&[blank, blank, blank], 3);
        assert_eq!(greedy_decode(&lp, blank), Vec::<usize>::new());
    }

    #[test]
    fn greedy_decode_breaks_ties_toward_smaller_index() {
        let lp = Tensor::<f64>::full(&[2, 4], (1.0f64 / 4.0).ln());
        // Every class ties; class 0 wins each frame and collapses to [0].
        assert_eq!(greedy_decode(&lp, 3), vec![0]);
    }

    #[test]
    fn wer_identity_and_single_substitution() {
        let a = vec![0usize, 1, 2];
        let rep = corpus_wer(&[a.clone()], &[a.clone()]).unwrap();
        assert_eq!((rep.sub, rep.del, rep.ins), (0, 0, 0));
        assert_eq!(rep.wer, 0.0);
        let rep = corpus_wer(&[vec![0, 1, 2]], &[vec![0, 9, 2]]).unwrap();
        assert_eq!((rep.sub, rep.del, rep.ins), (1, 0, 0));
        assert!((rep.wer - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wer_reversal_costs_two_substitutions() {
        let rep = corpus_wer(&[vec![0, 1, 2]], &[vec![2, 1, 0]]).unwrap();
        assert_eq!(rep.sub + rep.del + rep.ins, 2);
    }

    #[test]
    fn wer_can_exceed_one_on_long_hypotheses() {
        // Extra hypothesis tokens count as insertions.
        let rep = corpus_wer(&[vec![0]], &[vec![0, 1, 2, 3]]).unwrap();
        assert_eq!((rep.sub, rep.del, rep.ins), (0, 0, 3));
        assert_eq!(rep.wer, 3.0);
    }

    #[test]
    fn wer_missing_tokens_are_deletions() {
        let rep = corpus_wer(&[vec![0, 1, 2, 3]], &[vec![0, 3]]).unwrap();
        assert_eq!((rep.sub, rep.del, rep.ins), (0, 2, 0));
    }

    #[test]
    fn wer_rejects_empty_references() {
        match corpus_wer(&[vec![]], &[vec![1]]) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn wer_report_serializes_to_expected_json() {
        let rep = WerReport {
            wer: 0.25,
            sub: 1,
            del: 0,
            ins: 0,
            ref_len: 4,
        };
        let json = serde_json::to_string(&rep).unwrap();
        assert_eq!(json, r#"{"wer":0.25,"sub":1,"del":0,"ins":0,"ref_len":4}"#);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(220))]
        #[test]
        fn dp_equals_brute_force(
            seed in 0u64..1_000_000,
            t in 1usize..=6,
            v in 1usize..=4,
            m in 1usize..=3,
        ) {
            let mut rng = Rng::new(seed);
            let targets: Vec<usize> = (0..m).map(|_| rng.below(v)).collect();
            prop_assume!(min_frames(&targets) <= t);
            let lp = random_logprobs(t, v + 1, &mut rng);
            let ext = extend_with_blanks(&targets, v);
            let dp = forward_loss(&lp, &ext);
            let bf = brute_force_ctc(&lp, &targets, v).unwrap();
            prop_assert!((dp - bf).abs() < 1e-9, "dp {} vs bf {}", dp, bf);
        }

        #[test]
        fn wer_is_relabeling_invariant(
            reference in proptest::collection::vec(0usize..5, 1..8),
            hyp in proptest::collection::vec(0usize..5, 0..8),
            shift in 1usize..100,
        ) {
            let a = edit_counts(&reference, &hyp).unwrap();
            // Any injective relabeling (here: shift) preserves the counts.
            let r2: Vec<usize> = reference.iter().map(|&x| x + shift).collect();
            let h2: Vec<usize> = hyp.iter().map(|&x| x + shift).collect();
            let b = edit_counts(&r2, &h2).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn wer_of_identical_sequences_is_zero(
            reference in proptest::collection::vec(0usize..6, 1..10),
        ) {
            let c = edit_counts(&reference, &reference).unwrap();
            prop_assert_eq!(c.total(), 0);
        }
    }
}
