//! Bias-only model training: the shared extractor h feeds two heads, and
//! the objective pushes the sensitive head f_s toward predicting s while
//! actively unlearning the target label y.
//!
//! Two constructions of the same idea:
//! * `literal` — minimize L_S − min(L_T, cap) over all parameters, so the
//!   target head (and the extractor) climb the CE on y. The cap stops the
//!   unbounded ascent CE maximization otherwise diverges into.
//! * `grl` — the target head minimizes its CE normally, but a gradient
//!   reversal sits between extractor and head, so h receives −λ times
//!   that gradient and unlearns y while f_t keeps chasing it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{DsaError, Result};
use crate::optim::{clip_global_norm, lr_schedule, Optimizer};
use crate::rng::CounterRng;
use crate::tensor::{NodeId, Tape};
use crate::vit::{
    self, dataset_patches, embed, encode, forward_frozen, head_logits, init_params, ParamNodes,
    ViTConfig, ViTParams,
};

/// Ceiling on the maximized target CE (nats).
/// Hard ceiling for the unlearning cap: past this, CE maximization is
/// pure divergence with no informational content.
pub const LOSS_T_CAP: f64 = 20.0;

/// RNG stream for epoch shuffles, disjoint from parameter-init streams.
const SHUFFLE_STREAM: u64 = 0x5348_5546_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReversalMode {
    Literal,
    Grl,
}

impl FromStr for ReversalMode {
    type Err = DsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(ReversalMode::Literal),
            "grl" => Ok(ReversalMode::Grl),
            other => Err(DsaError::Config(format!("unknown reversal mode {other:?} (literal|grl)"))),
        }
    }
}

impl fmt::Display for ReversalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReversalMode::Literal => "literal",
            ReversalMode::Grl => "grl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasOnlyConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub clip: f64,
    pub mode: ReversalMode,
    pub grl_lambda: f64,
    /// Ceiling on the maximized target CE (literal mode). At chance-level
    /// CE the target head is uninformative rather than anti-correlated,
    /// which is what the downstream attack objective assumes.
    pub loss_t_cap: f64,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for BiasOnlyConfig {
    fn default() -> Self {
        BiasOnlyConfig {
            epochs: 10,
            lr: 3e-2,
            batch: 32,
            clip: 1.0,
            mode: ReversalMode::Literal,
            grl_lambda: 1.0,
            loss_t_cap: std::f64::consts::LN_2,
            warmup_frac: 0.1,
            seed: 0,
        }
    }
}

impl BiasOnlyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(DsaError::Config("epochs and batch must be ≥ 1".into()));
        }
        if self.mode == ReversalMode::Grl && self.grl_lambda <= 0.0 {
            return Err(DsaError::Config(format!(
                "grl mode needs grl_lambda > 0, got {}",
                self.grl_lambda
            )));
        }
        if !(self.loss_t_cap > 0.0 && self.loss_t_cap <= LOSS_T_CAP) {
            return Err(DsaError::Config(format!(
                "loss_t_cap must lie in (0, {LOSS_T_CAP}], got {}",
                self.loss_t_cap
            )));
        }
        Ok(())
    }
}

pub struct BiasLossNodes {
    pub total: NodeId,
    pub loss_s: NodeId,
    pub loss_t: NodeId,
}

/// Builds the bias-only objective on the tape. `y` and `s` are the batch
/// labels; `patches` is a (B, n, patch_dim) node.
pub fn bias_losses(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &ViTConfig,
    patches: NodeId,
    y: &[usize],
    s: &[usize],
    mode: ReversalMode,
    grl_lambda: f64,
    loss_t_cap: f64,
) -> Result<BiasLossNodes> {
    let tokens = embed(tape, nodes, cfg, patches)?;
    let (_, feat) = encode(tape, nodes, cfg, tokens)?;
    let logits_s = head_logits(tape, nodes.head_s, feat)?;
    let ls_vec = tape.cross_entropy(logits_s, s)?;
    let loss_s = tape.mean_all(ls_vec)?;
    match mode {
        ReversalMode::Literal => {
            let logits_t = head_logits(tape, nodes.head_t, feat)?;
            let lt_vec = tape.cross_entropy(logits_t, y)?;
            let loss_t = tape.mean_all(lt_vec)?;
            let capped = tape.clamp_max(loss_t, loss_t_cap)?;
            let total = tape.sub(loss_s, capped)?;
            Ok(BiasLossNodes { total, loss_s, loss_t })
        }
        ReversalMode::Grl => {
            let feat_rev = tape.grad_reverse(feat, grl_lambda)?;
            let logits_t = head_logits(tape, nodes.head_t, feat_rev)?;
            let lt_vec = tape.cross_entropy(logits_t, y)?;
            let loss_t = tape.mean_all(lt_vec)?;
            let total = tape.add(loss_s, loss_t)?;
            Ok(BiasLossNodes { total, loss_s, loss_t })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_s: f64,
    pub loss_t: f64,
    pub acc_s: f64,
    pub acc_y: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,loss_s,loss_t,acc_s,acc_y";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.loss_s, self.loss_t, self.acc_s, self.acc_y
        )
    }
}

pub struct TrainedBiasModel {
    pub params: ViTParams,
    pub log: Vec<EpochStats>,
}

pub fn shuffled_indices(rng: &mut CounterRng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    idx
}

/// Accuracy of both heads over a dataset, evaluated in fixed-size chunks.
pub fn head_accuracies(cfg: &ViTConfig, params: &ViTParams, ds: &Dataset, chunk: usize) -> Result<(f64, f64)> {
    let mut hit_s = 0usize;
    let mut hit_y = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for block in idx.chunks(chunk.max(1)) {
        let patches = dataset_patches(cfg, ds, block)?;
        let out = forward_frozen(cfg, params, patches)?;
        let pred_t = vit::argmax_rows(&out.logits_t);
        let pred_s = vit::argmax_rows(&out.logits_s);
        for (j, &i) in block.iter().enumerate() {
            hit_y += usize::from(pred_t[j] == ds.examples[i].y);
            hit_s += usize::from(pred_s[j] == ds.examples[i].s);
        }
    }
    let n = ds.len().max(1) as f64;
    Ok((hit_s as f64 / n, hit_y as f64 / n))
}

/// One optimizer step on `params` given the consumed tape's gradients.
/// Returns the pre-clip global norm.
pub fn apply_step(
    params: &mut ViTParams,
    node_ids: &[NodeId],
    grads: &mut crate::tensor::Grads,
    opt: &mut Optimizer,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    let mut gvecs: Vec<Vec<f64>> = Vec::with_capacity(node_ids.len());
    for &id in node_ids {
        gvecs.push(grads.take(id).ok_or(DsaError::MissingGrad(id.index()))?);
    }
    let norm = clip_global_norm(&mut gvecs, clip)?;
    let mut named = params.named_mut();
    let mut slices: Vec<&mut [f64]> = named.iter_mut().map(|(_, t)| t.data_mut()).collect();
    let gs: Vec<&[f64]> = gvecs.iter().map(|v| v.as_slice()).collect();
    opt.apply(lr, &mut slices, &gs)?;
    Ok(norm)
}

pub fn train_bias_only(cfg: &BiasOnlyConfig, vit_cfg: &ViTConfig, train: &Dataset) -> Result<TrainedBiasModel> {
    cfg.validate()?;
    vit_cfg.validate()?;
    if train.is_empty() {
        return Err(DsaError::Config("training dataset is empty".into()));
    }
    let mut params = init_params(vit_cfg, cfg.seed)?;
    let mut opt = Optimizer::sgd_momentum(0.9);
    let mut shuffle_rng = CounterRng::new(cfg.seed, SHUFFLE_STREAM);
    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = (total_steps as f64 * cfg.warmup_frac).round() as usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(&mut shuffle_rng, n);
        let mut sum_s = 0.0;
        let mut sum_t = 0.0;
        for block in order.chunks(cfg.batch) {
            let patches = dataset_patches(vit_cfg, train, block)?;
            let y: Vec<usize> = block.iter().map(|&i| train.examples[i].y as usize).collect();
            let s: Vec<usize> = block.iter().map(|&i| train.examples[i].s as usize).collect();
            let mut tape = Tape::new();
            let nodes = ParamNodes::insert(&mut tape, &params, true);
            let input = tape.constant(patches);
            let losses = bias_losses(&mut tape, &nodes, vit_cfg, input, &y, &s, cfg.mode, cfg.grl_lambda, cfg.loss_t_cap)
                .map_err(|e| step_context(e, epoch, step))?;
            sum_s += tape.scalar_value(losses.loss_s)? * block.len() as f64;
            sum_t += tape.scalar_value(losses.loss_t)? * block.len() as f64;
            let mut grads = tape.backward(losses.total).map_err(|e| step_context(e, epoch, step))?;
            let lr = lr_schedule(step, total_steps, warmup_steps, cfg.lr);
            apply_step(&mut params, &nodes.all, &mut grads, &mut opt, lr, cfg.clip)?;
            step += 1;
        }
        let (acc_s, acc_y) = head_accuracies(vit_cfg, &params, train, 64)?;
        log.push(EpochStats {
            epoch,
            loss_s: sum_s / n as f64,
            loss_t: sum_t / n as f64,
            acc_s,
            acc_y,
        });
    }
    Ok(TrainedBiasModel { params, log })
}

fn step_context(e: DsaError, epoch: usize, step: usize) -> DsaError {
    match e {
        DsaError::NonFinite { context } => DsaError::NonFinite {
            context: format!("epoch {epoch} step {step}: {context}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetSpec};

    fn micro_cfg() -> ViTConfig {
        ViTConfig {
            image_hw: (8, 8),
            channels: 3,
            patch_size: 4,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_hidden: 16,
            head_hidden: 8,
            num_classes_target: 2,
            num_classes_sensitive: 2,
        }
    }

    fn micro_batch(cfg: &ViTConfig, b: usize, seed: u64) -> crate::tensor::Tensor {
        let mut rng = CounterRng::new(seed, 77);
        let numel = b * cfg.n_patches() * cfg.patch_dim();
        let data: Vec<f64> = (0..numel).map(|_| rng.uniform()).collect();
        crate::tensor::Tensor::new(vec![b, cfg.n_patches(), cfg.patch_dim()], data).unwrap()
    }

    fn build(
        mode: ReversalMode,
        lambda: f64,
        requires_grad: bool,
    ) -> (Tape, ParamNodes, BiasLossNodes) {
        let cfg = micro_cfg();
        let params = init_params(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert(&mut tape, &params, requires_grad);
        let input = tape.constant(micro_batch(&cfg, 4, 9));
        let y = [0usize, 1, 1, 0];
        let s = [1usize, 0, 1, 0];
        let losses = bias_losses(&mut tape, &nodes, &cfg, input, &y, &s, mode, lambda, LOSS_T_CAP).unwrap();
        (tape, nodes, losses)
    }

    #[test]
    fn literal_total_is_ls_minus_capped_lt() {
        let (tape, _, l) = build(ReversalMode::Literal, 1.0, false);
        let ls = tape.scalar_value(l.loss_s).unwrap();
        let lt = tape.scalar_value(l.loss_t).unwrap();
        let total = tape.scalar_value(l.total).unwrap();
        assert!(lt < LOSS_T_CAP, "fresh model CE should be small: {lt}");
        assert!((total - (ls - lt)).abs() < 1e-12);
    }

    #[test]
    fn grl_total_is_plain_sum() {
        let (tape, _, l) = build(ReversalMode::Grl, 0.5, false);
        let ls = tape.scalar_value(l.loss_s).unwrap();
        let lt = tape.scalar_value(l.loss_t).unwrap();
        let total = tape.scalar_value(l.total).unwrap();
        assert!((total - (ls + lt)).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_is_mean_of_singletons() {
        let cfg = micro_cfg();
        let params = init_params(&cfg, 3).unwrap();
        let batch = micro_batch(&cfg, 4, 9);
        let y = [0usize, 1, 1, 0];
        let s = [1usize, 0, 1, 0];
        let batch_ls = {
            let mut tape = Tape::new();
            let nodes = ParamNodes::insert(&mut tape, &params, false);
            let input = tape.constant(batch.clone());
            let l = bias_losses(&mut tape, &nodes, &cfg, input, &y, &s, ReversalMode::Literal, 1.0, LOSS_T_CAP).unwrap();
            tape.scalar_value(l.loss_s).unwrap()
        };
        let np = cfg.n_patches() * cfg.patch_dim();
        let mut acc = 0.0;
        for i in 0..4 {
            let mut tape = Tape::new();
            let nodes = ParamNodes::insert(&mut tape, &params, false);
            let one = crate::tensor::Tensor::new(
                vec![1, cfg.n_patches(), cfg.patch_dim()],
                batch.data()[i * np..(i + 1) * np].to_vec(),
            )
            .unwrap();
            let input = tape.constant(one);
            let l = bias_losses(&mut tape, &nodes, &cfg, input, &y[i..=i], &s[i..=i], ReversalMode::Literal, 1.0, LOSS_T_CAP)
                .unwrap();
            acc += tape.scalar_value(l.loss_s).unwrap();
        }
        assert!((batch_ls - acc / 4.0).abs() < 1e-12);
    }

    #[test]
    fn heads_are_isolated_from_each_others_loss() {
        // ∂L_T/∂(f_s params) = 0 exactly
        let (mut tape, nodes, l) = build(ReversalMode::Literal, 1.0, true);
        let grads = tape.backward(l.loss_t).unwrap();
        for id in [nodes.head_s.w1, nodes.head_s.b1, nodes.head_s.w2, nodes.head_s.b2] {
            assert!(grads.get(id).unwrap().iter().all(|&g| g == 0.0));
        }
        // ∂L_S/∂(f_t params) = 0 exactly
        let (mut tape, nodes, l) = build(ReversalMode::Literal, 1.0, true);
        let grads = tape.backward(l.loss_s).unwrap();
        for id in [nodes.head_t.w1, nodes.head_t.b1, nodes.head_t.w2, nodes.head_t.b2] {
            assert!(grads.get(id).unwrap().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn grl_scales_extractor_gradient_by_negative_lambda() {
        let lambda = 0.7;
        // gradient reaching the extractor from the target branch, with reversal
        let (mut tape, nodes, l) = build(ReversalMode::Grl, lambda, true);
        let grads_rev = tape.backward(l.loss_t).unwrap();
        let g_rev = grads_rev.get(nodes.all[0]).unwrap().to_vec();
        // the same gradient when f_t minimizes CE directly: grl with λ→"none"
        // is the literal graph's loss_t branch
        let (mut tape, nodes, l) = build(ReversalMode::Literal, 1.0, true);
        let grads_plain = tape.backward(l.loss_t).unwrap();
        let g_plain = grads_plain.get(nodes.all[0]).unwrap().to_vec();
        assert_eq!(g_rev.len(), g_plain.len());
        let scale: f64 = -lambda;
        for (a, b) in g_rev.iter().zip(&g_plain) {
            assert!((a - scale * b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {}", scale * b);
        }
        // head f_t itself still receives the un-reversed (minimizing) gradient
        let (mut tape, nodes, l) = build(ReversalMode::Grl, lambda, true);
        let gr = tape.backward(l.loss_t).unwrap();
        let (mut tape2, nodes2, l2) = build(ReversalMode::Literal, 1.0, true);
        let gp = tape2.backward(l2.loss_t).unwrap();
        let a = gr.get(nodes.head_t.w1).unwrap();
        let b = gp.get(nodes2.head_t.w1).unwrap();
        for (x, z) in a.iter().zip(b) {
            assert!((x - z).abs() <= 1e-12 * z.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = BiasOnlyConfig { mode: ReversalMode::Grl, grl_lambda: 0.0, ..BiasOnlyConfig::default() };
        assert!(matches!(bad.validate(), Err(DsaError::Config(_))));
        let bad = BiasOnlyConfig { epochs: 0, ..BiasOnlyConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = CounterRng::new(4, SHUFFLE_STREAM);
        let idx = shuffled_indices(&mut rng, 100);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(idx, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn smoke_train_emits_log_and_is_deterministic() {
        let spec = DatasetSpec { n_train: 64, n_test: 8, rho: 1.0, seed: 2, ..DatasetSpec::default() };
        let (train, _) = generate(&spec).unwrap();
        let cfg = BiasOnlyConfig { epochs: 1, ..BiasOnlyConfig::default() };
        let vcfg = ViTConfig::default();
        let a = train_bias_only(&cfg, &vcfg, &train).unwrap();
        assert_eq!(a.log.len(), 1);
        let row = a.log[0].csv_row();
        assert_eq!(row.split(',').count(), EpochStats::CSV_HEADER.split(',').count());
        let b = train_bias_only(&cfg, &vcfg, &train).unwrap();
        assert_eq!(a.log, b.log);
        for ((na, ta), (nb, tb)) in a.params.named().iter().zip(b.params.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn short_training_learns_the_sensitive_attribute() {
        // generous cap: unbounded-ascent guard only, so the adversarial tug on h
        // saturates early and the sensitive head trains undisturbed
        let spec = DatasetSpec { n_train: 160, n_test: 8, rho: 1.0, seed: 7, ..DatasetSpec::default() };
        let (train, _) = generate(&spec).unwrap();
        let cfg =
            BiasOnlyConfig { epochs: 6, seed: 1, loss_t_cap: LOSS_T_CAP, ..BiasOnlyConfig::default() };
        let run = train_bias_only(&cfg, &ViTConfig::default(), &train).unwrap();
        let last = run.log.last().unwrap();
        assert!(last.acc_s >= 0.9, "sensitive-head accuracy {}", last.acc_s);
        assert!(last.loss_s < run.log[0].loss_s);
    }
}
