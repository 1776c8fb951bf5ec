//! Attention-aware adversarial attack against a frozen bias-only model,
//! plus the attention-masking (AM) baseline.
//!
//! A patch's importance t_j is the total attention it receives (column
//! sums over heads and query rows). The attack perturbs the top-k
//! most-attended patches, running Adam ascent on
//! L = L_S(x′, s) − L_T(x′, y) + α Σ_l L_Attn so the sensitive head is
//! fooled while target content and the attended positions are preserved.
//! Per layer, PCGrad drops the attention term's conflicting component:
//! β_l = ⟨∇L_S, ∇L_Attn⟩/‖∇L_S‖² when that inner product is negative,
//! else 0, and δ_E = ∇L − α Σ_l β_l ∇L_S.
//!
//! Examples decouple: batching them into one tape and summing losses
//! yields exact per-example input gradients, so attacks run in chunks.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{DsaError, Result};
use crate::optim::Optimizer;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::vit::{
    argmax_rows, dataset_patches, embed, encode, forward_frozen, head_logits, unpatchify,
    ParamNodes, ViTConfig, ViTParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerMode {
    /// Sum t over every layer (default).
    SumAll,
    /// Use a single layer's scores.
    Single(usize),
}

/// Per-example attention received by each token.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImportance {
    /// Per layer: t_j = Σ_{h,i} a[h,i,j], length T = n+1 (class token first).
    pub per_layer: Vec<Vec<f64>>,
    /// Aggregated per `LayerMode`, length T.
    pub aggregate: Vec<f64>,
    /// Token indices sorted by aggregate score, descending, ties → lower index.
    pub ranking: Vec<usize>,
}

/// Column-sums every example's attention. `attn` holds one (B, H, T, T)
/// tensor per layer.
pub fn patch_importance(attn: &[Tensor], mode: LayerMode) -> Result<Vec<PatchImportance>> {
    if attn.is_empty() {
        return Err(DsaError::Shape { op: "patch_importance", detail: "no attention layers".into() });
    }
    if let LayerMode::Single(l) = mode {
        if l >= attn.len() {
            return Err(DsaError::Config(format!(
                "layer {l} out of range (model has {} layers)",
                attn.len()
            )));
        }
    }
    let shape = attn[0].shape().to_vec();
    if shape.len() != 4 || shape[2] != shape[3] {
        return Err(DsaError::Shape {
            op: "patch_importance",
            detail: format!("attention must be (B, H, T, T), got {shape:?}"),
        });
    }
    let (b, h, t) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(b);
    for e in 0..b {
        let mut per_layer = Vec::with_capacity(attn.len());
        for layer in attn {
            if layer.shape() != shape.as_slice() {
                return Err(DsaError::Shape {
                    op: "patch_importance",
                    detail: format!("layer shapes differ: {:?} vs {shape:?}", layer.shape()),
                });
            }
            let mut t_scores = vec![0.0f64; t];
            let data = layer.data();
            let base = e * h * t * t;
            for hi in 0..h * t {
                let row = &data[base + hi * t..base + (hi + 1) * t];
                for (j, &v) in row.iter().enumerate() {
                    t_scores[j] += v;
                }
            }
            per_layer.push(t_scores);
        }
        let aggregate: Vec<f64> = match mode {
            LayerMode::SumAll => {
                (0..t).map(|j| per_layer.iter().map(|l| l[j]).sum()).collect()
            }
            LayerMode::Single(l) => per_layer[l].clone(),
        };
        let mut ranking: Vec<usize> = (0..t).collect();
        ranking.sort_by(|&a, &c| {
            aggregate[c].partial_cmp(&aggregate[a]).expect("finite scores").then(a.cmp(&c))
        });
        out.push(PatchImportance { per_layer, aggregate, ranking });
    }
    Ok(out)
}

/// Top-k image-patch indices (class token never selectable). `exclude`
/// holds additional image-patch ids to skip.
pub fn select_patches(imp: &PatchImportance, k: usize, exclude: &[usize]) -> Result<Vec<usize>> {
    let n = imp.aggregate.len() - 1; // drop the class token
    let available = (0..n).filter(|p| !exclude.contains(p)).count();
    if k == 0 || k > available {
        return Err(DsaError::Config(format!(
            "k must lie in 1..={available} (n={n}, {} excluded), got {k}",
            exclude.len()
        )));
    }
    Ok(imp
        .ranking
        .iter()
        .filter_map(|&tok| tok.checked_sub(1)) // token j ↦ patch j−1; cls → None
        .filter(|p| !exclude.contains(p))
        .take(k)
        .collect())
}

/// Per-example attention mass received by masked tokens: builds the (B,)
/// node Σ_{h,i,j} a[b,h,i,j]·mask[j] from an (B,H,T,T) attention node.
pub fn attention_loss_node(tape: &mut Tape, a4: NodeId, token_mask: &Tensor) -> Result<NodeId> {
    let shape = tape.shape(a4).to_vec();
    let b = shape[0];
    let cols = tape.permute(a4, &[0, 3, 1, 2])?; // (B, T_j, H, T_i)
    let colsum = tape.sum_last(cols, 2)?; // (B, T_j)
    let mask = tape.constant(token_mask.clone());
    let mask_b = tape.repeat_lead(mask, b)?; // (B, T)
    let masked = tape.mul(colsum, mask_b)?;
    tape.sum_last(masked, 1)
}

/// PCGrad combination in perturbation space. Returns the ascent
/// direction δ = ∇L − α Σ_l β_l ∇L_S and each layer's β_l.
pub fn pcgrad_combine(
    grad_total: &[f64],
    grad_s: &[f64],
    grad_attn_layers: &[&[f64]],
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let norm_sq: f64 = grad_s.iter().map(|g| g * g).sum();
    let mut betas = Vec::with_capacity(grad_attn_layers.len());
    for ga in grad_attn_layers {
        if ga.len() != grad_s.len() || grad_total.len() != grad_s.len() {
            return Err(DsaError::Shape {
                op: "pcgrad",
                detail: format!(
                    "gradient lengths differ: total {}, sensitive {}, attention {}",
                    grad_total.len(),
                    grad_s.len(),
                    ga.len()
                ),
            });
        }
        let dot: f64 = grad_s.iter().zip(ga.iter()).map(|(a, b)| a * b).sum();
        let beta = if dot > 0.0 {
            0.0
        } else if norm_sq == 0.0 {
            if dot < 0.0 {
                log::warn!("pcgrad: ‖∇L_S‖ = 0 with a conflicting layer; forcing β = 0");
            }
            0.0
        } else {
            dot / norm_sq
        };
        betas.push(beta);
    }
    let correction: f64 = betas.iter().sum::<f64>() * alpha;
    let delta: Vec<f64> = grad_total
        .iter()
        .zip(grad_s.iter())
        .map(|(&gt, &gs)| gt - correction * gs)
        .collect();
    Ok((delta, betas))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub loss_s: f64,
    pub loss_t: f64,
    /// Unweighted Σ_l L_Attn.
    pub loss_attn: f64,
}

impl StepTrace {
    pub fn total(&self, alpha: f64) -> f64 {
        self.loss_s - self.loss_t + alpha * self.loss_attn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub k: usize,
    pub alpha: f64,
    pub eta: f64,
    pub steps: usize,
    /// Clamp perturbed pixels back to [0,1] after every step.
    pub project: bool,
    pub pcgrad: bool,
    pub layer_mode: LayerMode,
    /// Examples attacked per tape.
    pub chunk: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            k: 3,
            alpha: 0.5,
            eta: 0.05,
            steps: 100,
            project: true,
            pcgrad: true,
            layer_mode: LayerMode::SumAll,
            chunk: 32,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DsaError::Config("attack needs steps ≥ 1".into()));
        }
        if self.chunk == 0 {
            return Err(DsaError::Config("chunk must be ≥ 1".into()));
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(DsaError::Config(format!("eta must be ≥ 0, got {}", self.eta)));
        }
        Ok(())
    }
}

pub struct AttackOutcome {
    /// Source dataset with perturbed pixels; labels and ground-truth
    /// patch metadata are copied through.
    pub adv: Dataset,
    /// Selected image-patch ids per example.
    pub selected: Vec<Vec<usize>>,
    /// Per-example loss trace: pre-update values at every step, plus one
    /// final entry for the finished perturbation (steps + 1 entries).
    pub traces: Vec<Vec<StepTrace>>,
    /// Whether the sensitive-head prediction changed clean → adversarial.
    pub flipped: Vec<bool>,
}

impl AttackOutcome {
    pub const SIDECAR_HEADER: &'static str =
        "index,selected,loss_s,loss_t,loss_attn,flipped";

    /// One sidecar CSV row per example (final losses).
    pub fn sidecar_csv(&self) -> String {
        let mut out = String::from(Self::SIDECAR_HEADER);
        for i in 0..self.selected.len() {
            let sel = self.selected[i]
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join("|");
            let last = self.traces[i].last().expect("steps ≥ 1");
            out.push_str(&format!(
                "\n{i},{sel},{:.6},{:.6},{:.6},{}",
                last.loss_s, last.loss_t, last.loss_attn, self.flipped[i]
            ));
        }
        out.push('\n');
        out
    }

    pub fn flip_rate(&self) -> f64 {
        if self.flipped.is_empty() {
            return 0.0;
        }
        self.flipped.iter().filter(|&&f| f).count() as f64 / self.flipped.len() as f64
    }
}

/// Per-chunk loss nodes: per-example vectors plus summed roots.
struct ChunkLosses {
    ls_vec: NodeId,
    lt_vec: NodeId,
    attn_vecs: Vec<NodeId>,
    total_sum: NodeId,
    ls_sum: NodeId,
    attn_sums: Vec<NodeId>,
}

fn chunk_losses(
    tape: &mut Tape,
    nodes: &ParamNodes,
    vit_cfg: &ViTConfig,
    patches: NodeId,
    y: &[usize],
    s: &[usize],
    masks: &[Tensor],
    alpha: f64,
) -> Result<ChunkLosses> {
    let tokens = embed(tape, nodes, vit_cfg, patches)?;
    let (attn, feat) = encode(tape, nodes, vit_cfg, tokens)?;
    let logits_s = head_logits(tape, nodes.head_s, feat)?;
    let logits_t = head_logits(tape, nodes.head_t, feat)?;
    let ls_vec = tape.cross_entropy(logits_s, s)?;
    let lt_vec = tape.cross_entropy(logits_t, y)?;

    // one shared (B, T) mask tensor would hide which rows belong to which
    // example's P, so each example gets its own mask row
    let b = y.len();
    let t = vit_cfg.seq_len();
    let mut mask_data = Vec::with_capacity(b * t);
    for m in masks {
        mask_data.extend_from_slice(m.data());
    }
    let mask_b = {
        let t_mask = Tensor::new(vec![b, t], mask_data)?;
        tape.constant(t_mask)
    };

    let mut attn_vecs = Vec::with_capacity(attn.len());
    for &a4 in &attn {
        let cols = tape.permute(a4, &[0, 3, 1, 2])?;
        let colsum = tape.sum_last(cols, 2)?; // (B, T)
        let masked = tape.mul(colsum, mask_b)?;
        attn_vecs.push(tape.sum_last(masked, 1)?); // (B,)
    }

    // total per example: L_S − L_T + α Σ_l L_Attn
    let mut total_vec = tape.sub(ls_vec, lt_vec)?;
    for &av in &attn_vecs {
        let scaled = tape.scale(av, alpha)?;
        total_vec = tape.add(total_vec, scaled)?;
    }
    let total_sum = tape.sum_all(total_vec)?;
    let ls_sum = tape.sum_all(ls_vec)?;
    let attn_sums: Vec<NodeId> =
        attn_vecs.iter().map(|&av| tape.sum_all(av)).collect::<Result<_>>()?;
    Ok(ChunkLosses { ls_vec, lt_vec, attn_vecs, total_sum, ls_sum, attn_sums })
}

/// Attacks every example of `ds` against the frozen model.
pub fn run_attack(
    cfg: &AttackConfig,
    vit_cfg: &ViTConfig,
    params: &ViTParams,
    ds: &Dataset,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let n_patches = vit_cfg.n_patches();
    let pd = vit_cfg.patch_dim();
    let t_len = vit_cfg.seq_len();
    let n = ds.len();

    // patch selection from the clean inputs
    let mut selected: Vec<Vec<usize>> = Vec::with_capacity(n);
    let all_idx: Vec<usize> = (0..n).collect();
    for block in all_idx.chunks(cfg.chunk) {
        let patches = dataset_patches(vit_cfg, ds, block)?;
        let out = forward_frozen(vit_cfg, params, patches)?;
        for imp in patch_importance(&out.attn, cfg.layer_mode)? {
            selected.push(select_patches(&imp, cfg.k, &[])?);
        }
    }

    let mut adv = ds.clone();
    let mut traces: Vec<Vec<StepTrace>> = vec![Vec::with_capacity(cfg.steps); n];
    let mut flipped = vec![false; n];

    for block in all_idx.chunks(cfg.chunk) {
        let b = block.len();
        let base = dataset_patches(vit_cfg, ds, block)?; // clean X, (B, n, pd)
        let base_data = base.data().to_vec();
        let mut perturbation = vec![0.0f64; b * n_patches * pd]; // E, masked rows only
        let mut opts: Vec<Optimizer> = (0..b).map(|_| Optimizer::adam()).collect();
        let masks: Vec<Tensor> = block
            .iter()
            .enumerate()
            .map(|(j, _)| {
                let mut m = vec![0.0; t_len];
                for &p in &selected[block[j]] {
                    m[p + 1] = 1.0; // token index = patch id + 1
                }
                Tensor::new(vec![t_len], m)
            })
            .collect::<Result<_>>()?;
        let y: Vec<usize> = block.iter().map(|&i| ds.examples[i].y as usize).collect();
        let s: Vec<usize> = block.iter().map(|&i| ds.examples[i].s as usize).collect();

        let clean_pred_s = {
            let out = forward_frozen(vit_cfg, params, base.clone())?;
            argmax_rows(&out.logits_s)
        };

        for step in 0..cfg.steps {
            let xprime: Vec<f64> =
                base_data.iter().zip(&perturbation).map(|(x, e)| x + e).collect();
            let mut tape = Tape::new();
            let nodes = ParamNodes::insert(&mut tape, params, false);
            let input = tape.leaf(Tensor::new(vec![b, n_patches, pd], xprime)?, true);
            let losses = chunk_losses(&mut tape, &nodes, vit_cfg, input, &y, &s, &masks, cfg.alpha)
                .map_err(|e| attack_context(e, step))?;

            for (j, &i) in block.iter().enumerate() {
                traces[i].push(StepTrace {
                    loss_s: tape.data(losses.ls_vec)[j],
                    loss_t: tape.data(losses.lt_vec)[j],
                    loss_attn: losses.attn_vecs.iter().map(|&av| tape.data(av)[j]).sum(),
                });
            }

            let mut roots = vec![losses.total_sum, losses.ls_sum];
            roots.extend_from_slice(&losses.attn_sums);
            let mut grads = tape.grad_multi(&roots).map_err(|e| attack_context(e, step))?;
            let g_total = grads[0].take(input).expect("input requires grad");
            let g_s = grads[1].take(input).expect("input requires grad");
            let g_attn: Vec<Vec<f64>> = grads[2..]
                .iter_mut()
                .map(|g| g.take(input).expect("input requires grad"))
                .collect();

            for (j, &i) in block.iter().enumerate() {
                // restrict every gradient to example j's selected rows
                let rows = &selected[i];
                let gather = |g: &[f64]| -> Vec<f64> {
                    let mut v = Vec::with_capacity(rows.len() * pd);
                    for &p in rows {
                        let o = (j * n_patches + p) * pd;
                        v.extend_from_slice(&g[o..o + pd]);
                    }
                    v
                };
                let gt = gather(&g_total);
                let gs = gather(&g_s);
                let gas: Vec<Vec<f64>> = g_attn.iter().map(|g| gather(g)).collect();
                let ga_refs: Vec<&[f64]> = gas.iter().map(|v| v.as_slice()).collect();
                let delta = if cfg.pcgrad {
                    pcgrad_combine(&gt, &gs, &ga_refs, cfg.alpha)?.0
                } else {
                    gt
                };
                // ascent: Adam minimizes, so feed −δ
                let neg: Vec<f64> = delta.iter().map(|d| -d).collect();
                let mut e_rows: Vec<f64> = {
                    let mut v = Vec::with_capacity(rows.len() * pd);
                    for &p in rows {
                        let o = (j * n_patches + p) * pd;
                        v.extend_from_slice(&perturbation[o..o + pd]);
                    }
                    v
                };
                opts[j].apply(cfg.eta, &mut [&mut e_rows], &[&neg])?;
                for (ri, &p) in rows.iter().enumerate() {
                    let o = (j * n_patches + p) * pd;
                    for c in 0..pd {
                        let mut e = e_rows[ri * pd + c];
                        if cfg.project {
                            let x = base_data[o + c];
                            e = (x + e).clamp(0.0, 1.0) - x;
                        }
                        perturbation[o + c] = e;
                    }
                }
            }
        }

        // write back perturbed pixels, evaluate flips, record final losses
        let final_patches: Vec<f64> =
            base_data.iter().zip(&perturbation).map(|(x, e)| x + e).collect();
        let final_t = Tensor::new(vec![b, n_patches, pd], final_patches)?;
        let out = forward_frozen(vit_cfg, params, final_t.clone())?;
        let adv_pred_s = argmax_rows(&out.logits_s);
        let final_imps = patch_importance(&out.attn, LayerMode::SumAll)?;
        for (j, &i) in block.iter().enumerate() {
            flipped[i] = adv_pred_s[j] != clean_pred_s[j];
            let loss_attn: f64 = final_imps[j]
                .per_layer
                .iter()
                .map(|t| selected[i].iter().map(|&p| t[p + 1]).sum::<f64>())
                .sum();
            traces[i].push(StepTrace {
                loss_s: ce_row(&out.logits_s, j, s[j]),
                loss_t: ce_row(&out.logits_t, j, y[j]),
                loss_attn,
            });
            let one = Tensor::new(
                vec![n_patches, pd],
                final_t.data()[j * n_patches * pd..(j + 1) * n_patches * pd].to_vec(),
            )?;
            let img = unpatchify(&one, vit_cfg)?;
            adv.examples[i].image = img.data().iter().map(|&v| v as f32).collect();
        }
    }
    Ok(AttackOutcome { adv, selected, traces, flipped })
}

/// Cross-entropy of one logits row against its label (max-subtracted LSE).
fn ce_row(logits: &Tensor, row: usize, label: usize) -> f64 {
    let k = *logits.shape().last().expect("class axis");
    let r = &logits.data()[row * k..(row + 1) * k];
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - r[label]
}

fn attack_context(e: DsaError, step: usize) -> DsaError {
    match e {
        DsaError::NonFinite { context } => {
            DsaError::NonFinite { context: format!("attack step {step}: {context}") }
        }
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    Zero,
    /// Mean pixel value over the dataset being masked.
    Mean,
}

impl std::str::FromStr for FillMode {
    type Err = DsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(FillMode::Zero),
            "mean" => Ok(FillMode::Mean),
            other => Err(DsaError::Config(format!("unknown fill mode {other:?} (zero|mean)"))),
        }
    }
}

/// AM baseline: replaces each example's top-k attended patches with the
/// fill value. `k = 0` is the identity. Returns the masked dataset and
/// the per-example selections.
pub fn am_mask_dataset(
    k: usize,
    fill: FillMode,
    layer_mode: LayerMode,
    vit_cfg: &ViTConfig,
    params: &ViTParams,
    ds: &Dataset,
    chunk: usize,
) -> Result<(Dataset, Vec<Vec<usize>>)> {
    let mut masked = ds.clone();
    let mut selections: Vec<Vec<usize>> = Vec::with_capacity(ds.len());
    if k == 0 {
        selections.resize(ds.len(), Vec::new());
        return Ok((masked, selections));
    }
    let fill_value = match fill {
        FillMode::Zero => 0.0f32,
        FillMode::Mean => {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for e in &ds.examples {
                sum += e.image.iter().map(|&v| v as f64).sum::<f64>();
                count += e.image.len();
            }
            (sum / count.max(1) as f64) as f32
        }
    };
    let ps = vit_cfg.patch_size;
    let (h, w) = vit_cfg.image_hw;
    let grid_w = w / ps;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for block in idx.chunks(chunk.max(1)) {
        let patches = dataset_patches(vit_cfg, ds, block)?;
        let out = forward_frozen(vit_cfg, params, patches)?;
        let imps = patch_importance(&out.attn, layer_mode)?;
        for (imp, &i) in imps.iter().zip(block) {
            let sel = select_patches(imp, k, &[])?;
            for &p in &sel {
                let (pr, pc) = (p / grid_w, p % grid_w);
                for c in 0..vit_cfg.channels {
                    for py in 0..ps {
                        for px in 0..ps {
                            masked.examples[i].image
                                [c * h * w + (pr * ps + py) * w + (pc * ps + px)] = fill_value;
                        }
                    }
                }
            }
            selections.push(sel);
        }
    }
    Ok((masked, selections))
}
