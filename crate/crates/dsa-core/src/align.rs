//! Attention-alignment regularizers between clean and perturbed maps.
//!
//! Each metric compares attention rows (the last axis) of paired
//! per-layer tensors shaped (B, heads, rows, row_len). The aligned index
//! set is every (head, row) slice by default, or only class-token rows.
//! Per example the row distances are summed; the batch is averaged so
//! the regularizer scales like the mean CE terms it sits next to; layers
//! are summed. Everything is built on the tape, so gradients flow into
//! both maps.

use std::fmt;
use std::str::FromStr;

use crate::error::{DsaError, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Additive smoothing inside the KL logarithm; softmax rows can
/// underflow f32 when round-tripped through a checkpoint or dataset.
pub const KL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMetric {
    Mse,
    Kl,
    At,
}

impl FromStr for AlignMetric {
    type Err = DsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(AlignMetric::Mse),
            "kl" => Ok(AlignMetric::Kl),
            "at" => Ok(AlignMetric::At),
            other => Err(DsaError::Config(format!("unknown alignment metric {other:?} (mse|kl|at)"))),
        }
    }
}

impl fmt::Display for AlignMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMetric::Mse => "mse",
            AlignMetric::Kl => "kl",
            AlignMetric::At => "at",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignRows {
    /// Every (head, row) slice.
    All,
    /// Only each head's class-token row (row 0).
    Cls,
}

impl FromStr for AlignRows {
    type Err = DsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(AlignRows::All),
            "cls" => Ok(AlignRows::Cls),
            other => Err(DsaError::Config(format!("unknown row selection {other:?} (all|cls)"))),
        }
    }
}

impl fmt::Display for AlignRows {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignRows::All => "all",
            AlignRows::Cls => "cls",
        })
    }
}

/// Flattens (B, H, R, T) into aligned rows (B, n_rows, T).
fn row_view(tape: &mut Tape, a: NodeId, rows: AlignRows) -> Result<NodeId> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 4 {
        return Err(DsaError::Shape {
            op: "alignment",
            detail: format!("attention tensor must be rank 4, got {shape:?}"),
        });
    }
    let (b, h, r, t) = (shape[0], shape[1], shape[2], shape[3]);
    match rows {
        AlignRows::All => tape.reshape(a, vec![b, h * r, t]),
        AlignRows::Cls => tape.select(a, 2, 0), // (B, H, T)
    }
}

/// ½ Σ_rows ‖p_row − q_row‖₂, batch-averaged.
fn mse_rows(tape: &mut Tape, p: NodeId, q: NodeId) -> Result<NodeId> {
    let d = tape.sub(p, q)?;
    let sq = tape.mul(d, d)?;
    let ssq = tape.sum_last(sq, 1)?;
    let norms = tape.sqrt(ssq)?;
    let per_ex = tape.sum_last(norms, 1)?;
    let mean = tape.mean_all(per_ex)?;
    tape.scale(mean, 0.5)
}

/// Σ_rows Σ_j p log((p+ε)/(q+ε)), batch-averaged.
fn kl_rows(tape: &mut Tape, p: NodeId, q: NodeId) -> Result<NodeId> {
    let lp = {
        let sm = tape.affine(p, 1.0, KL_EPS)?;
        tape.ln(sm)?
    };
    let lq = {
        let sm = tape.affine(q, 1.0, KL_EPS)?;
        tape.ln(sm)?
    };
    let d = tape.sub(lp, lq)?;
    let term = tape.mul(p, d)?;
    let per_ex = tape.sum_last(term, 2)?;
    tape.mean_all(per_ex)
}

/// ½ Σ_rows ‖p̂_row − q̂_row‖₂ over L2-normalized rows, batch-averaged.
fn at_rows(tape: &mut Tape, p: NodeId, q: NodeId) -> Result<NodeId> {
    let mut normalize = |x: NodeId| -> Result<NodeId> {
        let sq = tape.mul(x, x)?;
        let ssq = tape.sum_last(sq, 1)?;
        let norm = tape.sqrt(ssq)?;
        let inv = tape.recip(norm)?;
        tape.mul_bcast_last(x, inv)
    };
    let pn = normalize(p)?;
    let qn = normalize(q)?;
    mse_rows(tape, pn, qn)
}

/// Alignment loss over per-layer attention pairs (clean, perturbed);
/// layer contributions are summed.
pub fn alignment_loss(
    tape: &mut Tape,
    pairs: &[(NodeId, NodeId)],
    metric: AlignMetric,
    rows: AlignRows,
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(DsaError::Shape { op: "alignment", detail: "no attention pairs".into() });
    }
    let mut total: Option<NodeId> = None;
    for &(a_x, a_xp) in pairs {
        if tape.shape(a_x) != tape.shape(a_xp) {
            return Err(DsaError::Shape {
                op: "alignment",
                detail: format!(
                    "pair shapes differ: {:?} vs {:?}",
                    tape.shape(a_x),
                    tape.shape(a_xp)
                ),
            });
        }
        let p = row_view(tape, a_x, rows)?;
        let q = row_view(tape, a_xp, rows)?;
        let layer = match metric {
            AlignMetric::Mse => mse_rows(tape, p, q)?,
            AlignMetric::Kl => kl_rows(tape, p, q)?,
            AlignMetric::At => at_rows(tape, p, q)?,
        };
        total = Some(match total {
            None => layer,
            Some(t) => tape.add(t, layer)?,
        });
    }
    Ok(total.expect("pairs nonempty"))
}

/// Convenience: evaluate the loss on constant tensors (one per layer).
pub fn alignment_value(
    a_x: &[Tensor],
    a_xp: &[Tensor],
    metric: AlignMetric,
    rows: AlignRows,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pairs: Vec<(NodeId, NodeId)> = a_x
        .iter()
        .zip(a_xp)
        .map(|(x, xp)| (tape.constant(x.clone()), tape.constant(xp.clone())))
        .collect();
    let loss = alignment_loss(&mut tape, &pairs, metric, rows)?;
    tape.scalar_value(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::tensor::{fd_gradient, max_rel_err};

    fn t4(b: usize, h: usize, r: usize, t: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![b, h, r, t], data).unwrap()
    }

    fn single_row(row: Vec<f64>) -> Tensor {
        let t = row.len();
        t4(1, 1, 1, t, row)
    }

    fn value(p: Tensor, q: Tensor, metric: AlignMetric) -> f64 {
        alignment_value(&[p], &[q], metric, AlignRows::All).unwrap()
    }

    #[test]
    fn identical_maps_score_zero_under_every_metric() {
        let mut rng = CounterRng::new(3, 0);
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| rng.uniform() + 0.1).collect();
        let a = t4(2, 2, 3, 3, data);
        for metric in [AlignMetric::Mse, AlignMetric::Kl, AlignMetric::At] {
            let v = value(a.clone(), a.clone(), metric);
            assert!(v.abs() < 1e-12, "{metric}: {v}");
        }
    }

    #[test]
    fn disjoint_unit_rows_give_half_sqrt_two() {
        let p = single_row(vec![1.0, 0.0]);
        let q = single_row(vec![0.0, 1.0]);
        let expect = 0.5 * 2.0f64.sqrt();
        assert!((value(p.clone(), q.clone(), AlignMetric::Mse) - expect).abs() < 1e-12);
        assert!((value(p, q, AlignMetric::At) - expect).abs() < 1e-9);
    }

    #[test]
    fn mse_is_symmetric_in_arguments() {
        let mut rng = CounterRng::new(9, 0);
        let d1: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
        let d2: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
        let p = t4(1, 2, 2, 4, d1);
        let q = t4(1, 2, 2, 4, d2);
        let ab = value(p.clone(), q.clone(), AlignMetric::Mse);
        let ba = value(q, p, AlignMetric::Mse);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_form_and_asymmetry() {
        let p = single_row(vec![0.5, 0.5]);
        let q = single_row(vec![0.25, 0.75]);
        let expect = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let fwd = value(p.clone(), q.clone(), AlignMetric::Kl);
        assert!((fwd - expect).abs() < 1e-6, "{fwd} vs {expect}");
        let rev = value(q, p, AlignMetric::Kl);
        assert!((fwd - rev).abs() > 1e-3, "kl should be asymmetric: {fwd} vs {rev}");
    }

    #[test]
    fn kl_smoothing_barely_moves_bounded_rows() {
        // rows bounded away from 0 by 1e-3: smoothed vs exact < 1e-5
        let p = vec![0.4, 0.35, 0.25];
        let q = vec![0.3, 0.001, 0.699];
        let exact: f64 = p.iter().zip(&q).map(|(&a, &b): (&f64, &f64)| a * (a / b).ln()).sum();
        let smoothed = value(single_row(p), single_row(q), AlignMetric::Kl);
        assert!((smoothed - exact).abs() < 1e-5, "{smoothed} vs {exact}");
    }

    #[test]
    fn at_ignores_per_row_scale() {
        let mut rng = CounterRng::new(17, 0);
        let d1: Vec<f64> = (0..24).map(|_| rng.uniform() + 0.05).collect();
        let d2: Vec<f64> = (0..24).map(|_| rng.uniform() + 0.05).collect();
        let p = t4(2, 1, 3, 4, d1.clone());
        let q = t4(2, 1, 3, 4, d2.clone());
        let base = value(p.clone(), q.clone(), AlignMetric::At);
        // rescale each row of each argument by a different positive factor
        let rescale = |data: &[f64], seed: u64| {
            let mut r = CounterRng::new(seed, 1);
            data.chunks(4)
                .flat_map(|row| {
                    let c = 0.2 + 5.0 * r.uniform();
                    row.iter().map(move |&v| c * v).collect::<Vec<_>>()
                })
                .collect::<Vec<f64>>()
        };
        let ps = t4(2, 1, 3, 4, rescale(&d1, 5));
        let qs = t4(2, 1, 3, 4, rescale(&d2, 6));
        let scaled = value(ps, qs, AlignMetric::At);
        assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
        // plain mse is NOT scale invariant on the same inputs
        let m_base = value(p, q, AlignMetric::Mse);
        let m_scaled = value(
            t4(2, 1, 3, 4, rescale(&d1, 5)),
            t4(2, 1, 3, 4, rescale(&d2, 6)),
            AlignMetric::Mse,
        );
        assert!((m_base - m_scaled).abs() > 1e-3);
    }

    #[test]
    fn metrics_are_nonnegative_on_random_rows() {
        let mut rng = CounterRng::new(31, 0);
        for trial in 0..20 {
            // normalized rows so KL ≥ 0 holds
            let mk = |rng: &mut CounterRng| {
                let mut d: Vec<f64> = (0..2 * 2 * 3 * 5).map(|_| rng.uniform() + 0.01).collect();
                for row in d.chunks_mut(5) {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                t4(2, 2, 3, 5, d)
            };
            let p = mk(&mut rng);
            let q = mk(&mut rng);
            for metric in [AlignMetric::Mse, AlignMetric::Kl, AlignMetric::At] {
                let v = value(p.clone(), q.clone(), metric);
                assert!(v >= -1e-9, "trial {trial} {metric}: {v}");
            }
        }
    }

    #[test]
    fn cls_filter_sees_only_row_zero() {
        // two maps that differ only in row 1 → Cls loss is 0, All is not
        let base = vec![0.6, 0.4, 0.3, 0.7];
        let mut other = base.clone();
        other[2] = 0.9;
        other[3] = 0.1;
        let p = t4(1, 1, 2, 2, base);
        let q = t4(1, 1, 2, 2, other);
        let cls = alignment_value(&[p.clone()], &[q.clone()], AlignMetric::Mse, AlignRows::Cls).unwrap();
        let all = alignment_value(&[p], &[q], AlignMetric::Mse, AlignRows::All).unwrap();
        assert!(cls.abs() < 1e-12);
        assert!(all > 0.1);
    }

    #[test]
    fn layers_sum_and_batch_averages() {
        let p = single_row(vec![1.0, 0.0]);
        let q = single_row(vec![0.0, 1.0]);
        let one = alignment_value(&[p.clone()], &[q.clone()], AlignMetric::Mse, AlignRows::All).unwrap();
        let two = alignment_value(
            &[p.clone(), p.clone()],
            &[q.clone(), q.clone()],
            AlignMetric::Mse,
            AlignRows::All,
        )
        .unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
        // duplicating the pair along the batch axis leaves the mean unchanged
        let pb = t4(2, 1, 1, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let qb = t4(2, 1, 1, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let batched = alignment_value(&[pb], &[qb], AlignMetric::Mse, AlignRows::All).unwrap();
        assert!((batched - one).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_for_every_metric() {
        let mut rng = CounterRng::new(41, 0);
        let n = 1 * 2 * 2 * 3;
        let xd: Vec<f64> = (0..n).map(|_| 0.1 + rng.uniform()).collect();
        let qd: Vec<f64> = (0..n).map(|_| 0.1 + rng.uniform()).collect();
        for metric in [AlignMetric::Mse, AlignMetric::Kl, AlignMetric::At] {
            for arg in 0..2 {
                let eval = |pt: &[f64]| -> crate::error::Result<f64> {
                    let mut tape = Tape::new();
                    let (px, qx) = if arg == 0 {
                        (pt.to_vec(), qd.clone())
                    } else {
                        (xd.clone(), pt.to_vec())
                    };
                    let p = tape.constant(t4(1, 2, 2, 3, px));
                    let q = tape.constant(t4(1, 2, 2, 3, qx));
                    let loss = alignment_loss(&mut tape, &[(p, q)], metric, AlignRows::All)?;
                    tape.scalar_value(loss)
                };
                let base = if arg == 0 { xd.clone() } else { qd.clone() };
                let numeric = fd_gradient(eval, &base, 1e-5).unwrap();
                let mut tape = Tape::new();
                let p = tape.leaf(t4(1, 2, 2, 3, xd.clone()), arg == 0);
                let q = tape.leaf(t4(1, 2, 2, 3, qd.clone()), arg == 1);
                let loss = alignment_loss(&mut tape, &[(p, q)], metric, AlignRows::All).unwrap();
                let grads = tape.backward(loss).unwrap();
                let analytic = grads.get(if arg == 0 { p } else { q }).unwrap();
                let err = max_rel_err(analytic, &numeric);
                assert!(err < 1e-3, "{metric} arg{arg}: rel err {err}");
            }
        }
    }
}
