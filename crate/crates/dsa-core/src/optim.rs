//! Optimizers (SGD with momentum, Adam), global-norm gradient clipping,
//! and the warmup-plus-cosine learning-rate schedule.

use crate::error::{DsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer over a fixed list of parameter slots. Slot `i` keeps moment
/// buffers sized on first use; callers must present parameters in the same
/// order every step.
pub struct Optimizer {
    kind: OptimKind,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd_momentum(momentum: f64) -> Self {
        Optimizer { kind: OptimKind::SgdMomentum { momentum }, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Adam with the conventional defaults β1=0.9, β2=0.999, ε=1e-8.
    pub fn adam() -> Self {
        Optimizer {
            kind: OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every (parameter, gradient) pair. Lengths must match
    /// slot for slot across calls.
    pub fn apply(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(DsaError::Shape {
                op: "optimizer_apply",
                detail: format!("{} params vs {} grads", params.len(), grads.len()),
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.kind, OptimKind::Adam { .. }) {
                self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
            }
        }
        if self.m.len() != params.len() {
            return Err(DsaError::Shape {
                op: "optimizer_apply",
                detail: format!("optimizer has {} slots, got {} params", self.m.len(), params.len()),
            });
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(DsaError::Shape {
                    op: "optimizer_apply",
                    detail: format!("slot {i}: param {} / grad {} / moment {}", p.len(), g.len(), self.m[i].len()),
                });
            }
            match self.kind {
                OptimKind::SgdMomentum { momentum } => {
                    let mbuf = &mut self.m[i];
                    for j in 0..p.len() {
                        mbuf[j] = momentum * mbuf[j] + g[j];
                        p[j] -= lr * mbuf[j];
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(self.step as i32);
                    let bc2 = 1.0 - beta2.powi(self.step as i32);
                    let (mbuf, vbuf) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.len() {
                        mbuf[j] = beta1 * mbuf[j] + (1.0 - beta1) * g[j];
                        vbuf[j] = beta2 * vbuf[j] + (1.0 - beta2) * g[j] * g[j];
                        let mhat = mbuf[j] / bc1;
                        let vhat = vbuf[j] / bc2;
                        p[j] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales all gradients by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    if grads.is_empty() {
        return Err(DsaError::Config("clip_global_norm called with no gradients".into()));
    }
    if max_norm <= 0.0 {
        return Err(DsaError::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    Ok(norm)
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
/// Steps outside [0, total_steps] are clamped.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    debug_assert!(warmup_steps < total_steps.max(1));
    let step = step.min(total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
