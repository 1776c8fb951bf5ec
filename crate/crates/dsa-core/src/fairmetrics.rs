//! Group confusion statistics and fairness/utility metrics.
//!
//! All metrics reduce to per-group TPR/FPR/TNR. A rate whose denominator
//! is zero (an empty (y, s) cell — reachable on small test sets) is
//! `None`, and every metric touching it is `None` in turn: undefined is
//! explicit, never 0.0 or NaN. Signed and absolute values are both
//! reported; tables conventionally show magnitudes.
//!
//! Note: "demographic parity" here is the TPR gap TPR₁ − TPR₀ (the
//! convention of the method this artifact reproduces), not the standard
//! positive-prediction-rate gap.

use serde::{Deserialize, Serialize};

use crate::error::{DsaError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    fn rate(num: u64, den: u64) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    pub fn tpr(&self) -> Option<f64> {
        Self::rate(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn fpr(&self) -> Option<f64> {
        Self::rate(self.false_pos, self.false_pos + self.true_neg)
    }

    pub fn tnr(&self) -> Option<f64> {
        Self::rate(self.true_neg, self.true_neg + self.false_pos)
    }
}

/// Confusion counts split by sensitive group: `groups[s]` for s ∈ {0,1}.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfusion {
    pub groups: [Counts; 2],
}

fn check_binary(name: &str, labels: &[u8]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&v| v > 1) {
        return Err(DsaError::Malformed {
            what: "labels",
            detail: format!("{name} must be binary, found {bad}"),
        });
    }
    Ok(())
}

pub fn confusion(predictions: &[u8], y: &[u8], s: &[u8]) -> Result<GroupConfusion> {
    if predictions.len() != y.len() || y.len() != s.len() {
        return Err(DsaError::Malformed {
            what: "labels",
            detail: format!(
                "length mismatch: {} predictions, {} targets, {} groups",
                predictions.len(),
                y.len(),
                s.len()
            ),
        });
    }
    if predictions.is_empty() {
        return Err(DsaError::Malformed { what: "labels", detail: "no examples to evaluate".into() });
    }
    check_binary("predictions", predictions)?;
    check_binary("targets", y)?;
    check_binary("groups", s)?;
    let mut c = GroupConfusion::default();
    for i in 0..y.len() {
        let g = &mut c.groups[s[i] as usize];
        match (predictions[i], y[i]) {
            (1, 1) => g.true_pos += 1,
            (1, 0) => g.false_pos += 1,
            (0, 0) => g.true_neg += 1,
            (0, 1) => g.false_neg += 1,
            _ => unreachable!("binary-checked above"),
        }
    }
    Ok(c)
}

impl GroupConfusion {
    pub fn total(&self) -> u64 {
        self.groups[0].total() + self.groups[1].total()
    }

    /// TPR₁ − TPR₀ (the TPR-gap reading of demographic parity).
    pub fn demographic_parity(&self) -> Option<f64> {
        Some(self.groups[1].tpr()? - self.groups[0].tpr()?)
    }

    /// ½(TPR₁ − TPR₀) + ½(FPR₁ − FPR₀).
    pub fn equalized_odds(&self) -> Option<f64> {
        let dt = self.groups[1].tpr()? - self.groups[0].tpr()?;
        let df = self.groups[1].fpr()? - self.groups[0].fpr()?;
        Some(0.5 * dt + 0.5 * df)
    }

    /// ¼(TPR₀ + TNR₀ + TPR₁ + TNR₁).
    pub fn balanced_accuracy(&self) -> Option<f64> {
        Some(
            0.25 * (self.groups[0].tpr()?
                + self.groups[0].tnr()?
                + self.groups[1].tpr()?
                + self.groups[1].tnr()?),
        )
    }

    /// ½(TPR₁ + TNR₁) − ½(TPR₀ + TNR₀).
    pub fn dba(&self) -> Option<f64> {
        let b1 = 0.5 * (self.groups[1].tpr()? + self.groups[1].tnr()?);
        let b0 = 0.5 * (self.groups[0].tpr()? + self.groups[0].tnr()?);
        Some(b1 - b0)
    }

    pub fn accuracy(&self) -> f64 {
        let correct = self.groups[0].true_pos
            + self.groups[0].true_neg
            + self.groups[1].true_pos
            + self.groups[1].true_neg;
        correct as f64 / self.total() as f64
    }
}

/// Undefined metrics (empty cells) serialize as JSON null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub n: u64,
    pub acc: f64,
    pub ba: Option<f64>,
    pub dp: Option<f64>,
    pub dp_abs: Option<f64>,
    pub eo: Option<f64>,
    pub eo_abs: Option<f64>,
    pub dba: Option<f64>,
    pub dba_abs: Option<f64>,
    pub delta_tpr: Option<f64>,
    pub tpr: [Option<f64>; 2],
    pub fpr: [Option<f64>; 2],
    pub tnr: [Option<f64>; 2],
}

impl FairnessReport {
    pub fn from_confusion(c: &GroupConfusion) -> Self {
        let dp = c.demographic_parity();
        let eo = c.equalized_odds();
        let dba = c.dba();
        FairnessReport {
            n: c.total(),
            acc: c.accuracy(),
            ba: c.balanced_accuracy(),
            dp,
            dp_abs: dp.map(f64::abs),
            eo,
            eo_abs: eo.map(f64::abs),
            dba,
            dba_abs: dba.map(f64::abs),
            delta_tpr: dp,
            tpr: [c.groups[0].tpr(), c.groups[1].tpr()],
            fpr: [c.groups[0].fpr(), c.groups[1].fpr()],
            tnr: [c.groups[0].tnr(), c.groups[1].tnr()],
        }
    }

    pub const CSV_HEADER: &'static str =
        "label,n,acc,ba,eo_abs,dp_abs,dba_abs,eo,dp,dba,tpr0,tpr1,fpr0,fpr1";

    /// One CSV row; undefined fields render as NA.
    pub fn csv_row(&self, label: &str) -> String {
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        format!(
            "{label},{},{:.6},{},{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.acc,
            f(self.ba),
            f(self.eo_abs),
            f(self.dp_abs),
            f(self.dba_abs),
            f(self.eo),
            f(self.dp),
            f(self.dba),
            f(self.tpr[0]),
            f(self.tpr[1]),
            f(self.fpr[0]),
            f(self.fpr[1]),
        )
    }
}
