//! Segmentation metrics (Dice, accuracy, mIoU, precision, sensitivity) and
//! the combined BCE + Dice training loss.
//!
//! Hard metrics binarize predictions at 0.5. Zero-denominator conventions:
//! a ratio whose reference set is empty is 1.0 when the prediction agrees
//! (also empty) and 0.0 otherwise.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HARD_THRESHOLD: f64 = 0.5;
/// Probability clamp applied before the BCE logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub acc: f64,
    pub miou: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<SampleMetrics>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dsc: f64,
    pub acc: f64,
    pub miou: f64,
    pub precision: f64,
    pub sensitivity: f64,
}

fn check_pair(op: &'static str, p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs ground truth {:?}", p.shape(), g.shape()),
        ));
    }
    if g.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::shape(op, "ground truth must be strictly binary"));
    }
    if p.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::shape(op, "prediction values must lie in [0, 1]"));
    }
    Ok(())
}

/// TP / FP / TN / FN at the 0.5 threshold.
pub fn confusion(p: &Tensor, g: &Tensor) -> Result<(usize, usize, usize, usize)> {
    check_pair("confusion", p, g)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&pv, &gv) in p.data().iter().zip(g.data().iter()) {
        let pb = pv >= HARD_THRESHOLD;
        let gb = gv != 0.0;
        match (pb, gb) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    Ok((tp, fp, tn, fneg))
}

/// Dice similarity. The soft form uses probabilities directly
/// (2 sum(pg) / (sum(p^2) + sum(g^2))); the hard form thresholds first.
/// Empty-union-empty is 1.0.
pub fn dsc(p: &Tensor, g: &Tensor, soft: bool) -> Result<f64> {
    check_pair("dsc", p, g)?;
    if soft {
        let mut num = 0.0;
        let mut den = 0.0;
        for (&pv, &gv) in p.data().iter().zip(g.data().iter()) {
            num += pv * gv;
            den += pv * pv + gv * gv;
        }
        if den == 0.0 {
            return Ok(1.0);
        }
        Ok(2.0 * num / den)
    } else {
        let (tp, fp, _, fneg) = confusion(p, g)?;
        let den = 2 * tp + fp + fneg;
        if den == 0 {
            return Ok(1.0);
        }
        Ok(2.0 * tp as f64 / den as f64)
    }
}

pub fn sensitivity(p: &Tensor, g: &Tensor) -> Result<f64> {
    let (tp, fp, _, fneg) = confusion(p, g)?;
    // ground truth empty: agree iff no positives were predicted either
    Ok(ratio(tp, tp + fneg, fp == 0))
}

pub fn precision(p: &Tensor, g: &Tensor) -> Result<f64> {
    let (tp, fp, _, fneg) = confusion(p, g)?;
    Ok(ratio(tp, tp + fp, fneg == 0))
}

pub fn accuracy(p: &Tensor, g: &Tensor) -> Result<f64> {
    let (tp, fp, tn, fneg) = confusion(p, g)?;
    Ok((tp + tn) as f64 / (tp + fp + tn + fneg) as f64)
}

/// Mean IoU over the foreground and background classes.
pub fn miou(p: &Tensor, g: &Tensor) -> Result<f64> {
    let (tp, fp, tn, fneg) = confusion(p, g)?;
    let fg = ratio(tp, tp + fp + fneg, true);
    let bg = ratio(tn, tn + fp + fneg, true);
    Ok((fg + bg) / 2.0)
}

fn ratio(num: usize, den: usize, empty_agrees: bool) -> f64 {
    if den == 0 {
        if empty_agrees {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn sample_metrics(id: &str, p: &Tensor, g: &Tensor) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: id.to_string(),
        dsc: dsc(p, g, false)?,
        acc: accuracy(p, g)?,
        miou: miou(p, g)?,
        precision: precision(p, g)?,
        sensitivity: sensitivity(p, g)?,
    })
}

impl MetricReport {
    /// Mean of the per-sample metrics.
    pub fn from_samples(samples: Vec<SampleMetrics>, keep_per_sample: bool) -> MetricReport {
        let n = samples.len();
        let mean = |f: fn(&SampleMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                samples.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricReport {
            dsc: mean(|s| s.dsc),
            acc: mean(|s| s.acc),
            miou: mean(|s| s.miou),
            precision: mean(|s| s.precision),
            sensitivity: mean(|s| s.sensitivity),
            n_samples: n,
            per_sample: keep_per_sample.then_some(samples),
        }
    }
}

/// Area under the ROC curve by trapezoidal integration over the sorted
/// prediction scores. Utility only; not part of the gated metrics.
pub fn roc_auc(p: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair("roc_auc", p, g)?;
    let n_pos = g.data().iter().filter(|&&v| v != 0.0).count();
    let n_neg = g.numel() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(1.0);
    }
    let mut scored: Vec<(f64, bool)> = p
        .data()
        .iter()
        .zip(g.data().iter())
        .map(|(&pv, &gv)| (pv, gv != 0.0))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < scored.len() {
        let score = scored[i].0;
        while i < scored.len() && scored[i].0 == score {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(auc)
}

/// Differentiable loss: w_bce * BCE(p, g) + w_dice * (1 - softDice(p, g)).
/// Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
pub fn bce_dice_loss(
    tape: &mut Tape,
    p: TensorId,
    g: TensorId,
    w_bce: f64,
    w_dice: f64,
) -> Result<TensorId> {
    if tape.shape(p) != tape.shape(g) {
        return Err(Error::shape(
            "bce_dice_loss",
            format!("prediction {:?} vs target {:?}", tape.shape(p), tape.shape(g)),
        ));
    }
    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);

    // BCE = mean(-(g ln p + (1-g) ln(1-p)))
    let ln_p = tape.ln(pc)?;
    let neg_p = tape.mul_scalar(pc, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let ln_1p = tape.ln(one_minus_p)?;
    let neg_g = tape.mul_scalar(g, -1.0);
    let one_minus_g = tape.add_scalar(neg_g, 1.0);
    let pos_term = tape.mul(g, ln_p)?;
    let neg_term = tape.mul(one_minus_g, ln_1p)?;
    let ll = tape.add(pos_term, neg_term)?;
    let mean_ll = tape.mean_all(ll)?;
    let bce = tape.mul_scalar(mean_ll, -1.0);

    // soft Dice = 2 sum(pg) / (sum(p^2) + sum(g^2))
    let pg = tape.mul(pc, g)?;
    let num = tape.sum_all(pg)?;
    let num = tape.mul_scalar(num, 2.0);
    let pp = tape.mul(pc, pc)?;
    let gg = tape.mul(g, g)?;
    let sum_pp = tape.sum_all(pp)?;
    let sum_gg = tape.sum_all(gg)?;
    let den = tape.add(sum_pp, sum_gg)?;
    let dice = tape.div(num, den)?;
    let neg_dice = tape.mul_scalar(dice, -1.0);
    let dice_loss = tape.add_scalar(neg_dice, 1.0);

    let a = tape.mul_scalar(bce, w_bce);
    let b = tape.mul_scalar(dice_loss, w_dice);
    tape.add(a, b)
}
