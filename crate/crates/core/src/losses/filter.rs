use serde::{Deserialize, Serialize};

use super::PartialLabelSet;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStrategy {
    /// Every class retained.
    None,
    /// `θ = fixed_threshold`.
    Fixed,
    /// Per class, `θ_j` = mean of the per-sample IoUs of class `j`.
    BatchMean,
    /// `θ` = mean of the class IoUs.
    TaskMean,
    /// `θ` = the `⌊N/2⌋`-th smallest class IoU (0-based).
    #[default]
    TaskMedian,
    /// Retain `j` when the head's mean confidence `1 − H/ln 2` is at least 0.5.
    Confidence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub strategy: FilterStrategy,
    pub fixed_threshold: f64,
    /// A voxel is foreground when its probability exceeds this level.
    pub binarize_level: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            strategy: FilterStrategy::TaskMedian,
            fixed_threshold: 0.5,
            binarize_level: 0.5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fixed_threshold) {
            return Err(Error::Config(format!(
                "fixed_threshold must lie in [0, 1], got {}",
                self.fixed_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.binarize_level) {
            return Err(Error::Config(format!(
                "binarize_level must lie in [0, 1), got {}",
                self.binarize_level
            )));
        }
        Ok(())
    }
}

/// Which classes keep their consistency term for one batch.
///
/// `retained[j]` is `scores[j] >= thresholds[j]`; `scores` are the IoUs
/// except under [`FilterStrategy::Confidence`]. Index `j` refers to class
/// `j + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterDecision {
    pub iou: Vec<f64>,
    pub scores: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Summary threshold for logging (mean of `thresholds`).
    pub theta: f64,
    pub retained: Vec<bool>,
}

impl FilterDecision {
    /// Decision from batch-aggregate IoUs. `per_sample_iou[b][j]` is only read
    /// by [`FilterStrategy::BatchMean`]; an empty slice makes each class its
    /// own threshold there.
    pub fn from_ious(iou: &[f64], per_sample_iou: &[Vec<f64>], cfg: &FilterConfig) -> Self {
        let n = iou.len();
        let thresholds = match cfg.strategy {
            FilterStrategy::None => vec![0.0; n],
            FilterStrategy::Fixed => vec![cfg.fixed_threshold; n],
            FilterStrategy::TaskMean => vec![iou.iter().sum::<f64>() / n as f64; n],
            FilterStrategy::TaskMedian => vec![task_median(iou); n],
            FilterStrategy::BatchMean if per_sample_iou.is_empty() => iou.to_vec(),
            FilterStrategy::BatchMean => (0..n)
                .map(|j| per_sample_iou.iter().map(|s| s[j]).sum::<f64>() / per_sample_iou.len() as f64)
                .collect(),
            FilterStrategy::Confidence => vec![0.5; n],
        };
        Self::from_scores(iou.to_vec(), iou.to_vec(), thresholds, cfg.strategy)
    }

    fn from_scores(iou: Vec<f64>, scores: Vec<f64>, thresholds: Vec<f64>, strategy: FilterStrategy) -> Self {
        let retained = if strategy == FilterStrategy::None {
            vec![true; scores.len()]
        } else {
            scores.iter().zip(&thresholds).map(|(s, t)| s >= t).collect()
        };
        let theta = if thresholds.is_empty() {
            0.0
        } else {
            thresholds.iter().sum::<f64>() / thresholds.len() as f64
        };
        Self {
            iou,
            scores,
            thresholds,
            theta,
            retained,
        }
    }

    pub fn retained_count(&self) -> usize {
        self.retained.iter().filter(|&&r| r).count()
    }
}

/// The `⌊n/2⌋`-th order statistic (0-based), so that `⌈n/2⌉` distinct values
/// reach it.
fn task_median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[sorted.len() / 2]
}

#[derive(Clone, Copy, Default)]
struct Overlap {
    inter: u64,
    union: u64,
}

impl Overlap {
    fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.inter as f64 / self.union as f64
        }
    }
}

/// Compares the MSH foreground channel of every class with its ATH.
///
/// `msh_probs` is `[B, N+1, ...]` after softmax, `ath_probs[j - 1]` is
/// `[B, 2, ...]` for class `j`. The MSH foreground channel is the same before
/// and after merging, so the raw probabilities are used directly.
pub fn compute_filter<T: Element>(
    msh_probs: &Tensor<T>,
    ath_probs: &[Tensor<T>],
    cfg: &FilterConfig,
) -> Result<FilterDecision> {
    let [b, c, z, y, x] = msh_probs.dims5()?;
    let n = c.checked_sub(1).filter(|&n| n > 0).ok_or_else(|| {
        Error::Shape(format!("MSH probabilities need at least 2 channels, got {c}"))
    })?;
    if ath_probs.len() != n {
        return Err(Error::Shape(format!("expected {n} auxiliary heads, got {}", ath_probs.len())));
    }
    let v = z * y * x;
    for g in ath_probs {
        if g.shape() != [b, 2, z, y, x] {
            return Err(Error::Shape(format!(
                "auxiliary head shape {:?}, expected {:?}",
                g.shape(),
                [b, 2, z, y, x]
            )));
        }
    }
    let level = T::from_f64(cfg.binarize_level);
    let p = msh_probs.data();

    let mut per_sample = vec![vec![0.0; n]; b];
    let mut aggregate = vec![Overlap::default(); n];
    for j in 0..n {
        let g = ath_probs[j].data();
        for bi in 0..b {
            let pj = &p[(bi * c + j + 1) * v..(bi * c + j + 2) * v];
            let gj = &g[(bi * 2 + 1) * v..(bi * 2 + 2) * v];
            let mut o = Overlap::default();
            for (&a, &bb) in pj.iter().zip(gj) {
                let (fa, fb) = (a > level, bb > level);
                o.inter += (fa && fb) as u64;
                o.union += (fa || fb) as u64;
            }
            per_sample[bi][j] = o.iou();
            aggregate[j].inter += o.inter;
            aggregate[j].union += o.union;
        }
    }
    let iou: Vec<f64> = aggregate.iter().map(|o| o.iou()).collect();

    if cfg.strategy == FilterStrategy::Confidence {
        let scores = ath_probs.iter().map(|g| mean_confidence(g, b, v)).collect();
        return Ok(FilterDecision::from_scores(iou, scores, vec![0.5; n], cfg.strategy));
    }
    Ok(FilterDecision::from_ious(&iou, &per_sample, cfg))
}

/// Mean over voxels of `1 − H(g)/ln 2`, with `H` the binary entropy of the
/// foreground probability.
fn mean_confidence<T: Element>(g: &Tensor<T>, batch: usize, v: usize) -> f64 {
    let d = g.data();
    let mut total = 0.0;
    for bi in 0..batch {
        for &f in &d[(bi * 2 + 1) * v..(bi * 2 + 2) * v] {
            let f = f.to_f64().clamp(0.0, 1.0);
            let h = -xlogx(f) - xlogx(1.0 - f);
            total += 1.0 - h / std::f64::consts::LN_2;
        }
    }
    total / (batch * v) as f64
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Mean squared disagreement between merged MSH pairs `{q⁰, qʲ}` and ATH
/// outputs `{g⁰, gʲ}`, summed over retained classes and normalised by twice
/// the voxel count of `msh_probs`. All samples in `msh_probs` share `set`.
///
/// The merged background is `p⁰ + Σ_{n∈Φᶜ} pⁿ`; with `exclude_self` class `j`
/// is left out of it for pair `j`. The decision acts as a constant.
pub fn consistency_loss<T: Element>(
    tape: &mut Tape<T>,
    msh_probs: Var,
    ath_probs: &[Var],
    set: &PartialLabelSet,
    decision: &FilterDecision,
    exclude_self: bool,
) -> Result<Var> {
    let n = set.num_classes();
    let shape = tape.shape(msh_probs).to_vec();
    if shape.len() < 2 || shape[1] != n + 1 {
        return Err(Error::Shape(format!(
            "consistency: expected {} MSH channels, got shape {shape:?}",
            n + 1
        )));
    }
    if ath_probs.len() != n || decision.retained.len() != n {
        return Err(Error::Shape(format!(
            "consistency: {n} classes but {} heads and a decision over {}",
            ath_probs.len(),
            decision.retained.len()
        )));
    }
    let voxels: usize = shape[0] * shape[2..].iter().product::<usize>();
    let norm = T::one() / T::from_f64(2.0 * voxels as f64);
    let complement = set.complement();

    let mut acc: Option<Var> = None;
    for j in 1..=n {
        if !decision.retained[j - 1] {
            continue;
        }
        let mut background = vec![0];
        background.extend(complement.iter().copied().filter(|&c| !(exclude_self && c == j)));
        let pair = tape.combine_channels(msh_probs, &[background, vec![j]])?;
        let diff = tape.sub(pair, ath_probs[j - 1])?;
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        let term = tape.scale(s, norm);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}
