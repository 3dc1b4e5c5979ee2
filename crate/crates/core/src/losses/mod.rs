//! Partial-label losses: label bookkeeping, channel merging, supervised Dice
//! terms for the MSH and ATHs, the filtered consistency term and the weighted
//! total objective.
//!
//! Notation used in docs: `N` classes `1..=N` plus background `0`; a sample's
//! annotated set `Φ` with `M = |Φ|` and complement `Φᶜ`.

mod filter;
mod weighting;

pub use filter::{compute_filter, consistency_loss, FilterConfig, FilterDecision, FilterStrategy};
pub use weighting::{ramp_weight, total_loss, RampSchedule, UncertaintyParams, Weighting};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::unet::ModelOutput;

/// Smoothing added to numerator and denominator of every soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Domain("a label space needs at least one class".into()));
        }
        if names.len() > u8::MAX as usize {
            return Err(Error::Domain(format!("at most 255 classes supported, got {}", names.len())));
        }
        Ok(Self { names })
    }

    /// Classes named `class_1..class_n`.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new((1..=n).map(|c| format!("class_{c}")).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// The classes annotated in one sample, kept sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialLabelSet {
    labeled: Vec<usize>,
    num_classes: usize,
}

impl PartialLabelSet {
    pub fn new(labeled: &[usize], num_classes: usize) -> Result<Self> {
        let mut labeled = labeled.to_vec();
        labeled.sort_unstable();
        labeled.dedup();
        if labeled.is_empty() {
            return Err(Error::Domain("annotated class set must be nonempty".into()));
        }
        if let Some(&bad) = labeled.iter().find(|&&c| c == 0 || c > num_classes) {
            return Err(Error::Domain(format!("class {bad} outside 1..={num_classes}")));
        }
        Ok(Self { labeled, num_classes })
    }

    /// Every class annotated.
    pub fn full(num_classes: usize) -> Result<Self> {
        Self::new(&(1..=num_classes).collect::<Vec<_>>(), num_classes)
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn complement(&self) -> Vec<usize> {
        (1..=self.num_classes).filter(|c| !self.contains(*c)).collect()
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn contains(&self, class: usize) -> bool {
        self.labeled.binary_search(&class).is_ok()
    }

    /// Channel of `class` in a target over `{0} ∪ Φ`.
    pub fn channel_of(&self, class: usize) -> Option<usize> {
        self.labeled.binary_search(&class).ok().map(|i| i + 1)
    }
}

/// One-hot ground truth of a single sample over `{0} ∪ Φ`, shape
/// `[1, M+1, Z, Y, X]`, background first then ascending `Φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotTarget<T = f32> {
    tensor: Tensor<T>,
    set: PartialLabelSet,
}

impl<T: Element> OneHotTarget<T> {
    /// Labels of classes outside `Φ` count as background; labels above `N`
    /// are a domain error.
    pub fn from_labels(labels: &[u8], dims: [usize; 3], set: PartialLabelSet) -> Result<Self> {
        let v: usize = dims.iter().product();
        if labels.len() != v {
            return Err(Error::Shape(format!(
                "label buffer has {} voxels, dims {dims:?} need {v}",
                labels.len()
            )));
        }
        let channels = set.len() + 1;
        let mut data = vec![T::zero(); channels * v];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l > set.num_classes() {
                return Err(Error::Domain(format!("label {l} exceeds class count {}", set.num_classes())));
            }
            let ch = set.channel_of(l).unwrap_or(0);
            data[ch * v + i] = T::one();
        }
        let tensor = Tensor::new(vec![1, channels, dims[0], dims[1], dims[2]], data)?;
        Ok(Self { tensor, set })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn set(&self) -> &PartialLabelSet {
        &self.set
    }
}

/// Which foreground channels survive a merge of MSH probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeTarget {
    /// `{0} ∪ Φ`, used for supervision; output sums to 1 per voxel.
    Labeled,
    /// `{0} ∪ {1..N}`, used for the consistency comparison. Unlabeled classes
    /// appear both in background and in their own channel.
    AllClasses,
}

fn merge_groups(set: &PartialLabelSet, target: MergeTarget) -> Vec<Vec<usize>> {
    let mut background = vec![0];
    background.extend(set.complement());
    let mut groups = vec![background];
    match target {
        MergeTarget::Labeled => groups.extend(set.labeled().iter().map(|&c| vec![c])),
        MergeTarget::AllClasses => groups.extend((1..=set.num_classes()).map(|c| vec![c])),
    }
    groups
}

/// Folds the probabilities of unlabeled classes into background.
pub fn merge_main_probs<T: Element>(
    tape: &mut Tape<T>,
    probs: Var,
    set: &PartialLabelSet,
    target: MergeTarget,
) -> Result<Var> {
    check_channels(tape.shape(probs), set.num_classes() + 1, "merge_main_probs")?;
    tape.combine_channels(probs, &merge_groups(set, target))
}

fn check_channels(shape: &[usize], want: usize, what: &str) -> Result<()> {
    if shape.len() < 2 || shape[1] != want {
        return Err(Error::Shape(format!("{what}: expected {want} channels, got shape {shape:?}")));
    }
    Ok(())
}

/// `1 − mean_c (2Σ pred·target + ε) / (Σ pred + Σ target + ε)`, sums running
/// over batch and voxels per channel.
pub fn soft_dice_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Shape(format!(
            "dice: prediction {:?} vs target {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let eps = T::from_f64(DICE_EPS);
    let inter = tape.mul(pred, target)?;
    let inter = per_channel_sum(tape, inter)?;
    let sp = per_channel_sum(tape, pred)?;
    let st = per_channel_sum(tape, target)?;
    let num = tape.scale(inter, T::from_f64(2.0));
    let num = tape.add_scalar(num, eps);
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, eps);
    let ratio = tape.div(num, den)?;
    let mean = tape.mean(ratio);
    let neg = tape.neg(mean);
    Ok(tape.add_scalar(neg, T::one()))
}

fn per_channel_sum<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.sum_spatial(x)?;
    tape.sum_axis(s, 0)
}

/// Dice loss of merged MSH probabilities over `{0} ∪ Φ`.
pub fn dice_loss_main<T: Element>(tape: &mut Tape<T>, merged: Var, target: &OneHotTarget<T>) -> Result<Var> {
    let y = tape.constant(target.tensor().clone());
    soft_dice_loss(tape, merged, y)
}

/// Two-channel target for the ATH of `class`: foreground is `class`, every
/// other channel of `{0} ∪ Φ` folds into background.
pub fn merge_aux_target<T: Element>(target: &OneHotTarget<T>, class: usize) -> Result<Tensor<T>> {
    let ch = target
        .set()
        .channel_of(class)
        .ok_or_else(|| Error::Domain(format!("class {class} is not annotated in this sample")))?;
    let [b, c, z, y, x] = target.tensor().dims5()?;
    let v = z * y * x;
    let src = target.tensor().data();
    let mut data = vec![T::zero(); b * 2 * v];
    for bi in 0..b {
        let fg = &src[(bi * c + ch) * v..(bi * c + ch + 1) * v];
        data[(bi * 2 + 1) * v..(bi * 2 + 2) * v].copy_from_slice(fg);
        for (i, &f) in fg.iter().enumerate() {
            data[bi * 2 * v + i] = T::one() - f;
        }
    }
    Tensor::new(vec![b, 2, z, y, x], data)
}

/// Per-class auxiliary Dice terms for the annotated classes, as
/// `(class, loss)`. `ath_probs[j - 1]` is the softmax output of class `j`'s
/// head.
pub fn dice_loss_aux_terms<T: Element>(
    tape: &mut Tape<T>,
    ath_probs: &[Var],
    target: &OneHotTarget<T>,
) -> Result<Vec<(usize, Var)>> {
    let n = target.set().num_classes();
    if ath_probs.len() != n {
        return Err(Error::Shape(format!("expected {n} auxiliary heads, got {}", ath_probs.len())));
    }
    let mut terms = Vec::with_capacity(target.set().len());
    for &j in target.set().labeled() {
        let z = tape.constant(merge_aux_target(target, j)?);
        terms.push((j, soft_dice_loss(tape, ath_probs[j - 1], z)?));
    }
    Ok(terms)
}

/// Sum of the auxiliary Dice terms over the annotated classes.
pub fn dice_loss_aux<T: Element>(tape: &mut Tape<T>, ath_probs: &[Var], target: &OneHotTarget<T>) -> Result<Var> {
    let terms = dice_loss_aux_terms(tape, ath_probs, target)?;
    sum_vars(tape, terms.into_iter().map(|(_, v)| v))
}

fn sum_vars<T: Element>(tape: &mut Tape<T>, vars: impl IntoIterator<Item = Var>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for v in vars {
        acc = Some(match acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// MSH only, unlabeled classes merged into background.
    Tal,
    /// MSH and auxiliary heads with the filtered consistency term.
    #[default]
    Tct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub method: Method,
    pub filter: FilterConfig,
    pub weighting: Weighting,
    pub ramp: RampSchedule,
    /// Leave class `j` out of the merged background when comparing pair `j`.
    pub exclude_self_from_background: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::Tct,
            filter: FilterConfig::default(),
            weighting: Weighting::Uauwl,
            ramp: RampSchedule::default(),
            exclude_self_from_background: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_main: f64,
    pub l_aux: f64,
    pub l_con: f64,
    /// `None` for TAL.
    pub filter: Option<FilterDecision>,
    pub ramp_weight: f64,
    /// `exp(−s)` for each uncertainty parameter (empty for fixed weighting).
    pub task_weights: Vec<f64>,
    pub total: f64,
}

/// Scalar handles of the three loss parts of one batch.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub l_main: Var,
    /// Per-class auxiliary terms, averaged over the batch, for classes
    /// annotated in at least one sample.
    pub l_aux_terms: Vec<(usize, Var)>,
    pub l_con: Var,
}

/// Builds the batch objective on `tape`.
///
/// Sample `b` of the model output is supervised by `targets[b]`, each with
/// its own annotated set. Supervised terms are computed per sample and
/// averaged; the filter is decided once per batch from aggregate IoUs unless
/// `frozen_filter` supplies a decision. `log_vars` holds the uncertainty
/// parameters required by `cfg.weighting`.
pub fn batch_objective<T: Element>(
    tape: &mut Tape<T>,
    output: &ModelOutput<Var>,
    targets: &[OneHotTarget<T>],
    cfg: &LossConfig,
    epoch: f64,
    log_vars: Option<Var>,
    frozen_filter: Option<&FilterDecision>,
) -> Result<(Var, LossBreakdown)> {
    let shape = tape.shape(output.msh_logits).to_vec();
    if shape[0] != targets.len() {
        return Err(Error::Shape(format!(
            "batch of {} predictions but {} targets",
            shape[0],
            targets.len()
        )));
    }
    let batch = targets.len();
    let inv_batch = T::one() / T::from_f64(batch as f64);
    let probs = tape.softmax_channels(output.msh_logits)?;

    let mut main_terms = Vec::with_capacity(batch);
    for (b, target) in targets.iter().enumerate() {
        let p = tape.slice_batch(probs, b)?;
        let q = merge_main_probs(tape, p, target.set(), MergeTarget::Labeled)?;
        main_terms.push(dice_loss_main(tape, q, target)?);
    }
    let l_main = sum_vars(tape, main_terms)?;
    let l_main = tape.scale(l_main, inv_batch);

    if cfg.method == Method::Tal {
        let value = tape.value(l_main).item().to_f64();
        let breakdown = LossBreakdown {
            l_main: value,
            l_aux: 0.0,
            l_con: 0.0,
            filter: None,
            ramp_weight: 0.0,
            task_weights: Vec::new(),
            total: value,
        };
        return Ok((l_main, breakdown));
    }

    let n = shape[1] - 1;
    if output.ath_logits.len() != n {
        return Err(Error::Shape(format!(
            "expected {n} auxiliary heads, got {}",
            output.ath_logits.len()
        )));
    }
    let ath_probs = output
        .ath_logits
        .iter()
        .map(|&l| tape.softmax_channels(l))
        .collect::<Result<Vec<_>>>()?;

    let decision = match frozen_filter {
        Some(d) => d.clone(),
        None => {
            let g: Vec<Tensor<T>> = ath_probs.iter().map(|&g| tape.value(g).clone()).collect();
            compute_filter(tape.value(probs), &g, &cfg.filter)?
        }
    };

    let mut aux_by_class: Vec<Vec<Var>> = vec![Vec::new(); n + 1];
    let mut con_terms = Vec::with_capacity(batch);
    for (b, target) in targets.iter().enumerate() {
        let p = tape.slice_batch(probs, b)?;
        let g = ath_probs
            .iter()
            .map(|&g| tape.slice_batch(g, b))
            .collect::<Result<Vec<_>>>()?;
        for (j, term) in dice_loss_aux_terms(tape, &g, target)? {
            aux_by_class[j].push(term);
        }
        con_terms.push(consistency_loss(
            tape,
            p,
            &g,
            target.set(),
            &decision,
            cfg.exclude_self_from_background,
        )?);
    }
    let mut l_aux_terms = Vec::new();
    for (j, terms) in aux_by_class.into_iter().enumerate() {
        if terms.is_empty() {
            continue;
        }
        let s = sum_vars(tape, terms)?;
        l_aux_terms.push((j, tape.scale(s, inv_batch)));
    }
    let l_con = sum_vars(tape, con_terms)?;
    let l_con = tape.scale(l_con, inv_batch);

    let w = ramp_weight(epoch, &cfg.ramp);
    let parts = LossParts {
        l_main,
        l_aux_terms,
        l_con,
    };
    let total = total_loss(tape, &parts, cfg.weighting, log_vars, w)?;
    let l_aux: f64 = parts
        .l_aux_terms
        .iter()
        .map(|&(_, v)| tape.value(v).item().to_f64())
        .sum();
    let task_weights = match log_vars {
        Some(s) => tape.value(s).data().iter().map(|v| (-Element::to_f64(*v)).exp()).collect(),
        None => Vec::new(),
    };
    let breakdown = LossBreakdown {
        l_main: tape.value(l_main).item().to_f64(),
        l_aux,
        l_con: tape.value(l_con).item().to_f64(),
        filter: Some(decision),
        ramp_weight: w,
        task_weights,
        total: tape.value(total).item().to_f64(),
    };
    Ok((total, breakdown))
}
