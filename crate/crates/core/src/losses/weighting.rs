use serde::{Deserialize, Serialize};

use super::LossParts;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Gaussian ramp `w(t) = w_max · exp(−5 (1 − min(t, T_r)/T_r)²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RampSchedule {
    pub w_max: f64,
    /// Epochs to reach `w_max`; 0 means no ramp.
    pub ramp_epochs: f64,
}

impl Default for RampSchedule {
    fn default() -> Self {
        Self {
            w_max: 0.1,
            ramp_epochs: 16.0,
        }
    }
}

pub fn ramp_weight(epoch: f64, sched: &RampSchedule) -> f64 {
    if sched.ramp_epochs <= 0.0 {
        return sched.w_max;
    }
    let phase = 1.0 - epoch.clamp(0.0, sched.ramp_epochs) / sched.ramp_epochs;
    sched.w_max * (-5.0 * phase * phase).exp()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Unit weights, no penalty.
    Fixed,
    /// One log-variance for the MSH and one per auxiliary head.
    Uwl,
    /// One log-variance for the MSH and one shared by all auxiliary heads.
    #[default]
    Uauwl,
}

/// Trainable log-variances `s = log σ²`, initialised to 0.
///
/// Layout: fixed `[]`, uauwl `[s_main, s_aux]`, uwl `[s_main, s_1..s_N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyParams<T = f32> {
    pub mode: Weighting,
    pub log_vars: Tensor<T>,
}

impl<T: Element> UncertaintyParams<T> {
    pub fn new(mode: Weighting, num_classes: usize) -> Self {
        let len = match mode {
            Weighting::Fixed => 0,
            Weighting::Uauwl => 2,
            Weighting::Uwl => 1 + num_classes,
        };
        Self {
            mode,
            log_vars: Tensor::zeros(&[len]),
        }
    }

    /// Loss weights `exp(−s)`.
    pub fn weights(&self) -> Vec<f64> {
        self.log_vars.data().iter().map(|s| (-Element::to_f64(*s)).exp()).collect()
    }
}

/// `exp(−s_k)·L + s_k/2` for entry `k` of `log_vars`.
fn weighted<T: Element>(tape: &mut Tape<T>, log_vars: Var, k: usize, loss: Var) -> Result<Var> {
    let len = tape.value(log_vars).numel();
    let row = tape.reshape(log_vars, &[1, len])?;
    let s = tape.combine_channels(row, &[vec![k]])?;
    let s = tape.reshape(s, &[1])?;
    let neg = tape.neg(s);
    let precision = tape.exp(neg);
    let scaled = tape.mul(precision, loss)?;
    let half = tape.scale(s, T::from_f64(0.5));
    tape.add(scaled, half)
}

/// Combines the loss parts with ramp weight `w` on the consistency term.
///
/// Under [`Weighting::Uwl`] only classes present in `parts.l_aux_terms` add
/// a term and a penalty.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    parts: &LossParts,
    mode: Weighting,
    log_vars: Option<Var>,
    w: f64,
) -> Result<Var> {
    let con = tape.scale(parts.l_con, T::from_f64(w));
    let aux_sum = |tape: &mut Tape<T>| -> Result<Var> {
        super::sum_vars(tape, parts.l_aux_terms.iter().map(|&(_, v)| v))
    };
    let supervised = match mode {
        Weighting::Fixed => {
            let aux = aux_sum(tape)?;
            tape.add(parts.l_main, aux)?
        }
        Weighting::Uauwl => {
            let s = need_log_vars(tape, log_vars, 2)?;
            let main = weighted(tape, s, 0, parts.l_main)?;
            let aux = aux_sum(tape)?;
            let aux = weighted(tape, s, 1, aux)?;
            tape.add(main, aux)?
        }
        Weighting::Uwl => {
            let len = log_vars.map_or(0, |s| tape.value(s).numel());
            let s = need_log_vars(tape, log_vars, len.max(1))?;
            let mut acc = weighted(tape, s, 0, parts.l_main)?;
            for &(j, term) in &parts.l_aux_terms {
                if j >= len {
                    return Err(Error::Shape(format!("no uncertainty parameter for class {j}")));
                }
                let t = weighted(tape, s, j, term)?;
                acc = tape.add(acc, t)?;
            }
            acc
        }
    };
    tape.add(supervised, con)
}

fn need_log_vars<T: Element>(tape: &Tape<T>, log_vars: Option<Var>, min_len: usize) -> Result<Var> {
    match log_vars {
        Some(s) if tape.value(s).numel() >= min_len => Ok(s),
        _ => Err(Error::Contract(format!(
            "uncertainty weighting needs at least {min_len} log-variance parameters"
        ))),
    }
}
