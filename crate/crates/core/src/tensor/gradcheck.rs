use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central difference step `h`.
    pub step: f64,
    /// Coordinates checked per input; `None` checks every coordinate.
    pub samples_per_input: Option<usize>,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to rounding do not produce spurious huge ratios.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            samples_per_input: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    /// Settings for single precision: larger step, looser floor.
    pub fn single_precision() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-3,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

fn eval<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, vars, out))
}

/// Compares the tape's analytic gradient of a scalar program against central
/// differences `(f(x+h) - f(x-h)) / 2h` and reports the worst relative error.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = eval(&f, inputs)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let h = T::from_f64(opts.step);
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.samples_per_input {
            Some(s) if s < n => {
                let mut c = sample(&mut rng, n, s).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(vars[k]);
        for i in coords {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + h;
            let (tp, _, op) = eval(&f, &work)?;
            let fp = tp.value(op).item().to_f64();
            drop(tp);
            work[k].data_mut()[i] = x0 - h;
            let (tm, _, om) = eval(&f, &work)?;
            let fm = tm.value(om).item().to_f64();
            drop(tm);
            work[k].data_mut()[i] = x0;

            // the effective step after rounding x0 ± h in T
            let span = ((x0 + h).to_f64() - (x0 - h).to_f64()).max(f64::MIN_POSITIVE);
            let numeric = (fp - fm) / span;
            let a = analytic.map_or(0.0, |g| g.data()[i].to_f64());
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    Ok(report)
}
