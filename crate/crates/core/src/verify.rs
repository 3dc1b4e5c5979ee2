//! Finite-difference gradient suite over every tape primitive and the full
//! training objective of a small network, all in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{batch_objective, compute_filter, LossConfig, OneHotTarget, PartialLabelSet};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::unet::{UNetConfig, UNetModel};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Spatial size of the network case; the smallest the five-stage network accepts.
pub const NETWORK_PATCH: usize = 16;

/// Relative-error denominator floor of the network case.
pub const NETWORK_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

type Case = (&'static str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>, Vec<Tensor<f64>>);

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Reduces `y` to a scalar through a fixed random weighting so every output
/// coordinate contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn unary(op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> {
    Box::new(move |t, v| {
        let y = op(t, v[0])?;
        project(t, y, 99)
    })
}

fn binary(op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> {
    Box::new(move |t, v| {
        let y = op(t, v[0], v[1])?;
        project(t, y, 98)
    })
}

fn primitive_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |shape: &[usize], lo: f64, hi: f64| rand_tensor(&mut rng, shape, lo, hi);
    let s = [2, 3, 4];
    // relu inputs stay away from the kink
    let away_from_zero = Tensor::from_fn(&s, |i| if i % 2 == 0 { 0.3 + i as f64 * 0.05 } else { -0.4 - i as f64 * 0.03 });
    vec![
        ("add", binary(|t, a, b| t.add(a, b)), vec![r(&s, -1.0, 1.0), r(&s, -1.0, 1.0)]),
        ("add_scalar_broadcast", binary(|t, a, b| t.add(a, b)), vec![r(&s, -1.0, 1.0), r(&[1], -1.0, 1.0)]),
        ("sub", binary(|t, a, b| t.sub(a, b)), vec![r(&s, -1.0, 1.0), r(&s, -1.0, 1.0)]),
        ("mul", binary(|t, a, b| t.mul(a, b)), vec![r(&s, -1.0, 1.0), r(&s, -1.0, 1.0)]),
        ("div", binary(|t, a, b| t.div(a, b)), vec![r(&s, -1.0, 1.0), r(&s, 0.5, 2.0)]),
        ("scale", unary(|t, x| Ok(t.scale(x, -1.7))), vec![r(&s, -1.0, 1.0)]),
        ("shift", unary(|t, x| Ok(t.add_scalar(x, 0.3))), vec![r(&s, -1.0, 1.0)]),
        ("neg", unary(|t, x| Ok(t.neg(x))), vec![r(&s, -1.0, 1.0)]),
        ("relu", unary(|t, x| Ok(t.relu(x))), vec![away_from_zero]),
        ("log", unary(|t, x| Ok(t.log(x))), vec![r(&s, 0.2, 2.0)]),
        ("exp", unary(|t, x| Ok(t.exp(x))), vec![r(&s, -1.0, 1.0)]),
        ("square", unary(|t, x| Ok(t.square(x))), vec![r(&s, -1.0, 1.0)]),
        ("sum", unary(|t, x| Ok(t.sum(x))), vec![r(&s, -1.0, 1.0)]),
        ("mean", unary(|t, x| Ok(t.mean(x))), vec![r(&s, -1.0, 1.0)]),
        ("sum_axis", unary(|t, x| t.sum_axis(x, 1)), vec![r(&s, -1.0, 1.0)]),
        ("mean_axis", unary(|t, x| t.mean_axis(x, 2)), vec![r(&s, -1.0, 1.0)]),
        ("reshape", unary(|t, x| t.reshape(x, &[4, 6])), vec![r(&s, -1.0, 1.0)]),
        ("sum_spatial", unary(|t, x| t.sum_spatial(x)), vec![r(&[2, 3, 2, 2, 2], -1.0, 1.0)]),
        (
            "conv3d",
            Box::new(|t, v| {
                let y = t.conv3d(v[0], v[1], v[2], 1)?;
                project(t, y, 97)
            }),
            vec![r(&[2, 2, 4, 3, 5], -1.0, 1.0), r(&[3, 2, 3, 3, 3], -0.5, 0.5), r(&[3], -0.5, 0.5)],
        ),
        ("maxpool3d", unary(|t, x| t.maxpool3d(x)), vec![r(&[1, 2, 4, 4, 4], -1.0, 1.0)]),
        ("upsample_trilinear3d", unary(|t, x| t.upsample_trilinear3d(x)), vec![r(&[1, 2, 2, 3, 2], -1.0, 1.0)]),
        ("softmax_channels", unary(|t, x| t.softmax_channels(x)), vec![r(&[2, 4, 2, 2, 2], -2.0, 2.0)]),
        (
            "concat_channels",
            binary(|t, a, b| t.concat_channels(&[a, b])),
            vec![r(&[2, 1, 2, 2, 2], -1.0, 1.0), r(&[2, 3, 2, 2, 2], -1.0, 1.0)],
        ),
        (
            "combine_channels",
            unary(|t, x| t.combine_channels(x, &[vec![0, 3], vec![2], vec![1, 2]])),
            vec![r(&[2, 4, 2, 2, 2], -1.0, 1.0)],
        ),
        ("slice_batch", unary(|t, x| t.slice_batch(x, 1)), vec![r(&[3, 2, 2, 2], -1.0, 1.0)]),
    ]
}

fn record(name: &str, report: GradCheckReport, tol: f64) -> CaseResult {
    CaseResult {
        name: name.to_owned(),
        max_rel_error: report.max_rel_error,
        checked: report.checked,
        passed: report.max_rel_error < tol,
    }
}

/// The full TCT objective (main, auxiliary and consistency terms under
/// uncertainty weighting) of a width-2 network on a batch of two samples
/// with different annotated sets, differentiated with respect to every
/// network parameter tensor and the log-variances.
///
/// The consistency filter is decided once from the unperturbed forward pass
/// and then held fixed, since the decision is piecewise constant.
fn network_case(tol: f64, samples_per_input: usize) -> Result<CaseResult> {
    let n = 3;
    let p = NETWORK_PATCH;
    let config = UNetConfig {
        in_channels: 1,
        num_classes: n,
        base_width: 2,
        patch_size: [p; 3],
    };
    let model = UNetModel::<f64>::build(config, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let input = rand_tensor(&mut rng, &[2, 1, p, p, p], 0.0, 1.0);
    let voxels = p * p * p;
    let labels_a: Vec<u8> = (0..voxels).map(|_| rng.gen_range(0..=2)).collect();
    let labels_b: Vec<u8> = (0..voxels).map(|_| [0, 3][rng.gen_range(0..2)]).collect();
    let targets = vec![
        OneHotTarget::from_labels(&labels_a, [p; 3], PartialLabelSet::new(&[1, 2], n)?)?,
        OneHotTarget::from_labels(&labels_b, [p; 3], PartialLabelSet::new(&[3], n)?)?,
    ];
    let cfg = LossConfig::default();
    let log_vars = Tensor::new(vec![2], vec![0.2, -0.3])?;
    let epoch = 12.0;

    let decision = {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let (out, _) = model.forward_full(&mut tape, x)?;
        let msh = tape.softmax_channels(out.msh_logits)?;
        let heads = out
            .ath_logits
            .iter()
            .map(|&h| tape.softmax_channels(h).map(|v| tape.value(v).clone()))
            .collect::<Result<Vec<_>>>()?;
        compute_filter(tape.value(msh), &heads, &cfg.filter)?
    };

    let mut inputs: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    inputs.push(log_vars);
    let k = model.params().len();
    let f = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let x = tape.constant(input.clone());
        let out = model.forward_full_with(tape, x, &v[..k])?;
        let (total, _) = batch_objective(tape, &out, &targets, &cfg, epoch, Some(v[k]), Some(&decision))?;
        Ok(total)
    };
    // steps above 1e-6 start crossing ReLU and max-pool kinks; at 1e-6 the
    // differences of an O(1) objective carry ~1e-9 of round-off, so
    // gradients below the floor are compared against the floor
    let opts = GradCheckOptions {
        floor: NETWORK_FLOOR,
        samples_per_input: Some(samples_per_input),
        ..GradCheckOptions::default()
    };
    let report = grad_check(f, &inputs, &opts)?;
    Ok(record("network_objective", report, tol))
}

/// Runs every case and compares its worst relative error to `tol`.
pub fn gradient_suite(tol: f64) -> Result<SuiteReport> {
    let opts = GradCheckOptions::default();
    let mut cases = Vec::new();
    for (name, f, inputs) in primitive_cases() {
        let report = grad_check(|t: &mut Tape<f64>, v: &[Var]| f(t, v), &inputs, &opts)?;
        cases.push(record(name, report, tol));
    }
    cases.push(network_case(tol, 4)?);
    Ok(SuiteReport { tolerance: tol, cases })
}
