use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        Self { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update with a constant learning rate.
///
/// A missing gradient counts as zero. Every gradient is checked before any
/// parameter moves; a non-finite entry aborts the step and names its
/// parameter.
pub fn adam_step<T: Element>(
    params: &mut [(&str, &mut Tensor<T>)],
    grads: &[Option<&Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient of {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at index {i} is {}", g.data()[i])));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let m_corr = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(t)));
    let v_corr = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
    let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
    for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = p.data_mut();
        match g {
            Some(g) => {
                for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                    *mi = b1 * *mi + c1 * gi;
                    *vi = b2 * *vi + c2 * gi * gi;
                    *pi -= lr * (*mi * m_corr) / ((*vi * v_corr).sqrt() + eps);
                }
            }
            None => {
                for ((pi, mi), vi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi;
                    *vi = b2 * *vi;
                    *pi -= lr * (*mi * m_corr) / ((*vi * v_corr).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = Tensor::new(vec![3], vec![1.0f32, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new([p.shape()]);
        let zero = Tensor::zeros(&[3]);
        adam_step(&mut [("p", &mut p)], &[Some(&zero)], &mut state, &AdamConfig::default()).unwrap();
        adam_step(&mut [("p", &mut p)], &[None], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 2);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        let mut state = AdamState::new([p.shape()]);
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        adam_step(&mut [("p", &mut p)], &[Some(&g)], &mut state, &cfg).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-9);
        assert!((p.data()[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut x = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let mut state = AdamState::new([x.shape()]);
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        // descent must be monotone until f reaches round-off scale, where the
        // iterate starts to jitter around 0
        let floor = 1e-12;
        let mut prev = 1.0f64;
        let mut reached = None;
        for step in 0..500 {
            let g = Tensor::new(vec![1], vec![2.0 * x.data()[0]]).unwrap();
            adam_step(&mut [("x", &mut x)], &[Some(&g)], &mut state, &cfg).unwrap();
            let f = x.data()[0] * x.data()[0];
            assert!(f <= prev, "step {step}: {f} > {prev}");
            prev = f;
            if f < floor {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "f = {prev} after 500 steps");
    }

    #[test]
    fn non_finite_gradient_aborts_before_updating() {
        let mut a = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let mut b = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let mut state = AdamState::new([a.shape(), b.shape()]);
        let ga = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let gb = Tensor::new(vec![1], vec![f32::NAN]).unwrap();
        let err = adam_step(
            &mut [("a", &mut a), ("enc1.conv1.weight", &mut b)],
            &[Some(&ga), Some(&gb)],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains("enc1.conv1.weight")));
        assert_eq!((a.data()[0], state.t), (1.0, 0));
    }
}
