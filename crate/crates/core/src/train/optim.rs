use std::collections::BTreeMap;

use crate::model::{Net, ParamStore};
use crate::tensor::{Float, Tensor, TensorError};

use super::{Result, TrainError};

pub const RMSPROP_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub momentum: f64,
    pub eps: f64,
}

/// Squared-gradient accumulators (and momentum buffers when momentum is on),
/// keyed like the parameters they shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState<T> {
    pub acc: BTreeMap<(Net, String), Tensor<T>>,
    pub mom: BTreeMap<(Net, String), Tensor<T>>,
}

impl<T: Float> RmsPropState<T> {
    /// Zeroed state for the parameters of `nets`.
    pub fn new(store: &ParamStore<T>, nets: &[Net], momentum: bool) -> Self {
        let zeros: BTreeMap<_, _> = store
            .iter_params()
            .filter(|(n, _, _)| nets.contains(n))
            .map(|(n, k, t)| ((n, k.to_string()), Tensor::zeros(t.shape())))
            .collect();
        Self {
            mom: if momentum { zeros.clone() } else { BTreeMap::new() },
            acc: zeros,
        }
    }
}

/// One RMSProp update of a flat parameter slice:
/// `acc = decay*acc + (1-decay)*g^2`, `step = lr*g/(sqrt(acc)+eps)`, then
/// `p -= step`, or with momentum `m = momentum*m + step; p -= m`.
pub fn rmsprop_update<T: Float>(p: &mut [T], g: &[T], acc: &mut [T], mom: Option<&mut [T]>, hp: &RmsPropConfig) {
    let (lr, decay, eps) = (T::of(hp.lr), T::of(hp.decay), T::of(hp.eps));
    let one = T::one();
    match mom {
        None => {
            for ((p, &g), a) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
                *a = decay * *a + (one - decay) * g * g;
                *p -= lr * g / (a.sqrt() + eps);
            }
        }
        Some(m) => {
            let mu = T::of(hp.momentum);
            for (((p, &g), a), m) in p.iter_mut().zip(g).zip(acc.iter_mut()).zip(m.iter_mut()) {
                *a = decay * *a + (one - decay) * g * g;
                *m = mu * *m + lr * g / (a.sqrt() + eps);
                *p -= *m;
            }
        }
    }
}

/// Applies `grads` to the parameters they name. Every gradient must have a
/// matching accumulator and parameter of the same shape.
pub fn rmsprop_step<T: Float>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<(Net, String), Tensor<T>>,
    state: &mut RmsPropState<T>,
    hp: &RmsPropConfig,
) -> Result<()> {
    for (key, g) in grads {
        let missing = || TrainError::GradientKeys(format!("no optimizer state for {}.{}", key.0, key.1));
        let acc = state.acc.get_mut(key).ok_or_else(missing)?;
        let p = store
            .net_mut(key.0)
            .params
            .get_mut(&key.1)
            .ok_or_else(missing)?;
        if p.shape() != g.shape() || acc.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "rmsprop_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            }
            .into());
        }
        let mom = match state.mom.get_mut(key) {
            Some(m) => Some(m.data_mut()),
            None if hp.momentum != 0.0 => return Err(missing()),
            None => None,
        };
        rmsprop_update(p.data_mut(), g.data(), acc.data_mut(), mom, hp);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(lr: f64, momentum: f64) -> RmsPropConfig {
        RmsPropConfig {
            lr,
            decay: 0.9,
            momentum,
            eps: RMSPROP_EPS,
        }
    }

    #[test]
    fn three_scalar_steps_match_the_recurrence() {
        // Gradients 0.5, -1.0, 2.0 from p = 1, lr 0.01, decay 0.9.
        let gs = [0.5, -1.0, 2.0];
        let (mut p, mut acc) = ([1.0f64], [0.0f64]);
        for g in gs {
            rmsprop_update(&mut p, &[g], &mut acc, None, &hp(0.01, 0.0));
        }
        // acc: 0.025, 0.1225, 0.51025
        let a1: f64 = 0.1 * 0.25;
        let a2 = 0.9 * a1 + 0.1 * 1.0;
        let a3 = 0.9 * a2 + 0.1 * 4.0;
        assert!((a3 - 0.51025).abs() < 1e-15);
        let expected =
            1.0 - 0.01 * 0.5 / (a1.sqrt() + 1e-8) + 0.01 * 1.0 / (a2.sqrt() + 1e-8) - 0.01 * 2.0 / (a3.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12, "{} vs {expected}", p[0]);
        assert!((acc[0] - a3).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = [0.3f64, -2.0];
        let mut acc = [0.0, 0.5];
        rmsprop_update(&mut p, &[0.0, 0.0], &mut acc, None, &hp(0.1, 0.0));
        assert_eq!(p, [0.3, -2.0]);
        assert!(acc.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn constant_gradient_steps_approach_lr_times_sign() {
        let (mut p, mut acc) = ([0.0f64], [0.0f64]);
        let mut last = 0.0;
        for _ in 0..200 {
            let before = p[0];
            rmsprop_update(&mut p, &[-3.0], &mut acc, None, &hp(0.01, 0.0));
            last = p[0] - before;
        }
        assert!((last - 0.01).abs() < 1e-9, "{last}");
    }

    #[test]
    fn momentum_accumulates_steps() {
        let (mut p, mut acc, mut m) = ([0.0f64], [0.0f64], [0.0f64]);
        rmsprop_update(&mut p, &[1.0], &mut acc, Some(&mut m), &hp(0.1, 0.5));
        let s1 = 0.1 / (0.1f64.sqrt() + 1e-8);
        assert!((p[0] + s1).abs() < 1e-15);
        rmsprop_update(&mut p, &[1.0], &mut acc, Some(&mut m), &hp(0.1, 0.5));
        let s2 = 0.1 / (0.19f64.sqrt() + 1e-8);
        assert!((p[0] + s1 + 0.5 * s1 + s2).abs() < 1e-15);
    }
}
