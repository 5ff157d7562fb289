use serde::{Deserialize, Serialize};

use super::model::ParamSet;
use super::tensor::{Real, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: ParamSet<T> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for non-finite
/// values before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(NnError::NonFiniteGradient { name: name.clone() });
        }
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            _ => {
                return Err(NnError::Shape(format!(
                    "gradient {name} has no matching parameter"
                )))
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: Vec<f64>) -> ParamSet<f64> {
        let n = v.len();
        [("w".to_string(), Tensor::from_vec(&[n], v).unwrap())].into()
    }

    #[test]
    fn constant_gradient_moves_by_lr_times_sign() {
        let mut p = single(vec![1.0, -2.0, 0.5]);
        let g = single(vec![0.3, -4.0, 1e-3]);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig::default();
        for step in 1..=5 {
            let before = p["w"].data().to_vec();
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
            for ((a, b), gi) in p["w"].data().iter().zip(&before).zip(g["w"].data()) {
                let expected = -cfg.lr * gi / (gi.abs() + cfg.eps);
                assert!((a - b - expected).abs() < 1e-12, "step {step}");
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_everything_unchanged() {
        let mut p = single(vec![1.0, 2.0]);
        let g = single(vec![0.0, 0.0]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p["w"].data(), &[1.0, 2.0]);
        assert!(s.m["w"]
            .data()
            .iter()
            .chain(s.v["w"].data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = single(vec![1.0]);
        let g = single(vec![f64::NAN]);
        let mut s = AdamState::new(&p);
        match adam_step(&mut p, &g, &mut s, &AdamConfig::default()) {
            Err(NnError::NonFiniteGradient { name }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p["w"].data(), &[1.0]);
        assert_eq!(s.step, 0);
    }
}
