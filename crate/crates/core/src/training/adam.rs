use indexmap::IndexMap;

use super::TrainError;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    /// Number of completed updates.
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &IndexMap<String, Tensor<T>>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
                .collect()
        };
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update.
///
/// Every gradient is checked before any parameter changes, so a rejected step
/// leaves parameters and state untouched.
pub fn adam_step<T: Float>(
    params: &mut IndexMap<String, Tensor<T>>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    config: &AdamConfig,
) -> Result<(), TrainError> {
    let step = state.t + 1;
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::GradientShape { parameter: name.clone() })?;
        let moments_ok = state.m.get(name).is_some_and(|m| m.shape() == p.shape())
            && state.v.get(name).is_some_and(|v| v.shape() == p.shape());
        if g.shape() != p.shape() || !moments_ok {
            return Err(TrainError::GradientShape { parameter: name.clone() });
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                parameter: name.clone(),
                step,
            });
        }
    }
    let AdamConfig { beta1, beta2, epsilon } = *config;
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m[name].data_mut();
        let v = state.v[name].data_mut();
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i].as_f64();
            let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * gi;
            let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * gi * gi;
            m[i] = T::lit(mi);
            v[i] = T::lit(vi);
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + epsilon);
            *theta = T::lit(theta.as_f64() - update);
        }
    }
    state.t = step;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> IndexMap<String, Tensor<f64>> {
        [("w".to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &single(0.3), &mut s, 0.01, &AdamConfig::default()).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        let expected = 1.0 - 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((p["w"].data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = single(2.0);
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &single(0.0), &mut s, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p["w"].data()[0], 2.0);
        assert_eq!(s.t, 3);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = single(2.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &single(f64::NAN), &mut s, 0.1, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { ref parameter, step: 1 } if parameter == "w"));
        assert_eq!(p["w"].data()[0], 2.0);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(2.0);
        let mut s = AdamState::new(&p);
        let g: IndexMap<String, Tensor<f64>> = [("w".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        assert!(matches!(
            adam_step(&mut p, &g, &mut s, 0.1, &AdamConfig::default()),
            Err(TrainError::GradientShape { .. })
        ));
    }
}
