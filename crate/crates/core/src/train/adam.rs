use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// One bias-corrected Adam update (no weight decay) of every parameter.
///
/// The effective step size of a parameter is `lr` times its group's scale
/// (see [`ParamStore::set_lr_scales`]). Gradient buffers are cleared after
/// the update.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    let scales: Vec<f64> = store.iter().map(|p| store.lr_scale(p.group)).collect();
    for (p, scale) in store.iter_mut().zip(scales) {
        let grad = p.grad.take().expect("checked above");
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}`[{i}]", p.name)));
        }
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let step = lr * scale;
        for (((x, g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(p.m.iter_mut())
            .zip(p.v.iter_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *x = T::of(x.as_f64() - step * m_hat / (v_hat.sqrt() + EPSILON));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::train::ParamGroup;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", ParamGroup::Branch, Tensor::full([1, 1, 1, 1], x));
        s
    }

    /// Textbook scalar Adam, used as the oracle.
    fn scalar_adam(mut x: f64, grads: &[f64], lr: f64) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        x
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = scalar_store(0.7);
        s.accumulate_grad(crate::train::ParamId(0), &[0.0]).unwrap();
        adam_step(&mut s, 0.3).unwrap();
        let p = s.iter().next().unwrap();
        assert_eq!(p.value.data()[0], 0.7);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        s.accumulate_grad(crate::train::ParamId(0), &[1.0]).unwrap();
        adam_step(&mut s, 0.1).unwrap();
        let x = s.iter().next().unwrap().value.data()[0];
        assert!(((1.0 - x) - 0.1).abs() < 1e-8);
    }

    #[test]
    fn alternating_gradients_match_scalar_reference() {
        let mut s = scalar_store(2.0);
        for g in [1.0, -1.0] {
            s.accumulate_grad(crate::train::ParamId(0), &[g]).unwrap();
            adam_step(&mut s, 0.1).unwrap();
        }
        let x = s.iter().next().unwrap().value.data()[0];
        assert_eq!(x, scalar_adam(2.0, &[1.0, -1.0], 0.1));
        // second step pulls back toward the start
        assert!(x > 2.0 - 0.1);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = scalar_store(1.0);
        assert!(matches!(adam_step(&mut s, 0.1), Err(Error::MissingGradient(n)) if n == "x"));
    }

    #[test]
    fn gradients_cleared_after_step() {
        let mut s = scalar_store(1.0);
        s.accumulate_grad(crate::train::ParamId(0), &[0.5]).unwrap();
        adam_step(&mut s, 0.1).unwrap();
        assert!(s.iter().all(|p| p.grad.is_none()));
    }
}
