use ppac_core::adaptive::{Activation, NormalizationMode};
use ppac_core::net::NetKind;
use ppac_core::train::gradcheck::{AdaptiveProbe, ConvProbe, NetProbe, MAX_COORDINATES};
use ppac_core::train::{grad_check, Differentiable};
use ppac_core::{Result, Task};

const TOL: f64 = 1e-4;

#[test]
fn adaptive_layer_all_modes_and_optional_inputs() {
    let mut case = 0;
    for mode in [NormalizationMode::None, NormalizationMode::Kernel, NormalizationMode::Advanced] {
        for features in [None, Some(4)] {
            for confidences in [false, true] {
                for shared in [false, true] {
                    case += 1;
                    let mut p = AdaptiveProbe::random([2, 3, 5, 6], 2, 3, shared, mode, features, confidences, 100 + case);
                    let r = grad_check(&mut p, TOL, MAX_COORDINATES, case).unwrap();
                    assert!(r.passed(), "{mode:?} features={features:?} conf={confidences} shared={shared}: {r}");
                }
            }
        }
    }
}

#[test]
fn standard_convolution_layer() {
    for act in [Activation::None, Activation::Relu, Activation::Sigmoid] {
        let mut p = ConvProbe::random([1, 2, 4, 4], 3, 3, act, 8);
        let r = grad_check(&mut p, TOL, MAX_COORDINATES, 0).unwrap();
        assert!(r.passed(), "{act:?}: {r}");
    }
}

#[test]
fn full_networks() {
    for (kind, task) in [
        (NetKind::Ppac, Task::Flow),
        (NetKind::Pac, Task::Flow),
        (NetKind::Simple, Task::Flow),
        (NetKind::Pac, Task::Segmentation),
    ] {
        let mut p = NetProbe::random(kind, task, 5, 6, 21).unwrap();
        let r = grad_check(&mut p, TOL, 3_000, 5).unwrap();
        assert!(r.passed(), "{kind:?}-{task:?}: {r}");
    }
}

/// Reports the bias gradient with the wrong sign.
struct FlippedBias(ConvProbe);

impl Differentiable for FlippedBias {
    fn tensors(&self) -> Vec<(String, usize)> {
        self.0.tensors()
    }
    fn get(&self, t: usize, i: usize) -> f64 {
        self.0.get(t, i)
    }
    fn set(&mut self, t: usize, i: usize, v: f64) {
        self.0.set(t, i, v)
    }
    fn loss(&self) -> Result<f64> {
        self.0.loss()
    }
    fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let mut g = self.0.analytic()?;
        g[2].iter_mut().for_each(|v| *v = -*v);
        Ok(g)
    }
}

#[test]
fn corrupted_backward_is_caught_in_the_bias() {
    let mut p = FlippedBias(ConvProbe::random([1, 2, 4, 4], 3, 3, Activation::None, 8));
    let r = grad_check(&mut p, TOL, MAX_COORDINATES, 0).unwrap();
    assert!(!r.passed());
    assert_eq!(r.worst.unwrap().tensor, "bias");
}

/// Loss that is NaN everywhere.
struct Poisoned(ConvProbe);

impl Differentiable for Poisoned {
    fn tensors(&self) -> Vec<(String, usize)> {
        self.0.tensors()
    }
    fn get(&self, t: usize, i: usize) -> f64 {
        self.0.get(t, i)
    }
    fn set(&mut self, t: usize, i: usize, v: f64) {
        self.0.set(t, i, v)
    }
    fn loss(&self) -> Result<f64> {
        Ok(f64::NAN)
    }
    fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        self.0.analytic()
    }
}

#[test]
fn non_finite_numeric_gradient_fails_with_location() {
    let mut p = Poisoned(ConvProbe::random([1, 1, 3, 3], 1, 3, Activation::None, 1));
    let r = grad_check(&mut p, TOL, MAX_COORDINATES, 0).unwrap();
    assert!(!r.passed());
    let at = r.non_finite.unwrap();
    assert_eq!((at.tensor.as_str(), at.index), ("input", 0));
}
