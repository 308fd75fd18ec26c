//! Central finite differences, used as an independent oracle for `backward`.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Component-wise `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)`.
pub fn numeric_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!("function value near component {i}")));
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`.
///
/// The floor keeps the measure meaningful when both gradients are
/// essentially zero, where only round-off remains.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient() {
        let x = Tensor::vector(vec![3.0, 7.0]);
        let g = numeric_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-6).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn dot_gradient_matches_analytic() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = numeric_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_eps_and_non_finite() {
        let x = Tensor::vector(vec![0.0]);
        assert!(numeric_gradient(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(numeric_gradient(|_| Ok(f64::NAN), &x, 1e-6).is_err());
    }
}
