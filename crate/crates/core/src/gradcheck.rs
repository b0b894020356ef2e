//! Central-difference gradient verification.

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Relative error with floor: |a - b| / max(|a|, |b|, 1e-8).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max relative error between two gradient vectors.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function at `point`.
pub fn central_diff<F>(f: F, point: &Tensor, h: f64) -> Vec<f64>
where
    F: Fn(&Tensor) -> f64,
{
    let mut grads = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + h;
        let fp = f(&probe);
        probe.data_mut()[i] = x - h;
        let fm = f(&probe);
        probe.data_mut()[i] = x;
        grads.push((fp - fm) / (2.0 * h));
    }
    grads
}

/// Compare a claimed gradient against central differences of `f`.
pub fn check_against<F>(f: F, claimed: &[f64], point: &Tensor, h: f64) -> f64
where
    F: Fn(&Tensor) -> f64,
{
    let numeric = central_diff(f, point, h);
    max_rel_err(claimed, &numeric)
}

/// Max relative error between the tape gradient of `build` and central
/// differences. `build` records a scalar function of one leaf.
pub fn grad_check<F>(build: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    assert!(h > 0.0, "grad_check step must be positive");
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(point.clone());
        let out = build(&mut tape, x)?;
        let grads = tape.backward(out)?;
        grads.wrt(&tape, x).into_data()
    };
    let eval = |p: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone());
        let out = build(&mut tape, x).expect("grad_check re-evaluation failed");
        tape.value(out).item()
    };
    Ok(check_against(eval, &analytic, point, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn sum_is_exact() {
        let point = Tensor::from_fn(&[3, 4], |i| (i as f64) * 0.1 - 0.5);
        let err = grad_check(|t, x| Ok(t.sum(x)), &point, 1e-5).unwrap();
        assert!(err < 1e-10, "err = {}", err);
    }

    #[test]
    fn mean_sigmoid_within_tolerance() {
        let mut rng = SplitMix64::new(9);
        let point = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.next_range(-2.0, 2.0));
        let err = grad_check(
            |t, x| {
                let s = t.sigmoid(x);
                Ok(t.mean(s))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {}", err);
    }

    #[test]
    fn maxpool_at_strict_maxima() {
        // distinct values per window, so no tie is crossed by +-h
        let mut rng = SplitMix64::new(13);
        let point = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 * 0.37 + rng.next_f64() * 0.1);
        let err = grad_check(
            |t, x| {
                let p = t.maxpool2d(x)?;
                Ok(t.mean(p))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {}", err);
    }

    #[test]
    fn detects_corrupted_gradient() {
        // a deliberately scaled claimed gradient must fail the check
        let point = Tensor::from_fn(&[4], |i| 0.3 * i as f64 + 0.1);
        let f = |p: &Tensor| -> f64 { p.data().iter().map(|v| v * v).sum() };
        let good: Vec<f64> = point.data().iter().map(|v| 2.0 * v).collect();
        let bad: Vec<f64> = good.iter().map(|v| 1.1 * v).collect();
        assert!(check_against(f, &good, &point, 1e-6) < 1e-8);
        assert!(check_against(f, &bad, &point, 1e-6) > 1e-5);
    }
}
