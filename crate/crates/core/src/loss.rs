//! Scalar loss primitives with analytic gradients, plus a central-difference
//! gradient checker shared by every training head in the crate.

use crate::error::{Error, Result};
use crate::geometry::BitMask;

/// Clamp applied to every logarithm argument.
pub const EPS_CLAMP: f64 = 1e-7;

/// A scalar loss together with its gradient against the parameter (or
/// prediction) vector it was evaluated at.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[inline]
fn clamp01(p: f64) -> f64 {
    p.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP)
}

/// Binary cross-entropy summed over classes:
/// `-sum_k c_k log p_k + (1 - c_k) log(1 - p_k)`.
///
/// Gradient is with respect to `pred`, evaluated at the clamped values.
pub fn bce(pred: &[f64], target: &[f64]) -> LossValue {
    assert_eq!(pred.len(), target.len());
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (k, (&p_raw, &c)) in pred.iter().zip(target).enumerate() {
        let p = clamp01(p_raw);
        value -= c * p.ln() + (1.0 - c) * (1.0 - p).ln();
        grad[k] = -c / p + (1.0 - c) / (1.0 - p);
    }
    LossValue { value, grad }
}

/// Focal loss `-alpha (1 - p_t)^gamma log p_t` for a single binary target,
/// where `p_t = pred` when `target == 1` and `1 - pred` otherwise.
pub fn focal(pred: f64, target: u8, gamma: f64, alpha: f64) -> LossValue {
    let p = clamp01(pred);
    let (p_t, sign) = if target == 1 { (p, 1.0) } else { (1.0 - p, -1.0) };
    let one_minus = 1.0 - p_t;
    let value = -alpha * one_minus.powf(gamma) * p_t.ln();
    // d/dp_t of -alpha (1-p_t)^g ln(p_t)
    let d_pt = if gamma == 0.0 {
        -alpha / p_t
    } else {
        -alpha * (-gamma * one_minus.powf(gamma - 1.0) * p_t.ln() + one_minus.powf(gamma) / p_t)
    };
    LossValue { value, grad: vec![d_pt * sign] }
}

/// Smooth L1 with transition at |d| = 1: `0.5 d^2` inside, `|d| - 0.5` outside.
pub fn smooth_l1(pred: f64, target: f64) -> LossValue {
    let d = pred - target;
    if d.abs() < 1.0 {
        LossValue { value: 0.5 * d * d, grad: vec![d] }
    } else {
        LossValue { value: d.abs() - 0.5, grad: vec![d.signum()] }
    }
}

/// Smoothing constant used by [`dice`].
pub const DICE_SMOOTH: f64 = 1.0;

/// Dice loss `1 - (2 <P,T> + s) / (|P|^2 + |T|^2 + s)` over a soft
/// prediction and a binary target of equal dimensions.
pub fn dice(pred: &[f64], target: &BitMask) -> Result<LossValue> {
    if pred.len() != target.bits.len() {
        return Err(Error::Dimension(format!(
            "dice: pred {} vs target {}",
            pred.len(),
            target.bits.len()
        )));
    }
    let mut dot = 0.0;
    let mut p2 = 0.0;
    let mut t2 = 0.0;
    for (&p, &t) in pred.iter().zip(&target.bits) {
        let tv = if t { 1.0 } else { 0.0 };
        dot += p * tv;
        p2 += p * p;
        t2 += tv;
    }
    let num = 2.0 * dot + DICE_SMOOTH;
    let den = p2 + t2 + DICE_SMOOTH;
    let value = 1.0 - num / den;
    let grad = pred
        .iter()
        .zip(&target.bits)
        .map(|(&p, &t)| {
            let tv = if t { 1.0 } else { 0.0 };
            -(2.0 * tv * den - num * 2.0 * p) / (den * den)
        })
        .collect();
    Ok(LossValue { value, grad })
}

/// Weighted assembly of the stage losses:
/// `mask + cls + lambda * bag + refine + affinity`.
///
/// Gradients concatenate in argument order.
pub fn total_loss(
    mask: &LossValue,
    cls: &LossValue,
    bag: &LossValue,
    refine: &LossValue,
    affinity: &LossValue,
    lambda: f64,
) -> LossValue {
    let value = mask.value + cls.value + lambda * bag.value + refine.value + affinity.value;
    let mut grad = Vec::with_capacity(
        mask.grad.len() + cls.grad.len() + bag.grad.len() + refine.grad.len() + affinity.grad.len(),
    );
    grad.extend_from_slice(&mask.grad);
    grad.extend_from_slice(&cls.grad);
    grad.extend(bag.grad.iter().map(|g| lambda * g));
    grad.extend_from_slice(&refine.grad);
    grad.extend_from_slice(&affinity.grad);
    LossValue { value, grad }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Default pass threshold for [`gradcheck`].
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Compare an analytic gradient against central differences of `f` at
/// `point`. Relative error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradcheck<F>(f: F, analytic: &[f64], point: &[f64]) -> Result<GradReport>
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), point.len());
    let mut max_rel = 0.0;
    let mut worst = 0;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let h = 1e-6 * point[i].abs().max(1.0);
        x[i] = point[i] + h;
        let f_plus = f(&x);
        x[i] = point[i] - h;
        let f_minus = f(&x);
        x[i] = point[i];
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck evaluation at coordinate {i}")));
        }
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradReport { max_rel_err: max_rel, worst_index: worst, passed: max_rel <= GRADCHECK_TOL })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_perfect_prediction_is_small() {
        let pred = vec![1.0 - 1e-9, 1e-9];
        let target = vec![1.0, 0.0];
        assert!(bce(&pred, &target).value < 1e-6);
    }

    #[test]
    fn bce_uniform_two_class() {
        let v = bce(&[0.5, 0.5], &[1.0, 0.0]).value;
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pred: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..0.95)).collect();
            let target = vec![1.0, 0.0, 0.0, 0.0];
            let lv = bce(&pred, &target);
            let t = target.clone();
            let report = gradcheck(|p| bce(p, &t).value, &lv.grad, &pred).unwrap();
            assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn focal_examples() {
        assert!(focal(1.0 - 1e-9, 1, 2.0, 0.25).value < 1e-6);
        let v = focal(0.5, 1, 2.0, 0.25).value;
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_reduces_to_cross_entropy() {
        for p in [0.1, 0.35, 0.6, 0.9] {
            let f = focal(p, 1, 0.0, 1.0).value;
            let ce = -(p as f64).ln();
            assert!((f - ce).abs() < 1e-12);
            let f0 = focal(p, 0, 0.0, 1.0).value;
            let ce0 = -(1.0 - p as f64).ln();
            assert!((f0 - ce0).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..40 {
            let p = rng.gen_range(0.05..0.95);
            let target = if rng.gen_bool(0.5) { 1 } else { 0 };
            let lv = focal(p, target, 2.0, 0.25);
            let report =
                gradcheck(|x| focal(x[0], target, 2.0, 0.25).value, &lv.grad, &[p]).unwrap();
            assert!(report.max_rel_err < 1e-5);
        }
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(3.0, 3.0).value, 0.0);
        assert!((smooth_l1(0.5, 0.0).value - 0.125).abs() < 1e-15);
        assert!((smooth_l1(2.0, 0.0).value - 1.5).abs() < 1e-15);
    }

    #[test]
    fn dice_cases() {
        let mut target = BitMask::new(10, 10);
        for i in 0..50 {
            target.bits[i] = true;
        }
        let perfect: Vec<f64> =
            target.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert!(dice(&perfect, &target).unwrap().value < 0.01);

        let zero = vec![0.0; 100];
        assert!(dice(&zero, &target).unwrap().value > 0.9);

        // Half overlap on 2x2: pred selects pixels {0,1}, target {1,2}.
        let target2 = BitMask { width: 2, height: 2, bits: vec![false, true, true, false] };
        let pred2 = vec![1.0, 1.0, 0.0, 0.0];
        let expected = 1.0 - (2.0 * 1.0 + 1.0) / (2.0 + 2.0 + 1.0);
        assert!((dice(&pred2, &target2).unwrap().value - expected).abs() < 1e-12);
    }

    #[test]
    fn dice_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let target = BitMask { width: 3, height: 2, bits: vec![true, false, true, true, false, false] };
        for _ in 0..20 {
            let pred: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..0.95)).collect();
            let lv = dice(&pred, &target).unwrap();
            let t = target.clone();
            let report = gradcheck(|p| dice(p, &t).unwrap().value, &lv.grad, &pred).unwrap();
            assert!(report.max_rel_err < 1e-5);
        }
    }

    #[test]
    fn total_loss_assembly() {
        let zero = LossValue { value: 0.0, grad: vec![] };
        assert_eq!(total_loss(&zero, &zero, &zero, &zero, &zero, 0.25).value, 0.0);

        let bag = LossValue { value: 4.0, grad: vec![1.0] };
        let v = total_loss(&zero, &zero, &bag, &zero, &zero, 0.25);
        assert_eq!(v.value, 1.0);
        assert_eq!(v.grad, vec![0.25]);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let parts: Vec<LossValue> = (0..5)
                .map(|_| LossValue { value: rng.gen_range(-2.0..2.0), grad: vec![rng.gen()] })
                .collect();
            let lambda = rng.gen_range(0.0..1.0);
            let got = total_loss(&parts[0], &parts[1], &parts[2], &parts[3], &parts[4], lambda);
            let expect = parts[0].value + parts[1].value + lambda * parts[2].value
                + parts[3].value
                + parts[4].value;
            assert!((got.value - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcheck_quadratic_and_corruption() {
        let point = vec![1.5, -2.0, 0.25];
        let analytic: Vec<f64> = point.iter().map(|x| 2.0 * x).collect();
        let report =
            gradcheck(|x| x.iter().map(|v| v * v).sum(), &analytic, &point).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-8);

        let mut corrupted = analytic.clone();
        corrupted[1] += 0.5;
        let report =
            gradcheck(|x| x.iter().map(|v| v * v).sum(), &corrupted, &point).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_index, 1);
    }

    #[test]
    fn losses_nonnegative_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let p = rng.gen_range(0.01..0.99);
            assert!(focal(p, 1, 2.0, 0.25).value >= 0.0);
            assert!(smooth_l1(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)).value >= 0.0);
            let pred = vec![p, 1.0 - p];
            assert!(bce(&pred, &[1.0, 0.0]).value >= 0.0);
        }
    }
}
