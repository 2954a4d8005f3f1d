//! Completeness self-distillation: a per-stage linear head predicts how
//! completely each proposal covers its instance, trained against
//! self-generated IoU targets and used to re-score selection.

use crate::config::TrainerConfig;
use crate::error::{Error, Result};
use crate::geometry::{box_iou, BBox};
use crate::loss::{smooth_l1, LossValue};
use crate::mat::Matrix;

/// Which selection stage a head belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// Linear completeness predictor with a tanh output in (-1, 1).
#[derive(Debug, Clone)]
pub struct CompletenessHead {
    pub stage: Stage,
    pub dim: usize,
    pub w: Vec<f64>,
    pub b: f64,
}

impl CompletenessHead {
    pub fn zeros(stage: Stage, dim: usize) -> Self {
        CompletenessHead { stage, dim, w: vec![0.0; dim], b: 0.0 }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.w.clone();
        flat.push(self.b);
        flat
    }

    pub fn from_flat(stage: Stage, dim: usize, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), dim + 1);
        CompletenessHead { stage, dim, w: flat[..dim].to_vec(), b: flat[dim] }
    }
}

/// Normalized IoU targets: `t` in [0, 1] against the current best box and
/// `t_prime = 2 t - 1`.
#[derive(Debug, Clone)]
pub struct CompletenessTargets {
    pub t: Vec<f64>,
    pub t_prime: Vec<f64>,
}

/// Self-generated supervision: per-proposal IoU against the stage's
/// current best pseudo box.
pub fn completeness_targets(boxes: &[BBox], best: &BBox) -> CompletenessTargets {
    let t: Vec<f64> = boxes.iter().map(|b| box_iou(b, best)).collect();
    let t_prime = t.iter().map(|v| 2.0 * v - 1.0).collect();
    CompletenessTargets { t, t_prime }
}

/// Add the mean of the top-`k` rows (by score, ties to the lower index) to
/// every row: local features enriched with the bag's core context.
pub fn context_enhance(features: &Matrix, scores: &[f64], k: usize) -> Matrix {
    assert_eq!(features.rows, scores.len());
    let k = k.clamp(1, features.rows);
    let mut order: Vec<usize> = (0..features.rows).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut context = vec![0.0; features.cols];
    for &m in order.iter().take(k) {
        for (c, v) in features.row(m).iter().enumerate() {
            context[c] += v / k as f64;
        }
    }
    let mut out = features.clone();
    for m in 0..out.rows {
        for c in 0..out.cols {
            let v = out.get(m, c) + context[c];
            out.set(m, c, v);
        }
    }
    out
}

/// `tanh(F* w + b)` per proposal.
pub fn predict_completeness(enhanced: &Matrix, head: &CompletenessHead) -> Result<Vec<f64>> {
    if enhanced.cols != head.dim {
        return Err(Error::Dimension(format!(
            "predict_completeness: features dim {} vs head dim {}",
            enhanced.cols, head.dim
        )));
    }
    Ok((0..enhanced.rows)
        .map(|m| {
            let z: f64 =
                enhanced.row(m).iter().zip(&head.w).map(|(f, w)| f * w).sum::<f64>() + head.b;
            z.tanh()
        })
        .collect())
}

/// Combined distillation loss for both stages: per-stage smooth-L1 against
/// the normalized targets plus a consistency term over the index range the
/// stages share (the original bag, before augmentation). Each term is a
/// mean over its own proposals; gradients concatenate as
/// `[stage-one predictions, stage-two predictions]`.
pub fn distill_loss(
    pred_one: &[f64],
    target_one: &[f64],
    pred_two: &[f64],
    target_two: &[f64],
) -> Result<LossValue> {
    if pred_one.len() != target_one.len() || pred_two.len() != target_two.len() {
        return Err(Error::Dimension("distill_loss: prediction/target length mismatch".into()));
    }
    if pred_one.len() > pred_two.len() {
        return Err(Error::Dimension(
            "distill_loss: stage-two bag smaller than the shared stage-one bag".into(),
        ));
    }
    let n1 = pred_one.len().max(1) as f64;
    let n2 = pred_two.len().max(1) as f64;
    let shared = pred_one.len();
    let ns = shared.max(1) as f64;

    let mut value = 0.0;
    let mut grad_one = vec![0.0; pred_one.len()];
    let mut grad_two = vec![0.0; pred_two.len()];

    for (m, (&p, &t)) in pred_one.iter().zip(target_one).enumerate() {
        let lv = smooth_l1(p, t);
        value += lv.value / n1;
        grad_one[m] += lv.grad[0] / n1;
    }
    for (m, (&p, &t)) in pred_two.iter().zip(target_two).enumerate() {
        let lv = smooth_l1(p, t);
        value += lv.value / n2;
        grad_two[m] += lv.grad[0] / n2;
    }
    for m in 0..shared {
        let lv = smooth_l1(pred_one[m], pred_two[m]);
        value += lv.value / ns;
        grad_one[m] += lv.grad[0] / ns;
        grad_two[m] -= lv.grad[0] / ns;
    }

    let mut grad = grad_one;
    grad.extend(grad_two);
    Ok(LossValue { value, grad })
}

/// Map completeness into (0, 1) and multiply into every class column.
pub fn holistic_score(fused: &Matrix, completeness: &[f64]) -> Matrix {
    assert_eq!(fused.rows, completeness.len());
    let mut out = fused.clone();
    for m in 0..out.rows {
        let scale = (completeness[m] + 1.0) / 2.0;
        for k in 0..out.cols {
            let v = out.get(m, k) * scale;
            out.set(m, k, v);
        }
    }
    out
}

/// Argmax of the holistic score for a class; ties break to the lower
/// index. Equivalent to `selection::select_top_proposal` on the re-scored
/// matrix, re-exported here for call-site clarity.
pub fn select_holistic(holistic: &Matrix, class_id: usize) -> usize {
    crate::selection::select_top_proposal(holistic, class_id)
}

/// Gradient of the mean per-bag smooth-L1 distillation objective for one
/// head over one bag; used by the training loop below.
fn head_loss_and_grad(
    head: &CompletenessHead,
    enhanced: &Matrix,
    targets: &[f64],
) -> Result<(f64, Vec<f64>, f64)> {
    let preds = predict_completeness(enhanced, head)?;
    let n = preds.len().max(1) as f64;
    let mut value = 0.0;
    let mut dw = vec![0.0; head.dim];
    let mut db = 0.0;
    for (m, (&p, &t)) in preds.iter().zip(targets).enumerate() {
        let lv = smooth_l1(p, t);
        value += lv.value / n;
        let dz = lv.grad[0] / n * (1.0 - p * p);
        for (d, &f) in enhanced.row(m).iter().enumerate() {
            dw[d] += dz * f;
        }
        db += dz;
    }
    Ok((value, dw, db))
}

/// Deterministic full-batch training of one completeness head against
/// fixed per-bag targets.
pub fn train_completeness_head(
    head: &mut CompletenessHead,
    bags: &[(Matrix, Vec<f64>)],
    cfg: &TrainerConfig,
) -> Result<Vec<f64>> {
    let n = bags.len().max(1) as f64;
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    for iter in 0..=cfg.iters {
        let mut total = 0.0;
        let mut dw = vec![0.0; head.dim];
        let mut db = 0.0;
        for (enhanced, targets) in bags {
            let (value, gw, gb) = head_loss_and_grad(head, enhanced, targets)?;
            total += value / n;
            for (a, g) in dw.iter_mut().zip(&gw) {
                *a += g / n;
            }
            db += gb / n;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("completeness loss at iteration {iter}")));
        }
        trace.push(total);
        if iter == cfg.iters {
            break;
        }
        for (w, g) in head.w.iter_mut().zip(&dw) {
            *w -= cfg.lr * g;
        }
        head.b -= cfg.lr * db;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn targets_examples() {
        let best = BBox::new(0.0, 0.0, 4.0, 4.0);
        let boxes = vec![
            best,
            BBox::new(50.0, 50.0, 2.0, 2.0),
            BBox::new(1.0, 0.0, 4.0, 4.0), // IoU 1/2... compute: inter 3*4=12, union 16+16-12=20 -> 0.6
        ];
        let t = completeness_targets(&boxes, &best);
        assert_eq!(t.t[0], 1.0);
        assert_eq!(t.t_prime[0], 1.0);
        assert_eq!(t.t[1], 0.0);
        assert_eq!(t.t_prime[1], -1.0);
        for (a, b) in t.t.iter().zip(&t.t_prime) {
            assert_eq!(2.0 * a - 1.0, *b);
            assert!((-1.0..=1.0).contains(b));
        }
        // IoU-1/3 style check composed with the box oracle.
        let third = completeness_targets(&[BBox::new(1.0, 0.0, 2.0, 2.0)], &BBox::new(0.0, 0.0, 2.0, 2.0));
        assert!((third.t[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((third.t_prime[0] + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn context_enhance_cases() {
        // Single row: doubled.
        let f = Matrix::from_rows(vec![vec![1.0, -2.0]]);
        let e = context_enhance(&f, &[0.5], 3);
        assert_eq!(e.row(0), &[2.0, -4.0]);

        // Identical rows: all doubled.
        let f = Matrix::from_rows(vec![vec![1.0, 2.0]; 4]);
        let e = context_enhance(&f, &[0.1, 0.2, 0.3, 0.4], 2);
        for m in 0..4 {
            assert_eq!(e.row(m), &[2.0, 4.0]);
        }

        // k = 2 over known rows adds the mean of the two top-scored rows.
        let f = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![4.0, 4.0]]);
        let e = context_enhance(&f, &[0.9, 0.8, 0.1], 2);
        // top-2 rows are 0 and 1, mean = [0.5, 0.5]
        assert_eq!(e.row(2), &[4.5, 4.5]);
    }

    #[test]
    fn predict_cases() {
        let head = CompletenessHead::zeros(Stage::One, 3);
        let f = Matrix::from_rows(vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]]);
        assert_eq!(predict_completeness(&f, &head).unwrap(), vec![0.0, 0.0]);

        let mut strong = CompletenessHead::zeros(Stage::One, 3);
        strong.w = vec![10.0, 10.0, 10.0];
        let p = predict_completeness(&f, &strong).unwrap();
        assert!(p[0] > 0.999999);

        // Matches the scalar tanh oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut head = CompletenessHead::zeros(Stage::Two, 3);
        for w in head.w.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        head.b = 0.3;
        let p = predict_completeness(&f, &head).unwrap();
        for m in 0..2 {
            let z: f64 =
                f.row(m).iter().zip(&head.w).map(|(a, b)| a * b).sum::<f64>() + head.b;
            assert!((p[m] - z.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_loss_cases() {
        // Perfect agreement everywhere: zero.
        let lv = distill_loss(&[0.5, -0.5], &[0.5, -0.5], &[0.5, -0.5, 0.1], &[0.5, -0.5, 0.1])
            .unwrap();
        assert_eq!(lv.value, 0.0);

        // Only the consistency term differs by 0.5 on one of two shared
        // rows: 0.5 * 0.125 per the per-term mean.
        let lv = distill_loss(&[0.0, 0.0], &[0.0, 0.0], &[0.5, 0.0], &[0.5, 0.0]).unwrap();
        assert!((lv.value - 0.125 / 2.0).abs() < 1e-12);

        // Length mismatches are rejected.
        assert!(distill_loss(&[0.0; 3], &[0.0; 3], &[0.0; 2], &[0.0; 2]).is_err());
        assert!(distill_loss(&[0.0; 2], &[0.0; 3], &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn distill_loss_joint_gradcheck_through_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let d = 4;
        let f_one = Matrix::from_rows(
            (0..3).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        );
        let f_two = Matrix::from_rows(
            (0..5).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        );
        let t_one: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let t_two: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.9..0.9)).collect();

        let mut head_one = CompletenessHead::zeros(Stage::One, d);
        let mut head_two = CompletenessHead::zeros(Stage::Two, d);
        for w in head_one.w.iter_mut().chain(head_two.w.iter_mut()) {
            *w = rng.gen_range(-0.5..0.5);
        }

        // Analytic gradient through both tanh heads.
        let p_one = predict_completeness(&f_one, &head_one).unwrap();
        let p_two = predict_completeness(&f_two, &head_two).unwrap();
        let lv = distill_loss(&p_one, &t_one, &p_two, &t_two).unwrap();
        let mut analytic = vec![0.0; 2 * (d + 1)];
        for m in 0..3 {
            let dz = lv.grad[m] * (1.0 - p_one[m] * p_one[m]);
            for (di, &fv) in f_one.row(m).iter().enumerate() {
                analytic[di] += dz * fv;
            }
            analytic[d] += dz;
        }
        for m in 0..5 {
            let dz = lv.grad[3 + m] * (1.0 - p_two[m] * p_two[m]);
            for (di, &fv) in f_two.row(m).iter().enumerate() {
                analytic[d + 1 + di] += dz * fv;
            }
            analytic[2 * d + 1] += dz;
        }

        let mut point = head_one.to_flat();
        point.extend(head_two.to_flat());
        let report = gradcheck(
            |flat| {
                let h1 = CompletenessHead::from_flat(Stage::One, d, &flat[..d + 1]);
                let h2 = CompletenessHead::from_flat(Stage::Two, d, &flat[d + 1..]);
                let p1 = predict_completeness(&f_one, &h1).unwrap();
                let p2 = predict_completeness(&f_two, &h2).unwrap();
                distill_loss(&p1, &t_one, &p2, &t_two).unwrap().value
            },
            &analytic,
            &point,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn holistic_score_cases() {
        let fused = Matrix::from_rows(vec![vec![0.4, 0.6], vec![0.5, 0.5]]);
        let same = holistic_score(&fused, &[1.0, 1.0]);
        assert_eq!(same.data, fused.data);

        let killed = holistic_score(&fused, &[-1.0, 1.0]);
        assert_eq!(killed.get(0, 0), 0.0);
        assert_eq!(killed.get(0, 1), 0.0);
        assert_eq!(killed.get(1, 0), 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let c: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = holistic_score(&fused, &c);
            for m in 0..2 {
                for k in 0..2 {
                    let expect = fused.get(m, k) * (c[m] + 1.0) / 2.0;
                    assert!((h.get(m, k) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn holistic_selection_flips_part_winner() {
        // A part proposal with a higher fused score but poor completeness
        // loses to the whole-object proposal after re-scoring.
        let fused = Matrix::from_rows(vec![vec![0.6], vec![0.5]]);
        assert_eq!(select_holistic(&fused, 0), 0);
        let holistic = holistic_score(&fused, &[-0.5, 0.9]);
        assert_eq!(select_holistic(&holistic, 0), 1);

        // Uniform scores break ties to index 0.
        let uniform = Matrix::from_rows(vec![vec![0.5], vec![0.5]]);
        assert_eq!(select_holistic(&uniform, 0), 0);
    }

    #[test]
    fn training_fits_linear_completeness_signal() {
        // Targets correlate with the first feature; the head should learn
        // to track them and reduce the loss substantially.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let bags: Vec<(Matrix, Vec<f64>)> = (0..10)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..6)
                    .map(|_| {
                        let s = rng.gen_range(-0.8..0.8);
                        vec![s, rng.gen_range(-0.2..0.2), 1.0]
                    })
                    .collect();
                let targets = rows.iter().map(|r| (1.2 * r[0]).tanh()).collect();
                (Matrix::from_rows(rows), targets)
            })
            .collect();
        let mut head = CompletenessHead::zeros(Stage::One, 3);
        let trace =
            train_completeness_head(&mut head, &bags, &TrainerConfig { iters: 300, lr: 0.5 })
                .unwrap();
        assert!(trace.last().unwrap() < &(0.05 * trace[0]));
    }
}
