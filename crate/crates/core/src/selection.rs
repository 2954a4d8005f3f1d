//! First-stage proposal selection: parallel classification/instance heads
//! with a double softmax, point-distance guidance, the bag-level loss, and
//! deterministic full-batch training.

use serde::{Deserialize, Serialize};

use crate::config::{DistanceConfig, TrainerConfig};
use crate::dataset::Scene;
use crate::error::{Error, Result};
use crate::geometry::{box_iou, point_in_box};
use crate::loss::{bce, LossValue};
use crate::mat::{softmax_cols, softmax_rows, Matrix};

/// Linear two-branch head: a classification branch normalized over classes
/// and an instance branch normalized over proposals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MilHead {
    pub dim: usize,
    pub classes: usize,
    /// `dim x classes`, row-major.
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    pub w_ins: Vec<f64>,
    pub b_ins: Vec<f64>,
}

impl MilHead {
    /// Zero-initialized head: produces exactly uniform softmax scores.
    pub fn zeros(dim: usize, classes: usize) -> Self {
        MilHead {
            dim,
            classes,
            w_cls: vec![0.0; dim * classes],
            b_cls: vec![0.0; classes],
            w_ins: vec![0.0; dim * classes],
            b_ins: vec![0.0; classes],
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim * self.classes + 2 * self.classes
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend_from_slice(&self.w_cls);
        flat.extend_from_slice(&self.b_cls);
        flat.extend_from_slice(&self.w_ins);
        flat.extend_from_slice(&self.b_ins);
        flat
    }

    pub fn from_flat(dim: usize, classes: usize, flat: &[f64]) -> Self {
        let dk = dim * classes;
        assert_eq!(flat.len(), 2 * dk + 2 * classes);
        MilHead {
            dim,
            classes,
            w_cls: flat[0..dk].to_vec(),
            b_cls: flat[dk..dk + classes].to_vec(),
            w_ins: flat[dk + classes..2 * dk + classes].to_vec(),
            b_ins: flat[2 * dk + classes..].to_vec(),
        }
    }

    fn logits(&self, features: &Matrix, weights: &[f64], bias: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(features.rows, self.classes);
        for m in 0..features.rows {
            let row = features.row(m);
            for k in 0..self.classes {
                let mut z = bias[k];
                for (d, &f) in row.iter().enumerate() {
                    z += f * weights[d * self.classes + k];
                }
                out.set(m, k, z);
            }
        }
        out
    }
}

/// Gradient accumulator matching [`MilHead`]'s layout.
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    pub w_ins: Vec<f64>,
    pub b_ins: Vec<f64>,
}

impl HeadGrad {
    pub fn zeros(head: &MilHead) -> Self {
        HeadGrad {
            w_cls: vec![0.0; head.w_cls.len()],
            b_cls: vec![0.0; head.b_cls.len()],
            w_ins: vec![0.0; head.w_ins.len()],
            b_ins: vec![0.0; head.b_ins.len()],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        flat.extend_from_slice(&self.w_cls);
        flat.extend_from_slice(&self.b_cls);
        flat.extend_from_slice(&self.w_ins);
        flat.extend_from_slice(&self.b_ins);
        flat
    }
}

/// Per-instance training record: bag features, distance scores, and the
/// annotated class.
#[derive(Debug, Clone)]
pub struct BagData {
    pub features: Matrix,
    pub s_dis: Vec<f64>,
    pub class_id: usize,
}

/// Classification and instance scores for one bag. The classification
/// scores are softmax-normalized over classes (each row sums to 1), the
/// instance scores over proposals (each column sums to 1).
pub fn score_heads(features: &Matrix, head: &MilHead) -> Result<(Matrix, Matrix)> {
    if features.cols != head.dim {
        return Err(Error::Dimension(format!(
            "score_heads: features dim {} vs head dim {}",
            features.cols, head.dim
        )));
    }
    if features.rows == 0 {
        return Err(Error::Dimension("score_heads: empty bag".to_string()));
    }
    let z_cls = head.logits(features, &head.w_cls, &head.b_cls);
    let z_ins = head.logits(features, &head.w_ins, &head.b_ins);
    Ok((softmax_rows(&z_cls), softmax_cols(&z_ins)))
}

/// Overlap flags `t[i][m][j]`: proposal `m` of bag `i` both intersects some
/// proposal of the same-class bag `j` and contains `j`'s annotated point.
pub fn overlap_flags(scene: &Scene) -> Vec<Vec<Vec<bool>>> {
    let n = scene.bags.len();
    let mut flags = Vec::with_capacity(n);
    for (i, bag) in scene.bags.iter().enumerate() {
        let mut per_bag = Vec::with_capacity(bag.proposals.len());
        for prop in &bag.proposals {
            let mut per_prop = vec![false; n];
            for (j, other) in scene.bags.iter().enumerate() {
                if j == i || other.point.class_id != bag.point.class_id {
                    continue;
                }
                if !point_in_box(other.point.x, other.point.y, &prop.bbox) {
                    continue;
                }
                let touches =
                    other.proposals.iter().any(|p| box_iou(&prop.bbox, &p.bbox) > 0.0);
                per_prop[j] = touches;
            }
            per_bag.push(per_prop);
        }
        flags.push(per_bag);
    }
    flags
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Distance scores per bag and proposal. A proposal that triggers no
/// overlap flag scores exactly 1. Otherwise the accumulated point distance
/// `W` maps to `sigmoid(1/W)^(s*d)` with `s = +1` under the penalty form
/// (default) and `s = -1` for the literal increasing form.
pub fn distance_scores(
    scene: &Scene,
    flags: &[Vec<Vec<bool>>],
    cfg: &DistanceConfig,
) -> Vec<Vec<f64>> {
    let sign = if cfg.penalize { 1.0 } else { -1.0 };
    scene
        .bags
        .iter()
        .enumerate()
        .map(|(i, bag)| {
            flags[i]
                .iter()
                .map(|per_prop| {
                    let w_dis: f64 = per_prop
                        .iter()
                        .enumerate()
                        .filter(|(_, &t)| t)
                        .map(|(j, _)| bag.point.distance(&scene.bags[j].point))
                        .sum();
                    if w_dis == 0.0 {
                        1.0
                    } else {
                        sigmoid(1.0 / w_dis).powf(sign * cfg.d)
                    }
                })
                .collect()
        })
        .collect()
}

/// Hadamard-fuse the two score branches with the distance scores
/// (broadcast across classes) and sum rows into the bag score.
pub fn fuse_scores(s_cls: &Matrix, s_ins: &Matrix, s_dis: &[f64]) -> Result<(Matrix, Vec<f64>)> {
    if s_cls.rows != s_ins.rows || s_cls.cols != s_ins.cols || s_cls.rows != s_dis.len() {
        return Err(Error::Dimension("fuse_scores: shape mismatch".to_string()));
    }
    let mut fused = Matrix::zeros(s_cls.rows, s_cls.cols);
    let mut bag = vec![0.0; s_cls.cols];
    for m in 0..s_cls.rows {
        for k in 0..s_cls.cols {
            let v = s_cls.get(m, k) * s_ins.get(m, k) * s_dis[m];
            fused.set(m, k, v);
            bag[k] += v;
        }
    }
    Ok((fused, bag))
}

/// Mean bag-level binary cross-entropy over instances; gradient is against
/// the concatenated bag-score vectors.
pub fn bag_loss(bag_scores: &[Vec<f64>], class_ids: &[usize], classes: usize) -> LossValue {
    assert_eq!(bag_scores.len(), class_ids.len());
    let n = bag_scores.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Vec::new();
    for (scores, &class_id) in bag_scores.iter().zip(class_ids) {
        let mut target = vec![0.0; classes];
        target[class_id] = 1.0;
        let lv = bce(scores, &target);
        value += lv.value / n;
        grad.extend(lv.grad.iter().map(|g| g / n));
    }
    LossValue { value, grad }
}

/// Index of the best proposal for `class_id`; ties break to the lowest
/// index.
pub fn select_top_proposal(fused: &Matrix, class_id: usize) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for m in 0..fused.rows {
        let s = fused.get(m, class_id);
        if s > best_score {
            best_score = s;
            best = m;
        }
    }
    best
}

/// Forward pass products kept for backprop.
pub struct BagForward {
    pub s_cls: Matrix,
    pub s_ins: Matrix,
    pub fused: Matrix,
    pub bag_score: Vec<f64>,
}

pub fn forward_bag(head: &MilHead, data: &BagData) -> Result<BagForward> {
    let (s_cls, s_ins) = score_heads(&data.features, head)?;
    let (fused, bag_score) = fuse_scores(&s_cls, &s_ins, &data.s_dis)?;
    Ok(BagForward { s_cls, s_ins, fused, bag_score })
}

/// Backpropagate `d_bag` (gradient against the bag score) through the
/// fuse, both softmaxes, and the linear branches, accumulating into `grad`.
pub fn backward_bag(
    head: &MilHead,
    data: &BagData,
    fwd: &BagForward,
    d_bag: &[f64],
    grad: &mut HeadGrad,
) {
    let m_count = data.features.rows;
    let k_count = head.classes;

    // Through the fuse: dS[m][k] = d_bag[k].
    let mut d_s_cls = Matrix::zeros(m_count, k_count);
    let mut d_s_ins = Matrix::zeros(m_count, k_count);
    for m in 0..m_count {
        for k in 0..k_count {
            let ds = d_bag[k];
            d_s_cls.set(m, k, ds * fwd.s_ins.get(m, k) * data.s_dis[m]);
            d_s_ins.set(m, k, ds * fwd.s_cls.get(m, k) * data.s_dis[m]);
        }
    }

    // Row softmax backward (classification branch).
    let mut d_z_cls = Matrix::zeros(m_count, k_count);
    for m in 0..m_count {
        let mut dot = 0.0;
        for k in 0..k_count {
            dot += d_s_cls.get(m, k) * fwd.s_cls.get(m, k);
        }
        for k in 0..k_count {
            d_z_cls.set(m, k, fwd.s_cls.get(m, k) * (d_s_cls.get(m, k) - dot));
        }
    }

    // Column softmax backward (instance branch).
    let mut d_z_ins = Matrix::zeros(m_count, k_count);
    for k in 0..k_count {
        let mut dot = 0.0;
        for m in 0..m_count {
            dot += d_s_ins.get(m, k) * fwd.s_ins.get(m, k);
        }
        for m in 0..m_count {
            d_z_ins.set(m, k, fwd.s_ins.get(m, k) * (d_s_ins.get(m, k) - dot));
        }
    }

    // Linear-layer gradients.
    let dw_cls = data.features.transpose_matmul(&d_z_cls);
    let dw_ins = data.features.transpose_matmul(&d_z_ins);
    for (g, d) in grad.w_cls.iter_mut().zip(&dw_cls.data) {
        *g += d;
    }
    for (g, d) in grad.w_ins.iter_mut().zip(&dw_ins.data) {
        *g += d;
    }
    for k in 0..k_count {
        let mut bc = 0.0;
        let mut bi = 0.0;
        for m in 0..m_count {
            bc += d_z_cls.get(m, k);
            bi += d_z_ins.get(m, k);
        }
        grad.b_cls[k] += bc;
        grad.b_ins[k] += bi;
    }
}

/// Loss and full head gradient of the mean bag loss over `bags`.
pub fn selection_loss_and_grad(head: &MilHead, bags: &[BagData]) -> Result<(f64, HeadGrad)> {
    let n = bags.len().max(1) as f64;
    let mut grad = HeadGrad::zeros(head);
    let mut total = 0.0;
    for data in bags {
        let fwd = forward_bag(head, data)?;
        let mut target = vec![0.0; head.classes];
        target[data.class_id] = 1.0;
        let lv = bce(&fwd.bag_score, &target);
        total += lv.value / n;
        let d_bag: Vec<f64> = lv.grad.iter().map(|g| g / n).collect();
        backward_bag(head, data, &fwd, &d_bag, &mut grad);
    }
    Ok((total, grad))
}

/// Deterministic full-batch gradient descent. Returns the per-iteration
/// loss trace (length `iters + 1`, including the starting loss).
pub fn train_selection_head(
    head: &mut MilHead,
    bags: &[BagData],
    cfg: &TrainerConfig,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    for iter in 0..=cfg.iters {
        let (loss, grad) = selection_loss_and_grad(head, bags)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("selection loss at iteration {iter}")));
        }
        trace.push(loss);
        if iter == cfg.iters {
            break;
        }
        for (w, g) in head.w_cls.iter_mut().zip(&grad.w_cls) {
            *w -= cfg.lr * g;
        }
        for (b, g) in head.b_cls.iter_mut().zip(&grad.b_cls) {
            *b -= cfg.lr * g;
        }
        for (w, g) in head.w_ins.iter_mut().zip(&grad.w_ins) {
            *w -= cfg.lr * g;
        }
        for (b, g) in head.b_ins.iter_mut().zip(&grad.b_ins) {
            *b -= cfg.lr * g;
        }
    }
    Ok(trace)
}
