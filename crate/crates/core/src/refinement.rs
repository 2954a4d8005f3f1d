//! Second-stage refinement: positive/negative proposal sampling, the
//! refinement losses, deterministic training, box mining, and mask
//! matching.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{MiningConfig, SamplerConfig, TrainerConfig};
use crate::dataset::{ProposalBag, Scene};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, BBox, BitMask};
use crate::loss::{focal, LossValue, EPS_CLAMP};
use crate::mat::Matrix;
use crate::selection::{backward_bag, forward_bag, BagData, HeadGrad, MilHead};

/// Origin tag for sampled negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeKind {
    Background,
    Part,
}

/// Sampled negative boxes with their origin tags.
#[derive(Debug, Clone, Default)]
pub struct NegativeSet {
    pub boxes: Vec<BBox>,
    pub kinds: Vec<NegativeKind>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn extend(&mut self, other: NegativeSet) {
        self.boxes.extend(other.boxes);
        self.kinds.extend(other.kinds);
    }
}

/// The four recalibrated boxes around a selected box: grow/shrink both
/// sides by `delta = v / s_dis`, offsetting either to preserve the center
/// or to shift toward the far corner.
pub fn sample_positive_boxes(b: &BBox, s_dis: f64, cfg: &SamplerConfig) -> Vec<BBox> {
    let delta = cfg.v / s_dis;
    let mut out = Vec::with_capacity(4);
    for grow in [true, false] {
        let scale = if grow { 1.0 + delta } else { 1.0 - delta };
        let w = scale * b.w;
        let h = scale * b.h;
        for center_preserving in [true, false] {
            let sign = if center_preserving { -1.0 } else { 1.0 };
            let x = b.x + sign * (w - b.w) / 2.0;
            let y = b.y + sign * (h - b.h) / 2.0;
            out.push(BBox::new(x, y, w.max(0.0), h.max(0.0)));
        }
    }
    out
}

/// Background negatives: random boxes sized between 5% and 50% of the
/// image, kept only when their IoU against every proposal of every bag
/// stays below `t_neg1`. At most `n_bg` boxes; possibly fewer.
pub fn sample_background_negatives(
    scene: &Scene,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> NegativeSet {
    let mut set = NegativeSet::default();
    let (iw, ih) = (scene.width as f64, scene.height as f64);
    let max_attempts = cfg.n_bg.saturating_mul(8);
    for _ in 0..max_attempts {
        if set.len() >= cfg.n_bg {
            break;
        }
        let w = rng.gen_range(0.05..0.5) * iw;
        let h = rng.gen_range(0.05..0.5) * ih;
        let x = rng.gen_range(0.0..(iw - w).max(f64::MIN_POSITIVE));
        let y = rng.gen_range(0.0..(ih - h).max(f64::MIN_POSITIVE));
        let candidate = BBox::new(x, y, w, h);
        let clear = scene
            .bags
            .iter()
            .flat_map(|bag| bag.proposals.iter())
            .all(|p| box_iou(&candidate, &p.bbox) < cfg.t_neg1);
        if clear {
            set.boxes.push(candidate);
            set.kinds.push(NegativeKind::Background);
        }
    }
    set
}

/// Part negatives: random sub-boxes of the selected box whose IoU with it
/// stays below `t_neg2`. At most `n_part` boxes.
pub fn sample_part_negatives(
    selected: &BBox,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> NegativeSet {
    let mut set = NegativeSet::default();
    if selected.w <= 0.0 || selected.h <= 0.0 {
        return set;
    }
    let max_attempts = cfg.n_part.saturating_mul(8);
    for _ in 0..max_attempts {
        if set.len() >= cfg.n_part {
            break;
        }
        let w = rng.gen_range(0.1..0.7) * selected.w;
        let h = rng.gen_range(0.1..0.7) * selected.h;
        let x = selected.x + rng.gen_range(0.0..(selected.w - w));
        let y = selected.y + rng.gen_range(0.0..(selected.h - h));
        let candidate = BBox::new(x, y, w, h);
        if box_iou(&candidate, selected) < cfg.t_neg2 {
            set.boxes.push(candidate);
            set.kinds.push(NegativeKind::Part);
        }
    }
    set
}

/// Positive refinement loss: the focal loss on the ground-truth-class bag
/// score of the refinement stage, weighted per instance by the first
/// stage's bag score (treated as a constant). Gradient is against the
/// concatenated refinement bag-score vectors.
pub fn positive_loss(
    refine_bag_scores: &[Vec<f64>],
    select_bag_scores: &[Vec<f64>],
    class_ids: &[usize],
) -> LossValue {
    assert_eq!(refine_bag_scores.len(), select_bag_scores.len());
    assert_eq!(refine_bag_scores.len(), class_ids.len());
    let n = refine_bag_scores.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Vec::new();
    for ((refined, selected), &class_id) in
        refine_bag_scores.iter().zip(select_bag_scores).zip(class_ids)
    {
        let weight = selected[class_id];
        let fl = focal(refined[class_id], 1, 2.0, 0.25);
        value += weight * fl.value / n;
        let mut g = vec![0.0; refined.len()];
        g[class_id] = weight * fl.grad[0] / n;
        grad.extend(g);
    }
    LossValue { value, grad }
}

/// Mean first-stage ground-truth bag score; the constant weight of the
/// negative loss.
pub fn negative_weight(select_bag_scores: &[Vec<f64>], class_ids: &[usize]) -> f64 {
    if select_bag_scores.is_empty() {
        return 0.0;
    }
    select_bag_scores
        .iter()
        .zip(class_ids)
        .map(|(s, &k)| s[k])
        .sum::<f64>()
        / select_bag_scores.len() as f64
}

/// Negative suppression loss over per-class sigmoid scores of the sampled
/// negatives: `-(beta / |U|) * sum_u sum_k s^2 log(1 - s)`. Empty sets
/// yield zero. Gradient is against the flattened score matrix.
pub fn negative_loss(neg_scores: &Matrix, beta: f64) -> LossValue {
    if neg_scores.rows == 0 {
        return LossValue { value: 0.0, grad: vec![] };
    }
    let count = neg_scores.rows as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; neg_scores.data.len()];
    for (i, &s_raw) in neg_scores.data.iter().enumerate() {
        let s = s_raw.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
        value -= beta * s * s * (1.0 - s).ln() / count;
        grad[i] = -beta * (2.0 * s * (1.0 - s).ln() - s * s / (1.0 - s)) / count;
    }
    LossValue { value, grad }
}

/// Weighted combination `alpha * pos + (1 - alpha) * neg`; gradients
/// concatenate.
pub fn refine_loss(pos: &LossValue, neg: &LossValue, alpha: f64) -> LossValue {
    let mut grad = Vec::with_capacity(pos.grad.len() + neg.grad.len());
    grad.extend(pos.grad.iter().map(|g| alpha * g));
    grad.extend(neg.grad.iter().map(|g| (1.0 - alpha) * g));
    LossValue { value: alpha * pos.value + (1.0 - alpha) * neg.value, grad }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-class sigmoid scores of the classification branch only; the path
/// negatives take.
pub fn classification_sigmoid(head: &MilHead, features: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(features.rows, head.classes);
    for m in 0..features.rows {
        let row = features.row(m);
        for k in 0..head.classes {
            let mut z = head.b_cls[k];
            for (d, &f) in row.iter().enumerate() {
                z += f * head.w_cls[d * head.classes + k];
            }
            out.set(m, k, sigmoid(z));
        }
    }
    out
}

/// One instance's refinement training record. `select_weight` is the
/// first-stage ground-truth bag score, held constant.
#[derive(Debug, Clone)]
pub struct RefineBag {
    pub data: BagData,
    pub select_weight: f64,
}

/// Loss and gradient of the combined refinement objective at the current
/// head.
pub fn refine_loss_and_grad(
    head: &MilHead,
    bags: &[RefineBag],
    negatives: &Matrix,
    alpha: f64,
) -> Result<(f64, HeadGrad)> {
    let n = bags.len().max(1) as f64;
    let mut grad = HeadGrad::zeros(head);
    let mut pos_value = 0.0;

    for bag in bags {
        let fwd = forward_bag(head, &bag.data)?;
        let fl = focal(fwd.bag_score[bag.data.class_id], 1, 2.0, 0.25);
        pos_value += bag.select_weight * fl.value / n;
        let mut d_bag = vec![0.0; head.classes];
        d_bag[bag.data.class_id] = alpha * bag.select_weight * fl.grad[0] / n;
        backward_bag(head, &bag.data, &fwd, &d_bag, &mut grad);
    }

    let beta = bags.iter().map(|b| b.select_weight).sum::<f64>() / n;
    let neg_scores = classification_sigmoid(head, negatives);
    let neg = negative_loss(&neg_scores, beta);
    // Backward through the sigmoid into the classification branch only.
    if negatives.rows > 0 {
        for u in 0..negatives.rows {
            let feat = negatives.row(u);
            for k in 0..head.classes {
                let s = neg_scores.get(u, k);
                let dz = (1.0 - alpha) * neg.grad[u * head.classes + k] * s * (1.0 - s);
                if dz == 0.0 {
                    continue;
                }
                for (d, &f) in feat.iter().enumerate() {
                    grad.w_cls[d * head.classes + k] += dz * f;
                }
                grad.b_cls[k] += dz;
            }
        }
    }

    Ok((alpha * pos_value + (1.0 - alpha) * neg.value, grad))
}

/// Deterministic full-batch training of the refinement head.
pub fn train_refine_head(
    head: &mut MilHead,
    bags: &[RefineBag],
    negatives: &Matrix,
    cfg: &TrainerConfig,
    alpha: f64,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    for iter in 0..=cfg.iters {
        let (loss, grad) = refine_loss_and_grad(head, bags, negatives, alpha)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("refinement loss at iteration {iter}")));
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

/// Box mining: walk the top-`k` candidates by score (descending, ties to
/// the lower index). A strictly larger candidate with IoU above the rising
/// `t_min1` floor merges as `(b_j + iou * b_sel) / (iou + 1)`. If no such
/// candidate ever merged, an enclosing candidate above the `t_min2` floor
/// merges as `(b_j * iou + b_sel) / (iou + 1)`. Otherwise the selected box
/// stands.
pub fn mine_box(selected: &BBox, boxes: &[BBox], scores: &[f64], cfg: &MiningConfig) -> BBox {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order.truncate(cfg.k);

    let mut mined = *selected;
    let mut t1 = cfg.t_min1;
    let mut t2 = cfg.t_min2;
    let mut merged_larger = 0usize;
    let sel_area = selected.area();
    for &j in &order {
        let candidate = &boxes[j];
        if candidate.area() <= sel_area {
            continue;
        }
        let iou = box_iou(candidate, selected);
        if iou > t1 {
            mined = merge(candidate, selected, 1.0, iou, iou);
            t1 = iou;
            merged_larger += 1;
        } else if merged_larger == 0 && candidate.contains_box(selected) && iou > t2 {
            mined = merge(candidate, selected, iou, 1.0, iou);
            t2 = iou;
        }
    }
    mined
}

/// Componentwise `(a * wa + b * wb) / (iou + 1)`.
fn merge(a: &BBox, b: &BBox, wa: f64, wb: f64, iou: f64) -> BBox {
    let denom = iou + 1.0;
    BBox::new(
        (a.x * wa + b.x * wb) / denom,
        (a.y * wa + b.y * wb) / denom,
        (a.w * wa + b.w * wb) / denom,
        (a.h * wa + b.h * wb) / denom,
    )
}

/// Index of the non-empty masked proposal whose box best overlaps `bbox`;
/// ties break to the lower index.
pub fn match_mask<'a>(bbox: &BBox, bag: &'a ProposalBag) -> Result<(usize, &'a BitMask)> {
    let mut best: Option<(usize, f64)> = None;
    for (m, prop) in bag.proposals.iter().enumerate() {
        let mask = match &prop.mask {
            Some(mask) if !prop.empty => mask,
            _ => continue,
        };
        let _ = mask;
        let iou = box_iou(bbox, &prop.bbox);
        let better = match best {
            None => true,
            Some((_, best_iou)) => iou > best_iou,
        };
        if better {
            best = Some((m, iou));
        }
    }
    match best {
        Some((m, _)) => Ok((m, bag.proposals[m].mask.as_ref().unwrap())),
        None => Err(Error::Invariant {
            instance_id: bag.instance_id,
            message: "no masked proposal available for matching".to_string(),
        }),
    }
}
