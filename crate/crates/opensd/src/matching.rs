//! Hungarian assignment, set-prediction costs and losses, and the splitting
//! of annotations into thing and stuff ground-truth sets.
//!
//! Thing ground truths are per-instance masks and boxes of thing categories.
//! Stuff ground truths are per-category merged region masks over *every*
//! category present in the semantic labeling — thing categories included,
//! since a countable category behaves like a region class in semantic
//! segmentation. The two sets supervise the two decoder branches
//! independently; each decoder layer is matched afresh.

use crate::classifiers::{Kind, Vocabulary};
use crate::decoder::LayerOutputs;
use crate::error::{Error, Result};
use crate::harness::Scene;
use crate::tensor::{sigmoid, Tensor};

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GtEntry {
    pub category: u32,
    /// Binary mask at image resolution, stored as 0.0/1.0.
    pub mask: Vec<f64>,
    /// Normalized (cx, cy, w, h); `None` for stuff entries.
    pub bbox: Option<[f64; 4]>,
    pub is_crowd: bool,
}

#[derive(Debug, Clone)]
pub struct GroundTruthSet {
    pub kind: Kind,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<GtEntry>,
}

impl GtEntry {
    pub fn area(&self) -> f64 {
        self.mask.iter().sum()
    }
}

/// Split a scene's annotation into thing ground truths (per-instance) and
/// stuff ground truths (per-category merged regions over all categories
/// present). Errors if a category id is missing from the vocabulary.
pub fn split_ground_truth(scene: &Scene, vocab: &Vocabulary) -> Result<(GroundTruthSet, GroundTruthSet)> {
    let hw = scene.height * scene.width;
    let mut things = Vec::new();
    for inst in &scene.instances {
        if !vocab.get(inst.category)?.isthing {
            return Err(Error::Schema(format!(
                "instance of non-thing category {}",
                inst.category
            )));
        }
        things.push(GtEntry {
            category: inst.category,
            mask: inst.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            bbox: Some(inst.bbox),
            is_crowd: false,
        });
    }

    let mut cats_present: Vec<u32> = scene.semantic.to_vec();
    cats_present.sort_unstable();
    cats_present.dedup();
    let mut stuff = Vec::with_capacity(cats_present.len());
    for cat in cats_present {
        vocab.get(cat)?; // reject unknown categories
        let mut mask = vec![0.0; hw];
        for (p, &c) in scene.semantic.iter().enumerate() {
            if c == cat {
                mask[p] = 1.0;
            }
        }
        stuff.push(GtEntry {
            category: cat,
            mask,
            bbox: None,
            is_crowd: false,
        });
    }

    Ok((
        GroundTruthSet {
            kind: Kind::Thing,
            height: scene.height,
            width: scene.width,
            entries: things,
        },
        GroundTruthSet {
            kind: Kind::Stuff,
            height: scene.height,
            width: scene.width,
            entries: stuff,
        },
    ))
}

/// Panoptic-style ground truth for the shared-decoder baseline: thing
/// instances plus stuff-only region masks.
pub fn panoptic_ground_truth(scene: &Scene, vocab: &Vocabulary) -> Result<GroundTruthSet> {
    let (things, stuff) = split_ground_truth(scene, vocab)?;
    let mut entries = things.entries;
    for e in stuff.entries {
        if !vocab.get(e.category)?.isthing {
            entries.push(e);
        }
    }
    Ok(GroundTruthSet {
        kind: Kind::Stuff,
        height: scene.height,
        width: scene.width,
        entries,
    })
}

// ---------------------------------------------------------------------------
// Hungarian assignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// (query index, ground-truth index), sorted by query index. Injective in
    /// both coordinates; `pairs.len() == min(queries, ground truths)`.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl Assignment {
    pub fn gt_of_query(&self, q: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(qi, _)| qi == q).map(|&(_, g)| g)
    }
}

#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        CostMatrix { rows, cols, data }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| self.at(i, j)).sum()
    }
}

/// Minimum-cost one-to-one assignment (Jonker-Volgenant shortest augmenting
/// paths, O(n^3)). Ties resolve deterministically toward the lowest
/// (query, gt) indices via the ascending scan order. Errors on non-finite
/// costs.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian" });
    }
    let (q, g) = (cost.rows, cost.cols);
    if q == 0 || g == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched_queries: (0..q).collect(),
        });
    }
    // Solve with rows <= cols; transpose if needed.
    let transposed = q > g;
    let (r, c) = if transposed { (g, q) } else { (q, g) };
    let at = |i: usize, j: usize| {
        if transposed {
            cost.at(j, i)
        } else {
            cost.at(i, j)
        }
    };

    // Potentials are 1-indexed; column 0 is the virtual start.
    let mut u = vec![0.0f64; r + 1];
    let mut v = vec![0.0f64; c + 1];
    let mut matched_row = vec![0usize; c + 1]; // row matched to each column
    let mut way = vec![0usize; c + 1];
    for i in 1..=r {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=c {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=c {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(r);
    for j in 1..=c {
        if matched_row[j] != 0 {
            let (row, col) = (matched_row[j] - 1, j - 1);
            if transposed {
                pairs.push((col, row));
            } else {
                pairs.push((row, col));
            }
        }
    }
    pairs.sort_unstable();
    let matched: std::collections::BTreeSet<usize> = pairs.iter().map(|&(q, _)| q).collect();
    Ok(Assignment {
        unmatched_queries: (0..q).filter(|i| !matched.contains(i)).collect(),
        pairs,
    })
}

// ---------------------------------------------------------------------------
// Box geometry (plain f64; shared with metrics)
// ---------------------------------------------------------------------------

pub fn cxcywh_to_xyxy(b: &[f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

pub fn box_iou_cxcywh(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    box_iou_xyxy(&cxcywh_to_xyxy(a), &cxcywh_to_xyxy(b))
}

pub fn box_iou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn box_giou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let hull = cw * ch;
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

fn bce_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Match cost
// ---------------------------------------------------------------------------

/// Cost and loss weights for Hungarian matching and set supervision.
#[derive(Debug, Clone, Copy)]
pub struct MatchWeights {
    pub cls: f64,
    pub mask_bce: f64,
    pub mask_dice: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    /// Relative weight of negative (query, category) terms in the
    /// classification loss; the sigmoid counterpart of the no-object
    /// downweighting in the reference training recipe.
    pub negative_weight: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            cls: 2.0,
            mask_bce: 5.0,
            mask_dice: 5.0,
            box_l1: 5.0,
            box_giou: 2.0,
            negative_weight: 0.1,
        }
    }
}

/// Detached per-query predictions for cost computation.
pub struct PredView<'a> {
    pub n_queries: usize,
    /// `q x hw` mask logits at ground-truth resolution.
    pub mask_logits: &'a [f64],
    pub hw: usize,
    /// `q x 4` normalized (cx, cy, w, h).
    pub boxes: &'a [f64],
    /// `q x n_cats` classification probabilities.
    pub class_probs: &'a [f64],
    /// Category id per probability column.
    pub class_cats: &'a [u32],
}

/// `cost(i, j) = w_cls * (-p_i(c_j)) + w_bce * BCE + w_dice * Dice
///             + [w_l1 * L1 + w_giou * (1 - GIoU)]` (box terms thing-only).
pub fn match_cost(pred: &PredView, gt: &GroundTruthSet, w: &MatchWeights) -> Result<CostMatrix> {
    let q = pred.n_queries;
    let g = gt.entries.len();
    let hw = pred.hw;
    let mut data = vec![0.0; q * g];
    // Per-entry constants reused across queries.
    let cat_cols: Vec<usize> = gt
        .entries
        .iter()
        .map(|e| {
            pred.class_cats
                .iter()
                .position(|&c| c == e.category)
                .ok_or_else(|| Error::UnknownCategory(format!("category {} not scored", e.category)))
        })
        .collect::<Result<_>>()?;
    for i in 0..q {
        let logits = &pred.mask_logits[i * hw..(i + 1) * hw];
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let psum: f64 = probs.iter().sum();
        let pbox: [f64; 4] = pred.boxes[i * 4..(i + 1) * 4].try_into().unwrap();
        let pxy = cxcywh_to_xyxy(&pbox);
        for (j, entry) in gt.entries.iter().enumerate() {
            if entry.mask.len() != hw {
                return Err(Error::Shape(format!(
                    "ground-truth mask {} vs prediction {hw}",
                    entry.mask.len()
                )));
            }
            let p_cls = pred.class_probs[i * pred.class_cats.len() + cat_cols[j]];
            let mut cost = w.cls * (-p_cls);

            let mut bce = 0.0;
            let mut inter = 0.0;
            for p in 0..hw {
                bce += bce_logit(logits[p], entry.mask[p]);
                inter += probs[p] * entry.mask[p];
            }
            let gsum = entry.area();
            let dice = 1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0);
            cost += w.mask_bce * bce / hw as f64 + w.mask_dice * dice;

            if let Some(gbox) = &entry.bbox {
                let l1: f64 = pbox.iter().zip(gbox).map(|(a, b)| (a - b).abs()).sum();
                let giou = box_giou_xyxy(&pxy, &cxcywh_to_xyxy(gbox));
                cost += w.box_l1 * l1 + w.box_giou * (1.0 - giou);
            }
            data[i * g + j] = cost;
        }
    }
    Ok(CostMatrix::new(q, g, data))
}

// ---------------------------------------------------------------------------
// Set loss
// ---------------------------------------------------------------------------

/// Differentiable set-prediction loss for one decoder layer under a fixed
/// assignment.
///
/// * classification: binary cross-entropy over every (query, category)
///   pair — matched queries are positive for their ground-truth category,
///   everything else negative. The logits are the prompt-classifier scores.
/// * masks: BCE + Dice on matched pairs at ground-truth resolution.
/// * boxes: L1 + GIoU on matched thing pairs.
pub fn set_loss(
    layer: &LayerOutputs,
    mask_logits_full: &Tensor,
    gt: &GroundTruthSet,
    assignment: &Assignment,
    class_cats: &[u32],
    w: &MatchWeights,
) -> Result<Tensor> {
    let class_logits = layer
        .class_logits
        .as_ref()
        .ok_or_else(|| Error::Config("set_loss requires class logits".into()))?;
    let q = class_logits.shape()[0];
    let n_cats = class_logits.shape()[1];
    if n_cats != class_cats.len() {
        return Err(Error::Shape(format!(
            "{} class columns vs {} categories",
            n_cats,
            class_cats.len()
        )));
    }
    let hw = mask_logits_full.shape()[1];

    // Classification targets.
    let mut targets = vec![0.0; q * n_cats];
    for &(qi, gi) in &assignment.pairs {
        let cat = gt.entries[gi].category;
        let col = class_cats
            .iter()
            .position(|&c| c == cat)
            .ok_or_else(|| Error::UnknownCategory(format!("category {cat} not scored")))?;
        targets[qi * n_cats + col] = 1.0;
    }
    // Summed over categories, averaged over queries: the per-query signal
    // must not shrink as the scored vocabulary grows. Negative terms are
    // downweighted so alternating assignments cannot pin a contested query
    // at an uncommitted score.
    let elem_weights: Vec<f64> = targets
        .iter()
        .map(|&t| if t > 0.0 { 1.0 } else { w.negative_weight })
        .collect();
    let weight_t = Tensor::from_vec(elem_weights, &[q, n_cats])?;
    let mut loss = class_logits
        .bce_with_logits(&targets)?
        .mul(&weight_t)?
        .sum()?
        .mul_scalar(w.cls / q as f64)?;

    if !assignment.pairs.is_empty() {
        let m = assignment.pairs.len() as f64;
        let qidx: Vec<usize> = assignment.pairs.iter().map(|&(qi, _)| qi).collect();
        let rows = mask_logits_full.index_rows(&qidx)?;
        let mut gt_flat = Vec::with_capacity(assignment.pairs.len() * hw);
        for &(_, gi) in &assignment.pairs {
            gt_flat.extend_from_slice(&gt.entries[gi].mask);
        }
        let bce = rows.bce_with_logits(&gt_flat)?.mean()?.mul_scalar(w.mask_bce)?;
        loss = loss.add(&bce)?;

        // Dice per matched pair.
        let mut dice_sum: Option<Tensor> = None;
        for (k, &(_, gi)) in assignment.pairs.iter().enumerate() {
            let probs = rows.index_rows(&[k])?.sigmoid()?;
            let gmask = Tensor::from_vec(gt.entries[gi].mask.clone(), &[1, hw])?;
            let inter = probs.mul(&gmask)?.sum()?;
            let denom = probs.sum()?.add_scalar(gt.entries[gi].area() + 1.0)?;
            let dice = inter
                .mul_scalar(2.0)?
                .add_scalar(1.0)?
                .div(&denom)?
                .neg()?
                .add_scalar(1.0)?;
            dice_sum = Some(match dice_sum {
                Some(acc) => acc.add(&dice)?,
                None => dice,
            });
        }
        let dice = dice_sum.unwrap().mul_scalar(w.mask_dice / m)?;
        loss = loss.add(&dice)?;

        // Box terms for matched thing pairs.
        let thing_pairs: Vec<(usize, usize)> = assignment
            .pairs
            .iter()
            .copied()
            .filter(|&(_, gi)| gt.entries[gi].bbox.is_some())
            .collect();
        if !thing_pairs.is_empty() {
            let mb = thing_pairs.len() as f64;
            let bq: Vec<usize> = thing_pairs.iter().map(|&(qi, _)| qi).collect();
            let pred_boxes = layer.boxes.index_rows(&bq)?;
            let gt_boxes: Vec<f64> = thing_pairs
                .iter()
                .flat_map(|&(_, gi)| gt.entries[gi].bbox.unwrap())
                .collect();
            let gt_t = Tensor::from_vec(gt_boxes, &[thing_pairs.len(), 4])?;
            let l1 = pred_boxes
                .sub(&gt_t)?
                .abs()?
                .sum()?
                .mul_scalar(w.box_l1 / mb)?;
            loss = loss.add(&l1)?;

            let mut giou_sum: Option<Tensor> = None;
            for (k, &(_, gi)) in thing_pairs.iter().enumerate() {
                let pb = pred_boxes.index_rows(&[k])?;
                let g = giou_loss(&pb, &gt.entries[gi].bbox.unwrap())?;
                giou_sum = Some(match giou_sum {
                    Some(acc) => acc.add(&g)?,
                    None => g,
                });
            }
            let giou = giou_sum.unwrap().mul_scalar(w.box_giou / mb)?;
            loss = loss.add(&giou)?;
        }
    }
    Ok(loss)
}

/// `1 - GIoU` between one predicted box row `[1,4]` (cx, cy, w, h) and a
/// constant ground-truth box, as a scalar graph node.
fn giou_loss(pred: &Tensor, gtbox: &[f64; 4]) -> Result<Tensor> {
    let coord = |i: usize| pred.slice_cols(i, 1);
    let (cx, cy, w, h) = (coord(0)?, coord(1)?, coord(2)?, coord(3)?);
    let half_w = w.mul_scalar(0.5)?;
    let half_h = h.mul_scalar(0.5)?;
    let px0 = cx.sub(&half_w)?;
    let px1 = cx.add(&half_w)?;
    let py0 = cy.sub(&half_h)?;
    let py1 = cy.add(&half_h)?;
    let g = cxcywh_to_xyxy(gtbox);
    let c = |v: f64| Tensor::from_vec(vec![v], &[1, 1]);
    let zero = c(0.0)?;

    let iw = px1.minimum(&c(g[2])?)?.sub(&px0.maximum(&c(g[0])?)?)?.maximum(&zero)?;
    let ih = py1.minimum(&c(g[3])?)?.sub(&py0.maximum(&c(g[1])?)?)?.maximum(&zero)?;
    let inter = iw.mul(&ih)?;
    let area_p = px1.sub(&px0)?.mul(&py1.sub(&py0)?)?;
    let area_g = (g[2] - g[0]) * (g[3] - g[1]);
    let union = area_p.add_scalar(area_g)?.sub(&inter)?;
    let iou = inter.div(&union)?;

    let cw = px1.maximum(&c(g[2])?)?.sub(&px0.minimum(&c(g[0])?)?)?;
    let ch = py1.maximum(&c(g[3])?)?.sub(&py0.minimum(&c(g[1])?)?)?;
    let hull = cw.mul(&ch)?;
    let giou = iou.sub(&hull.sub(&union)?.div(&hull)?)?;
    giou.neg()?.add_scalar(1.0)?.reshape(&[1])
}

/// Cost, assignment and loss for one decoder layer.
pub fn match_and_loss(
    layer: &LayerOutputs,
    mask_logits_full: &Tensor,
    gt: &GroundTruthSet,
    class_cats: &[u32],
    w: &MatchWeights,
) -> Result<(Assignment, Tensor)> {
    let class_logits = layer
        .class_logits
        .as_ref()
        .ok_or_else(|| Error::Config("matching requires class logits".into()))?;
    let probs: Vec<f64> = class_logits.value().iter().map(|&z| sigmoid(z)).collect();
    let view = PredView {
        n_queries: layer.query_emb.shape()[0],
        mask_logits: mask_logits_full.value(),
        hw: mask_logits_full.shape()[1],
        boxes: layer.boxes.value(),
        class_probs: &probs,
        class_cats,
    };
    let assignment = if gt.entries.is_empty() {
        Assignment {
            pairs: Vec::new(),
            unmatched_queries: (0..view.n_queries).collect(),
        }
    } else {
        hungarian(&match_cost(&view, gt, w)?)?
    };
    let loss = set_loss(layer, mask_logits_full, gt, &assignment, class_cats, w)?;
    Ok((assignment, loss))
}
