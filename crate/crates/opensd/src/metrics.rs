//! Evaluation metrics: panoptic quality, mean IoU, and average precision.
//!
//! Every metric is a per-image statistics pass plus an associative,
//! order-independent reducer, so evaluation can fan out across images and
//! fold the partial stats back in a fixed order.
//!
//! AP follows the COCO convention: greedy score-ordered matching per category
//! at IoU thresholds 0.50:0.05:0.95, 101-point interpolated precision,
//! averaged over thresholds and over categories that have ground truth.
//! Categories absent from both prediction and ground truth never enter an
//! average.

use crate::classifiers::Vocabulary;
use crate::error::{Error, Result};
use crate::harness::SegmentInfo;
use serde::Serialize;
use std::collections::BTreeMap;

pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

// ---------------------------------------------------------------------------
// Panoptic quality
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct PqCat {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Default, Clone)]
pub struct PqStats {
    pub per_cat: BTreeMap<u32, PqCat>,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        for (cat, s) in &other.per_cat {
            let e = self.per_cat.entry(*cat).or_default();
            e.iou_sum += s.iou_sum;
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
        }
    }

    /// Per-category PQ.
    pub fn category_pq(&self, cat: u32) -> Option<f64> {
        self.per_cat.get(&cat).map(|s| {
            let denom = s.tp as f64 + 0.5 * s.fp as f64 + 0.5 * s.fn_ as f64;
            if denom == 0.0 {
                0.0
            } else {
                s.iou_sum / denom
            }
        })
    }

    /// Mean PQ over categories matching `filter`.
    pub fn mean_pq(&self, filter: impl Fn(u32) -> bool) -> f64 {
        let vals: Vec<f64> = self
            .per_cat
            .keys()
            .filter(|&&c| filter(c))
            .filter_map(|&c| self.category_pq(c))
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// Segment-matching PQ statistics for one image. Matches require equal
/// category and IoU > 0.5 (which makes every match unique; asserted). Segment
/// id 0 is void.
pub fn panoptic_quality(
    pred_map: &[u32],
    pred_table: &[SegmentInfo],
    gt_map: &[u32],
    gt_table: &[SegmentInfo],
) -> Result<PqStats> {
    if pred_map.len() != gt_map.len() {
        return Err(Error::Shape(format!(
            "panoptic maps {} vs {}",
            pred_map.len(),
            gt_map.len()
        )));
    }
    let mut pred_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&p, &g) in pred_map.iter().zip(gt_map) {
        if p != 0 {
            *pred_area.entry(p).or_default() += 1;
        }
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
        }
        if p != 0 && g != 0 {
            *inter.entry((p, g)).or_default() += 1;
        }
    }
    let pred_cat: BTreeMap<u32, u32> = pred_table.iter().map(|s| (s.id, s.category)).collect();
    let gt_cat: BTreeMap<u32, u32> = gt_table.iter().map(|s| (s.id, s.category)).collect();
    for &id in pred_area.keys() {
        if !pred_cat.contains_key(&id) {
            return Err(Error::Schema(format!(
                "prediction segment {id} missing from table"
            )));
        }
    }
    for &id in gt_area.keys() {
        if !gt_cat.contains_key(&id) {
            return Err(Error::Schema(format!(
                "ground-truth segment {id} missing from table"
            )));
        }
    }

    let mut stats = PqStats::default();
    let mut matched_pred: std::collections::BTreeSet<u32> = Default::default();
    let mut matched_gt: std::collections::BTreeSet<u32> = Default::default();
    for (&(pid, gid), &ov) in &inter {
        let (pc, gc) = (pred_cat[&pid], gt_cat[&gid]);
        if pc != gc {
            continue;
        }
        let union = pred_area[&pid] + gt_area[&gid] - ov;
        let iou = ov as f64 / union as f64;
        if iou > 0.5 {
            // IoU > 0.5 makes matches unique per segment.
            assert!(
                matched_pred.insert(pid) && matched_gt.insert(gid),
                "duplicate panoptic match"
            );
            let e = stats.per_cat.entry(pc).or_default();
            e.tp += 1;
            e.iou_sum += iou;
        }
    }
    for seg in pred_table {
        if pred_area.contains_key(&seg.id) && !matched_pred.contains(&seg.id) {
            stats.per_cat.entry(seg.category).or_default().fp += 1;
        }
    }
    for seg in gt_table {
        if gt_area.contains_key(&seg.id) && !matched_gt.contains(&seg.id) {
            stats.per_cat.entry(seg.category).or_default().fn_ += 1;
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Mean IoU
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone)]
pub struct IouStats {
    /// category -> (intersection, union) pixel counts.
    pub per_cat: BTreeMap<u32, (u64, u64)>,
}

impl IouStats {
    pub fn merge(&mut self, other: &IouStats) {
        for (cat, &(i, u)) in &other.per_cat {
            let e = self.per_cat.entry(*cat).or_default();
            e.0 += i;
            e.1 += u;
        }
    }

    pub fn category_iou(&self, cat: u32) -> Option<f64> {
        self.per_cat
            .get(&cat)
            .map(|&(i, u)| if u == 0 { 0.0 } else { i as f64 / u as f64 })
    }

    pub fn mean_iou(&self) -> f64 {
        if self.per_cat.is_empty() {
            return 0.0;
        }
        let s: f64 = self.per_cat.keys().filter_map(|&c| self.category_iou(c)).sum();
        s / self.per_cat.len() as f64
    }
}

/// Per-category intersection/union between two semantic maps. Categories are
/// those appearing in either map.
pub fn semantic_iou(pred: &[u32], gt: &[u32]) -> Result<IouStats> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "semantic maps {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut stats = IouStats::default();
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            let e = stats.per_cat.entry(p).or_default();
            e.0 += 1;
            e.1 += 1;
        } else {
            stats.per_cat.entry(p).or_default().1 += 1;
            stats.per_cat.entry(g).or_default().1 += 1;
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct DetRecord {
    score: f64,
    /// One flag per IoU threshold: did this detection match a ground truth.
    matched: Vec<bool>,
}

#[derive(Debug, Default, Clone)]
struct CatAp {
    n_gt: usize,
    dets: Vec<DetRecord>,
}

/// Accumulates scored detections against ground truths, one category at a
/// time, across images.
#[derive(Debug, Clone)]
pub struct ApAccumulator {
    thresholds: Vec<f64>,
    per_cat: BTreeMap<u32, CatAp>,
}

impl Default for ApAccumulator {
    fn default() -> Self {
        Self::new(&COCO_IOU_THRESHOLDS)
    }
}

impl ApAccumulator {
    pub fn new(thresholds: &[f64]) -> Self {
        ApAccumulator {
            thresholds: thresholds.to_vec(),
            per_cat: BTreeMap::new(),
        }
    }

    /// Record one image's detections of one category. `iou[d][g]` gives the
    /// overlap between detection `d` and ground truth `g`; detections are
    /// processed in descending score order (ties by insertion order) and each
    /// greedily takes the best still-unmatched ground truth at each
    /// threshold.
    pub fn add_image(&mut self, cat: u32, scores: &[f64], iou: &[Vec<f64>], n_gt: usize) {
        assert_eq!(scores.len(), iou.len(), "scores vs iou rows");
        let entry = self.per_cat.entry(cat).or_default();
        entry.n_gt += n_gt;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut records: Vec<DetRecord> = scores
            .iter()
            .map(|&s| DetRecord {
                score: s,
                matched: vec![false; self.thresholds.len()],
            })
            .collect();
        for (t, &thr) in self.thresholds.iter().enumerate() {
            let mut taken = vec![false; n_gt];
            for &d in &order {
                let mut best = usize::MAX;
                let mut best_iou = thr;
                for (g, &tk) in taken.iter().enumerate() {
                    if !tk && iou[d][g] >= best_iou {
                        best_iou = iou[d][g];
                        best = g;
                    }
                }
                if best != usize::MAX {
                    taken[best] = true;
                    records[d].matched[t] = true;
                }
            }
        }
        entry.dets.extend(records);
    }

    pub fn merge(&mut self, other: &ApAccumulator) {
        assert_eq!(self.thresholds, other.thresholds);
        for (cat, ap) in &other.per_cat {
            let e = self.per_cat.entry(*cat).or_default();
            e.n_gt += ap.n_gt;
            e.dets.extend(ap.dets.iter().cloned());
        }
    }

    /// 101-point interpolated AP for one category at one threshold index.
    fn category_ap(&self, cat: u32, t: usize) -> Option<f64> {
        let entry = self.per_cat.get(&cat)?;
        if entry.n_gt == 0 {
            return None;
        }
        let mut order: Vec<usize> = (0..entry.dets.len()).collect();
        order.sort_by(|&a, &b| entry.dets[b].score.partial_cmp(&entry.dets[a].score).unwrap());
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut pr: Vec<(f64, f64)> = Vec::with_capacity(order.len()); // (recall, precision)
        for &d in &order {
            if entry.dets[d].matched[t] {
                tp += 1;
            } else {
                fp += 1;
            }
            pr.push((tp as f64 / entry.n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
        // Right-to-left precision envelope, then sample 101 recall points.
        let mut envelope = pr.clone();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
        }
        let mut ap = 0.0;
        for k in 0..=100 {
            let r = k as f64 / 100.0;
            let p = envelope
                .iter()
                .find(|&&(rec, _)| rec >= r - 1e-12)
                .map(|&(_, prec)| prec)
                .unwrap_or(0.0);
            ap += p;
        }
        Some(ap / 101.0)
    }

    /// (mAP averaged over thresholds, AP at the first threshold,
    /// per-category mAP).
    pub fn finalize(&self) -> (f64, f64, BTreeMap<u32, f64>) {
        let mut per_cat = BTreeMap::new();
        let mut sum_all = 0.0;
        let mut sum_50 = 0.0;
        let mut n = 0usize;
        for &cat in self.per_cat.keys() {
            if self.per_cat[&cat].n_gt == 0 {
                continue;
            }
            let aps: Vec<f64> = (0..self.thresholds.len())
                .filter_map(|t| self.category_ap(cat, t))
                .collect();
            if aps.is_empty() {
                continue;
            }
            let mean = aps.iter().sum::<f64>() / aps.len() as f64;
            per_cat.insert(cat, mean);
            sum_all += mean;
            sum_50 += aps[0];
            n += 1;
        }
        if n == 0 {
            (0.0, 0.0, per_cat)
        } else {
            (sum_all / n as f64, sum_50 / n as f64, per_cat)
        }
    }
}

/// IoU between boolean masks.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Default)]
pub struct CategoryReport {
    pub name: String,
    pub pq: Option<f64>,
    pub iou: Option<f64>,
    pub ap_box: Option<f64>,
    pub ap_mask: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct EvalReport {
    pub pq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
    pub miou: f64,
    pub map_box: f64,
    pub map_box_50: f64,
    pub map_mask: f64,
    pub map_mask_50: f64,
    pub per_category: BTreeMap<u32, CategoryReport>,
}

impl EvalReport {
    pub fn assemble(
        vocab: &Vocabulary,
        pq: &PqStats,
        iou: &IouStats,
        ap_box: &ApAccumulator,
        ap_mask: &ApAccumulator,
    ) -> EvalReport {
        let isthing = |c: u32| vocab.get(c).map(|k| k.isthing).unwrap_or(false);
        let (map_box, map_box_50, box_per_cat) = ap_box.finalize();
        let (map_mask, map_mask_50, mask_per_cat) = ap_mask.finalize();
        let mut per_category: BTreeMap<u32, CategoryReport> = BTreeMap::new();
        for cat in &vocab.categories {
            let entry = CategoryReport {
                name: cat.name.clone(),
                pq: pq.category_pq(cat.id),
                iou: iou.category_iou(cat.id),
                ap_box: box_per_cat.get(&cat.id).copied(),
                ap_mask: mask_per_cat.get(&cat.id).copied(),
            };
            if entry.pq.is_some()
                || entry.iou.is_some()
                || entry.ap_box.is_some()
                || entry.ap_mask.is_some()
            {
                per_category.insert(cat.id, entry);
            }
        }
        EvalReport {
            pq: pq.mean_pq(|_| true),
            pq_things: pq.mean_pq(isthing),
            pq_stuff: pq.mean_pq(|c| !isthing(c)),
            miou: iou.mean_iou(),
            map_box,
            map_box_50,
            map_mask,
            map_mask_50,
            per_category,
        }
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "", "PQ", "PQ.th", "PQ.st", "mIoU", "boxAP", "boxAP50", "maskAP", "maskAP50"
        ));
        out.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "all",
            self.pq,
            self.pq_things,
            self.pq_stuff,
            self.miou,
            self.map_box,
            self.map_box_50,
            self.map_mask,
            self.map_mask_50
        ));
        out.push('\n');
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8}\n",
            "category", "PQ", "IoU", "boxAP", "maskAP"
        ));
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:>8.4}"),
            None => format!("{:>8}", "-"),
        };
        for rep in self.per_category.values() {
            out.push_str(&format!(
                "{:<12} {} {} {} {}\n",
                rep.name,
                fmt(rep.pq),
                fmt(rep.iou),
                fmt(rep.ap_box),
                fmt(rep.ap_mask)
            ));
        }
        out
    }
}
