//! Score ensembling and four-task assembly.
//!
//! Classification scores from the two classifiers are fused per category:
//! seen categories use `p_in^(1-alpha) * p_out^alpha`, unseen categories use
//! `p_in^(1-beta) * p_out^beta`. With `alpha = beta = 0` the fused score is
//! exactly the in-vocabulary score.
//!
//! Assembly is pure per-image math over detached predictions:
//! * detection / instance lists come from the thing branch, all
//!   (query, thing-category) pairs above the score threshold, sorted by
//!   descending score with ties broken by query index;
//! * the semantic map accumulates score-weighted mask probabilities per
//!   category over the stuff branch and takes a per-pixel argmax;
//! * the panoptic map claims pixels greedily in score order (thing segments
//!   from the thing branch, stuff segments from the stuff branch) and drops
//!   any segment that keeps less than the overlap-threshold fraction of its
//!   mask; duplicates die there rather than through NMS.

use crate::classifiers::Vocabulary;
use crate::error::{Error, Result};
use crate::harness::SegmentInfo;
use serde::Serialize;

#[derive(Debug, Clone, Copy)]
pub struct EnsembleParams {
    pub alpha: f64,
    pub beta: f64,
}

impl EnsembleParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(EnsembleParams { alpha, beta })
    }
}

/// Fuse in/out-of-vocabulary scores for one category. Probabilities are
/// clamped at 1e-12 before exponentiation.
pub fn ensemble(p_in: f64, p_out: f64, seen: bool, params: &EnsembleParams) -> f64 {
    let e = if seen { params.alpha } else { params.beta };
    let a = p_in.max(1e-12);
    let b = p_out.max(1e-12);
    a.powf(1.0 - e) * b.powf(e)
}

#[derive(Debug, Clone, Copy)]
pub struct AssemblyParams {
    /// Minimum fused score for a candidate to survive.
    pub score_threshold: f64,
    /// Minimum fraction of a panoptic candidate's mask that must survive
    /// pixel claiming.
    pub overlap_threshold: f64,
}

impl Default for AssemblyParams {
    fn default() -> Self {
        AssemblyParams {
            score_threshold: 0.5,
            overlap_threshold: 0.8,
        }
    }
}

/// Detached per-branch predictions at image resolution.
#[derive(Debug, Clone)]
pub struct BranchPredictions {
    pub n_queries: usize,
    pub height: usize,
    pub width: usize,
    /// `q x h*w` sigmoid mask probabilities.
    pub mask_probs: Vec<f64>,
    /// `q x 4` normalized (cx, cy, w, h).
    pub boxes: Vec<f64>,
    /// `q x n_cats` fused classification scores.
    pub scores: Vec<f64>,
    /// Category id per score column.
    pub cats: Vec<u32>,
}

impl BranchPredictions {
    fn score(&self, q: usize, col: usize) -> f64 {
        self.scores[q * self.cats.len() + col]
    }

    fn mask(&self, q: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.mask_probs[q * hw..(q + 1) * hw]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Detection {
    pub category: u32,
    pub score: f64,
    /// Normalized (cx, cy, w, h).
    pub bbox: [f64; 4],
    pub query: usize,
}

#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub category: u32,
    pub score: f64,
    pub mask: Vec<bool>,
    pub query: usize,
}

#[derive(Debug, Clone)]
pub struct TaskOutputs {
    pub height: usize,
    pub width: usize,
    /// Per-pixel segment id; 0 is void.
    pub panoptic: Vec<u32>,
    pub panoptic_table: Vec<SegmentInfo>,
    /// Per-pixel category id.
    pub semantic: Vec<u32>,
    pub instances: Vec<InstancePrediction>,
    pub detections: Vec<Detection>,
}

/// A scored segment candidate prior to assembly.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub query: usize,
    pub category: u32,
    pub score: f64,
    pub from_stuff_branch: bool,
}

/// Score-threshold filtering. Duplicate removal happens via panoptic pixel
/// claiming, not NMS.
pub fn filter_duplicates(candidates: Vec<Candidate>, score_threshold: f64) -> Vec<Candidate> {
    candidates
        .into_iter()
        .filter(|c| c.score >= score_threshold)
        .collect()
}

/// Assemble the four task outputs from both branches' fused predictions.
pub fn assemble(
    thing: &BranchPredictions,
    stuff: &BranchPredictions,
    vocab: &Vocabulary,
    params: &AssemblyParams,
) -> Result<TaskOutputs> {
    if thing.height != stuff.height || thing.width != stuff.width {
        return Err(Error::Shape(format!(
            "branch resolutions {}x{} vs {}x{}",
            thing.height, thing.width, stuff.height, stuff.width
        )));
    }
    let (h, w) = (thing.height, thing.width);
    let hw = h * w;

    // Detections and instances: (query, thing-category) pairs above the
    // threshold, sorted by descending score, ties by query index.
    let mut scored_pairs: Vec<(usize, usize)> = Vec::new(); // (query, col)
    for q in 0..thing.n_queries {
        for (col, &cat) in thing.cats.iter().enumerate() {
            if !vocab.get(cat)?.isthing {
                continue;
            }
            if thing.score(q, col) >= params.score_threshold {
                scored_pairs.push((q, col));
            }
        }
    }
    scored_pairs.sort_by(|&(qa, ca), &(qb, cb)| {
        thing
            .score(qb, cb)
            .partial_cmp(&thing.score(qa, ca))
            .unwrap()
            .then(qa.cmp(&qb))
            .then(ca.cmp(&cb))
    });
    let mut detections = Vec::with_capacity(scored_pairs.len());
    let mut instances = Vec::with_capacity(scored_pairs.len());
    for &(q, col) in &scored_pairs {
        let score = thing.score(q, col);
        let category = thing.cats[col];
        let bbox: [f64; 4] = thing.boxes[q * 4..(q + 1) * 4].try_into().unwrap();
        detections.push(Detection { category, score, bbox, query: q });
        instances.push(InstancePrediction {
            category,
            score,
            mask: thing.mask(q).iter().map(|&p| p > 0.5).collect(),
            query: q,
        });
    }

    // Semantic map: score-weighted mask accumulation over the stuff branch,
    // per-pixel argmax over all categories (lowest id wins ties).
    let mut semantic = vec![stuff.cats.first().copied().unwrap_or(0); hw];
    let mut best = vec![f64::NEG_INFINITY; hw];
    for (col, &cat) in stuff.cats.iter().enumerate() {
        let mut acc = vec![0.0; hw];
        for q in 0..stuff.n_queries {
            let s = stuff.score(q, col);
            if s == 0.0 {
                continue;
            }
            let mask = stuff.mask(q);
            for p in 0..hw {
                acc[p] += s * mask[p];
            }
        }
        for p in 0..hw {
            if acc[p] > best[p] {
                best[p] = acc[p];
                semantic[p] = cat;
            }
        }
    }

    // Panoptic: greedy pixel claiming over thresholded candidates.
    let mut candidates: Vec<Candidate> = Vec::new();
    for q in 0..thing.n_queries {
        let mut best: Option<(f64, u32)> = None;
        for (col, &cat) in thing.cats.iter().enumerate() {
            if !vocab.get(cat)?.isthing {
                continue;
            }
            let s = thing.score(q, col);
            if best.map(|(bs, _)| s > bs).unwrap_or(true) {
                best = Some((s, cat));
            }
        }
        if let Some((score, category)) = best {
            candidates.push(Candidate { query: q, category, score, from_stuff_branch: false });
        }
    }
    for q in 0..stuff.n_queries {
        let mut best: Option<(f64, u32)> = None;
        for (col, &cat) in stuff.cats.iter().enumerate() {
            if vocab.get(cat)?.isthing {
                continue; // panoptic stuff segments carry stuff categories
            }
            let s = stuff.score(q, col);
            if best.map(|(bs, _)| s > bs).unwrap_or(true) {
                best = Some((s, cat));
            }
        }
        if let Some((score, category)) = best {
            candidates.push(Candidate { query: q, category, score, from_stuff_branch: true });
        }
    }
    let mut candidates = filter_duplicates(candidates, params.score_threshold);
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.from_stuff_branch.cmp(&b.from_stuff_branch))
            .then(a.query.cmp(&b.query))
    });

    let mut panoptic = vec![0u32; hw];
    let mut table: Vec<SegmentInfo> = Vec::new();
    let mut next_id = 1u32;
    for cand in &candidates {
        let branch = if cand.from_stuff_branch { stuff } else { thing };
        let mask = branch.mask(cand.query);
        let mut own = 0usize;
        let mut free = 0usize;
        for p in 0..hw {
            if mask[p] > 0.5 {
                own += 1;
                if panoptic[p] == 0 {
                    free += 1;
                }
            }
        }
        // Drop candidates that lost too much of their mask to earlier,
        // higher-scoring segments.
        if own == 0 || (free as f64) < params.overlap_threshold * own as f64 {
            continue;
        }
        for p in 0..hw {
            if mask[p] > 0.5 && panoptic[p] == 0 {
                panoptic[p] = next_id;
            }
        }
        table.push(SegmentInfo {
            id: next_id,
            category: cand.category,
            isthing: !cand.from_stuff_branch,
        });
        next_id += 1;
    }

    // Merge stuff segments of the same category into one id.
    let mut merged: Vec<SegmentInfo> = Vec::new();
    let mut remap: std::collections::BTreeMap<u32, u32> = Default::default();
    for seg in &table {
        if !seg.isthing {
            if let Some(prev) = merged.iter().find(|m| !m.isthing && m.category == seg.category) {
                remap.insert(seg.id, prev.id);
                continue;
            }
        }
        merged.push(seg.clone());
    }
    if !remap.is_empty() {
        for p in panoptic.iter_mut() {
            if let Some(&to) = remap.get(p) {
                *p = to;
            }
        }
    }

    Ok(TaskOutputs {
        height: h,
        width: w,
        panoptic,
        panoptic_table: merged,
        semantic,
        instances,
        detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(alpha: f64, beta: f64) -> EnsembleParams {
        EnsembleParams::new(alpha, beta).unwrap()
    }

    #[test]
    fn zero_exponents_reproduce_in_scores_bitwise() {
        let p = params(0.0, 0.0);
        for &p_in in &[1e-9, 0.25, 0.5, 0.999999] {
            assert_eq!(ensemble(p_in, 0.123, true, &p), p_in);
            assert_eq!(ensemble(p_in, 0.9, false, &p), p_in);
        }
    }

    #[test]
    fn equal_probabilities_are_a_fixed_point() {
        for &(a, b) in &[(0.2, 0.7), (0.5, 0.5), (1.0, 0.0)] {
            let pr = params(a, b);
            for &p in &[0.1, 0.5, 0.87] {
                assert!((ensemble(p, p, true, &pr) - p).abs() < 1e-12);
                assert!((ensemble(p, p, false, &pr) - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn worked_seen_value_matches_closed_form() {
        // Seen category at alpha = 0.2: 0.8^0.8 * 0.5^0.2.
        let got = ensemble(0.8, 0.5, true, &params(0.2, 0.7));
        let direct = 0.8f64.powf(0.8) * 0.5f64.powf(0.2);
        let via_logs = ((0.8f64.ln() * 0.8) + (0.5f64.ln() * 0.2)).exp();
        assert!((got - direct).abs() < 1e-15);
        assert!((got - via_logs).abs() < 1e-9);
        assert!((got - 0.7282).abs() < 1e-4);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let got = ensemble(0.0, 0.5, false, &params(0.2, 0.7));
        assert!(got.is_finite() && got > 0.0);
    }

    #[test]
    fn ensemble_is_monotone_in_both_arguments() {
        let pr = params(0.3, 0.8);
        for seen in [true, false] {
            let mut prev = 0.0;
            for k in 1..=20 {
                let p = k as f64 / 20.0;
                let s = ensemble(p, 0.5, seen, &pr);
                assert!(s >= prev);
                prev = s;
            }
            let mut prev = 0.0;
            for k in 1..=20 {
                let p = k as f64 / 20.0;
                let s = ensemble(0.5, p, seen, &pr);
                assert!(s >= prev);
                prev = s;
            }
        }
    }

    #[test]
    fn invalid_exponents_are_rejected() {
        assert!(EnsembleParams::new(-0.1, 0.5).is_err());
        assert!(EnsembleParams::new(0.1, 1.5).is_err());
    }

    fn vocab() -> Vocabulary {
        Vocabulary::synthetic(2, 1, 0).unwrap() // things 0,1; stuff 2
    }

    /// 4x4 image, one thing query with a perfect top-left 2x2 mask, one
    /// stuff query covering the rest.
    fn simple_branches(thing_score: f64, stuff_score: f64) -> (BranchPredictions, BranchPredictions) {
        let hw = 16;
        let thing_px = [0usize, 1, 4, 5];
        let mut thing_mask = vec![0.0; hw];
        let mut stuff_mask = vec![0.8; hw];
        for &p in &thing_px {
            thing_mask[p] = 0.9;
            stuff_mask[p] = 0.1;
        }
        let thing = BranchPredictions {
            n_queries: 1,
            height: 4,
            width: 4,
            mask_probs: thing_mask,
            boxes: vec![0.25, 0.25, 0.5, 0.5],
            scores: vec![thing_score, 0.1], // cats [0, 1]
            cats: vec![0, 1],
        };
        let stuff = BranchPredictions {
            n_queries: 1,
            height: 4,
            width: 4,
            mask_probs: stuff_mask,
            boxes: vec![0.5, 0.5, 1.0, 1.0],
            scores: vec![0.05, 0.05, stuff_score], // cats [0, 1, 2]
            cats: vec![0, 1, 2],
        };
        (thing, stuff)
    }

    #[test]
    fn nothing_above_threshold_yields_void_and_empty_lists() {
        let (thing, stuff) = simple_branches(0.2, 0.3);
        let out = assemble(&thing, &stuff, &vocab(), &AssemblyParams::default()).unwrap();
        assert!(out.panoptic.iter().all(|&id| id == 0));
        assert!(out.panoptic_table.is_empty());
        assert!(out.instances.is_empty());
        assert!(out.detections.is_empty());
    }

    #[test]
    fn thing_plus_stuff_partition_the_image() {
        let (thing, stuff) = simple_branches(0.9, 0.8);
        let out = assemble(&thing, &stuff, &vocab(), &AssemblyParams::default()).unwrap();
        assert_eq!(out.panoptic_table.len(), 2);
        // Every pixel claimed by exactly one segment.
        assert!(out.panoptic.iter().all(|&id| id != 0));
        let thing_id = out.panoptic_table.iter().find(|s| s.isthing).unwrap().id;
        let count = out.panoptic.iter().filter(|&&id| id == thing_id).count();
        assert_eq!(count, 4);
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.instances.len(), 1);
        assert_eq!(out.instances[0].category, 0);
    }

    #[test]
    fn instance_list_sorted_by_score_with_query_tie_break() {
        let hw = 16;
        let thing = BranchPredictions {
            n_queries: 3,
            height: 4,
            width: 4,
            mask_probs: vec![0.9; 3 * hw],
            boxes: vec![0.5; 12],
            // Scores: q0 = 0.7, q1 = 0.9, q2 = 0.7 (tie with q0).
            scores: vec![0.7, 0.9, 0.7],
            cats: vec![0],
        };
        let stuff = BranchPredictions {
            n_queries: 1,
            height: 4,
            width: 4,
            mask_probs: vec![0.9; hw],
            boxes: vec![0.5; 4],
            scores: vec![0.0, 0.9],
            cats: vec![0, 2],
        };
        let out = assemble(&thing, &stuff, &vocab(), &AssemblyParams::default()).unwrap();
        let order: Vec<usize> = out.instances.iter().map(|i| i.query).collect();
        assert_eq!(order, vec![1, 0, 2]);
    }

    #[test]
    fn cloned_query_is_dropped_by_pixel_claiming() {
        let hw = 16;
        let mut mask = vec![0.0; hw];
        for &p in &[0usize, 1, 4, 5] {
            mask[p] = 0.95;
        }
        let mut probs = mask.clone();
        probs.extend_from_slice(&mask); // identical clone
        let thing = BranchPredictions {
            n_queries: 2,
            height: 4,
            width: 4,
            mask_probs: probs,
            boxes: vec![0.25, 0.25, 0.5, 0.5, 0.25, 0.25, 0.5, 0.5],
            scores: vec![0.95, 0.90],
            cats: vec![0],
        };
        let stuff = BranchPredictions {
            n_queries: 1,
            height: 4,
            width: 4,
            mask_probs: vec![0.8; hw],
            boxes: vec![0.5; 4],
            scores: vec![0.0, 0.85],
            cats: vec![0, 2],
        };
        let out = assemble(&thing, &stuff, &vocab(), &AssemblyParams::default()).unwrap();
        // Both clones pass the score filter, only one survives claiming.
        let things: Vec<_> = out.panoptic_table.iter().filter(|s| s.isthing).collect();
        assert_eq!(things.len(), 1);
    }

    #[test]
    fn stuff_segments_of_equal_category_merge() {
        let hw = 16;
        let mut left = vec![0.0; hw];
        let mut right = vec![0.0; hw];
        for y in 0..4 {
            for x in 0..4 {
                if x < 2 {
                    left[y * 4 + x] = 0.9;
                } else {
                    right[y * 4 + x] = 0.9;
                }
            }
        }
        let mut probs = left;
        probs.extend(right);
        let stuff = BranchPredictions {
            n_queries: 2,
            height: 4,
            width: 4,
            mask_probs: probs,
            boxes: vec![0.5; 8],
            scores: vec![0.9, 0.8],
            cats: vec![2],
        };
        let thing = BranchPredictions {
            n_queries: 0,
            height: 4,
            width: 4,
            mask_probs: vec![],
            boxes: vec![],
            scores: vec![],
            cats: vec![0, 1],
        };
        let out = assemble(&thing, &stuff, &vocab(), &AssemblyParams::default()).unwrap();
        assert_eq!(out.panoptic_table.len(), 1);
        let id = out.panoptic_table[0].id;
        assert!(out.panoptic.iter().all(|&p| p == id));
    }

    #[test]
    fn filter_keeps_only_scores_at_or_above_threshold() {
        let cands = vec![
            Candidate { query: 0, category: 0, score: 0.9, from_stuff_branch: false },
            Candidate { query: 1, category: 0, score: 0.2, from_stuff_branch: false },
        ];
        let kept = filter_duplicates(cands, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].query, 0);
        let none = filter_duplicates(
            vec![Candidate { query: 0, category: 0, score: 0.4, from_stuff_branch: true }],
            0.5,
        );
        assert!(none.is_empty());
    }

    proptest::proptest! {
        /// Panoptic output is always a partition: every pixel void or exactly
        /// one segment id present in the table.
        #[test]
        fn panoptic_is_always_a_partition(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let hw = 36;
            let v = vocab();
            let nq_t = rng.gen_range(0..4usize);
            let nq_s = rng.gen_range(1..4usize);
            let thing = BranchPredictions {
                n_queries: nq_t,
                height: 6,
                width: 6,
                mask_probs: (0..nq_t * hw).map(|_| rng.gen_range(0.0..1.0)).collect(),
                boxes: (0..nq_t * 4).map(|_| rng.gen_range(0.0..1.0)).collect(),
                scores: (0..nq_t * 2).map(|_| rng.gen_range(0.0..1.0)).collect(),
                cats: vec![0, 1],
            };
            let stuff = BranchPredictions {
                n_queries: nq_s,
                height: 6,
                width: 6,
                mask_probs: (0..nq_s * hw).map(|_| rng.gen_range(0.0..1.0)).collect(),
                boxes: (0..nq_s * 4).map(|_| rng.gen_range(0.0..1.0)).collect(),
                scores: (0..nq_s * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
                cats: vec![0, 1, 2],
            };
            let out = assemble(&thing, &stuff, &v, &AssemblyParams::default()).unwrap();
            for &id in &out.panoptic {
                if id != 0 {
                    proptest::prop_assert!(out.panoptic_table.iter().any(|s| s.id == id));
                }
            }
        }
    }
}
