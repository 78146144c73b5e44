//! Per-image prediction and dataset evaluation.
//!
//! Prediction is a pure function of (parameters, scene): decode, score the
//! final layer with the in-vocabulary classifier, optionally pool visual
//! embeddings under the predicted masks for the out-of-vocabulary
//! classifier, fuse, and assemble the four task outputs.
//!
//! `evaluate` maps that over a dataset — in parallel with the `parallel`
//! feature (the default), sequentially otherwise — and folds the per-scene
//! statistics in dataset order, so the report is identical either way.

use crate::classifiers::{mask_pool, score_out, Vocabulary};
use crate::decoder::{Arrangement, DecoderOutputs};
use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::model::{Pipeline, TemplateRule};
use crate::harness::Scene;
use crate::inference::{assemble, ensemble, AssemblyParams, BranchPredictions, EnsembleParams, TaskOutputs};
use crate::matching::box_iou_cxcywh;
use crate::metrics::{
    mask_iou, panoptic_quality, semantic_iou, ApAccumulator, EvalReport, IouStats, PqStats,
};
use crate::tensor::{sigmoid, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub ensemble: EnsembleParams,
    /// Compute the mask-pooled visual path. With `alpha = beta = 0` the
    /// fused scores equal the in-vocabulary scores either way; disabling the
    /// path skips the pooling work entirely.
    pub use_out_classifier: bool,
    /// Score only the training vocabulary (closed-vocabulary evaluation).
    pub seen_only: bool,
    pub assembly: AssemblyParams,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let ensemble = EnsembleParams::new(cfg.alpha, cfg.beta)?;
        Ok(EvalOptions {
            ensemble,
            use_out_classifier: cfg.alpha > 0.0 || cfg.beta > 0.0,
            seen_only: false,
            assembly: AssemblyParams {
                score_threshold: cfg.score_threshold,
                overlap_threshold: cfg.overlap_threshold,
            },
        })
    }
}

/// Fused per-query scores for one branch view.
fn branch_predictions(
    pipe: &Pipeline,
    outputs: &DecoderOutputs,
    scene: &Scene,
    cats: &[u32],
    rule: TemplateRule,
    vocab: &Vocabulary,
    opts: &EvalOptions,
    visual: Option<&[f64]>,
) -> Result<BranchPredictions> {
    let last = outputs.layers.len() - 1;
    let n_queries = outputs.layers[last].query_emb.shape()[0];
    let (h, w) = (scene.height, scene.width);

    let text = pipe.text_matrix(cats, rule, vocab)?;
    let logits = crate::classifiers::class_logits(
        &outputs.layers[last].query_emb,
        &text,
        pipe.temperature,
    )?;
    let p_in: Vec<f64> = logits.value().iter().map(|&z| sigmoid(z)).collect();

    let full_logits = outputs.mask_logits_full(last, h, w)?;
    let mask_probs: Vec<f64> = full_logits.value().iter().map(|&z| sigmoid(z)).collect();

    let scores = if let Some(visual) = visual {
        let text_clip = pipe.text_matrix_clip(cats, rule, vocab)?;
        let hw = h * w;
        let mut fused = vec![0.0; n_queries * cats.len()];
        for q in 0..n_queries {
            let pooled = mask_pool(visual, pipe.clip.dim, &full_logits.value()[q * hw..(q + 1) * hw]);
            for (c, &cat) in cats.iter().enumerate() {
                let p_out = score_out(&pooled, &text_clip[c], pipe.temperature)?;
                let seen = vocab.get(cat)?.seen;
                fused[q * cats.len() + c] =
                    ensemble(p_in[q * cats.len() + c], p_out, seen, &opts.ensemble);
            }
        }
        fused
    } else {
        p_in
    };

    Ok(BranchPredictions {
        n_queries,
        height: h,
        width: w,
        mask_probs,
        boxes: outputs.layers[last].boxes.value().to_vec(),
        scores,
        cats: cats.to_vec(),
    })
}

/// Run the full pipeline on one scene and assemble the four task outputs.
pub fn predict_scene(
    pipe: &Pipeline,
    scene: &Scene,
    vocab: &Vocabulary,
    opts: &EvalOptions,
) -> Result<TaskOutputs> {
    let image = scene.image_tensor()?;
    let feat = pipe.model.encode(&image)?;
    let visual = if opts.use_out_classifier {
        Some(pipe.clip.encode_image(&scene.pixels, scene.height, scene.width))
    } else {
        None
    };
    let mut thing_cats = vocab.thing_ids();
    let mut all_cats: Vec<u32> = vocab.categories.iter().map(|c| c.id).collect();
    if opts.seen_only {
        thing_cats.retain(|&c| vocab.get(c).map(|k| k.seen).unwrap_or(false));
        all_cats.retain(|&c| vocab.get(c).map(|k| k.seen).unwrap_or(false));
    }

    let (thing_view, stuff_view) = match &pipe.model.arrangement {
        Arrangement::Decoupled { .. } => {
            let (thing_out, stuff_out) = pipe.model.decode(&feat)?;
            let tv = branch_predictions(
                pipe, &thing_out, scene, &thing_cats, TemplateRule::AllThing, vocab, opts,
                visual.as_deref(),
            )?;
            let sv = branch_predictions(
                pipe, &stuff_out, scene, &all_cats, TemplateRule::AllStuff, vocab, opts,
                visual.as_deref(),
            )?;
            (tv, sv)
        }
        Arrangement::Shared { .. } => {
            // The single query set serves both roles, scored with the
            // templates it was trained with.
            let out = pipe.model.shared_decode(&feat)?;
            let tv = branch_predictions(
                pipe, &out, scene, &thing_cats, TemplateRule::ByCategory, vocab, opts,
                visual.as_deref(),
            )?;
            let sv = branch_predictions(
                pipe, &out, scene, &all_cats, TemplateRule::ByCategory, vocab, opts,
                visual.as_deref(),
            )?;
            (tv, sv)
        }
    };
    assemble(&thing_view, &stuff_view, vocab, &opts.assembly)
}

/// Per-scene metric statistics; merged associatively across a dataset.
#[derive(Debug, Default, Clone)]
pub struct SceneStats {
    pub pq: PqStats,
    pub iou: IouStats,
    pub ap_box: ApAccumulator,
    pub ap_mask: ApAccumulator,
}

impl SceneStats {
    pub fn merge(&mut self, other: &SceneStats) {
        self.pq.merge(&other.pq);
        self.iou.merge(&other.iou);
        self.ap_box.merge(&other.ap_box);
        self.ap_mask.merge(&other.ap_mask);
    }
}

/// Statistics of one scene's predictions against its annotation.
pub fn scene_stats(outputs: &TaskOutputs, scene: &Scene, vocab: &Vocabulary) -> Result<SceneStats> {
    let (gt_map, gt_table) = scene.panoptic_truth(vocab)?;
    let pq = panoptic_quality(&outputs.panoptic, &outputs.panoptic_table, &gt_map, &gt_table)?;
    let iou = semantic_iou(&outputs.semantic, &scene.semantic)?;

    let mut ap_box = ApAccumulator::default();
    let mut ap_mask = ApAccumulator::default();
    for &cat in &vocab.thing_ids() {
        let gts: Vec<&crate::harness::Instance> =
            scene.instances.iter().filter(|i| i.category == cat).collect();
        let dets: Vec<&crate::inference::Detection> =
            outputs.detections.iter().filter(|d| d.category == cat).collect();
        let insts: Vec<&crate::inference::InstancePrediction> =
            outputs.instances.iter().filter(|i| i.category == cat).collect();
        if gts.is_empty() && dets.is_empty() && insts.is_empty() {
            continue;
        }
        let det_scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let det_iou: Vec<Vec<f64>> = dets
            .iter()
            .map(|d| {
                gts.iter()
                    .map(|g| box_iou_cxcywh(&d.bbox, &g.bbox))
                    .collect()
            })
            .collect();
        ap_box.add_image(cat, &det_scores, &det_iou, gts.len());

        let inst_scores: Vec<f64> = insts.iter().map(|i| i.score).collect();
        let inst_iou: Vec<Vec<f64>> = insts
            .iter()
            .map(|i| gts.iter().map(|g| mask_iou(&i.mask, &g.mask)).collect())
            .collect();
        ap_mask.add_image(cat, &inst_scores, &inst_iou, gts.len());
    }
    Ok(SceneStats { pq, iou, ap_box, ap_mask })
}

fn eval_one(
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    scene: &Scene,
    opts: &EvalOptions,
) -> Result<SceneStats> {
    let pipe = Pipeline::bind(store, cfg, false)?;
    let outputs = predict_scene(&pipe, scene, vocab, opts)?;
    scene_stats(&outputs, scene, vocab)
}

/// Evaluate a dataset. The per-scene map runs under rayon when the
/// `parallel` feature is on; the fold is always sequential in dataset order,
/// so both builds produce identical reports.
pub fn evaluate(
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    scenes: &[Scene],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    #[cfg(feature = "parallel")]
    let per_scene: Vec<Result<SceneStats>> = {
        use rayon::prelude::*;
        scenes
            .par_iter()
            .map(|s| eval_one(store, cfg, vocab, s, opts))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_scene: Vec<Result<SceneStats>> = scenes
        .iter()
        .map(|s| eval_one(store, cfg, vocab, s, opts))
        .collect();

    fold_report(vocab, per_scene)
}

/// Always-sequential evaluation; used by the benchmark suite to compare
/// against the parallel path.
pub fn evaluate_sequential(
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    scenes: &[Scene],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let per_scene: Vec<Result<SceneStats>> = scenes
        .iter()
        .map(|s| eval_one(store, cfg, vocab, s, opts))
        .collect();
    fold_report(vocab, per_scene)
}

fn fold_report(vocab: &Vocabulary, per_scene: Vec<Result<SceneStats>>) -> Result<EvalReport> {
    let mut total = SceneStats::default();
    for stats in per_scene {
        total.merge(&stats?);
    }
    Ok(EvalReport::assemble(
        vocab,
        &total.pq,
        &total.iou,
        &total.ap_box,
        &total.ap_mask,
    ))
}

/// Self-evaluation oracle: feed the ground truth through the metrics as if
/// it were a prediction. Every metric must come out exactly 1.
pub fn oracle_stats(scene: &Scene, vocab: &Vocabulary) -> Result<SceneStats> {
    let (gt_map, gt_table) = scene.panoptic_truth(vocab)?;
    let outputs = TaskOutputs {
        height: scene.height,
        width: scene.width,
        panoptic: gt_map,
        panoptic_table: gt_table,
        semantic: scene.semantic.clone(),
        instances: scene
            .instances
            .iter()
            .map(|i| crate::inference::InstancePrediction {
                category: i.category,
                score: 0.99,
                mask: i.mask.clone(),
                query: 0,
            })
            .collect(),
        detections: scene
            .instances
            .iter()
            .map(|i| crate::inference::Detection {
                category: i.category,
                score: 0.99,
                bbox: i.bbox,
                query: 0,
            })
            .collect(),
    };
    scene_stats(&outputs, scene, vocab)
}

/// Oracle evaluation over a dataset (predictions = ground truth).
pub fn evaluate_oracle(vocab: &Vocabulary, scenes: &[Scene]) -> Result<EvalReport> {
    let per_scene: Vec<Result<SceneStats>> =
        scenes.iter().map(|s| oracle_stats(s, vocab)).collect();
    fold_report(vocab, per_scene)
}
