//! Training loop: Adam over shuffled synthetic scenes, sequential and
//! bit-reproducible under a fixed seed. Evaluation fans out per image; the
//! optimization itself never does.

use crate::classifiers::{category_palette, Vocabulary};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::evalrun::{evaluate, EvalOptions};
use crate::harness::model::Pipeline;
use crate::harness::scene::{generate_scene, scene_seed, Scene, SceneSpec};
use crate::matching::MatchWeights;
use crate::metrics::EvalReport;
use crate::tensor::{Adam, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::Path;

/// A loss beyond this ceiling counts as divergence even while still finite;
/// logits-space losses can blow up astronomically without ever reaching NaN.
pub const DIVERGENCE_CEILING: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub palette: Vec<[f64; 3]>,
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

/// Deterministic synthetic dataset: training scenes hold only seen
/// categories; evaluation scenes include the held-out ones (at least one
/// unseen instance each when the vocabulary has any).
pub fn synthesize_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let vocab = Vocabulary::synthetic(
        cfg.thing_categories,
        cfg.stuff_categories,
        cfg.unseen_categories,
    )?;
    let palette = category_palette(vocab.len(), cfg.seed);
    let seen_things: Vec<u32> = vocab
        .seen_ids()
        .into_iter()
        .filter(|&c| vocab.get(c).map(|k| k.isthing).unwrap_or(false))
        .collect();
    let train_spec = SceneSpec {
        size: cfg.scene_size,
        min_things: cfg.min_things,
        max_things: cfg.max_things,
        noise_sigma: cfg.noise_sigma,
        allowed_things: seen_things,
        ensure_unseen: false,
    };
    let eval_spec = SceneSpec {
        allowed_things: vocab.thing_ids(),
        ensure_unseen: cfg.unseen_categories > 0,
        ..train_spec.clone()
    };
    let gen = |spec: &SceneSpec, split: &str, count: usize| -> Result<Vec<Scene>> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, split, i));
                generate_scene(&vocab, &palette, &mut rng, spec)
            })
            .collect()
    };
    Ok(Dataset {
        train: gen(&train_spec, "train", cfg.train_scenes)?,
        eval: gen(&eval_spec, "eval", cfg.eval_scenes)?,
        vocab,
        palette,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub dataset: Dataset,
    pub loss_curve: Vec<LossPoint>,
    /// (step, report) for every periodic evaluation, final step included.
    pub reports: Vec<(usize, EvalReport)>,
}

impl TrainOutcome {
    pub fn final_report(&self) -> &EvalReport {
        &self.reports.last().expect("training always evaluates at the end").1
    }
}

/// Train from scratch (or from `resume`) per the configuration.
pub fn train(cfg: &RunConfig, resume: Option<ParamStore>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = synthesize_dataset(cfg)?;
    let mut store = resume.unwrap_or_default();
    Pipeline::init(&mut store, cfg, &dataset.vocab);

    let weights = MatchWeights::default();
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut reports = Vec::new();

    for step in 0..cfg.steps {
        if !dataset.train.is_empty() && step % dataset.train.len() == 0 {
            // Fisher-Yates reshuffle at each epoch boundary.
            for i in (1..order.len()).rev() {
                order.swap(i, shuffle_rng.gen_range(0..=i));
            }
        }
        // Step decay by 10x at the 0.9 and 0.95 fractions of training.
        let frac = step as f64 / cfg.steps.max(1) as f64;
        adam.lr = cfg.learning_rate
            * if frac >= 0.95 {
                0.01
            } else if frac >= 0.9 {
                0.1
            } else {
                1.0
            };
        let scene = &dataset.train[order[step % dataset.train.len()]];

        let pipe = Pipeline::bind(&store, cfg, true)?;
        let loss = match pipe.scene_loss(scene, &dataset.vocab, &weights) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Divergence { step, loss: f64::NAN })
            }
            Err(e) => return Err(e),
        };
        let loss_value = loss.item()?;
        if !loss_value.is_finite() || loss_value > DIVERGENCE_CEILING {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        loss.backward()?;
        let grads = pipe.grads();
        drop(pipe);
        adam.step(&mut store, &grads);
        if store.any_non_finite() {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        loss_curve.push(LossPoint { step, loss: loss_value });

        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 != cfg.steps {
            let opts = EvalOptions::from_config(cfg)?;
            reports.push((step + 1, evaluate(&store, cfg, &dataset.vocab, &dataset.eval, &opts)?));
        }
    }

    let opts = EvalOptions::from_config(cfg)?;
    reports.push((
        cfg.steps,
        evaluate(&store, cfg, &dataset.vocab, &dataset.eval, &opts)?,
    ));
    Ok(TrainOutcome {
        store,
        dataset,
        loss_curve,
        reports,
    })
}

/// Seed-stream tag for the shuffle RNG, distinct from scene and init streams.
const SHUFFLE_STREAM: u64 = 0x73687566666c65; // "shuffle"

/// Persist a finished run: config snapshot, checkpoint, loss curve, final
/// report (JSON + table).
pub fn persist_run(outcome: &TrainOutcome, cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    cfg.save(&dir.join("config.txt"))?;
    outcome.store.save(&dir.join("checkpoint.osd"))?;
    std::fs::write(
        dir.join("loss_curve.json"),
        serde_json::to_string(&outcome.loss_curve)?,
    )?;
    let report = outcome.final_report();
    std::fs::write(dir.join("eval_report.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("eval_report.txt"), report.to_table())?;
    Ok(())
}
