//! Synthetic scene generation with planted per-category color signatures.
//!
//! A scene is one or two stuff regions (full background, optionally split by
//! a horizontal or vertical band) with a handful of geometric thing instances
//! drawn on top in z-order. Every category renders its palette color plus
//! Gaussian pixel noise, then pixels are quantized to the 8-bit grid so that
//! dataset export/ingest round trips are lossless.
//!
//! Placement is rejection-sampled so that no earlier instance loses more than
//! half of its area to later ones; every recorded instance mask is its
//! visible region, boxes are tight boxes of those masks, and the semantic map
//! agrees with the instance masks by construction.

use crate::classifiers::Vocabulary;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category: u32,
    /// Visible-region mask, `h*w` row-major.
    pub mask: Vec<bool>,
    /// Normalized (cx, cy, w, h), the tight box of `mask`.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// `h*w*3` RGB in [0,1], quantized to multiples of 1/255.
    pub pixels: Vec<f64>,
    /// Per-pixel category id.
    pub semantic: Vec<u32>,
    pub instances: Vec<Instance>,
}

/// A panoptic segment in an id map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentInfo {
    pub id: u32,
    pub category: u32,
    pub isthing: bool,
}

impl Scene {
    /// Ground-truth panoptic map: every instance gets its own segment id,
    /// every stuff category present gets one merged segment. Id 0 is void
    /// (never present in ground truth).
    pub fn panoptic_truth(&self, vocab: &Vocabulary) -> Result<(Vec<u32>, Vec<SegmentInfo>)> {
        let mut ids = vec![0u32; self.height * self.width];
        let mut table = Vec::new();
        let mut next = 1u32;
        for inst in &self.instances {
            for (p, &m) in inst.mask.iter().enumerate() {
                if m {
                    ids[p] = next;
                }
            }
            table.push(SegmentInfo {
                id: next,
                category: inst.category,
                isthing: true,
            });
            next += 1;
        }
        let mut stuff_cats: Vec<u32> = Vec::new();
        for (p, &cat) in self.semantic.iter().enumerate() {
            if ids[p] == 0 {
                if !vocab.get(cat)?.isthing {
                    if !stuff_cats.contains(&cat) {
                        stuff_cats.push(cat);
                    }
                } else {
                    return Err(Error::Schema(
                        "thing pixels outside any instance mask".into(),
                    ));
                }
            }
        }
        stuff_cats.sort_unstable();
        for cat in stuff_cats {
            for (p, &c) in self.semantic.iter().enumerate() {
                if ids[p] == 0 && c == cat {
                    ids[p] = next;
                }
            }
            table.push(SegmentInfo {
                id: next,
                category: cat,
                isthing: false,
            });
            next += 1;
        }
        Ok((ids, table))
    }

    /// Image tensor `[h, w, 3]`.
    pub fn image_tensor(&self) -> crate::Result<crate::Tensor> {
        crate::Tensor::from_vec(self.pixels.clone(), &[self.height, self.width, 3])
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub size: usize,
    pub min_things: usize,
    pub max_things: usize,
    pub noise_sigma: f64,
    /// Thing categories eligible for instances.
    pub allowed_things: Vec<u32>,
    /// Force at least one instance from an unseen category (evaluation
    /// splits); ignored when no unseen thing category is allowed.
    pub ensure_unseen: bool,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];

fn shape_mask(shape: Shape, size: usize, cx: f64, cy: f64, half: f64) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match shape {
                Shape::Circle => dx * dx + dy * dy <= half * half,
                Shape::Square => dx.abs() <= half && dy.abs() <= half,
                Shape::Triangle => {
                    dy >= -half && dy <= half && dx.abs() <= (dy + half) / 2.0
                }
                Shape::Diamond => dx.abs() + dy.abs() <= half,
            };
            if inside {
                mask[y * size + x] = true;
            }
        }
    }
    mask
}

fn tight_bbox(mask: &[bool], h: usize, w: usize) -> Option<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if !any {
        return None;
    }
    let bw = (x1 + 1 - x0) as f64 / w as f64;
    let bh = (y1 + 1 - y0) as f64 / h as f64;
    let cx = (x0 as f64 + (x1 + 1 - x0) as f64 / 2.0) / w as f64;
    let cy = (y0 as f64 + (y1 + 1 - y0) as f64 / 2.0) / h as f64;
    Some([cx, cy, bw, bh])
}

pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate one scene. Deterministic given the RNG state.
pub fn generate_scene(
    vocab: &Vocabulary,
    palette: &[[f64; 3]],
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
) -> Result<Scene> {
    let size = spec.size;
    if size < 16 {
        return Err(Error::Config(format!("scene size {size} too small")));
    }
    let stuff_ids = vocab.stuff_ids();
    if stuff_ids.is_empty() {
        return Err(Error::Config("vocabulary has no stuff category".into()));
    }

    // Background: one stuff region, optionally split with a band of another.
    let mut semantic = vec![stuff_ids[rng.gen_range(0..stuff_ids.len())]; size * size];
    if stuff_ids.len() > 1 && rng.gen_bool(0.5) {
        let second = loop {
            let c = stuff_ids[rng.gen_range(0..stuff_ids.len())];
            if c != semantic[0] {
                break c;
            }
        };
        let frac = rng.gen_range(0.3..0.7);
        let split = (size as f64 * frac) as usize;
        let horizontal = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let in_band = if horizontal { y >= split } else { x >= split };
                if in_band {
                    semantic[y * size + x] = second;
                }
            }
        }
    }

    // Things painted in z-order; placement keeps earlier instances at least
    // half visible.
    let n_things = if spec.max_things == 0 {
        0
    } else {
        rng.gen_range(spec.min_things..=spec.max_things)
    };
    let mut placed: Vec<(u32, Vec<bool>)> = Vec::new(); // (category, full shape mask)
    let unseen_allowed: Vec<u32> = spec
        .allowed_things
        .iter()
        .copied()
        .filter(|&c| vocab.get(c).map(|cat| !cat.seen).unwrap_or(false))
        .collect();
    for k in 0..n_things {
        let category = if k == 0 && spec.ensure_unseen && !unseen_allowed.is_empty() {
            unseen_allowed[rng.gen_range(0..unseen_allowed.len())]
        } else {
            spec.allowed_things[rng.gen_range(0..spec.allowed_things.len())]
        };
        let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
        let mut accepted = None;
        for _try in 0..20 {
            let half = rng.gen_range(size as f64 * 0.09..size as f64 * 0.17);
            let cx = rng.gen_range(half + 1.0..size as f64 - half - 1.0);
            let cy = rng.gen_range(half + 1.0..size as f64 - half - 1.0);
            let mask = shape_mask(shape, size, cx, cy, half);
            let area = mask.iter().filter(|&&m| m).count();
            if area < 16 {
                continue;
            }
            // Would any earlier instance drop below half visibility?
            let ok = placed.iter().enumerate().all(|(j, (_, full))| {
                let mut visible = 0usize;
                let mut total = 0usize;
                for p in 0..size * size {
                    if !full[p] {
                        continue;
                    }
                    total += 1;
                    let covered_later = mask[p]
                        || placed[j + 1..].iter().any(|(_, later)| later[p]);
                    if !covered_later {
                        visible += 1;
                    }
                }
                visible * 2 >= total
            });
            if ok {
                accepted = Some(mask);
                break;
            }
        }
        if let Some(mask) = accepted {
            placed.push((category, mask));
        }
    }

    // Resolve visibility: later instances win.
    let mut owner: Vec<Option<usize>> = vec![None; size * size];
    for (idx, (_, full)) in placed.iter().enumerate() {
        for p in 0..size * size {
            if full[p] {
                owner[p] = Some(idx);
            }
        }
    }
    let mut instances = Vec::with_capacity(placed.len());
    for (idx, (category, _)) in placed.iter().enumerate() {
        let mask: Vec<bool> = owner.iter().map(|o| *o == Some(idx)).collect();
        let Some(bbox) = tight_bbox(&mask, size, size) else {
            continue; // fully occluded; placement should prevent this
        };
        for (p, &m) in mask.iter().enumerate() {
            if m {
                semantic[p] = *category;
            }
        }
        instances.push(Instance {
            category: *category,
            mask,
            bbox,
        });
    }

    // Render: signature color + noise, quantized to the u8 grid.
    let mut pixels = vec![0.0; size * size * 3];
    for p in 0..size * size {
        let cat_index = vocab.index_of(semantic[p])?;
        let color = palette[cat_index];
        for c in 0..3 {
            let v = (color[c] + spec.noise_sigma * normal_sample(rng)).clamp(0.0, 1.0);
            pixels[p * 3 + c] = (v * 255.0).round() / 255.0;
        }
    }

    Ok(Scene {
        height: size,
        width: size,
        pixels,
        semantic,
        instances,
    })
}

/// Deterministic per-scene seed: independent of generation order.
pub fn scene_seed(base: u64, split: &str, index: usize) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in split.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= index as u64;
    h = h.wrapping_mul(0x100000001b3);
    base ^ h
}
