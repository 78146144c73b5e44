//! Region-aware dual classifiers.
//!
//! The in-vocabulary classifier scores a decoder query embedding against a
//! text embedding, `sigmoid(cosine(text, query) / T)`; the text embedding is
//! built from learnable prompt vectors composed around a per-category anchor
//! and pushed through a small frozen token-mixing network. The
//! out-of-vocabulary classifier scores a mask-pooled visual embedding against
//! the same prompt composition in the visual-embedding space. It is used only
//! at inference: nothing in it ever receives gradients.
//!
//! Real pretrained text/vision encoders are replaced by a synthetic pair with
//! planted signatures: every category owns a unit anchor vector (pairwise
//! orthogonal) and a palette color; the frozen visual encoder maps pixels
//! near a category's color to embeddings near its anchor. That keeps
//! open-vocabulary behavior genuinely testable without any downloaded
//! weights.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Binding, ParamStore, Tensor};
use crate::attention::param_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Category {
    pub id: u32,
    pub name: String,
    pub isthing: bool,
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub categories: Vec<Category>,
}

const THING_NAMES: &[&str] = &["crate", "drum", "cone", "orb", "slab", "prism", "wedge", "ring"];
const STUFF_NAMES: &[&str] = &["sky", "field", "water", "sand", "rock", "fog"];

impl Vocabulary {
    /// Synthetic vocabulary: `n_thing` thing categories followed by `n_stuff`
    /// stuff categories; the last `n_unseen` thing categories are held out of
    /// training.
    pub fn synthetic(n_thing: usize, n_stuff: usize, n_unseen: usize) -> Result<Self> {
        if n_unseen > n_thing {
            return Err(Error::Config(format!(
                "{n_unseen} unseen categories out of {n_thing} thing categories"
            )));
        }
        let mut categories = Vec::with_capacity(n_thing + n_stuff);
        for i in 0..n_thing {
            let name = THING_NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("thing-{i}"));
            categories.push(Category {
                id: i as u32,
                name,
                isthing: true,
                seen: i < n_thing - n_unseen,
            });
        }
        for i in 0..n_stuff {
            let name = STUFF_NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("stuff-{i}"));
            categories.push(Category {
                id: (n_thing + i) as u32,
                name,
                isthing: false,
                seen: true,
            });
        }
        Ok(Vocabulary { categories })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn index_of(&self, id: u32) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| Error::UnknownCategory(format!("id {id}")))
    }

    pub fn get(&self, id: u32) -> Result<&Category> {
        Ok(&self.categories[self.index_of(id)?])
    }

    pub fn thing_ids(&self) -> Vec<u32> {
        self.categories.iter().filter(|c| c.isthing).map(|c| c.id).collect()
    }

    pub fn stuff_ids(&self) -> Vec<u32> {
        self.categories.iter().filter(|c| !c.isthing).map(|c| c.id).collect()
    }

    /// Categories seen during training (`C_train`).
    pub fn seen_ids(&self) -> Vec<u32> {
        self.categories.iter().filter(|c| c.seen).map(|c| c.id).collect()
    }

    pub fn unseen_ids(&self) -> Vec<u32> {
        self.categories.iter().filter(|c| !c.seen).map(|c| c.id).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.categories)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let categories: Vec<Category> = serde_json::from_slice(&bytes)?;
        let vocab = Vocabulary { categories };
        let mut ids: Vec<u32> = vocab.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != vocab.categories.len() {
            return Err(Error::Schema("duplicate category ids in vocabulary".into()));
        }
        Ok(vocab)
    }
}

// ---------------------------------------------------------------------------
// Prompt bank
// ---------------------------------------------------------------------------

/// Learnable prompt vectors: a shared group plus thing- and stuff-specific
/// groups. Templates put the specific tokens first, then the first half of
/// the shared tokens, the category anchor, and the remaining shared tokens.
pub struct PromptBank {
    pub shared: Tensor,
    pub thing_specific: Tensor,
    pub stuff_specific: Tensor,
}

const PROMPT_INIT_STD: f64 = 0.01;

impl PromptBank {
    pub fn init(store: &mut ParamStore, n_specific: usize, n_shared: usize, d_tok: usize, seed: u64) {
        let gauss = |name: &str, n: usize| {
            let mut rng = param_rng(seed, name);
            (0..n)
                .map(|_| {
                    // Box-Muller; keeps us off an extra dependency.
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    PROMPT_INIT_STD
                        * (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect::<Vec<f64>>()
        };
        store.register("prompts.shared", &[n_shared, d_tok], || {
            gauss("prompts.shared", n_shared * d_tok)
        });
        store.register("prompts.thing_specific", &[n_specific, d_tok], || {
            gauss("prompts.thing_specific", n_specific * d_tok)
        });
        store.register("prompts.stuff_specific", &[n_specific, d_tok], || {
            gauss("prompts.stuff_specific", n_specific * d_tok)
        });
    }

    pub fn bind(b: &Binding) -> Result<Self> {
        Ok(PromptBank {
            shared: b.bind("prompts.shared")?,
            thing_specific: b.bind("prompts.thing_specific")?,
            stuff_specific: b.bind("prompts.stuff_specific")?,
        })
    }

    pub fn tokens_per_template(&self) -> usize {
        self.shared.shape()[0] + self.thing_specific.shape()[0] + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Thing,
    Stuff,
}

// ---------------------------------------------------------------------------
// Synthetic encoder pair (stands in for a pretrained image/text model)
// ---------------------------------------------------------------------------

/// Frozen anchor/palette pair. Anchors are orthonormal rows in the visual
/// embedding space; the palette gives each category the color signature its
/// scenes are rendered with.
pub struct SyntheticClip {
    pub anchors: Tensor,
    pub palette: Vec<[f64; 3]>,
    pub dim: usize,
    /// Softness of the pixel-to-palette assignment.
    tau: f64,
}

/// Curated well-separated palette; extended by farthest-point sampling when a
/// vocabulary needs more entries. Minimum pairwise RGB distance ~0.45.
const BASE_PALETTE: &[[f64; 3]] = &[
    [0.85, 0.10, 0.10], // red
    [0.10, 0.70, 0.15], // green
    [0.15, 0.25, 0.90], // blue
    [0.95, 0.85, 0.10], // yellow
    [0.85, 0.15, 0.85], // magenta
    [0.55, 0.80, 0.95], // pale blue
    [0.35, 0.30, 0.20], // umber
    [0.10, 0.85, 0.80], // teal
    [0.95, 0.55, 0.10], // orange
    [0.45, 0.10, 0.55], // violet
    [0.75, 0.75, 0.75], // gray
    [0.05, 0.35, 0.35], // pine
];

pub fn category_palette(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut palette: Vec<[f64; 3]> = BASE_PALETTE.iter().take(n).copied().collect();
    let mut rng = param_rng(seed, "palette.extension");
    while palette.len() < n {
        // Farthest-point: the candidate maximizing distance to the chosen set.
        let mut best = [0.5, 0.5, 0.5];
        let mut best_d = -1.0;
        for _ in 0..256 {
            let c = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let d = palette
                .iter()
                .map(|p| dist2(p, &c))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = c;
            }
        }
        palette.push(best);
    }
    palette
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

impl SyntheticClip {
    pub fn init(store: &mut ParamStore, n_cat: usize, dim: usize, seed: u64) {
        assert!(n_cat <= dim, "need at least {n_cat} visual dimensions");
        store.register("frozen.clip.anchors", &[n_cat, dim], || {
            // Gram-Schmidt over seeded Gaussian rows: pairwise orthogonal,
            // unit norm.
            let mut rng = param_rng(seed, "frozen.clip.anchors");
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_cat);
            while rows.len() < n_cat {
                let mut v: Vec<f64> = (0..dim)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect();
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    for (vi, ri) in v.iter_mut().zip(r) {
                        *vi -= dot * ri;
                    }
                }
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-6 {
                    continue;
                }
                for vi in &mut v {
                    *vi /= norm;
                }
                rows.push(v);
            }
            rows.into_iter().flatten().collect()
        });
        store.register("frozen.clip.palette", &[n_cat, 3], || {
            category_palette(n_cat, seed).into_iter().flatten().collect()
        });
    }

    pub fn bind(b: &Binding) -> Result<Self> {
        let anchors = b.bind("frozen.clip.anchors")?;
        let palette_t = b.bind("frozen.clip.palette")?;
        let dim = anchors.shape()[1];
        let palette = palette_t
            .value()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(SyntheticClip {
            anchors,
            palette,
            dim,
            tau: 0.05,
        })
    }

    pub fn anchor(&self, cat_index: usize) -> Vec<f64> {
        self.anchors.value()[cat_index * self.dim..(cat_index + 1) * self.dim].to_vec()
    }

    /// Frozen visual encoder: each pixel is soft-assigned to palette colors
    /// and mapped to the matching mixture of anchors. Pixels rendered with a
    /// category's signature come out concentrated near that category's
    /// anchor. Plain `f64`, no gradient path.
    pub fn encode_image(&self, pixels: &[f64], h: usize, w: usize) -> Vec<f64> {
        assert_eq!(pixels.len(), h * w * 3, "pixel buffer size");
        let n_cat = self.palette.len();
        let anchors = self.anchors.value();
        let mut out = vec![0.0; h * w * self.dim];
        for p in 0..h * w {
            let px = [pixels[p * 3], pixels[p * 3 + 1], pixels[p * 3 + 2]];
            let mut weights = Vec::with_capacity(n_cat);
            let mut best = f64::INFINITY;
            for color in &self.palette {
                let d2 = dist2(color, &px);
                best = best.min(d2);
                weights.push(d2);
            }
            let mut total = 0.0;
            for wv in &mut weights {
                *wv = (-(*wv - best) / self.tau).exp();
                total += *wv;
            }
            let dst = &mut out[p * self.dim..(p + 1) * self.dim];
            for (k, wv) in weights.iter().enumerate() {
                let coeff = wv / total;
                if coeff < 1e-12 {
                    continue;
                }
                for (c, dv) in dst.iter_mut().enumerate() {
                    *dv += coeff * anchors[k * self.dim + c];
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

/// Gain on the category token within the template composition.
pub const ANCHOR_GAIN: f64 = 4.0;

/// Frozen two-layer token mixer over the composed prompt template. Gradients
/// reach the prompt vectors through it but never the mixer weights.
pub struct TextEncoder {
    mix_tokens: Tensor,
    mix_channels: Tensor,
    pub n_tokens: usize,
    pub out_dim: usize,
}

impl TextEncoder {
    pub fn init(store: &mut ParamStore, n_tokens: usize, d_tok: usize, out_dim: usize, seed: u64) {
        let xavier = |name: &str, rows: usize, cols: usize| {
            let mut rng = param_rng(seed, name);
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            (0..rows * cols)
                .map(|_| rng.gen_range(-limit..limit))
                .collect::<Vec<f64>>()
        };
        store.register("frozen.text.mix_tokens", &[n_tokens, n_tokens], || {
            xavier("frozen.text.mix_tokens", n_tokens, n_tokens)
        });
        store.register("frozen.text.mix_channels", &[d_tok, out_dim], || {
            xavier("frozen.text.mix_channels", d_tok, out_dim)
        });
    }

    pub fn bind(b: &Binding) -> Result<Self> {
        let mix_tokens = b.bind("frozen.text.mix_tokens")?;
        let mix_channels = b.bind("frozen.text.mix_channels")?;
        let n_tokens = mix_tokens.shape()[0];
        let out_dim = mix_channels.shape()[1];
        Ok(TextEncoder {
            mix_tokens,
            mix_channels,
            n_tokens,
            out_dim,
        })
    }

    /// Compose the prompt template for one category:
    /// specific tokens, first half of the shared tokens, the category token,
    /// then the remaining shared tokens. The category token is the anchor
    /// scaled by a fixed gain; the gain keeps per-category separation
    /// dominant over the learned (category-agnostic) prompt component.
    pub fn compose(&self, bank: &PromptBank, anchor: &Tensor, kind: Kind) -> Result<Tensor> {
        if anchor.shape().len() != 2 || anchor.shape()[0] != 1 {
            return Err(Error::Shape(format!(
                "anchor must be a [1, d] row, got {:?}",
                anchor.shape()
            )));
        }
        let specific = match kind {
            Kind::Thing => &bank.thing_specific,
            Kind::Stuff => &bank.stuff_specific,
        };
        let n_shared = bank.shared.shape()[0];
        let prefix_len = n_shared.div_ceil(2);
        let prefix_idx: Vec<usize> = (0..prefix_len).collect();
        let suffix_idx: Vec<usize> = (prefix_len..n_shared).collect();
        let mut parts = vec![specific.clone()];
        if !prefix_idx.is_empty() {
            parts.push(bank.shared.index_rows(&prefix_idx)?);
        }
        parts.push(anchor.mul_scalar(ANCHOR_GAIN)?);
        if !suffix_idx.is_empty() {
            parts.push(bank.shared.index_rows(&suffix_idx)?);
        }
        Tensor::concat_rows(&parts)
    }

    /// In-vocabulary text embedding as a `[1, out_dim]` row: token mixing,
    /// tanh, channel map, mean pool.
    pub fn encode(&self, bank: &PromptBank, anchor: &Tensor, kind: Kind) -> Result<Tensor> {
        let tokens = self.compose(bank, anchor, kind)?;
        if tokens.shape()[0] != self.n_tokens {
            return Err(Error::Shape(format!(
                "template has {} tokens, mixer expects {}",
                tokens.shape()[0],
                self.n_tokens
            )));
        }
        let mixed = self.mix_tokens.matmul(&tokens)?.tanh()?;
        let lifted = mixed.matmul(&self.mix_channels)?;
        mean_rows(&lifted)
    }

    /// Out-of-vocabulary text embedding: the same composition mean-pooled in
    /// the visual embedding space (`[1, d_tok]`). The anchor dominates; the
    /// learned prompts shift it.
    pub fn encode_clip(&self, bank: &PromptBank, anchor: &Tensor, kind: Kind) -> Result<Tensor> {
        let tokens = self.compose(bank, anchor, kind)?;
        mean_rows(&tokens)
    }
}

/// Column means of a 2-d tensor as a `[1, c]` row.
fn mean_rows(x: &Tensor) -> Result<Tensor> {
    let rows = x.shape()[0];
    let ones = Tensor::from_vec(vec![1.0 / rows as f64; rows], &[1, rows])?;
    ones.matmul(x)
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// In-vocabulary classification logits for every (query, text) pair:
/// `cosine(text_i, query_j) / T` as a `[q, n]` tensor. Apply `sigmoid` for
/// probabilities.
pub fn class_logits(query_emb: &Tensor, text_embs: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let qn = query_emb.normalize_rows()?;
    let tn = text_embs.normalize_rows()?;
    qn.matmul(&tn.transpose()?)?.mul_scalar(1.0 / temperature)
}

/// In-vocabulary score for one query/category pair.
pub fn score_in(query_emb: &Tensor, text_emb: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    crate::tensor::cosine(text_emb, query_emb)?
        .mul_scalar(1.0 / temperature)?
        .sigmoid()
}

/// Weighted average of visual features under `sigmoid(mask_logits)`. Falls
/// back to a uniform average when the total weight is below 1e-6.
pub fn mask_pool(visual: &[f64], dim: usize, mask_logits: &[f64]) -> Vec<f64> {
    let n = mask_logits.len();
    assert_eq!(visual.len(), n * dim, "visual/mask size mismatch");
    let weights: Vec<f64> = mask_logits.iter().map(|&z| sigmoid(z)).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; dim];
    if total < 1e-6 {
        for p in 0..n {
            for c in 0..dim {
                out[c] += visual[p * dim + c];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
    } else {
        for p in 0..n {
            let w = weights[p];
            if w == 0.0 {
                continue;
            }
            for c in 0..dim {
                out[c] += w * visual[p * dim + c];
            }
        }
        for v in &mut out {
            *v /= total;
        }
    }
    out
}

/// Out-of-vocabulary score: plain `f64` cosine against the pooled visual
/// embedding. Inference-only by construction — there is no gradient path.
pub fn score_out(clip_emb: &[f64], text_emb_clip: &[f64], temperature: f64) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    Ok(sigmoid(cosine_f64(clip_emb, text_emb_clip)? / temperature))
}

pub fn cosine_f64(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "cosine length mismatch");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}
