//! The three attention kernels used by the decoupled decoder.
//!
//! * [`SelfAttention`] — scaled dot-product attention among queries.
//! * [`MaskedCrossAttention`] — cross-attention from queries to feature
//!   pixels where each query only attends inside its predicted mask. Pixels
//!   outside the mask get exactly zero post-softmax weight; a query whose
//!   mask is entirely empty falls back to full attention so it cannot go
//!   dead early in training.
//! * [`DeformableCrossAttention`] — each query samples a few learned offset
//!   locations around its reference point via bilinear interpolation and
//!   combines them with softmax-normalized learned weights.
//!
//! All kernels are pure functions of their inputs plus module-owned weights
//! and are permutation-equivariant over queries.

use crate::error::{Error, Result};
use crate::tensor::{Binding, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Single-scale feature map produced by the backbone, `[h, w, d]`.
#[derive(Clone)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            &[h, w, d] => Ok(FeatureMap {
                height: h,
                width: w,
                channels: d,
                values,
            }),
            s => Err(Error::Shape(format!("feature map must be [h,w,d], got {s:?}"))),
        }
    }

    /// View as `[h*w, d]` rows.
    pub fn flat(&self) -> Result<Tensor> {
        self.values
            .reshape(&[self.height * self.width, self.channels])
    }
}

/// Per-query boolean attention region over a feature map (true = attend).
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub height: usize,
    pub width: usize,
    pub select: Vec<bool>,
}

impl AttentionMask {
    pub fn full(height: usize, width: usize) -> Self {
        AttentionMask {
            height,
            width,
            select: vec![true; height * width],
        }
    }
}

/// Sampling locations and mixing weights for deformable attention.
///
/// Reference points are normalized to `[0,1]^2`; offsets are unnormalized
/// pixel displacements added after the reference is scaled by `(w, h)`.
pub struct SamplingSpec {
    /// `[q, 2]` normalized (x, y) reference points.
    pub refs: Tensor,
    /// `[q, heads*points*2]` pixel-unit offsets, laid out per head then per
    /// point as (dx, dy).
    pub offsets: Tensor,
    /// `[q, heads*points]` pre-softmax mixing weights.
    pub weight_logits: Tensor,
    pub heads: usize,
    pub points: usize,
}

/// Deterministic RNG for a named parameter; initialization is independent of
/// registration order.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a: stable across platforms and releases.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Dense affine layer with Xavier-uniform weights and zero bias.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, seed: u64) {
        let wname = format!("{name}.weight");
        store.register(&wname, &[fan_in, fan_out], || {
            let mut rng = param_rng(seed, &wname);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect()
        });
        store.register(&format!("{name}.bias"), &[fan_out], || vec![0.0; fan_out]);
    }

    pub fn bind(b: &Binding, name: &str) -> Result<Self> {
        Ok(Linear {
            weight: b.bind(&format!("{name}.weight"))?,
            bias: b.bind(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        Err(Error::Shape(format!("dim {d} not divisible by {heads} heads")))
    } else {
        Ok(d / heads)
    }
}

/// Multi-head attention core shared by the self and masked-cross kernels.
/// `mask`, when present, is a `[q, kv]` boolean grid.
fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let d = q.shape()[1];
    let dh = check_heads(d, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let scores = qh.matmul(&kh.transpose()?)?.mul_scalar(scale)?;
        let attn = match mask {
            Some(m) => scores.masked_softmax_rows(m)?,
            None => scores.softmax(1)?,
        };
        outs.push(attn.matmul(&vh)?);
    }
    Tensor::concat_cols(&outs)
}

/// Scaled dot-product self-attention among queries.
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, seed: u64) {
        for part in ["q", "k", "v", "out"] {
            Linear::init(store, &format!("{name}.{part}"), d, d, seed);
        }
    }

    pub fn bind(b: &Binding, name: &str, heads: usize) -> Result<Self> {
        Ok(SelfAttention {
            q: Linear::bind(b, &format!("{name}.q"))?,
            k: Linear::bind(b, &format!("{name}.k"))?,
            v: Linear::bind(b, &format!("{name}.v"))?,
            out: Linear::bind(b, &format!("{name}.out"))?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(x)?;
        let k = self.k.forward(x)?;
        let v = self.v.forward(x)?;
        let mixed = attend(&q, &k, &v, self.heads, None)?;
        self.out.forward(&mixed)
    }
}

/// Cross-attention restricted to each query's predicted mask region.
pub struct MaskedCrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MaskedCrossAttention {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, seed: u64) {
        for part in ["q", "k", "v", "out"] {
            Linear::init(store, &format!("{name}.{part}"), d, d, seed);
        }
    }

    pub fn bind(b: &Binding, name: &str, heads: usize) -> Result<Self> {
        Ok(MaskedCrossAttention {
            q: Linear::bind(b, &format!("{name}.q"))?,
            k: Linear::bind(b, &format!("{name}.k"))?,
            v: Linear::bind(b, &format!("{name}.v"))?,
            out: Linear::bind(b, &format!("{name}.out"))?,
            heads,
        })
    }

    /// `masks = None` means full cross-attention (used by the first decoder
    /// layer, before any mask prediction exists).
    pub fn forward(
        &self,
        x: &Tensor,
        feat: &FeatureMap,
        masks: Option<&[AttentionMask]>,
    ) -> Result<Tensor> {
        let nq = x.shape()[0];
        let kv = feat.height * feat.width;
        let row_mask = match masks {
            None => None,
            Some(ms) => {
                if ms.len() != nq {
                    return Err(Error::Shape(format!("{} masks for {nq} queries", ms.len())));
                }
                let mut flat = Vec::with_capacity(nq * kv);
                for m in ms {
                    if m.height != feat.height || m.width != feat.width {
                        return Err(Error::Shape(format!(
                            "mask {}x{} vs feature map {}x{}",
                            m.height, m.width, feat.height, feat.width
                        )));
                    }
                    flat.extend_from_slice(&m.select);
                }
                Some(flat)
            }
        };
        let fk = feat.flat()?;
        let q = self.q.forward(x)?;
        let k = self.k.forward(&fk)?;
        let v = self.v.forward(&fk)?;
        let mixed = attend(&q, &k, &v, self.heads, row_mask.as_deref())?;
        self.out.forward(&mixed)
    }
}

/// Deformable cross-attention: sparse bilinear sampling around per-query
/// reference points.
pub struct DeformableCrossAttention {
    pub value: Linear,
    pub out: Linear,
    pub offset: Linear,
    pub weight: Linear,
    pub heads: usize,
    pub points: usize,
}

impl DeformableCrossAttention {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        points: usize,
        seed: u64,
    ) {
        Linear::init(store, &format!("{name}.value"), d, d, seed);
        Linear::init(store, &format!("{name}.out"), d, d, seed);
        // Sampling starts content-independent: zero projection weights, a
        // ring of offsets in the bias, uniform mixing weights.
        store.register(&format!("{name}.offset.weight"), &[d, heads * points * 2], || {
            vec![0.0; d * heads * points * 2]
        });
        store.register(&format!("{name}.offset.bias"), &[heads * points * 2], || {
            let mut bias = Vec::with_capacity(heads * points * 2);
            for h in 0..heads {
                for p in 0..points {
                    let angle = 2.0 * std::f64::consts::PI * (h * points + p) as f64
                        / (heads * points) as f64;
                    let radius = (p + 1) as f64;
                    bias.push(radius * angle.cos());
                    bias.push(radius * angle.sin());
                }
            }
            bias
        });
        store.register(&format!("{name}.weight.weight"), &[d, heads * points], || {
            vec![0.0; d * heads * points]
        });
        store.register(&format!("{name}.weight.bias"), &[heads * points], || {
            vec![0.0; heads * points]
        });
    }

    pub fn bind(b: &Binding, name: &str, heads: usize, points: usize) -> Result<Self> {
        Ok(DeformableCrossAttention {
            value: Linear::bind(b, &format!("{name}.value"))?,
            out: Linear::bind(b, &format!("{name}.out"))?,
            offset: Linear::bind(b, &format!("{name}.offset"))?,
            weight: Linear::bind(b, &format!("{name}.weight"))?,
            heads,
            points,
        })
    }

    /// Predict offsets and mixing weights from the current query content.
    pub fn make_spec(&self, x: &Tensor, refs: &Tensor) -> Result<SamplingSpec> {
        Ok(SamplingSpec {
            refs: refs.clone(),
            offsets: self.offset.forward(x)?,
            weight_logits: self.weight.forward(x)?,
            heads: self.heads,
            points: self.points,
        })
    }

    pub fn forward(&self, x: &Tensor, feat: &FeatureMap, spec: &SamplingSpec) -> Result<Tensor> {
        let nq = x.shape()[0];
        if spec.refs.shape() != [nq, 2] {
            return Err(Error::Shape(format!(
                "reference points {:?} for {nq} queries",
                spec.refs.shape()
            )));
        }
        if spec.refs.value().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Shape("reference points must lie in [0,1]^2".into()));
        }
        let d = feat.channels;
        let dh = check_heads(d, spec.heads)?;
        let p = spec.points;
        let v = self.value.forward(&feat.flat()?)?;

        // Replicate each query's reference point once per sampling point.
        let rep_idx: Vec<usize> = (0..nq).flat_map(|i| std::iter::repeat_n(i, p)).collect();
        let refs_rep = spec.refs.index_rows(&rep_idx)?;
        let scale = Tensor::from_vec(
            (0..nq * p)
                .flat_map(|_| [feat.width as f64, feat.height as f64])
                .collect(),
            &[nq * p, 2],
        )?;
        let base = refs_rep.mul(&scale)?;

        let mut outs = Vec::with_capacity(spec.heads);
        for h in 0..spec.heads {
            let vh = v
                .slice_cols(h * dh, dh)?
                .reshape(&[feat.height, feat.width, dh])?;
            let off = spec
                .offsets
                .slice_cols(h * p * 2, p * 2)?
                .reshape(&[nq * p, 2])?;
            let coords = base.add(&off)?;
            let sampled = vh.bilinear_sample(&coords)?;
            let weights = spec.weight_logits.slice_cols(h * p, p)?.softmax(1)?;
            outs.push(Tensor::weighted_group_sum(&sampled, &weights)?);
        }
        let mixed = Tensor::concat_cols(&outs)?;
        self.out.forward(&mixed)
    }
}

/// Fixed 2-d sinusoidal positional encoding, `[h*w, d]`. Added to feature
/// content so masks, boxes and sampled values can carry absolute position.
/// Frequencies are linearly spaced so the highest stays below the feature
/// grid's Nyquist rate.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Tensor {
    assert!(d.is_multiple_of(4), "positional encoding needs d divisible by 4");
    let quarter = d / 4;
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            let ny = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
            let nx = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
            for k in 0..quarter {
                let freq = std::f64::consts::PI * (k + 1) as f64;
                data.push((ny * freq).sin());
                data.push((ny * freq).cos());
            }
            for k in 0..quarter {
                let freq = std::f64::consts::PI * (k + 1) as f64;
                data.push((nx * freq).sin());
                data.push((nx * freq).cos());
            }
        }
    }
    Tensor::from_vec(data, &[h * w, d]).expect("positional encoding is finite")
}
