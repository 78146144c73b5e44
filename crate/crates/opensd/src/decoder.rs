//! The decoupled query decoder and its tiny backbone.
//!
//! `encode` turns an image into a single-scale feature map (patch embedding
//! plus a couple of 3x3 convolutions). `decode` runs two independent query
//! stacks over it: the thing branch uses deformable cross-attention, the
//! stuff branch uses masked cross-attention gated by its own mask prediction
//! from the previous layer (full attention at the first layer, where no mask
//! exists yet). Each layer ends with self-attention within the branch's own
//! query set and an MLP; prediction heads run after every layer so auxiliary
//! losses can supervise intermediate states, and the head weights are shared
//! across layers.
//!
//! `shared_decode` is the ablation baseline: one query set, masked
//! cross-attention only.

use crate::attention::{
    positional_encoding, AttentionMask, DeformableCrossAttention, FeatureMap, Linear,
    MaskedCrossAttention, SelfAttention,
};
use crate::error::{Error, Result};
use crate::tensor::{Binding, ParamStore, Tensor};
use crate::attention::param_rng;
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub conv_layers: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub thing_queries: usize,
    pub stuff_queries: usize,
    pub attn_heads: usize,
    pub deform_heads: usize,
    pub deform_points: usize,
    /// Baseline variant: one shared query set with masked cross-attention.
    pub shared: bool,
}

/// One query set: thing or stuff, with its own learnable embeddings. The two
/// sets are disjoint parameter groups and are never mixed in one attention
/// call.
pub struct QuerySet {
    pub kind: QueryKind,
    pub embeddings: Tensor,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Thing,
    Stuff,
    Shared,
}

/// Per-layer predictions. Class logits are attached by the classifier
/// wrapper after decoding; the decoder itself is class-agnostic.
#[derive(Clone)]
pub struct LayerOutputs {
    pub query_emb: Tensor,
    /// `[q, feat_h * feat_w]` mask logits at feature resolution.
    pub mask_logits: Tensor,
    /// `[q, 4]` sigmoid-normalized (cx, cy, w, h).
    pub boxes: Tensor,
    pub class_logits: Option<Tensor>,
}

#[derive(Clone)]
pub struct DecoderOutputs {
    /// One entry per decoder layer; the last is the final prediction, the
    /// earlier ones feed auxiliary supervision.
    pub layers: Vec<LayerOutputs>,
    pub feat_h: usize,
    pub feat_w: usize,
}

impl DecoderOutputs {
    pub fn last(&self) -> &LayerOutputs {
        self.layers.last().expect("decoder ran at least one layer")
    }

    pub fn last_mut(&mut self) -> &mut LayerOutputs {
        self.layers.last_mut().expect("decoder ran at least one layer")
    }

    /// Mask logits of one layer upsampled to image resolution.
    pub fn mask_logits_full(&self, layer: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
        self.layers[layer]
            .mask_logits
            .upsample_bilinear_rows(self.feat_h, self.feat_w, out_h, out_w)
    }
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

pub struct Backbone {
    pub cfg: BackboneConfig,
    patch: Linear,
    convs: Vec<Linear>,
}

impl Backbone {
    pub fn init(store: &mut ParamStore, cfg: &BackboneConfig, seed: u64) {
        let d = cfg.embed_dim;
        Linear::init(store, "backbone.patch", cfg.patch_size * cfg.patch_size * 3, d, seed);
        for i in 0..cfg.conv_layers {
            Linear::init(store, &format!("backbone.conv{i}"), 9 * d, d, seed);
        }
    }

    pub fn bind(b: &Binding, cfg: &BackboneConfig) -> Result<Self> {
        let patch = Linear::bind(b, "backbone.patch")?;
        let mut convs = Vec::with_capacity(cfg.conv_layers);
        for i in 0..cfg.conv_layers {
            convs.push(Linear::bind(b, &format!("backbone.conv{i}"))?);
        }
        Ok(Backbone { cfg: *cfg, patch, convs })
    }

    /// Image `[h, w, 3]` -> feature map `[h/p, w/p, d]`. Deterministic given
    /// weights; errors when the image is not divisible by the patch size.
    pub fn encode(&self, image: &Tensor) -> Result<FeatureMap> {
        let [h, w, c] = match image.shape() {
            &[h, w, c] => [h, w, c],
            s => return Err(Error::Shape(format!("image must be [h,w,3], got {s:?}"))),
        };
        if c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
        }
        let p = self.cfg.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by patch {p}")));
        }
        let (fh, fw) = (h / p, w / p);
        let d = self.cfg.embed_dim;
        let mut x = self.patch.forward(&image.patchify(p)?)?.silu()?;
        for conv in &self.convs {
            let cols = x.reshape(&[fh, fw, d])?.im2col3x3()?;
            x = conv.forward(&cols)?.silu()?;
        }
        FeatureMap::new(x.reshape(&[fh, fw, d])?)
    }
}

// ---------------------------------------------------------------------------
// Decoder internals
// ---------------------------------------------------------------------------

struct LayerNormParams {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, name: &str, d: usize) {
        store.register(&format!("{name}.gamma"), &[d], || vec![1.0; d]);
        store.register(&format!("{name}.beta"), &[d], || vec![0.0; d]);
    }

    fn bind(b: &Binding, name: &str) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: b.bind(&format!("{name}.gamma"))?,
            beta: b.bind(&format!("{name}.beta"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, 1e-5)
    }
}

struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn init(store: &mut ParamStore, name: &str, d: usize, hidden: usize, seed: u64) {
        Linear::init(store, &format!("{name}.fc1"), d, hidden, seed);
        Linear::init(store, &format!("{name}.fc2"), hidden, d, seed);
    }

    fn bind(b: &Binding, name: &str) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::bind(b, &format!("{name}.fc1"))?,
            fc2: Linear::bind(b, &format!("{name}.fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

/// Three-layer MLP head (two hidden silu layers).
struct MlpHead {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl MlpHead {
    fn init(store: &mut ParamStore, name: &str, d: usize, out: usize, seed: u64) {
        Linear::init(store, &format!("{name}.fc1"), d, d, seed);
        Linear::init(store, &format!("{name}.fc2"), d, d, seed);
        Linear::init(store, &format!("{name}.fc3"), d, out, seed);
    }

    fn bind(b: &Binding, name: &str) -> Result<Self> {
        Ok(MlpHead {
            fc1: Linear::bind(b, &format!("{name}.fc1"))?,
            fc2: Linear::bind(b, &format!("{name}.fc2"))?,
            fc3: Linear::bind(b, &format!("{name}.fc3"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.silu()?;
        let h = self.fc2.forward(&h)?.silu()?;
        self.fc3.forward(&h)
    }
}

enum CrossAttention {
    Masked(MaskedCrossAttention),
    Deformable(DeformableCrossAttention),
}

struct DecoderLayer {
    cross: CrossAttention,
    norm_cross: LayerNormParams,
    self_attn: SelfAttention,
    norm_self: LayerNormParams,
    mlp: Mlp,
    norm_mlp: LayerNormParams,
}

/// Shared prediction heads: one parameter set applied after every layer.
struct Heads {
    mask: MlpHead,
    boxes: MlpHead,
}

impl Heads {
    fn init(store: &mut ParamStore, name: &str, d: usize, seed: u64) {
        MlpHead::init(store, &format!("{name}.mask"), d, d, seed);
        MlpHead::init(store, &format!("{name}.box"), d, 4, seed);
    }

    fn bind(b: &Binding, name: &str) -> Result<Self> {
        Ok(Heads {
            mask: MlpHead::bind(b, &format!("{name}.mask"))?,
            boxes: MlpHead::bind(b, &format!("{name}.box"))?,
        })
    }

    /// Mask logits are per-pixel dot products between the enriched feature
    /// map and an MLP embedding of each query. Box logits of the deformable
    /// branch are offsets from its reference points (plus a size prior), so
    /// its locally-sampled content never has to regress absolute
    /// coordinates; branches without reference points predict absolute
    /// boxes.
    fn apply(
        &self,
        x: &Tensor,
        feat_flat: &Tensor,
        ref_logits: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let mask_emb = self.mask.forward(x)?;
        let mask_logits = mask_emb.matmul(&feat_flat.transpose()?)?;
        let mut box_logits = self.boxes.forward(x)?;
        if let Some(refs) = ref_logits {
            let q = refs.shape()[0];
            let size_prior = Tensor::from_vec(vec![SIZE_PRIOR_LOGIT; q * 2], &[q, 2])?;
            let bias = Tensor::concat_cols(&[refs.clone(), size_prior])?;
            box_logits = box_logits.add(&bias)?;
        }
        Ok((mask_logits, box_logits.sigmoid()?))
    }
}

/// One query stack: embeddings, reference points (thing branch only),
/// decoder layers and shared heads under a single parameter prefix.
pub struct Branch {
    pub kind: QueryKind,
    pub queries: usize,
    query_embed: Tensor,
    /// Raw logits of normalized reference points; present iff deformable.
    ref_logits: Option<Tensor>,
    layers: Vec<DecoderLayer>,
    heads: Heads,
    attn_heads: usize,
}

fn inverse_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// logit(0.25): box sizes start at a quarter of the image.
const SIZE_PRIOR_LOGIT: f64 = -1.0986122886681098;

impl Branch {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        kind: QueryKind,
        queries: usize,
        cfg: &DecoderConfig,
        seed: u64,
    ) {
        let d = cfg.embed_dim;
        let qname = format!("{prefix}.query_embed");
        store.register(&qname, &[queries, d], || {
            let mut rng = param_rng(seed, &qname);
            (0..queries * d)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect()
        });
        let deformable = kind == QueryKind::Thing;
        if deformable {
            // Reference points start on a jittered grid covering the image.
            store.register(&format!("{prefix}.ref_logits"), &[queries, 2], || {
                let cols = (queries as f64).sqrt().ceil() as usize;
                let rows = queries.div_ceil(cols);
                (0..queries)
                    .flat_map(|i| {
                        let cx = (i % cols) as f64 + 0.5;
                        let cy = (i / cols) as f64 + 0.5;
                        [
                            inverse_sigmoid((cx / cols as f64).clamp(0.1, 0.9)),
                            inverse_sigmoid((cy / rows as f64).clamp(0.1, 0.9)),
                        ]
                    })
                    .collect()
            });
        }
        for l in 0..cfg.layers {
            let lname = format!("{prefix}.layer{l}");
            if deformable {
                DeformableCrossAttention::init(
                    store,
                    &format!("{lname}.cross"),
                    d,
                    cfg.deform_heads,
                    cfg.deform_points,
                    seed,
                );
            } else {
                MaskedCrossAttention::init(store, &format!("{lname}.cross"), d, seed);
            }
            LayerNormParams::init(store, &format!("{lname}.norm_cross"), d);
            SelfAttention::init(store, &format!("{lname}.self"), d, seed);
            LayerNormParams::init(store, &format!("{lname}.norm_self"), d);
            Mlp::init(store, &format!("{lname}.mlp"), d, 2 * d, seed);
            LayerNormParams::init(store, &format!("{lname}.norm_mlp"), d);
        }
        Heads::init(store, &format!("{prefix}.heads"), d, seed);
    }

    pub fn bind(
        b: &Binding,
        prefix: &str,
        kind: QueryKind,
        queries: usize,
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        let deformable = kind == QueryKind::Thing;
        let query_embed = b.bind(&format!("{prefix}.query_embed"))?;
        let ref_logits = if deformable {
            Some(b.bind(&format!("{prefix}.ref_logits"))?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let lname = format!("{prefix}.layer{l}");
            let cross = if deformable {
                CrossAttention::Deformable(DeformableCrossAttention::bind(
                    b,
                    &format!("{lname}.cross"),
                    cfg.deform_heads,
                    cfg.deform_points,
                )?)
            } else {
                CrossAttention::Masked(MaskedCrossAttention::bind(
                    b,
                    &format!("{lname}.cross"),
                    cfg.attn_heads,
                )?)
            };
            layers.push(DecoderLayer {
                cross,
                norm_cross: LayerNormParams::bind(b, &format!("{lname}.norm_cross"))?,
                self_attn: SelfAttention::bind(b, &format!("{lname}.self"), cfg.attn_heads)?,
                norm_self: LayerNormParams::bind(b, &format!("{lname}.norm_self"))?,
                mlp: Mlp::bind(b, &format!("{lname}.mlp"))?,
                norm_mlp: LayerNormParams::bind(b, &format!("{lname}.norm_mlp"))?,
            });
        }
        Ok(Branch {
            kind,
            queries,
            query_embed,
            ref_logits,
            layers,
            heads: Heads::bind(b, &format!("{prefix}.heads"))?,
            attn_heads: cfg.attn_heads,
        })
    }

    pub fn query_set(&self) -> QuerySet {
        QuerySet {
            kind: self.kind,
            embeddings: self.query_embed.clone(),
            count: self.queries,
        }
    }

    /// Run the full stack over an enriched feature map. `feat` must already
    /// contain positional content.
    pub fn forward(&self, feat: &FeatureMap) -> Result<DecoderOutputs> {
        let _ = self.attn_heads;
        let feat_flat = feat.flat()?;
        let refs = match &self.ref_logits {
            Some(raw) => Some(raw.sigmoid()?),
            None => None,
        };
        let mut x = self.query_embed.clone();
        let mut layers_out: Vec<LayerOutputs> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cross_out = match &layer.cross {
                CrossAttention::Deformable(da) => {
                    let refs = refs.as_ref().expect("deformable branch has reference points");
                    let spec = da.make_spec(&x, refs)?;
                    da.forward(&x, feat, &spec)?
                }
                CrossAttention::Masked(ma) => {
                    // Layer 0 has no mask prediction yet: full attention.
                    let masks = layers_out.last().map(|prev| {
                        prev.mask_logits
                            .value()
                            .chunks(feat.height * feat.width)
                            .map(|row| AttentionMask {
                                height: feat.height,
                                width: feat.width,
                                select: row.iter().map(|&z| z > 0.0).collect(),
                            })
                            .collect::<Vec<_>>()
                    });
                    ma.forward(&x, feat, masks.as_deref())?
                }
            };
            x = layer.norm_cross.forward(&x.add(&cross_out)?)?;
            x = layer.norm_self.forward(&x.add(&layer.self_attn.forward(&x)?)?)?;
            x = layer.norm_mlp.forward(&x.add(&layer.mlp.forward(&x)?)?)?;
            let (mask_logits, boxes) = self.heads.apply(&x, &feat_flat, self.ref_logits.as_ref())?;
            layers_out.push(LayerOutputs {
                query_emb: x.clone(),
                mask_logits,
                boxes,
                class_logits: None,
            });
        }
        Ok(DecoderOutputs {
            layers: layers_out,
            feat_h: feat.height,
            feat_w: feat.width,
        })
    }
}

// ---------------------------------------------------------------------------
// Full first stage
// ---------------------------------------------------------------------------

pub struct SegModel {
    pub backbone: Backbone,
    pub arrangement: Arrangement,
    embed_dim: usize,
}

pub enum Arrangement {
    Decoupled { thing: Branch, stuff: Branch },
    Shared { branch: Branch },
}

impl SegModel {
    pub fn init(store: &mut ParamStore, bb: &BackboneConfig, dec: &DecoderConfig, seed: u64) {
        assert_eq!(bb.embed_dim, dec.embed_dim, "backbone/decoder dim mismatch");
        assert!(dec.embed_dim.is_multiple_of(4), "positional encoding needs dim % 4 == 0");
        Backbone::init(store, bb, seed);
        if dec.shared {
            Branch::init(
                store,
                "decoder.shared",
                QueryKind::Shared,
                dec.thing_queries + dec.stuff_queries,
                dec,
                seed,
            );
        } else {
            Branch::init(store, "decoder.thing", QueryKind::Thing, dec.thing_queries, dec, seed);
            Branch::init(store, "decoder.stuff", QueryKind::Stuff, dec.stuff_queries, dec, seed);
        }
    }

    pub fn bind(b: &Binding, bb: &BackboneConfig, dec: &DecoderConfig) -> Result<Self> {
        let backbone = Backbone::bind(b, bb)?;
        let arrangement = if dec.shared {
            Arrangement::Shared {
                branch: Branch::bind(
                    b,
                    "decoder.shared",
                    QueryKind::Shared,
                    dec.thing_queries + dec.stuff_queries,
                    dec,
                )?,
            }
        } else {
            Arrangement::Decoupled {
                thing: Branch::bind(b, "decoder.thing", QueryKind::Thing, dec.thing_queries, dec)?,
                stuff: Branch::bind(b, "decoder.stuff", QueryKind::Stuff, dec.stuff_queries, dec)?,
            }
        };
        Ok(SegModel {
            backbone,
            arrangement,
            embed_dim: dec.embed_dim,
        })
    }

    pub fn encode(&self, image: &Tensor) -> Result<FeatureMap> {
        self.backbone.encode(image)
    }

    /// Backbone features enriched with sinusoidal position content; this is
    /// what the decoder attends to and what the mask head dots against.
    pub fn enrich(&self, feat: &FeatureMap) -> Result<FeatureMap> {
        let pos = positional_encoding(feat.height, feat.width, self.embed_dim);
        let enriched = feat.flat()?.add(&pos)?;
        FeatureMap::new(enriched.reshape(&[feat.height, feat.width, self.embed_dim])?)
    }

    /// Decoupled decoding: both branches run independently over the same
    /// enriched features.
    pub fn decode(&self, feat: &FeatureMap) -> Result<(DecoderOutputs, DecoderOutputs)> {
        match &self.arrangement {
            Arrangement::Decoupled { thing, stuff } => {
                let enriched = self.enrich(feat)?;
                Ok((thing.forward(&enriched)?, stuff.forward(&enriched)?))
            }
            Arrangement::Shared { .. } => Err(Error::Config(
                "decode() called on a shared-decoder model".into(),
            )),
        }
    }

    /// Baseline decoding with the single shared query set.
    pub fn shared_decode(&self, feat: &FeatureMap) -> Result<DecoderOutputs> {
        match &self.arrangement {
            Arrangement::Shared { branch } => {
                let enriched = self.enrich(feat)?;
                branch.forward(&enriched)
            }
            Arrangement::Decoupled { .. } => Err(Error::Config(
                "shared_decode() called on a decoupled model".into(),
            )),
        }
    }
}
