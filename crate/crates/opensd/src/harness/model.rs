//! The full pipeline: backbone + decoupled decoder + prompt classifiers,
//! bound together from one parameter store.

use crate::classifiers::{
    class_logits, Kind, PromptBank, SyntheticClip, TextEncoder, Vocabulary,
};
use crate::decoder::{Arrangement, BackboneConfig, DecoderConfig, DecoderOutputs, SegModel};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::Scene;
use crate::matching::{match_and_loss, panoptic_ground_truth, split_ground_truth, MatchWeights};
use crate::tensor::{Binding, ParamStore, Tensor};

/// Which prompt template each scored category uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateRule {
    /// Thing template for every category (thing-branch scoring).
    AllThing,
    /// Stuff template for every category (stuff-branch scoring: any category
    /// is a region in semantic segmentation).
    AllStuff,
    /// Template follows the category's own kind (shared-decoder baseline).
    ByCategory,
}

pub struct Pipeline<'a> {
    binding: Binding<'a>,
    pub model: SegModel,
    pub bank: PromptBank,
    pub text: TextEncoder,
    pub clip: SyntheticClip,
    pub temperature: f64,
}

fn backbone_config(cfg: &RunConfig) -> BackboneConfig {
    BackboneConfig {
        patch_size: cfg.patch_size,
        embed_dim: cfg.embed_dim,
        conv_layers: cfg.conv_layers,
    }
}

fn decoder_config(cfg: &RunConfig) -> DecoderConfig {
    DecoderConfig {
        embed_dim: cfg.embed_dim,
        layers: cfg.decoder_layers,
        thing_queries: cfg.thing_queries,
        stuff_queries: cfg.stuff_queries,
        attn_heads: cfg.attn_heads,
        deform_heads: cfg.deform_heads,
        deform_points: cfg.deform_points,
        shared: cfg.shared_decoder,
    }
}

impl<'a> Pipeline<'a> {
    /// Register every parameter (idempotent; loading a checkpoint first
    /// keeps its values).
    pub fn init(store: &mut ParamStore, cfg: &RunConfig, vocab: &Vocabulary) {
        SegModel::init(store, &backbone_config(cfg), &decoder_config(cfg), cfg.seed);
        PromptBank::init(
            store,
            cfg.specific_prompts,
            cfg.shared_prompts,
            cfg.clip_dim,
            cfg.seed,
        );
        TextEncoder::init(
            store,
            cfg.specific_prompts + cfg.shared_prompts + 1,
            cfg.clip_dim,
            cfg.embed_dim,
            cfg.seed,
        );
        SyntheticClip::init(store, vocab.len(), cfg.clip_dim, cfg.seed);
    }

    pub fn bind(store: &'a ParamStore, cfg: &RunConfig, trainable: bool) -> Result<Self> {
        let binding = Binding::new(store, trainable);
        let model = SegModel::bind(&binding, &backbone_config(cfg), &decoder_config(cfg))?;
        let bank = PromptBank::bind(&binding)?;
        let text = TextEncoder::bind(&binding)?;
        let clip = SyntheticClip::bind(&binding)?;
        Ok(Pipeline {
            binding,
            model,
            bank,
            text,
            clip,
            temperature: cfg.temperature,
        })
    }

    pub fn grads(&self) -> std::collections::BTreeMap<String, Vec<f64>> {
        self.binding.grads()
    }

    fn template_kind(&self, rule: TemplateRule, isthing: bool) -> Kind {
        match rule {
            TemplateRule::AllThing => Kind::Thing,
            TemplateRule::AllStuff => Kind::Stuff,
            TemplateRule::ByCategory => {
                if isthing {
                    Kind::Thing
                } else {
                    Kind::Stuff
                }
            }
        }
    }

    /// Stacked in-vocabulary text embeddings for `cats`, `[n, d]`.
    pub fn text_matrix(&self, cats: &[u32], rule: TemplateRule, vocab: &Vocabulary) -> Result<Tensor> {
        if cats.is_empty() {
            return Err(Error::Config("empty category list for text matrix".into()));
        }
        let mut rows = Vec::with_capacity(cats.len());
        for &cat in cats {
            let idx = vocab.index_of(cat)?;
            let kind = self.template_kind(rule, vocab.categories[idx].isthing);
            let anchor = Tensor::from_vec(self.clip.anchor(idx), &[1, self.clip.dim])?;
            rows.push(self.text.encode(&self.bank, &anchor, kind)?);
        }
        Tensor::concat_rows(&rows)
    }

    /// Out-of-vocabulary text embeddings in the visual space, one per
    /// category. Plain values: this path is inference-only.
    pub fn text_matrix_clip(
        &self,
        cats: &[u32],
        rule: TemplateRule,
        vocab: &Vocabulary,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(cats.len());
        for &cat in cats {
            let idx = vocab.index_of(cat)?;
            let kind = self.template_kind(rule, vocab.categories[idx].isthing);
            let anchor = Tensor::from_vec(self.clip.anchor(idx), &[1, self.clip.dim])?;
            out.push(self.text.encode_clip(&self.bank, &anchor, kind)?.value().to_vec());
        }
        Ok(out)
    }

    /// Attach classifier logits to every decoder layer.
    pub fn score_layers(&self, outputs: &mut DecoderOutputs, text: &Tensor) -> Result<()> {
        for layer in &mut outputs.layers {
            layer.class_logits = Some(class_logits(&layer.query_emb, text, self.temperature)?);
        }
        Ok(())
    }

    /// Training loss for one scene, summed over branches and decoder layers
    /// with a fresh assignment per layer. Classification is restricted to
    /// the seen vocabulary.
    pub fn scene_loss(&self, scene: &Scene, vocab: &Vocabulary, weights: &MatchWeights) -> Result<Tensor> {
        let image = scene.image_tensor()?;
        let feat = self.model.encode(&image)?;
        let seen: Vec<u32> = vocab.seen_ids();
        let mut total: Option<Tensor> = None;
        let add = |loss: Tensor, total: &mut Option<Tensor>| -> Result<()> {
            *total = Some(match total.take() {
                Some(acc) => acc.add(&loss)?,
                None => loss,
            });
            Ok(())
        };

        match &self.model.arrangement {
            Arrangement::Decoupled { .. } => {
                let (mut thing_out, mut stuff_out) = self.model.decode(&feat)?;
                let thing_cats: Vec<u32> = seen
                    .iter()
                    .copied()
                    .filter(|&c| vocab.get(c).map(|k| k.isthing).unwrap_or(false))
                    .collect();
                let thing_text = self.text_matrix(&thing_cats, TemplateRule::AllThing, vocab)?;
                let stuff_text = self.text_matrix(&seen, TemplateRule::AllStuff, vocab)?;
                self.score_layers(&mut thing_out, &thing_text)?;
                self.score_layers(&mut stuff_out, &stuff_text)?;

                let (tgt, sgt) = split_ground_truth(scene, vocab)?;
                for (l, layer) in thing_out.layers.iter().enumerate() {
                    let full = thing_out.mask_logits_full(l, scene.height, scene.width)?;
                    let (_, loss) = match_and_loss(layer, &full, &tgt, &thing_cats, weights)?;
                    add(loss, &mut total)?;
                }
                for (l, layer) in stuff_out.layers.iter().enumerate() {
                    let full = stuff_out.mask_logits_full(l, scene.height, scene.width)?;
                    let (_, loss) = match_and_loss(layer, &full, &sgt, &seen, weights)?;
                    add(loss, &mut total)?;
                }
            }
            Arrangement::Shared { .. } => {
                let mut out = self.model.shared_decode(&feat)?;
                let text = self.text_matrix(&seen, TemplateRule::ByCategory, vocab)?;
                self.score_layers(&mut out, &text)?;
                let gt = panoptic_ground_truth(scene, vocab)?;
                for (l, layer) in out.layers.iter().enumerate() {
                    let full = out.mask_logits_full(l, scene.height, scene.width)?;
                    let (_, loss) = match_and_loss(layer, &full, &gt, &seen, weights)?;
                    add(loss, &mut total)?;
                }
            }
        }
        total.ok_or_else(|| Error::Config("decoder produced no layers".into()))
    }
}
