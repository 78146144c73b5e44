//! Run configuration: one flat key=value file, every key overridable from
//! the command line.

use crate::error::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub thing_queries: usize,
    pub stuff_queries: usize,
    pub attn_heads: usize,
    pub deform_heads: usize,
    pub deform_points: usize,
    pub patch_size: usize,
    pub conv_layers: usize,
    /// Shared-decoder baseline instead of the decoupled model.
    pub shared_decoder: bool,
    // prompts / synthetic encoders
    pub specific_prompts: usize,
    pub shared_prompts: usize,
    pub clip_dim: usize,
    pub temperature: f64,
    // ensembling / assembly
    pub alpha: f64,
    pub beta: f64,
    pub score_threshold: f64,
    pub overlap_threshold: f64,
    // dataset
    pub scene_size: usize,
    pub thing_categories: usize,
    pub stuff_categories: usize,
    pub unseen_categories: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub min_things: usize,
    pub max_things: usize,
    pub noise_sigma: f64,
    // training
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Evaluate on the held-out split every N steps; 0 = final only.
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embed_dim: 32,
            decoder_layers: 3,
            thing_queries: 12,
            stuff_queries: 4,
            attn_heads: 4,
            deform_heads: 2,
            deform_points: 4,
            patch_size: 4,
            conv_layers: 2,
            shared_decoder: false,
            specific_prompts: 4,
            shared_prompts: 2,
            clip_dim: 16,
            temperature: 0.07,
            alpha: 0.2,
            beta: 0.7,
            score_threshold: 0.5,
            overlap_threshold: 0.8,
            scene_size: 64,
            thing_categories: 5,
            stuff_categories: 3,
            unseen_categories: 2,
            train_scenes: 48,
            eval_scenes: 16,
            min_things: 1,
            max_things: 4,
            noise_sigma: 0.1,
            seed: 0,
            steps: 2000,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            eval_every: 500,
        }
    }
}

macro_rules! config_keys {
    ($($field:ident),* $(,)?) => {
        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse().map_err(|_| {
                            Error::Config(format!("bad value `{value}` for key `{key}`"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            pub fn to_kv(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($field), self.$field));)*
                out
            }
        }
    };
}

config_keys!(
    embed_dim,
    decoder_layers,
    thing_queries,
    stuff_queries,
    attn_heads,
    deform_heads,
    deform_points,
    patch_size,
    conv_layers,
    shared_decoder,
    specific_prompts,
    shared_prompts,
    clip_dim,
    temperature,
    alpha,
    beta,
    score_threshold,
    overlap_threshold,
    scene_size,
    thing_categories,
    stuff_categories,
    unseen_categories,
    train_scenes,
    eval_scenes,
    min_things,
    max_things,
    noise_sigma,
    seed,
    steps,
    learning_rate,
    weight_decay,
    eval_every,
);

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.scene_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "scene_size {} not divisible by patch_size {}",
                self.scene_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(4) || !self.embed_dim.is_multiple_of(self.attn_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must divide by 4 and by attn_heads {}",
                self.embed_dim, self.attn_heads
            )));
        }
        if !self.clip_dim.is_multiple_of(self.deform_heads) && !self.embed_dim.is_multiple_of(self.deform_heads) {
            return Err(Error::Config("embed_dim must divide by deform_heads".into()));
        }
        if self.unseen_categories > self.thing_categories {
            return Err(Error::Config("more unseen than thing categories".into()));
        }
        if self.thing_categories + self.stuff_categories > self.clip_dim {
            return Err(Error::Config(format!(
                "{} categories need clip_dim >= that many (got {})",
                self.thing_categories + self.stuff_categories,
                self.clip_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("alpha/beta must lie in [0, 1]".into()));
        }
        if self.max_things < self.min_things {
            return Err(Error::Config("max_things < min_things".into()));
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv())?;
        Ok(())
    }
}
