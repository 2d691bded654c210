//! Flat `key = value` run configuration.
//!
//! Keys are namespaced (`encoder.*`, `decoder.*`, `train.*`, `data.*`).
//! Unknown keys are rejected. [`RunConfig::to_text`] lists every key with
//! its resolved value and parses back to an equal configuration.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::ShapeKind;
use crate::decoder::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const RESOLVED_FILE: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Random flip, crop and multi-scale resize during training.
    pub augment: bool,
    /// Side of generated scenes.
    pub size: usize,
    pub shapes: Vec<ShapeKind>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            augment: true,
            size: 64,
            shapes: ShapeKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: std::str::FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<Vec<T>>>()?;
    let n = items.len();
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}`: expected {N} comma-separated values, got {n}")))
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (e, d, t) = (&mut self.model.encoder, &mut self.model.decoder, &mut self.train);
        match key {
            "encoder.img_size" => e.img_size = parse_num(key, v)?,
            "encoder.embed_dim" => e.embed_dim = parse_num(key, v)?,
            "encoder.depths" => e.depths = parse_list(key, v)?,
            "encoder.heads" => e.heads = parse_list(key, v)?,
            "encoder.window" => e.window = parse_num(key, v)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse_num(key, v)?,
            "encoder.rel_pos_bias" => e.rel_pos_bias = parse_bool(key, v)?,
            "decoder.down" => d.down = parse_num(key, v)?,
            "decoder.block_depth" => d.block_depth = parse_num(key, v)?,
            "decoder.ablation" => v.parse::<Ablation>()?.apply(d),
            "decoder.use_mfa" => d.use_mfa = parse_bool(key, v)?,
            "decoder.use_depth_stream" => d.use_depth_stream = parse_bool(key, v)?,
            "decoder.use_mff" => d.use_mff = parse_bool(key, v)?,
            "decoder.use_mls" => d.use_mls = parse_bool(key, v)?,
            "train.epochs" => t.epochs = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.max_lr_backbone" => t.max_lr_backbone = parse_num(key, v)?,
            "train.max_lr_other" => t.max_lr_other = parse_num(key, v)?,
            "train.momentum" => t.momentum = parse_num(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_num(key, v)?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "train.grad_clip" => t.grad_clip = parse_num(key, v)?,
            "train.lambda" => t.loss.lambda = parse_list(key, v)?,
            "data.augment" => self.data.augment = parse_bool(key, v)?,
            "data.size" => self.data.size = parse_num(key, v)?,
            "data.shapes" => {
                self.data.shapes = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Parse {
                    format: "config",
                    offset: start,
                    msg: format!("expected `key = value`, got `{body}`"),
                });
            };
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Parse {
                    format: "config",
                    offset: start,
                    msg,
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Every key in canonical order. Flag keys are listed individually; the
    /// `decoder.ablation` shorthand is never emitted.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = model_entries(&self.model);
        let t = &self.train;
        out.extend([
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_lr_backbone", t.max_lr_backbone.to_string()),
            ("train.max_lr_other", t.max_lr_other.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.lambda", join(&t.loss.lambda)),
            ("data.augment", self.data.augment.to_string()),
            ("data.size", self.data.size.to_string()),
            ("data.shapes", join(&self.data.shapes)),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.shapes.is_empty() {
            return Err(Error::Config("data.shapes is empty".into()));
        }
        Ok(())
    }
}

fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    let (e, d) = (&m.encoder, &m.decoder);
    vec![
        ("encoder.img_size", e.img_size.to_string()),
        ("encoder.embed_dim", e.embed_dim.to_string()),
        ("encoder.depths", join(&e.depths)),
        ("encoder.heads", join(&e.heads)),
        ("encoder.window", e.window.to_string()),
        ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
        ("encoder.rel_pos_bias", e.rel_pos_bias.to_string()),
        ("decoder.down", d.down.to_string()),
        ("decoder.block_depth", d.block_depth.to_string()),
        ("decoder.use_mfa", d.use_mfa.to_string()),
        ("decoder.use_depth_stream", d.use_depth_stream.to_string()),
        ("decoder.use_mff", d.use_mff.to_string()),
        ("decoder.use_mls", d.use_mls.to_string()),
    ]
}

/// SHA-256 of the canonical `encoder.*` / `decoder.*` lines: two models
/// with equal digests have identical parameter tables.
pub fn model_digest(m: &ModelConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    for (k, v) in model_entries(m) {
        h.update(format!("{k} = {v}\n").as_bytes());
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.max_lr_other = 0.1 + 0.2;
        cfg.train.seed = u64::MAX;
        cfg.data.shapes = vec![ShapeKind::Blob, ShapeKind::Disk];
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let text = "# tiny run\n\nencoder.embed_dim = 8  # narrow\ntrain.epochs=3\ndecoder.ablation = c\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.encoder.embed_dim, 8);
        assert_eq!(cfg.train.epochs, 3);
        assert!(cfg.model.decoder.use_depth_stream && !cfg.model.decoder.use_mff);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail_with_offsets() {
        match RunConfig::parse("train.epochs = 2\ntrain.epoch = 3\n") {
            Err(Error::Parse { offset, msg, .. }) => {
                assert_eq!(offset, 17);
                assert!(msg.contains("train.epoch"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("encoder.depths = 1,2\n").is_err());
        assert!(RunConfig::parse("encoder.rel_pos_bias = yes\n").is_err());
        assert!(RunConfig::parse("just words\n").is_err());
    }

    #[test]
    fn model_digest_tracks_model_keys_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs += 1;
        assert_eq!(model_digest(&a.model), model_digest(&b.model));
        b.model.decoder.use_mls = false;
        assert_ne!(model_digest(&a.model), model_digest(&b.model));
    }
}
