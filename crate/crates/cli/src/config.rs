//! Flat `key = value` run configuration with dotted keys.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, and the
//! defaults describe the full three-stream model on the default synthetic set.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use drft::data::{CategoryGroup, OovPolicy, SyntheticConfig};
use drft::grounding::{DqaConfig, LossFlags};
use drft::model::ModelConfig;
use drft::train::TrainConfig;
use drft::{AdamConfig, Modality};

/// Environment variable that overrides `output.dir`.
pub const OUTPUT_DIR_ENV: &str = "DRFT_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data_dir: PathBuf,
    pub train_split: String,
    pub test_split: String,
    pub oov: OovPolicy,
    pub synth: SyntheticConfig,
    pub dim: usize,
    pub word_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub query_steps: usize,
    pub streams: Vec<Modality>,
    pub fusion_layers: usize,
    pub common: Modality,
    pub transformer: bool,
    pub share_common_block: bool,
    pub learnable_weights: bool,
    pub losses: LossFlags,
    pub dqa_lambda: f64,
    pub temperature: f64,
    pub proj_dim: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data_dir: PathBuf::from("data/synthetic"),
            train_split: "train".into(),
            test_split: "test".into(),
            oov: OovPolicy::Error,
            synth: SyntheticConfig::default(),
            dim: 32,
            word_dim: 32,
            heads: 4,
            ffn_dim: 64,
            query_steps: 3,
            streams: Modality::ALL.to_vec(),
            fusion_layers: 1,
            common: Modality::Rgb,
            transformer: true,
            share_common_block: true,
            learnable_weights: true,
            losses: LossFlags::default(),
            dqa_lambda: DqaConfig::default().lambda,
            temperature: 0.1,
            proj_dim: 32,
            n_pos: train.n_pos,
            n_neg: train.n_neg,
            lr: train.adam.lr,
            epochs: train.epochs,
            batch_size: train.batch_size,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => bail!("{key}: expected true or false, got {value:?}"),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            cfg.set(key.trim(), value.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output.dir" => self.output_dir = v.into(),
            "data.dir" => self.data_dir = v.into(),
            "data.train_split" => self.train_split = v.into(),
            "data.test_split" => self.test_split = v.into(),
            "data.oov" => {
                self.oov = match v {
                    "error" => OovPolicy::Error,
                    "unk" => OovPolicy::Unk,
                    _ => bail!("{key}: expected error or unk"),
                }
            }
            "synth.num_videos" => self.synth.num_videos = parse(key, v)?,
            "synth.num_test_videos" => self.synth.num_test_videos = parse(key, v)?,
            "synth.segments" => self.synth.segments = parse(key, v)?,
            "synth.feature_dims" => {
                let d: Vec<usize> = parse_list(key, v)?;
                self.synth.feature_dims = match d[..] {
                    [x] => [x; 3],
                    [r, f, dd] => [r, f, dd],
                    _ => bail!("{key}: give one width or rgb,flow,depth widths"),
                };
            }
            "synth.num_categories" => self.synth.num_categories = parse(key, v)?,
            "synth.groups" => self.synth.groups = parse_list::<CategoryGroup>(key, v)?,
            "synth.strength" => self.synth.strength = parse(key, v)?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            "synth.rgb_copy" => self.synth.rgb_copy = parse(key, v)?,
            "synth.min_fraction" => self.synth.min_fraction = parse(key, v)?,
            "synth.max_fraction" => self.synth.max_fraction = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "model.dim" => self.dim = parse(key, v)?,
            "model.word_dim" => self.word_dim = parse(key, v)?,
            "model.heads" | "fusion.heads" => self.heads = parse(key, v)?,
            "model.ffn_dim" => self.ffn_dim = parse(key, v)?,
            "model.query_steps" => self.query_steps = parse(key, v)?,
            "model.streams" => self.streams = parse_list(key, v)?,
            "fusion.layers" => self.fusion_layers = parse(key, v)?,
            "fusion.common" => self.common = parse(key, v)?,
            "fusion.transformer" => self.transformer = parse_bool(key, v)?,
            "fusion.share_common_block" => self.share_common_block = parse_bool(key, v)?,
            "fusion.learnable_weights" => self.learnable_weights = parse_bool(key, v)?,
            "loss.reg" => self.losses.reg = parse_bool(key, v)?,
            "loss.tag" => self.losses.tag = parse_bool(key, v)?,
            "loss.dqa" => self.losses.dqa = parse_bool(key, v)?,
            "loss.contrastive" => self.losses.contrastive = parse_bool(key, v)?,
            "loss.dqa_lambda" => self.dqa_lambda = parse(key, v)?,
            "contrastive.temperature" => self.temperature = parse(key, v)?,
            "contrastive.proj_dim" => self.proj_dim = parse(key, v)?,
            "contrastive.n_pos" => self.n_pos = parse(key, v)?,
            "contrastive.n_neg" => self.n_neg = parse(key, v)?,
            "optim.lr" => self.lr = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            _ => bail!("unknown key {key:?}"),
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let groups: Vec<&str> = s.groups.iter().map(|g| g.name()).collect();
        let oov = match self.oov {
            OovPolicy::Error => "error",
            OovPolicy::Unk => "unk",
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        kv("data.dir", self.data_dir.display().to_string());
        kv("data.train_split", self.train_split.clone());
        kv("data.test_split", self.test_split.clone());
        kv("data.oov", oov.into());
        kv("synth.num_videos", s.num_videos.to_string());
        kv("synth.num_test_videos", s.num_test_videos.to_string());
        kv("synth.segments", s.segments.to_string());
        kv("synth.feature_dims", join(&s.feature_dims));
        kv("synth.num_categories", s.num_categories.to_string());
        kv("synth.groups", groups.join(","));
        kv("synth.strength", s.strength.to_string());
        kv("synth.noise", s.noise.to_string());
        kv("synth.rgb_copy", s.rgb_copy.to_string());
        kv("synth.min_fraction", s.min_fraction.to_string());
        kv("synth.max_fraction", s.max_fraction.to_string());
        kv("synth.seed", s.seed.to_string());
        kv("model.dim", self.dim.to_string());
        kv("model.word_dim", self.word_dim.to_string());
        kv("model.heads", self.heads.to_string());
        kv("model.ffn_dim", self.ffn_dim.to_string());
        kv("model.query_steps", self.query_steps.to_string());
        kv("model.streams", join(&self.streams));
        kv("fusion.layers", self.fusion_layers.to_string());
        kv("fusion.common", self.common.to_string());
        kv("fusion.transformer", self.transformer.to_string());
        kv("fusion.share_common_block", self.share_common_block.to_string());
        kv("fusion.learnable_weights", self.learnable_weights.to_string());
        kv("loss.reg", self.losses.reg.to_string());
        kv("loss.tag", self.losses.tag.to_string());
        kv("loss.dqa", self.losses.dqa.to_string());
        kv("loss.contrastive", self.losses.contrastive.to_string());
        kv("loss.dqa_lambda", self.dqa_lambda.to_string());
        kv("contrastive.temperature", self.temperature.to_string());
        kv("contrastive.proj_dim", self.proj_dim.to_string());
        kv("contrastive.n_pos", self.n_pos.to_string());
        kv("contrastive.n_neg", self.n_neg.to_string());
        kv("optim.lr", self.lr.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        out
    }

    /// `output.dir`, unless the environment overrides it.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    /// Model settings for a dataset with the given vocabulary and input widths.
    pub fn model_config(&self, vocab_size: usize, feature_dims: [usize; 3]) -> Result<ModelConfig> {
        let mut m = ModelConfig::full(vocab_size, self.dim, feature_dims);
        m.word_dim = self.word_dim;
        m.heads = self.heads;
        m.ffn_dim = self.ffn_dim;
        m.fusion_layers = self.fusion_layers;
        m.query_steps = self.query_steps;
        m.streams = self.streams.clone();
        m.common = self.common;
        m.transformer = self.transformer;
        m.share_common_block = self.share_common_block;
        m.learnable_weights = self.learnable_weights;
        m.proj_dim = self.proj_dim;
        m.temperature = self.temperature;
        m.dqa = DqaConfig::new(self.dqa_lambda)?;
        m.losses = self.losses;
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed: self.seed,
            n_pos: self.n_pos,
            n_neg: self.n_neg,
        }
    }
}
