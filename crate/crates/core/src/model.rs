//! The full grounding network: encoders, per-modality interaction, fusion and regression.

use rand::Rng;

use crate::contrastive::{contrastive_loss, pool_gt_segment, total_contrastive, ActionLabel, ContrastiveBatch, ProjectionHead};
use crate::encoders::{ModalityEncoder, QueryTokens, RawSegmentFeatures, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{CoAttentionOutputs, Fusion, FusionConfig, FusionResult};
use crate::grounding::{loss_dqa, loss_reg, loss_tag, total_loss, DqaConfig, GroundTruthMask, LossFlags, LossTerms, RegHead, RegOutput, TimeInterval};
use crate::lgi::{positional_encoding, Lgi};
use crate::modality::Modality;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub fusion_layers: usize,
    pub query_steps: usize,
    /// Input width per modality, indexed by [`Modality::index`].
    pub feature_dims: [usize; 3],
    pub streams: Vec<Modality>,
    pub common: Modality,
    pub transformer: bool,
    pub share_common_block: bool,
    pub learnable_weights: bool,
    pub proj_dim: usize,
    pub temperature: f64,
    pub dqa: DqaConfig,
    pub losses: LossFlags,
}

impl ModelConfig {
    /// The three-stream model with RGB as the common modality.
    pub fn full(vocab_size: usize, dim: usize, feature_dims: [usize; 3]) -> Self {
        Self {
            vocab_size,
            word_dim: dim,
            dim,
            heads: 4,
            ffn_dim: 2 * dim,
            fusion_layers: 1,
            query_steps: 3,
            feature_dims,
            streams: Modality::ALL.to_vec(),
            common: Modality::Rgb,
            transformer: true,
            share_common_block: true,
            learnable_weights: true,
            proj_dim: dim,
            temperature: 0.1,
            dqa: DqaConfig::default(),
            losses: LossFlags::default(),
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            layers: self.fusion_layers,
            streams: self.streams.clone(),
            common: self.common,
            transformer: self.transformer,
            share_common_block: self.share_common_block,
            learnable_weights: self.learnable_weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.streams.is_empty() {
            return Err(Error::Config("at least one stream is required".into()));
        }
        let mut seen = self.streams.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.streams.len() {
            return Err(Error::Config("streams must not repeat".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.vocab_size == 0 || self.word_dim == 0 || self.query_steps == 0 {
            return Err(Error::Config("vocabulary, word size and query steps must be positive".into()));
        }
        Ok(())
    }
}

/// One query with its video's features for the active streams.
#[derive(Clone, Debug)]
pub struct Sample<S> {
    pub video_id: String,
    pub tokens: QueryTokens,
    pub features: Vec<RawSegmentFeatures<S>>,
    pub interval: TimeInterval,
    pub label: ActionLabel,
}

impl<S: Scalar> Sample<S> {
    pub fn segments(&self) -> usize {
        self.features.first().map_or(0, |f| f.segments())
    }
}

/// Intermediate tape values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `M` per active stream.
    pub modal: Vec<(Modality, Var)>,
    /// Query attention matrix per active stream.
    pub query_attention: Vec<Var>,
    pub co_attention: CoAttentionOutputs,
    pub fusion: FusionResult,
    pub reg: RegOutput,
}

/// Pooled ground-truth features of sampled videos, stacked per active stream.
#[derive(Clone, Debug)]
pub struct ContrastiveTargets<S> {
    pub positives: Vec<Tensor<S>>,
    pub negatives: Vec<Tensor<S>>,
}

/// Scalar loss components of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub reg: f64,
    pub tag: f64,
    pub dqa: f64,
    pub cl: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Drft {
    pub config: ModelConfig,
    text: TextEncoder,
    encoders: Vec<ModalityEncoder>,
    lgis: Vec<Lgi>,
    pub fusion: Fusion,
    reg: RegHead,
    heads: Vec<ProjectionHead>,
}

impl Drft {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let text = TextEncoder::new(store, "text", config.vocab_size, config.word_dim, config.dim, rng)?;
        let mut encoders = Vec::new();
        let mut lgis = Vec::new();
        let mut heads = Vec::new();
        for &m in &config.streams {
            encoders.push(ModalityEncoder::new(store, m, config.feature_dims[m.index()], config.dim, rng)?);
            lgis.push(Lgi::new(store, m, config.dim, config.query_steps, rng)?);
        }
        let fusion = Fusion::new(store, config.fusion(), rng)?;
        let reg = RegHead::new(store, config.dim, rng)?;
        if config.losses.contrastive {
            for &m in &config.streams {
                heads.push(ProjectionHead::new(store, m, config.dim, config.proj_dim, rng)?);
            }
        }
        Ok(Self {
            config,
            text,
            encoders,
            lgis,
            fusion,
            reg,
            heads,
        })
    }

    fn stream_features<'a, S: Scalar>(&self, sample: &'a Sample<S>) -> Result<Vec<&'a RawSegmentFeatures<S>>> {
        self.config
            .streams
            .iter()
            .map(|&m| {
                sample
                    .features
                    .iter()
                    .find(|f| f.modality == m)
                    .ok_or_else(|| Error::Contract(format!("{}: no {m} features", sample.video_id)))
            })
            .collect()
    }

    /// Query-conditioned features `M` and query attention for every stream.
    pub fn modal_features<S: Scalar>(&self, t: &mut Tape<'_, S>, sample: &Sample<S>) -> Result<(Vec<(Modality, Var)>, Vec<Var>)> {
        let q = self.text.encode(t, &sample.tokens)?;
        let feats = self.stream_features(sample)?;
        let segments = sample.segments();
        let pe = t.constant(positional_encoding(segments, self.config.dim))?;
        let mut modal = Vec::with_capacity(feats.len());
        let mut attention = Vec::with_capacity(feats.len());
        for ((enc, lgi), f) in self.encoders.iter().zip(&self.lgis).zip(feats) {
            if f.segments() != segments {
                return Err(Error::shape("modal_features", &[segments], &[f.segments()]));
            }
            let x = enc.encode(t, f)?;
            let x = t.add(x, pe)?;
            let (m, qa) = lgi.forward(t, x, &q)?;
            modal.push((enc.modality, m));
            attention.push(qa.attention);
        }
        Ok((modal, attention))
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<'_, S>, sample: &Sample<S>) -> Result<ForwardOutput> {
        let (modal, query_attention) = self.modal_features(t, sample)?;
        let (co_attention, fusion) = self.fusion.forward(t, &modal)?;
        let reg = self.reg.forward(t, fusion.fused)?;
        Ok(ForwardOutput {
            modal,
            query_attention,
            co_attention,
            fusion,
            reg,
        })
    }

    /// Predicted interval and per-feature fusion weights.
    pub fn predict<S: Scalar>(&self, store: &ParamStore<S>, sample: &Sample<S>) -> Result<(TimeInterval, Vec<f64>)> {
        let mut t = Tape::new(store);
        let out = self.forward(&mut t, sample)?;
        let weights = t.value(out.fusion.weights).data().iter().map(|w| w.as_f64()).collect();
        Ok((out.reg.interval(&t), weights))
    }

    /// Ground-truth-pooled `M` per stream, evaluated off the training tape.
    pub fn pooled_features<S: Scalar>(&self, store: &ParamStore<S>, sample: &Sample<S>) -> Result<Vec<Tensor<S>>> {
        let mut t = Tape::new(store);
        let (modal, _) = self.modal_features(&mut t, sample)?;
        modal
            .into_iter()
            .map(|(_, m)| {
                let p = pool_gt_segment(&mut t, m, &sample.interval)?;
                Ok(t.value(p).clone())
            })
            .collect()
    }

    /// Stacks the pooled features of sampled positive and negative videos.
    pub fn contrastive_targets<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        positives: &[&Sample<S>],
        negatives: &[&Sample<S>],
    ) -> Result<ContrastiveTargets<S>> {
        let stack = |samples: &[&Sample<S>]| -> Result<Vec<Tensor<S>>> {
            let pooled = samples.iter().map(|s| self.pooled_features(store, s)).collect::<Result<Vec<_>>>()?;
            (0..self.config.streams.len())
                .map(|k| {
                    let rows: Vec<Vec<S>> = pooled.iter().map(|p| p[k].data().to_vec()).collect();
                    Ok(Tensor::from_rows(&rows))
                })
                .collect()
        };
        Ok(ContrastiveTargets {
            positives: stack(positives)?,
            negatives: stack(negatives)?,
        })
    }

    /// Total objective for one sample; `targets` is `None` when no contrastive batch was drawn.
    pub fn loss<S: Scalar>(
        &self,
        t: &mut Tape<'_, S>,
        sample: &Sample<S>,
        targets: Option<&ContrastiveTargets<S>>,
    ) -> Result<(Var, LossValues, ForwardOutput)> {
        let out = self.forward(t, sample)?;
        let reg = loss_reg(t, out.reg.endpoints, &sample.interval)?;
        let mask = GroundTruthMask::from_interval(&sample.interval, sample.segments());
        let tag = loss_tag(t, out.reg.attention, &mask)?;
        let mut dqa = None;
        for &a in &out.query_attention {
            let l = loss_dqa(t, a, &self.config.dqa)?;
            dqa = Some(match dqa {
                Some(d) => t.add(d, l)?,
                None => l,
            });
        }
        let dqa = dqa.expect("at least one stream");
        let cl = match (targets, self.config.losses.contrastive) {
            (Some(targets), true) => {
                let mut per = Vec::with_capacity(self.heads.len());
                for (k, head) in self.heads.iter().enumerate() {
                    let anchor = pool_gt_segment(t, out.modal[k].1, &sample.interval)?;
                    let batch = ContrastiveBatch {
                        anchor,
                        positives: t.constant(targets.positives[k].clone())?,
                        negatives: t.constant(targets.negatives[k].clone())?,
                        temperature: self.config.temperature,
                    };
                    per.push(Some(contrastive_loss(t, &batch, head)?));
                }
                total_contrastive(t, &per)?
            }
            _ => None,
        };
        let terms = LossTerms { reg, tag, dqa, cl };
        let total = total_loss(t, &terms, &self.config.losses)?;
        let f = |v: Var, on: bool| if on { t.scalar(v).as_f64() } else { 0.0 };
        let values = LossValues {
            reg: f(reg, self.config.losses.reg),
            tag: f(tag, self.config.losses.tag),
            dqa: f(dqa, self.config.losses.dqa),
            cl: cl.map_or(0.0, |c| f(c, self.config.losses.contrastive)),
            total: t.scalar(total).as_f64(),
        };
        Ok((total, values, out))
    }
}
