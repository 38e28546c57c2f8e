//! Inter-modal learning: co-attentional transformer blocks and dynamic fusion.
//!
//! The common modality (RGB by default) is paired with each other stream.
//! For a pair `(other, common)` two features are produced:
//!
//! * `other→common`: common-modality queries attending to the other stream
//!   (computed by the common block, which is shared across pairs);
//! * `common→other`: the other stream's queries attending to the common one.
//!
//! With RGB common and all three streams the fused features come in the
//! order `flow→rgb, rgb→flow, depth→rgb, rgb→depth`.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Multi-head attention with residual, layer normalization and a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub heads: usize,
    pub dim: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

/// Pre-residual attention output and one `T×T` attention map per head.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub head_attention: Vec<Var>,
}

impl CrossAttentionBlock {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("hidden size {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            dim,
            q: Linear::new(store, &format!("{name}.q_proj"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k_proj"), dim, dim, false, rng)?,
            v: Linear::new(store, &format!("{name}.v_proj"), dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.out_proj"), dim, dim, true, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ffn_dim, true, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn_dim, dim, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    /// Scaled dot-product attention, queries from `queries_from`, keys and values from `keys_values_from`.
    pub fn attend<S: Scalar>(&self, t: &mut Tape<'_, S>, queries_from: Var, keys_values_from: Var) -> Result<AttentionOutput> {
        let (tq, c) = t.shape(queries_from);
        let (tk, ck) = t.shape(keys_values_from);
        if c != self.dim || ck != self.dim {
            return Err(Error::shape("multi_head_cross_attention", &[tq, c], &[tk, ck]));
        }
        let q = self.q.forward(t, queries_from)?;
        let k = self.k.forward(t, keys_values_from)?;
        let v = self.v.forward(t, keys_values_from)?;
        let dh = self.dim / self.heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * dh, dh)?;
            let kh = t.slice_cols(k, h * dh, dh)?;
            let vh = t.slice_cols(v, h * dh, dh)?;
            let kt = t.transpose(kh);
            let scores = t.matmul(qh, kt)?;
            let scores = t.scale(scores, scale);
            let attn = t.softmax_rows(scores)?;
            heads.push(t.matmul(attn, vh)?);
            maps.push(attn);
        }
        let joined = if self.heads == 1 { heads[0] } else { t.concat_cols(&heads)? };
        Ok(AttentionOutput {
            output: self.o.forward(t, joined)?,
            head_attention: maps,
        })
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<'_, S>, queries_from: Var, keys_values_from: Var) -> Result<Var> {
        let a = self.attend(t, queries_from, keys_values_from)?;
        let x = t.add(queries_from, a.output)?;
        let x = self.norm1.forward(t, x)?;
        let h = self.ff1.forward(t, x)?;
        let h = t.relu(h);
        let h = self.ff2.forward(t, h)?;
        let y = t.add(x, h)?;
        self.norm2.forward(t, y)
    }
}

/// Names one fused feature: `attended` queries conditioned on `conditioned_on`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureTag {
    pub conditioned_on: Modality,
    pub attended: Modality,
}

impl fmt::Display for FeatureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.conditioned_on, self.attended)
    }
}

/// The conditioned features in fusion order.
#[derive(Clone, Debug)]
pub struct CoAttentionOutputs {
    pub features: Vec<(FeatureTag, Var)>,
}

impl CoAttentionOutputs {
    pub fn get(&self, conditioned_on: Modality, attended: Modality) -> Option<Var> {
        self.features
            .iter()
            .find(|(tag, _)| tag.conditioned_on == conditioned_on && tag.attended == attended)
            .map(|&(_, v)| v)
    }

    pub fn tags(&self) -> Vec<FeatureTag> {
        self.features.iter().map(|(t, _)| *t).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FusionConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    /// Active streams; fusion applies when there are two or three.
    pub streams: Vec<Modality>,
    pub common: Modality,
    pub transformer: bool,
    pub share_common_block: bool,
    pub learnable_weights: bool,
}

/// One co-attention layer: the common block(s) plus one block per other stream.
#[derive(Clone, Debug)]
struct CoLayer {
    common: Vec<CrossAttentionBlock>,
    others: Vec<CrossAttentionBlock>,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    others: Vec<Modality>,
    layers: Vec<CoLayer>,
    weight_fc: Vec<Linear>,
}

/// Fused feature and the normalized per-feature weights (`1 × K`).
#[derive(Clone, Copy, Debug)]
pub struct FusionResult {
    pub fused: Var,
    pub weights: Var,
}

impl Fusion {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, config: FusionConfig, rng: &mut R) -> Result<Self> {
        if config.streams.is_empty() {
            return Err(Error::Config("no input streams".into()));
        }
        let mut others: Vec<Modality> = Vec::new();
        if config.streams.len() > 1 {
            if !config.streams.contains(&config.common) {
                return Err(Error::Config(format!(
                    "common modality {} is not one of the streams",
                    config.common
                )));
            }
            // Flow pairs before depth pairs; rgb first when it is not common.
            for m in [Modality::Rgb, Modality::Flow, Modality::Depth] {
                if m != config.common && config.streams.contains(&m) {
                    others.push(m);
                }
            }
        }
        let mut layers = Vec::new();
        if config.transformer && !others.is_empty() {
            for l in 0..config.layers {
                let common_blocks = if config.share_common_block {
                    vec![CrossAttentionBlock::new(
                        store,
                        &format!("fusion.layer{l}.{}_block", config.common),
                        config.dim,
                        config.heads,
                        config.ffn_dim,
                        rng,
                    )?]
                } else {
                    others
                        .iter()
                        .map(|o| {
                            CrossAttentionBlock::new(
                                store,
                                &format!("fusion.layer{l}.{}_block_{o}", config.common),
                                config.dim,
                                config.heads,
                                config.ffn_dim,
                                rng,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?
                };
                let other_blocks = others
                    .iter()
                    .map(|o| {
                        CrossAttentionBlock::new(
                            store,
                            &format!("fusion.layer{l}.{o}_block"),
                            config.dim,
                            config.heads,
                            config.ffn_dim,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                layers.push(CoLayer {
                    common: common_blocks,
                    others: other_blocks,
                });
            }
        }
        let mut weight_fc = Vec::new();
        if config.learnable_weights && !others.is_empty() {
            for k in 0..2 * others.len() {
                weight_fc.push(Linear::zeroed(store, &format!("fusion.weight_fc{k}"), config.dim, 1)?);
            }
        }
        Ok(Self {
            config,
            others,
            layers,
            weight_fc,
        })
    }

    /// Number of fused features (1 when fusion is bypassed).
    pub fn num_features(&self) -> usize {
        (2 * self.others.len()).max(1)
    }

    pub fn feature_tags(&self) -> Vec<FeatureTag> {
        if self.others.is_empty() {
            let m = self.config.streams[0];
            return vec![FeatureTag {
                conditioned_on: m,
                attended: m,
            }];
        }
        let x = self.config.common;
        self.others
            .iter()
            .flat_map(|&y| {
                [
                    FeatureTag {
                        conditioned_on: y,
                        attended: x,
                    },
                    FeatureTag {
                        conditioned_on: x,
                        attended: y,
                    },
                ]
            })
            .collect()
    }

    /// Co-attention over the common modality paired with each other stream.
    ///
    /// `modal` gives `M` for every active stream.
    pub fn co_attend<S: Scalar>(&self, t: &mut Tape<'_, S>, modal: &[(Modality, Var)]) -> Result<CoAttentionOutputs> {
        let get = |m: Modality| {
            modal
                .iter()
                .find(|(k, _)| *k == m)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::Contract(format!("missing {m} features")))
        };
        let first = t.shape(modal.first().ok_or_else(|| Error::Contract("no modal features".into()))?.1);
        for &(_, v) in modal {
            if t.shape(v) != first {
                return Err(Error::shape("co_attend", &[first.0, first.1], &[t.shape(v).0, t.shape(v).1]));
            }
        }
        let tags = self.feature_tags();
        if self.others.is_empty() {
            let v = get(self.config.streams[0])?;
            return Ok(CoAttentionOutputs {
                features: vec![(tags[0], v)],
            });
        }
        let common = get(self.config.common)?;
        let mut features = Vec::with_capacity(tags.len());
        for (p, &other) in self.others.iter().enumerate() {
            let mut x = common;
            let mut y = get(other)?;
            for layer in &self.layers {
                let cb = if self.config.share_common_block { &layer.common[0] } else { &layer.common[p] };
                let x_next = cb.forward(t, x, y)?;
                let y_next = layer.others[p].forward(t, y, x)?;
                x = x_next;
                y = y_next;
            }
            features.push((tags[2 * p], x));
            features.push((tags[2 * p + 1], y));
        }
        Ok(CoAttentionOutputs { features })
    }

    /// Weights each feature by a softmax over per-feature scalar logits
    /// (affine map of the time-pooled feature) and sums.
    pub fn dynamic_fuse<S: Scalar>(&self, t: &mut Tape<'_, S>, outputs: &CoAttentionOutputs) -> Result<FusionResult> {
        let k = outputs.features.len();
        if k == 0 {
            return Err(Error::Contract("nothing to fuse".into()));
        }
        let weights = if self.weight_fc.is_empty() {
            t.constant(crate::tensor::Tensor::full(&[1, k], S::one() / S::of(k as f64)))?
        } else {
            if self.weight_fc.len() != k {
                return Err(Error::Contract(format!("{} weight layers for {k} features", self.weight_fc.len())));
            }
            let mut logits = Vec::with_capacity(k);
            for (fc, &(_, f)) in self.weight_fc.iter().zip(&outputs.features) {
                let pooled = t.mean_rows(f);
                logits.push(fc.forward(t, pooled)?);
            }
            let logits = t.concat_cols(&logits)?;
            t.softmax_rows(logits)?
        };
        let fused = weighted_sum(t, outputs, weights)?;
        Ok(FusionResult { fused, weights })
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<'_, S>, modal: &[(Modality, Var)]) -> Result<(CoAttentionOutputs, FusionResult)> {
        let co = self.co_attend(t, modal)?;
        let fr = self.dynamic_fuse(t, &co)?;
        Ok((co, fr))
    }
}

/// `Σ_k w_k · feature_k` for a `1 × K` weight row.
pub fn weighted_sum<S: Scalar>(t: &mut Tape<'_, S>, outputs: &CoAttentionOutputs, weights: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &(_, f)) in outputs.features.iter().enumerate() {
        let w = t.slice_cols(weights, i, 1)?;
        let term = t.mul(f, w)?;
        acc = Some(match acc {
            Some(a) => t.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Contract("nothing to fuse".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn config() -> FusionConfig {
        FusionConfig {
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            layers: 1,
            streams: vec![Modality::Rgb, Modality::Flow, Modality::Depth],
            common: Modality::Rgb,
            transformer: true,
            share_common_block: true,
            learnable_weights: true,
        }
    }

    fn build(cfg: FusionConfig) -> (ParamStore<f64>, Fusion) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = Fusion::new(&mut store, cfg, &mut rng).unwrap();
        (store, f)
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            CrossAttentionBlock::new(&mut store, "b", 10, 3, 8, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = CrossAttentionBlock::new(&mut store, "b", 8, 2, 16, &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let q = t.constant(random(&mut rng, 5, 8)).unwrap();
        let kv = t.constant(random(&mut rng, 5, 8)).unwrap();
        let out = block.attend(&mut t, q, kv).unwrap();
        for &m in &out.head_attention {
            for r in 0..5 {
                assert!((t.value(m).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_the_projected_value_row() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = CrossAttentionBlock::new(&mut store, "b", 8, 2, 16, &mut rng).unwrap();
        let row = random(&mut rng, 1, 8);
        let kv = Tensor::from_fn(4, 8, |_, j| row.at(0, j));
        let mut t = Tape::new(&store);
        let kv = t.constant(kv).unwrap();
        let r = t.constant(row).unwrap();
        let v = block.v.forward(&mut t, r).unwrap();
        let expect = block.o.forward(&mut t, v).unwrap();
        for _ in 0..3 {
            let q = t.constant(random(&mut rng, 4, 8)).unwrap();
            let out = block.attend(&mut t, q, kv).unwrap();
            for i in 0..4 {
                for j in 0..8 {
                    assert!((t.value(out.output).at(i, j) - t.value(expect).at(0, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn feature_order_matches_weight_table() {
        let (_, f) = build(config());
        let names: Vec<String> = f.feature_tags().iter().map(ToString::to_string).collect();
        assert_eq!(names, ["flow->rgb", "rgb->flow", "depth->rgb", "rgb->depth"]);
        let (_, f) = build(FusionConfig {
            common: Modality::Flow,
            ..config()
        });
        let names: Vec<String> = f.feature_tags().iter().map(ToString::to_string).collect();
        assert_eq!(names, ["rgb->flow", "flow->rgb", "depth->flow", "flow->depth"]);
    }

    #[test]
    fn unsharing_adds_exactly_one_block() {
        let (shared, _) = build(config());
        let (unshared, _) = build(FusionConfig {
            share_common_block: false,
            ..config()
        });
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        CrossAttentionBlock::new(&mut store, "b", 8, 2, 16, &mut rng).unwrap();
        assert_eq!(unshared.num_scalars(), shared.num_scalars() + store.num_scalars());
        let blocks = |s: &ParamStore<f64>| {
            s.iter()
                .filter(|(_, p)| p.name.starts_with("fusion.layer0.rgb_block") && p.name.ends_with("q_proj.weight"))
                .count()
        };
        assert_eq!(blocks(&shared), 1);
        assert_eq!(blocks(&unshared), 2);
    }

    #[test]
    fn identical_depth_and_flow_give_identical_shared_outputs() {
        let (store, f) = build(config());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random(&mut rng, 4, 8);
        let x = random(&mut rng, 4, 8);
        let mut t = Tape::new(&store);
        let (r, d, fl) = (t.constant(r).unwrap(), t.constant(x.clone()).unwrap(), t.constant(x).unwrap());
        let co = f
            .co_attend(&mut t, &[(Modality::Rgb, r), (Modality::Flow, fl), (Modality::Depth, d)])
            .unwrap();
        let a = co.get(Modality::Depth, Modality::Rgb).unwrap();
        let b = co.get(Modality::Flow, Modality::Rgb).unwrap();
        assert_eq!(t.value(a).data(), t.value(b).data());
        assert_eq!(co.features.len(), 4);
        for &(_, v) in &co.features {
            assert_eq!(t.shape(v), (4, 8));
        }
    }

    #[test]
    fn mismatched_segment_counts_fail() {
        let (store, f) = build(config());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new(&store);
        let r = t.constant(random(&mut rng, 4, 8)).unwrap();
        let d = t.constant(random(&mut rng, 5, 8)).unwrap();
        let fl = t.constant(random(&mut rng, 4, 8)).unwrap();
        assert!(f
            .co_attend(&mut t, &[(Modality::Rgb, r), (Modality::Flow, fl), (Modality::Depth, d)])
            .is_err());
    }

    #[test]
    fn without_transformer_features_pass_through() {
        let (store, f) = build(FusionConfig {
            transformer: false,
            ..config()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new(&store);
        let r = t.constant(random(&mut rng, 4, 8)).unwrap();
        let d = t.constant(random(&mut rng, 4, 8)).unwrap();
        let fl = t.constant(random(&mut rng, 4, 8)).unwrap();
        let co = f
            .co_attend(&mut t, &[(Modality::Rgb, r), (Modality::Flow, fl), (Modality::Depth, d)])
            .unwrap();
        let vars: Vec<Var> = co.features.iter().map(|&(_, v)| v).collect();
        assert_eq!(vars, [r, fl, r, d]);
    }

    #[test]
    fn fixed_weights_are_a_quarter_each() {
        let (store, f) = build(FusionConfig {
            learnable_weights: false,
            ..config()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new(&store);
        let modal: Vec<(Modality, Var)> = Modality::ALL
            .iter()
            .map(|&m| (m, t.constant(random(&mut rng, 4, 8)).unwrap()))
            .collect();
        let (_, fr) = f.forward(&mut t, &modal).unwrap();
        assert_eq!(t.value(fr.weights).data(), &[0.25; 4]);
    }

    #[test]
    fn equal_logits_give_equal_weights() {
        let (mut store, f) = build(config());
        for fc in &f.weight_fc {
            let w = fc.weight;
            store.get_mut(w).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new(&store);
        let modal: Vec<(Modality, Var)> = Modality::ALL
            .iter()
            .map(|&m| (m, t.constant(random(&mut rng, 4, 8)).unwrap()))
            .collect();
        let (_, fr) = f.forward(&mut t, &modal).unwrap();
        assert_eq!(t.value(fr.weights).data(), &[0.25; 4]);
    }

    #[test]
    fn dominant_logit_selects_its_feature() {
        let (mut store, f) = build(config());
        for (k, fc) in f.weight_fc.iter().enumerate() {
            let w = fc.weight;
            store.get_mut(w).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            let b = fc.bias.unwrap();
            store.get_mut(b).value.data_mut()[0] = if k == 2 { 20.0 } else { 0.0 };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new(&store);
        let modal: Vec<(Modality, Var)> = Modality::ALL
            .iter()
            .map(|&m| (m, t.constant(random(&mut rng, 4, 8)).unwrap()))
            .collect();
        let (co, fr) = f.forward(&mut t, &modal).unwrap();
        let chosen = t.value(co.features[2].1).clone();
        for (a, b) in t.value(fr.fused).data().iter().zip(chosen.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn throwing_pillow_weight_row_sums_to_one() {
        let w = [0.312, 0.379, 0.194, 0.115];
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
