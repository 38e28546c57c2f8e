//! Query-conditioned segment features.
//!
//! Sequential query attention splits the sentence into `S` phrase features;
//! each phrase modulates the segment features elementwise (local), a
//! temporal self-attention layer mixes context across segments (global),
//! and the per-phrase results are averaged.

use rand::Rng;

use crate::encoders::EncodedQuery;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Sinusoidal position code, `T × c`, added to segment features before interaction.
pub fn positional_encoding<S: Scalar>(segments: usize, dim: usize) -> Tensor<S> {
    Tensor::from_fn(segments, dim, |t, j| {
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        let a = t as f64 * freq;
        S::of(if j % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Phrase features (`S × c`) and the `N × S` query attention matrix.
#[derive(Clone, Copy, Debug)]
pub struct QueryAttentionOutput {
    pub phrases: Var,
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct SequentialQueryAttention {
    sentence_proj: Vec<Linear>,
    prev_proj: Linear,
    word_proj: Linear,
    score: Linear,
    dim: usize,
}

impl SequentialQueryAttention {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, dim: usize, steps: usize, rng: &mut R) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Contract("sequential query attention needs at least one step".into()));
        }
        let sentence_proj = (0..steps)
            .map(|s| Linear::new(store, &format!("{name}.step{s}.sentence_proj"), dim, dim, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sentence_proj,
            prev_proj: Linear::new(store, &format!("{name}.prev_proj"), dim, dim, false, rng)?,
            word_proj: Linear::new(store, &format!("{name}.word_proj"), dim, dim, false, rng)?,
            score: Linear::new(store, &format!("{name}.score"), dim, 1, false, rng)?,
            dim,
        })
    }

    pub fn steps(&self) -> usize {
        self.sentence_proj.len()
    }

    /// Step `s` attends over words guided by the sentence and the phrase of step `s−1`.
    pub fn forward<S: Scalar>(&self, t: &mut Tape<'_, S>, q: &EncodedQuery, steps: usize) -> Result<QueryAttentionOutput> {
        if steps < 1 || steps > self.steps() {
            return Err(Error::Contract(format!(
                "requested {steps} attention steps, module has {}",
                self.steps()
            )));
        }
        let words = q.word_features;
        let keys = self.word_proj.forward(t, words)?;
        let mut prev = t.constant(Tensor::zeros(&[1, self.dim]))?;
        let mut columns = Vec::with_capacity(steps);
        let mut phrases = Vec::with_capacity(steps);
        for proj in &self.sentence_proj[..steps] {
            let g = proj.forward(t, q.sentence_feature)?;
            let p = self.prev_proj.forward(t, prev)?;
            let guide = t.add(g, p)?;
            let guide = t.tanh(guide);
            let h = t.mul(keys, guide)?;
            let h = t.tanh(h);
            let logits = self.score.forward(t, h)?;
            let logits = t.transpose(logits);
            let attn = t.softmax_rows(logits)?;
            let phrase = t.matmul(attn, words)?;
            columns.push(t.transpose(attn));
            phrases.push(phrase);
            prev = phrase;
        }
        Ok(QueryAttentionOutput {
            phrases: t.concat_rows(&phrases)?,
            attention: t.concat_cols(&columns)?,
        })
    }
}

/// One temporal self-attention layer with a residual connection and normalization.
#[derive(Clone, Debug)]
struct TemporalSelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm: LayerNorm,
    dim: usize,
}

impl TemporalSelfAttention {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q_proj"), dim, dim, false, rng)?,
            k: Linear::new(store, &format!("{name}.k_proj"), dim, dim, false, rng)?,
            v: Linear::new(store, &format!("{name}.v_proj"), dim, dim, false, rng)?,
            o: Linear::new(store, &format!("{name}.out_proj"), dim, dim, true, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            dim,
        })
    }

    /// `x` stacks `blocks` independent sequences of `len` rows each; attention stays within a block.
    fn forward<S: Scalar>(&self, t: &mut Tape<'_, S>, x: Var, blocks: usize, len: usize) -> Result<Var> {
        let q = self.q.forward(t, x)?;
        let k = self.k.forward(t, x)?;
        let v = self.v.forward(t, x)?;
        let scale = S::one() / S::of(self.dim as f64).sqrt();
        let mut mixed = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let qb = t.slice_rows(q, b * len, len)?;
            let kb = t.slice_rows(k, b * len, len)?;
            let vb = t.slice_rows(v, b * len, len)?;
            let kt = t.transpose(kb);
            let scores = t.matmul(qb, kt)?;
            let scores = t.scale(scores, scale);
            let attn = t.softmax_rows(scores)?;
            mixed.push(t.matmul(attn, vb)?);
        }
        let mixed = if blocks == 1 { mixed[0] } else { t.concat_rows(&mixed)? };
        let out = self.o.forward(t, mixed)?;
        let res = t.add(x, out)?;
        self.norm.forward(t, res)
    }
}

/// Query-to-video interaction for one modality.
#[derive(Clone, Debug)]
pub struct Lgi {
    pub modality: Modality,
    pub query_attention: SequentialQueryAttention,
    phrase_proj: Linear,
    global: TemporalSelfAttention,
    dim: usize,
}

impl Lgi {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        modality: Modality,
        dim: usize,
        steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let name = format!("lgi.{modality}");
        let query_attention = SequentialQueryAttention::new(store, &format!("{name}.query_attention"), dim, steps, rng)?;
        let phrase_proj = Linear::new(store, &format!("{name}.phrase_proj"), dim, dim, true, rng)?;
        // modulation starts near identity
        let bias = phrase_proj.bias.expect("phrase projection has a bias");
        store.get_mut(bias).value.data_mut().iter_mut().for_each(|v| *v = S::one());
        Ok(Self {
            modality,
            query_attention,
            phrase_proj,
            global: TemporalSelfAttention::new(store, &format!("{name}.global"), dim, rng)?,
            dim,
        })
    }

    pub fn steps(&self) -> usize {
        self.query_attention.steps()
    }

    /// Local modulation by each phrase, temporal self-attention, then the mean over phrases.
    pub fn interact<S: Scalar>(&self, t: &mut Tape<'_, S>, segments: Var, phrases: Var) -> Result<Var> {
        let (len, c) = t.shape(segments);
        let (steps, pc) = t.shape(phrases);
        if c != self.dim || pc != self.dim {
            return Err(Error::shape("local_global_interaction", &[len, c], &[steps, pc]));
        }
        let mods = self.phrase_proj.forward(t, phrases)?;
        let mut local = Vec::with_capacity(steps);
        for s in 0..steps {
            let m = t.slice_rows(mods, s, 1)?;
            local.push(t.mul(segments, m)?);
        }
        let stacked = if steps == 1 { local[0] } else { t.concat_rows(&local)? };
        let global = self.global.forward(t, stacked, steps, len)?;
        if steps == 1 {
            return Ok(global);
        }
        let mut acc = t.slice_rows(global, 0, len)?;
        for s in 1..steps {
            let g = t.slice_rows(global, s * len, len)?;
            acc = t.add(acc, g)?;
        }
        Ok(t.scale(acc, S::one() / S::of(steps as f64)))
    }

    /// Full pass: query attention then interaction; returns `(M, query attention)`.
    pub fn forward<S: Scalar>(&self, t: &mut Tape<'_, S>, segments: Var, q: &EncodedQuery) -> Result<(Var, QueryAttentionOutput)> {
        let qa = self.query_attention.forward(t, q, self.steps())?;
        let m = self.interact(t, segments, qa.phrases)?;
        Ok((m, qa))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn setup(steps: usize) -> (ParamStore<f64>, Lgi) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lgi = Lgi::new(&mut store, Modality::Rgb, 8, steps, &mut rng).unwrap();
        (store, lgi)
    }

    fn query(t: &mut Tape<'_, f64>, rng: &mut ChaCha8Rng, n: usize) -> EncodedQuery {
        EncodedQuery {
            word_features: t.constant(random(rng, n, 8)).unwrap(),
            sentence_feature: t.constant(random(rng, 1, 8)).unwrap(),
        }
    }

    #[test]
    fn single_word_gives_all_ones_attention() {
        let (store, lgi) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new(&store);
        let q = query(&mut t, &mut rng, 1);
        let out = lgi.query_attention.forward(&mut t, &q, 3).unwrap();
        assert_eq!(t.shape(out.attention), (1, 3));
        assert!(t.value(out.attention).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn attention_columns_are_distributions_and_phrases_are_their_mixtures() {
        let (store, lgi) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let mut t = Tape::new(&store);
            let q = query(&mut t, &mut rng, 5);
            let out = lgi.query_attention.forward(&mut t, &q, 3).unwrap();
            let a = t.value(out.attention).clone();
            let words = t.value(q.word_features).clone();
            let phrases = t.value(out.phrases).clone();
            for s in 0..3 {
                let col: Vec<f64> = (0..5).map(|n| a.at(n, s)).collect();
                assert!(col.iter().all(|&v| v >= 0.0));
                assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for j in 0..8 {
                    let mix: f64 = (0..5).map(|n| col[n] * words.at(n, j)).sum();
                    assert!((mix - phrases.at(s, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_steps_is_a_contract_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SequentialQueryAttention::new(&mut store, "qa", 8, 0, &mut rng).is_err());
        let (store, lgi) = setup(2);
        let mut t = Tape::new(&store);
        let q = query(&mut t, &mut rng, 3);
        assert!(matches!(lgi.query_attention.forward(&mut t, &q, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn output_shape_and_phrase_order_invariance() {
        let (store, lgi) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seg = random(&mut rng, 4, 8);
        let ph = random(&mut rng, 2, 8);
        let swapped = Tensor::from_fn(2, 8, |i, j| ph.at(1 - i, j));
        let mut t = Tape::new(&store);
        let s = t.constant(seg).unwrap();
        let p = t.constant(ph).unwrap();
        let q = t.constant(swapped).unwrap();
        let m1 = lgi.interact(&mut t, s, p).unwrap();
        let m2 = lgi.interact(&mut t, s, q).unwrap();
        assert_eq!(t.shape(m1), (4, 8));
        for (a, b) in t.value(m1).data().iter().zip(t.value(m2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_phrase_matches_unaveraged_path() {
        let (store, lgi) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seg = random(&mut rng, 5, 8);
        let ph = random(&mut rng, 2, 8);
        let mut t = Tape::new(&store);
        let s = t.constant(seg).unwrap();
        let p = t.constant(ph).unwrap();
        let both = lgi.interact(&mut t, s, p).unwrap();
        let p0 = t.slice_rows(p, 0, 1).unwrap();
        let p1 = t.slice_rows(p, 1, 1).unwrap();
        let a = lgi.interact(&mut t, s, p0).unwrap();
        let b = lgi.interact(&mut t, s, p1).unwrap();
        for k in 0..40 {
            let avg = 0.5 * (t.value(a).data()[k] + t.value(b).data()[k]);
            assert!((avg - t.value(both).data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn different_queries_give_different_features() {
        let (store, lgi) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seg = random(&mut rng, 4, 8);
        let mut t = Tape::new(&store);
        let s = t.constant(seg).unwrap();
        let q1 = query(&mut t, &mut rng, 3);
        let q2 = query(&mut t, &mut rng, 3);
        let (m1, _) = lgi.forward(&mut t, s, &q1).unwrap();
        let (m2, _) = lgi.forward(&mut t, s, &q2).unwrap();
        assert_ne!(t.value(m1), t.value(m2));
    }
}
