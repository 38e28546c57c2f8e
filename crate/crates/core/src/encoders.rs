//! Query and per-modality segment encoders.

use rand::Rng;

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::nn::{Linear, Mlp2};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A tokenized query sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryTokens {
    pub token_ids: Vec<usize>,
    pub raw_text: String,
}

impl QueryTokens {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Precomputed `T × d_in` features for one modality of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSegmentFeatures<S> {
    pub modality: Modality,
    pub values: Tensor<S>,
}

impl<S: Scalar> RawSegmentFeatures<S> {
    pub fn segments(&self) -> usize {
        self.values.rows()
    }
}

/// Tape handles for an encoded query: `N × c` word features and a `1 × c` sentence feature.
#[derive(Clone, Copy, Debug)]
pub struct EncodedQuery {
    pub word_features: Var,
    pub sentence_feature: Var,
}

#[derive(Clone, Debug)]
struct LstmCell {
    input: Linear,
    recurrent: ParamId,
    hidden: usize,
}

impl LstmCell {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), in_dim, 4 * hidden, true, rng)?;
        // forget-gate bias starts at 1
        let bias = input.bias.expect("lstm input has a bias");
        store.get_mut(bias).value.data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|v| *v = S::one());
        let recurrent = store.add(
            format!("{name}.recurrent.weight"),
            crate::params::init::xavier(rng, hidden, 4 * hidden),
        )?;
        Ok(Self { input, recurrent, hidden })
    }

    /// Runs over the rows of `projected` (already `x·W + b`) in the given order and
    /// returns the hidden state after each visited row, indexed by row.
    fn run<S: Scalar>(&self, t: &mut Tape<'_, S>, projected: Var, order: impl Iterator<Item = usize>) -> Result<Vec<(usize, Var)>> {
        let h = self.hidden;
        let wh = t.param(self.recurrent);
        let mut hs = t.constant(Tensor::zeros(&[1, h]))?;
        let mut cs = t.constant(Tensor::zeros(&[1, h]))?;
        let mut out = Vec::new();
        for i in order {
            let x = t.slice_rows(projected, i, 1)?;
            let r = t.matmul(hs, wh)?;
            let gates = t.add(x, r)?;
            let ig = t.slice_cols(gates, 0, h)?;
            let fg = t.slice_cols(gates, h, h)?;
            let gg = t.slice_cols(gates, 2 * h, h)?;
            let og = t.slice_cols(gates, 3 * h, h)?;
            let (ig, fg, gg, og) = (t.sigmoid(ig), t.sigmoid(fg), t.tanh(gg), t.sigmoid(og));
            let keep = t.mul(fg, cs)?;
            let write = t.mul(ig, gg)?;
            cs = t.add(keep, write)?;
            let squashed = t.tanh(cs);
            hs = t.mul(og, squashed)?;
            out.push((i, hs));
        }
        Ok(out)
    }
}

/// Word embedding followed by a bidirectional LSTM with `c/2` units per direction.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    embedding: ParamId,
    forward: LstmCell,
    backward: LstmCell,
    vocab_size: usize,
    dim: usize,
}

impl TextEncoder {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        vocab_size: usize,
        word_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim % 2 != 0 || dim == 0 {
            return Err(Error::Config(format!("text feature size {dim} must be even and positive")));
        }
        let embedding = store.add(
            format!("{name}.embedding"),
            crate::params::init::uniform(rng, vocab_size, word_dim, 3f64.sqrt()),
        )?;
        Ok(Self {
            embedding,
            forward: LstmCell::new(store, &format!("{name}.lstm_fwd"), word_dim, dim / 2, rng)?,
            backward: LstmCell::new(store, &format!("{name}.lstm_bwd"), word_dim, dim / 2, rng)?,
            vocab_size,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Word features are `[h_fwd(i) | h_bwd(i)]`; the sentence feature is
    /// `[h_fwd(N−1) | h_bwd(0)]`, the final state of each direction.
    pub fn encode<S: Scalar>(&self, t: &mut Tape<'_, S>, q: &QueryTokens) -> Result<EncodedQuery> {
        let n = q.len();
        if n == 0 {
            return Err(Error::Contract("query has no tokens".into()));
        }
        if let Some(&bad) = q.token_ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Vocabulary { token: format!("#{bad}") });
        }
        let onehot = Tensor::from_fn(n, self.vocab_size, |i, j| {
            if q.token_ids[i] == j {
                S::one()
            } else {
                S::zero()
            }
        });
        let onehot = t.constant(onehot)?;
        let table = t.param(self.embedding);
        let words = t.matmul(onehot, table)?;

        let xf = self.forward.input.forward(t, words)?;
        let xb = self.backward.input.forward(t, words)?;
        let fwd = self.forward.run(t, xf, 0..n)?;
        let mut bwd = self.backward.run(t, xb, (0..n).rev())?;
        bwd.reverse();

        let fwd_rows: Vec<Var> = fwd.iter().map(|&(_, h)| h).collect();
        let bwd_rows: Vec<Var> = bwd.iter().map(|&(_, h)| h).collect();
        let f = t.concat_rows(&fwd_rows)?;
        let b = t.concat_rows(&bwd_rows)?;
        let word_features = t.concat_cols(&[f, b])?;
        let sentence_feature = t.concat_cols(&[fwd_rows[n - 1], bwd_rows[0]])?;
        Ok(EncodedQuery {
            word_features,
            sentence_feature,
        })
    }
}

/// Per-segment two-layer MLP for one modality.
#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub d_in: usize,
    mlp: Mlp2,
}

impl ModalityEncoder {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        modality: Modality,
        d_in: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mlp = Mlp2::new(store, &format!("encoder.{modality}"), d_in, dim, dim, rng)?;
        Ok(Self { modality, d_in, mlp })
    }

    pub fn encode<S: Scalar>(&self, t: &mut Tape<'_, S>, x: &RawSegmentFeatures<S>) -> Result<Var> {
        if x.modality != self.modality {
            return Err(Error::Contract(format!(
                "{} encoder given {} features",
                self.modality, x.modality
            )));
        }
        let (rows, cols) = x.values.dims2()?;
        if cols != self.d_in || rows == 0 {
            return Err(Error::shape("encode_modality", &[rows, self.d_in], &[rows, cols]));
        }
        let v = t.constant(x.values.clone())?;
        self.mlp.forward(t, v)
    }
}
