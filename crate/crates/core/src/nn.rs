//! Small reusable layers built from tape ops.

use rand::Rng;

use crate::error::Result;
use crate::params::{init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// `x · W + b` applied to every row of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init::xavier(rng, in_dim, out_dim))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), init::zeros(out_dim))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Weight and bias start at zero.
    pub fn zeroed<S: Scalar>(store: &mut ParamStore<S>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), init::zeros_matrix(in_dim, out_dim))?,
            bias: Some(store.add(format!("{name}.bias"), init::zeros(out_dim))?),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let w = t.param(self.weight);
        let y = t.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = t.param(b);
                t.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(t, x)?;
        let h = t.relu(h);
        self.fc2.forward(t, h)
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), init::ones(dim))?,
            bias: store.add(format!("{name}.bias"), init::zeros(dim))?,
        })
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let n = t.layer_norm_rows(x);
        let g = t.param(self.gain);
        let b = t.param(self.bias);
        let y = t.mul(n, g)?;
        t.add(y, b)
    }
}
