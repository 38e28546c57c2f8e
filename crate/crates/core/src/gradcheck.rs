//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{OpKind, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter; all of them when the parameter is smaller.
    pub max_coords_per_param: usize,
    pub seed: u64,
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_coords_per_param: 16,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub per_param: Vec<(String, f64)>,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<S, F>(store: &ParamStore<S>, f: &mut F) -> Result<f64>
where
    S: Scalar,
    F: FnMut(&mut Tape<'_, S>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let root = f(&mut tape)?;
    if tape.shape(root) != (1, 1) {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok(tape.scalar(root).as_f64())
}

/// Compares analytic gradients of `f` against central differences on
/// sampled coordinates of every parameter in `store`.
///
/// `f` must map the current parameter values to the same scalar every time
/// it is called; two evaluations that differ produce a determinism error.
pub fn grad_check<S, F>(store: &mut ParamStore<S>, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&mut Tape<'_, S>) -> Result<Var>,
{
    let first = evaluate(store, &mut f)?;
    let second = evaluate(store, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new(store);
        if let Some(kind) = opts.fault {
            tape.inject_fault(kind);
        }
        let root = f(&mut tape)?;
        tape.backward(root)?;
        let mut out: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        for (id, g) in tape.param_grads() {
            out[id.index()] = g.data().iter().map(|v| v.as_f64()).collect();
        }
        out
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = S::of(opts.epsilon);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coords_checked: 0,
        worst: None,
        per_param: Vec::new(),
    };
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    for (id, name, len) in ids {
        let coords: Vec<usize> = if len <= opts.max_coords_per_param {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst_here = 0.0f64;
        for k in coords {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = evaluate(store, &mut f);
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = evaluate(store, &mut f);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.epsilon);
            let err = relative_error(analytic[id.index()][k], numeric);
            report.coords_checked += 1;
            worst_here = worst_here.max(err);
            if report.worst.is_none() || !(err <= report.max_relative_error) {
                report.worst = Some((name.clone(), k));
                report.max_relative_error = err;
            }
        }
        report.per_param.push((name, worst_here));
    }
    if !report.max_relative_error.is_finite() {
        return Err(Error::Numeric("gradient check produced a non-finite error".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", Tensor::row_vector(vec![0.3, -1.2, 2.5, 0.01]))
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.5], vec![-0.5], vec![2.0], vec![4.0]]);
        let report = grad_check(
            &mut store,
            |tape| {
                let wv = tape.param(w);
                let xv = tape.constant(x.clone())?;
                tape.matmul(wv, xv)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-10, "{report:?}");
        assert_eq!(report.coords_checked, 4);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut calls = 0.0;
        let err = grad_check(
            &mut store,
            |tape| {
                calls += 1.0;
                let wv = tape.param(w);
                Ok(tape.scale(wv, calls))
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Determinism { .. }));
    }

    #[test]
    fn injected_fault_is_flagged() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::row_vector(vec![0.4, -0.3, 0.8])).unwrap();
        let f = |tape: &mut Tape<'_, f64>| {
            let wv = tape.param(w);
            let t = tape.tanh(wv);
            Ok(tape.sum(t))
        };
        let clean = grad_check(&mut store, f, &GradCheckOptions::default()).unwrap();
        assert!(clean.max_relative_error < 1e-6);
        let opts = GradCheckOptions {
            fault: Some(OpKind::Tanh),
            ..GradCheckOptions::default()
        };
        let broken = grad_check(&mut store, f, &opts).unwrap();
        assert!(broken.max_relative_error > 0.1, "{broken:?}");
    }
}
