//! Intra-modal contrastive learning across videos.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grounding::TimeInterval;
use crate::modality::Modality;
use crate::nn::Mlp2;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Action category of an annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionLabel(pub u32);

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Two-layer MLP into the embedding space, followed by L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub modality: Modality,
    mlp: Mlp2,
}

impl ProjectionHead {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        modality: Modality,
        dim: usize,
        proj_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            modality,
            mlp: Mlp2::new(store, &format!("contrastive.head_{modality}"), dim, dim, proj_dim, rng)?,
        })
    }

    /// Unit-norm embedding of every row of `x`.
    pub fn embed<S: Scalar>(&self, t: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let h = self.mlp.forward(t, x)?;
        Ok(t.l2_normalize_rows(h))
    }
}

/// Mean of the rows of `m` that fall inside the ground-truth interval.
pub fn pool_gt_segment<S: Scalar>(t: &mut Tape<'_, S>, m: Var, gt: &TimeInterval) -> Result<Var> {
    let (segments, _) = t.shape(m);
    let (lo, hi) = gt.segment_range(segments);
    let rows = t.slice_rows(m, lo, hi - lo + 1)?;
    Ok(t.mean_rows(rows))
}

/// Pooled features of an anchor and its sampled videos, all `· × c`.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveBatch {
    pub anchor: Var,
    pub positives: Var,
    pub negatives: Var,
    pub temperature: f64,
}

/// `−log( Σ₊ exp(s₊) / (Σ₊ exp(s₊) + Σ₋ exp(s₋)) )` with `s = eᵀe′/τ` on given embeddings.
pub fn info_nce<S: Scalar>(t: &mut Tape<'_, S>, anchor: Var, positives: Var, negatives: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Contract(format!("temperature {temperature} must be positive")));
    }
    let inv_tau = S::of(1.0 / temperature);
    let at = t.transpose(anchor);
    let sp = t.matmul(positives, at)?;
    let sn = t.matmul(negatives, at)?;
    let sp = t.scale(sp, inv_tau);
    let sn = t.scale(sn, inv_tau);
    let ep = t.exp(sp);
    let en = t.exp(sn);
    let pos = t.sum(ep);
    let neg = t.sum(en);
    let all = t.add(pos, neg)?;
    let log_all = t.log(all);
    let log_pos = t.log(pos);
    t.sub(log_all, log_pos)
}

/// Projects the batch through `head` and evaluates the contrastive objective.
pub fn contrastive_loss<S: Scalar>(t: &mut Tape<'_, S>, batch: &ContrastiveBatch, head: &ProjectionHead) -> Result<Var> {
    let (np, _) = t.shape(batch.positives);
    let (nn, _) = t.shape(batch.negatives);
    if np == 0 || nn == 0 {
        return Err(Error::Contract("contrastive batch needs positives and negatives".into()));
    }
    let a = head.embed(t, batch.anchor)?;
    let p = head.embed(t, batch.positives)?;
    let n = head.embed(t, batch.negatives)?;
    info_nce(t, a, p, n, batch.temperature)
}

/// Sum of the per-modality losses that could be computed.
pub fn total_contrastive<S: Scalar>(t: &mut Tape<'_, S>, per_modality: &[Option<Var>]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for v in per_modality.iter().flatten() {
        acc = Some(match acc {
            Some(a) => t.add(a, *v)?,
            None => *v,
        });
    }
    Ok(acc)
}

/// Indices of the sampled positive and negative videos for one anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveSample {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

fn draw<R: Rng>(rng: &mut R, candidates: &[usize], n: usize) -> Vec<usize> {
    if candidates.len() >= n {
        sample(rng, candidates.len(), n).into_iter().map(|i| candidates[i]).collect()
    } else {
        (0..n).map(|_| candidates[rng.gen_range(0..candidates.len())]).collect()
    }
}

/// Uniformly samples `n_pos` same-label and `n_neg` different-label records
/// other than `anchor`, with replacement only when there are too few candidates.
pub fn sample_contrastive_batch<R: Rng>(
    labels: &[ActionLabel],
    anchor: usize,
    n_pos: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<ContrastiveSample> {
    let label = *labels
        .get(anchor)
        .ok_or_else(|| Error::Sampling(format!("anchor {anchor} out of range")))?;
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| i != anchor && labels[i] == label).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != label).collect();
    if pos.is_empty() {
        return Err(Error::Sampling(format!("no other video with action {label}")));
    }
    if neg.is_empty() {
        return Err(Error::Sampling(format!("every video has action {label}")));
    }
    Ok(ContrastiveSample {
        positives: draw(rng, &pos, n_pos),
        negatives: draw(rng, &neg, n_neg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(dim: usize) -> (ParamStore<f64>, ProjectionHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = ProjectionHead::new(&mut store, Modality::Rgb, dim, dim, &mut rng).unwrap();
        (store, h)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pooling_examples() {
        let s = ParamStore::<f64>::new();
        let mut t = Tape::new(&s);
        let m = t.constant(Tensor::from_fn(4, 2, |i, j| (i * 10 + j) as f64)).unwrap();
        let iv = |a, b| TimeInterval::new(a, b).unwrap();
        let p = pool_gt_segment(&mut t, m, &iv(0.25, 0.75)).unwrap();
        assert_eq!(t.value(p).data(), &[15.0, 16.0]);
        let p = pool_gt_segment(&mut t, m, &iv(0.0, 1.0)).unwrap();
        assert_eq!(t.value(p).data(), &[15.0, 16.0]);
        let p = pool_gt_segment(&mut t, m, &iv(0.5, 0.5)).unwrap();
        assert_eq!(t.value(p).data(), &[20.0, 21.0]);
    }

    #[test]
    fn equal_similarities_give_log_seven_thirds() {
        let (store, h) = head(6);
        let mut t = Tape::new(&store);
        let x = Tensor::row_vector(vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4]);
        let rows = |n: usize| Tensor::from_fn(n, 6, |_, j| x.at(0, j));
        let batch = ContrastiveBatch {
            anchor: t.constant(x.clone()).unwrap(),
            positives: t.constant(rows(3)).unwrap(),
            negatives: t.constant(rows(4)).unwrap(),
            temperature: 0.1,
        };
        let l = contrastive_loss(&mut t, &batch, &h).unwrap();
        assert!((t.scalar(l) + (3.0f64 / 7.0).ln()).abs() < 1e-10);
    }

    #[test]
    fn saturated_similarities_give_near_zero_loss() {
        let s = ParamStore::<f64>::new();
        let mut t = Tape::new(&s);
        let e = Tensor::row_vector(vec![1.0, 0.0, 0.0]);
        let a = t.constant(e.clone()).unwrap();
        let p = t.constant(Tensor::from_fn(3, 3, |_, j| e.at(0, j))).unwrap();
        let n = t.constant(Tensor::from_fn(4, 3, |_, j| -e.at(0, j))).unwrap();
        let l = info_nce(&mut t, a, p, n, 0.1).unwrap();
        assert!(t.scalar(l) < 1e-8 && t.scalar(l) > 0.0);
    }

    /// Direct scalar evaluation of the objective, independent of the tape.
    fn oracle(anchor: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
        let norm = |v: &[f64]| {
            let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            v.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let a = norm(anchor);
        let sim = |v: &Vec<f64>| norm(v).iter().zip(&a).map(|(x, y)| x * y).sum::<f64>() / tau;
        let sp: f64 = pos.iter().map(|v| sim(v).exp()).sum();
        let sn: f64 = neg.iter().map(|v| sim(v).exp()).sum();
        -(sp / (sp + sn)).ln()
    }

    #[test]
    fn matches_scalar_oracle_on_random_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ParamStore::<f64>::new();
        for _ in 0..25 {
            let a = random(&mut rng, 1, 5);
            let p = random(&mut rng, 3, 5);
            let n = random(&mut rng, 4, 5);
            let mut t = Tape::new(&s);
            let av = t.constant(a.clone()).unwrap();
            let pv = t.constant(p.clone()).unwrap();
            let nv = t.constant(n.clone()).unwrap();
            let (av, pv, nv) = (t.l2_normalize_rows(av), t.l2_normalize_rows(pv), t.l2_normalize_rows(nv));
            let l = info_nce(&mut t, av, pv, nv, 0.1).unwrap();
            let rows = |m: &Tensor<f64>| (0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>();
            let want = oracle(a.row(0), &rows(&p), &rows(&n), 0.1);
            assert!((t.scalar(l) - want).abs() < 1e-10);
            assert!(t.scalar(l) > 0.0);
        }
    }

    #[test]
    fn monotone_in_positive_and_negative_similarity() {
        let s = ParamStore::<f64>::new();
        let eval = |p0: f64, n0: f64| {
            let mut t = Tape::new(&s);
            let a = t.constant(Tensor::row_vector(vec![1.0, 0.0])).unwrap();
            let unit = |c: f64| vec![c, (1.0 - c * c).sqrt()];
            let p = t.constant(Tensor::from_rows(&[unit(p0), unit(0.2), unit(0.1)])).unwrap();
            let n = t.constant(Tensor::from_rows(&[unit(n0), unit(-0.3), unit(0.0), unit(0.4)])).unwrap();
            let l = info_nce(&mut t, a, p, n, 0.1).unwrap();
            t.scalar(l)
        };
        assert!(eval(0.6, 0.1) < eval(0.5, 0.1));
        assert!(eval(0.5, 0.2) > eval(0.5, 0.1));
    }

    #[test]
    fn order_invariance_and_unit_embeddings() {
        let (store, h) = head(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 1, 4);
        let p = random(&mut rng, 3, 4);
        let n = random(&mut rng, 4, 4);
        let rev = |m: &Tensor<f64>| Tensor::from_fn(m.rows(), 4, |i, j| m.at(m.rows() - 1 - i, j));
        let mut t = Tape::new(&store);
        let mk = |t: &mut Tape<'_, f64>, p: Tensor<f64>, n: Tensor<f64>| ContrastiveBatch {
            anchor: t.constant(a.clone()).unwrap(),
            positives: t.constant(p).unwrap(),
            negatives: t.constant(n).unwrap(),
            temperature: 0.1,
        };
        let b1 = mk(&mut t, p.clone(), n.clone());
        let b2 = mk(&mut t, rev(&p), rev(&n));
        let l1 = contrastive_loss(&mut t, &b1, &h).unwrap();
        let l2 = contrastive_loss(&mut t, &b2, &h).unwrap();
        assert!((t.scalar(l1) - t.scalar(l2)).abs() < 1e-12);
        let e = h.embed(&mut t, b1.negatives).unwrap();
        for r in 0..4 {
            let norm: f64 = t.value(e).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn total_is_additive_and_skips_missing() {
        let s = ParamStore::<f64>::new();
        let mut t = Tape::new(&s);
        let l = t.constant_scalar(0.7);
        let all = total_contrastive(&mut t, &[Some(l), Some(l), Some(l)]).unwrap().unwrap();
        assert!((t.scalar(all) - 2.1).abs() < 1e-15);
        let m = t.constant_scalar(0.2);
        let two = total_contrastive(&mut t, &[Some(l), None, Some(m)]).unwrap().unwrap();
        assert!((t.scalar(two) - 0.9).abs() < 1e-15);
        assert!(total_contrastive(&mut t, &[None, None]).unwrap().is_none());
    }

    #[test]
    fn sampling_contract() {
        let labels: Vec<ActionLabel> = [0, 1, 0, 2, 1, 0, 2, 2, 1].into_iter().map(ActionLabel).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_contrastive_batch(&labels, 0, 3, 4, &mut rng).unwrap();
        assert_eq!((s.positives.len(), s.negatives.len()), (3, 4));
        assert!(s.positives.iter().all(|&i| i != 0 && labels[i] == labels[0]));
        assert!(s.negatives.iter().all(|&i| labels[i] != labels[0]));

        let again = sample_contrastive_batch(&labels, 0, 3, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(s, again);

        let lonely: Vec<ActionLabel> = [0, 1, 1].into_iter().map(ActionLabel).collect();
        assert!(matches!(
            sample_contrastive_batch(&lonely, 0, 3, 4, &mut rng),
            Err(Error::Sampling(_))
        ));
    }
}
