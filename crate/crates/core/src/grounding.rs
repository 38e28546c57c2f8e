//! Interval regression head and the supervised grounding losses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp2};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Normalized `(start, end)` with `0 ≤ start ≤ end ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeInterval {
    pub start: f64,
    pub end: f64,
}

impl TimeInterval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end {
            return Err(Error::Validation(format!("interval ({start}, {end}) is not normalized")));
        }
        Ok(Self { start, end })
    }

    /// Clamps to `[0, 1]` and orders the endpoints.
    pub fn repaired(a: f64, b: f64) -> Self {
        let (a, b) = (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
        if a <= b {
            Self { start: a, end: b }
        } else {
            Self { start: b, end: a }
        }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    /// Inclusive segment index range `[floor(s·T), ceil(e·T) − 1]` clamped to `[0, T−1]`.
    ///
    /// An interval that covers no segment collapses to the one at `floor(s·T)`.
    pub fn segment_range(&self, segments: usize) -> (usize, usize) {
        let t = segments as f64;
        let last = segments.saturating_sub(1);
        let lo = ((self.start * t).floor() as usize).min(last);
        let hi = (self.end * t).ceil() as isize - 1;
        if hi < lo as isize {
            return (lo, lo);
        }
        (lo, (hi as usize).min(last))
    }
}

/// `1` for segments inside the ground-truth interval.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMask(pub Vec<bool>);

impl GroundTruthMask {
    pub fn from_interval(gt: &TimeInterval, segments: usize) -> Self {
        let (lo, hi) = gt.segment_range(segments);
        Self((0..segments).map(|i| i >= lo && i <= hi).collect())
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DqaConfig {
    pub lambda: f64,
}

impl DqaConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("dqa lambda {lambda} outside [0, 1]")));
        }
        Ok(Self { lambda })
    }
}

impl Default for DqaConfig {
    fn default() -> Self {
        Self { lambda: 0.3 }
    }
}

/// Temporal attention over segments, attention-weighted pooling, and an MLP
/// with sigmoid outputs for the two endpoints.
#[derive(Clone, Debug)]
pub struct RegHead {
    att_hidden: Linear,
    att_score: Linear,
    regressor: Mlp2,
}

/// `endpoints` is the raw `1×2` sigmoid output; `attention` is `1×T`.
#[derive(Clone, Copy, Debug)]
pub struct RegOutput {
    pub endpoints: Var,
    pub attention: Var,
}

impl RegOutput {
    /// Predicted interval, endpoints swapped when out of order.
    pub fn interval<S: Scalar>(&self, t: &Tape<'_, S>) -> TimeInterval {
        let v = t.value(self.endpoints).data();
        TimeInterval::repaired(v[0].as_f64(), v[1].as_f64())
    }
}

impl RegHead {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            att_hidden: Linear::new(store, "reg.attention.fc1", dim, dim, true, rng)?,
            att_score: Linear::new(store, "reg.attention.fc2", dim, 1, true, rng)?,
            regressor: Mlp2::new(store, "reg.regressor", dim, dim, 2, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<'_, S>, fused: Var) -> Result<RegOutput> {
        let h = self.att_hidden.forward(t, fused)?;
        let h = t.tanh(h);
        let logits = self.att_score.forward(t, h)?;
        let logits = t.transpose(logits);
        let attention = t.softmax_rows(logits)?;
        let pooled = t.matmul(attention, fused)?;
        let raw = self.regressor.forward(t, pooled)?;
        Ok(RegOutput {
            endpoints: t.sigmoid(raw),
            attention,
        })
    }
}

/// `0.5x²` for `|x| < 1`, otherwise `|x| − 0.5`.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Elementwise smooth-L1 on the tape; the branch is picked from the forward value.
pub fn smooth_l1_var<S: Scalar>(t: &mut Tape<'_, S>, x: Var) -> Result<Var> {
    let v = t.value(x).clone();
    let (r, c) = t.shape(x);
    let inside = |z: &S| z.abs() < S::one();
    let quad = Tensor::matrix(r, c, v.data().iter().map(|z| if inside(z) { S::of(0.5) } else { S::zero() }).collect())?;
    let sign = Tensor::matrix(r, c, v.data().iter().map(|z| if inside(z) { S::zero() } else { z.signum() }).collect())?;
    let off = Tensor::matrix(r, c, v.data().iter().map(|z| if inside(z) { S::zero() } else { S::of(-0.5) }).collect())?;
    // 0.5·x² inside, sign(x)·x − 0.5 outside
    let quad = t.constant(quad)?;
    let sign = t.constant(sign)?;
    let off = t.constant(off)?;
    let sq = t.mul(x, x)?;
    let q = t.mul(sq, quad)?;
    let l = t.mul(x, sign)?;
    let y = t.add(q, l)?;
    t.add(y, off)
}

/// `smooth_l1(ŝ − s) + smooth_l1(ê − e)` against the ground truth.
pub fn loss_reg<S: Scalar>(t: &mut Tape<'_, S>, endpoints: Var, gt: &TimeInterval) -> Result<Var> {
    let target = t.constant(Tensor::row_vector(vec![S::of(gt.start), S::of(gt.end)]))?;
    let d = t.sub(endpoints, target)?;
    let s = smooth_l1_var(t, d)?;
    Ok(t.sum(s))
}

/// `−Σ ô_i log o_i / Σ ô_i`, with `o` clamped at `1e-12` before the log.
pub fn loss_tag<S: Scalar>(t: &mut Tape<'_, S>, attention: Var, mask: &GroundTruthMask) -> Result<Var> {
    let count = mask.count();
    if count == 0 {
        return Err(Error::Contract("temporal attention mask has no positive segment".into()));
    }
    let (_, n) = t.shape(attention);
    if n != mask.0.len() {
        return Err(Error::shape("loss_tag", &[1, n], &[1, mask.0.len()]));
    }
    let logs = t.log_clamped(attention, S::of(1e-12));
    let m = t.constant(Tensor::row_vector(
        mask.0.iter().map(|&b| if b { S::one() } else { S::zero() }).collect(),
    ))?;
    let picked = t.mul(logs, m)?;
    let s = t.sum(picked);
    Ok(t.scale(s, -S::one() / S::of(count as f64)))
}

/// `‖AᵀA − λI‖²_F` for the `N × S` query attention matrix.
pub fn loss_dqa<S: Scalar>(t: &mut Tape<'_, S>, attention: Var, cfg: &DqaConfig) -> Result<Var> {
    let (_, steps) = t.shape(attention);
    let at = t.transpose(attention);
    let gram = t.matmul(at, attention)?;
    let target = t.constant(Tensor::identity(steps).map(|v| v * S::of(cfg.lambda)))?;
    let d = t.sub(gram, target)?;
    let sq = t.mul(d, d)?;
    Ok(t.sum(sq))
}

/// Which loss terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossFlags {
    pub reg: bool,
    pub tag: bool,
    pub dqa: bool,
    pub contrastive: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self {
            reg: true,
            tag: true,
            dqa: true,
            contrastive: true,
        }
    }
}

/// The individual loss terms of one sample; `cl` is absent when no contrastive batch could be drawn.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub reg: Var,
    pub tag: Var,
    pub dqa: Var,
    pub cl: Option<Var>,
}

/// Unweighted sum of the enabled terms.
pub fn total_loss<S: Scalar>(t: &mut Tape<'_, S>, terms: &LossTerms, flags: &LossFlags) -> Result<Var> {
    let named = [
        ("L_reg", Some(terms.reg), flags.reg),
        ("L_tag", Some(terms.tag), flags.tag),
        ("L_dqa", Some(terms.dqa), flags.dqa),
        ("L_cl", terms.cl, flags.contrastive),
    ];
    let mut acc: Option<Var> = None;
    for (name, v, on) in named {
        let (Some(v), true) = (v, on) else { continue };
        if !t.scalar(v).is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite")));
        }
        acc = Some(match acc {
            Some(a) => t.add(a, v)?,
            None => v,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => t.constant_scalar(S::zero()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(-1.0), 0.5);
        let below = 1.0 - 1e-12;
        assert!((smooth_l1(below) - 0.5).abs() < 1e-11);
    }

    #[test]
    fn smooth_l1_on_tape_matches_scalar() {
        let s = store();
        let mut t = Tape::new(&s);
        let xs = vec![-2.5, -1.0, -0.3, 0.0, 0.7, 1.0, 3.0];
        let x = t.constant(Tensor::row_vector(xs.clone())).unwrap();
        let y = smooth_l1_var(&mut t, x).unwrap();
        for (v, x) in t.value(y).data().iter().zip(&xs) {
            assert_eq!(*v, smooth_l1(*x));
        }
    }

    fn reg_value(pred: (f64, f64), gt: (f64, f64)) -> f64 {
        let s = store();
        let mut t = Tape::new(&s);
        let p = t.constant(Tensor::row_vector(vec![pred.0, pred.1])).unwrap();
        let l = loss_reg(&mut t, p, &TimeInterval::new(gt.0, gt.1).unwrap()).unwrap();
        t.scalar(l)
    }

    #[test]
    fn loss_reg_examples() {
        assert_eq!(reg_value((0.3, 0.6), (0.3, 0.6)), 0.0);
        assert!((reg_value((0.2, 0.9), (0.3, 0.7)) - 0.025).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            let g = (a.min(b), a.max(b));
            let oracle = smooth_l1(g.0 - p.0) + smooth_l1(g.1 - p.1);
            let v = reg_value(p, g);
            assert!((v - oracle).abs() < 1e-12);
            assert!(v >= 0.0);
        }
    }

    fn tag_value(o: Vec<f64>, mask: Vec<bool>) -> Result<f64> {
        let s = store();
        let mut t = Tape::new(&s);
        let ov = t.constant(Tensor::row_vector(o)).unwrap();
        let l = loss_tag(&mut t, ov, &GroundTruthMask(mask))?;
        Ok(t.scalar(l))
    }

    #[test]
    fn loss_tag_examples() {
        let v = tag_value(vec![0.25; 4], vec![false, true, true, false]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-10);
        let v = tag_value(vec![0.0, 1.0, 0.0], vec![false, true, false]).unwrap();
        assert_eq!(v, 0.0);
        assert!(matches!(tag_value(vec![0.5, 0.5], vec![false, false]), Err(Error::Contract(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let o: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let mut mask: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.5)).collect();
            mask[rng.gen_range(0..6)] = true;
            let num: f64 = o.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| -v.ln()).sum();
            let oracle = num / mask.iter().filter(|&&m| m).count() as f64;
            let v = tag_value(o, mask).unwrap();
            assert!((v - oracle).abs() < 1e-12);
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn loss_tag_drops_as_mass_moves_inside() {
        let mask = vec![false, true, true, false];
        let before = tag_value(vec![0.4, 0.1, 0.1, 0.4], mask.clone()).unwrap();
        let after = tag_value(vec![0.3, 0.2, 0.2, 0.3], mask).unwrap();
        assert!(after < before);
    }

    fn dqa_value(a: Tensor<f64>, lambda: f64) -> f64 {
        let s = store();
        let mut t = Tape::new(&s);
        let av = t.constant(a).unwrap();
        let l = loss_dqa(&mut t, av, &DqaConfig::new(lambda).unwrap()).unwrap();
        t.scalar(l)
    }

    #[test]
    fn loss_dqa_examples() {
        assert_eq!(dqa_value(Tensor::identity(3), 1.0), 0.0);
        let steps = 3;
        let same = Tensor::from_fn(4, steps, |n, _| if n == 1 { 1.0 } else { 0.0 });
        assert_eq!(dqa_value(same, 0.0), (steps * steps) as f64);

        // disjoint one-hot columns are orthonormal
        let disjoint = Tensor::from_fn(5, 3, |n, s| if n == s + 1 { 1.0 } else { 0.0 });
        assert_eq!(dqa_value(disjoint, 1.0), 0.0);
        // overlapping columns are not
        let overlap = Tensor::from_fn(2, 2, |_, _| 0.5);
        assert!(dqa_value(overlap, 1.0) > 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let a = Tensor::from_fn(5, 3, |_, _| rng.gen_range(0.0..1.0));
            let lambda: f64 = rng.gen_range(0.0..1.0);
            let mut oracle = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let g: f64 = (0..5).map(|n| a.at(n, i) * a.at(n, j)).sum();
                    let d = g - if i == j { lambda } else { 0.0 };
                    oracle += d * d;
                }
            }
            assert!((dqa_value(a, lambda) - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn total_loss_examples() {
        let s = store();
        let mut t = Tape::new(&s);
        let terms = LossTerms {
            reg: t.constant_scalar(0.1),
            tag: t.constant_scalar(0.2),
            dqa: t.constant_scalar(0.3),
            cl: Some(t.constant_scalar(0.4)),
        };
        let all = total_loss(&mut t, &terms, &LossFlags::default()).unwrap();
        assert!((t.scalar(all) - 1.0).abs() < 1e-15);
        let no_cl = LossFlags {
            contrastive: false,
            ..LossFlags::default()
        };
        let l = total_loss(&mut t, &terms, &no_cl).unwrap();
        assert!((t.scalar(l) - 0.6).abs() < 1e-15);
        let zeros = LossTerms {
            reg: t.constant_scalar(0.0),
            tag: t.constant_scalar(0.0),
            dqa: t.constant_scalar(0.0),
            cl: Some(t.constant_scalar(0.0)),
        };
        let z = total_loss(&mut t, &zeros, &LossFlags::default()).unwrap();
        assert_eq!(t.scalar(z), 0.0);
        let bad = LossTerms {
            dqa: t.constant_scalar(f64::NAN),
            ..terms
        };
        let err = total_loss(&mut t, &bad, &LossFlags::default()).unwrap_err();
        assert!(err.to_string().contains("L_dqa"));
    }

    #[test]
    fn reg_head_outputs_valid_intervals() {
        let mut s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = RegHead::new(&mut s, 8, &mut rng).unwrap();
        for _ in 0..20 {
            let mut t = Tape::new(&s);
            let f = t.constant(Tensor::from_fn(6, 8, |_, _| rng.gen_range(-3.0..3.0))).unwrap();
            let out = head.forward(&mut t, f).unwrap();
            let iv = out.interval(&t);
            assert!(0.0 <= iv.start && iv.start <= iv.end && iv.end <= 1.0);
            assert!((t.value(out.attention).sum() - 1.0).abs() < 1e-6);
            assert_eq!(t.shape(out.attention), (1, 6));
        }
    }

    #[test]
    fn segment_ranges() {
        let iv = |a, b| TimeInterval::new(a, b).unwrap();
        assert_eq!(iv(0.25, 0.75).segment_range(4), (1, 2));
        assert_eq!(iv(0.0, 1.0).segment_range(4), (0, 3));
        assert_eq!(iv(0.5, 0.5).segment_range(4), (2, 2));
        assert_eq!(iv(1.0, 1.0).segment_range(4), (3, 3));
        assert!(TimeInterval::new(0.6, 0.4).is_err());
        assert_eq!(TimeInterval::repaired(0.9, 0.2), iv(0.2, 0.9));
    }
}
