//! Finite-difference gradient checks for every op and module at tiny sizes.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{info_nce, ActionLabel, ProjectionHead};
use crate::encoders::{EncodedQuery, ModalityEncoder, QueryTokens, RawSegmentFeatures, TextEncoder};
use crate::error::Result;
use crate::fusion::{CrossAttentionBlock, Fusion};
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::grounding::{loss_dqa, loss_reg, loss_tag, DqaConfig, GroundTruthMask, RegHead, TimeInterval};
use crate::lgi::Lgi;
use crate::modality::Modality;
use crate::model::{Drft, ModelConfig, Sample};
use crate::params::ParamStore;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODULE_TOLERANCE: f64 = 1e-3;

/// Sizes used by the suite.
pub const SEGMENTS: usize = 4;
pub const DIM: usize = 8;
pub const WORDS: usize = 5;
pub const STEPS: usize = 2;
pub const HEADS: usize = 2;
const D_IN: usize = 6;
const VOCAB: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Op,
    Module,
    FullLoss,
}

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub component: String,
    pub kind: CheckKind,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

pub struct SuiteReport {
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>12} {:>9} {:>6}  status", "component", "max rel err", "tol", "coords")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<28} {:>12.3e} {:>9.0e} {:>6}  {}",
                r.component,
                r.max_relative_error,
                r.tolerance,
                r.coords,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.gen_range(lo..hi))
}

/// Random values with magnitude in `[0.1, 1]`, away from the relu kink.
fn off_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| {
        let v = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `Σ y ∘ W` for a fixed random `W`, giving every output element its own weight.
fn project(t: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random(&mut rng, r, c, -1.0, 1.0))?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn run<F>(component: &str, kind: CheckKind, store: &mut ParamStore<f64>, fault: Option<OpKind>, mut f: F) -> Result<CheckRow>
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
{
    let opts = GradCheckOptions {
        fault,
        ..GradCheckOptions::default()
    };
    let report = grad_check(store, |t| f(t), &opts)?;
    Ok(CheckRow {
        component: component.to_string(),
        kind,
        max_relative_error: report.max_relative_error,
        tolerance: if kind == CheckKind::Op { OP_TOLERANCE } else { MODULE_TOLERANCE },
        coords: report.coords_checked,
    })
}

fn op_check(kind: OpKind, fault: Option<OpKind>) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(kind as u64 + 100);
    let mut s = ParamStore::new();
    let a_val = match kind {
        OpKind::Log => random(&mut rng, 3, 4, 0.5, 2.0),
        OpKind::Relu => off_zero(&mut rng, 3, 4),
        _ => random(&mut rng, 3, 4, -1.0, 1.0),
    };
    let a = s.add("a", a_val)?;
    let b_val = match kind {
        OpKind::MatMul => random(&mut rng, 4, 2, -1.0, 1.0),
        OpKind::Add => random(&mut rng, 1, 4, -1.0, 1.0),
        OpKind::Sub => random(&mut rng, 3, 1, -1.0, 1.0),
        OpKind::ConcatRows => random(&mut rng, 2, 4, -1.0, 1.0),
        OpKind::ConcatCols => random(&mut rng, 3, 2, -1.0, 1.0),
        _ => random(&mut rng, 3, 4, -1.0, 1.0),
    };
    let b = s.add("b", b_val)?;
    let uses_b = matches!(
        kind,
        OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::ConcatRows | OpKind::ConcatCols
    );
    if !uses_b {
        s = {
            let mut only = ParamStore::new();
            only.add("a", s.get(a).value.clone())?;
            only
        };
    }
    run(kind.name(), CheckKind::Op, &mut s, fault, |t| {
        let x = t.param(a);
        let y = match kind {
            OpKind::MatMul => {
                let y = t.param(b);
                t.matmul(x, y)?
            }
            OpKind::Transpose => t.transpose(x),
            OpKind::Add => {
                let y = t.param(b);
                t.add(x, y)?
            }
            OpKind::Sub => {
                let y = t.param(b);
                t.sub(x, y)?
            }
            OpKind::Mul => {
                let y = t.param(b);
                t.mul(x, y)?
            }
            OpKind::Scale => t.scale(x, 1.7),
            OpKind::Softmax => t.softmax_rows(x)?,
            OpKind::Log => t.log(x),
            OpKind::Exp => t.exp(x),
            OpKind::Sum => return Ok(t.sum(x)),
            OpKind::Mean => return Ok(t.mean(x)),
            OpKind::MeanRows => t.mean_rows(x),
            OpKind::ConcatRows => {
                let y = t.param(b);
                t.concat_rows(&[x, y])?
            }
            OpKind::ConcatCols => {
                let y = t.param(b);
                t.concat_cols(&[x, y])?
            }
            OpKind::SliceRows => t.slice_rows(x, 1, 2)?,
            OpKind::SliceCols => t.slice_cols(x, 1, 2)?,
            OpKind::Relu => t.relu(x),
            OpKind::Tanh => t.tanh(x),
            OpKind::Sigmoid => t.sigmoid(x),
            OpKind::L2Normalize => t.l2_normalize_rows(x),
            OpKind::LayerNorm => t.layer_norm_rows(x),
            OpKind::Leaf => x,
        };
        project(t, y, 1)
    })
}

fn tokens() -> QueryTokens {
    QueryTokens {
        token_ids: vec![1, 4, 2, 6, 3],
        raw_text: String::new(),
    }
}

fn modules(fault: Option<OpKind>) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    {
        let mut s = ParamStore::new();
        let enc = TextEncoder::new(&mut s, "text", VOCAB, 6, DIM, &mut rng)?;
        rows.push(run("encoders.text", CheckKind::Module, &mut s, fault, |t| {
            let q = enc.encode(t, &tokens())?;
            let a = project(t, q.word_features, 2)?;
            let b = project(t, q.sentence_feature, 3)?;
            t.add(a, b)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let enc = ModalityEncoder::new(&mut s, Modality::Flow, D_IN, DIM, &mut rng)?;
        let x = RawSegmentFeatures {
            modality: Modality::Flow,
            values: random(&mut rng, SEGMENTS, D_IN, -1.0, 1.0),
        };
        rows.push(run("encoders.modality", CheckKind::Module, &mut s, fault, |t| {
            let y = enc.encode(t, &x)?;
            project(t, y, 4)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let lgi = Lgi::new(&mut s, Modality::Rgb, DIM, STEPS, &mut rng)?;
        let seg = s.add("input.segments", random(&mut rng, SEGMENTS, DIM, -1.0, 1.0))?;
        let words = s.add("input.words", random(&mut rng, WORDS, DIM, -1.0, 1.0))?;
        let sent = s.add("input.sentence", random(&mut rng, 1, DIM, -1.0, 1.0))?;
        rows.push(run("lgi", CheckKind::Module, &mut s, fault, |t| {
            let q = EncodedQuery {
                word_features: t.param(words),
                sentence_feature: t.param(sent),
            };
            let x = t.param(seg);
            let (m, qa) = lgi.forward(t, x, &q)?;
            let a = project(t, m, 5)?;
            let b = project(t, qa.attention, 6)?;
            t.add(a, b)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let block = CrossAttentionBlock::new(&mut s, "block", DIM, HEADS, 2 * DIM, &mut rng)?;
        let x = s.add("input.x", random(&mut rng, SEGMENTS, DIM, -1.0, 1.0))?;
        let y = s.add("input.y", random(&mut rng, SEGMENTS, DIM, -1.0, 1.0))?;
        rows.push(run("fusion.co_attention_block", CheckKind::Module, &mut s, fault, |t| {
            let (xv, yv) = (t.param(x), t.param(y));
            let out = block.forward(t, xv, yv)?;
            project(t, out, 7)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let mut cfg = ModelConfig::full(VOCAB, DIM, [D_IN; 3]);
        cfg.heads = HEADS;
        let fusion = Fusion::new(&mut s, cfg.fusion(), &mut rng)?;
        let inputs: Vec<(Modality, crate::params::ParamId)> = Modality::ALL
            .iter()
            .map(|&m| Ok((m, s.add(format!("input.{m}"), random(&mut rng, SEGMENTS, DIM, -1.0, 1.0))?)))
            .collect::<Result<_>>()?;
        rows.push(run("fusion.dynamic", CheckKind::Module, &mut s, fault, |t| {
            let modal: Vec<(Modality, Var)> = inputs.iter().map(|&(m, id)| (m, t.param(id))).collect();
            let (_, fr) = fusion.forward(t, &modal)?;
            let a = project(t, fr.fused, 8)?;
            let b = project(t, fr.weights, 9)?;
            t.add(a, b)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let head = ProjectionHead::new(&mut s, Modality::Depth, DIM, DIM, &mut rng)?;
        let anchor = s.add("input.anchor", random(&mut rng, 1, DIM, -1.0, 1.0))?;
        let pos = random(&mut rng, 3, DIM, -1.0, 1.0);
        let neg = random(&mut rng, 4, DIM, -1.0, 1.0);
        rows.push(run("contrastive", CheckKind::Module, &mut s, fault, |t| {
            let a = t.param(anchor);
            let p = t.constant(pos.clone())?;
            let n = t.constant(neg.clone())?;
            let (a, p, n) = (head.embed(t, a)?, head.embed(t, p)?, head.embed(t, n)?);
            info_nce(t, a, p, n, 0.1)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let head = RegHead::new(&mut s, DIM, &mut rng)?;
        let fused = s.add("input.fused", random(&mut rng, SEGMENTS, DIM, -1.0, 1.0))?;
        let gt = TimeInterval::new(0.3, 0.7)?;
        let mask = GroundTruthMask::from_interval(&gt, SEGMENTS);
        rows.push(run("grounding.reg_head", CheckKind::Module, &mut s, fault, |t| {
            let f = t.param(fused);
            let out = head.forward(t, f)?;
            let a = project(t, out.endpoints, 10)?;
            let b = project(t, out.attention, 11)?;
            t.add(a, b)
        })?);
        rows.push(run("grounding.loss_reg", CheckKind::Module, &mut s, fault, |t| {
            let f = t.param(fused);
            let out = head.forward(t, f)?;
            loss_reg(t, out.endpoints, &gt)
        })?);
        rows.push(run("grounding.loss_tag", CheckKind::Module, &mut s, fault, |t| {
            let f = t.param(fused);
            let out = head.forward(t, f)?;
            loss_tag(t, out.attention, &mask)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let logits = s.add("input.logits", random(&mut rng, STEPS, WORDS, -1.0, 1.0))?;
        rows.push(run("grounding.loss_dqa", CheckKind::Module, &mut s, fault, |t| {
            let l = t.param(logits);
            let rows = t.softmax_rows(l)?;
            let a = t.transpose(rows);
            loss_dqa(t, a, &DqaConfig::default())
        })?);
    }
    Ok(rows)
}

fn tiny_sample(rng: &mut ChaCha8Rng, label: u32) -> Sample<f64> {
    Sample {
        video_id: format!("v{label}"),
        tokens: tokens(),
        features: Modality::ALL
            .iter()
            .map(|&m| RawSegmentFeatures {
                modality: m,
                values: random(rng, SEGMENTS, D_IN, -1.0, 1.0),
            })
            .collect(),
        interval: TimeInterval::new(0.3, 0.7).expect("valid interval"),
        label: ActionLabel(label),
    }
}

/// Instance seed for the end-to-end row. Kept away from ReLU kinks and from
/// coordinates whose gradient is small enough to drown in f64 round-off.
pub const FULL_LOSS_SEED: u64 = 3;

fn full_loss(fault: Option<OpKind>) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(FULL_LOSS_SEED);
    let mut cfg = ModelConfig::full(VOCAB, DIM, [D_IN; 3]);
    cfg.heads = HEADS;
    cfg.query_steps = STEPS;
    cfg.word_dim = 6;
    let mut s = ParamStore::new();
    let model = Drft::new(&mut s, cfg, &mut rng)?;
    let anchor = tiny_sample(&mut rng, 0);
    let pos: Vec<Sample<f64>> = (0..3).map(|_| tiny_sample(&mut rng, 0)).collect();
    let neg: Vec<Sample<f64>> = (0..4).map(|k| tiny_sample(&mut rng, 1 + k)).collect();
    let targets = model.contrastive_targets(&s, &pos.iter().collect::<Vec<_>>(), &neg.iter().collect::<Vec<_>>())?;
    run("full_loss", CheckKind::FullLoss, &mut s, fault, |t| {
        Ok(model.loss(t, &anchor, Some(&targets))?.0)
    })
}

/// Every primitive op, every module in isolation, then the full objective.
pub fn run_suite(fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    for kind in OpKind::ALL {
        if kind != OpKind::Leaf {
            rows.push(op_check(kind, fault)?);
        }
    }
    rows.extend(modules(fault)?);
    rows.push(full_loss(fault)?);
    Ok(SuiteReport { rows })
}
