//! Training loop, evaluation and resumable checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::contrastive::{sample_contrastive_batch, ActionLabel};
use crate::data::{Dataset, OovPolicy};
use crate::encoders::RawSegmentFeatures;
use crate::error::{Error, Result};
use crate::fusion::FeatureTag;
use crate::grounding::TimeInterval;
use crate::metrics::{tiou, EvalResult};
use crate::model::{Drft, LossValues, ModelConfig, Sample};
use crate::modality::Modality;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

const EPOCH_KEY: &str = "meta.epoch";
const STEP_KEY: &str = "optim.adam.step";

/// Builds model inputs for every record of a loaded split.
pub fn build_samples(dataset: &Dataset, modalities: &[Modality], oov: OovPolicy) -> Result<Vec<Sample<f32>>> {
    dataset
        .records
        .iter()
        .map(|r| {
            let features = modalities
                .iter()
                .map(|&m| {
                    Ok(RawSegmentFeatures {
                        modality: m,
                        values: dataset.features.get(&r.video_id, m)?.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Sample {
                video_id: r.video_id.clone(),
                tokens: dataset.vocabulary.tokenize(&r.sentence, oov)?,
                features,
                interval: r.interval()?,
                label: r.action_label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            adam: AdamConfig::default(),
            seed: 0,
            n_pos: 3,
            n_neg: 4,
        }
    }
}

/// Mean loss components and on-the-fly train mIoU of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub losses: LossValues,
    pub train_miou: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,L_reg,L_tag,L_dqa,L_cl,total,train_mIoU";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.2}",
            self.epoch, l.reg, l.tag, l.dqa, l.cl, l.total, self.train_miou
        )
    }
}

/// Metrics plus mean fusion weights per category.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub result: EvalResult,
    pub feature_tags: Vec<FeatureTag>,
    pub mean_weights: BTreeMap<ActionLabel, Vec<f64>>,
    pub overall_weights: Vec<f64>,
    pub predictions: Vec<(String, TimeInterval)>,
}

impl Evaluation {
    pub fn csv(&self, split: &str) -> String {
        let tags: Vec<String> = self.feature_tags.iter().map(|t| format!("w[{t}]")).collect();
        let mut s = format!("split,category,R@0.3,R@0.5,R@0.7,mIoU,count,{}\n", tags.join(","));
        let mut row = |name: String, sc: &crate::metrics::Scores, w: &[f64]| {
            let ws: Vec<String> = w.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(
                s,
                "{split},{name},{:.2},{:.2},{:.2},{:.2},{},{}",
                sc.recall_at[0],
                sc.recall_at[1],
                sc.recall_at[2],
                sc.mean_tiou,
                sc.count,
                ws.join(",")
            )
            .unwrap();
        };
        row("ALL".into(), &self.result.overall, &self.overall_weights);
        for (label, sc) in &self.result.per_category {
            row(label.to_string(), sc, &self.mean_weights[label]);
        }
        s
    }
}

pub struct Trainer {
    pub model: Drft,
    pub store: ParamStore<f32>,
    pub config: TrainConfig,
    adam: Adam<f32>,
    epoch: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Drft::new(&mut store, model_config, &mut rng)?;
        let adam = Adam::new(config.adam, &store);
        Ok(Self {
            model,
            store,
            config,
            adam,
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn train_epoch(&mut self, samples: &[Sample<f32>]) -> Result<EpochStats> {
        if samples.is_empty() {
            return Err(Error::Contract("no training samples".into()));
        }
        let mut rng = epoch_rng(self.config.seed, self.epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let labels: Vec<ActionLabel> = samples.iter().map(|s| s.label).collect();
        let inv_batch = 1.0 / self.config.batch_size as f32;
        let mut sum = LossValues::default();
        let mut iou = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            self.store.zero_grad();
            for &i in batch {
                let anchor = &samples[i];
                let targets = if self.model.config.losses.contrastive {
                    match sample_contrastive_batch(&labels, i, self.config.n_pos, self.config.n_neg, &mut rng) {
                        Ok(pick) => {
                            let pos: Vec<&Sample<f32>> = pick.positives.iter().map(|&j| &samples[j]).collect();
                            let neg: Vec<&Sample<f32>> = pick.negatives.iter().map(|&j| &samples[j]).collect();
                            Some(self.model.contrastive_targets(&self.store, &pos, &neg)?)
                        }
                        Err(Error::Sampling(_)) => None,
                        Err(e) => return Err(e),
                    }
                } else {
                    None
                };
                let mut t = Tape::new(&self.store);
                let (total, values, out) = self.model.loss(&mut t, anchor, targets.as_ref())?;
                iou += tiou(&out.reg.interval(&t), &anchor.interval);
                let scaled = t.scale(total, inv_batch);
                t.backward(scaled)?;
                let grads = t.param_grads();
                drop(t);
                self.store.accumulate(&grads);
                sum.reg += values.reg;
                sum.tag += values.tag;
                sum.dqa += values.dqa;
                sum.cl += values.cl;
                sum.total += values.total;
            }
            self.adam.step(&mut self.store)?;
        }
        self.epoch += 1;
        let n = samples.len() as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            losses: LossValues {
                reg: sum.reg / n,
                tag: sum.tag / n,
                dqa: sum.dqa / n,
                cl: sum.cl / n,
                total: sum.total / n,
            },
            train_miou: 100.0 * iou / n,
        })
    }

    pub fn evaluate(&self, samples: &[Sample<f32>]) -> Result<Evaluation> {
        evaluate(&self.model, &self.store, samples)
    }

    /// Parameters, optimizer moments and the epoch counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.store);
        for (id, p) in self.store.iter() {
            let (m, v) = self.adam.moments(id.index());
            let shape = p.value.shape();
            ck.insert(&format!("optim.adam.m.{}", p.name), &Tensor::new(shape, m.to_vec()).expect("moment shape"));
            ck.insert(&format!("optim.adam.v.{}", p.name), &Tensor::new(shape, v.to_vec()).expect("moment shape"));
        }
        let step = self.adam.steps_taken();
        // exact in f32 as 16-bit halves
        ck.insert(STEP_KEY, &Tensor::row_vector(vec![(step >> 16) as f32, (step & 0xffff) as f32]));
        ck.insert(EPOCH_KEY, &Tensor::scalar(self.epoch as f32));
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Restores parameters and, when present, optimizer state and epoch counter.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_into(&mut self.store)?;
        if let Some(step) = ck.tensor::<f32>(STEP_KEY) {
            let d = step.data();
            let steps = ((d[0] as u64) << 16) | d[1] as u64;
            let mut first = Vec::new();
            let mut second = Vec::new();
            for (_, p) in self.store.iter() {
                let get = |key: String| {
                    ck.tensor::<f32>(&key)
                        .filter(|t| t.shape() == p.value.shape())
                        .map(Tensor::into_data)
                        .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks {key}")))
                };
                first.push(get(format!("optim.adam.m.{}", p.name))?);
                second.push(get(format!("optim.adam.v.{}", p.name))?);
            }
            self.adam.restore(steps, first, second)?;
        }
        if let Some(e) = ck.tensor::<f32>(EPOCH_KEY) {
            self.epoch = e.data()[0] as usize;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.restore(&Checkpoint::load(path)?)
    }
}

pub fn evaluate(model: &Drft, store: &ParamStore<f32>, samples: &[Sample<f32>]) -> Result<Evaluation> {
    let k = model.fusion.num_features();
    let mut items = Vec::with_capacity(samples.len());
    let mut sums: BTreeMap<ActionLabel, (Vec<f64>, usize)> = BTreeMap::new();
    let mut overall = vec![0.0; k];
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let (pred, w) = model.predict(store, s)?;
        items.push((s.label, pred, s.interval));
        let e = sums.entry(s.label).or_insert_with(|| (vec![0.0; k], 0));
        for (a, b) in e.0.iter_mut().zip(&w) {
            *a += b;
        }
        e.1 += 1;
        for (a, b) in overall.iter_mut().zip(&w) {
            *a += b;
        }
        predictions.push((s.video_id.clone(), pred));
    }
    let n = samples.len().max(1) as f64;
    Ok(Evaluation {
        result: EvalResult::compute(&items)?,
        feature_tags: model.fusion.feature_tags(),
        mean_weights: sums
            .into_iter()
            .map(|(l, (w, c))| (l, w.into_iter().map(|v| v / c as f64).collect()))
            .collect(),
        overall_weights: overall.into_iter().map(|v| v / n).collect(),
        predictions,
    })
}
