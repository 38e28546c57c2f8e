//! Tri-modal synthetic videos with planted, modality-specific action signatures.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::annotations::{write_annotations, AnnotationRecord, DurationMap, LabelMap};
use super::features::FeatureStore;
use super::vocab::Vocabulary;
use crate::contrastive::ActionLabel;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

const VERBS: [&str; 12] = [
    "opens", "closes", "throws", "holds", "pours", "washes", "tidies", "eats", "watches", "fixes", "takes", "puts",
];
const OBJECTS: [&str; 12] = [
    "door", "pillow", "book", "cup", "laptop", "window", "towel", "shoe", "blanket", "phone", "box", "chair",
];

/// Which modality carries a category's signature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CategoryGroup {
    Appearance,
    Motion,
    Structure,
}

impl CategoryGroup {
    pub const ALL: [CategoryGroup; 3] = [CategoryGroup::Appearance, CategoryGroup::Motion, CategoryGroup::Structure];

    pub fn coding_modality(self) -> Modality {
        match self {
            CategoryGroup::Appearance => Modality::Rgb,
            CategoryGroup::Motion => Modality::Flow,
            CategoryGroup::Structure => Modality::Depth,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CategoryGroup::Appearance => "appearance",
            CategoryGroup::Motion => "motion",
            CategoryGroup::Structure => "structure",
        }
    }
}

impl fmt::Display for CategoryGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CategoryGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "appearance" | "rgb" => Ok(CategoryGroup::Appearance),
            "motion" | "flow" => Ok(CategoryGroup::Motion),
            "structure" | "depth" => Ok(CategoryGroup::Structure),
            other => Err(Error::Config(format!("unknown category group {other:?}"))),
        }
    }
}

/// A synthetic action category and its sentence template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryInfo {
    pub label: ActionLabel,
    pub group: CategoryGroup,
    pub verb: String,
    pub object: String,
}

impl CategoryInfo {
    pub fn sentence(&self) -> String {
        format!("person {} a {}", self.verb, self.object)
    }

    pub fn write_all(path: &Path, categories: &[CategoryInfo]) -> Result<()> {
        let mut s = String::new();
        for c in categories {
            writeln!(s, "{}\t{}\t{}\t{}", c.label, c.group, c.verb, c.object).unwrap();
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_all(path: &Path) -> Result<Vec<CategoryInfo>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let err = |msg: &str| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: msg.to_string(),
                };
                let cols: Vec<&str> = l.split('\t').collect();
                let [label, group, verb, object] = cols[..] else {
                    return Err(err("expected four tab-separated columns"));
                };
                Ok(CategoryInfo {
                    label: ActionLabel(label.parse().map_err(|_| err("bad category id"))?),
                    group: group.parse().map_err(|_| err("bad group"))?,
                    verb: verb.to_string(),
                    object: object.to_string(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_videos: usize,
    pub num_test_videos: usize,
    pub segments: usize,
    /// Input width per modality, indexed by [`Modality::index`].
    pub feature_dims: [usize; 3],
    pub num_categories: usize,
    /// Group of each category; empty assigns groups round-robin.
    pub groups: Vec<CategoryGroup>,
    pub strength: f64,
    pub noise: f64,
    /// Scale of the RGB copy of non-appearance signatures, relative to `strength`.
    pub rgb_copy: f64,
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_videos: 64,
            num_test_videos: 36,
            segments: 16,
            feature_dims: [16, 16, 16],
            num_categories: 9,
            groups: Vec::new(),
            strength: 3.0,
            noise: 1.0,
            rgb_copy: 0.25,
            min_fraction: 0.2,
            max_fraction: 0.6,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn category_groups(&self) -> Vec<CategoryGroup> {
        if self.groups.is_empty() {
            (0..self.num_categories).map(|k| CategoryGroup::ALL[k % 3]).collect()
        } else {
            self.groups.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_categories < 2 || self.num_categories > VERBS.len() * OBJECTS.len() {
            return bad(format!("num_categories must be in 2..={}", VERBS.len() * OBJECTS.len()));
        }
        if !self.groups.is_empty() && self.groups.len() != self.num_categories {
            return bad(format!(
                "{} group assignments for {} categories",
                self.groups.len(),
                self.num_categories
            ));
        }
        if self.num_videos < 2 * self.num_categories {
            return bad("need at least two training videos per category".into());
        }
        if self.segments < 2 || self.feature_dims.contains(&0) {
            return bad("segments must be >= 2 and feature dims positive".into());
        }
        if !(0.0 < self.min_fraction && self.min_fraction <= self.max_fraction && self.max_fraction <= 1.0) {
            return bad("interval fractions must satisfy 0 < min <= max <= 1".into());
        }
        if !(self.strength >= 0.0 && self.noise >= 0.0 && self.rgb_copy >= 0.0) {
            return bad("strength, noise and rgb_copy must be non-negative".into());
        }
        Ok(())
    }
}

pub struct SyntheticDataset {
    pub train: Vec<AnnotationRecord>,
    pub test: Vec<AnnotationRecord>,
    pub features: FeatureStore,
    pub vocabulary: Vocabulary,
    pub categories: Vec<CategoryInfo>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let categories: Vec<CategoryInfo> = cfg
        .category_groups()
        .into_iter()
        .enumerate()
        .map(|(k, group)| CategoryInfo {
            label: ActionLabel(k as u32),
            group,
            verb: VERBS[k % VERBS.len()].to_string(),
            object: OBJECTS[(k + k / VERBS.len()) % OBJECTS.len()].to_string(),
        })
        .collect();
    // signatures[k][m]: unit vector of category k in modality m
    let signatures: Vec<[Vec<f64>; 3]> = (0..cfg.num_categories)
        .map(|_| Modality::ALL.map(|m| unit_vector(&mut rng, cfg.feature_dims[m.index()])))
        .collect();
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut features = FeatureStore::new();
    let mut make_split = |count: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Result<Vec<AnnotationRecord>> {
        let mut labels: Vec<usize> = (0..count).map(|i| i % cfg.num_categories).collect();
        labels.shuffle(rng);
        let mut records = Vec::with_capacity(count);
        for (i, k) in labels.into_iter().enumerate() {
            let cat = &categories[k];
            let video_id = format!("{prefix}{i:04}");
            let duration = round2(rng.gen_range(20.0..40.0));
            let frac = rng.gen_range(cfg.min_fraction..=cfg.max_fraction);
            let start_frac = rng.gen_range(0.0..=1.0 - frac);
            let start = round2(start_frac * duration);
            let end = round2(((start_frac + frac) * duration).min(duration));
            let rec = AnnotationRecord {
                video_id: video_id.clone(),
                start,
                end,
                duration,
                sentence: cat.sentence(),
                action_label: cat.label,
            };
            rec.validate()?;
            let (lo, hi) = rec.interval()?.segment_range(cfg.segments);
            for m in Modality::ALL {
                let d = cfg.feature_dims[m.index()];
                let mut values = Tensor::from_fn(cfg.segments, d, |_, _| noise.sample(rng) as f32);
                let scale = if m == cat.group.coding_modality() {
                    cfg.strength
                } else if m == Modality::Rgb {
                    cfg.rgb_copy * cfg.strength
                } else {
                    0.0
                };
                if scale > 0.0 {
                    let sig = &signatures[k][m.index()];
                    for r in lo..=hi {
                        for (j, s) in sig.iter().enumerate() {
                            values.data_mut()[r * d + j] += (scale * s) as f32;
                        }
                    }
                }
                features.insert(&video_id, m, values)?;
            }
            records.push(rec);
        }
        Ok(records)
    };
    let train = make_split(cfg.num_videos, "syn", &mut rng)?;
    let test = make_split(cfg.num_test_videos, "heldout", &mut rng)?;
    let vocabulary = Vocabulary::build(categories.iter().map(|c| c.sentence()).collect::<Vec<_>>().iter().map(String::as_str));
    Ok(SyntheticDataset {
        train,
        test,
        features,
        vocabulary,
        categories,
    })
}

impl SyntheticDataset {
    /// Annotation splits, sidecars, vocabulary, category table and the feature tree.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_annotations(&dir.join(super::annotation_file("train")), &self.train)?;
        write_annotations(&dir.join(super::annotation_file("test")), &self.test)?;
        let all = || self.train.iter().chain(&self.test);
        LabelMap(all().map(|r| (r.video_id.clone(), r.action_label)).collect()).write(&dir.join(super::LABELS_FILE))?;
        DurationMap(all().map(|r| (r.video_id.clone(), r.duration)).collect()).write(&dir.join(super::DURATIONS_FILE))?;
        self.vocabulary.write(&dir.join(super::VOCAB_FILE))?;
        CategoryInfo::write_all(&dir.join(super::CATEGORIES_FILE), &self.categories)?;
        self.features.write_dir(dir)
    }
}

/// Leave-one-out nearest-centroid accuracy of one modality within one group.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub group: CategoryGroup,
    pub modality: Modality,
    pub accuracy: f64,
    pub chance: f64,
    pub expect_separable: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<11} {:<6} {:>8} {:>7}  status", "group", "probe", "accuracy", "chance")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<11} {:<6} {:>8.3} {:>7.3}  {}{}",
                r.group.name(),
                r.modality.name(),
                r.accuracy,
                r.chance,
                if r.passed { "ok" } else { "FAIL" },
                if r.expect_separable { " (coding)" } else { "" },
            )?;
        }
        Ok(())
    }
}

/// Accuracy a coding modality must exceed.
pub const PROBE_MIN_ACCURACY: f64 = 0.9;
/// Margin over chance allowed for a modality that carries no signature.
pub const PROBE_CHANCE_MARGIN: f64 = 0.25;

fn nearest_centroid_loo(points: &[Vec<f64>], labels: &[usize], classes: usize) -> f64 {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    let mut correct = 0;
    for (p, &l) in points.iter().zip(labels) {
        let mut best = (f64::INFINITY, usize::MAX);
        for c in 0..classes {
            let n = counts[c] - usize::from(c == l);
            if n == 0 {
                continue;
            }
            let dist: f64 = (0..d)
                .map(|j| {
                    let own = if c == l { p[j] } else { 0.0 };
                    let centroid = (sums[c][j] - own) / n as f64;
                    (p[j] - centroid).powi(2)
                })
                .sum();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        correct += usize::from(best.1 == l);
    }
    correct as f64 / points.len() as f64
}

/// Checks that each group's categories are separable from pooled ground-truth
/// features of the coding modality and near chance from the other signature-free one.
pub fn separability_probe(records: &[AnnotationRecord], features: &FeatureStore, categories: &[CategoryInfo]) -> Result<ProbeReport> {
    let mut rows = Vec::new();
    for group in CategoryGroup::ALL {
        let members: Vec<ActionLabel> = categories.iter().filter(|c| c.group == group).map(|c| c.label).collect();
        if members.len() < 2 {
            continue;
        }
        let recs: Vec<&AnnotationRecord> = records.iter().filter(|r| members.contains(&r.action_label)).collect();
        let labels: Vec<usize> = recs.iter().map(|r| members.iter().position(|&m| m == r.action_label).unwrap()).collect();
        let chance = 1.0 / members.len() as f64;
        for m in Modality::ALL {
            let coding = m == group.coding_modality();
            // RGB holds a weak copy of every signature, so only the signature-free modalities are held to chance
            if !coding && m == Modality::Rgb {
                continue;
            }
            let points = recs
                .iter()
                .map(|r| {
                    let x = features.get(&r.video_id, m)?;
                    let (lo, hi) = r.interval()?.segment_range(x.rows());
                    Ok((0..x.cols())
                        .map(|j| (lo..=hi).map(|i| x.at(i, j) as f64).sum::<f64>() / (hi - lo + 1) as f64)
                        .collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            let accuracy = nearest_centroid_loo(&points, &labels, members.len());
            let passed = if coding {
                accuracy > PROBE_MIN_ACCURACY
            } else {
                accuracy <= chance + PROBE_CHANCE_MARGIN
            };
            rows.push(ProbeRow {
                group,
                modality: m,
                accuracy,
                chance,
                expect_separable: coding,
                passed,
            });
        }
    }
    Ok(ProbeReport { rows })
}
