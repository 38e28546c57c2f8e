//! Annotations, feature files, vocabulary and the synthetic dataset.

mod annotations;
mod features;
mod synthetic;
mod vocab;

use std::path::Path;

pub use annotations::{
    format_annotations, parse_annotation_text, parse_annotations, write_annotations, AnnotationLine, AnnotationRecord, DurationMap, LabelMap,
};
pub use features::{decode_features, encode_features, feature_path, read_features, write_features, FeatureStore};
pub use synthetic::{
    generate_synthetic, separability_probe, CategoryGroup, CategoryInfo, ProbeReport, ProbeRow, SyntheticConfig, SyntheticDataset,
    PROBE_CHANCE_MARGIN, PROBE_MIN_ACCURACY,
};
pub use vocab::{words, OovPolicy, Vocabulary, UNK};

use crate::error::Result;
use crate::modality::Modality;

pub const LABELS_FILE: &str = "labels.tsv";
pub const DURATIONS_FILE: &str = "durations.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CATEGORIES_FILE: &str = "categories.tsv";

pub fn annotation_file(split: &str) -> String {
    format!("annotations_{split}.txt")
}

/// One split of a dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<AnnotationRecord>,
    pub features: FeatureStore,
    pub vocabulary: Vocabulary,
    /// Empty when the directory has no category table.
    pub categories: Vec<CategoryInfo>,
}

impl Dataset {
    pub fn load(dir: &Path, split: &str, modalities: &[Modality]) -> Result<Self> {
        let labels = LabelMap::read(&dir.join(LABELS_FILE))?;
        let durations = DurationMap::read(&dir.join(DURATIONS_FILE))?;
        let records = parse_annotations(&dir.join(annotation_file(split)), &labels, &durations)?;
        let features = FeatureStore::read_dir(dir, records.iter().map(|r| r.video_id.as_str()), modalities)?;
        let categories_path = dir.join(CATEGORIES_FILE);
        let categories = if categories_path.exists() {
            CategoryInfo::read_all(&categories_path)?
        } else {
            Vec::new()
        };
        Ok(Self {
            records,
            features,
            vocabulary: Vocabulary::read(&dir.join(VOCAB_FILE))?,
            categories,
        })
    }
}
