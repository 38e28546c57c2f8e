//! Binary per-video, per-modality segment feature files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::checkpoint::Cursor;
use crate::encoders::RawSegmentFeatures;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DRFTFEAT";
const VERSION: u8 = 1;

pub fn encode_features(features: &RawSegmentFeatures<f32>) -> Vec<u8> {
    let (t, d) = (features.values.rows(), features.values.cols());
    let mut out = Vec::with_capacity(18 + 4 * t * d);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(features.modality.code());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<RawSegmentFeatures<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Format("not a feature file".into()));
    }
    let version = cur.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let modality = Modality::from_code(cur.take(1)?[0]).ok_or_else(|| Error::Format("unknown modality code".into()))?;
    let t = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let expected = t.checked_mul(d).and_then(|n| n.checked_mul(4));
    if expected != Some(bytes.len() - cur.pos) {
        return Err(Error::Format(format!(
            "header says {t}x{d} but payload has {} bytes",
            bytes.len() - cur.pos
        )));
    }
    let data = cur.take(4 * t * d)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(RawSegmentFeatures {
        modality,
        values: Tensor::matrix(t, d, data)?,
    })
}

pub fn write_features(path: &Path, features: &RawSegmentFeatures<f32>) -> Result<()> {
    std::fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<RawSegmentFeatures<f32>> {
    decode_features(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// `dir/<modality>/<video_id>.feat`.
pub fn feature_path(dir: &Path, video_id: &str, modality: Modality) -> PathBuf {
    dir.join(modality.name()).join(format!("{video_id}.feat"))
}

/// In-memory segment features keyed by video and modality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    entries: BTreeMap<(String, Modality), Tensor<f32>>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rejects a modality whose segment count differs from the video's other modalities.
    pub fn insert(&mut self, video_id: &str, modality: Modality, values: Tensor<f32>) -> Result<()> {
        for m in Modality::ALL {
            if let Some(other) = self.entries.get(&(video_id.to_string(), m)) {
                if m != modality && other.rows() != values.rows() {
                    return Err(Error::Validation(format!(
                        "{video_id}: {modality} has {} segments but {m} has {}",
                        values.rows(),
                        other.rows()
                    )));
                }
            }
        }
        self.entries.insert((video_id.to_string(), modality), values);
        Ok(())
    }

    pub fn get(&self, video_id: &str, modality: Modality) -> Result<&Tensor<f32>> {
        self.entries
            .get(&(video_id.to_string(), modality))
            .ok_or_else(|| Error::Validation(format!("no {modality} features for video {video_id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Modality, &Tensor<f32>)> {
        self.entries.iter().map(|((id, m), t)| (id.as_str(), *m, t))
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        for m in Modality::ALL {
            let sub = dir.join(m.name());
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        for ((id, m), values) in &self.entries {
            write_features(
                &feature_path(dir, id, *m),
                &RawSegmentFeatures {
                    modality: *m,
                    values: values.clone(),
                },
            )?;
        }
        Ok(())
    }

    /// Loads the named videos for the given modalities.
    pub fn read_dir<'a>(dir: &Path, video_ids: impl IntoIterator<Item = &'a str>, modalities: &[Modality]) -> Result<Self> {
        let mut store = Self::new();
        for id in video_ids {
            for &m in modalities {
                let path = feature_path(dir, id, m);
                let f = read_features(&path)?;
                if f.modality != m {
                    return Err(Error::Format(format!("{} holds {} features", path.display(), f.modality)));
                }
                store.insert(id, m, f.values)?;
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(modality: Modality) -> RawSegmentFeatures<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        RawSegmentFeatures {
            modality,
            values: Tensor::from_fn(8, 16, |_, _| rng.gen_range(-1e3f32..1e3)),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let f = random(Modality::Flow);
        let p = dir.path().join("x.feat");
        write_features(&p, &f).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(back.modality, Modality::Flow);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.values), bits(&f.values));
        assert_eq!(back.values.shape(), f.values.shape());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = encode_features(&random(Modality::Depth));
        for cut in [0, 5, 9, 17, bytes.len() - 1] {
            assert!(matches!(decode_features(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_features(&longer), Err(Error::Format(_))));
        let mut wrong_dims = bytes.clone();
        wrong_dims[10] = 9;
        assert!(matches!(decode_features(&wrong_dims), Err(Error::Format(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_features(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = bytes;
        bad_version[8] = 7;
        assert!(matches!(decode_features(&bad_version), Err(Error::Format(_))));
    }

    #[test]
    fn modalities_of_a_video_share_segment_count() {
        let mut s = FeatureStore::new();
        s.insert("v", Modality::Rgb, Tensor::zeros(&[4, 2])).unwrap();
        assert!(s.insert("v", Modality::Flow, Tensor::zeros(&[5, 2])).is_err());
        s.insert("v", Modality::Flow, Tensor::zeros(&[4, 3])).unwrap();
    }
}
