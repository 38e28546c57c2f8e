//! `video_id start end##sentence` annotation files and their sidecars.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::contrastive::ActionLabel;
use crate::error::{Error, Result};
use crate::grounding::TimeInterval;

/// One video-query pair with its annotated moment in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub duration: f64,
    pub sentence: String,
    pub action_label: ActionLabel,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.start >= 0.0 && self.start <= self.end && self.end <= self.duration) {
            return Err(Error::Validation(format!(
                "{}: need 0 <= start <= end <= duration, got {} {} {}",
                self.video_id, self.start, self.end, self.duration
            )));
        }
        if self.sentence.trim().is_empty() {
            return Err(Error::Validation(format!("{}: empty sentence", self.video_id)));
        }
        Ok(())
    }

    /// The moment normalized by the video duration.
    pub fn interval(&self) -> Result<TimeInterval> {
        if self.duration <= 0.0 {
            return Err(Error::Validation(format!("{}: non-positive duration", self.video_id)));
        }
        TimeInterval::new((self.start / self.duration).min(1.0), (self.end / self.duration).min(1.0))
    }
}

/// A parsed annotation line before sidecar lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationLine {
    pub line: usize,
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub sentence: String,
}

pub fn parse_annotation_text(text: &str, path: &Path) -> Result<Vec<AnnotationLine>> {
    let err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (head, sentence) = raw.split_once("##").ok_or_else(|| err(line, "missing '##' separator"))?;
        let mut parts = head.split_whitespace();
        let (Some(id), Some(s), Some(e), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(err(line, "expected 'video_id start end' before '##'"));
        };
        let start: f64 = s.parse().map_err(|_| err(line, &format!("bad start time {s:?}")))?;
        let end: f64 = e.parse().map_err(|_| err(line, &format!("bad end time {e:?}")))?;
        if !start.is_finite() || !end.is_finite() {
            return Err(err(line, "non-finite time"));
        }
        if start > end {
            return Err(Error::Validation(format!("{}:{line}: start {start} > end {end}", path.display())));
        }
        if sentence.trim().is_empty() {
            return Err(err(line, "empty sentence"));
        }
        out.push(AnnotationLine {
            line,
            video_id: id.to_string(),
            start,
            end,
            sentence: sentence.to_string(),
        });
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads an annotation file, attaching labels and durations from the sidecars.
pub fn parse_annotations(path: &Path, labels: &LabelMap, durations: &DurationMap) -> Result<Vec<AnnotationRecord>> {
    let lines = parse_annotation_text(&read_text(path)?, path)?;
    lines
        .into_iter()
        .map(|l| {
            let missing = |what: &str| Error::Validation(format!("{}:{}: no {what} for video {}", path.display(), l.line, l.video_id));
            let rec = AnnotationRecord {
                action_label: *labels.0.get(&l.video_id).ok_or_else(|| missing("label"))?,
                duration: *durations.0.get(&l.video_id).ok_or_else(|| missing("duration"))?,
                video_id: l.video_id,
                start: l.start,
                end: l.end,
                sentence: l.sentence,
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

pub fn format_annotations(records: &[AnnotationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        writeln!(s, "{} {} {}##{}", r.video_id, r.start, r.end, r.sentence).unwrap();
    }
    s
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    std::fs::write(path, format_annotations(records)).map_err(|e| Error::io(path, e))
}

fn parse_tsv<V>(path: &Path, what: &str, parse: impl Fn(&str) -> Option<V>) -> Result<BTreeMap<String, V>> {
    let text = read_text(path)?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (id, v) = raw.split_once('\t').ok_or_else(|| err("expected two tab-separated columns".into()))?;
        let v = parse(v.trim()).ok_or_else(|| err(format!("bad {what} {v:?}")))?;
        out.insert(id.to_string(), v);
    }
    Ok(out)
}

/// `video_id<TAB>category_id`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelMap(pub BTreeMap<String, ActionLabel>);

impl LabelMap {
    pub fn read(path: &Path) -> Result<Self> {
        parse_tsv(path, "category id", |v| v.parse().ok().map(ActionLabel)).map(Self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (k, v) in &self.0 {
            writeln!(s, "{k}\t{v}").unwrap();
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// `video_id<TAB>duration_seconds`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DurationMap(pub BTreeMap<String, f64>);

impl DurationMap {
    pub fn read(path: &Path) -> Result<Self> {
        parse_tsv(path, "duration", |v| v.parse().ok().filter(|d: &f64| d.is_finite() && *d > 0.0)).map(Self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (k, v) in &self.0 {
            writeln!(s, "{k}\t{v}").unwrap();
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}
