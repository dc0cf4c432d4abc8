//! JSON-lines annotation records shared by curation and evaluation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeline::{validate_timeline, EventSpec, RawTimeline, Timeline, DEFAULT_MAX_EVENTS};

fn default_intensity() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedEvent {
    pub label: String,
    pub onset: f64,
    pub offset: f64,
    #[serde(default = "default_intensity")]
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub duration: f64,
    #[serde(default)]
    pub caption: String,
    pub events: Vec<AnnotatedEvent>,
}

impl AnnotationRecord {
    pub fn raw_timeline(&self) -> RawTimeline {
        RawTimeline {
            clip_duration: self.duration,
            events: self
                .events
                .iter()
                .map(|e| EventSpec::new(e.label.clone(), e.onset, e.offset, e.intensity))
                .collect(),
        }
    }

    pub fn timeline(&self) -> Result<Timeline> {
        Ok(validate_timeline(&self.raw_timeline(), DEFAULT_MAX_EVENTS)?)
    }

    pub fn from_timeline(id: impl Into<String>, caption: impl Into<String>, tl: &Timeline) -> Self {
        Self {
            id: id.into(),
            duration: tl.clip_duration(),
            caption: caption.into(),
            events: tl
                .events()
                .iter()
                .map(|e| AnnotatedEvent { label: e.category.clone(), onset: e.onset, offset: e.offset, intensity: e.intensity })
                .collect(),
        }
    }
}

/// Streams records from a JSONL reader; blank lines are skipped and parse
/// errors carry the 1-based line number.
pub fn read_records<'a, R: BufRead + 'a>(reader: R, source: &'a str) -> impl Iterator<Item = Result<AnnotationRecord>> + 'a {
    reader.lines().enumerate().filter_map(move |(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(Error::Io(e))),
        };
        if line.trim().is_empty() {
            return None;
        }
        Some(serde_json::from_str(&line).map_err(|e| Error::Parse { path: source.to_string(), line: i + 1, message: e.to_string() }))
    })
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    read_records(reader, &path.display().to_string()).collect()
}

/// Writes one compact JSON object per line.
pub fn write_jsonl<S: Serialize>(mut w: impl Write, items: impl IntoIterator<Item = S>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl<S: Serialize>(path: impl AsRef<Path>, items: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, items)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intensity_defaults_to_one() {
        let line = r#"{"id":"a","duration":10,"caption":"dog","events":[{"label":"dog","onset":1,"offset":2}]}"#;
        let rec: AnnotationRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.events[0].intensity, 1.0);
        assert_eq!(rec.timeline().unwrap().len(), 1);
    }

    #[test]
    fn parse_errors_report_line_numbers() {
        let text = "{\"id\":\"a\",\"duration\":10,\"events\":[]}\n\nnot json\n";
        let out: Vec<_> = read_records(text.as_bytes(), "mem").collect();
        assert_eq!(out.len(), 2);
        assert!(out[0].is_ok());
        assert!(matches!(&out[1], Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn round_trip() {
        let tl = Timeline::new(10.0, vec![EventSpec::new("dog", 1.0, 2.5, 0.5)]).unwrap();
        let rec = AnnotationRecord::from_timeline("x", "dog", &tl);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, [&rec]).unwrap();
        let back: Vec<_> = read_records(buf.as_slice(), "mem").collect::<Result<_>>().unwrap();
        assert_eq!(back, vec![rec]);
    }
}
