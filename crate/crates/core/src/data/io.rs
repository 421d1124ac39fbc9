use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ClassVocab;
use crate::boxgeom::BoundingBox;
use crate::error::{Error, Result};
use crate::Point3;

pub const POINT_CLOUD_MAGIC: &[u8; 4] = b"BPC1";

/// Encodes `points` as `BPC1`, little-endian u32 count, then f32 xyz triples.
pub fn encode_point_cloud(points: &[Point3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + points.len() * 12);
    out.extend_from_slice(POINT_CLOUD_MAGIC);
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_point_cloud(bytes: &[u8]) -> Result<Vec<Point3>> {
    if bytes.len() < 4 || &bytes[..4] != POINT_CLOUD_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "missing BPC1 magic".into(),
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "truncated point count".into(),
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let need = 8 + n * 12;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated point data: header declares {n} points ({need} bytes)"),
        });
    }
    if bytes.len() > need {
        return Err(Error::Format {
            offset: need as u64,
            message: format!("{} trailing bytes", bytes.len() - need),
        });
    }
    let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    Ok((0..n)
        .map(|i| {
            let o = 8 + i * 12;
            [f(o), f(o + 4), f(o + 8)]
        })
        .collect())
}

pub fn write_point_cloud(path: &Path, points: &[Point3]) -> Result<()> {
    fs::write(path, encode_point_cloud(points)).map_err(|e| Error::io(path, e))
}

pub fn read_point_cloud(path: &Path) -> Result<Vec<Point3>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_point_cloud(&bytes)
}

/// One box as stored on disk; the label is a class name. Detections carry a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub center: Point3,
    pub size: Point3,
    pub heading: f64,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl AnnotationRecord {
    pub fn from_box(b: &BoundingBox, vocab: &ClassVocab) -> Result<Self> {
        let label = b
            .label
            .ok_or_else(|| Error::Input("annotation box without a label".into()))?;
        Ok(Self {
            center: b.center,
            size: b.size,
            heading: b.heading,
            label: vocab.name(label)?.to_string(),
            score: b.score,
        })
    }

    pub fn to_box(&self, vocab: &ClassVocab) -> Result<BoundingBox> {
        let mut b = BoundingBox::new(self.center, self.size, self.heading)
            .with_label(vocab.index(&self.label)?);
        b.score = self.score;
        b.validate()?;
        Ok(b)
    }
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub cloud: PathBuf,
    pub annotation: PathBuf,
    pub split: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest and resolves its paths against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(entries
        .into_iter()
        .map(|e| ManifestEntry {
            cloud: base.join(e.cloud),
            annotation: base.join(e.annotation),
            split: e.split,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_round_trip() {
        let pts = vec![[0.5, -1.25, 2.0], [1e-3, 3.0, -0.75]];
        let back = decode_point_cloud(&encode_point_cloud(&pts)).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            for k in 0..3 {
                assert_eq!(a[k] as f32, b[k] as f32);
            }
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = encode_point_cloud(&[[1.0, 2.0, 3.0]]);
        bytes[0] = b'X';
        match decode_point_cloud(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode_point_cloud(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        match decode_point_cloud(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        write_annotations(&path, &[]).unwrap();
        assert!(read_annotations(&path).unwrap().is_empty());
        let recs = vec![AnnotationRecord {
            center: [0.1, 0.2, 0.3],
            size: [1.0, 2.0, 0.5],
            heading: 1.25,
            label: "chair".into(),
            score: None,
        }];
        write_annotations(&path, &recs).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), recs);
        assert!(!std::fs::read_to_string(&path).unwrap().contains("score"));
        let scored = vec![AnnotationRecord {
            score: Some(0.75),
            ..recs[0].clone()
        }];
        write_annotations(&path, &scored).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), scored);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let vocab = ClassVocab(vec!["chair".into()]);
        let rec = AnnotationRecord {
            center: [0.0; 3],
            size: [1.0; 3],
            heading: 0.0,
            label: "sofa".into(),
            score: None,
        };
        assert!(matches!(rec.to_box(&vocab), Err(Error::Input(_))));
    }
}
