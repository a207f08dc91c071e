use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::ClipTensor;
use crate::error::{path_err, Error, Result};
use crate::numerics::Tensor;

/// Keypoints per person entry (COCO-18).
pub const NUM_KEYPOINTS: usize = 18;

/// One person in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub slot: usize,
    pub keypoints: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameRecord {
    pub people: Vec<PersonRecord>,
}

/// A clip in interchange form.
///
/// `width` and `height` are the source image size; when both are present
/// [`to_tensor`] maps pixel coordinates to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
    pub frames: Vec<FrameRecord>,
}

// Loose shapes used while parsing, so arity problems get precise paths.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClip {
    fps: f64,
    #[serde(default)]
    label: Option<usize>,
    #[serde(default)]
    width: Option<f64>,
    #[serde(default)]
    height: Option<f64>,
    frames: Vec<RawFrame>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    people: Vec<RawPerson>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPerson {
    slot: usize,
    keypoints: Vec<Vec<f64>>,
}

fn parse_error(path: impl Into<String>, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        field: field.to_string(),
        message: message.into(),
    }
}

/// Parses and validates one clip document. `source` names the document
/// in error messages.
pub fn parse_clip(document: &str, source: &str) -> Result<ClipRecord> {
    let raw: RawClip = serde_json::from_str(document).map_err(|e| parse_error(source, "document", e.to_string()))?;
    if !(raw.fps > 0.0) || !raw.fps.is_finite() {
        return Err(parse_error(
            source,
            "fps",
            format!("must be a positive number, got {}", raw.fps),
        ));
    }
    for (name, v) in [("width", raw.width), ("height", raw.height)] {
        if let Some(v) = v {
            if !(v > 0.0) {
                return Err(parse_error(source, name, format!("must be positive, got {v}")));
            }
        }
    }
    let mut frames = Vec::with_capacity(raw.frames.len());
    for (fi, frame) in raw.frames.into_iter().enumerate() {
        let mut people = Vec::with_capacity(frame.people.len());
        for (pi, person) in frame.people.into_iter().enumerate() {
            let at = format!("{source}: frames[{fi}].people[{pi}]");
            if people.iter().any(|p: &PersonRecord| p.slot == person.slot) {
                return Err(parse_error(
                    at,
                    "slot",
                    format!("slot {} appears twice in frame {fi}", person.slot),
                ));
            }
            if person.keypoints.len() != NUM_KEYPOINTS {
                return Err(parse_error(
                    at,
                    "keypoints",
                    format!(
                        "frame {fi} has {} keypoints, expected {NUM_KEYPOINTS}",
                        person.keypoints.len()
                    ),
                ));
            }
            let mut keypoints = Vec::with_capacity(NUM_KEYPOINTS);
            for (ki, kp) in person.keypoints.into_iter().enumerate() {
                match kp[..] {
                    [x, y] => keypoints.push([x, y]),
                    _ => {
                        return Err(parse_error(
                            at,
                            "keypoints",
                            format!("keypoint {ki} in frame {fi} has {} values, expected 2", kp.len()),
                        ))
                    }
                }
            }
            people.push(PersonRecord {
                slot: person.slot,
                keypoints,
            });
        }
        frames.push(FrameRecord { people });
    }
    Ok(ClipRecord {
        fps: raw.fps,
        label: raw.label,
        width: raw.width,
        height: raw.height,
        frames,
    })
}

pub fn parse_clip_file(path: &Path) -> Result<ClipRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| path_err(path, e))?;
    parse_clip(&text, &path.display().to_string())
}

/// Canonical form: compact JSON, fields in declaration order, absent
/// optionals omitted.
pub fn serialize_clip(record: &ClipRecord) -> String {
    serde_json::to_string(record).expect("clip records always serialize")
}

/// Reads one clip per non-empty line.
pub fn read_clips_jsonl<R: BufRead>(reader: R, source: &str) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_clip(&line, &format!("{source}:{}", i + 1))?);
    }
    Ok(out)
}

/// Dense `[m_cap, 2, T, 18]` tensor. Absent persons stay zero, as do
/// missing `(0, 0)` keypoints.
pub fn to_tensor(record: &ClipRecord, m_cap: usize) -> Result<ClipTensor> {
    if m_cap == 0 {
        return Err(Error::Config("person capacity must be >= 1".into()));
    }
    let t = record.frames.len();
    let v = NUM_KEYPOINTS;
    let scale = match (record.width, record.height) {
        (Some(w), Some(h)) => Some((w / 2.0, h / 2.0)),
        _ => None,
    };
    let mut data = Tensor::zeros(&[m_cap, 2, t, v]);
    for (f, frame) in record.frames.iter().enumerate() {
        for person in &frame.people {
            if person.slot >= m_cap {
                return Err(Error::Data(format!(
                    "frame {f}: person slot {} exceeds capacity of {m_cap}",
                    person.slot
                )));
            }
            for (j, &[x, y]) in person.keypoints.iter().enumerate() {
                let (x, y) = match scale {
                    Some((hw, hh)) if (x, y) != (0.0, 0.0) => ((x - hw) / hw, (y - hh) / hh),
                    _ => (x, y),
                };
                data.set(&[person.slot, 0, f, j], x);
                data.set(&[person.slot, 1, f, j], y);
            }
        }
    }
    ClipTensor::new(data, record.fps)
}

/// Inverse of [`to_tensor`] for normalized coordinates: one person entry
/// per slot with any non-zero keypoint. No image size is recorded, so
/// re-reading passes coordinates through unchanged.
pub fn from_tensor(clip: &ClipTensor, label: Option<usize>) -> Result<ClipRecord> {
    let (m, c, t, v) = (clip.persons(), clip.channels(), clip.frames(), clip.joints());
    if c != 2 || v != NUM_KEYPOINTS {
        return Err(Error::Dimension(format!(
            "clip documents hold 2 channels and {NUM_KEYPOINTS} joints, got {c} and {v}"
        )));
    }
    let d = clip.data.data();
    let frames = (0..t)
        .map(|f| FrameRecord {
            people: (0..m)
                .map(|slot| PersonRecord {
                    slot,
                    keypoints: (0..v)
                        .map(|j| [d[((slot * 2) * t + f) * v + j], d[((slot * 2 + 1) * t + f) * v + j]])
                        .collect(),
                })
                .filter(|p| p.keypoints.iter().any(|&[x, y]| x != 0.0 || y != 0.0))
                .collect(),
        })
        .collect();
    Ok(ClipRecord {
        fps: clip.fps,
        label,
        width: None,
        height: None,
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
}

/// Clip files with their split, plus the class-name table (index = label).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub classes: Vec<String>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.classes.len() {
            return Err(Error::Data(format!(
                "label {label} outside the {} declared classes",
                self.classes.len()
            )));
        }
        Ok(())
    }
}
