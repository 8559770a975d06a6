//! Dataset directory layout and (de)serialization.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/clips/<clip_id>/frame_<k>.png      8-bit RGB
//! <dir>/clips/<clip_id>/crop_<i>.png       detector crop P_i
//! <dir>/clips/<clip_id>/annotation.json    keyframe annotations
//! ```
//!
//! `load_dataset(save_dataset(x)) == x` field for field: frames and crops are
//! stored losslessly (pixels are 1/255-quantized by construction) and box
//! coordinates round-trip exactly through JSON float serialization.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scene::template::{self, ActionClass, Kind, Status};
use crate::scene::{generate::SceneSpec, DetectedObject, Frame, LabeledClip};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Dataset-level metadata stored as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub version: u32,
    /// The full generating recipe (includes frame dims, n_frames, patch
    /// size, and seed), sufficient to regenerate the corpus.
    pub spec: SceneSpec,
    pub object_kinds: Vec<String>,
    pub status_phrases: Vec<String>,
    pub position_phrases: Vec<String>,
    pub action_labels: Vec<String>,
    pub token_vocab: Vec<String>,
    /// The fixed (kind, position) -> ego action rule table.
    pub action_table: Vec<ActionRuleEntry>,
    /// Corpus marginals of gt_action.
    pub action_counts: BTreeMap<String, usize>,
    pub clip_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRuleEntry {
    pub kind: String,
    pub position: String,
    pub action: String,
}

impl DatasetManifest {
    pub fn for_corpus(spec: &SceneSpec, clips: &[LabeledClip]) -> Result<Self> {
        let mut action_counts = BTreeMap::new();
        for a in ActionClass::ALL {
            action_counts.insert(a.label().to_string(), 0usize);
        }
        for c in clips {
            *action_counts
                .get_mut(c.gt_action.label())
                .expect("all action labels pre-inserted") += 1;
        }
        let mut action_table = Vec::new();
        for kind in Kind::ALL {
            for pos in template::POSITIONS {
                action_table.push(ActionRuleEntry {
                    kind: kind.name().to_string(),
                    position: pos.to_string(),
                    action: template::action_rule(kind, pos)?.label().to_string(),
                });
            }
        }
        Ok(DatasetManifest {
            name: "drivelens-synthetic".to_string(),
            version: 1,
            spec: spec.clone(),
            object_kinds: Kind::ALL.iter().map(|k| k.name().to_string()).collect(),
            status_phrases: Status::ALL.iter().map(|s| s.phrase().to_string()).collect(),
            position_phrases: template::POSITIONS.iter().map(|p| p.to_string()).collect(),
            action_labels: ActionClass::ALL.iter().map(|a| a.label().to_string()).collect(),
            token_vocab: template::vocab(),
            action_table,
            action_counts,
            clip_ids: clips.iter().map(|c| c.clip_id.clone()).collect(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    keyframe_index: usize,
    detections: Vec<DetectionEntry>,
    gt_box: [f64; 4],
    gt_detection_index: usize,
    gt_action: String,
    gt_explanation: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionEntry {
    index: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    crop_file: String,
}

/// Write the corpus to `dir`, creating it if needed.
pub fn save_dataset(clips: &[LabeledClip], dir: &Path, spec: &SceneSpec) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::for_corpus(spec, clips)?;
    fs::create_dir_all(dir.join("clips"))?;
    write_json_pretty(&dir.join("manifest.json"), &manifest)?;
    for clip in clips {
        let clip_dir = dir.join("clips").join(&clip.clip_id);
        fs::create_dir_all(&clip_dir)?;
        for frame in &clip.frames {
            save_rgb_png(&clip_dir.join(format!("frame_{}.png", frame.index)), &frame.pixels)?;
        }
        let mut detections = Vec::new();
        for d in &clip.detections {
            let crop_file = format!("crop_{}.png", d.index);
            let quantized = d.crop.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
            save_rgb_png(&clip_dir.join(&crop_file), &quantized)?;
            detections.push(DetectionEntry {
                index: d.index,
                bbox: d.bbox.as_array(),
                crop_file,
            });
        }
        let ann = AnnotationFile {
            keyframe_index: clip.keyframe_index,
            detections,
            gt_box: clip.gt_box.as_array(),
            gt_detection_index: clip.gt_detection_index,
            gt_action: clip.gt_action.label().to_string(),
            gt_explanation: clip.gt_explanation.clone(),
        };
        write_json_pretty(&clip_dir.join("annotation.json"), &ann)?;
    }
    Ok(manifest)
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Vec<LabeledClip>, DatasetManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::data(format!("read {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::data(format!("manifest.json: {e}")))?;
    let mut clips = Vec::with_capacity(manifest.clip_ids.len());
    for clip_id in &manifest.clip_ids {
        clips.push(load_clip(dir, clip_id, &manifest.spec)?);
    }
    Ok((clips, manifest))
}

fn load_clip(dir: &Path, clip_id: &str, spec: &SceneSpec) -> Result<LabeledClip> {
    let clip_dir = dir.join("clips").join(clip_id);
    let ann_path = clip_dir.join("annotation.json");
    let ann_text = fs::read_to_string(&ann_path)
        .map_err(|e| Error::data(format!("clip {clip_id}: read annotation.json: {e}")))?;
    let ann: AnnotationFile = serde_json::from_str(&ann_text)
        .map_err(|e| Error::data(format!("clip {clip_id}: annotation.json: {e}")))?;

    let mut frames = Vec::with_capacity(spec.n_frames);
    for k in 0..spec.n_frames {
        let path = clip_dir.join(format!("frame_{k}.png"));
        let pixels = load_rgb_png(&path, spec.frame_height, spec.frame_width)
            .map_err(|e| Error::data(format!("clip {clip_id}: frame_{k}.png: {e}")))?;
        frames.push(Frame { pixels, index: k });
    }

    let mut detections = Vec::with_capacity(ann.detections.len());
    for d in &ann.detections {
        let crop_u8 = load_rgb_png(&clip_dir.join(&d.crop_file), spec.crop_size, spec.crop_size)
            .map_err(|e| Error::data(format!("clip {clip_id}: {}: {e}", d.crop_file)))?;
        detections.push(DetectedObject {
            index: d.index,
            bbox: BBox::from_array(d.bbox),
            crop: crop_u8.mapv(|v| f32::from(v) / 255.0),
        });
    }

    let clip = LabeledClip {
        clip_id: clip_id.to_string(),
        frames,
        keyframe_index: ann.keyframe_index,
        detections,
        gt_box: BBox::from_array(ann.gt_box),
        gt_detection_index: ann.gt_detection_index,
        gt_action: ActionClass::from_label(&ann.gt_action)
            .map_err(|e| Error::data(format!("clip {clip_id}: gt_action: {e}")))?,
        gt_explanation: ann.gt_explanation,
    };
    clip.validate()?;
    Ok(clip)
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn save_rgb_png(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let raw: Vec<u8> = pixels.iter().copied().collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::shape("pixel buffer size mismatch".to_string()))?;
    img.save(path)?;
    Ok(())
}

fn load_rgb_png(path: &Path, expect_h: usize, expect_w: usize) -> Result<Array3<u8>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != (expect_h, expect_w) {
        return Err(Error::data(format!("expected {expect_w}x{expect_h}, got {w}x{h}")));
    }
    let raw = img.into_raw();
    Array3::from_shape_vec((h, w, 3), raw)
        .map_err(|e| Error::shape(format!("png buffer: {e}")))
}
