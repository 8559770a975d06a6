//! Synthetic clip corpus: domain types, scene synthesis, and disk I/O.

pub mod generate;
pub mod io;
pub mod template;

pub use generate::{generate_corpus, generate_scene, SceneSpec};
pub use io::{load_dataset, save_dataset, DatasetManifest};
pub use template::{
    action_rule, detokenize, make_explanation, parse_explanation, tokenize, vocab, vocab_size,
    ActionClass, Kind, Status, BOS, EOS, PAD, POSITIONS,
};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use ndarray::Array3;

/// One rendered frame of a clip.
///
/// Pixels are reals in [0,1] stored quantized to 1/255 steps (the PNG
/// wire format), so serialization round-trips are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// H x W x 3 raster; real value = byte / 255.
    pub pixels: Array3<u8>,
    /// Position in the clip, 0-based.
    pub index: usize,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Pixel value as a real in [0,1].
    pub fn value(&self, y: usize, x: usize, c: usize) -> f32 {
        f32::from(self.pixels[(y, x, c)]) / 255.0
    }
}

/// One detector output in the keyframe: index `I_i`, bounding box `B_i`,
/// and a fixed-size resampled pixel crop `P_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedObject {
    /// Position in the detection list (I_i).
    pub index: usize,
    /// Keyframe bounding box in pixel units (B_i).
    pub bbox: BBox,
    /// crop_size x crop_size x 3 resampled patch, values in [0,1] (P_i).
    pub crop: Array3<f32>,
}

/// A synthesized clip with keyframe annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip_id: String,
    /// Ordered frames; length n.
    pub frames: Vec<Frame>,
    /// The annotated frame (always the last frame here).
    pub keyframe_index: usize,
    /// Detector-stub outputs for the keyframe.
    pub detections: Vec<DetectedObject>,
    /// Ground-truth box of the significant object (unjittered).
    pub gt_box: BBox,
    /// Index into `detections` of the significant object's detection.
    pub gt_detection_index: usize,
    /// Ego reaction label.
    pub gt_action: ActionClass,
    /// Templated reference explanation.
    pub gt_explanation: String,
}

impl LabeledClip {
    pub fn keyframe(&self) -> &Frame {
        &self.frames[self.keyframe_index]
    }

    /// Check the structural invariants the rest of the pipeline relies on.
    pub fn validate(&self) -> Result<()> {
        let id = &self.clip_id;
        if self.frames.is_empty() {
            return Err(Error::data(format!("clip {id}: no frames")));
        }
        if self.keyframe_index >= self.frames.len() {
            return Err(Error::data(format!(
                "clip {id}: keyframe_index {} out of range (n = {})",
                self.keyframe_index,
                self.frames.len()
            )));
        }
        if self.detections.is_empty() {
            return Err(Error::data(format!("clip {id}: no detections")));
        }
        if self.gt_detection_index >= self.detections.len() {
            return Err(Error::data(format!(
                "clip {id}: gt_detection_index {} out of range ({} detections)",
                self.gt_detection_index,
                self.detections.len()
            )));
        }
        for (i, d) in self.detections.iter().enumerate() {
            if d.index != i {
                return Err(Error::data(format!(
                    "clip {id}: detection {i} carries index {}",
                    d.index
                )));
            }
            if !d.bbox.is_well_formed() || d.bbox.area() <= 0.0 {
                return Err(Error::data(format!("clip {id}: detection {i} box malformed")));
            }
        }
        let (h, w) = (self.frames[0].height() as f64, self.frames[0].width() as f64);
        let g = &self.gt_box;
        if !g.is_well_formed()
            || g.area() <= 0.0
            || g.x_min < 0.0
            || g.y_min < 0.0
            || g.x_max > w
            || g.y_max > h
        {
            return Err(Error::data(format!("clip {id}: gt_box {g:?} out of frame bounds")));
        }
        if template::parse_explanation(&self.gt_explanation).is_none() {
            return Err(Error::data(format!(
                "clip {id}: gt_explanation {:?} does not parse under the template grammar",
                self.gt_explanation
            )));
        }
        Ok(())
    }
}
