//! Keyframe overlay rendering.
//!
//! Draws a clip's keyframe with the binary patch attention map as a
//! two-color tint (red = attended, blue = suppressed), detection boxes
//! whose border brightness tracks the continuous per-object significance,
//! the ground-truth box, and the generated-vs-reference sentences in a
//! margin band. The output raster is the frame upscaled by an integer
//! factor, so its dimensions are exactly `(w * scale, h * scale)`.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::font;
use crate::geometry::{BBox, PatchAttentionMap};
use crate::scene::LabeledClip;

/// Default integer upscale factor.
pub const DEFAULT_SCALE: usize = 8;

/// Blend weight of the patch tint over the underlying pixel.
const TINT_ALPHA: f32 = 0.35;
/// Tint for attended (map = 1) patches.
const TINT_RED: Rgb<u8> = Rgb([255, 40, 40]);
/// Tint for suppressed (map = 0) patches.
const TINT_BLUE: Rgb<u8> = Rgb([40, 80, 255]);
/// Ground-truth box color.
const GT_GREEN: Rgb<u8> = Rgb([0, 230, 0]);

/// Everything needed to render one overlay image.
pub struct OverlaySpec<'a> {
    pub clip: &'a LabeledClip,
    /// Binary patch map to tint with; `None` renders the frame untinted
    /// (the "no attention" variant).
    pub map: Option<&'a PatchAttentionMap>,
    /// Per-detection significance weights in [0,1], same order and length
    /// as `clip.detections`; `None` draws all detection borders at full
    /// intensity.
    pub significance: Option<&'a [f64]>,
    /// Generated sentence for the margin caption.
    pub generated: &'a str,
    /// Integer upscale factor, >= 1.
    pub scale: usize,
}

fn blend(dst: Rgb<u8>, tint: Rgb<u8>, alpha: f32) -> Rgb<u8> {
    let mix = |d: u8, t: u8| -> u8 {
        let v = f32::from(d) * (1.0 - alpha) + f32::from(t) * alpha;
        v.round().clamp(0.0, 255.0) as u8
    };
    Rgb([
        mix(dst[0], tint[0]),
        mix(dst[1], tint[1]),
        mix(dst[2], tint[2]),
    ])
}

/// Draw an axis-aligned rectangle outline in image coordinates, clamped to
/// the canvas. `thickness` grows inward from the outline.
fn draw_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, thickness: i64, color: Rgb<u8>) {
    let (w, h) = (i64::from(img.width()), i64::from(img.height()));
    if x1 <= x0 || y1 <= y0 {
        return;
    }
    let on_border = |x: i64, y: i64| -> bool {
        x - x0 < thickness || x1 - 1 - x < thickness || y - y0 < thickness || y1 - 1 - y < thickness
    };
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            if on_border(x, y) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Scale a frame-coordinate box to canvas coordinates.
fn scaled_box(b: &BBox, scale: usize) -> (i64, i64, i64, i64) {
    let s = scale as f64;
    (
        (b.x_min * s).round() as i64,
        (b.y_min * s).round() as i64,
        (b.x_max * s).round() as i64,
        (b.y_max * s).round() as i64,
    )
}

fn draw_text(img: &mut RgbImage, text: &str, x0: usize, y0: usize, fs: usize, color: Rgb<u8>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    for (ci, c) in text.chars().enumerate() {
        let gx = x0 + ci * font::ADVANCE * fs;
        if gx + font::GLYPH_W * fs > w {
            break; // clip text that runs off the right edge
        }
        let rows = font::glyph(c);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..font::GLYPH_W {
                if row & (1 << (font::GLYPH_W - 1 - rx)) == 0 {
                    continue;
                }
                for dy in 0..fs {
                    for dx in 0..fs {
                        let (px, py) = (gx + rx * fs + dx, y0 + ry * fs + dy);
                        if px < w && py < h {
                            img.put_pixel(px as u32, py as u32, color);
                        }
                    }
                }
            }
        }
    }
}

/// Render the overlay described by `spec`.
pub fn render_overlay(spec: &OverlaySpec) -> Result<RgbImage> {
    let clip = spec.clip;
    let frame = clip.keyframe();
    let (h, w) = (frame.height(), frame.width());
    if spec.scale == 0 {
        return Err(Error::config("upscale factor must be at least 1"));
    }
    if let Some(map) = spec.map {
        if map.height != h || map.width != w {
            return Err(Error::shape(format!(
                "attention map covers {}x{} but the frame is {w}x{h}",
                map.width, map.height
            )));
        }
    }
    if let Some(sig) = spec.significance {
        if sig.len() != clip.detections.len() {
            return Err(Error::shape(format!(
                "{} significance weights for {} detections",
                sig.len(),
                clip.detections.len()
            )));
        }
    }

    // Base raster: the keyframe with the binary patch tint applied, then
    // upscaled with nearest-neighbor so patch boundaries stay crisp.
    let scale = spec.scale;
    let (out_w, out_h) = (w * scale, h * scale);
    let mut img = RgbImage::new(out_w as u32, out_h as u32);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (y, x) = (oy / scale, ox / scale);
            let base = Rgb([
                frame.pixels[(y, x, 0)],
                frame.pixels[(y, x, 1)],
                frame.pixels[(y, x, 2)],
            ]);
            let px = match spec.map {
                Some(map) => {
                    let p = map.patch_size;
                    let tint = if map.grid[(y / p, x / p)] == 1 {
                        TINT_RED
                    } else {
                        TINT_BLUE
                    };
                    blend(base, tint, TINT_ALPHA)
                }
                None => base,
            };
            img.put_pixel(ox as u32, oy as u32, px);
        }
    }

    // Detection borders: brightness proportional to significance.
    let thickness = (scale / 4).max(1) as i64;
    for (i, det) in clip.detections.iter().enumerate() {
        let a = spec
            .significance
            .map_or(1.0, |sig| sig[i].clamp(0.0, 1.0));
        let level = (55.0 + 200.0 * a).round() as u8;
        let color = Rgb([level, level, 0]);
        let (x0, y0, x1, y1) = scaled_box(&det.bbox, scale);
        draw_rect(&mut img, x0, y0, x1, y1, thickness, color);
    }
    // Ground-truth box on top.
    let (x0, y0, x1, y1) = scaled_box(&clip.gt_box, scale);
    draw_rect(&mut img, x0, y0, x1, y1, thickness, GT_GREEN);

    // Caption band along the bottom edge: generated vs reference.
    let fs = (scale / 4).max(1);
    let line_h = (font::GLYPH_H + 1) * fs;
    let band_h = 2 * line_h + 3 * fs;
    if band_h <= out_h {
        let band_top = out_h - band_h;
        for y in band_top..out_h {
            for x in 0..out_w {
                let px = *img.get_pixel(x as u32, y as u32);
                img.put_pixel(x as u32, y as u32, blend(px, Rgb([0, 0, 0]), 0.65));
            }
        }
        let white = Rgb([255, 255, 255]);
        let gen_line = format!("G: {}", spec.generated);
        let ref_line = format!("R: {}", clip.gt_explanation);
        draw_text(&mut img, &gen_line, fs, band_top + fs, fs, white);
        draw_text(&mut img, &ref_line, fs, band_top + fs + line_h + fs, fs, white);
    }

    Ok(img)
}

/// Write an image as PNG, creating parent directories as needed.
pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
