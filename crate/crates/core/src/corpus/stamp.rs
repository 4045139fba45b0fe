//! Title stamping: render the document name onto each page image.
//!
//! Retrieval queries routinely name the document they come from, so the page
//! images must carry that identity visibly. The title is rendered into a
//! **new band added above the page** rather than overlaid on it — page
//! content is evidence, and evidence must never be occluded. The original
//! image file is left untouched; the stamped copy is a separate artifact.
//!
//! Rendering uses a fixed 8×8 bitmap font scaled to the band height. Output
//! is fully deterministic: the same input image and title always produce the
//! same PNG bytes, which the pipeline's reproducibility guarantee relies on.

use std::path::PathBuf;

use font8x8::legacy::BASIC_LEGACY;
use image::{Rgba, RgbaImage};

use super::{CorpusError, PageRecord};

/// Default band height as a fraction of the page height.
pub const DEFAULT_BAND_FRAC: f64 = 0.05;

/// Stamping parameters.
#[derive(Debug, Clone)]
pub struct StampOptions {
    /// Band height as a fraction of the original page height.
    pub band_frac: f64,
    /// Where the stamped PNG is written.
    pub output_path: PathBuf,
}

/// Band height in pixels for a page of height `h`.
pub fn band_height(image_height: u32, band_frac: f64) -> u32 {
    ((image_height as f64 * band_frac).round() as u32).max(1)
}

/// Renders `title` into a new top band and writes the stamped page image.
///
/// Returns the updated record (new `image_ref`, `stamped = true`). Stamping
/// an already-stamped record is rejected: a second pass would double-render
/// the title and silently grow the page.
pub fn stamp_title(
    page: &PageRecord,
    title: &str,
    options: &StampOptions,
) -> Result<PageRecord, CorpusError> {
    if page.stamped {
        return Err(CorpusError::AlreadyStamped { page_id: page.page_id.clone() });
    }
    let source = image::open(&page.image_ref)
        .map_err(|source| CorpusError::Decode { path: page.image_ref.clone(), source })?
        .to_rgba8();
    let (width, height) = source.dimensions();
    let band = band_height(height, options.band_frac);

    let mut canvas = RgbaImage::from_pixel(width, height + band, Rgba([255, 255, 255, 255]));
    // Original page, unmodified, below the band.
    for (x, y, pixel) in source.enumerate_pixels() {
        canvas.put_pixel(x, y + band, *pixel);
    }
    draw_text(&mut canvas, title, band, width);

    if let Some(parent) = options.output_path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|source| CorpusError::Io { path: parent.to_path_buf(), source })?;
    }
    canvas
        .save(&options.output_path)
        .map_err(|source| CorpusError::Decode { path: options.output_path.clone(), source })?;

    let mut stamped = page.clone();
    stamped.image_ref = options.output_path.clone();
    stamped.stamped = true;
    Ok(stamped)
}

/// Draws `text` in black, scaled to roughly 3/4 of the band height and
/// clipped to the band; glyphs outside the basic ASCII range render as '?'.
fn draw_text(canvas: &mut RgbaImage, text: &str, band: u32, width: u32) {
    let scale = ((band * 3 / 4) / 8).max(1);
    let margin = scale * 2;
    let y0 = (band.saturating_sub(8 * scale)) / 2;
    let black = Rgba([0, 0, 0, 255]);

    let mut x0 = margin;
    for c in text.chars() {
        if x0 + 8 * scale > width {
            break;
        }
        let glyph = glyph_for(c);
        for (row, byte) in glyph.iter().enumerate() {
            for bit in 0..8u32 {
                if byte & (1 << bit) == 0 {
                    continue;
                }
                // One glyph pixel becomes a scale×scale block.
                for dy in 0..scale {
                    for dx in 0..scale {
                        let x = x0 + bit * scale + dx;
                        let y = y0 + row as u32 * scale + dy;
                        if x < width && y < band {
                            canvas.put_pixel(x, y, black);
                        }
                    }
                }
            }
        }
        x0 += 8 * scale;
    }
}

/// 8×8 bitmap for a character; ASCII only, '?' for everything else.
fn glyph_for(c: char) -> [u8; 8] {
    let idx = c as usize;
    if idx < BASIC_LEGACY.len() {
        BASIC_LEGACY[idx]
    } else {
        BASIC_LEGACY['?' as usize]
    }
}
