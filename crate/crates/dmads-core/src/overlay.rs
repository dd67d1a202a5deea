//! Red/green visual-overlap rendering of a prediction against ground truth.

use crate::error::{Error, Result};
use crate::metrics::Mask;

/// Plain row-major RGB8 buffer; the CLI encodes it to PNG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        RgbBuffer {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let at = (y * self.width + x) * 3;
        self.pixels[at..at + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let at = (y * self.width + x) * 3;
        [self.pixels[at], self.pixels[at + 1], self.pixels[at + 2]]
    }
}

/// Error coding: false positives pure red, false negatives pure green, hits
/// white, true negatives black. When a base image is given, the correctly
/// classified pixels show the halved base instead, keeping the red/green
/// coding untouched so error pixels stay countable.
pub fn render_overlay(pred: &Mask, gt: &Mask, base: Option<&RgbBuffer>) -> Result<RgbBuffer> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            op: "overlay",
            lhs: format!("{:?}", pred.dims()),
            rhs: format!("{:?}", gt.dims()),
        });
    }
    let (h, w) = pred.dims();
    if let Some(b) = base {
        if (b.height, b.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "overlay base image",
                lhs: format!("({h}, {w})"),
                rhs: format!("({}, {})", b.height, b.width),
            });
        }
    }

    let mut out = RgbBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let rgb = match (pred.at(y, x), gt.at(y, x)) {
                (true, false) => [255, 0, 0],
                (false, true) => [0, 255, 0],
                (hit, _) => match base {
                    Some(b) => {
                        let [r, g, bl] = b.get(y, x);
                        let lift = if hit { 128 } else { 0 };
                        [
                            (r / 2).saturating_add(lift),
                            (g / 2).saturating_add(lift),
                            (bl / 2).saturating_add(lift),
                        ]
                    }
                    None => {
                        if hit {
                            [255, 255, 255]
                        } else {
                            [0, 0, 0]
                        }
                    }
                },
            };
            out.set(y, x, rgb);
        }
    }
    Ok(out)
}
