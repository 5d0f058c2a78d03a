//! Boxes, image dimensions, and the square-padded support crop window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Interpolation, Raster};

/// Default side length of support images.
pub const DEFAULT_SUPPORT_SIDE: usize = 224;

/// Axis-aligned box in 0-based image coordinates; `x2`/`y2` are exclusive
/// pixel edges, so `width = x2 - x1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::InvalidBox(format!(
                "({}, {}, {}, {}) must satisfy x1 < x2 and y1 < y2",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn within(&self, dims: ImageDims) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= dims.width as f64 && self.y2 <= dims.height as f64
    }

    pub fn clip(&self, dims: ImageDims) -> BBox {
        let (w, h) = (dims.width as f64, dims.height as f64);
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn flip_horizontal(&self, image_width: usize) -> BBox {
        let w = image_width as f64;
        BBox {
            x1: w - self.x2,
            y1: self.y1,
            x2: w - self.x1,
            y2: self.y2,
        }
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
}

impl ImageDims {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dataset(format!("image dims {width}x{height} must be positive")));
        }
        Ok(ImageDims { width, height })
    }
}

/// Square-padded crop window around an annotation box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub window: BBox,
    pub source: BBox,
}

impl CropWindow {
    /// Integer pixel range `[x0, x1) x [y0, y1)` covered by the window.
    pub fn pixel_range(&self) -> (usize, usize, usize, usize) {
        let w = &self.window;
        (
            w.x1.floor().max(0.0) as usize,
            w.y1.floor().max(0.0) as usize,
            w.x2.ceil() as usize,
            w.y2.ceil() as usize,
        )
    }
}

/// Pads the short side of `bbox` towards the long side, symmetrically,
/// then clamps to the image. The long-axis coordinates are never touched.
///
/// Pads are computed in real arithmetic. The padded edges are rounded
/// outward to the pixel grid unless that would make the padded extent
/// exceed the long side (odd differences on integer boxes); in that case the
/// max edge is placed at `min_edge + long_side`, which still contains the box.
pub fn square_pad_bbox(bbox: &BBox, dims: ImageDims) -> Result<CropWindow> {
    bbox.validate()?;
    if !bbox.within(dims) {
        return Err(Error::InvalidBox(format!(
            "{bbox} lies outside image {}x{}",
            dims.width, dims.height
        )));
    }
    let (w, h) = (bbox.width(), bbox.height());
    let mut window = *bbox;
    if w >= h {
        let (lo, hi) = pad_axis(bbox.y1, bbox.y2, w);
        window.y1 = lo.max(0.0);
        window.y2 = hi.min(dims.height as f64);
    } else {
        let (lo, hi) = pad_axis(bbox.x1, bbox.x2, h);
        window.x1 = lo.max(0.0);
        window.x2 = hi.min(dims.width as f64);
    }
    Ok(CropWindow { window, source: *bbox })
}

fn pad_axis(lo: f64, hi: f64, target: f64) -> (f64, f64) {
    let pad = (target - (hi - lo)) / 2.0;
    if pad == 0.0 {
        return (lo, hi);
    }
    let (rlo, rhi) = ((lo - pad).floor(), (hi + pad).ceil());
    if rhi - rlo <= target {
        (rlo, rhi)
    } else if rlo + target >= hi {
        (rlo, rlo + target)
    } else {
        (lo - pad, hi + pad)
    }
}

/// Resamples the window's pixels to `side x side`. Non-square windows
/// (clamped at the border) are stretched anisotropically.
pub fn extract_support_crop(image: &Raster, window: &CropWindow, side: usize, interp: Interpolation) -> Result<Raster> {
    let dims = ImageDims {
        width: image.width(),
        height: image.height(),
    };
    if !window.window.within(dims) || side == 0 {
        return Err(Error::WindowOutOfBounds {
            window: window.window.to_string(),
            width: dims.width,
            height: dims.height,
        });
    }
    let (x0, y0, x1, y1) = window.pixel_range();
    let patch = image.crop(x0, y0, x1.min(dims.width), y1.min(dims.height))?;
    Ok(patch.resize(side, side, interp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn d100() -> ImageDims {
        ImageDims::new(100, 100).unwrap()
    }

    #[test]
    fn worked_examples() {
        let cases = [
            (b(10., 20., 50., 40.), b(10., 10., 50., 50.)),
            (b(0., 0., 30., 30.), b(0., 0., 30., 30.)),
            (b(10., 2., 50., 10.), b(10., 0., 50., 26.)),
        ];
        for (input, expected) in cases {
            assert_eq!(square_pad_bbox(&input, d100()).unwrap().window, expected);
        }
    }

    #[test]
    fn tall_box_pads_horizontally() {
        let w = square_pad_bbox(&b(95., 10., 99., 30.), d100()).unwrap().window;
        assert_eq!(w, b(87., 10., 100., 30.));
    }

    #[test]
    fn odd_difference_keeps_extent() {
        let w = square_pad_bbox(&b(10., 10., 15., 12.), d100()).unwrap().window;
        assert_eq!((w.x1, w.x2), (10., 15.));
        assert_eq!(w.height(), 5.0);
        assert!(w.contains(&b(10., 10., 15., 12.)));
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let degenerate = BBox {
            x1: 5.0,
            y1: 5.0,
            x2: 5.0,
            y2: 9.0,
        };
        assert!(square_pad_bbox(&degenerate, d100()).is_err());
        assert!(BBox::new(3.0, 1.0, 2.0, 4.0).is_err());
    }

    #[test]
    fn iou_hand_values() {
        let a = b(0., 0., 10., 10.);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&b(20., 20., 30., 30.)), 0.0);
        assert!((a.iou(&b(5., 0., 15., 10.)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn crop_outside_image_fails() {
        let img = Raster::filled(20, 20, 3, 1.0);
        let window = CropWindow {
            window: b(10., 10., 30., 30.),
            source: b(12., 12., 28., 28.),
        };
        assert!(extract_support_crop(&img, &window, 8, Interpolation::Bilinear).is_err());
    }
}
