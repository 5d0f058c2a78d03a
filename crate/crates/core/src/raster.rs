//! Planar `f32` images (channel-major, values in `[0, 255]`) and the
//! resampling used for support crops.

use std::path::Path;

use image::{DynamicImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_planar(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "raster data has {} values, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Raster::new(w, h, 3);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f32);
            }
        }
        out
    }

    /// Converts to 8-bit RGB; single-channel rasters are replicated.
    pub fn to_rgb8(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut px = [0u8; 3];
                for (c, p) in px.iter_mut().enumerate() {
                    let src = if self.channels == 1 {
                        0
                    } else {
                        c.min(self.channels - 1)
                    };
                    *p = self.get(src, y, x).round().clamp(0.0, 255.0) as u8;
                }
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Integer sub-image `[x0, x1) x [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Raster> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return Err(Error::WindowOutOfBounds {
                window: format!("[{x0},{y0},{x1},{y1}]"),
                width: self.width,
                height: self.height,
            });
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let mut out = Raster::new(w, h, self.channels);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        Ok(out)
    }

    /// Resamples to `out_w x out_h` with half-pixel-centre alignment, so an
    /// equal-size resize is the identity.
    pub fn resize(&self, out_w: usize, out_h: usize, interp: Interpolation) -> Raster {
        let mut out = Raster::new(out_w, out_h, self.channels);
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        match interp {
            Interpolation::Nearest => {
                for y in 0..out_h {
                    let src_y = (((y as f64 + 0.5) * sy).floor() as usize).min(self.height - 1);
                    for x in 0..out_w {
                        let src_x = (((x as f64 + 0.5) * sx).floor() as usize).min(self.width - 1);
                        for c in 0..self.channels {
                            out.set(c, y, x, self.get(c, src_y, src_x));
                        }
                    }
                }
            }
            Interpolation::Bilinear => {
                let taps = |pos: f64, len: usize| -> (usize, usize, f32) {
                    let p = pos.clamp(0.0, (len - 1) as f64);
                    let lo = p.floor() as usize;
                    let hi = (lo + 1).min(len - 1);
                    (lo, hi, (p - lo as f64) as f32)
                };
                for y in 0..out_h {
                    let (y0, y1, fy) = taps((y as f64 + 0.5) * sy - 0.5, self.height);
                    for x in 0..out_w {
                        let (x0, x1, fx) = taps((x as f64 + 0.5) * sx - 0.5, self.width);
                        for c in 0..self.channels {
                            let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                            let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                            out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Raster {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }
}
