//! Colored geometric shapes on textured backgrounds with exact boxes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{write_index, ClassId, ClassInfo, DatasetIndex, ImageId, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageDims};
use crate::raster::Raster;
use crate::rng::{rng_for, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Diamond,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
    ];

    /// Whether the point `(dx, dy)` relative to the center lies inside a
    /// shape of extent `size`.
    pub fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        let r = size / 2.0;
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                // apex up, base at the bottom edge
                let t = (dy + r) / size;
                (0.0..=1.0).contains(&t) && dx.abs() <= r * t
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Cross => {
                let arm = size / 6.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }

    fn base_color(self) -> [f32; 3] {
        match self {
            ShapeKind::Disk => [220.0, 60.0, 60.0],
            ShapeKind::Square => [60.0, 200.0, 80.0],
            ShapeKind::Triangle => [70.0, 90.0, 235.0],
            ShapeKind::Diamond => [235.0, 210.0, 60.0],
            ShapeKind::Cross => [200.0, 70.0, 200.0],
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Cross => "cross",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Number of shape classes, taken in the order of [`ShapeKind::ALL`].
    pub classes: usize,
    pub images: usize,
    pub image_size: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Tie each class to a jittered base color; otherwise colors are random.
    pub class_colors: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 3,
            images: 120,
            image_size: 96,
            max_objects: 4,
            min_size: 14,
            max_size: 30,
            class_colors: true,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=ShapeKind::ALL.len()).contains(&self.classes) {
            return bad(format!("synthetic classes must be in 2..={}", ShapeKind::ALL.len()));
        }
        if self.images == 0 || self.max_objects == 0 {
            return bad("synthetic images and max_objects must be positive".into());
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size + 4 > self.image_size {
            return bad(format!(
                "shape sizes {}..{} do not fit image size {}",
                self.min_size, self.max_size, self.image_size
            ));
        }
        Ok(())
    }

    pub fn shapes(&self) -> &'static [ShapeKind] {
        &ShapeKind::ALL[..self.classes.min(ShapeKind::ALL.len())]
    }

    pub fn class_infos(&self) -> Vec<ClassInfo> {
        self.shapes()
            .iter()
            .enumerate()
            .map(|(i, s)| ClassInfo {
                id: ClassId(i as u32 + 1),
                name: s.to_string(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub raster: Raster,
    pub boxes: Vec<(ClassId, BBox)>,
    /// Row-major; 0 is background, `j + 1` marks pixels of object `j`.
    pub instance_mask: Vec<u16>,
}

const PLACEMENT_RETRIES: usize = 60;

/// Renders image `i` of the dataset described by `config`.
pub fn render_synthetic_image(config: &SyntheticConfig, i: usize) -> SyntheticImage {
    let mut rng = rng_for(config.seed, &format!("synth/{i}"));
    let n = config.image_size;
    let mut raster = background(&mut rng, n);
    let mut mask = vec![0u16; n * n];
    let want = rng.gen_range(1..=config.max_objects);
    let shapes = config.shapes();

    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut boxes = Vec::new();
    for _ in 0..want {
        let class = rng.gen_range(0..shapes.len());
        let size = rng.gen_range(config.min_size..=config.max_size) as f64;
        let mut spot = None;
        for _ in 0..PLACEMENT_RETRIES {
            let lo = size / 2.0 + 1.0;
            let hi = n as f64 - size / 2.0 - 1.0;
            let cx = rng.gen_range(lo..hi);
            let cy = rng.gen_range(lo..hi);
            let clear = placed.iter().all(|&(px, py, ps)| {
                let gap = (ps + size) / 2.0 + 2.0;
                (px - cx).abs() > gap || (py - cy).abs() > gap
            });
            if clear {
                spot = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = spot else {
            log::debug!("synthetic image {i}: placed {} of {want} shapes", boxes.len());
            break;
        };
        let color = shape_color(&mut rng, shapes[class], config.class_colors);
        let label = boxes.len() as u16 + 1;
        if let Some(bbox) = draw_shape(&mut raster, &mut mask, shapes[class], cx, cy, size, color, label) {
            placed.push((cx, cy, size));
            boxes.push((ClassId(class as u32 + 1), bbox));
        }
    }
    SyntheticImage {
        raster,
        boxes,
        instance_mask: mask,
    }
}

fn background(rng: &mut Rng, n: usize) -> Raster {
    let base: [f32; 3] = [
        rng.gen_range(90.0..140.0),
        rng.gen_range(90.0..140.0),
        rng.gen_range(90.0..140.0),
    ];
    let fx = rng.gen_range(0.05..0.2);
    let fy = rng.gen_range(0.05..0.2);
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let mut r = Raster::new(n, n, 3);
    for y in 0..n {
        for x in 0..n {
            let wave = 10.0 * ((x as f32 * fx + y as f32 * fy) + phase).sin();
            for (c, b) in base.iter().enumerate() {
                let noise: f32 = rng.gen_range(-12.0..12.0);
                r.set(c, y, x, (b + wave + noise).clamp(0.0, 255.0));
            }
        }
    }
    r
}

fn shape_color(rng: &mut Rng, shape: ShapeKind, by_class: bool) -> [f32; 3] {
    if by_class {
        shape
            .base_color()
            .map(|v| (v + rng.gen_range(-25.0..25.0)).clamp(0.0, 255.0))
    } else {
        loop {
            let c: [f32; 3] = [
                rng.gen_range(0.0..255.0),
                rng.gen_range(0.0..255.0),
                rng.gen_range(0.0..255.0),
            ];
            let spread = c.iter().map(|v| (v - 115.0).abs()).fold(0.0, f32::max);
            if spread > 70.0 {
                return c;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_shape(
    raster: &mut Raster,
    mask: &mut [u16],
    shape: ShapeKind,
    cx: f64,
    cy: f64,
    size: f64,
    color: [f32; 3],
    label: u16,
) -> Option<BBox> {
    let n = raster.width();
    let r = size / 2.0 + 1.0;
    let (x_lo, x_hi) = (((cx - r).floor().max(0.0)) as usize, ((cx + r).ceil() as usize).min(n));
    let (y_lo, y_hi) = (
        ((cy - r).floor().max(0.0)) as usize,
        ((cy + r).ceil() as usize).min(raster.height()),
    );
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, size) {
                for (c, v) in color.iter().enumerate() {
                    raster.set(c, y, x, *v);
                }
                mask[y * n + x] = label;
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
        .ok()
        .filter(|_| x1 != usize::MAX)
}

/// Renders every image into `out_dir/images` and writes `out_dir/index.tsv`.
pub fn generate_synthetic_dataset(config: &SyntheticConfig, out_dir: &Path) -> Result<DatasetIndex> {
    config.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let dims = ImageDims::new(config.image_size, config.image_size)?;
    let mut records = Vec::with_capacity(config.images);
    for i in 0..config.images {
        let img = render_synthetic_image(config, i);
        let rel = PathBuf::from("images").join(format!("{i:05}.png"));
        img.raster.save_png(&out_dir.join(&rel))?;
        let record = ImageRecord {
            id: ImageId(i as u32),
            path: rel,
            dims,
        };
        records.push((record, img.boxes));
    }
    let index = DatasetIndex::new(out_dir, config.class_infos(), records)?;
    let mut extra = BTreeMap::new();
    extra.insert("generator".to_string(), "synthetic".to_string());
    extra.insert("seed".to_string(), config.seed.to_string());
    write_index(&index, &out_dir.join("index.tsv"), &extra)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            images: 30,
            seed: 4,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn pixel_scan_boxes_are_tight() {
        let cfg = small();
        for i in 0..cfg.images {
            let img = render_synthetic_image(&cfg, i);
            assert!(!img.boxes.is_empty() && img.boxes.len() <= cfg.max_objects);
            let n = cfg.image_size;
            for (j, (_, b)) in img.boxes.iter().enumerate() {
                let label = j as u16 + 1;
                let (mut x1, mut y1, mut x2, mut y2) = (n, n, 0, 0);
                for y in 0..n {
                    for x in 0..n {
                        if img.instance_mask[y * n + x] == label {
                            assert!((x as f64) >= b.x1 && (x as f64) < b.x2 && (y as f64) >= b.y1 && (y as f64) < b.y2);
                            x1 = x1.min(x);
                            y1 = y1.min(y);
                            x2 = x2.max(x + 1);
                            y2 = y2.max(y + 1);
                        }
                    }
                }
                assert_eq!(*b, BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap());
            }
        }
    }

    #[test]
    fn boxes_do_not_overlap() {
        let cfg = small();
        for i in 0..cfg.images {
            let img = render_synthetic_image(&cfg, i);
            for a in 0..img.boxes.len() {
                for b in a + 1..img.boxes.len() {
                    assert_eq!(img.boxes[a].1.intersection(&img.boxes[b].1), 0.0);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = small();
        assert_eq!(render_synthetic_image(&cfg, 3), render_synthetic_image(&cfg, 3));
        let other = SyntheticConfig { seed: 5, ..cfg.clone() };
        assert_ne!(
            render_synthetic_image(&cfg, 3).boxes,
            render_synthetic_image(&other, 3).boxes
        );
    }

    #[test]
    fn shapes_are_distinct_regions() {
        for s in ShapeKind::ALL {
            assert!(s.contains(0.0, 0.0, 20.0));
            assert!(!s.contains(11.0, 11.0, 20.0));
        }
        assert!(ShapeKind::Square.contains(9.0, 9.0, 20.0));
        assert!(!ShapeKind::Disk.contains(9.0, 9.0, 20.0));
        assert!(!ShapeKind::Triangle.contains(8.0, -8.0, 20.0));
    }

    #[test]
    fn config_validation() {
        assert!(SyntheticConfig { classes: 1, ..small() }.validate().is_err());
        assert!(SyntheticConfig {
            max_size: 95,
            ..small()
        }
        .validate()
        .is_err());
        assert!(small().validate().is_ok());
    }
}
