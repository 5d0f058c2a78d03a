//! SVG histograms of novel-class AP and PNG detection overlays.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::{CellResult, Method};
use super::ImageDetections;
use crate::dataset::{ClassId, DatasetIndex};
use crate::detector::Detection;
use crate::error::Result;
use crate::io::write_atomic;
use crate::raster::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub method: String,
    pub k: usize,
    pub rho: String,
    /// Fraction in [0, 1]; `None` for failed or undefined cells.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub class: String,
    pub bars: Vec<Bar>,
}

/// Exact values behind the rendered histograms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FigureData {
    pub panels: Vec<Panel>,
}

/// One panel per novel class, bars ordered by method, proportion, then k.
pub fn render_histograms(cells: &[CellResult]) -> FigureData {
    type Row = (Method, String, usize, Option<f64>);
    let mut panels: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for c in cells {
        let Some(report) = &c.report else {
            continue;
        };
        for class in report.classes.iter().filter(|x| x.novel) {
            panels.entry(class.name.clone()).or_default().push((
                c.cell.method,
                c.cell.rho.to_string(),
                c.cell.k,
                class.ap,
            ));
        }
    }
    FigureData {
        panels: panels
            .into_iter()
            .map(|(class, mut bars)| {
                bars.sort_by(|a, b| (a.0, &a.1, a.2).cmp(&(b.0, &b.1, b.2)));
                Panel {
                    class,
                    bars: bars
                        .into_iter()
                        .map(|(m, rho, k, ap)| Bar {
                            method: m.to_string(),
                            k,
                            rho,
                            ap,
                        })
                        .collect(),
                }
            })
            .collect(),
    }
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

fn panel_svg(panel: &Panel) -> String {
    let (bar_w, gap, left, top, plot_h) = (18.0, 4.0, 50.0, 30.0, 200.0);
    let width = left + panel.bars.len() as f64 * (bar_w + gap) + 20.0;
    let height = top + plot_h + 60.0;
    let mut methods: Vec<&str> = Vec::new();
    for b in &panel.bars {
        if !methods.contains(&b.method.as_str()) {
            methods.push(&b.method);
        }
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="16" font-size="13">AP of novel class {}</text>"#,
        escape(&panel.class)
    );
    for t in 0..=4 {
        let v = t as f64 * 25.0;
        let y = top + plot_h - plot_h * v / 100.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{y}" y2="{y}" stroke="#ddd"/>"##,
            width - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v}</text>"#,
            left - 4.0,
            y + 3.0
        );
    }
    for (i, b) in panel.bars.iter().enumerate() {
        let x = left + i as f64 * (bar_w + gap);
        let color = PALETTE[methods.iter().position(|m| *m == b.method).unwrap_or(0) % PALETTE.len()];
        let ap = b.ap.unwrap_or(0.0);
        let h = plot_h * ap;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="{bar_w}" height="{h}" fill="{color}" data-ap="{}"><title>{} k={} rho={}: {:.2}</title></rect>"#,
            top + plot_h - h,
            b.ap.map_or("none".to_string(), |v| v.to_string()),
            escape(&b.method),
            b.k,
            b.rho,
            ap * 100.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x + bar_w / 2.0,
            top + plot_h + 12.0,
            b.k
        );
    }
    for (i, m) in methods.iter().enumerate() {
        let y = top + plot_h + 30.0 + 0.0 * i as f64;
        let x = left + i as f64 * 90.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(m));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `hist_<class>.svg` per novel class, `figure_data.json`, and an
/// `overlay_<image>.png` per entry of `detections` whose image is readable.
pub fn render_report(
    cells: &[CellResult],
    detections: &[ImageDetections],
    index: Option<&DatasetIndex>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let data = render_histograms(cells);
    for panel in &data.panels {
        let path = out_dir.join(format!("hist_{}.svg", file_stem(&panel.class)));
        write_atomic(&path, panel_svg(panel).as_bytes())?;
        written.push(path);
    }
    let path = out_dir.join("figure_data.json");
    let mut json = serde_json::to_vec_pretty(&data)?;
    json.push(b'\n');
    write_atomic(&path, &json)?;
    written.push(path);
    if let Some(index) = index {
        let names: BTreeMap<ClassId, String> = index.classes().iter().map(|c| (c.id, c.name.clone())).collect();
        for img in detections {
            let raster = match index.load_image(img.image) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("overlay for image {} skipped: {e}", img.image);
                    continue;
                }
            };
            let path = out_dir.join(format!("overlay_{:05}.png", img.image.0));
            draw_overlay(&raster, &img.detections, &names).save_png(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

const BOX_COLORS: [[f32; 3]; 6] = [
    [255.0, 255.0, 0.0],
    [0.0, 255.0, 255.0],
    [255.0, 0.0, 255.0],
    [255.0, 128.0, 0.0],
    [0.0, 255.0, 0.0],
    [255.0, 255.0, 255.0],
];

/// Draws each detection's box and a `name score` label.
pub fn draw_overlay(image: &Raster, detections: &[Detection], names: &BTreeMap<ClassId, String>) -> Raster {
    let mut out = image.clone();
    for d in detections {
        let color = BOX_COLORS[d.class.0 as usize % BOX_COLORS.len()];
        let b = d.bbox;
        let (w, h) = (out.width() as i64, out.height() as i64);
        let x1 = (b.x1.floor() as i64).clamp(0, w - 1);
        let y1 = (b.y1.floor() as i64).clamp(0, h - 1);
        let x2 = ((b.x2.ceil() as i64) - 1).clamp(0, w - 1);
        let y2 = ((b.y2.ceil() as i64) - 1).clamp(0, h - 1);
        for x in x1..=x2 {
            put(&mut out, x, y1, color);
            put(&mut out, x, y2, color);
        }
        for y in y1..=y2 {
            put(&mut out, x1, y, color);
            put(&mut out, x2, y, color);
        }
        let name = names.get(&d.class).cloned().unwrap_or_else(|| d.class.to_string());
        let label = format!("{name} {:.2}", d.score);
        let ty = if y1 >= 7 { y1 - 6 } else { y2 + 2 };
        draw_text(&mut out, x1, ty, &label, color);
    }
    out
}

fn put(r: &mut Raster, x: i64, y: i64, color: [f32; 3]) {
    if x < 0 || y < 0 || x >= r.width() as i64 || y >= r.height() as i64 || r.channels() < 3 {
        return;
    }
    for (c, v) in color.iter().enumerate() {
        r.set(c, y as usize, x as usize, *v);
    }
}

/// 3x5 glyphs, rows top to bottom.
fn glyph(c: char) -> Option<&'static str> {
    Some(match c.to_ascii_lowercase() {
        '0' => "111101101101111",
        '1' => "010110010010111",
        '2' => "111001111100111",
        '3' => "111001111001111",
        '4' => "101101111001001",
        '5' => "111100111001111",
        '6' => "111100111101111",
        '7' => "111001001001001",
        '8' => "111101111101111",
        '9' => "111101111001111",
        'a' => "010101111101101",
        'b' => "110101110101110",
        'c' => "011100100100011",
        'd' => "110101101101110",
        'e' => "111100110100111",
        'f' => "111100110100100",
        'g' => "011100101101011",
        'h' => "101101111101101",
        'i' => "111010010010111",
        'j' => "001001001101010",
        'k' => "101101110101101",
        'l' => "100100100100111",
        'm' => "101111111101101",
        'n' => "110101101101101",
        'o' => "010101101101010",
        'p' => "110101110100100",
        'q' => "010101101110011",
        'r' => "110101110101101",
        's' => "011100010001110",
        't' => "111010010010010",
        'u' => "101101101101111",
        'v' => "101101101101010",
        'w' => "101101111111101",
        'x' => "101101010101101",
        'y' => "101101010010010",
        'z' => "111001010100111",
        '.' => "000000000000010",
        '-' => "000000111000000",
        '+' => "000010111010000",
        '_' => "000000000000111",
        ':' => "000010000010000",
        _ => return None,
    })
}

fn draw_text(r: &mut Raster, x: i64, y: i64, text: &str, color: [f32; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let Some(bits) = glyph(ch) else { continue };
        let ox = x + 4 * i as i64;
        for (j, bit) in bits.bytes().enumerate() {
            if bit == b'1' {
                put(r, ox + (j % 3) as i64, y + (j / 3) as i64, color);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Proportion;
    use crate::evaluation::grid::CellSpec;
    use crate::evaluation::{ApMethod, ClassReport, EvalReport};
    use crate::geometry::BBox;

    fn report(ap: f64) -> EvalReport {
        EvalReport {
            method: String::new(),
            classes: vec![ClassReport {
                class: ClassId(3),
                name: "triangle".into(),
                novel: true,
                ap: Some(ap),
                ap11: Some(ap),
                num_gt: 1,
                num_detections: 1,
                pr: vec![],
            }],
            iou_threshold: 0.5,
            ap_method: ApMethod::AllPoint,
            k: None,
            rho: None,
            split_id: String::new(),
            seed: 0,
            config_hash: String::new(),
            images: 1,
            checkpoint: None,
        }
    }

    #[test]
    fn fifteen_bars_with_exact_heights() {
        let mut cells = Vec::new();
        for (mi, m) in [Method::Saan, Method::FrcnFt, Method::FrcnJoint]
            .into_iter()
            .enumerate()
        {
            for (ki, k) in [1, 2, 3, 5, 10].into_iter().enumerate() {
                cells.push(CellResult {
                    cell: CellSpec {
                        method: m,
                        novel: vec![ClassId(3)],
                        k,
                        rho: Proportion::Ratio(1),
                    },
                    report: Some(report((mi * 5 + ki) as f64 / 20.0)),
                    error: None,
                });
            }
        }
        let data = render_histograms(&cells);
        assert_eq!(data.panels.len(), 1);
        assert_eq!(data.panels[0].bars.len(), 15);
        for (bar, cell) in data.panels[0].bars.iter().zip(&cells) {
            assert_eq!(bar.ap, cell.report.as_ref().unwrap().classes[0].ap);
            assert_eq!(bar.k, cell.cell.k);
        }
        let svg = panel_svg(&data.panels[0]);
        assert_eq!(svg.matches("<rect x=").count(), 15 + 3);
    }

    #[test]
    fn empty_overlay_is_identity() {
        let img = Raster::filled(20, 10, 3, 42.0);
        assert_eq!(draw_overlay(&img, &[], &BTreeMap::new()), img);
    }

    #[test]
    fn overlay_draws_box_edges() {
        let img = Raster::filled(40, 40, 3, 0.0);
        let det = Detection {
            class: ClassId(1),
            score: 0.5,
            bbox: BBox::new(10.0, 20.0, 30.0, 35.0).unwrap(),
        };
        let out = draw_overlay(&img, &[det], &BTreeMap::new());
        assert_eq!(out.get(1, 20, 15), 255.0);
        assert_eq!(out.get(1, 25, 20), 0.0);
    }
}
