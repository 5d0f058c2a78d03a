//! On-disk annotation grammars and the canonical line-oriented index.
//!
//! Canonical index (UTF-8, LF, fields separated by tabs, shown as `\t`):
//!
//! ```text
//! #fsdet-index\tv1\tseed=1
//! #classes\t1=disk;2=square;3=triangle
//! 0\timages/000000.png\t96\t96\t1:10,20,30,40;3:50,50,70,64
//! ```
//!
//! Manifests reuse the record lines, add a `#manifest` header with
//! `key=value` fields and may flag annotations with a trailing `,masked`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotationId, ClassId, ClassInfo, DatasetIndex, ImageId, ImageRecord, Phase, Proportion};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageDims};

/// Class list of the NWPU VHR-10 ground-truth files (ids 1..=10).
pub const NWPU_CLASSES: [&str; 10] = [
    "airplane",
    "ship",
    "storage tank",
    "baseball diamond",
    "tennis court",
    "basketball court",
    "ground track field",
    "harbor",
    "bridge",
    "vehicle",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationFormat {
    /// Per-image XML: `size/{width,height}`, `object/{name,bndbox}`, 1-based
    /// inclusive pixel coordinates.
    Voc,
    /// Per-image text, one `(x1,y1),(x2,y2),class` object per line.
    Nwpu,
    /// The canonical index file.
    Canonical,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "voc" | "xml" | "rsod" => Ok(AnnotationFormat::Voc),
            "nwpu" | "txt" => Ok(AnnotationFormat::Nwpu),
            "canonical" | "index" => Ok(AnnotationFormat::Canonical),
            other => Err(Error::Config(format!("unknown annotation format {other}"))),
        }
    }
}

/// A parsed index plus the record-level errors that were skipped.
#[derive(Debug)]
pub struct ParseOutcome {
    pub index: DatasetIndex,
    pub errors: Vec<Error>,
}

/// Reads a dataset tree. Malformed records are collected in
/// [`ParseOutcome::errors`]; parsing fails only when nothing valid remains.
///
/// `classes` fixes the accepted class names (ids `1..`) for the VOC grammar;
/// without it the sorted set of names found is used.
pub fn parse_annotations(root: &Path, format: AnnotationFormat, classes: Option<&[String]>) -> Result<ParseOutcome> {
    match format {
        AnnotationFormat::Canonical => {
            let file = if root.is_dir() {
                root.join("index.tsv")
            } else {
                root.to_path_buf()
            };
            Ok(ParseOutcome {
                index: read_index(&file)?,
                errors: Vec::new(),
            })
        }
        AnnotationFormat::Nwpu => parse_nwpu(root),
        AnnotationFormat::Voc => parse_voc(root, classes),
    }
}

fn first_existing(root: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| root.join(n)).find(|p| p.is_dir())
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["jpg", "jpeg", "png", "JPG", "PNG", "bmp", "tif"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn image_dims(path: &Path) -> Result<ImageDims> {
    let (w, h) = image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    ImageDims::new(w as usize, h as usize)
}

fn record_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Record {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses `(x1,y1),(x2,y2),class` with optional whitespace anywhere.
pub(crate) fn parse_nwpu_line(line: &str) -> Option<(i64, i64, i64, i64, i64)> {
    let s: String = line.chars().filter(|c| !c.is_whitespace()).collect();
    let rest = s.strip_prefix('(')?;
    let (p1, rest) = rest.split_once("),(")?;
    let (p2, class) = rest.split_once("),")?;
    let pair = |p: &str| -> Option<(i64, i64)> {
        let (a, b) = p.split_once(',')?;
        Some((a.parse().ok()?, b.parse().ok()?))
    };
    let (x1, y1) = pair(p1)?;
    let (x2, y2) = pair(p2)?;
    Some((x1, y1, x2, y2, class.parse().ok()?))
}

fn parse_nwpu(root: &Path) -> Result<ParseOutcome> {
    let ann_dir = first_existing(root, &["ground truth", "ground_truth", "annotations"])
        .ok_or_else(|| Error::Dataset(format!("{}: no ground-truth directory", root.display())))?;
    let img_dir = first_existing(root, &["positive image set", "positive_image_set", "images"])
        .ok_or_else(|| Error::Dataset(format!("{}: no image directory", root.display())))?;
    let classes: Vec<ClassInfo> = NWPU_CLASSES
        .iter()
        .enumerate()
        .map(|(i, n)| ClassInfo {
            id: ClassId(i as u32 + 1),
            name: n.to_string(),
        })
        .collect();
    let mut errors = Vec::new();
    let mut images = Vec::new();
    for file in sorted_files(&ann_dir, "txt")? {
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let Some(img_path) = find_image(&img_dir, &stem) else {
            errors.push(record_error(&file, 0, "no matching image file"));
            continue;
        };
        let dims = match image_dims(&img_path) {
            Ok(d) => d,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        let text = match fs::read_to_string(&file) {
            Ok(t) => t,
            Err(e) => {
                errors.push(Error::io(&file, e));
                continue;
            }
        };
        let mut objects = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((x1, y1, x2, y2, class)) = parse_nwpu_line(line) else {
                errors.push(record_error(&file, n + 1, format!("malformed object line {line:?}")));
                continue;
            };
            if class < 1 || class as usize > NWPU_CLASSES.len() {
                errors.push(record_error(&file, n + 1, format!("unknown class token {class}")));
                continue;
            }
            match validated_box(x1 as f64, y1 as f64, x2 as f64, y2 as f64, dims) {
                Ok(b) => objects.push((ClassId(class as u32), b)),
                Err(msg) => errors.push(record_error(&file, n + 1, msg)),
            }
        }
        let rel = img_path.strip_prefix(root).unwrap_or(&img_path).to_path_buf();
        images.push((rel, dims, objects));
    }
    finish(root, classes, images, errors)
}

fn validated_box(x1: f64, y1: f64, x2: f64, y2: f64, dims: ImageDims) -> std::result::Result<BBox, String> {
    let b = BBox::new(x1, y1, x2, y2).map_err(|e| e.to_string())?;
    if !b.within(dims) {
        return Err(format!("box {b} outside image {}x{}", dims.width, dims.height));
    }
    Ok(b)
}

type ParsedImage = (PathBuf, ImageDims, Vec<(ClassId, BBox)>);

fn finish(root: &Path, classes: Vec<ClassInfo>, images: Vec<ParsedImage>, errors: Vec<Error>) -> Result<ParseOutcome> {
    if images.is_empty() {
        return Err(Error::NoValidRecords {
            root: root.to_path_buf(),
            errors: errors.len(),
        });
    }
    let images = images
        .into_iter()
        .enumerate()
        .map(|(i, (path, dims, objs))| {
            (
                ImageRecord {
                    id: ImageId(i as u32),
                    path,
                    dims,
                },
                objs,
            )
        })
        .collect();
    Ok(ParseOutcome {
        index: DatasetIndex::new(root, classes, images)?,
        errors,
    })
}

fn parse_voc(root: &Path, classes: Option<&[String]>) -> Result<ParseOutcome> {
    let ann_dir = first_existing(root, &["Annotations", "annotations", "Annotation"])
        .ok_or_else(|| Error::Dataset(format!("{}: no Annotations directory", root.display())))?;
    let img_dir = first_existing(root, &["JPEGImages", "images", "Images"]).unwrap_or_else(|| root.to_path_buf());
    let mut errors = Vec::new();
    let mut parsed = Vec::new();
    for file in sorted_files(&ann_dir, "xml")? {
        let text = match fs::read_to_string(&file) {
            Ok(t) => t,
            Err(e) => {
                errors.push(Error::io(&file, e));
                continue;
            }
        };
        match parse_voc_document(&text) {
            Ok(doc) => parsed.push((file, doc)),
            Err((line, msg)) => errors.push(record_error(&file, line, msg)),
        }
    }
    let names: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let set: BTreeSet<String> = parsed
                .iter()
                .flat_map(|(_, d)| d.objects.iter().map(|o| o.name.clone()))
                .collect();
            set.into_iter().collect()
        }
    };
    let class_list: Vec<ClassInfo> = names
        .iter()
        .enumerate()
        .map(|(i, n)| ClassInfo {
            id: ClassId(i as u32 + 1),
            name: n.clone(),
        })
        .collect();
    let lookup: BTreeMap<&str, ClassId> = class_list.iter().map(|c| (c.name.as_str(), c.id)).collect();
    let mut images = Vec::new();
    for (file, doc) in parsed {
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let img_path = doc
            .filename
            .as_ref()
            .map(|f| img_dir.join(f))
            .filter(|p| p.is_file())
            .or_else(|| find_image(&img_dir, stem));
        let Some(img_path) = img_path else {
            errors.push(record_error(&file, 0, "no matching image file"));
            continue;
        };
        let dims = match ImageDims::new(doc.width, doc.height) {
            Ok(d) => d,
            Err(e) => {
                errors.push(record_error(&file, 0, e.to_string()));
                continue;
            }
        };
        let mut objects = Vec::new();
        for obj in doc.objects {
            let Some(&class) = lookup.get(obj.name.as_str()) else {
                errors.push(record_error(
                    &file,
                    obj.line,
                    format!("unknown class token {:?}", obj.name),
                ));
                continue;
            };
            // 1-based inclusive -> 0-based, exclusive max edge
            match validated_box(obj.xmin - 1.0, obj.ymin - 1.0, obj.xmax, obj.ymax, dims) {
                Ok(b) => objects.push((class, b)),
                Err(msg) => errors.push(record_error(&file, obj.line, msg)),
            }
        }
        let rel = img_path.strip_prefix(root).unwrap_or(&img_path).to_path_buf();
        images.push((rel, dims, objects));
    }
    finish(root, class_list, images, errors)
}

struct VocObject {
    name: String,
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
    line: usize,
}

struct VocDocument {
    filename: Option<String>,
    width: usize,
    height: usize,
    objects: Vec<VocObject>,
}

fn parse_voc_document(text: &str) -> std::result::Result<VocDocument, (usize, String)> {
    let doc = roxmltree::Document::parse(text).map_err(|e| (e.pos().row as usize, e.to_string()))?;
    let line_of = |n: roxmltree::Node| doc.text_pos_at(n.range().start).row as usize;
    let root = doc.root_element();
    let child_text = |n: roxmltree::Node, tag: &str| -> Option<String> {
        n.children()
            .find(|c| c.has_tag_name(tag))
            .and_then(|c| c.text())
            .map(|t| t.trim().to_string())
    };
    let size = root
        .children()
        .find(|c| c.has_tag_name("size"))
        .ok_or((line_of(root), "missing <size>".to_string()))?;
    let dim = |tag: &str| -> std::result::Result<usize, (usize, String)> {
        child_text(size, tag)
            .and_then(|t| t.parse::<f64>().ok())
            .map(|v| v as usize)
            .ok_or((line_of(size), format!("missing or invalid size/{tag}")))
    };
    let (width, height) = (dim("width")?, dim("height")?);
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let line = line_of(obj);
        let name = child_text(obj, "name").ok_or((line, "object without <name>".to_string()))?;
        let bnd = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or((line, "object without <bndbox>".to_string()))?;
        let coord = |tag: &str| -> std::result::Result<f64, (usize, String)> {
            child_text(bnd, tag)
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or((line, format!("missing or invalid bndbox/{tag}")))
        };
        objects.push(VocObject {
            name,
            xmin: coord("xmin")?,
            ymin: coord("ymin")?,
            xmax: coord("xmax")?,
            ymax: coord("ymax")?,
            line,
        });
    }
    Ok(VocDocument {
        filename: child_text(root, "filename"),
        width,
        height,
        objects,
    })
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn record_line(index: &DatasetIndex, image: &ImageRecord, masked: &dyn Fn(AnnotationId) -> bool) -> String {
    let anns: Vec<String> = index
        .annotations_of(image.id)
        .map(|a| {
            let b = a.bbox;
            let mut s = format!(
                "{}:{},{},{},{}",
                a.class,
                fmt_num(b.x1),
                fmt_num(b.y1),
                fmt_num(b.x2),
                fmt_num(b.y2)
            );
            if masked(a.id) {
                s.push_str(",masked");
            }
            s
        })
        .collect();
    format!(
        "{}\t{}\t{}\t{}\t{}",
        image.id,
        image.path.to_string_lossy().replace('\\', "/"),
        image.dims.width,
        image.dims.height,
        anns.join(";")
    )
}

fn classes_line(index: &DatasetIndex) -> Result<String> {
    let mut parts = Vec::new();
    for c in index.classes() {
        if c.name.contains([';', '=', '\t', '\n']) {
            return Err(Error::Dataset(format!("class name {:?} cannot be serialized", c.name)));
        }
        parts.push(format!("{}={}", c.id, c.name));
    }
    Ok(format!("#classes\t{}", parts.join(";")))
}

fn header_fields(extra: &BTreeMap<String, String>) -> String {
    extra.iter().map(|(k, v)| format!("\t{k}={v}")).collect()
}

pub(crate) fn render_index(index: &DatasetIndex, extra: &BTreeMap<String, String>) -> Result<String> {
    let mut out = format!("#fsdet-index\tv1{}\n", header_fields(extra));
    out.push_str(&classes_line(index)?);
    out.push('\n');
    for image in index.images() {
        out.push_str(&record_line(index, image, &|_| false));
        out.push('\n');
    }
    Ok(out)
}

/// Writes the canonical index atomically.
pub fn write_index(index: &DatasetIndex, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
    crate::io::write_atomic(path, render_index(index, extra)?.as_bytes())
}

struct RawRecord {
    line: usize,
    image: ImageId,
    path: PathBuf,
    dims: ImageDims,
    objects: Vec<(ClassId, BBox, bool)>,
}

fn parse_record(path: &Path, n: usize, line: &str) -> Result<RawRecord> {
    let err = |m: String| record_error(path, n, m);
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(err(format!("expected 5 tab-separated fields, got {}", fields.len())));
    }
    let image = ImageId(fields[0].parse().map_err(|_| err("bad image id".into()))?);
    let width: usize = fields[2].parse().map_err(|_| err("bad width".into()))?;
    let height: usize = fields[3].parse().map_err(|_| err("bad height".into()))?;
    let dims = ImageDims::new(width, height).map_err(|e| err(e.to_string()))?;
    let mut objects = Vec::new();
    for tuple in fields[4].split(';').filter(|t| !t.is_empty()) {
        let (class, coords) = tuple
            .split_once(':')
            .ok_or_else(|| err(format!("bad tuple {tuple:?}")))?;
        let class = ClassId(class.parse().map_err(|_| err(format!("bad class {class:?}")))?);
        let parts: Vec<&str> = coords.split(',').collect();
        let masked = match parts.len() {
            4 => false,
            5 if parts[4] == "masked" => true,
            _ => return Err(err(format!("bad coordinates {coords:?}"))),
        };
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| err(format!("bad number {p:?}")))?;
        }
        let bbox = validated_box(v[0], v[1], v[2], v[3], dims).map_err(err)?;
        objects.push((class, bbox, masked));
    }
    Ok(RawRecord {
        line: n,
        image,
        path: PathBuf::from(fields[1]),
        dims,
        objects,
    })
}

fn parse_header(line: &str) -> BTreeMap<String, String> {
    line.split('\t')
        .skip(1)
        .filter_map(|f| f.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

pub fn read_index(path: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut classes = Vec::new();
    let mut images = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("#classes\t") {
            for part in rest.split(';').filter(|p| !p.is_empty()) {
                let (id, name) = part
                    .split_once('=')
                    .ok_or_else(|| record_error(path, n + 1, format!("bad class entry {part:?}")))?;
                let id = id
                    .parse()
                    .map_err(|_| record_error(path, n + 1, format!("bad class id {id:?}")))?;
                classes.push(ClassInfo {
                    id: ClassId(id),
                    name: name.to_string(),
                });
            }
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(path, n + 1, line)?;
        images.push((
            ImageRecord {
                id: rec.image,
                path: rec.path,
                dims: rec.dims,
            },
            rec.objects.into_iter().map(|(c, b, _)| (c, b)).collect(),
        ));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetIndex::new(root, classes, images)
}

/// Header of a split or sample manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ManifestHeader {
    pub kind: String,
    pub seed: u64,
    pub k: Option<usize>,
    pub rho: Option<Proportion>,
    pub phase: Option<Phase>,
    pub novel: Vec<ClassId>,
    pub extra: BTreeMap<String, String>,
}

impl ManifestHeader {
    fn render(&self) -> String {
        let mut s = format!("#manifest\tkind={}\tseed={}", self.kind, self.seed);
        s.push_str(&format!(
            "\tk={}",
            self.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into())
        ));
        s.push_str(&format!(
            "\trho={}",
            self.rho.map(|r| r.to_string()).unwrap_or_else(|| "-".into())
        ));
        s.push_str(&format!(
            "\tphase={}",
            self.phase.map(|p| p.to_string()).unwrap_or_else(|| "-".into())
        ));
        let novel: Vec<String> = self.novel.iter().map(|c| c.to_string()).collect();
        s.push_str(&format!("\tnovel={}", novel.join(",")));
        s.push_str(&header_fields(&self.extra));
        s
    }

    fn parse(line: &str) -> Result<Self> {
        let mut fields = parse_header(line);
        let bad = |k: &str| Error::Config(format!("manifest header field {k} invalid"));
        let kind = fields.remove("kind").ok_or_else(|| bad("kind"))?;
        let seed = fields
            .remove("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("seed"))?;
        let k = match fields.remove("k").as_deref() {
            None | Some("-") => None,
            Some(v) => Some(v.parse().map_err(|_| bad("k"))?),
        };
        let rho = match fields.remove("rho").as_deref() {
            None | Some("-") => None,
            Some(v) => Some(v.parse()?),
        };
        let phase = match fields.remove("phase").as_deref() {
            None | Some("-") => None,
            Some(v) => Some(v.parse()?),
        };
        let novel = fields
            .remove("novel")
            .unwrap_or_default()
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map(ClassId).map_err(|_| bad("novel")))
            .collect::<Result<_>>()?;
        Ok(ManifestHeader {
            kind,
            seed,
            k,
            rho,
            phase,
            novel,
            extra: fields,
        })
    }
}

/// A subset of an index's images with masked annotations flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub images: Vec<ImageId>,
    pub masked: BTreeSet<AnnotationId>,
}

pub(crate) fn render_manifest(
    index: &DatasetIndex,
    header: &ManifestHeader,
    images: &[ImageId],
    masked: &BTreeSet<AnnotationId>,
) -> Result<String> {
    let mut out = header.render();
    out.push('\n');
    out.push_str(&classes_line(index)?);
    out.push('\n');
    for id in images {
        let rec = index
            .image(*id)
            .ok_or_else(|| Error::Dataset(format!("manifest references unknown image {id}")))?;
        out.push_str(&record_line(index, rec, &|a| masked.contains(&a)));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(
    path: &Path,
    index: &DatasetIndex,
    header: &ManifestHeader,
    images: &[ImageId],
    masked: &BTreeSet<AnnotationId>,
) -> Result<()> {
    crate::io::write_atomic(path, render_manifest(index, header, images, masked)?.as_bytes())
}

/// Reads a manifest and resolves its records against `index`; records must
/// list the same objects, in the same order, as the index.
pub fn read_manifest(path: &Path, index: &DatasetIndex) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut images = Vec::new();
    let mut masked = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with("#manifest") {
            header = Some(ManifestHeader::parse(line)?);
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(path, n + 1, line)?;
        let known: Vec<_> = index.annotations_of(rec.image).collect();
        let same = known.len() == rec.objects.len()
            && known
                .iter()
                .zip(&rec.objects)
                .all(|(a, (c, b, _))| a.class == *c && a.bbox == *b);
        if index.image(rec.image).is_none() || !same {
            return Err(record_error(
                path,
                rec.line,
                format!("record for image {} does not match the index", rec.image),
            ));
        }
        for (a, (_, _, m)) in known.iter().zip(&rec.objects) {
            if *m {
                masked.insert(a.id);
            }
        }
        images.push(rec.image);
    }
    Ok(Manifest {
        header: header.ok_or_else(|| Error::Config(format!("{}: missing #manifest header", path.display())))?,
        images,
        masked,
    })
}
