//! Dataset ingestion: WIDER-format annotation parsing and emission, image
//! loading, and a synthetic dataset generator that produces the same layout so
//! the whole pipeline runs without external data.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Per-box attribute flags as stored in the annotation format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BoxAttributes {
    pub blur: u8,
    pub expression: u8,
    pub illumination: u8,
    pub invalid: bool,
    pub occlusion: u8,
    pub pose: u8,
}

/// One image with its annotated face boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_path: String,
    pub boxes: Vec<BBox>,
    pub attributes: Vec<BoxAttributes>,
}

impl AnnotationRecord {
    pub fn empty(path: impl Into<String>) -> Self {
        AnnotationRecord { image_path: path.into(), boxes: Vec::new(), attributes: Vec::new() }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Parses the `wider_face_*_bbx_gt` text format: a path line, an integer count
/// line, then `count` lines of 10 integers each
/// (`x y w h blur expression illumination invalid occlusion pose`).
/// A zero count is followed by a single all-zero line, which is consumed and
/// dropped.
pub fn parse_wider_annotations<R: BufRead>(reader: R) -> Result<Vec<AnnotationRecord>> {
    let mut records = Vec::new();
    let mut lines = reader.lines().enumerate();

    loop {
        let (path_no, path_line) = match lines.next() {
            None => break,
            Some((i, line)) => {
                let text = line.map_err(|e| parse_err(i + 1, e.to_string()))?;
                (i + 1, text)
            }
        };
        let image_path = path_line.trim().to_string();
        if image_path.is_empty() {
            continue; // tolerate trailing blank lines
        }

        let (count_no, count_line) = lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| parse_err(path_no, format!("`{image_path}` has no count line")))?;
        let count_text = count_line.map_err(|e| parse_err(count_no, e.to_string()))?;
        let count: usize = count_text
            .trim()
            .parse()
            .map_err(|_| parse_err(count_no, format!("malformed count `{}`", count_text.trim())))?;

        // count 0 still carries one placeholder row in the wire format
        let rows = count.max(1);
        let mut boxes = Vec::with_capacity(count);
        let mut attributes = Vec::with_capacity(count);
        for _ in 0..rows {
            let (row_no, row_line) = lines
                .next()
                .map(|(i, l)| (i + 1, l))
                .ok_or_else(|| parse_err(count_no, format!("`{image_path}` is truncated")))?;
            let text = row_line.map_err(|e| parse_err(row_no, e.to_string()))?;
            let fields: Vec<i64> = text
                .split_whitespace()
                .map(|f| f.parse::<i64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(row_no, format!("non-integer field in `{text}`")))?;
            if fields.len() != 10 {
                return Err(parse_err(
                    row_no,
                    format!("expected 10 fields, found {}", fields.len()),
                ));
            }
            if count == 0 {
                continue; // placeholder row of a faceless image
            }
            let [x, y, w, h] = [fields[0], fields[1], fields[2], fields[3]];
            if w < 0 || h < 0 {
                return Err(parse_err(row_no, format!("negative box size {w}x{h}")));
            }
            let attr = BoxAttributes {
                blur: in_range(fields[4], 0..=2, row_no, "blur")? as u8,
                expression: in_range(fields[5], 0..=1, row_no, "expression")? as u8,
                illumination: in_range(fields[6], 0..=1, row_no, "illumination")? as u8,
                invalid: in_range(fields[7], 0..=1, row_no, "invalid")? == 1,
                occlusion: in_range(fields[8], 0..=2, row_no, "occlusion")? as u8,
                pose: in_range(fields[9], 0..=1, row_no, "pose")? as u8,
            };
            boxes.push(
                BBox::from_xywh(x as f64, y as f64, w as f64, h as f64)
                    .map_err(|e| parse_err(row_no, e.to_string()))?,
            );
            attributes.push(attr);
        }
        records.push(AnnotationRecord { image_path, boxes, attributes });
    }
    Ok(records)
}

fn in_range(
    v: i64,
    range: std::ops::RangeInclusive<i64>,
    line: usize,
    name: &str,
) -> Result<i64> {
    if range.contains(&v) {
        Ok(v)
    } else {
        Err(parse_err(line, format!("{name} value {v} outside {range:?}")))
    }
}

/// Inverse of [`parse_wider_annotations`]. Coordinates are written as integers
/// (the wire format is integral); fractional boxes are rounded.
pub fn emit_wider_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&rec.image_path);
        out.push('\n');
        out.push_str(&format!("{}\n", rec.boxes.len()));
        if rec.boxes.is_empty() {
            out.push_str("0 0 0 0 0 0 0 0 0 0\n");
            continue;
        }
        for (b, a) in rec.boxes.iter().zip(&rec.attributes) {
            let (x, y, w, h) = b.to_xywh();
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {}\n",
                x.round() as i64,
                y.round() as i64,
                w.round() as i64,
                h.round() as i64,
                a.blur,
                a.expression,
                a.illumination,
                a.invalid as u8,
                a.occlusion,
                a.pose,
            ));
        }
    }
    out
}

/// Difficulty subset membership: subset name -> image path -> indices of the
/// image's ground-truth boxes belonging to the subset.
pub type SubsetLists = BTreeMap<String, BTreeMap<String, Vec<usize>>>;

pub fn load_subsets(path: &Path) -> Result<SubsetLists> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { line: 0, message: e.to_string() })
}

/// Size law for synthetic face generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SizeDistribution {
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    Fixed(f64),
}

impl SizeDistribution {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            SizeDistribution::LogUniform { lo, hi } => {
                (rng.gen_range(lo.ln()..hi.ln())).exp()
            }
            SizeDistribution::Uniform { lo, hi } => rng.gen_range(lo..hi),
            SizeDistribution::Fixed(s) => s,
        }
    }

    /// Cumulative distribution, used by the statistical tests.
    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            SizeDistribution::LogUniform { lo, hi } => {
                ((x.ln() - lo.ln()) / (hi.ln() - lo.ln())).clamp(0.0, 1.0)
            }
            SizeDistribution::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            SizeDistribution::Fixed(s) => {
                if x >= s {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub image_size: u32,
    pub faces_per_image: usize,
    pub sizes: SizeDistribution,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_images: 8,
            image_size: 256,
            faces_per_image: 2,
            sizes: SizeDistribution::LogUniform { lo: 16.0, hi: 96.0 },
            seed: 11,
        }
    }
}

/// A generated dataset on disk: WIDER-layout annotation file, PNG images, and
/// a nested difficulty-subset file (easy ⊂ medium ⊂ hard, split by face size).
pub struct SyntheticDataset {
    pub root: PathBuf,
    pub annotation_file: PathBuf,
    pub subsets_file: PathBuf,
    pub records: Vec<AnnotationRecord>,
}

/// Draws high-contrast elliptical "faces" on textured backgrounds, with boxes
/// exactly enclosing each ellipse, then writes the WIDER-format annotation
/// file, the PNGs and the subset lists.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, root: &Path) -> Result<SyntheticDataset> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let image_dir = root.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut records = Vec::with_capacity(spec.n_images);
    for idx in 0..spec.n_images {
        let name = format!("synth/img_{idx:04}.png");
        let (img, boxes) = synth_image(spec, &mut rng);
        let file = image_dir.join(format!("img_{idx:04}.png"));
        std::fs::create_dir_all(file.parent().unwrap()).ok();
        img.save(&file)?;
        let attributes = vec![BoxAttributes::default(); boxes.len()];
        records.push(AnnotationRecord { image_path: name, boxes, attributes });
    }

    // the annotation file refers to images/<name> relative to root
    let mut on_disk = records.clone();
    for r in &mut on_disk {
        r.image_path = r.image_path.replace("synth/", "images/");
    }
    let ann_path = root.join("annotations.txt");
    std::fs::write(&ann_path, emit_wider_annotations(&on_disk))
        .map_err(|e| Error::io(&ann_path, e))?;

    let subsets = size_terciles_subsets(&on_disk);
    let sub_path = root.join("subsets.json");
    let text = serde_json::to_string_pretty(&subsets)
        .map_err(|e| Error::Other(e.to_string()))?;
    std::fs::write(&sub_path, text).map_err(|e| Error::io(&sub_path, e))?;

    Ok(SyntheticDataset {
        root: root.to_path_buf(),
        annotation_file: ann_path,
        subsets_file: sub_path,
        records: on_disk,
    })
}

/// Nested subsets by face size: easy = largest third, medium = largest two
/// thirds, hard = everything.
pub fn size_terciles_subsets(records: &[AnnotationRecord]) -> SubsetLists {
    let mut sizes: Vec<f64> = records
        .iter()
        .flat_map(|r| r.boxes.iter().map(|b| b.size()))
        .collect();
    sizes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        if sizes.is_empty() {
            return 0.0;
        }
        let pos = (q * (sizes.len() - 1) as f64).round() as usize;
        sizes[pos]
    };
    let t_easy = quantile(2.0 / 3.0);
    let t_medium = quantile(1.0 / 3.0);

    let mut out: SubsetLists = BTreeMap::new();
    for name in ["easy", "medium", "hard"] {
        out.insert(name.to_string(), BTreeMap::new());
    }
    for rec in records {
        let mut easy = Vec::new();
        let mut medium = Vec::new();
        let mut hard = Vec::new();
        for (i, b) in rec.boxes.iter().enumerate() {
            let s = b.size();
            hard.push(i);
            if s >= t_medium {
                medium.push(i);
            }
            if s >= t_easy {
                easy.push(i);
            }
        }
        out.get_mut("easy").unwrap().insert(rec.image_path.clone(), easy);
        out.get_mut("medium").unwrap().insert(rec.image_path.clone(), medium);
        out.get_mut("hard").unwrap().insert(rec.image_path.clone(), hard);
    }
    out
}

fn synth_image(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (RgbImage, Vec<BBox>) {
    let n = spec.image_size;
    let mut img = RgbImage::new(n, n);

    // textured dark background: vertical gradient plus speckle
    let base_lo = rng.gen_range(30..60);
    let base_hi = rng.gen_range(60..95);
    for y in 0..n {
        let t = y as f64 / n as f64;
        let level = base_lo as f64 + t * (base_hi - base_lo) as f64;
        for x in 0..n {
            let noise: i32 = rng.gen_range(-12..=12);
            let v = (level as i32 + noise).clamp(0, 255) as u8;
            img.put_pixel(x, y, Rgb([v, v, (v as f64 * 0.9) as u8]));
        }
    }
    // a few darker texture patches
    for _ in 0..rng.gen_range(2..6) {
        let w = rng.gen_range(n / 16..n / 4);
        let h = rng.gen_range(n / 16..n / 4);
        let x0 = rng.gen_range(0..n - w);
        let y0 = rng.gen_range(0..n - h);
        let delta: i32 = rng.gen_range(-25..-8);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let p = img.get_pixel_mut(x, y);
                for c in 0..3 {
                    p[c] = (p[c] as i32 + delta).clamp(0, 255) as u8;
                }
            }
        }
    }

    // faces: bright ellipses with a dark rim and two eye dots
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..spec.faces_per_image {
        let mut placed = false;
        for _attempt in 0..50 {
            let s = spec.sizes.sample(rng).min(n as f64 * 0.8);
            let aspect = rng.gen_range(0.85..1.15f64);
            let w = (s * aspect.sqrt()).round().max(4.0);
            let h = (s / aspect.sqrt()).round().max(4.0);
            if w >= n as f64 - 2.0 || h >= n as f64 - 2.0 {
                continue;
            }
            let x0 = rng.gen_range(1.0..(n as f64 - w - 1.0)).round();
            let y0 = rng.gen_range(1.0..(n as f64 - h - 1.0)).round();
            let cand = BBox::raw(x0, y0, x0 + w, y0 + h);
            if boxes.iter().any(|b| crate::geometry::iou(b, &cand) > 0.05) {
                continue;
            }
            draw_face(&mut img, &cand, rng);
            boxes.push(cand);
            placed = true;
            break;
        }
        if !placed {
            break;
        }
    }
    (img, boxes)
}

fn draw_face(img: &mut RgbImage, b: &BBox, rng: &mut ChaCha8Rng) {
    let (cx, cy) = b.center();
    let rx = b.width() / 2.0;
    let ry = b.height() / 2.0;
    let fill = [
        (225 + rng.gen_range(-10..=20i32)).clamp(0, 255) as u8,
        (195 + rng.gen_range(-10..=20i32)).clamp(0, 255) as u8,
        (165 + rng.gen_range(-10..=20i32)).clamp(0, 255) as u8,
    ];
    let x_lo = b.x_min.max(0.0) as u32;
    let x_hi = (b.x_max.min(img.width() as f64 - 1.0)) as u32;
    let y_lo = b.y_min.max(0.0) as u32;
    let y_hi = (b.y_max.min(img.height() as f64 - 1.0)) as u32;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            let r2 = dx * dx + dy * dy;
            if r2 <= 1.0 {
                if r2 > 0.78 {
                    img.put_pixel(x, y, Rgb([25, 15, 15])); // rim
                } else {
                    img.put_pixel(x, y, Rgb(fill));
                }
            }
        }
    }
    // eyes in the upper half
    for side in [-1.0, 1.0f64] {
        let ex = cx + side * rx * 0.35;
        let ey = cy - ry * 0.25;
        let er = (rx.min(ry) * 0.14).max(1.0);
        let x_lo = (ex - er).max(0.0) as u32;
        let x_hi = ((ex + er).min(img.width() as f64 - 1.0)) as u32;
        let y_lo = (ey - er).max(0.0) as u32;
        let y_hi = ((ey + er).min(img.height() as f64 - 1.0)) as u32;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 + 0.5 - ex;
                let dy = y as f64 + 0.5 - ey;
                if dx * dx + dy * dy <= er * er {
                    img.put_pixel(x, y, Rgb([20, 10, 10]));
                }
            }
        }
    }
}

/// Loads an image from the dataset root, resolving the record's relative path.
pub fn load_image(root: &Path, record: &AnnotationRecord) -> Result<RgbImage> {
    let path = root.join(&record.image_path);
    let img = image::open(&path).map_err(Error::Image)?;
    Ok(img.to_rgb8())
}
