//! Dataset indexing, image/mask loading and preprocessing, and a
//! deterministic synthetic blob-defect generator for desk-scale runs.
//!
//! Two on-disk layouts are supported:
//!
//! * `mvtec` — `<class>/test/<defect>/*.png` with ground-truth masks in
//!   `<class>/ground_truth/<defect>/<stem>_mask.png`; the `good` defect
//!   folder holds the normal images.
//! * `flat-jsonl` — an `index.jsonl` with one record per line:
//!   `{"image": str, "mask": str|null, "label": 0|1, "class": str}`,
//!   paths relative to the file's directory.
//!
//! Images are resized bilinearly and channel-normalized; masks are
//! resized with nearest-neighbor so they stay binary.

use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlocalError, Result};

/// On-disk dataset layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetLayout {
    MvTec,
    FlatJsonl,
}

/// Where the pixel data of an index entry lives.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Disk(PathBuf),
    /// In-memory `[h, w, 3]` values in `[0, 1]`, not yet normalized.
    Synthetic(Array3<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    Disk(PathBuf),
    /// In-memory `[h, w]` binary mask.
    Synthetic(Array2<f64>),
}

/// One dataset record. Normal entries (`label == 0`) carry no mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEntry {
    pub image: ImageSource,
    pub mask: Option<MaskSource>,
    pub label: u8,
    pub class: String,
    /// Defect folder name; `"good"` for normal entries.
    pub defect: String,
    /// Stable name stem used for per-sample artifacts.
    pub stem: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Disk,
    Synthetic,
}

/// Deterministically ordered collection of sample entries.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub entries: Vec<SampleEntry>,
    /// Sorted distinct class names.
    pub classes: Vec<String>,
    pub source: DataSource,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A loaded, preprocessed sample ready for the towers.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[h, w, 3]` channel-normalized pixels.
    pub image: Array3<f64>,
    /// `[h, w, 3]` resized pixels in `[0, 1]`, kept for visualization.
    pub raw: Array3<f64>,
    /// `[h, w]` binary ground-truth mask (all-zero for normal entries).
    pub mask: Array2<f64>,
    pub label: u8,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    image: String,
    mask: Option<String>,
    label: u8,
    class: String,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_dir_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| Ok(e?.path())).collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sample")
        .to_string()
}

/// Scan a dataset root into a deterministic, lexicographically ordered
/// index. Anomalous entries must have an existing mask file.
pub fn index_dataset(root: &Path, layout: DatasetLayout) -> Result<DatasetIndex> {
    let index = match layout {
        DatasetLayout::MvTec => index_mvtec(root)?,
        DatasetLayout::FlatJsonl => index_flat_jsonl(root)?,
    };
    if index.is_empty() {
        return Err(GlocalError::EmptyIndex(root.to_path_buf()));
    }
    Ok(index)
}

fn index_mvtec(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(GlocalError::DatasetLayout(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let mut entries = Vec::new();
    let mut classes = Vec::new();
    for class_dir in sorted_dir_entries(root)? {
        let test_dir = class_dir.join("test");
        if !test_dir.is_dir() {
            continue;
        }
        let class = file_stem(&class_dir);
        classes.push(class.clone());
        for defect_dir in sorted_dir_entries(&test_dir)? {
            if !defect_dir.is_dir() {
                continue;
            }
            let defect = file_stem(&defect_dir);
            let label = u8::from(defect != "good");
            for image_path in sorted_dir_entries(&defect_dir)? {
                if !is_image_file(&image_path) {
                    continue;
                }
                let stem = format!("{class}_{defect}_{}", file_stem(&image_path));
                let mask = if label == 1 {
                    Some(MaskSource::Disk(find_mvtec_mask(
                        root,
                        &class,
                        &defect,
                        &image_path,
                    )?))
                } else {
                    None
                };
                entries.push(SampleEntry {
                    image: ImageSource::Disk(image_path),
                    mask,
                    label,
                    class: class.clone(),
                    defect: defect.clone(),
                    stem,
                });
            }
        }
    }
    Ok(DatasetIndex {
        entries,
        classes,
        source: DataSource::Disk,
    })
}

fn find_mvtec_mask(root: &Path, class: &str, defect: &str, image: &Path) -> Result<PathBuf> {
    let gt_dir = root.join(class).join("ground_truth").join(defect);
    let stem = file_stem(image);
    let with_suffix = gt_dir.join(format!("{stem}_mask.png"));
    if with_suffix.is_file() {
        return Ok(with_suffix);
    }
    let plain = gt_dir.join(format!("{stem}.png"));
    if plain.is_file() {
        return Ok(plain);
    }
    Err(GlocalError::MissingMask(with_suffix))
}

fn index_flat_jsonl(root: &Path) -> Result<DatasetIndex> {
    let jsonl = if root.is_file() {
        root.to_path_buf()
    } else {
        root.join("index.jsonl")
    };
    if !jsonl.is_file() {
        return Err(GlocalError::DatasetLayout(format!(
            "no index.jsonl at {}",
            jsonl.display()
        )));
    }
    let base = jsonl.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    let mut classes = Vec::new();
    for (line_no, line) in BufReader::new(fs::File::open(&jsonl)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(&line).map_err(|e| {
            GlocalError::DatasetLayout(format!(
                "{}:{}: {e}",
                jsonl.display(),
                line_no + 1
            ))
        })?;
        if record.label > 1 {
            return Err(GlocalError::DatasetLayout(format!(
                "{}:{}: label must be 0 or 1, got {}",
                jsonl.display(),
                line_no + 1,
                record.label
            )));
        }
        let image_path = base.join(&record.image);
        let mask = match (&record.mask, record.label) {
            (Some(m), _) => {
                let mask_path = base.join(m);
                if !mask_path.is_file() {
                    return Err(GlocalError::MissingMask(mask_path));
                }
                Some(MaskSource::Disk(mask_path))
            }
            (None, _) => None,
        };
        let defect = if record.label == 0 { "good" } else { "anomaly" };
        if !classes.contains(&record.class) {
            classes.push(record.class.clone());
        }
        entries.push(SampleEntry {
            stem: file_stem(&image_path),
            image: ImageSource::Disk(image_path),
            mask,
            label: record.label,
            class: record.class,
            defect: defect.to_string(),
        });
    }
    classes.sort();
    Ok(DatasetIndex {
        entries,
        classes,
        source: DataSource::Disk,
    })
}

/// Bilinear resize of one plane with half-pixel centers; handles both
/// up- and downscaling.
pub fn resize_bilinear_plane(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.clone();
    }
    let coords = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        (0..out_len)
            .map(|i| {
                let pos = (i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
                let pos = pos.clamp(0.0, (in_len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = coords(out_h, in_h);
    let cols = coords(out_w, in_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (r0, r1, fr) = rows[i];
        let (c0, c1, fc) = cols[j];
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

fn resize_bilinear_rgb(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let mut out = Array3::zeros((out_h, out_w, 3));
    for c in 0..3 {
        let plane = src.index_axis(ndarray::Axis(2), c).to_owned();
        let resized = resize_bilinear_plane(&plane, out_h, out_w);
        out.index_axis_mut(ndarray::Axis(2), c).assign(&resized);
    }
    out
}

/// Nearest-neighbor resize (half-pixel centers); preserves the value
/// set, so binary masks stay binary.
pub fn resize_nearest(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    let pick = |i: usize, out_len: usize, in_len: usize| -> usize {
        (((i as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        src[[pick(i, out_h, in_h), pick(j, out_w, in_w)]]
    })
}

fn read_image_rgb(path: &Path) -> Result<Array3<f64>> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(i, j, c)| rgb.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0,
    ))
}

fn read_mask_gray(path: &Path) -> Result<Array2<f64>> {
    let gray = image::open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        gray.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0
    }))
}

/// Load and preprocess one entry: bilinear image resize plus per-channel
/// normalization, nearest-neighbor mask resize thresholded at 0.5.
/// Normal entries without a mask get an all-zero mask; anomalous
/// entries must carry one.
pub fn load_sample(
    entry: &SampleEntry,
    resolution: (usize, usize),
    mean: [f64; 3],
    std: [f64; 3],
) -> Result<Sample> {
    let (h, w) = resolution;
    let raw_full = match &entry.image {
        ImageSource::Disk(path) => read_image_rgb(path)?,
        ImageSource::Synthetic(pixels) => pixels.clone(),
    };
    let raw = if raw_full.dim() == (h, w, 3) {
        raw_full
    } else {
        resize_bilinear_rgb(&raw_full, h, w)
    };
    let image = Array3::from_shape_fn((h, w, 3), |(i, j, c)| (raw[[i, j, c]] - mean[c]) / std[c]);

    let mask = match &entry.mask {
        Some(MaskSource::Disk(path)) => {
            let full = read_mask_gray(path)?;
            resize_nearest(&full, h, w).mapv(|v| f64::from(v >= 0.5))
        }
        Some(MaskSource::Synthetic(m)) => resize_nearest(m, h, w).mapv(|v| f64::from(v >= 0.5)),
        None if entry.label == 0 => Array2::zeros((h, w)),
        None => {
            return Err(GlocalError::MissingMask(PathBuf::from(format!(
                "anomalous entry {} has no mask",
                entry.stem
            ))))
        }
    };
    Ok(Sample {
        image,
        raw,
        mask,
        label: entry.label,
    })
}

// --- synthetic blob-defect generator ------------------------------------

/// Normal texture values stay below this; blob values start well above.
const FIELD_LOW: f64 = 0.10;
const FIELD_HIGH: f64 = 0.70;
const BLOB_LOW: f64 = 0.85;
const BLOB_HIGH: f64 = 0.97;

/// Smooth random field in `[0, 1]`: a few low-frequency cosine waves,
/// min-max normalized.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut field = Array2::from_shape_fn((h, w), |(i, j)| {
        waves
            .iter()
            .map(|(a, fy, fx, phase)| {
                a * (std::f64::consts::TAU * (fy * i as f64 / h as f64 + fx * j as f64 / w as f64)
                    + phase)
                    .cos()
            })
            .sum::<f64>()
    });
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-9);
    field.mapv_inplace(|v| (v - min) / span);
    field
}

fn rasterize_ellipse(
    mask: &mut Array2<f64>,
    center: (f64, f64),
    radii: (f64, f64),
    angle: f64,
) {
    let (h, w) = mask.dim();
    let (cy, cx) = center;
    let (ry, rx) = radii;
    let (sin, cos) = angle.sin_cos();
    for i in 0..h {
        for j in 0..w {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let u = cos * dy + sin * dx;
            let v = -sin * dy + cos * dx;
            if (u / ry).powi(2) + (v / rx).powi(2) <= 1.0 {
                mask[[i, j]] = 1.0;
            }
        }
    }
}

fn render_sample(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    anomalous: bool,
) -> (Array3<f64>, Option<Array2<f64>>) {
    let field = smooth_field(rng, h, w);
    let gains = [
        rng.gen_range(0.85..1.0),
        rng.gen_range(0.85..1.0),
        rng.gen_range(0.85..1.0),
    ];
    let mut image = Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        (FIELD_LOW + (FIELD_HIGH - FIELD_LOW) * field[[i, j]]) * gains[c]
    });
    if !anomalous {
        return (image, None);
    }

    let mut mask = Array2::zeros((h, w));
    let blobs = rng.gen_range(1..=3);
    for _ in 0..blobs {
        let cy = rng.gen_range(0.15 * h as f64..0.85 * h as f64);
        let cx = rng.gen_range(0.15 * w as f64..0.85 * w as f64);
        let ry = rng.gen_range(0.06 * h as f64..0.18 * h as f64).max(1.5);
        let rx = rng.gen_range(0.06 * w as f64..0.18 * w as f64).max(1.5);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        rasterize_ellipse(&mut mask, (cy, cx), (ry, rx), angle);
    }
    // Bright, textured blob interior: always separated from the normal
    // field's value range.
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] >= 0.5 {
                let t = field[[i, j]];
                for c in 0..3 {
                    image[[i, j, c]] = BLOB_LOW + (BLOB_HIGH - BLOB_LOW) * t;
                }
            }
        }
    }
    (image, Some(mask))
}

/// Generate an in-memory synthetic dataset: `n_normal` smooth-texture
/// images plus `n_anomalous` images with 1–3 bright elliptical blobs
/// whose union is the ground-truth mask. Fully deterministic in `seed`.
pub fn synth_blobs(
    n_normal: usize,
    n_anomalous: usize,
    resolution: (usize, usize),
    seed: u64,
) -> DatasetIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = resolution;
    let mut entries = Vec::with_capacity(n_normal + n_anomalous);
    for k in 0..n_normal {
        let (image, _) = render_sample(&mut rng, h, w, false);
        entries.push(SampleEntry {
            image: ImageSource::Synthetic(image),
            mask: None,
            label: 0,
            class: "synthetic".to_string(),
            defect: "good".to_string(),
            stem: format!("normal_{k:03}"),
        });
    }
    for k in 0..n_anomalous {
        let (image, mask) = render_sample(&mut rng, h, w, true);
        entries.push(SampleEntry {
            image: ImageSource::Synthetic(image),
            mask: mask.map(MaskSource::Synthetic),
            label: 1,
            class: "synthetic".to_string(),
            defect: "blob".to_string(),
            stem: format!("blob_{k:03}"),
        });
    }
    DatasetIndex {
        entries,
        classes: vec!["synthetic".to_string()],
        source: DataSource::Synthetic,
    }
}

fn write_rgb_png(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = |c: usize| (pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round();
        image::Rgb([p(0) as u8, p(1) as u8, p(2) as u8])
    });
    buf.save(path)?;
    Ok(())
}

fn write_gray_png(path: &Path, pixels: &Array2<f64>) -> Result<()> {
    let (h, w) = pixels.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(pixels[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path)?;
    Ok(())
}

/// Materialize an index to disk in the flat-jsonl layout: PNG images
/// and masks plus an `index.jsonl`. Returns the jsonl path.
pub fn export_index(index: &DatasetIndex, dir: &Path) -> Result<PathBuf> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&masks_dir)?;
    let jsonl_path = dir.join("index.jsonl");
    let mut jsonl = fs::File::create(&jsonl_path)?;
    for entry in &index.entries {
        let image_rel = format!("images/{}.png", entry.stem);
        match &entry.image {
            ImageSource::Synthetic(pixels) => write_rgb_png(&dir.join(&image_rel), pixels)?,
            ImageSource::Disk(src) => {
                fs::copy(src, dir.join(&image_rel))?;
            }
        }
        let mask_rel = match &entry.mask {
            Some(MaskSource::Synthetic(mask)) => {
                let rel = format!("masks/{}_mask.png", entry.stem);
                write_gray_png(&dir.join(&rel), mask)?;
                Some(rel)
            }
            Some(MaskSource::Disk(src)) => {
                let rel = format!("masks/{}_mask.png", entry.stem);
                fs::copy(src, dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        let record = JsonlRecord {
            image: image_rel,
            mask: mask_rel,
            label: entry.label,
            class: entry.class.clone(),
        };
        writeln!(jsonl, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(jsonl_path)
}
