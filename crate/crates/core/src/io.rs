//! Image/mask file I/O and dataset directory scanning.
//!
//! Dataset layout: `<root>/images/*.png|jpg` and `<root>/masks/<stem>.png`
//! matched by file stem. Predictions are written to `<out>/pred/<id>.png`,
//! uncertainty maps to `<out>/unc/<id>.png`, all 8-bit grayscale with
//! `value = round(255 * v)`.

use std::fs;
use std::path::{Path, PathBuf};

use image::ColorType;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::types::{DatasetRecord, ImageTensor, MaskKind, MaskTensor, Task};

/// Ground-truth masks are binarized at this threshold on load.
pub const GT_BINARIZE_THRESHOLD: f32 = 0.5;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = match img.color() {
        ColorType::Rgb8 | ColorType::Rgba8 | ColorType::L8 | ColorType::La8 => img.to_rgb8(),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unsupported image color type {other:?} at {}",
                path.display()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let mut data = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[[y as usize, x as usize, c]] = px.0[c] as f32 / 255.0;
        }
    }
    ImageTensor::new(data, Some(path.to_path_buf()))
}

pub fn load_mask(path: &Path, kind: MaskKind) -> Result<MaskTensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = match img.color() {
        ColorType::L8 | ColorType::La8 => img.to_luma8(),
        other => {
            return Err(Error::ChannelMismatch {
                context: format!("mask {} has color type {other:?}", path.display()),
                expected: 1,
                got: match other {
                    ColorType::Rgb8 => 3,
                    ColorType::Rgba8 => 4,
                    _ => 0,
                },
            })
        }
    };
    let (w, h) = gray.dimensions();
    let mut data = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in gray.enumerate_pixels() {
        data[[y as usize, x as usize]] = px.0[0] as f32 / 255.0;
    }
    let mask = MaskTensor::new(data, kind)?;
    Ok(match kind {
        MaskKind::GroundTruth => mask.binarize(GT_BINARIZE_THRESHOLD),
        _ => mask,
    })
}

/// Write a mask as 8-bit grayscale PNG (`value = round(255 * v)`).
pub fn save_mask(path: &Path, mask: &MaskTensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let (h, w) = mask.data.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let v = mask.data[[y as usize, x as usize]].clamp(0.0, 1.0);
        px.0[0] = (v * 255.0).round() as u8;
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Load one record; see the module docs for the layout contract.
pub fn load_record(image_path: &Path, mask_path: Option<&Path>, task: Task) -> Result<DatasetRecord> {
    let image = load_image(image_path)?;
    let mask = match (task, mask_path) {
        (Task::Bridge, _) => None,
        (_, Some(p)) => Some(load_mask(p, MaskKind::GroundTruth)?),
        (_, None) => {
            return Err(Error::InvalidArgument(format!(
                "task {task:?} requires a mask path for {}",
                image_path.display()
            )))
        }
    };
    let id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("record")
        .to_string();
    DatasetRecord::new(image, mask, task, id)
}

/// A dataset entry discovered on disk.
#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

/// Scan `<root>/images` (+ `<root>/masks` for labeled tasks); sorted by id.
pub fn scan_dataset(root: &Path, task: Task) -> Result<Vec<DatasetEntry>> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    let mut entries = Vec::new();
    let rd = fs::read_dir(&images_dir).map_err(io_err(&images_dir))?;
    for entry in rd {
        let entry = entry.map_err(io_err(&images_dir))?;
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad file name {}", path.display())))?
            .to_string();
        let mask_path = match task {
            Task::Bridge => None,
            _ => {
                let mp = masks_dir.join(format!("{id}.png"));
                if !mp.exists() {
                    return Err(Error::Io {
                        path: mp,
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "mask not found"),
                    });
                }
                Some(mp)
            }
        };
        entries.push(DatasetEntry { id, image_path: path, mask_path });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.display().to_string()));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

pub fn load_entry(entry: &DatasetEntry, task: Task) -> Result<DatasetRecord> {
    let mut rec = load_record(&entry.image_path, entry.mask_path.as_deref(), task)?;
    rec.id = entry.id.clone();
    Ok(rec)
}
