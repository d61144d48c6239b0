//! Domain types shared across the pipeline.

use std::path::PathBuf;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::tensor::resize_plane;

/// RGB image, `[H, W, 3]`, values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageTensor {
    pub data: Array3<f32>,
    pub source_path: Option<PathBuf>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>, source_path: Option<PathBuf>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(Error::ChannelMismatch {
                context: "image tensor".into(),
                expected: 3,
                got: c,
            });
        }
        if h < 8 || w < 8 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 8x8, got {h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "image values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(ImageTensor { data, source_path })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Bilinear resize with the crate-wide convention.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("non-positive resize target".into()));
        }
        let (h, w, _) = self.data.dim();
        let mut out = Array3::zeros((out_h, out_w, 3));
        for c in 0..3 {
            let plane =
                Array2::from_shape_fn((h, w), |(y, x)| self.data[[y, x, c]]);
            let resized = resize_plane(&plane, out_h, out_w);
            for y in 0..out_h {
                for x in 0..out_w {
                    out[[y, x, c]] = resized[[y, x]].clamp(0.0, 1.0);
                }
            }
        }
        Ok(ImageTensor { data: out, source_path: self.source_path.clone() })
    }
}

/// What a single-channel map means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    GroundTruth,
    Prediction,
    Uncertainty,
    Weight,
}

/// Single-channel map, `[H, W]`, values in `[0, 1]` (weight kind in `[1, 6]`).
#[derive(Clone, Debug)]
pub struct MaskTensor {
    pub data: Array2<f32>,
    pub kind: MaskKind,
}

impl MaskTensor {
    pub fn new(data: Array2<f32>, kind: MaskKind) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mask values must be finite".into()));
        }
        let ok = match kind {
            MaskKind::Weight => data.iter().all(|&v| (1.0..=6.0).contains(&v)),
            _ => data.iter().all(|&v| (0.0..=1.0).contains(&v)),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "mask values out of range for kind {kind:?}"
            )));
        }
        Ok(MaskTensor { data, kind })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Bilinear resize; the result stays continuous (binarize only where a
    /// binary mask is explicitly required).
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("non-positive resize target".into()));
        }
        let resized = resize_plane(&self.data, out_h, out_w).mapv(|v| v.clamp(0.0, 1.0));
        Ok(MaskTensor { data: resized, kind: self.kind })
    }

    pub fn binarize(&self, threshold: f32) -> MaskTensor {
        MaskTensor {
            data: self.data.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }),
            kind: MaskKind::GroundTruth,
        }
    }
}

/// Which pipeline a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Sod,
    Cod,
    Bridge,
}

/// One dataset element: image, optional ground truth, task, stable id.
#[derive(Clone, Debug)]
pub struct DatasetRecord {
    pub image: ImageTensor,
    pub mask: Option<MaskTensor>,
    pub task: Task,
    pub id: String,
}

impl DatasetRecord {
    pub fn new(image: ImageTensor, mask: Option<MaskTensor>, task: Task, id: String) -> Result<Self> {
        match (task, &mask) {
            (Task::Bridge, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "bridge records carry no ground truth".into(),
                ))
            }
            (Task::Sod | Task::Cod, None) => {
                return Err(Error::InvalidArgument(format!(
                    "record {id}: labeled task requires a mask"
                )))
            }
            _ => {}
        }
        if let Some(m) = &mask {
            if m.height() != image.height() || m.width() != image.width() {
                return Err(Error::SizeMismatch {
                    context: format!("record {id}: image vs mask"),
                    h_a: image.height(),
                    w_a: image.width(),
                    h_b: m.height(),
                    w_b: m.width(),
                });
            }
        }
        Ok(DatasetRecord { image, mask, task, id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_images() {
        let data = Array3::zeros((4, 12, 3));
        assert!(ImageTensor::new(data, None).is_err());
    }

    #[test]
    fn rejects_out_of_range_values() {
        let mut data = Array3::zeros((8, 8, 3));
        data[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::new(data, None).is_err());
    }

    #[test]
    fn bridge_record_must_be_unlabeled() {
        let img = ImageTensor::new(Array3::zeros((8, 8, 3)), None).unwrap();
        let mask = MaskTensor::new(Array2::zeros((8, 8)), MaskKind::GroundTruth).unwrap();
        assert!(DatasetRecord::new(img.clone(), Some(mask), Task::Bridge, "b".into()).is_err());
        assert!(DatasetRecord::new(img, None, Task::Bridge, "b".into()).is_ok());
    }

    #[test]
    fn record_size_mismatch_reports_both_shapes() {
        let img = ImageTensor::new(Array3::zeros((64, 64, 3)), None).unwrap();
        let mask = MaskTensor::new(Array2::zeros((32, 32)), MaskKind::GroundTruth).unwrap();
        let err = DatasetRecord::new(img, Some(mask), Task::Sod, "x".into()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("64x64") && msg.contains("32x32"), "{msg}");
    }

    #[test]
    fn mask_resize_same_size_is_identity() {
        let data = Array2::from_shape_fn((5, 7), |(y, x)| ((y * 7 + x) as f32) / 40.0);
        let m = MaskTensor::new(data.clone(), MaskKind::Prediction).unwrap();
        assert_eq!(m.resize(5, 7).unwrap().data, data);
    }
}
