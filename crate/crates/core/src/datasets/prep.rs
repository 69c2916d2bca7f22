use serde::{Deserialize, Serialize};

use super::{DatasetError, ImageShape, LabeledDataset};

/// Feature preprocessing applied identically to every dataset of a run.
///
/// Order: optional bilinear resize of image-shaped data, per-feature
/// standardization on the full dataset, then truncation or zero-padding to
/// `input_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub input_dim: Option<usize>,
    /// Target `(height, width)` for image-shaped datasets.
    #[serde(default)]
    pub image_size: Option<(usize, usize)>,
}

fn yes() -> bool {
    true
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            standardize: true,
            input_dim: None,
            image_size: None,
        }
    }
}

impl Preprocess {
    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset, DatasetError> {
        let mut out = ds.clone();
        if let (Some(shape), Some((h, w))) = (out.image, self.image_size) {
            if h == 0 || w == 0 {
                return Err(DatasetError::Invalid("image size must be positive".into()));
            }
            let resized = ImageShape {
                channels: shape.channels,
                height: h,
                width: w,
            };
            let mut features = Vec::with_capacity(out.len() * resized.len());
            for i in 0..out.len() {
                features.extend(bilinear_resize(out.row(i), shape, h, w));
            }
            out.features = features;
            out.feature_dim = resized.len();
            out.image = Some(resized);
        }
        if self.standardize {
            standardize(&mut out);
        }
        if let Some(dim) = self.input_dim {
            project(&mut out, dim)?;
        }
        Ok(out)
    }
}

/// Zero mean and unit variance per feature; constant features are only
/// centered.
fn standardize(ds: &mut LabeledDataset) {
    let (n, d) = (ds.len(), ds.feature_dim);
    let mut mean = vec![0.0; d];
    for row in ds.features.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in ds.features.chunks_exact(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / n as f64).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    for row in ds.features.chunks_exact_mut(d) {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) * scale[j];
        }
    }
}

fn project(ds: &mut LabeledDataset, dim: usize) -> Result<(), DatasetError> {
    if dim == 0 {
        return Err(DatasetError::Invalid("input_dim must be positive".into()));
    }
    let d = ds.feature_dim;
    if d == dim {
        return Ok(());
    }
    let mut features = Vec::with_capacity(ds.len() * dim);
    for row in ds.features.chunks_exact(d) {
        let keep = d.min(dim);
        features.extend_from_slice(&row[..keep]);
        features.extend(std::iter::repeat_n(0.0, dim - keep));
    }
    ds.features = features;
    ds.feature_dim = dim;
    ds.image = None;
    Ok(())
}

/// Bilinear resize of one channel-major image (half-pixel centers, edge
/// clamping).
pub fn bilinear_resize(pixels: &[f64], shape: ImageShape, out_h: usize, out_w: usize) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |dst: usize, scale: f64, limit: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(limit - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::with_capacity(shape.channels * out_h * out_w);
    for c in 0..shape.channels {
        let plane = &pixels[c * h * w..(c + 1) * h * w];
        for i in 0..out_h {
            let (y0, y1, fy) = coord(i, sy, h);
            for j in 0..out_w {
                let (x0, x1, fx) = coord(j, sx, w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}
