//! Volumes, label maps, synthetic phantom datasets and preprocessing.

pub mod format;
mod manifest;
mod phantom;

pub use format::{load_labels, load_volume, save_labels, save_volume};
pub use manifest::{DatasetManifest, SampleEntry, Split, SubDataset, MANIFEST_FILE};
pub use phantom::{generate_phantom_dataset, generate_sample, PhantomSpec, SubDatasetSpec};

use crate::error::{Error, Result};
use crate::losses::PartialLabelSet;
use crate::tensor::kernels::interp_axis;

/// Scalar image in `[z, y, x]` order, x fastest, with spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims, data.len())?;
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!("spacing must be positive, got {spacing:?}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume voxel {i} is {}", data[i])));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }

    /// Zero mean, unit variance over the whole volume; a constant volume
    /// maps to zeros.
    pub fn standardized(&self) -> Volume {
        let n = self.data.len().max(1) as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        let data = self.data.iter().map(|&v| ((v as f64 - mean) * scale) as f32).collect();
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }
}

/// Class index per voxel; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        check_dims(dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Errors if any label exceeds `num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().position(|&l| l as usize > num_classes) {
            Some(i) => Err(Error::Domain(format!(
                "voxel {i} has label {} but only {num_classes} classes exist",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Classes outside `set` become background; nothing else changes.
    pub fn restricted_to(&self, set: &PartialLabelSet) -> Self {
        let data = self
            .data
            .iter()
            .map(|&l| if l == 0 || set.contains(l as usize) { l } else { 0 })
            .collect();
        Self { dims: self.dims, data }
    }
}

fn check_dims(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
    }
    if dims.iter().product::<usize>() != len {
        return Err(Error::Shape(format!("{len} voxels do not fill dims {dims:?}")));
    }
    Ok(())
}

/// Clamps to `[lo, hi]` and maps linearly onto `[0, 1]`.
pub fn clip_normalize(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::Domain(format!("clip range needs lo < hi, got [{lo}, {hi}]")));
    }
    let data = v.data.iter().map(|&x| (x.clamp(lo, hi) - lo) / (hi - lo)).collect();
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Output dims `round(dims · spacing / target)`, at least 1 per axis.
pub fn resampled_dims(dims: [usize; 3], spacing: [f32; 3], target: [f32; 3]) -> [usize; 3] {
    std::array::from_fn(|a| {
        let n = (dims[a] as f64 * spacing[a] as f64 / target[a] as f64).round();
        (n as usize).max(1)
    })
}

/// Source index of output sample `o` under half-voxel centre alignment.
fn nearest_taps(n_in: usize, n_out: usize) -> Vec<usize> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(n_in - 1))
        .collect()
}

fn gather_nearest<T: Copy>(data: &[T], dims: [usize; 3], out: [usize; 3]) -> Vec<T> {
    let [tz, ty, tx] = [0, 1, 2].map(|a| nearest_taps(dims[a], out[a]));
    let mut res = Vec::with_capacity(out.iter().product());
    for &z in &tz {
        for &y in &ty {
            for &x in &tx {
                res.push(data[(z * dims[1] + y) * dims[2] + x]);
            }
        }
    }
    res
}

/// Resamples to `target` spacing with half-voxel centre alignment (sample
/// `o` reads source coordinate `(o + 0.5)·n_in/n_out − 0.5`, clamped).
pub fn resample(v: &Volume, target: [f32; 3], mode: Interpolation) -> Result<Volume> {
    if target.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Domain(format!("target spacing must be positive, got {target:?}")));
    }
    let out = resampled_dims(v.dims, v.spacing, target);
    let [dz, dy, dx] = v.dims;
    let data = match mode {
        Interpolation::Nearest => gather_nearest(&v.data, v.dims, out),
        Interpolation::Trilinear => {
            let d = interp_axis(&v.data, dz * dy, dx, 1, out[2]);
            let d = interp_axis(&d, dz, dy, out[2], out[1]);
            interp_axis(&d, 1, dz, out[1] * out[2], out[0])
        }
    };
    Volume::new(out, target, data)
}

/// Nearest-neighbour resampling of labels from `spacing` to `target`.
pub fn resample_labels(l: &LabelMap, spacing: [f32; 3], target: [f32; 3]) -> Result<LabelMap> {
    if target.iter().chain(&spacing).any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Domain("spacings must be positive".into()));
    }
    let out = resampled_dims(l.dims, spacing, target);
    LabelMap::new(out, gather_nearest(&l.data, l.dims, out))
}
