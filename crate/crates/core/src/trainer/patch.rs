use rand::Rng;

use crate::data::{LabelMap, Volume};
use crate::error::Result;
use crate::losses::{OneHotTarget, PartialLabelSet};
use crate::tensor::Tensor;

/// A crop of one sample. Regions outside the source volume are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
}

/// Draws a `patch`-sized crop.
///
/// With probability `foreground_prob` the crop is centred on a uniformly
/// chosen nonzero label voxel (clamped to valid origins), otherwise its
/// origin is uniform. The coin is always drawn, so the stream advances the
/// same way whether or not foreground exists.
pub fn sample_patch<R: Rng>(
    volume: &Volume,
    labels: &LabelMap,
    patch: [usize; 3],
    foreground_prob: f64,
    rng: &mut R,
) -> Patch {
    let dims = volume.dims;
    let room: [usize; 3] = std::array::from_fn(|a| dims[a].saturating_sub(patch[a]));
    let centred = rng.gen_bool(foreground_prob);
    let foreground = labels.data().iter().filter(|&&l| l != 0).count();
    let origin = if centred && foreground > 0 {
        let k = rng.gen_range(0..foreground);
        let i = labels
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .nth(k)
            .map(|(i, _)| i)
            .expect("k < foreground count");
        let at = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        std::array::from_fn(|a| at[a].saturating_sub(patch[a] / 2).min(room[a]))
    } else {
        std::array::from_fn(|a| if room[a] == 0 { 0 } else { rng.gen_range(0..=room[a]) })
    };
    crop(volume, labels, origin, patch)
}

/// Copies the window at `origin`, zero-filling past the volume's edge.
pub fn crop(volume: &Volume, labels: &LabelMap, origin: [usize; 3], patch: [usize; 3]) -> Patch {
    let dims = volume.dims;
    let n = patch.iter().product();
    let mut data = vec![0.0f32; n];
    let mut out_labels = vec![0u8; n];
    let span: [usize; 3] = std::array::from_fn(|a| patch[a].min(dims[a].saturating_sub(origin[a])));
    for z in 0..span[0] {
        for y in 0..span[1] {
            let src = ((origin[0] + z) * dims[1] + origin[1] + y) * dims[2] + origin[2];
            let dst = (z * patch[1] + y) * patch[2];
            data[dst..dst + span[2]].copy_from_slice(&volume.data[src..src + span[2]]);
            out_labels[dst..dst + span[2]].copy_from_slice(&labels.data()[src..src + span[2]]);
        }
    }
    Patch {
        origin,
        data,
        labels: out_labels,
    }
}

/// Network input and per-sample targets for one optimisation step.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    /// `[B, 1, Z, Y, X]`.
    pub input: Tensor<f32>,
    /// One target per sample, each over its own annotated set.
    pub targets: Vec<OneHotTarget<f32>>,
}

impl PatchBatch {
    pub fn new(patches: &[(Patch, PartialLabelSet)], patch: [usize; 3]) -> Result<Self> {
        let v: usize = patch.iter().product();
        let mut input = Vec::with_capacity(patches.len() * v);
        let mut targets = Vec::with_capacity(patches.len());
        for (p, set) in patches {
            input.extend_from_slice(&p.data);
            targets.push(OneHotTarget::from_labels(&p.labels, patch, set.clone())?);
        }
        let input = Tensor::new(vec![patches.len(), 1, patch[0], patch[1], patch[2]], input)?;
        Ok(Self { input, targets })
    }

    /// Voxels per patch.
    pub fn voxels_per_patch(&self) -> usize {
        self.input.shape()[2..].iter().product()
    }
}
