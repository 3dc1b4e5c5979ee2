use serde::{Deserialize, Serialize};

use crate::data::{load_labels, load_volume, DatasetManifest, LabelMap, Split, Volume};
use crate::error::{Error, Result};
use crate::metrics::{SegReport, SegSummary};
use crate::tensor::Tensor;
use crate::unet::UNetModel;

/// Tile origins along one axis: multiples of `stride`, plus a final tile
/// flush with the end so every voxel is covered.
fn tile_starts(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

/// Sliding-window MSH probabilities `[N+1, Z, Y, X]` for a whole volume.
///
/// Tiles are `patch`-sized with stride `patch/2`; overlapping probabilities
/// are averaged. The volume is standardized first, as in training; axes
/// shorter than `patch` are zero-padded after that.
pub fn predict_probs(model: &UNetModel<f32>, volume: &Volume, patch: [usize; 3]) -> Result<Tensor<f32>> {
    let volume = &volume.standardized();
    let dims = volume.dims;
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].max(patch[a]));
    let c = model.config().num_classes + 1;
    let stride: [usize; 3] = std::array::from_fn(|a| (patch[a] / 2).max(1));
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| tile_starts(padded[a], patch[a], stride[a]));
    let plane = padded[1] * padded[2];
    let nvox = padded[0] * plane;
    let mut acc = vec![0.0f32; c * nvox];
    let mut hits = vec![0u16; nvox];
    let tile_vox: usize = patch.iter().product();
    let mut tile = vec![0.0f32; tile_vox];
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                tile.fill(0.0);
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        let (sz, sy) = (z0 + z, y0 + y);
                        if sz >= dims[0] || sy >= dims[1] || x0 >= dims[2] {
                            continue;
                        }
                        let n = patch[2].min(dims[2] - x0);
                        let src = (sz * dims[1] + sy) * dims[2] + x0;
                        let dst = (z * patch[1] + y) * patch[2];
                        tile[dst..dst + n].copy_from_slice(&volume.data[src..src + n]);
                    }
                }
                let input = Tensor::new(vec![1, 1, patch[0], patch[1], patch[2]], tile.clone())?;
                let probs = model.forward_inference(&input)?;
                let p = probs.data();
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        let dst = (z0 + z) * plane + (y0 + y) * padded[2] + x0;
                        let src = (z * patch[1] + y) * patch[2];
                        for x in 0..patch[2] {
                            hits[dst + x] += 1;
                        }
                        for ch in 0..c {
                            let a = &mut acc[ch * nvox + dst..ch * nvox + dst + patch[2]];
                            let b = &p[ch * tile_vox + src..ch * tile_vox + src + patch[2]];
                            for (a, b) in a.iter_mut().zip(b) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
    }
    let voxels = volume.voxels();
    let mut out = vec![0.0f32; c * voxels];
    for ch in 0..c {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let i = z * plane + y * padded[2] + x;
                    out[ch * voxels + (z * dims[1] + y) * dims[2] + x] = acc[ch * nvox + i] / hits[i] as f32;
                }
            }
        }
    }
    Tensor::new(vec![c, dims[0], dims[1], dims[2]], out)
}

/// Per-voxel argmax of `[C, ...]` probabilities; ties go to the lower class.
pub fn argmax_labels(probs: &Tensor<f32>) -> Result<LabelMap> {
    let s = probs.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [C, Z, Y, X], got {s:?}")));
    }
    let n: usize = s[1..].iter().product();
    let p = probs.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for ch in 1..s[0] {
                if p[ch * n + i] > p[best * n + i] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new([s[1], s[2], s[3]], labels)
}

pub fn predict_labels(model: &UNetModel<f32>, volume: &Volume, patch: [usize; 3]) -> Result<LabelMap> {
    argmax_labels(&predict_probs(model, volume, patch)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEvaluation {
    pub dataset: String,
    pub volume: String,
    pub report: SegReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: Vec<SampleEvaluation>,
    pub summary: SegSummary,
}

impl Evaluation {
    /// One row per sample and class, then `mean` rows per class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,volume,class,dsc,iou,hd95\n");
        let cell = |h: Option<f64>| h.map_or_else(String::new, |v| v.to_string());
        for s in &self.samples {
            for j in 0..s.report.dsc.len() {
                out += &format!(
                    "{},{},{},{},{},{}\n",
                    s.dataset,
                    s.volume,
                    j + 1,
                    s.report.dsc[j],
                    s.report.iou[j],
                    cell(s.report.hd95[j])
                );
            }
        }
        let m = &self.summary;
        for j in 0..m.mean_dsc.len() {
            out += &format!(
                "mean,,{},{},{},{}\n",
                j + 1,
                m.mean_dsc[j],
                m.mean_iou[j],
                cell(m.mean_hd95[j])
            );
        }
        out
    }
}

/// Scores `predict(volume, full_labels)` against the full labels of every
/// sample in `split`.
pub fn evaluate_with<F>(manifest: &DatasetManifest, split: Split, mut predict: F) -> Result<Evaluation>
where
    F: FnMut(&Volume, &LabelMap) -> Result<LabelMap>,
{
    let n = manifest.num_classes();
    let mut samples = Vec::new();
    for (d, s) in manifest.samples(split) {
        let volume = load_volume(&manifest.resolve(&s.volume))?;
        let truth = load_labels(&manifest.resolve(&s.full_labels))?;
        if truth.dims != volume.dims {
            return Err(Error::Shape(format!(
                "{}: labels {:?} do not match volume {:?}",
                s.full_labels, truth.dims, volume.dims
            )));
        }
        truth.check_classes(n)?;
        let pred = predict(&volume, &truth)?;
        if pred.dims != volume.dims {
            return Err(Error::Shape(format!("prediction {:?} for {:?}", pred.dims, volume.dims)));
        }
        let spacing = volume.spacing.map(f64::from);
        let report = SegReport::from_label_maps(pred.data(), truth.data(), volume.dims, spacing, n)?;
        samples.push(SampleEvaluation {
            dataset: d.id.clone(),
            volume: s.volume.clone(),
            report,
        });
    }
    if samples.is_empty() {
        return Err(Error::Config(format!("manifest has no {split:?} samples to evaluate")));
    }
    let reports: Vec<SegReport> = samples.iter().map(|s| s.report.clone()).collect();
    let summary = SegSummary::from_reports(&reports);
    Ok(Evaluation { samples, summary })
}

/// Sliding-window evaluation of `model` on `split`.
pub fn evaluate(model: &UNetModel<f32>, manifest: &DatasetManifest, split: Split) -> Result<Evaluation> {
    if model.config().num_classes != manifest.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset {}",
            model.config().num_classes,
            manifest.num_classes()
        )));
    }
    let patch = model.config().patch_size;
    evaluate_with(manifest, split, |v, _| predict_labels(model, v, patch))
}
