use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, SampleEntry, Split, SubDataset, MANIFEST_FILE};
use super::{format, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::losses::PartialLabelSet;

const CENTER_RETRIES: usize = 1000;
const SAMPLE_RETRIES: usize = 100;

/// One sub-dataset to generate: `count` samples annotating `annotated`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubDatasetSpec {
    pub id: String,
    pub annotated: Vec<usize>,
    pub count: usize,
    #[serde(default)]
    pub split: Split,
}

impl SubDatasetSpec {
    /// Parses `id:c1,c2xCOUNT` entries separated by `;`, e.g.
    /// `d1:1,2x20;d2:5x4`. The `x` may also be written `×`.
    pub fn parse_list(spec: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for entry in spec.split(';').map(str::trim).filter(|e| !e.is_empty()) {
            let bad = |why: &str| Error::Config(format!("dataset spec {entry:?}: {why}"));
            let (id, rest) = entry.split_once(':').ok_or_else(|| bad("expected id:classesxcount"))?;
            let rest = rest.replace('×', "x");
            let (classes, count) = rest.rsplit_once('x').ok_or_else(|| bad("missing xCOUNT"))?;
            let annotated = classes
                .split(',')
                .map(|c| c.trim().parse::<usize>().map_err(|_| bad("classes must be integers")))
                .collect::<Result<Vec<_>>>()?;
            let count = count.trim().parse().map_err(|_| bad("count must be an integer"))?;
            out.push(Self {
                id: id.trim().to_string(),
                annotated,
                count,
                split: Split::Train,
            });
        }
        if out.is_empty() {
            return Err(Error::Config("dataset spec lists no sub-datasets".into()));
        }
        Ok(out)
    }
}

/// Ellipsoid phantoms: one axis-aligned ellipsoid per class over a noisy
/// background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub name: String,
    /// `[z, y, x]` voxels.
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub num_classes: usize,
    /// Per class `(min, max)` semi-axis length in voxels.
    pub radius_ranges: Vec<(f64, f64)>,
    pub background_intensity: f32,
    pub noise_std: f32,
    pub datasets: Vec<SubDatasetSpec>,
    pub seed: u64,
}

impl PhantomSpec {
    /// Defaults scaled to `dims`: radii between 1/8 and 1/5 of the shortest
    /// axis for every class.
    pub fn new(dims: [usize; 3], num_classes: usize, datasets: Vec<SubDatasetSpec>, seed: u64) -> Self {
        let short = *dims.iter().min().unwrap_or(&0) as f64;
        Self {
            name: "phantom".into(),
            dims,
            spacing: [1.0, 1.0, 1.0],
            num_classes,
            radius_ranges: vec![(short / 8.0, short / 5.0); num_classes],
            background_intensity: 0.05,
            noise_std: 0.05,
            datasets,
            seed,
        }
    }

    /// `0.1 + 0.15·c`, capped at 0.95.
    pub fn class_intensity(class: usize) -> f32 {
        (0.1 + 0.15 * class as f32).min(0.95)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > u8::MAX as usize {
            return bad(format!("num_classes must be in 1..=255, got {}", self.num_classes));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.radius_ranges.len() != self.num_classes {
            return bad(format!(
                "{} radius ranges for {} classes",
                self.radius_ranges.len(),
                self.num_classes
            ));
        }
        let fit = (*self.dims.iter().min().expect("3 dims") as f64 - 1.0) / 2.0;
        for (c, &(lo, hi)) in self.radius_ranges.iter().enumerate() {
            if !(lo > 0.0 && lo <= hi && hi <= fit) {
                return bad(format!(
                    "class {} radius range ({lo}, {hi}) must satisfy 0 < min <= max <= {fit}",
                    c + 1
                ));
            }
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        for d in &self.datasets {
            if d.count == 0 {
                return bad(format!("dataset {} needs at least one sample", d.id));
            }
            PartialLabelSet::new(&d.annotated, self.num_classes)
                .map_err(|e| Error::Config(format!("dataset {}: {e}", d.id)))?;
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn bound(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }
}

/// Intensities and full labels of sample `index`. The stream is seeded with
/// `seed ^ index`, so samples can be produced in any order.
pub fn generate_sample(spec: &PhantomSpec, index: u64) -> Result<(Volume, LabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index);
    let shapes = (0..SAMPLE_RETRIES)
        .find_map(|_| place_ellipsoids(spec, &mut rng))
        .ok_or_else(|| {
            Error::Generation(format!(
                "sample {index}: could not place {} non-overlapping ellipsoids in {:?}",
                spec.num_classes, spec.dims
            ))
        })?;

    let [dz, dy, dx] = spec.dims;
    let noise = Normal::new(0.0f32, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut labels = vec![0u8; dz * dy * dx];
    let mut data = vec![0f32; dz * dy * dx];
    let mut i = 0;
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let p = [z as f64, y as f64, x as f64];
                let class = shapes.iter().position(|e| e.contains(p)).map_or(0, |c| c + 1);
                labels[i] = class as u8;
                let base = if class == 0 {
                    spec.background_intensity
                } else {
                    PhantomSpec::class_intensity(class)
                };
                data[i] = base + noise.sample(&mut rng);
                i += 1;
            }
        }
    }
    Ok((Volume::new(spec.dims, spec.spacing, data)?, LabelMap::new(spec.dims, labels)?))
}

/// One ellipsoid per class with disjoint bounding spheres, or `None` if a
/// class could not be placed within the retry budget.
fn place_ellipsoids(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Option<Vec<Ellipsoid>> {
    let mut placed: Vec<Ellipsoid> = Vec::with_capacity(spec.num_classes);
    for &(lo, hi) in &spec.radius_ranges {
        let radii = [0; 3].map(|_| if lo < hi { rng.gen_range(lo..=hi) } else { lo });
        let bound = radii.iter().copied().fold(0.0, f64::max);
        let mut found = None;
        for _ in 0..CENTER_RETRIES {
            let center: [f64; 3] =
                std::array::from_fn(|a| rng.gen_range(radii[a]..=(spec.dims[a] as f64 - 1.0 - radii[a])));
            let clear = placed.iter().all(|e| {
                let d2: f64 = (0..3).map(|a| (e.center[a] - center[a]).powi(2)).sum();
                d2.sqrt() > e.bound() + bound
            });
            if clear {
                found = Some(Ellipsoid { center, radii });
                break;
            }
        }
        placed.push(found?);
    }
    Some(placed)
}

/// Writes every sub-dataset under `out_dir` plus `manifest.json`.
///
/// Sample indices run across sub-datasets in order. Each sample produces a
/// volume, its full label map and a training view in which classes outside
/// the sub-dataset's annotated set are relabeled 0.
pub fn generate_phantom_dataset(spec: &PhantomSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut datasets = Vec::with_capacity(spec.datasets.len());
    let mut index = 0u64;
    for d in &spec.datasets {
        let dir = out_dir.join(&d.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let set = PartialLabelSet::new(&d.annotated, spec.num_classes)?;
        let mut samples = Vec::with_capacity(d.count);
        for k in 0..d.count {
            let (volume, full) = generate_sample(spec, index)?;
            index += 1;
            let partial = full.restricted_to(&set);
            let entry = SampleEntry {
                volume: format!("{}/sample_{k:04}.tctv", d.id),
                labels: format!("{}/sample_{k:04}_labels.tctl", d.id),
                full_labels: format!("{}/sample_{k:04}_full.tctl", d.id),
            };
            format::save_volume(&out_dir.join(&entry.volume), &volume)?;
            format::save_labels(&out_dir.join(&entry.labels), &partial)?;
            format::save_labels(&out_dir.join(&entry.full_labels), &full)?;
            samples.push(entry);
        }
        datasets.push(SubDataset {
            id: d.id.clone(),
            annotated: set.labeled().to_vec(),
            split: d.split,
            samples,
        });
    }
    let manifest = DatasetManifest::new(
        spec.name.clone(),
        (1..=spec.num_classes).map(|c| format!("class_{c}")).collect(),
        datasets,
        out_dir.to_path_buf(),
    );
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
