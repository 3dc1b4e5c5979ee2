//! Overlap and surface-distance metrics on binary masks, plus connected
//! components.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boolean voxels in `[z, y, x]` order, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<bool>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("mask dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!("spacing must be positive, got {spacing:?}")));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} voxels do not fill dims {dims:?}",
                voxels.len()
            )));
        }
        Ok(Self { dims, spacing, voxels })
    }

    /// Voxels whose label equals `class`.
    pub fn from_labels(labels: &[u8], dims: [usize; 3], spacing: [f64; 3], class: u8) -> Result<Self> {
        Self::new(dims, spacing, labels.iter().map(|&l| l == class).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Foreground voxels with a background face neighbour or on the border.
    pub fn surface(&self) -> Vec<[usize; 3]> {
        let [dz, dy, dx] = self.dims;
        let mut out = Vec::new();
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    if !self.voxels[self.index(z, y, x)] {
                        continue;
                    }
                    let border = z == 0 || y == 0 || x == 0 || z + 1 == dz || y + 1 == dy || x + 1 == dx;
                    let exposed = border
                        || !self.voxels[self.index(z - 1, y, x)]
                        || !self.voxels[self.index(z + 1, y, x)]
                        || !self.voxels[self.index(z, y - 1, x)]
                        || !self.voxels[self.index(z, y + 1, x)]
                        || !self.voxels[self.index(z, y, x - 1)]
                        || !self.voxels[self.index(z, y, x + 1)];
                    if exposed {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("mask dims differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut na, mut nb) = (0, 0);
    for (&x, &y) in a.voxels.iter().zip(&b.voxels) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    (inter, na, nb)
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both are empty.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    let (inter, na, nb) = overlap(a, b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`; 1 when the union is empty.
pub fn iou_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    let (inter, na, nb) = overlap(a, b);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Symmetric 95th-percentile surface distance in the mask's spacing units.
///
/// `Ok(None)` when exactly one mask is empty; `Ok(Some(0.0))` when both are.
/// Percentiles use the nearest rank: the `⌈0.95·n⌉`-th smallest distance.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    check_pair(a, b)?;
    let (sa, sb) = (a.surface(), b.surface());
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let to_b = squared_distance_field(a.dims, a.spacing, &sb);
    let to_a = squared_distance_field(a.dims, a.spacing, &sa);
    let directed = |from: &[[usize; 3]], field: &[f64]| {
        let d: Vec<f64> = from.iter().map(|&[z, y, x]| field[a.index(z, y, x)]).collect();
        nearest_rank_p95(d).sqrt()
    };
    Ok(Some(directed(&sa, &to_b).max(directed(&sb, &to_a))))
}

/// The `⌈0.95·n⌉`-th smallest value (1-based rank).
fn nearest_rank_p95(mut values: Vec<f64>) -> f64 {
    let n = values.len();
    let rank = (95 * n).div_ceil(100).max(1);
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

/// Exact squared Euclidean distance from every voxel centre to the nearest
/// site, with per-axis spacing. Separable lower-envelope transform, one axis
/// at a time (x, then y, then z).
fn squared_distance_field(dims: [usize; 3], spacing: [f64; 3], sites: &[[usize; 3]]) -> Vec<f64> {
    let [dz, dy, dx] = dims;
    let mut field = vec![f64::INFINITY; dz * dy * dx];
    for &[z, y, x] in sites {
        field[(z * dy + y) * dx + x] = 0.0;
    }
    let longest = dz.max(dy).max(dx);
    let mut scratch = Envelope::with_capacity(longest);
    let mut line = vec![0.0; longest];
    // (axis length, stride, number of lines, line start for line k, spacing)
    let passes: [(usize, usize, usize, Box<dyn Fn(usize) -> usize>, f64); 3] = [
        (dx, 1, dz * dy, Box::new(move |k| k * dx), spacing[2]),
        (dy, dx, dz * dx, Box::new(move |k| (k / dx) * dy * dx + k % dx), spacing[1]),
        (dz, dy * dx, dy * dx, Box::new(|k| k), spacing[0]),
    ];
    for (len, stride, lines, start, step) in passes.iter() {
        for k in 0..*lines {
            let s = start(k);
            for (i, v) in line[..*len].iter_mut().enumerate() {
                *v = field[s + i * stride];
            }
            scratch.transform(&mut line[..*len], *step);
            for (i, &v) in line[..*len].iter().enumerate() {
                field[s + i * stride] = v;
            }
        }
    }
    field
}

struct Envelope {
    roots: Vec<usize>,
    bounds: Vec<f64>,
    values: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            roots: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
            values: vec![0.0; n],
        }
    }

    /// In place: `f(q) ← min_v (step·(q − v))² + f(v)`.
    fn transform(&mut self, f: &mut [f64], step: f64) {
        let s2 = step * step;
        self.roots.clear();
        self.bounds.clear();
        let key = |f: &[f64], q: usize| f[q] + s2 * (q * q) as f64;
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                let Some(&v) = self.roots.last() else {
                    self.roots.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let cross = (key(f, q) - key(f, v)) / (2.0 * s2 * (q - v) as f64);
                if cross <= *self.bounds.last().expect("bound per root") {
                    self.roots.pop();
                    self.bounds.pop();
                } else {
                    self.roots.push(q);
                    self.bounds.push(cross);
                    break;
                }
            }
        }
        if self.roots.is_empty() {
            return;
        }
        let mut r = 0;
        for q in 0..f.len() {
            while r + 1 < self.roots.len() && self.bounds[r + 1] < q as f64 {
                r += 1;
            }
            let v = self.roots[r];
            let d = step * (q as f64 - v as f64);
            self.values[q] = d * d + f[v];
        }
        f.copy_from_slice(&self.values[..f.len()]);
    }
}

/// 6-connected components, numbered from 1 in order of each component's
/// first voxel in scan order. Returns the label per voxel and the count.
pub fn connected_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let [dz, dy, dx] = mask.dims;
    let mut labels = vec![0u32; mask.voxels.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.voxels.len() {
        if !mask.voxels[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (z, y, x) = (i / (dy * dx), (i / dx) % dy, i % dx);
            let mut visit = |j: usize| {
                if mask.voxels[j] && labels[j] == 0 {
                    labels[j] = count;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < dx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - dx);
            }
            if y + 1 < dy {
                visit(i + dx);
            }
            if z > 0 {
                visit(i - dy * dx);
            }
            if z + 1 < dz {
                visit(i + dy * dx);
            }
        }
    }
    (labels, count as usize)
}

/// Per-class scores of one predicted label map against ground truth.
/// Index `j` refers to class `j + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub dsc: Vec<f64>,
    pub iou: Vec<f64>,
    /// `None` when exactly one of prediction and truth is empty.
    pub hd95: Vec<Option<f64>>,
    pub undefined_hd95: usize,
}

impl SegReport {
    pub fn from_label_maps(
        pred: &[u8],
        truth: &[u8],
        dims: [usize; 3],
        spacing: [f64; 3],
        num_classes: usize,
    ) -> Result<Self> {
        let mut report = Self {
            dsc: Vec::with_capacity(num_classes),
            iou: Vec::with_capacity(num_classes),
            hd95: Vec::with_capacity(num_classes),
            undefined_hd95: 0,
        };
        for class in 1..=num_classes {
            let class = u8::try_from(class).map_err(|_| Error::Domain(format!("class {class} exceeds u8")))?;
            let p = BinaryMask::from_labels(pred, dims, spacing, class)?;
            let t = BinaryMask::from_labels(truth, dims, spacing, class)?;
            report.dsc.push(dice_score(&p, &t)?);
            report.iou.push(iou_score(&p, &t)?);
            let h = hd95(&p, &t)?;
            report.undefined_hd95 += h.is_none() as usize;
            report.hd95.push(h);
        }
        Ok(report)
    }
}

/// Means over samples; HD95 means skip undefined entries, whose count is kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegSummary {
    pub samples: usize,
    pub mean_dsc: Vec<f64>,
    pub mean_iou: Vec<f64>,
    /// `None` when every entry of the class was undefined.
    pub mean_hd95: Vec<Option<f64>>,
    pub undefined_hd95: Vec<usize>,
}

impl SegSummary {
    pub fn from_reports(reports: &[SegReport]) -> Self {
        let n = reports.first().map_or(0, |r| r.dsc.len());
        let count = reports.len() as f64;
        let mean = |f: &dyn Fn(&SegReport) -> f64| reports.iter().map(f).sum::<f64>() / count;
        let mut summary = Self {
            samples: reports.len(),
            mean_dsc: (0..n).map(|j| mean(&|r| r.dsc[j])).collect(),
            mean_iou: (0..n).map(|j| mean(&|r| r.iou[j])).collect(),
            mean_hd95: Vec::with_capacity(n),
            undefined_hd95: Vec::with_capacity(n),
        };
        for j in 0..n {
            let defined: Vec<f64> = reports.iter().filter_map(|r| r.hd95[j]).collect();
            summary.undefined_hd95.push(reports.len() - defined.len());
            summary.mean_hd95.push(
                (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            );
        }
        summary
    }

    /// Mean DSC over all classes.
    pub fn overall_dsc(&self) -> f64 {
        if self.mean_dsc.is_empty() {
            return 0.0;
        }
        self.mean_dsc.iter().sum::<f64>() / self.mean_dsc.len() as f64
    }
}
