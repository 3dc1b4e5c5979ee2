use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PartialLabelSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub volume: String,
    /// Training labels: classes outside the sub-dataset's annotated set are 0.
    pub labels: String,
    /// Every class labeled; used for evaluation.
    pub full_labels: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubDataset {
    pub id: String,
    pub annotated: Vec<usize>,
    #[serde(default)]
    pub split: Split,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub datasets: Vec<SubDataset>,
    #[serde(skip)]
    root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn new(name: String, classes: Vec<String>, datasets: Vec<SubDataset>, root: PathBuf) -> Self {
        Self {
            name,
            classes,
            datasets,
            root,
        }
    }

    /// Reads `dir/manifest.json` (or `dir` itself if it is a file), then
    /// checks annotated sets and that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: file.clone(),
            source: e,
        })?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate(&file)?;
        Ok(m)
    }

    fn validate(&self, file: &Path) -> Result<()> {
        let bad = |msg: String| Error::format(file, 0, msg);
        if self.classes.is_empty() {
            return Err(bad("manifest lists no classes".into()));
        }
        for d in &self.datasets {
            PartialLabelSet::new(&d.annotated, self.num_classes())
                .map_err(|e| bad(format!("dataset {}: {e}", d.id)))?;
            for s in &d.samples {
                for rel in [&s.volume, &s.labels, &s.full_labels] {
                    let p = self.resolve(rel);
                    if !p.is_file() {
                        return Err(Error::io(
                            p,
                            std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// `(sub-dataset, sample)` pairs of one split, in manifest order.
    pub fn samples(&self, split: Split) -> impl Iterator<Item = (&SubDataset, &SampleEntry)> {
        self.datasets
            .iter()
            .filter(move |d| d.split == split)
            .flat_map(|d| d.samples.iter().map(move |s| (d, s)))
    }
}
