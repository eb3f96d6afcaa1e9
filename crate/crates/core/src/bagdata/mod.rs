//! Synthetic data generation, bag files, manifests and in-memory datasets.

mod format;
mod manifest;
mod synth;

pub use format::{decode_bag, encode_bag, read_bag, write_bag, BAG_MAGIC, BAG_VERSION};
pub use manifest::{assign_splits, format_manifest, load_manifest, parse_manifest, ManifestEntry, Split};
pub use synth::{generate_dataset, generate_slide, PlantedSlide, SynthSpec, SyntheticSlide, Target};

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::SurvivalRecord;
use crate::model::HeadKind;
use crate::pyramid::TokenBag;

#[derive(Clone, Debug, PartialEq)]
pub struct Slide {
    pub id: String,
    pub bag: TokenBag,
    pub target: Target,
}

impl Slide {
    pub fn label(&self) -> Result<usize> {
        match self.target {
            Target::Class(c) => Ok(c),
            Target::Survival(_) => Err(Error::Config(format!("slide {} has no class label", self.id))),
        }
    }

    pub fn record(&self) -> Result<SurvivalRecord> {
        match self.target {
            Target::Survival(r) => Ok(r),
            Target::Class(_) => Err(Error::Config(format!("slide {} has no survival record", self.id))),
        }
    }
}

/// Slides held in memory with their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: HeadKind,
    pub slides: Vec<Slide>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn new(task: HeadKind, slides: Vec<Slide>, splits: Vec<Split>) -> Result<Self> {
        if slides.len() != splits.len() {
            return Err(Error::Count(format!(
                "{} slides for {} split assignments",
                slides.len(),
                splits.len()
            )));
        }
        for s in &slides {
            let ok = matches!(
                (task, s.target),
                (HeadKind::Classification, Target::Class(_)) | (HeadKind::Survival, Target::Survival(_))
            );
            if !ok {
                return Err(Error::Config(format!("slide {} does not match the {} task", s.id, task.name())));
            }
        }
        Ok(Self { task, slides, splits })
    }

    /// Reads every bag named by a manifest.
    pub fn load(manifest: &Path, task: HeadKind, seed: u64) -> Result<Self> {
        let entries = load_manifest(manifest, task, seed)?;
        let mut slides = Vec::with_capacity(entries.len());
        let mut splits = Vec::with_capacity(entries.len());
        for e in entries {
            slides.push(Slide {
                bag: read_bag(&e.path)?,
                id: e.id,
                target: e.target,
            });
            splits.push(e.split);
        }
        Self::new(task, slides, splits)
    }

    /// A generated dataset with explicit split sizes, in generation order.
    pub fn from_synthetic(spec: &SynthSpec, n_train: usize, n_val: usize) -> Result<Self> {
        if n_train + n_val > spec.n_slides {
            return Err(Error::Config(format!(
                "{n_train} train + {n_val} val slides exceed n_slides = {}",
                spec.n_slides
            )));
        }
        let slides: Vec<Slide> = generate_dataset(spec)?
            .into_iter()
            .map(|s| Slide {
                id: s.id,
                bag: s.planted.bag,
                target: s.target,
            })
            .collect();
        let splits = (0..slides.len())
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                }
            })
            .collect();
        Self::new(spec.task, slides, splits)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.slides.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn num_levels(&self) -> usize {
        self.slides.first().map_or(0, |s| s.bag.num_levels())
    }

    pub fn dim(&self) -> usize {
        self.slides.first().map_or(0, |s| s.bag.dim)
    }

    /// Number of classes, `max label + 1`.
    pub fn classes(&self) -> usize {
        self.slides
            .iter()
            .filter_map(|s| s.label().ok())
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Same slides restricted to level `k` of every bag.
    pub fn single_level(&self, k: usize) -> Result<Self> {
        let slides = self
            .slides
            .iter()
            .map(|s| {
                Ok(Slide {
                    id: s.id.clone(),
                    bag: s.bag.single_level(k)?,
                    target: s.target,
                })
            })
            .collect::<Result<_>>()?;
        Self::new(self.task, slides, self.splits.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_split_sizes() {
        let spec = SynthSpec {
            n_slides: 12,
            dim: 4,
            ..SynthSpec::default()
        };
        let ds = Dataset::from_synthetic(&spec, 8, 2).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 8);
        assert_eq!(ds.indices(Split::Val), vec![8, 9]);
        assert_eq!(ds.indices(Split::Test), vec![10, 11]);
        assert_eq!(ds.classes(), 2);
        assert_eq!(ds.num_levels(), 2);
        assert_eq!(ds.single_level(1).unwrap().num_levels(), 1);
        assert!(Dataset::from_synthetic(&spec, 10, 3).is_err());
    }

    #[test]
    fn load_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_slides: 4,
            dim: 3,
            task: HeadKind::Survival,
            ..SynthSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let mut entries = Vec::new();
        for s in &data {
            let name = format!("{}.bag", s.id);
            write_bag(&s.planted.bag, &dir.path().join(&name)).unwrap();
            entries.push(ManifestEntry {
                id: s.id.clone(),
                path: name.into(),
                target: s.target,
                split: Split::Train,
            });
        }
        let m = dir.path().join("manifest.csv");
        std::fs::write(&m, format_manifest(&entries, false)).unwrap();
        let ds = Dataset::load(&m, HeadKind::Survival, 1).unwrap();
        assert_eq!(ds.slides.len(), 4);
        for (a, b) in ds.slides.iter().zip(&data) {
            assert_eq!(a.bag, b.planted.bag);
            assert_eq!(a.target, b.target);
        }
    }
}
