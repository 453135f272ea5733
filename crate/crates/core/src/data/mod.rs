//! Dataset ingestion, train/test splits, augmentation, and synthetic
//! corpora for desk-scale experiments.

mod augment;
mod io;
mod synth;

pub use augment::{augment, AugmentationSpec, Flip};
pub use io::{
    load_dataset, load_image_tensor, tensor_to_gray8, write_mask_png, write_pgm16, write_pgm8,
    write_png_gray8, LoadedDataset,
};
pub use synth::{synth_corpus, ShapeFamily};

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::GroundTruthMask;
use crate::network::NetworkConfig;
use crate::tensor::{Scalar, Tensor};

/// One training/evaluation item: a grayscale image in `[0, 1]` and its
/// binary mask at the same resolution.
#[derive(Clone, Debug)]
pub struct Sample<S: Scalar = f32> {
    pub id: String,
    pub image: Tensor<S>,
    pub mask: GroundTruthMask<S>,
}

impl<S: Scalar> Sample<S> {
    pub fn new(id: impl Into<String>, image: Tensor<S>, mask: GroundTruthMask<S>) -> Result<Self> {
        if image.shape() != mask.values().shape() {
            return Err(Error::Data(format!(
                "image shape {:?} does not match mask shape {:?}",
                image.shape(),
                mask.values().shape()
            )));
        }
        image.dims4()?;
        Ok(Sample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, _, h, w) = self.image.dims4().expect("validated in constructor");
        (h, w)
    }

    pub(crate) fn check_resolution(&self, config: &NetworkConfig) -> Result<()> {
        let (h, w) = self.resolution();
        if (h, w) != (config.input_height, config.input_width) {
            return Err(Error::Data(format!(
                "sample `{}` is {h}x{w}, network expects {}x{}",
                self.id, config.input_height, config.input_width
            )));
        }
        Ok(())
    }
}

/// Disjoint train/test partition by image id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    /// Seeded random selection of `train_count` ids; the rest are test.
    /// Both lists come out sorted.
    pub fn seeded(ids: &[String], train_count: usize, seed: u64) -> Result<Split> {
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::Data("split input contains duplicate ids".into()));
        }
        if train_count > ids.len() {
            return Err(Error::Data(format!(
                "cannot take {train_count} training ids from {} samples",
                ids.len()
            )));
        }
        let mut shuffled: Vec<String> = ids.to_vec();
        shuffled.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shuffled.shuffle(&mut rng);
        let mut train: Vec<String> = shuffled[..train_count].to_vec();
        let mut test: Vec<String> = shuffled[train_count..].to_vec();
        train.sort();
        test.sort();
        Ok(Split { train, test })
    }

    /// Writes `id,train` / `id,test` lines.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut lines = Vec::with_capacity(self.train.len() + self.test.len());
        for id in &self.train {
            lines.push(format!("{id},train"));
        }
        for id in &self.test {
            lines.push(format!("{id},test"));
        }
        std::fs::write(path, lines.join("\n") + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Split> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut split = Split {
            train: Vec::new(),
            test: Vec::new(),
        };
        for (lineno, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (id, kind) = line.split_once(',').ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: expected `id,train|test`, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            match kind.trim() {
                "train" => split.train.push(id.trim().to_string()),
                "test" => split.test.push(id.trim().to_string()),
                other => {
                    return Err(Error::Data(format!(
                        "{}:{}: unknown split kind `{other}`",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        let overlap: Vec<&String> = split
            .train
            .iter()
            .filter(|id| split.test.contains(id))
            .collect();
        if !overlap.is_empty() {
            return Err(Error::Data(format!(
                "split lists {} id(s) as both train and test (first: `{}`)",
                overlap.len(),
                overlap[0]
            )));
        }
        Ok(split)
    }

    /// Partitions samples by id. Ids in the split but missing from the
    /// samples are an error; samples not mentioned are dropped.
    pub fn partition<S: Scalar>(
        &self,
        samples: &[Sample<S>],
    ) -> Result<(Vec<Sample<S>>, Vec<Sample<S>>)> {
        let pick = |ids: &[String]| -> Result<Vec<Sample<S>>> {
            ids.iter()
                .map(|id| {
                    samples
                        .iter()
                        .find(|s| &s.id == id)
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("split names unknown id `{id}`")))
                })
                .collect()
        };
        Ok((pick(&self.train)?, pick(&self.test)?))
    }
}
