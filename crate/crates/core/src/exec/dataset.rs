//! Directory datasets: `<name>.mct` images plus an optional `labels.csv`
//! with `filename,label` columns.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{read_tensor, ExecError, TensorData, TensorValue};
use crate::ir::DType;

#[derive(Debug, Clone)]
pub struct Sample {
    /// File name including the `.mct` extension.
    pub name: String,
    /// `[H, W, C]` FP32 image.
    pub image: TensorValue,
    pub label: Option<String>,
}

/// Images held in memory, ordered by file name unless shuffled.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
}

/// A stacked batch and the sample indices it was built from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub tensor: TensorValue,
}

fn io(path: &Path, e: impl ToString) -> ExecError {
    ExecError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn read_labels(path: &Path) -> Result<HashMap<String, String>, ExecError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io(path, e))?;
    let mut labels = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| io(path, e))?;
        let (Some(file), Some(label)) = (record.get(0), record.get(1)) else {
            return Err(ExecError::Dataset(format!(
                "{}: rows need filename,label",
                path.display()
            )));
        };
        labels.insert(file.to_string(), label.to_string());
    }
    Ok(labels)
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self, ExecError> {
        let Some(first) = samples.first() else {
            return Err(ExecError::Dataset("dataset is empty".into()));
        };
        let shape = first.image.shape().to_vec();
        if let Some(bad) = samples
            .iter()
            .find(|s| s.image.shape() != shape || s.image.dtype() != DType::F32)
        {
            return Err(ExecError::Dataset(format!(
                "{} is {:?} {}, expected {:?} FP32",
                bad.name,
                bad.image.shape(),
                bad.image.dtype(),
                shape
            )));
        }
        Ok(Dataset { samples })
    }

    /// Loads every `.mct` file in `dir`, sorted by file name. Images may be
    /// stored as `[H, W, C]` or `[1, H, W, C]`.
    pub fn load(dir: &Path) -> Result<Self, ExecError> {
        let entries = std::fs::read_dir(dir).map_err(|e| io(dir, e))?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "mct") {
                files.push(path);
            }
        }
        files.sort();

        let labels_path = dir.join("labels.csv");
        let labels = if labels_path.exists() {
            read_labels(&labels_path)?
        } else {
            HashMap::new()
        };

        let mut samples = Vec::with_capacity(files.len());
        for path in files {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let mut image = read_tensor(&path)?;
            if image.shape().len() == 4 && image.shape()[0] == 1 {
                let shape = image.shape()[1..].to_vec();
                image = image.with_shape(shape)?;
            }
            if image.shape().len() != 3 {
                return Err(ExecError::Dataset(format!(
                    "{name}: expected an HWC image, got {:?}",
                    image.shape()
                )));
            }
            let stem = name.trim_end_matches(".mct");
            let label = labels.get(&name).or_else(|| labels.get(stem)).cloned();
            samples.push(Sample { name, image, label });
        }
        Self::from_samples(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn image_shape(&self) -> &[usize] {
        self.samples[0].image.shape()
    }

    /// Reorders samples with a seeded shuffle.
    pub fn shuffle(&mut self, seed: u64) {
        self.samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    /// Stacks the given samples into an `[B, H, W, C]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch, ExecError> {
        let per = self.samples[0].image.numel();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            let sample = self
                .samples
                .get(i)
                .ok_or_else(|| ExecError::Dataset(format!("no sample {i}")))?;
            match &sample.image.data {
                TensorData::F32(v) => data.extend_from_slice(v),
                _ => unreachable!("dataset images are FP32"),
            }
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Ok(Batch {
            indices: indices.to_vec(),
            tensor: TensorValue::f32(shape, data)?,
        })
    }

    /// Consecutive batches covering every sample once; the last may be short.
    pub fn epoch_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// `count` full batches, wrapping around the dataset as needed.
    pub fn cycled_batches(&self, batch_size: usize, count: usize, start: usize) -> Vec<Vec<usize>> {
        let n = self.len();
        (0..count)
            .map(|b| (0..batch_size).map(|i| (start + b * batch_size + i) % n).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::write_tensor;

    fn image(v: f32) -> TensorValue {
        TensorValue::f32([2, 2, 1], vec![v; 4]).unwrap()
    }

    #[test]
    fn loads_sorted_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("b.mct", 2.0), ("a.mct", 1.0), ("c.mct", 3.0)] {
            write_tensor(&dir.path().join(name), &image(v)).unwrap();
        }
        std::fs::write(
            dir.path().join("labels.csv"),
            "filename,label\na.mct,Melanoma\nc,Healthy\n",
        )
        .unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let names: Vec<_> = ds.samples().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["a.mct", "b.mct", "c.mct"]);
        assert_eq!(ds.samples()[0].label.as_deref(), Some("Melanoma"));
        assert_eq!(ds.samples()[1].label, None);
        assert_eq!(ds.samples()[2].label.as_deref(), Some("Healthy"));

        let batch = ds.batch(&[2, 0]).unwrap();
        assert_eq!(batch.tensor.shape(), &[2, 2, 2, 1]);
        assert_eq!(batch.tensor.as_f32().unwrap()[..4], [3.0; 4]);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(ExecError::Dataset(_))));
    }

    #[test]
    fn batch_schedules() {
        let samples = (0..5)
            .map(|i| Sample {
                name: format!("{i}"),
                image: image(i as f32),
                label: None,
            })
            .collect();
        let ds = Dataset::from_samples(samples).unwrap();
        assert_eq!(ds.epoch_batches(2), vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert_eq!(ds.cycled_batches(3, 2, 0), vec![vec![0, 1, 2], vec![3, 4, 0]]);
    }
}
