//! Seeded synthetic classification data and its binary cache.
//!
//! Cache layout (little endian):
//!
//! ```text
//! "MQDS1" | input_dim u32 | classes u32 | n_train u32 | n_val u32 | n_test u32
//!         | seed u64 | difficulty f64
//! then for train, val, test: features f64 × (rows·input_dim), labels u32 × rows
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 5] = b"MQDS1";

/// Distance of each cluster centre from the origin.
const CENTRE_RADIUS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Concatenates two datasets row-wise.
    pub fn join(&self, other: &Dataset) -> Result<Dataset> {
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset {
            features: Tensor::new(vec![labels.len(), self.input_dim()], data)?,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub seed: u64,
    pub classes: usize,
    pub difficulty: f64,
}

impl DatasetSplit {
    /// Training plus validation data, used for retraining from scratch.
    pub fn training_pool(&self) -> Result<Dataset> {
        self.train.join(&self.val)
    }
}

/// Gaussian class clusters with an 81/9/10 train/val/test split.
///
/// With `difficulty == 0` each class is one tight cluster around its own
/// orthogonal centre, which a linear probe separates. For positive
/// difficulty each class is a pair of antipodal clusters `±centre` (no
/// linear separator exists) and the noise grows with difficulty.
pub fn gen_synthetic_classification(n: usize, input_dim: usize, classes: usize, difficulty: f64, seed: u64) -> Result<DatasetSplit> {
    if n < 100 {
        return Err(Error::Config(format!("need at least 100 samples, got {n}")));
    }
    if classes < 2 || input_dim < classes {
        return Err(Error::Config(format!(
            "need 2 ≤ classes ≤ input_dim, got {classes} classes in {input_dim} dimensions"
        )));
    }
    if !(difficulty >= 0.0) {
        return Err(Error::Config("difficulty must be non-negative".into()));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let centres = orthogonal_centres(classes, input_dim, &mut rng);
    let noise = 0.3 + 1.2 * difficulty;

    let mut rows = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let sign = if difficulty > 0.0 && rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        for &c in &centres[class] {
            let z: f64 = rng.sample(StandardNormal);
            rows.push(sign * c + noise * z);
        }
        labels.push(class);
    }
    let all = Dataset {
        features: Tensor::new(vec![n, input_dim], rows)?,
        labels,
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(n);
    let train = all.batch(&order[..n_train])?;
    let val = all.batch(&order[n_train..n_train + n_val])?;
    let test = all.batch(&order[n_train + n_val..])?;
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
        classes,
        difficulty,
    })
}

/// `(train, val, test)` sizes: 10% test, then 10% of the rest for validation.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = n / 10;
    let pool = n - test;
    let val = pool / 10;
    (pool - val, val, test)
}

fn orthogonal_centres(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while basis.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * CENTRE_RADIUS).collect())
        .collect()
}

pub fn generate(cfg: &DataConfig, seed: u64) -> Result<DatasetSplit> {
    gen_synthetic_classification(cfg.n, cfg.input_dim, cfg.classes, cfg.difficulty, seed)
}

pub fn save(split: &DatasetSplit, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(split.train.input_dim() as u32)?;
    w.write_u32::<LittleEndian>(split.classes as u32)?;
    for part in [&split.train, &split.val, &split.test] {
        w.write_u32::<LittleEndian>(part.len() as u32)?;
    }
    w.write_u64::<LittleEndian>(split.seed)?;
    w.write_f64::<LittleEndian>(split.difficulty)?;
    for part in [&split.train, &split.val, &split.test] {
        for &x in part.features.data() {
            w.write_f64::<LittleEndian>(x)?;
        }
        for &y in &part.labels {
            w.write_u32::<LittleEndian>(y as u32)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Header {
    input_dim: usize,
    classes: usize,
    counts: [usize; 3],
    seed: u64,
    difficulty: f64,
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format {
            what: "dataset cache",
            detail: format!("bad magic {magic:?}"),
        });
    }
    let input_dim = r.read_u32::<LittleEndian>()? as usize;
    let classes = r.read_u32::<LittleEndian>()? as usize;
    let mut counts = [0; 3];
    for c in &mut counts {
        *c = r.read_u32::<LittleEndian>()? as usize;
    }
    Ok(Header {
        input_dim,
        classes,
        counts,
        seed: r.read_u64::<LittleEndian>()?,
        difficulty: r.read_f64::<LittleEndian>()?,
    })
}

pub fn load(path: &Path) -> Result<DatasetSplit> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    let mut parts = Vec::with_capacity(3);
    for &rows in &h.counts {
        let mut data = vec![0.0; rows * h.input_dim];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let mut labels = Vec::with_capacity(rows);
        for _ in 0..rows {
            let y = r.read_u32::<LittleEndian>()? as usize;
            if y >= h.classes {
                return Err(Error::Format {
                    what: "dataset cache",
                    detail: format!("label {y} with {} classes", h.classes),
                });
            }
            labels.push(y);
        }
        parts.push(Dataset {
            features: Tensor::new(vec![rows, h.input_dim], data)?,
            labels,
        });
    }
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed: h.seed,
        classes: h.classes,
        difficulty: h.difficulty,
    })
}

/// Reads the cache at `path` when its header matches the request and
/// regenerates (and rewrites) it otherwise. Returns whether it regenerated.
pub fn load_or_generate(path: &Path, cfg: &DataConfig, seed: u64) -> Result<(DatasetSplit, bool)> {
    let (n_train, n_val, n_test) = split_sizes(cfg.n);
    let wanted = Header {
        input_dim: cfg.input_dim,
        classes: cfg.classes,
        counts: [n_train, n_val, n_test],
        seed,
        difficulty: cfg.difficulty,
    };
    let matches = File::open(path)
        .ok()
        .and_then(|f| read_header(&mut BufReader::new(f)).ok())
        .is_some_and(|h| h == wanted);
    if matches {
        if let Ok(split) = load(path) {
            return Ok((split, false));
        }
    }
    let split = generate(cfg, seed)?;
    save(&split, path)?;
    Ok((split, true))
}
