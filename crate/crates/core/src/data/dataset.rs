//! Reproducible on-disk datasets of rendered samples.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{render, RenderConfig};
use super::rules::{bilateral, default_rules, place_acupoints, AcupointRule};
use super::skeleton::{sample_skeleton, Skeleton, SkeletonConfig};
use crate::error::{Error, Result};
use crate::head::Keypoint;
use crate::numerics::serialize::{read_tensor, write_tensor};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub skeleton: SkeletonConfig,
    pub render: RenderConfig,
    /// Emit left and right copies of every lateral point.
    pub bilateral: bool,
    /// Threads used for generation; output does not depend on it, so it
    /// is left out of manifests.
    #[serde(skip_serializing)]
    pub workers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            split: [0.8, 0.1, 0.1],
            skeleton: SkeletonConfig::default(),
            render: RenderConfig::default(),
            bilateral: false,
            workers: 1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split {:?} must be fractions summing to 1", self.split)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        self.skeleton.validate()?;
        self.render.validate()
    }

    pub fn rules(&self) -> Vec<AcupointRule> {
        let r = default_rules();
        if self.bilateral {
            bilateral(&r)
        } else {
            r
        }
    }

    /// Sample counts per split; the test split takes the rounding remainder.
    pub fn split_counts(&self) -> [usize; 3] {
        let train = (self.n as f64 * self.split[0]).round() as usize;
        let val = ((self.n as f64 * self.split[1]).round() as usize).min(self.n - train.min(self.n));
        let train = train.min(self.n);
        [train, val, self.n - train - val]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub keypoints: Vec<Keypoint>,
    pub skeleton: Skeleton,
    pub seed: u64,
}

/// Render one sample. Keypoints are normalized by the image side.
pub fn generate_sample(cfg: &DataConfig, rules: &[AcupointRule], seed: u64) -> Result<Sample> {
    let skeleton = sample_skeleton(&cfg.skeleton, seed)?;
    let size = skeleton.image_size as f64;
    let keypoints = place_acupoints(&skeleton, rules)?
        .into_iter()
        .enumerate()
        .map(|(class_id, (x, y))| {
            if !(x > 0.0 && x < size && y > 0.0 && y < size) {
                return Err(Error::Rule(format!("{} falls outside the image", rules[class_id].name)));
            }
            Ok(Keypoint {
                class_id,
                x: x / size,
                y: y / size,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let image = render(&skeleton, &cfg.render, seed)?;
    Ok(Sample {
        image,
        keypoints,
        skeleton,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub seed: u64,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: DataConfig,
    pub classes: Vec<String>,
    pub image_size: usize,
    pub splits: Splits,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct KeypointRecord {
    class_id: usize,
    name: String,
    x: f64,
    y: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: usize,
    keypoints: Vec<KeypointRecord>,
    skeleton: Skeleton,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct KeypointFile {
    classes: Vec<String>,
    samples: Vec<SampleRecord>,
}

pub const MANIFEST: &str = "manifest.json";
pub const KEYPOINTS: &str = "keypoints.json";

fn sample_file(id: usize) -> String {
    format!("samples/{id:06}.bin")
}

/// Per-sample seeds and the shuffled split, both drawn from `seed`.
fn plan(cfg: &DataConfig, seed: u64) -> (Vec<u64>, Splits) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..cfg.n).map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut rng);
    let [a, b, _] = cfg.split_counts();
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let splits = Splits {
        train: sorted(&order[..a]),
        val: sorted(&order[a..a + b]),
        test: sorted(&order[a + b..]),
    };
    (seeds, splits)
}

fn generate_all(cfg: &DataConfig, rules: &[AcupointRule], seeds: &[u64]) -> Result<Vec<Sample>> {
    if cfg.workers == 1 {
        return seeds.iter().map(|&s| generate_sample(cfg, rules, s)).collect();
    }
    let chunk = seeds.len().div_ceil(cfg.workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&s| generate_sample(cfg, rules, s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().expect("generation worker panicked")?);
        }
        Ok(out)
    })
}

/// Generate, split and write a dataset under `dir`. Returns the manifest
/// and the hex SHA-256 of the written manifest file.
pub fn build_dataset(cfg: &DataConfig, seed: u64, dir: &Path) -> Result<(Manifest, String)> {
    cfg.validate()?;
    let rules = cfg.rules();
    let (seeds, splits) = plan(cfg, seed);
    let samples = generate_all(cfg, &rules, &seeds)?;
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut records = Vec::with_capacity(samples.len());
    for (id, s) in samples.iter().enumerate() {
        let file = sample_file(id);
        let path = dir.join(&file);
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &s.image).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(SampleEntry {
            id,
            seed: s.seed,
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        records.push(SampleRecord {
            id,
            keypoints: s
                .keypoints
                .iter()
                .map(|k| KeypointRecord {
                    class_id: k.class_id,
                    name: rules[k.class_id].name.clone(),
                    x: k.x,
                    y: k.y,
                })
                .collect(),
            skeleton: s.skeleton.clone(),
        });
    }
    let classes: Vec<String> = rules.iter().map(|r| r.name.clone()).collect();
    let kp = KeypointFile {
        classes: classes.clone(),
        samples: records,
    };
    let kp_path = dir.join(KEYPOINTS);
    fs::write(&kp_path, serde_json::to_vec_pretty(&kp)?).map_err(|e| Error::io(&kp_path, e))?;
    let manifest = Manifest {
        seed,
        config: cfg.clone(),
        classes,
        image_size: cfg.skeleton.image_size,
        splits,
        samples: entries,
    };
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    let path = dir.join(MANIFEST);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok((manifest, hex::encode(Sha256::digest(&bytes))))
}

/// Hex SHA-256 of a dataset's manifest file.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST);
    let bytes = read_existing(&path)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn read_existing(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::Missing {
            path: path.to_path_buf(),
            reason: "file not found".into(),
        });
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// A dataset opened from disk. Images are read on demand and verified
/// against their manifest digest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    keypoints: Vec<Vec<Keypoint>>,
}

/// One loaded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: usize,
    pub image: Tensor,
    pub keypoints: Vec<Keypoint>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let manifest: Manifest =
            serde_json::from_slice(&read_existing(&mpath)?).map_err(|e| corrupt(&mpath, e.to_string()))?;
        let kpath = dir.join(KEYPOINTS);
        let kp: KeypointFile =
            serde_json::from_slice(&read_existing(&kpath)?).map_err(|e| corrupt(&kpath, e.to_string()))?;
        if kp.samples.len() != manifest.samples.len() || kp.classes != manifest.classes {
            return Err(corrupt(&kpath, "keypoints do not match the manifest"));
        }
        let n = manifest.samples.len();
        let s = &manifest.splits;
        let mut seen = vec![false; n];
        for &id in s.train.iter().chain(&s.val).chain(&s.test) {
            if id >= n || std::mem::replace(&mut seen[id], true) {
                return Err(corrupt(&mpath, format!("split lists repeat or exceed sample {id}")));
            }
        }
        let mut keypoints = vec![Vec::new(); n];
        for (i, r) in kp.samples.into_iter().enumerate() {
            if r.id != i || r.keypoints.iter().any(|k| k.class_id >= manifest.classes.len()) {
                return Err(corrupt(&kpath, format!("bad record for sample {i}")));
            }
            keypoints[i] = r
                .keypoints
                .into_iter()
                .map(|k| Keypoint {
                    class_id: k.class_id,
                    x: k.x,
                    y: k.y,
                })
                .collect();
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            keypoints,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        let s = &self.manifest.splits;
        match split {
            Split::Train => &s.train,
            Split::Val => &s.val,
            Split::Test => &s.test,
        }
    }

    pub fn keypoints(&self, id: usize) -> &[Keypoint] {
        &self.keypoints[id]
    }

    pub fn image(&self, id: usize) -> Result<Tensor> {
        let entry = self
            .manifest
            .samples
            .get(id)
            .ok_or_else(|| Error::param(format!("no sample {id}")))?;
        let path = self.dir.join(&entry.file);
        let bytes = read_existing(&path)?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(corrupt(&path, "content digest does not match manifest"));
        }
        let t = read_tensor(&mut BufReader::new(bytes.as_slice())).map_err(|e| corrupt(&path, e.to_string()))?;
        let n = self.manifest.image_size;
        if t.shape().len() != 3 || t.shape()[1] != n || t.shape()[2] != n {
            return Err(corrupt(&path, format!("unexpected image shape {:?}", t.shape())));
        }
        Ok(t)
    }

    pub fn example(&self, id: usize) -> Result<Example> {
        Ok(Example {
            id,
            image: self.image(id)?,
            keypoints: self.keypoints[id].clone(),
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Example>> {
        self.split(split).iter().map(|&id| self.example(id)).collect()
    }
}

/// Write a single image tensor, as stored in a dataset.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(&mut BufWriter::new(f), image).map_err(|e| Error::io(path, e))
}

/// Read a single image tensor written by [`write_image`].
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = read_existing(path)?;
    read_tensor(&mut BufReader::new(bytes.as_slice())).map_err(|e| corrupt(path, e.to_string()))
}
