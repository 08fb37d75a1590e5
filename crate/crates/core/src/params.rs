//! Named parameter storage, gradient buffers, optimizers and checkpoints.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::serialize::{read_table, write_table};
use crate::numerics::{GradPair, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Pair each parameter with its gradient.
    pub fn pairs(&self, grads: &Grads) -> Result<Vec<GradPair>> {
        self.values
            .iter()
            .zip(&grads.values)
            .map(|(v, g)| GradPair::new(v.clone(), g.clone()))
            .collect()
    }

    /// Replace every value from a name-keyed table; names and shapes must
    /// match exactly.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> std::result::Result<(), String> {
        if entries.len() != self.values.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                entries.len()
            ));
        }
        for (name, t) in entries {
            let id = self
                .id_of(&name)
                .ok_or_else(|| format!("unexpected tensor {name}"))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    self.values[id.0].shape(),
                    t.shape()
                ));
            }
            if !t.all_finite() {
                return Err(format!("tensor {name} holds non-finite values"));
            }
            self.values[id.0] = t;
        }
        Ok(())
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    values: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store
                .values
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    /// Accumulate `g` into the buffer of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.values[id.0].data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b).expect("same layout");
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.values {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }
}

/// Parameter registration with deterministic initialization.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Run `f` with `segment` appended to the name prefix.
    pub fn scoped<T>(&mut self, segment: &str, f: impl FnOnce(&mut ParamBuilder<'_>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            segment.to_string()
        } else {
            format!("{}.{segment}", self.prefix)
        };
        let mut inner = ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, value)
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.tensor(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, lo: f64, hi: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
        self.tensor(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        self.tensor(name, Tensor::full(shape, value))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state for momentum SGD or Adam.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    beta2: f64,
    weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, weight_decay: f64, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            kind,
            lr,
            momentum,
            beta2: 0.999,
            weight_decay,
            step: 0,
            first: zeros(),
            second: if kind == OptimizerKind::Adam { zeros() } else { vec![] },
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        for (i, (p, g)) in store.values.iter_mut().zip(&grads.values).enumerate() {
            let m = self.first[i].data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, &gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let gv = gv + self.weight_decay * *w;
                        *mv = self.momentum * *mv + gv;
                        *w -= self.lr * *mv;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second[i].data_mut();
                    let c1 = 1.0 - self.momentum.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for (((w, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mv = self.momentum * *mv + (1.0 - self.momentum) * gv;
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                        let update = (*mv / c1) / ((*vv / c2).sqrt() + 1e-8);
                        *w -= self.lr * (update + self.weight_decay * *w);
                    }
                }
            }
        }
    }
}

/// Path of the JSON sidecar that accompanies a checkpoint file.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct Sidecar<C> {
    config: C,
    sha256: String,
    num_tensors: usize,
}

/// Write the tensor table to `path` and the config plus a content digest to
/// `<path>.json`.
pub fn save_checkpoint<C: Serialize>(path: &Path, store: &ParamStore, config: &C) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let entries: Vec<(String, Tensor)> = store
        .names
        .iter()
        .cloned()
        .zip(store.values.iter().cloned())
        .collect();
    let mut bytes = Vec::new();
    write_table(&mut bytes, &entries).map_err(|e| Error::io(path, e))?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        config,
        sha256: hex::encode(Sha256::digest(&bytes)),
        num_tensors: entries.len(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// Read the sidecar config and verified tensor table of a checkpoint.
pub fn load_checkpoint<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<(C, Vec<(String, Tensor)>)> {
    let side = sidecar_path(path);
    if !path.exists() {
        return Err(Error::Missing {
            path: path.to_path_buf(),
            reason: "checkpoint file not found".into(),
        });
    }
    let corrupt = |p: &Path, reason: String| Error::Corrupt {
        path: p.to_path_buf(),
        reason,
    };
    if !side.exists() {
        return Err(corrupt(&side, "checkpoint sidecar is missing".into()));
    }
    let side_bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar<C> =
        serde_json::from_slice(&side_bytes).map_err(|e| corrupt(&side, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != sidecar.sha256 {
        return Err(corrupt(path, "content digest does not match sidecar".into()));
    }
    let entries = read_table(&mut BufReader::new(bytes.as_slice()))
        .map_err(|e| corrupt(path, e.to_string()))?;
    if entries.len() != sidecar.num_tensors {
        return Err(corrupt(path, "tensor count does not match sidecar".into()));
    }
    Ok((sidecar.config, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamBuilder::new(&mut s, &mut rng);
        b.scoped("layer", |b| {
            b.normal("w", vec![2, 3], 0.1);
            b.constant("b", vec![3], 0.5);
        });
        s
    }

    #[test]
    fn scoped_names() {
        let s = store();
        assert_eq!(s.names(), &["layer.w".to_string(), "layer.b".to_string()]);
        assert_eq!(s.numel(), 9);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut s = store();
            let before = s.clone();
            let mut g = Grads::zeros_like(&s);
            g.get_mut(ParamId(0)).data_mut()[0] = 3.0;
            let mut opt = Optimizer::new(kind, 0.0, 0.9, 0.0, &s);
            opt.step(&mut s, &g);
            assert_eq!(s.values(), before.values());
        }
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut s = store();
        let w0 = s.get(ParamId(1)).data()[0];
        let mut g = Grads::zeros_like(&s);
        g.get_mut(ParamId(1)).data_mut()[0] = 1.0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.9, 0.0, &s);
        opt.step(&mut s, &g);
        assert!((s.get(ParamId(1)).data()[0] - (w0 - 0.1)).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let s = store();
        save_checkpoint(&path, &s, &serde_json::json!({"d": 3})).unwrap();
        let (cfg, entries): (serde_json::Value, _) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg["d"], 3);
        let mut fresh = store();
        fresh.get_mut(ParamId(0)).data_mut()[0] = 99.0;
        fresh.load_entries(entries).unwrap();
        assert_eq!(fresh.values(), s.values());

        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint::<serde_json::Value>(&path).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint::<serde_json::Value>(&dir.path().join("none.bin")).unwrap_err();
        assert!(matches!(err, Error::Missing { .. }));
    }
}
