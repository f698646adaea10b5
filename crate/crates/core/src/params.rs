//! Named parameter tensors and checkpoint files.
//!
//! A checkpoint is two files: `<stem>.fgt` holds the tensors as back-to-back
//! FGT1 records, `<stem>.manifest` lists one tensor per line as
//! `name<TAB>trainable<TAB>byte_offset<TAB>byte_len<TAB>dims` (dims comma-separated).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Marks every tensor whose name starts with `prefix` as frozen or trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in &mut self.tensors {
            if name.starts_with(prefix) {
                t.requires_grad = trainable;
            }
        }
    }

    /// SHA-256 over names, shapes and values, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update(t.to_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut manifest = String::new();
        for (name, t) in &self.tensors {
            let bytes = t.to_bytes();
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!(
                "{name}\t{}\t{}\t{}\t{}\n",
                u8::from(t.requires_grad),
                blob.len(),
                bytes.len(),
                dims.join(",")
            ));
            blob.extend_from_slice(&bytes);
        }
        fs::write(stem.with_extension("fgt"), blob)?;
        fs::write(stem.with_extension("manifest"), manifest)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let blob = fs::read(stem.with_extension("fgt"))?;
        let manifest = fs::read_to_string(stem.with_extension("manifest"))?;
        let mut store = ParamStore::new();
        for (lineno, line) in manifest
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            let trainable = match fields[1] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("trainable flag must be 0 or 1")),
            };
            let offset: usize = fields[2].parse().map_err(|_| bad("bad offset"))?;
            let len: usize = fields[3].parse().map_err(|_| bad("bad length"))?;
            let chunk = blob
                .get(offset..offset + len)
                .ok_or_else(|| bad("record outside of tensor file"))?;
            let mut t = Tensor::read_from(chunk)?;
            let dims: Vec<usize> = fields[4]
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad dims"))?;
            if dims != t.shape() {
                return Err(bad("dims disagree with tensor record"));
            }
            t.requires_grad = trainable;
            store.insert(fields[0], t);
        }
        Ok(store)
    }
}

/// Seeded parameter initializers.
pub struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Tensor::from_fn(shape, |_| dist.sample(self.rng) as f32).trainable()
    }

    /// Normal with std `sqrt(1 / fan_in)`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, (1.0 / fan_in as f64).sqrt())
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape).trainable()
    }

    pub fn ones(&mut self, shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0).trainable()
    }
}
