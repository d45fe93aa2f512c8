//! Named parameter collections with per-array freezing and content fingerprints.
//!
//! Checkpoint layout (one directory per collection):
//!
//! * `params.json`: array names, shapes, kinds, frozen flags and the fingerprint
//! * `<index>.f32`: one raw little-endian `f32` file per array, row-major

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::AccessLog;

pub const PARAMS_MANIFEST: &str = "params.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Weight,
    /// Running statistics, updated by forward passes in training mode.
    Buffer,
}

#[derive(Debug)]
struct Entry {
    var: Var,
    kind: ParamKind,
    frozen: bool,
}

/// SHA-256 over names, dtypes, shapes and raw contents of every array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint(pub String);

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug)]
pub struct ModelParams {
    entries: BTreeMap<String, Entry>,
    dtype: DType,
    device: Device,
    frozen_at: Option<Fingerprint>,
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.into_iter().flat_map(f64::to_le_bytes).collect(),
        _ => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .into_iter()
            .flat_map(f32::to_le_bytes)
            .collect(),
    })
}

impl ModelParams {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: device.clone(),
            frozen_at: None,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidData(format!("duplicate parameter '{name}'")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?.contiguous()?)?;
        self.entries.insert(
            name,
            Entry {
                var,
                kind,
                frozen: self.frozen_at.is_some(),
            },
        );
        Ok(())
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidData(format!("unknown parameter '{name}'")))
    }

    /// The current value. Trainable weights stay attached to the autograd graph;
    /// frozen arrays and buffers come back detached.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let e = self.entry(name)?;
        if e.kind == ParamKind::Weight && !e.frozen {
            Ok(e.var.as_tensor().clone())
        } else {
            Ok(e.var.as_tensor().detach())
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        Ok(&self.entry(name)?.var)
    }

    /// Overwrites an array in place. Buffers of frozen collections are left untouched
    /// by the layers; this is the raw setter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let e = self.entry(name)?;
        if e.var.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "cannot set '{name}' of shape {:?} to {:?}",
                e.var.dims(),
                value.dims()
            )));
        }
        e.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn is_array_frozen(&self, name: &str) -> Result<bool> {
        Ok(self.entry(name)?.frozen)
    }

    pub fn kind(&self, name: &str) -> Result<ParamKind> {
        Ok(self.entry(name)?.kind)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights (buffers excluded).
    pub fn num_weights(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Variables the optimizer may update: non-frozen weights.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Weight && !e.frozen)
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Weight && !e.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn fingerprint(&self) -> Result<Fingerprint> {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            let t = e.var.as_tensor();
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
            h.update(tensor_bytes(t)?);
        }
        Ok(Fingerprint(hex::encode(h.finalize())))
    }

    pub fn array_fingerprint(&self, name: &str) -> Result<Fingerprint> {
        let t = self.entry(name)?.var.as_tensor();
        Ok(Fingerprint(hex::encode(Sha256::digest(tensor_bytes(t)?))))
    }

    /// Flags every array frozen and records the fingerprint to compare against later.
    pub fn freeze(mut self) -> Result<Self> {
        for e in self.entries.values_mut() {
            e.frozen = true;
        }
        self.frozen_at = Some(self.fingerprint()?);
        Ok(self)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_at.is_some() && self.entries.values().all(|e| e.frozen)
    }

    pub fn frozen_fingerprint(&self) -> Option<&Fingerprint> {
        self.frozen_at.as_ref()
    }

    /// True iff the collection is frozen and its contents still hash to the value
    /// recorded at freeze time.
    pub fn assert_frozen(&self) -> bool {
        match (&self.frozen_at, self.fingerprint()) {
            (Some(at), Ok(now)) => self.is_frozen() && *at == now,
            _ => false,
        }
    }

    /// Like [`assert_frozen`](Self::assert_frozen), as a typed error naming `what`.
    pub fn ensure_frozen(&self, what: &str) -> Result<()> {
        if !self.is_frozen() {
            return Err(Error::FrozenViolation(format!("{what} is not frozen")));
        }
        if !self.assert_frozen() {
            return Err(Error::FrozenViolation(format!("{what} changed after being frozen")));
        }
        Ok(())
    }

    /// Deep copy: the clone owns fresh storage, so training one never touches the other.
    pub fn duplicate(&self) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, e) in &self.entries {
            let copy = e.var.as_tensor().copy()?;
            entries.insert(
                name.clone(),
                Entry {
                    var: Var::from_tensor(&copy)?,
                    kind: e.kind,
                    frozen: e.frozen,
                },
            );
        }
        Ok(Self {
            entries,
            dtype: self.dtype,
            device: self.device.clone(),
            frozen_at: self.frozen_at.clone(),
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype, &self.device);
        for (name, e) in &self.entries {
            out.insert(name.clone(), e.var.as_tensor().clone(), e.kind)?;
        }
        if self.frozen_at.is_some() {
            out = out.freeze()?;
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let f32_view = self.to_dtype(DType::F32)?;
        let mut arrays = Vec::with_capacity(self.entries.len());
        for (i, (name, e)) in f32_view.entries.iter().enumerate() {
            let file = format!("{i:04}.f32");
            let path = dir.join(&file);
            fs::write(&path, tensor_bytes(e.var.as_tensor())?).map_err(|err| Error::io(&path, err))?;
            arrays.push(ArrayRecord {
                name: name.clone(),
                shape: e.var.dims().to_vec(),
                kind: e.kind,
                frozen: e.frozen,
                file,
            });
        }
        let manifest = ParamsManifest {
            arrays,
            fingerprint: f32_view.fingerprint()?,
            frozen: self.frozen_at.is_some(),
        };
        let path = dir.join(PARAMS_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        Self::load_logged(dir, dtype, device, &AccessLog::new())
    }

    /// Loads a checkpoint and verifies its recorded fingerprint.
    pub fn load_logged(dir: &Path, dtype: DType, device: &Device, log: &AccessLog) -> Result<Self> {
        let manifest_path = dir.join(PARAMS_MANIFEST);
        log.record(&manifest_path);
        let text = fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(manifest_path.clone()),
            _ => Error::io(&manifest_path, e),
        })?;
        let manifest: ParamsManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let mut params = Self::new(DType::F32, device);
        for rec in &manifest.arrays {
            let path = dir.join(&rec.file);
            log.record(&path);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let n: usize = rec.shape.iter().product();
            if bytes.len() != n * 4 {
                return Err(Error::format(
                    &path,
                    format!("{} bytes for shape {:?}", bytes.len(), rec.shape),
                ));
            }
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(values, rec.shape.as_slice(), device)?;
            params.insert(rec.name.clone(), t, rec.kind)?;
            params.entries.get_mut(&rec.name).expect("just inserted").frozen = rec.frozen;
        }
        let actual = params.fingerprint()?;
        if actual != manifest.fingerprint {
            return Err(Error::format(
                &manifest_path,
                format!(
                    "fingerprint mismatch: manifest {} vs contents {actual}",
                    manifest.fingerprint
                ),
            ));
        }
        if manifest.frozen {
            params.frozen_at = Some(actual);
        }
        if dtype == DType::F32 {
            Ok(params)
        } else {
            params.to_dtype(dtype)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    frozen: bool,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsManifest {
    arrays: Vec<ArrayRecord>,
    fingerprint: Fingerprint,
    frozen: bool,
}
