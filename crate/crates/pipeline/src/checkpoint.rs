//! Checkpoint archives in safetensors format.
//!
//! Each network store is saved under a prefix (`gen/stem.conv.weight`), its
//! Adam moments under `<prefix>.m/` and `<prefix>.v/`, and scalars such as
//! step counts in the string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use tryon_tensor::{Adam, Array, ParamStore};

use crate::error::{PipelineError, Result};

pub const FORMAT: &str = "tryon-checkpoint-1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Array>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        let mut c = Checkpoint::default();
        c.metadata.insert("format".into(), FORMAT.into());
        c
    }

    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, value, _) in store.iter() {
            self.tensors.insert(format!("{prefix}/{name}"), value.clone());
        }
    }

    pub fn put_adam(&mut self, prefix: &str, opt: &Adam, store: &ParamStore) {
        for ((name, _, _), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
            self.tensors.insert(format!("{prefix}.m/{name}"), m.clone());
            self.tensors.insert(format!("{prefix}.v/{name}"), v.clone());
        }
        self.metadata.insert(format!("{prefix}.step"), opt.step.to_string());
    }

    fn tensor(&self, path: &Path, key: &str, like: &Array) -> Result<Array> {
        let t = self.tensors.get(key).ok_or_else(|| bad(path, format!("missing tensor {key}")))?;
        if t.shape() != like.shape() {
            return Err(bad(path, format!("{key} has shape {:?}, expected {:?}", t.shape(), like.shape())));
        }
        Ok(t.clone())
    }

    /// Overwrite every entry of `store` from the archive.
    pub fn load_store(&self, path: &Path, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = self.tensor(path, &format!("{prefix}/{}", store.name(id)), store.get(id))?;
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn load_adam(&self, path: &Path, prefix: &str, opt: &mut Adam, store: &ParamStore) -> Result<()> {
        for (i, (name, value, _)) in store.iter().enumerate() {
            opt.m[i] = self.tensor(path, &format!("{prefix}.m/{name}"), value)?;
            opt.v[i] = self.tensor(path, &format!("{prefix}.v/{name}"), value)?;
        }
        opt.step = self.meta_u64(path, &format!("{prefix}.step"))?;
        Ok(())
    }

    pub fn meta_u64(&self, path: &Path, key: &str) -> Result<u64> {
        let v = self.metadata.get(key).ok_or_else(|| bad(path, format!("missing metadata {key}")))?;
        v.parse().map_err(|_| bad(path, format!("metadata {key}={v:?} is not an integer")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(k, a)| (k.clone(), a.iter().flat_map(|v| v.to_le_bytes()).collect(), a.shape().to_vec()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, b, s)| (k.as_str(), TensorView::new(Dtype::F64, s.clone(), b).expect("byte count matches shape")));
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, &Some(meta)).expect("valid tensor views")
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(path, e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(path, e.to_string()))?;
        let metadata: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
        if metadata.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad(path, format!("not a {FORMAT} archive")));
        }
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(bad(path, format!("{name} has dtype {:?}", view.dtype())));
            }
            let values: Vec<f64> = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let arr = Array::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| bad(path, e.to_string()))?;
            tensors.insert(name, arr);
        }
        Ok(Checkpoint { tensors, metadata })
    }

    /// Write to a sibling temp file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::io_at(dir, e))?;
        }
        let tmp = tmp_path(path);
        let result = std::fs::write(&tmp, self.to_bytes()).and_then(|_| std::fs::rename(&tmp, path));
        result.map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            PipelineError::io_at(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PipelineError::CheckpointMissing(path.to_path_buf()),
            _ => PipelineError::io_at(path, e),
        })?;
        Self::from_bytes(path, &bytes)
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn bad(path: &Path, reason: String) -> PipelineError {
    PipelineError::Checkpoint { path: path.to_path_buf(), reason }
}
