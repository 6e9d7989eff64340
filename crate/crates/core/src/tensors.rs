//! Named-tensor container used for model weights and fitted coefficients.
//!
//! Files are JSON documents: a format tag, a version, free-form metadata and
//! a list of `{name, shape, data}` entries with row-major `f64` data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const TENSOR_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFile {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn new(format: &str) -> Self {
        TensorFile {
            format: format.to_string(),
            version: TENSOR_FILE_VERSION,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("missing integer metadata '{key}'")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::InvalidArgument(format!("missing numeric metadata '{key}'")))
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                context: "tensor data",
                expected: n,
                actual: data.len(),
            });
        }
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor '{name}'")));
        }
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing tensor '{name}'")))
    }

    /// Fetch a tensor and check its shape.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::InvalidArgument(format!(
                "tensor '{name}' has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t.data.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for t in &self.tensors {
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("tensor '{}'", t.name)));
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path, format: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: TensorFile =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.format != format {
            return Err(Error::format(
                path,
                format!("expected format '{format}', found '{}'", file.format),
            ));
        }
        if file.version != TENSOR_FILE_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {}", file.version),
            ));
        }
        for t in &file.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::format(
                    path,
                    format!("tensor '{}' data does not match its shape", t.name),
                ));
            }
        }
        Ok(file)
    }
}
