use std::path::Path;

use super::container::{self, Blob, Metadata};
use crate::backbone::{build, network_from_keys, Model, MODEL_KEYS};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIALSTM1";
pub const FORMAT_VERSION: &str = "1";

/// Parameters and batch-norm statistics of a model, stored as `f32`, plus
/// free-form metadata. Parameters come first, in declaration order, then
/// buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    /// Snapshot `model`. `format_version` is prepended to `metadata`.
    pub fn capture(model: &Model, metadata: Metadata) -> Self {
        let mut meta = vec![("format_version".to_string(), FORMAT_VERSION.to_string())];
        meta.extend(metadata);
        let store = &model.store;
        let mut blobs: Vec<Blob> = store
            .params()
            .iter()
            .map(|p| Blob {
                name: p.name.clone(),
                values: p.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        blobs.extend(store.buffers().iter().map(|b| Blob {
            name: b.name.clone(),
            values: b.value.iter().map(|&v| v as f32).collect(),
        }));
        Checkpoint { metadata: meta, blobs }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copy stored values into `model`; every parameter and buffer must be
    /// present with the right length.
    pub fn restore(&self, model: &mut Model) -> Result<()> {
        let find = |name: &str, len: usize| -> Result<&Blob> {
            let b = self
                .blobs
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::Data(format!("checkpoint has no entry '{name}'")))?;
            if b.values.len() != len {
                return Err(Error::Data(format!(
                    "checkpoint entry '{name}' has {} values, model needs {len}",
                    b.values.len()
                )));
            }
            Ok(b)
        };
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let p = model.store.param_mut(id);
            let b = find(&p.name, p.value.numel())?;
            for (d, &s) in p.value.data_mut().iter_mut().zip(&b.values) {
                *d = s as f64;
            }
        }
        let names: Vec<(String, usize)> = model.store.buffers().iter().map(|b| (b.name.clone(), b.value.len())).collect();
        for (i, (name, len)) in names.iter().enumerate() {
            let b = find(name, *len)?;
            let dst = &mut model.store.buffers_mut()[i].value;
            for (d, &s) in dst.iter_mut().zip(&b.values) {
                *d = s as f64;
            }
        }
        Ok(())
    }

    /// Rebuild the model described by the `model.*` metadata keys and load
    /// the stored values into it.
    pub fn build_model(&self) -> Result<Model> {
        let get = |k: &str| -> String {
            match self.get(&format!("model.{k}")) {
                Some(v) => v.to_string(),
                None => MODEL_KEYS
                    .iter()
                    .find(|s| s.key == k)
                    .map(|s| s.default.to_string())
                    .unwrap_or_default(),
            }
        };
        let cfg = network_from_keys(&get)?;
        let mut model = build(&cfg, 0)?;
        self.restore(&mut model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode(CHECKPOINT_MAGIC, &self.metadata, &self.blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (metadata, blobs) = container::decode(CHECKPOINT_MAGIC, bytes)?;
        Ok(Checkpoint { metadata, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::NetworkConfig;

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = NetworkConfig::named("tiny-dia").unwrap();
        let mut model = build(&cfg, 3).unwrap();
        model.store.round_to_f32();
        let ck = Checkpoint::capture(&model, vec![("note".into(), "x".into())]);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut fresh = build(&cfg, 9).unwrap();
        back.restore(&mut fresh).unwrap();
        for (a, b) in fresh.store.params().iter().zip(model.store.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn missing_entry_is_reported() {
        let cfg = NetworkConfig::named("tiny-dia").unwrap();
        let model = build(&cfg, 0).unwrap();
        let mut ck = Checkpoint::capture(&model, vec![]);
        ck.blobs.remove(0);
        let mut m = build(&cfg, 0).unwrap();
        assert!(matches!(ck.restore(&mut m), Err(Error::Data(_))));
    }
}
