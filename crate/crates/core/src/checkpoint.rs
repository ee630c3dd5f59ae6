//! Named-array archives in the safetensors format.
//!
//! Arrays are stored as f64 so f32 and f64 weights both round-trip exactly.
//! String metadata carries step counters, RNG positions and config hashes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use inpaint_autograd::optim::{Adam, AdamConfig};
use inpaint_autograd::ParamStore;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    metadata: BTreeMap<String, String>,
    arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.arrays.insert(name.into(), (t.shape().to_vec(), t.to_f64_vec()));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let (shape, data) = self
            .arrays
            .get(name)
            .ok_or_else(|| ckpt_err(format!("missing array `{name}`")))?;
        Ok(Tensor::from_f64(shape, data)?)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    /// Parses a required metadata entry.
    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key).ok_or_else(|| ckpt_err(format!("missing metadata `{key}`")))?;
        raw.parse()
            .map_err(|_| ckpt_err(format!("metadata `{key}` has unparsable value `{raw}`")))
    }

    /// Stores every parameter as `{prefix}{name}`.
    pub fn insert_params<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    /// Overwrites every parameter of `store` from `{prefix}{name}`; names
    /// and shapes must all match.
    pub fn load_params<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let t = self.get::<T>(&format!("{prefix}{name}"))?;
            store.assign(&name, t)?;
        }
        Ok(())
    }

    /// Saves the optimizer step count and moments alongside its parameters.
    pub fn insert_adam<T: Real>(&mut self, prefix: &str, opt: &Adam<T>, store: &ParamStore<T>) {
        self.set_meta(format!("{prefix}step"), opt.steps_taken());
        let (m, v) = opt.moments();
        for ((_, name, _), (mt, vt)) in store.iter().zip(m.iter().zip(v)) {
            self.insert(format!("{prefix}m.{name}"), mt);
            self.insert(format!("{prefix}v.{name}"), vt);
        }
    }

    pub fn load_adam<T: Real>(&self, prefix: &str, config: AdamConfig, store: &ParamStore<T>) -> Result<Adam<T>> {
        let step = self.meta_parse(&format!("{prefix}step"))?;
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, name, t) in store.iter() {
            let mt = self.get::<T>(&format!("{prefix}m.{name}"))?;
            let vt = self.get::<T>(&format!("{prefix}v.{name}"))?;
            t.check_same_shape(&mt)?;
            t.check_same_shape(&vt)?;
            m.push(mt);
            v.push(vt);
        }
        Ok(Adam::from_state(config, step, m, v))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(&String, &Vec<usize>, Vec<u8>)> = self
            .arrays
            .iter()
            .map(|(k, (s, d))| (k, s, d.iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, s, b)| Ok((k.as_str(), TensorView::new(Dtype::F64, s.to_vec(), b).map_err(ckpt_err)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(ckpt_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(ckpt_err)?;
        let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
        let st = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(ckpt_err(format!("array `{name}` is {:?}, expected F64", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.insert(name, (view.shape().to_vec(), data));
        }
        Ok(Self { metadata, arrays })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let mut a = Archive::new();
        a.insert("w", &Tensor::from_vec(&[2, 2], vec![0.1f32, -2.5, 3.0e-7, 1.0]).unwrap());
        a.set_meta("step", 17);
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.meta_parse::<u64>("step").unwrap(), 17);
        let w: Tensor<f32> = b.get("w").unwrap();
        assert_eq!(w.data(), &[0.1f32, -2.5, 3.0e-7, 1.0]);
        assert!(b.get::<f32>("nope").is_err());
    }

    #[test]
    fn params_must_match() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::full(&[3], 2.0)).unwrap();
        let mut a = Archive::new();
        a.insert_params("p.", &s);
        let mut t = ParamStore::<f64>::new();
        t.add("a", Tensor::zeros(&[3])).unwrap();
        a.load_params("p.", &mut t).unwrap();
        assert_eq!(t.get(t.id("a").unwrap()).data(), &[2.0; 3]);
        let mut bad = ParamStore::<f64>::new();
        bad.add("a", Tensor::zeros(&[4])).unwrap();
        assert!(a.load_params("p.", &mut bad).is_err());
    }
}
