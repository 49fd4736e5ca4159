//! Model checkpoints: parameter records plus `meta/<key>` scalar records.
//! A meta value is stored exactly as the four 16-bit limbs of its f64 bits,
//! least significant first.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use latb_tensor::{read_checkpoint, write_checkpoint, Param, ParamStore};

use crate::error::{invalid, Result};

pub const META_PREFIX: &str = "meta/";

pub fn meta_param(key: &str, value: f64) -> Param {
    Param {
        name: format!("{META_PREFIX}{key}"),
        shape: vec![4],
        data: (0..4).map(|i| ((value.to_bits() >> (16 * i)) & 0xffff) as f32).collect(),
    }
}

pub fn save<W: Write>(
    w: &mut W,
    meta: &[(&str, f64)],
    store: &ParamStore,
    extra: &[Param],
) -> Result<()> {
    let meta: Vec<Param> = meta.iter().map(|&(k, v)| meta_param(k, v)).collect();
    let params = meta
        .iter()
        .chain(store.iter().map(|(_, p)| p))
        .chain(extra.iter());
    write_checkpoint(w, params)?;
    Ok(())
}

fn meta_value(p: &Param) -> Result<f64> {
    if p.data.len() != 4 || p.data.iter().any(|&v| v.fract() != 0.0 || !(0.0..=65535.0).contains(&v)) {
        return Err(invalid(format!("malformed meta record {}", p.name)));
    }
    let bits = p.data.iter().rev().fold(0u64, |acc, &v| (acc << 16) | v as u64);
    Ok(f64::from_bits(bits))
}

#[derive(Debug, Default)]
pub struct Loaded {
    pub meta: BTreeMap<String, f64>,
    pub params: Vec<Param>,
}

impl Loaded {
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut out = Loaded::default();
        for p in read_checkpoint(r)? {
            match p.name.strip_prefix(META_PREFIX) {
                Some(key) => {
                    out.meta.insert(key.to_string(), meta_value(&p)?);
                }
                None => out.params.push(p),
            }
        }
        Ok(out)
    }

    pub fn meta(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .copied()
            .ok_or_else(|| invalid(format!("checkpoint is missing meta/{key}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self.meta(key)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(invalid(format!("meta/{key} = {v} is not a count")));
        }
        Ok(v as usize)
    }

    pub fn take(&mut self, name: &str) -> Result<Param> {
        let i = self
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| invalid(format!("checkpoint is missing {name}")))?;
        Ok(self.params.remove(i))
    }

    /// Copies every stored parameter into `store` by name and shape.
    pub fn fill(&self, store: &mut ParamStore) -> Result<()> {
        for (id, p) in store.clone().iter() {
            let src = self
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| invalid(format!("checkpoint is missing {}", p.name)))?;
            if src.shape != p.shape {
                return Err(invalid(format!(
                    "{}: checkpoint shape {:?} vs model shape {:?}",
                    p.name, src.shape, p.shape
                )));
            }
            store.get_mut(id).data.clone_from(&src.data);
        }
        Ok(())
    }
}
