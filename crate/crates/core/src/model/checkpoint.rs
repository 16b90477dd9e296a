//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"NAUG"`, version `u32`, metadata length `u32`, metadata as `key=value`
//! text, array count `u32`, then per array: name length `u32`, name bytes,
//! rank `u32`, `rank` dims as `u64`, and `product(dims)` values as `f64`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::normbank::DomainSubset;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"NAUG";
const VERSION: u32 = 1;

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn put_u32(w: &mut (impl Write + ?Sized), v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ck("length exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn metadata<S: Scalar>(model: &mut Model<S>) -> KvMap {
    let mut kv = KvMap::new("checkpoint");
    model.config.write_kv(&mut kv);
    kv.set("init_seed", model.init_seed);
    kv.set("epoch", model.epoch);
    if let Some(state) = &model.rng_state {
        kv.set("rng_state", state);
    }
    let extra: Vec<String> = model.extra_subsets.iter().map(|s| s.key()).collect();
    kv.set("extra_subsets", extra.join(","));
    model.visit_stats_mut(|name, _, _, updates| kv.set(&format!("updates.{name}"), *updates));
    kv
}

/// Serializes `model`; the bytes depend only on the model's state.
pub fn write_checkpoint<S: Scalar>(model: &Model<S>, w: &mut (impl Write + ?Sized)) -> Result<()> {
    // visit_stats_mut needs &mut; work on a clone to keep the API read-only.
    let mut m = model.clone();
    let meta = metadata(&mut m).to_text();
    let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    m.visit_params(|name, t, _| {
        arrays.push((name.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.as_f64()).collect()))
    });
    m.visit_stats_mut(|name, mean, var, _| {
        let c = mean.len();
        arrays.push((format!("{name}.running_mean"), vec![c], mean.iter().map(|v| v.as_f64()).collect()));
        arrays.push((format!("{name}.running_var"), vec![c], var.iter().map(|v| v.as_f64()).collect()));
    });
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, meta.len())?;
    w.write_all(meta.as_bytes())?;
    put_u32(w, arrays.len())?;
    for (name, shape, data) in &arrays {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, shape.len())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(r: &mut impl Read) -> Result<Model<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| ck("truncated header"))?;
    if &magic != MAGIC {
        return Err(ck("bad magic (not a NAUG checkpoint)"));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(ck(format!("unsupported version {version}")));
    }
    let len = get_u32(r)?;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| ck("metadata is not UTF-8"))?;
    let kv = KvMap::parse(&text, "checkpoint")?;

    let mut arrays = BTreeMap::new();
    for _ in 0..get_u32(r)? {
        let n = get_u32(r)?;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| ck("array name is not UTF-8"))?;
        let rank = get_u32(r)?;
        let shape = (0..rank)
            .map(|_| get_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_bits(get_u64(r)?));
        }
        if arrays.insert(name.clone(), Array { shape, data }).is_some() {
            return Err(ck(format!("duplicate array {name}")));
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ck(format!("{} trailing bytes", rest.len())));
    }

    let mut config = ModelConfig::default();
    config.apply_kv(&kv)?;
    let mut model = Model::<S>::init(config, kv.required("init_seed")?)?;
    let domains = model.config.domains;
    for key in kv.list::<String>("extra_subsets")?.unwrap_or_default() {
        model.add_aux_unit(DomainSubset::parse_key(&key, domains)?)?;
    }
    model.epoch = kv.required("epoch")?;
    model.rng_state = kv.parsed("rng_state")?;

    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<S>> {
        let a = arrays
            .remove(name)
            .ok_or_else(|| ck(format!("missing array {name}")))?;
        if a.shape != shape {
            return Err(ck(format!("array {name}: shape {:?}, expected {shape:?}", a.shape)));
        }
        Ok(a.data.into_iter().map(S::lit).collect())
    };
    let mut failure = None;
    model.visit_params_mut(|name, t, _| match take(name, t.shape()) {
        Ok(data) => {
            t.data_mut().copy_from_slice(&data);
        }
        Err(e) => {
            failure.get_or_insert(e);
        }
    });
    model.visit_stats_mut(|name, mean, var, updates| {
        let c = [mean.len()];
        let loaded = take(&format!("{name}.running_mean"), &c).and_then(|m| {
            let v = take(&format!("{name}.running_var"), &c)?;
            let u = kv.required(&format!("updates.{name}"))?;
            Ok((m, v, u))
        });
        match loaded {
            Ok((m, v, u)) => {
                *mean = m;
                *var = v;
                *updates = u;
            }
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = arrays.keys().next() {
        return Err(ck(format!("unexpected array {name}")));
    }
    Ok(model)
}

/// Writes through `<path>.partial` and renames on success, so a failed save
/// never leaves a truncated file under the final name.
pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, |w| write_checkpoint(model, w))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
