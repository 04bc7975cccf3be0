//! Checkpoint serialization: one binary blob per network (parameters plus
//! optimizer moments, exact little-endian `f32` bytes so restores are
//! bit-identical) and a JSON state manifest.

use super::adam::AdamState;
use super::{EpochEval, SubnetProgress, TrainState};
use crate::error::{Error, Result};
use crate::nets::{Model, NetConfig, ParamStore, NET_NAMES};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PMCK";
const VERSION: u32 = 1;

fn write_array(w: &mut impl Write, value: &ArrayD<f32>) -> Result<()> {
    w.write_u32::<LittleEndian>(value.ndim() as u32)?;
    for &d in value.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &x in value.iter() {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read) -> Result<ArrayD<f32>> {
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = vec![0.0f32; len];
    for x in data.iter_mut() {
        *x = r.read_f32::<LittleEndian>()?;
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Checkpoint(format!("bad array shape: {e}")))
}

fn write_named_arrays(w: &mut impl Write, items: &[(&str, &ArrayD<f32>)]) -> Result<()> {
    w.write_u32::<LittleEndian>(items.len() as u32)?;
    for (name, value) in items {
        let bytes = name.as_bytes();
        w.write_u32::<LittleEndian>(bytes.len() as u32)?;
        w.write_all(bytes)?;
        write_array(w, value)?;
    }
    Ok(())
}

fn read_named_arrays(r: &mut impl Read) -> Result<Vec<(String, ArrayD<f32>)>> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes)?;
        let name = String::from_utf8(bytes)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        out.push((name, read_array(r)?));
    }
    Ok(out)
}

/// Writes one network's parameters and optimizer state.
pub fn write_net_blob(path: &Path, store: &ParamStore<f32>, adam: &AdamState) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let params: Vec<(&str, &ArrayD<f32>)> = store.iter().collect();
    write_named_arrays(&mut w, &params)?;
    w.write_u64::<LittleEndian>(adam.t)?;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let m: Vec<(&str, &ArrayD<f32>)> = names.iter().map(|n| n.as_str()).zip(adam.m.iter()).collect();
    write_named_arrays(&mut w, &m)?;
    let v: Vec<(&str, &ArrayD<f32>)> = names.iter().map(|n| n.as_str()).zip(adam.v.iter()).collect();
    write_named_arrays(&mut w, &v)?;
    w.flush()?;
    Ok(())
}

/// Reads one network blob into an existing store (names and shapes must
/// match the architecture).
pub fn read_net_blob(path: &Path, store: &mut ParamStore<f32>) -> Result<AdamState> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint blob",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let params = read_named_arrays(&mut r)?;
    if params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} parameters, found {}",
            path.display(),
            store.len(),
            params.len()
        )));
    }
    for (idx, (name, value)) in params.into_iter().enumerate() {
        let (expected_name, expected) = store
            .iter()
            .nth(idx)
            .map(|(n, v)| (n.to_string(), v.shape().to_vec()))
            .unwrap();
        if name != expected_name || value.shape() != expected.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: parameter {idx} mismatch (`{name}` vs `{expected_name}`)",
                path.display()
            )));
        }
        store.set(idx, value);
    }
    let t = r.read_u64::<LittleEndian>()?;
    let m: Vec<ArrayD<f32>> = read_named_arrays(&mut r)?.into_iter().map(|(_, v)| v).collect();
    let v: Vec<ArrayD<f32>> = read_named_arrays(&mut r)?.into_iter().map(|(_, v)| v).collect();
    if m.len() != store.len() || v.len() != store.len() {
        return Err(Error::Checkpoint("optimizer state length mismatch".into()));
    }
    Ok(AdamState { m, v, t })
}

/// JSON manifest written next to the blobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateManifest {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub net_config: NetConfig,
    pub completed: Vec<(String, usize)>,
    pub history: Vec<EpochEval>,
    pub progress: Vec<SubnetProgress>,
}

/// Writes a full training state as `<dir>/<net>.bin` plus `state.json`.
pub fn save_state(dir: &Path, state: &TrainState, stage: &str, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for ((name, store), adam) in NET_NAMES
        .iter()
        .zip(state.model.stores())
        .zip(state.adam.iter())
    {
        write_net_blob(&dir.join(format!("{name}.bin")), store, adam)?;
    }
    let manifest = StateManifest {
        stage: stage.to_string(),
        seed: state.seed,
        config_hash: config_hash.to_string(),
        net_config: state.model.config.clone(),
        completed: state
            .completed
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect(),
        history: state.history.clone(),
        progress: state.progress.clone(),
    };
    let file = std::fs::File::create(dir.join("state.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;
    Ok(())
}

/// Restores a training state saved by [`save_state`]. The architecture is
/// rebuilt from the stored `NetConfig`, then every blob is loaded over it.
pub fn load_state(dir: &Path) -> Result<TrainState> {
    let file = std::fs::File::open(dir.join("state.json"))
        .map_err(|e| Error::Checkpoint(format!("cannot open {}/state.json: {e}", dir.display())))?;
    let manifest: StateManifest = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("corrupt state manifest: {e}")))?;
    let mut model: Model<f32> = Model::init(&manifest.net_config, manifest.seed)?;
    let mut adam = Vec::with_capacity(NET_NAMES.len());
    {
        let stores = model.stores_mut();
        for (name, store) in NET_NAMES.iter().zip(stores) {
            adam.push(read_net_blob(&dir.join(format!("{name}.bin")), store)?);
        }
    }
    Ok(TrainState {
        model,
        adam,
        seed: manifest.seed,
        completed: manifest.completed.into_iter().collect(),
        history: manifest.history,
        progress: manifest.progress,
    })
}

/// Raw bytes of one network's parameter section, for freeze-contract
/// comparisons.
pub fn net_param_bytes(dir: &Path, net_name: &str) -> Result<Vec<u8>> {
    let path = dir.join(format!("{net_name}.bin"));
    let mut bytes = Vec::new();
    std::fs::File::open(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    Ok(bytes)
}
