//! Checkpoint directories: `config.txt`, `checkpoint.txt` and one binary
//! tensor file per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::apex::{ApexModel, FeatureNorm};
use crate::error::{ApexError, Result};
use crate::nn::MlpParams;
use crate::synth::{Benchmark, FrozenBackbone};
use crate::tensor::Tensor;

use super::config::{KeyValues, TrainConfig};
use super::train::TrainState;

fn mlp_files(prefix: &str, p: &MlpParams) -> Vec<String> {
    (0..p.layers().len())
        .flat_map(|i| [format!("{prefix}_{i}_weight.apxt"), format!("{prefix}_{i}_bias.apxt")])
        .collect()
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), state.config.to_text())?;
    let m = &state.model;
    let g = &m.geometry;
    let bb = &state.backbone;
    let manifest = format!(
        "height = {}\nwidth = {}\nchannels = {}\nsteps = {}\nhas_head = {}\n\
         backbone_threshold = {}\nbackbone_slope = {}\nbackbone_blur_radius = {}\n\
         backbone_fingerprint = {}\nmodel_fingerprint = {}\nmemory_fingerprint = {}\n",
        g.height,
        g.width,
        g.channels,
        state.steps,
        m.head.is_some(),
        bb.threshold,
        bb.slope,
        bb.blur_radius,
        bb.fingerprint(),
        m.fingerprint(),
        m.memory.fingerprint(),
    );
    fs::write(dir.join("checkpoint.txt"), manifest)?;
    m.memory.slots.save(dir.join("memory.apxt"))?;
    Tensor::vector(m.input_norm.mean.clone()).save(dir.join("input_mean.apxt"))?;
    Tensor::vector(m.input_norm.scale.clone()).save(dir.join("input_scale.apxt"))?;
    let mut parts = vec![("encoder", &m.encoder), ("decoder", &m.decoder)];
    if let Some(h) = &m.head {
        parts.push(("head", h));
    }
    for (prefix, p) in parts {
        for (name, t) in mlp_files(prefix, p).iter().zip(p.tensors()) {
            t.save(dir.join(name))?;
        }
    }
    Ok(())
}

fn load_mlp(dir: &Path, prefix: &str, p: &mut MlpParams) -> Result<()> {
    let names = mlp_files(prefix, p);
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        let path = dir.join(name);
        let loaded = Tensor::load(&path)?;
        if loaded.shape() != t.shape() {
            return Err(ApexError::Format {
                path,
                detail: format!("expected shape {:?}, found {:?}", t.shape(), loaded.shape()),
            });
        }
        *t = loaded;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let config = TrainConfig::load(&dir.join("config.txt"))?;
    let path = dir.join("checkpoint.txt");
    let kv = KeyValues::parse(&fs::read_to_string(&path)?)?;
    let fields: BTreeMap<&str, &str> = kv.entries.iter().map(|(k, (_, v))| (k.as_str(), v.as_str())).collect();
    let get = |k: &str| -> Result<&str> {
        fields.get(k).copied().ok_or_else(|| ApexError::Format {
            path: path.clone(),
            detail: format!("missing {k}"),
        })
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| ApexError::Format {
            path: path.clone(),
            detail: format!("bad number for {k}"),
        })
    };
    let backbone = FrozenBackbone {
        threshold: num("backbone_threshold")?,
        slope: num("backbone_slope")?,
        blur_radius: num("backbone_blur_radius")? as usize,
    };
    if backbone.fingerprint() != get("backbone_fingerprint")? {
        return Err(ApexError::Format {
            path,
            detail: "backbone fingerprint mismatch".into(),
        });
    }
    let mut model = ApexModel::init(
        config.apex.clone(),
        num("height")? as usize,
        num("width")? as usize,
        num("channels")? as usize,
    )?;
    load_mlp(dir, "encoder", &mut model.encoder)?;
    load_mlp(dir, "decoder", &mut model.decoder)?;
    if get("has_head")? == "true" {
        if let Some(h) = model.head.as_mut() {
            load_mlp(dir, "head", h)?;
        }
    } else {
        model = model.without_head();
    }
    let slots = Tensor::load(dir.join("memory.apxt"))?;
    if slots.shape() != model.memory.slots.shape() {
        return Err(ApexError::Format {
            path: dir.join("memory.apxt"),
            detail: "memory shape does not match the configuration".into(),
        });
    }
    model.memory.slots = slots;
    let mean = Tensor::load(dir.join("input_mean.apxt"))?.into_data();
    let scale = Tensor::load(dir.join("input_scale.apxt"))?.into_data();
    if mean.len() != model.geometry.len() || scale.len() != mean.len() {
        return Err(ApexError::Format {
            path: dir.join("input_mean.apxt"),
            detail: "input statistics do not match the region size".into(),
        });
    }
    model.input_norm = FeatureNorm { mean, scale };
    if model.fingerprint() != get("model_fingerprint")? {
        return Err(ApexError::Format {
            path,
            detail: "model fingerprint mismatch".into(),
        });
    }
    Ok(TrainState {
        config,
        model,
        backbone,
        steps: num("steps")? as usize,
    })
}

/// Writes a benchmark with the configuration and seed that generated it.
pub fn save_bench_dir(bench: &Benchmark, config: &TrainConfig, dir: &Path) -> Result<()> {
    bench.save(dir)?;
    fs::write(dir.join("config.txt"), config.to_text())?;
    fs::write(dir.join("bench.txt"), format!("seed = {}\n", bench.seed))?;
    Ok(())
}

/// Reloads a directory written by [`save_bench_dir`].
pub fn load_bench_dir(dir: &Path) -> Result<(Benchmark, TrainConfig)> {
    let config = TrainConfig::load(&dir.join("config.txt"))?;
    let path = dir.join("bench.txt");
    let kv = KeyValues::parse(&fs::read_to_string(&path)?)?;
    let seed = kv
        .entries
        .get("seed")
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| ApexError::Format {
            path,
            detail: "missing or invalid seed".into(),
        })?;
    Ok((Benchmark::load(dir, &config.bench, seed)?, config))
}
