//! Versioned checkpoint container on top of safetensors.
//!
//! Tensors are stored under their parameter names, which start with the
//! section prefix (`encoder.`, `decoder.`, `discriminator.`), so inference
//! can skip the discriminator. Optimizer moments live under `optim.m.` and
//! `optim.v.`. The metadata map holds the format version, the model config
//! as TOML, the verbatim run-config echo, the charset and its hash, and the
//! training position.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::datakit::Charset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::nn::{ParamStore, Section};
use crate::trainer::{Adam, TrainConfig, TrainState};

pub const FORMAT_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    t: Vec<u64>,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: Network<f32>,
    pub train: Option<TrainConfig>,
    pub opt: Option<Adam>,
    pub state: Option<TrainState>,
    /// The run configuration text the checkpoint was produced from.
    pub config_echo: String,
}

fn to_bytes(a: &ArrayD<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(view: &TensorView<'_>) -> Result<ArrayD<f32>> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!("unsupported dtype {:?}", view.dtype())));
    }
    let data: Vec<f32> = view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(view.shape()), data).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes a checkpoint. `opt` and `state` are optional so inference-only
/// exports stay small.
pub fn save(
    path: impl AsRef<Path>,
    net: &Network<f32>,
    train: Option<&TrainConfig>,
    opt: Option<&Adam>,
    state: Option<&TrainState>,
    config_echo: &str,
) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for e in net.store.entries() {
        tensors.push((e.name.clone(), e.value.shape().to_vec(), to_bytes(&e.value)));
    }
    if let Some(opt) = opt {
        for (i, e) in net.store.entries().iter().enumerate() {
            if let (Some(m), Some(v)) = (&opt.m[i], &opt.v[i]) {
                tensors.push((format!("optim.m.{}", e.name), m.shape().to_vec(), to_bytes(m)));
                tensors.push((format!("optim.v.{}", e.name), v.shape().to_vec(), to_bytes(v)));
            }
        }
    }
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(n, s, d)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), d).map_err(|e| Error::Checkpoint(e.to_string()))?)))
        .collect::<Result<_>>()?;
    let mut meta = HashMap::new();
    meta.insert("format_version".into(), FORMAT_VERSION.into());
    meta.insert(
        "model_config".into(),
        toml::to_string(&net.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    meta.insert("config_echo".into(), config_echo.to_string());
    meta.insert("charset".into(), net.charset.to_json());
    meta.insert("charset_sha256".into(), net.charset.hash());
    if let Some(train) = train {
        meta.insert(
            "train_config".into(),
            toml::to_string(train).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    if let Some(state) = state {
        meta.insert("train_state".into(), serde_json::to_string(state)?);
    }
    if let Some(opt) = opt {
        meta.insert("adam".into(), serde_json::to_string(&AdamMeta { t: opt.t.clone() })?);
    }
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint, verifying format, config and charset consistency.
pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("missing metadata `{k}`")));
    if get("format_version")? != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", get("format_version")?)));
    }
    let cfg: ModelConfig = toml::from_str(get("model_config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let charset = Charset::from_json(get("charset")?)?;
    if &charset.hash() != get("charset_sha256")? {
        return Err(Error::IncompatibleCharset("charset hash does not match its contents".into()));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut net = Network::<f32>::new(&cfg, &charset, 0)?;
    fill_store(&mut net.store, &st, "", None, true)?;
    let train = meta
        .get("train_config")
        .map(|t| toml::from_str(t).map_err(|e| Error::Checkpoint(e.to_string())))
        .transpose()?;
    let state = meta.get("train_state").map(|s| serde_json::from_str(s)).transpose()?;
    let opt = match meta.get("adam") {
        Some(a) => {
            let am: AdamMeta = serde_json::from_str(a)?;
            let n = net.store.len();
            if am.t.len() != n {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
            let mut opt = Adam::new(n);
            opt.t = am.t;
            for (i, e) in net.store.entries().iter().enumerate() {
                if let (Ok(m), Ok(v)) = (st.tensor(&format!("optim.m.{}", e.name)), st.tensor(&format!("optim.v.{}", e.name))) {
                    opt.m[i] = Some(from_view(&m)?);
                    opt.v[i] = Some(from_view(&v)?);
                }
            }
            Some(opt)
        }
        None => None,
    };
    Ok(Checkpoint {
        net,
        train,
        opt,
        state,
        config_echo: meta.get("config_echo").cloned().unwrap_or_default(),
    })
}

fn fill_store(
    store: &mut ParamStore<f32>,
    st: &SafeTensors<'_>,
    prefix: &str,
    section: Option<Section>,
    require_all: bool,
) -> Result<usize> {
    let mut loaded = 0;
    for e in store.entries_mut() {
        if section.is_some_and(|s| s != e.section) {
            continue;
        }
        match st.tensor(&format!("{prefix}{}", e.name)) {
            Ok(view) => {
                let value = from_view(&view)?;
                if value.shape() != e.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        e.name,
                        value.shape(),
                        e.value.shape()
                    )));
                }
                e.value = value;
                loaded += 1;
            }
            Err(_) if !require_all => {}
            Err(_) => return Err(Error::Checkpoint(format!("missing tensor `{}`", e.name))),
        }
    }
    Ok(loaded)
}

/// Loads externally trained encoder weights (e.g. a converted backbone)
/// from a safetensors file whose tensor names match this model's encoder
/// parameters. Returns how many tensors were replaced.
pub fn import_encoder_weights(net: &mut Network<f32>, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fill_store(&mut net.store, &st, "", Some(Section::Encoder), false)
}

/// Refuses a checkpoint whose charset differs from `expected`.
pub fn check_charset(net: &Network<f32>, expected: &Charset) -> Result<()> {
    if net.charset.hash() == expected.hash() {
        Ok(())
    } else {
        Err(Error::IncompatibleCharset(format!(
            "checkpoint has {} symbols, dataset charset has {}",
            net.charset.symbols().len(),
            expected.symbols().len()
        )))
    }
}
