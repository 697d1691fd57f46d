//! JSON file formats: adapter checkpoints and merged weights.
//!
//! Every array is stored as its shape plus the base64 encoding of its
//! entries as little-endian `f64` bytes, row-major.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, AdapterSpec, AdapterState, Variant};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::harness::{dense_logits, Backbone};
use crate::rng::stream;

pub const CHECKPOINT_FORMAT: &str = "adapterforge-checkpoint/1";
pub const MERGED_FORMAT: &str = "adapterforge-merged/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedArray {
    pub shape: Vec<usize>,
    pub data: String,
}

impl EncodedArray {
    pub fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Decode(format!("base64: {e}")))?;
        let expect = self.shape.iter().product::<usize>() * 8;
        if bytes.len() != expect {
            return Err(Error::Decode(format!(
                "shape {:?} needs {expect} bytes, found {}",
                self.shape,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(&self.shape, data)
    }
}

/// One adapted layer: frozen `W`, down-projections `A`, heads `B[i]`, router `W_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub spec: AdapterSpec,
    pub w: EncodedArray,
    pub a: Vec<EncodedArray>,
    pub b: Vec<EncodedArray>,
    pub w_r: Option<EncodedArray>,
}

impl LayerCheckpoint {
    pub fn encode(state: &AdapterState) -> Self {
        Self {
            spec: state.spec.clone(),
            w: EncodedArray::encode(&state.base),
            a: state.down.iter().map(EncodedArray::encode).collect(),
            b: state.heads.iter().map(EncodedArray::encode).collect(),
            w_r: state.router.as_ref().map(EncodedArray::encode),
        }
    }

    /// Rebuilds the state, checking every shape against a fresh initialization of the same spec.
    pub fn decode(&self) -> Result<AdapterState> {
        let base = self.w.decode()?;
        let mut state = init_adapter(&self.spec, base, self.spec.seed)?;
        let fill = |slot: &mut Tensor, enc: &EncodedArray| -> Result<()> {
            let t = enc.decode()?;
            if t.shape() != slot.shape() {
                return Err(Error::Decode(format!(
                    "array shape {:?}, spec expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.with_requires_grad(true);
            Ok(())
        };
        if self.a.len() != state.down.len() || self.b.len() != state.heads.len() {
            return Err(Error::Decode(format!(
                "{} down-projections and {} heads, spec expects {} and {}",
                self.a.len(),
                self.b.len(),
                state.down.len(),
                state.heads.len()
            )));
        }
        for (slot, enc) in state.down.iter_mut().zip(&self.a) {
            fill(slot, enc)?;
        }
        for (slot, enc) in state.heads.iter_mut().zip(&self.b) {
            fill(slot, enc)?;
        }
        match (&mut state.router, &self.w_r) {
            (Some(slot), Some(enc)) => fill(slot, enc)?,
            (None, None) => {}
            _ => return Err(Error::Decode(format!("router presence does not match {}", self.spec.variant))),
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub variant: Variant,
    pub layers: Vec<LayerCheckpoint>,
}

impl Checkpoint {
    pub fn from_backbone(model: &Backbone) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            variant: model.layers[0].spec.variant,
            layers: model.layers.iter().map(LayerCheckpoint::encode).collect(),
        }
    }

    pub fn to_backbone(&self) -> Result<Backbone> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Decode(format!("unknown checkpoint format {:?}", self.format)));
        }
        let layers = self.layers.iter().map(LayerCheckpoint::decode).collect::<Result<Vec<_>>>()?;
        if let Some(l) = layers.iter().find(|l| l.spec.variant != self.variant) {
            return Err(Error::Decode(format!("layer variant {} under a {} checkpoint", l.spec.variant, self.variant)));
        }
        for pair in layers.windows(2) {
            if pair[1].dims().1 != pair[0].dims().0 {
                return Err(Error::Decode("consecutive layers do not chain".into()));
            }
        }
        if layers.is_empty() {
            return Err(Error::Decode("checkpoint has no layers".into()));
        }
        Ok(Backbone { layers })
    }
}

/// The plain weights `W′ = W + ΔW` of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedWeights {
    pub format: String,
    pub layers: Vec<EncodedArray>,
}

impl MergedWeights {
    pub fn from_backbone(model: &Backbone) -> Result<Self> {
        let layers = model
            .layers
            .iter()
            .map(|l| l.merge().map(|m| EncodedArray::encode(&m.merged)))
            .collect::<Result<_>>()?;
        Ok(Self {
            format: MERGED_FORMAT.into(),
            layers,
        })
    }

    pub fn tensors(&self) -> Result<Vec<Tensor>> {
        self.layers.iter().map(EncodedArray::decode).collect()
    }
}

/// Max-abs gap between the merged network and the adapter network in evaluation mode over random probes.
pub fn merge_deviation(model: &Backbone, merged: &[Tensor], probes: usize, seed: u64) -> Result<f64> {
    let x = Tensor::randn(&[model.input_dim(), probes], 1.0, &mut stream(seed, &[50]));
    dense_logits(merged, &x)?.max_abs_diff(&model.logits(&x)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}
