//! Versioned JSON checkpoints. Parameter arrays are embedded as base64
//! MXN1 tensor blobs.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HiddenLayer, Linear, Model, ModelConfig, NormKind};
use crate::norm::{Mode, NormLayerState};
use crate::numerics::Tensor;
use crate::train::TrainSchedule;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRecord {
    pub weight: String,
    pub bias: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenRecord {
    pub kind: NormKind,
    pub linear: LinearRecord,
    pub norm: Option<NormRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub schedule: TrainSchedule,
    pub hidden: Vec<HiddenRecord>,
    pub embed: LinearRecord,
    #[serde(default)]
    pub neck: Option<NormRecord>,
    pub classifier: LinearRecord,
}

fn blob(t: &Tensor<f32>) -> String {
    STANDARD.encode(t.to_mxn1())
}

fn vec_blob(v: &[f32]) -> String {
    blob(&Tensor::from_vec(vec![v.len()], v.to_vec()).expect("non-empty vector"))
}

fn unblob(s: &str) -> Result<Tensor<f32>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Format(format!("bad base64 blob: {e}")))?;
    Tensor::from_mxn1(&bytes)
}

fn unblob_vec(s: &str, len: usize) -> Result<Vec<f32>> {
    let t = unblob(s)?;
    if t.shape() != [len] {
        return Err(Error::Format(format!(
            "vector blob has shape {:?}, expected [{len}]",
            t.shape()
        )));
    }
    Ok(t.into_data())
}

fn linear_record(l: &Linear<f32>) -> LinearRecord {
    LinearRecord {
        weight: blob(&l.weight),
        bias: vec_blob(&l.bias),
    }
}

fn linear_from(r: &LinearRecord, input: usize, output: usize) -> Result<Linear<f32>> {
    let weight = unblob(&r.weight)?;
    weight.expect_shape(&[output, input])?;
    Ok(Linear {
        weight,
        bias: unblob_vec(&r.bias, output)?,
    })
}

fn norm_record(n: &NormLayerState<f32>) -> NormRecord {
    NormRecord {
        gamma: vec_blob(&n.gamma),
        beta: vec_blob(&n.beta),
        running_mean: vec_blob(&n.running_mean),
        running_var: vec_blob(&n.running_var),
        momentum: n.momentum as f64,
        eps: n.eps as f64,
    }
}

fn norm_from(n: &NormRecord, width: usize, cfg: &ModelConfig) -> Result<NormLayerState<f32>> {
    let mut st = NormLayerState::<f32>::new(width);
    st.gamma = unblob_vec(&n.gamma, width)?;
    st.beta = unblob_vec(&n.beta, width)?;
    st.running_mean = unblob_vec(&n.running_mean, width)?;
    st.running_var = unblob_vec(&n.running_var, width)?;
    st.momentum = n.momentum as f32;
    st.eps = n.eps as f32;
    st.mode = Mode::Eval;
    st.running_update = cfg.running_update;
    st.validate()?;
    Ok(st)
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, schedule: &TrainSchedule) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_config: model.config.clone(),
            schedule: schedule.clone(),
            hidden: model
                .hidden
                .iter()
                .map(|h| HiddenRecord {
                    kind: h.kind,
                    linear: linear_record(&h.linear),
                    norm: h.norm.as_ref().map(norm_record),
                })
                .collect(),
            embed: linear_record(&model.embed),
            neck: model.neck.as_ref().map(norm_record),
            classifier: linear_record(&model.classifier),
        }
    }

    /// Rebuilds the model in eval mode.
    pub fn to_model(&self) -> Result<Model<f32>> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        let cfg = &self.model_config;
        cfg.validate()?;
        if self.hidden.len() != cfg.hidden.len() {
            return Err(Error::Format("hidden layer count mismatch".into()));
        }
        let mut hidden = Vec::new();
        let mut width = cfg.input_dim;
        for (rec, &w) in self.hidden.iter().zip(&cfg.hidden) {
            let norm = rec.norm.as_ref().map(|n| norm_from(n, w, cfg)).transpose()?;
            if norm.is_some() == (rec.kind == NormKind::None) {
                return Err(Error::Format("norm record disagrees with layer kind".into()));
            }
            hidden.push(HiddenLayer {
                linear: linear_from(&rec.linear, width, w)?,
                kind: rec.kind,
                norm,
            });
            width = w;
        }
        if self.neck.is_some() != cfg.neck {
            return Err(Error::Format("neck record disagrees with model config".into()));
        }
        Ok(Model {
            config: cfg.clone(),
            hidden,
            embed: linear_from(&self.embed, width, cfg.embedding_dim)?,
            neck: self
                .neck
                .as_ref()
                .map(|n| norm_from(n, cfg.embedding_dim, cfg))
                .transpose()?,
            classifier: linear_from(&self.classifier, cfg.embedding_dim, cfg.classes)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
