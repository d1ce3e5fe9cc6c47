//! Trained denoiser checkpoints and their binary encoding.

use std::path::Path;

use super::objective::Objective;
use super::schedule::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::io::container::{sha256_hex, Container, ContainerKind, Value};
use crate::numeric::{LayerDesc, Mlp, MlpConfig, ParamVector, LAST_LAYER};

/// Raw and EMA weights together with everything needed to sample from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MlpConfig,
    pub params: ParamVector,
    /// Weights used for sampling and for posterior fits.
    pub ema: ParamVector,
    pub schedule: NoiseSchedule,
    pub objective: Objective,
    pub seed: u64,
    pub epochs: usize,
}

impl Checkpoint {
    pub fn mlp(&self) -> Result<Mlp> {
        Mlp::new(self.model.clone())
    }

    pub fn to_container(&self) -> Container {
        let layout = serde_json::to_string(self.params.layout()).expect("layout serializes");
        let model = serde_json::to_string(&self.model).expect("config serializes");
        let mut c = Container::new(ContainerKind::Checkpoint);
        c.insert("model", Value::Str(model))
            .insert("layout", Value::Str(layout))
            .insert("params", Value::F64s(self.params.values().to_vec()))
            .insert("ema", Value::F64s(self.ema.values().to_vec()))
            .insert("schedule.kind", Value::Str(self.schedule.kind().to_string()))
            .insert("schedule.betas", Value::F64s(self.schedule.betas().to_vec()))
            .insert("objective", Value::Str(self.objective.to_string()))
            .insert("last_layer", Value::Str(LAST_LAYER.into()))
            .insert("seed", Value::U64(self.seed))
            .insert("epochs", Value::U64(self.epochs as u64));
        c
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_container().encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = Container::decode(bytes)?.expect_kind(ContainerKind::Checkpoint)?;
        let model: MlpConfig = serde_json::from_str(c.str("model")?)
            .map_err(|e| Error::Decode(format!("checkpoint model config: {e}")))?;
        let layout: Vec<LayerDesc> =
            serde_json::from_str(c.str("layout")?).map_err(|e| Error::Decode(format!("checkpoint layout: {e}")))?;
        if c.str("last_layer")? != LAST_LAYER {
            return Err(Error::Decode("checkpoint names an unknown last layer".into()));
        }
        let mlp = Mlp::new(model.clone()).map_err(|e| Error::Decode(e.to_string()))?;
        let params = ParamVector::from_parts(c.f64s("params")?.to_vec(), layout.clone())?;
        let ema = ParamVector::from_parts(c.f64s("ema")?.to_vec(), layout)?;
        mlp.check_layout(&params)?;
        let kind: ScheduleKind = c.str("schedule.kind")?.parse()?;
        let schedule = NoiseSchedule::from_betas(kind, c.f64s("schedule.betas")?.to_vec())
            .map_err(|e| Error::Decode(e.to_string()))?;
        Ok(Self {
            model,
            params,
            ema,
            schedule,
            objective: c.str("objective")?.parse()?,
            seed: c.u64("seed")?,
            epochs: c.usize("epochs")?,
        })
    }

    /// SHA-256 of the canonical encoding.
    pub fn hash(&self) -> String {
        sha256_hex(&self.encode())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
