//! Self-describing JSON checkpoints: configuration echo, variant, named
//! parameters, optimiser slots and the epoch counter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, SeededRng, SgdSlots};
use crate::{DfaError, Result};

use super::config::{TrainConfig, Variant};
use super::model::{Dims, Group, ModelState};

pub const CHECKPOINT_FORMAT: &str = "dfa-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub variant: Variant,
    pub config: TrainConfig,
    pub dims: Dims,
    pub epoch: usize,
    pub params: BTreeMap<String, Matrix>,
    /// Momentum buffers keyed `"<group>.<index>"`.
    pub slots: BTreeMap<String, Matrix>,
}

fn group_key(g: Group) -> &'static str {
    match g {
        Group::Specific => "specific",
        Group::Invariant => "invariant",
        Group::Mask => "mask",
    }
}

impl Checkpoint {
    pub fn new(state: &ModelState, config: &TrainConfig, variant: Variant) -> Self {
        let mut slots = BTreeMap::new();
        for g in Group::ALL {
            for (i, v) in state.slots(g).velocity.iter().enumerate() {
                slots.insert(format!("{}.{i:04}", group_key(g)), v.clone());
            }
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            variant,
            config: config.clone(),
            dims: state.dims,
            epoch: state.epoch,
            params: state.named_params(),
            slots,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    /// Parses and fully validates a checkpoint, including every shape.
    pub fn parse(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(DfaError::parse(1, format!("unknown checkpoint format {:?}", ck.format)));
        }
        ck.config.validate()?;
        ck.state()?;
        Ok(ck)
    }

    /// Rebuilds the model state.
    pub fn state(&self) -> Result<ModelState> {
        let supplied = self.params.values().try_fold(0usize, |a, m| a.checked_add(m.len()));
        let expected = ModelState::expected_param_count(&self.config.architecture, self.dims);
        if expected.is_none() || expected != supplied {
            return Err(DfaError::InvalidArgument(format!(
                "checkpoint holds {supplied:?} parameters, architecture needs {expected:?}"
            )));
        }
        let mut state = ModelState::init(&self.config.architecture, self.dims, &mut SeededRng::new(0))?;
        state.load_named(self.params.clone())?;
        state.epoch = self.epoch;
        let mut slots = self.slots.clone();
        for g in Group::ALL {
            let shapes: Vec<(usize, usize)> = state.group(g).iter().map(|(_, m)| m.shape()).collect();
            let prefix = format!("{}.", group_key(g));
            let keys: Vec<String> = slots.keys().filter(|k| k.starts_with(&prefix)).cloned().collect();
            if keys.is_empty() {
                continue;
            }
            if keys.len() != shapes.len() {
                return Err(DfaError::InvalidArgument(format!(
                    "{} momentum buffers for {} parameters in group {}",
                    keys.len(),
                    shapes.len(),
                    group_key(g)
                )));
            }
            let mut velocity = Vec::with_capacity(keys.len());
            for (i, shape) in shapes.into_iter().enumerate() {
                let key = format!("{prefix}{i:04}");
                let v = slots
                    .remove(&key)
                    .ok_or_else(|| DfaError::InvalidArgument(format!("missing momentum buffer {key}")))?;
                if v.shape() != shape {
                    return Err(DfaError::InvalidArgument(format!("momentum buffer {key} has shape {:?}", v.shape())));
                }
                velocity.push(v);
            }
            *state.slots_mut(g) = SgdSlots { velocity };
        }
        if let Some(extra) = slots.keys().next() {
            return Err(DfaError::InvalidArgument(format!("unexpected momentum buffer {extra}")));
        }
        Ok(state)
    }
}
