//! The joint audio-video model: conditioner plus backbone over one parameter store.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::backbone::{condition_constants, Backbone, BackboneConfig};
use crate::conditioning::{ConditionInputs, ConditionSet, Conditioner, MaskFlags};
use crate::flow::{FlowError, VelocityField};
use crate::rng::Rng;

/// Architecture of the joint model; weights live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointNet {
    pub conditioner: Conditioner,
    pub backbone: Backbone,
}

/// Raw conditioning plus the mask to apply; embedded on the tape during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRequest {
    pub inputs: ConditionInputs,
    pub mask: MaskFlags,
}

impl JointNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        config: &BackboneConfig,
        caption_rows: usize,
        phoneme_rows: usize,
        speaker_width: usize,
    ) -> Result<Self, FlowError> {
        let conditioner = Conditioner::new(
            store,
            rng,
            config.width,
            caption_rows,
            phoneme_rows,
            config.d_video,
            speaker_width,
        );
        let backbone = Backbone::new(store, rng, config.clone())?;
        Ok(Self { conditioner, backbone })
    }

    fn two_streams(x: &[Var]) -> Result<(Var, Var), FlowError> {
        match x {
            [a, v] => Ok((*a, *v)),
            _ => Err(FlowError::ShapeMismatch(format!(
                "joint model takes audio and video streams, got {}",
                x.len()
            ))),
        }
    }
}

impl VelocityField<ConditionSet> for JointNet {
    fn velocity_vars(&self, tape: &mut Tape<'_>, x: &[Var], t: f64, cond: &ConditionSet) -> Result<Vec<Var>, FlowError> {
        let (a, v) = Self::two_streams(x)?;
        let vars = condition_constants(tape, cond);
        let (va, vv) = self.backbone.forward(tape, a, v, t, &vars)?;
        Ok(vec![va, vv])
    }
}

impl VelocityField<ConditionRequest> for JointNet {
    fn velocity_vars(
        &self,
        tape: &mut Tape<'_>,
        x: &[Var],
        t: f64,
        cond: &ConditionRequest,
    ) -> Result<Vec<Var>, FlowError> {
        let (a, v) = Self::two_streams(x)?;
        let vars = self.conditioner.build(tape, &cond.inputs, cond.mask)?;
        let (va, vv) = self.backbone.forward(tape, a, v, t, &vars)?;
        Ok(vec![va, vv])
    }
}
