//! Dense double-precision tensors with reverse-mode differentiation, plus the
//! layers, optimizer and checkpoint container the detector is built from.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC};
pub use graph::{
    smooth_l1_grad, smooth_l1_value, softmax_row, BatchStats, Gradients, Graph, RowRanges, Tensor,
};
pub use layers::{
    apply_bn_updates, forward_shared_mlp, BatchNorm, Ctx, Linear, MlpLayer, Mode, SharedMlp,
    BN_EPS, BN_MOMENTUM,
};
pub use optim::{cosine_lr, OptimizerState, BETA1, BETA2, EPSILON};
pub use params::{fan_in_uniform, kaiming_uniform, ParamEntry, ParamId, ParamStore};

/// Loss multipliers for the total objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub obj_cls: f64,
    pub sem_cls: f64,
    pub rep: f64,
    pub refine: f64,
    /// Balances offset against angle terms inside the representative-point and refinement losses.
    pub offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            obj_cls: 1.0,
            sem_cls: 0.1,
            rep: 1.0,
            refine: 1.0,
            offset: 20.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [
            self.obj_cls,
            self.sem_cls,
            self.rep,
            self.refine,
            self.offset,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(crate::Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}
