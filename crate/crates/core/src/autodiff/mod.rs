//! Dense-tensor primitives with reverse-mode gradients and partition-aware
//! gradient skipping.

pub mod kernels;
mod params;
mod tape;

pub use kernels::RoiRef;
pub use params::{Buffer, BufferId, ManifestEntry, ParamId, ParamStore, Parameter, Partition};
pub use tape::{BackwardStats, BnMode, InputEdge, NodeProfile, StatUpdate, Tape, Var};

impl<T: crate::tensor::Float> ParamStore<T> {
    /// Writes running statistics produced by a training-mode forward pass.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        for u in updates {
            self.buffer_mut(u.mean).value = u.new_mean;
            self.buffer_mut(u.var).value = u.new_var;
        }
    }
}
