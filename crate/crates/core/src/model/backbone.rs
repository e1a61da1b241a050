use crate::autodiff::{BnMode, ParamStore, Partition, Tape, Var};
use crate::error::Result;
use crate::model::layers::{BasicBlock, Conv, ConvBn, Init};
use crate::model::spec::{AdapterSpec, BackboneSpec};
use crate::tensor::{Float, Tensor};

/// Residual-stage feature extractor. Stage `i` runs at stride `4·2^i`.
#[derive(Debug, Clone)]
pub(crate) struct Backbone {
    pub stem: ConvBn,
    pub stages: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &Init, spec: &BackboneSpec) -> Self {
        let c0 = spec.stage_channels[0];
        let stem = ConvBn::new(store, init, "backbone.stem", Partition::Backbone, spec.input_channels, c0, 3, 2);
        let mut stages = Vec::with_capacity(spec.num_stages());
        let mut cin = c0;
        for (i, (&cout, &blocks)) in spec.stage_channels.iter().zip(&spec.blocks_per_stage).enumerate() {
            let stage = (0..blocks)
                .map(|b| {
                    let stride = if i > 0 && b == 0 { 2 } else { 1 };
                    let block = BasicBlock::new(store, init, &format!("backbone.stage{i}.block{b}"), cin, cout, stride);
                    cin = cout;
                    block
                })
                .collect();
            stages.push(stage);
        }
        Backbone { stem, stages }
    }

    /// Returns every stage output. `adapters[i][b]`, when present, is
    /// applied to the output of block `b` of stage `i`.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: BnMode, adapters: Option<&[Vec<Adapter>]>) -> Result<Vec<Var>> {
        let prev = tape.set_scope(Partition::Backbone);
        let h = self.stem.forward(tape, store, x, mode)?;
        let h = tape.relu(h);
        let mut h = tape.max_pool2d(h, 3, 2, 1)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                h = block.forward(tape, store, h, mode)?;
                if let Some(ad) = adapters {
                    tape.set_scope(Partition::Adapter);
                    h = ad[i][b].forward(tape, store, h)?;
                    tape.set_scope(Partition::Backbone);
                }
            }
            outs.push(h);
        }
        tape.set_scope(prev);
        Ok(outs)
    }
}

/// `y + up(relu(down(y)))` with a zero-initialised `up` projection.
#[derive(Debug, Clone)]
pub(crate) struct Adapter {
    pub down: Conv,
    pub up: Conv,
}

impl Adapter {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &Init, name: &str, channels: usize, spec: &AdapterSpec) -> Self {
        let mid = spec.bottleneck(channels);
        let down = Conv::new(store, init, &format!("{name}.down"), Partition::Adapter, channels, mid, 1, 1, true);
        let up = Conv::new(store, init, &format!("{name}.up"), Partition::Adapter, mid, channels, 1, 1, true);
        store.param_mut(up.w).value = Tensor::zeros(&[channels, mid, 1, 1]);
        Adapter { down, up }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<Var> {
        let a = self.down.forward(tape, store, y)?;
        let a = tape.relu(a);
        let p = self.up.forward(tape, store, a)?;
        tape.add(y, p)
    }
}

pub(crate) fn build_adapters<T: Float>(store: &mut ParamStore<T>, init: &Init, spec: &BackboneSpec, ad: &AdapterSpec) -> Vec<Vec<Adapter>> {
    spec.stage_channels
        .iter()
        .zip(&spec.blocks_per_stage)
        .enumerate()
        .map(|(i, (&c, &blocks))| (0..blocks).map(|b| Adapter::new(store, init, &format!("adapter.stage{i}.block{b}"), c, ad)).collect())
        .collect()
}
