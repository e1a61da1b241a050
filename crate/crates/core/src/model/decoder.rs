use crate::autodiff::{ParamStore, Partition, Tape, Var};
use crate::error::Result;
use crate::model::layers::{Conv, Init};
use crate::model::spec::{DecoderSpec, DecoderVariant};
use crate::tensor::Float;

/// One merge pass: a top-down sweep then a bottom-up sweep. Each merge is
/// a residual update `x + conv(relu(x + neighbour))` whose conv starts at
/// zero, so an untrained multi-merge decoder computes the FPN features and
/// extra passes add capacity without destabilizing the start of training.
#[derive(Debug, Clone)]
struct MergePass {
    top_down: Vec<Conv>,
    bottom_up: Vec<Conv>,
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    lateral: Vec<Conv>,
    output: Vec<Conv>,
    merges: Vec<MergePass>,
}

impl Decoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &Init, spec: &DecoderSpec, in_channels: &[usize]) -> Self {
        let f = spec.filters;
        let p = Partition::Decoder;
        let lateral = in_channels.iter().enumerate().map(|(i, &c)| Conv::new(store, init, &format!("decoder.lateral{i}"), p, c, f, 1, 1, true)).collect();
        let levels = in_channels.len();
        let merges = match spec.variant {
            DecoderVariant::FpnLite => Vec::new(),
            DecoderVariant::MultiMergeLite => (0..spec.merge_repeats)
                .map(|r| MergePass {
                    top_down: (0..levels - 1).map(|i| Conv::zeroed(store, &format!("decoder.merge{r}.td{i}"), p, f, f, 3, 1, true)).collect(),
                    bottom_up: (1..levels).map(|i| Conv::zeroed(store, &format!("decoder.merge{r}.bu{i}"), p, f, f, 3, 1, true)).collect(),
                })
                .collect(),
        };
        let output = (0..levels).map(|i| Conv::new(store, init, &format!("decoder.output{i}"), p, f, f, 3, 1, true)).collect();
        Decoder { lateral, output, merges }
    }

    /// Maps backbone levels (finest first) to decoder features of equal count.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feats: &[Var]) -> Result<Vec<Var>> {
        let prev = tape.set_scope(Partition::Decoder);
        let n = self.lateral.len();
        let mut lat = Vec::with_capacity(n);
        for (conv, &x) in self.lateral.iter().zip(feats) {
            lat.push(conv.forward(tape, store, x)?);
        }
        for i in (0..n - 1).rev() {
            let up = tape.upsample_nearest2x(lat[i + 1])?;
            lat[i] = tape.add(lat[i], up)?;
        }
        for pass in &self.merges {
            // top-down: coarse context into fine levels
            for i in (0..n - 1).rev() {
                let up = tape.upsample_nearest2x(lat[i + 1])?;
                let m = tape.add(lat[i], up)?;
                let m = tape.relu(m);
                let r = pass.top_down[i].forward(tape, store, m)?;
                lat[i] = tape.add(lat[i], r)?;
            }
            // bottom-up: fine detail into coarse levels
            for i in 1..n {
                let down = tape.max_pool2d(lat[i - 1], 2, 2, 0)?;
                let m = tape.add(lat[i], down)?;
                let m = tape.relu(m);
                let r = pass.bottom_up[i - 1].forward(tape, store, m)?;
                lat[i] = tape.add(lat[i], r)?;
            }
        }
        let mut outs = Vec::with_capacity(n);
        for (conv, &x) in self.output.iter().zip(&lat) {
            let y = conv.forward(tape, store, x)?;
            outs.push(tape.relu(y));
        }
        tape.set_scope(prev);
        Ok(outs)
    }
}
