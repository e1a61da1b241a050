//! Parameterised building blocks shared by the backbone, decoder and heads.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{BnMode, BufferId, ParamId, ParamStore, Partition, Tape, Var};
use crate::error::Result;
use crate::rng;
use crate::tensor::{Float, Tensor};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Name-keyed initializer: the value of a parameter depends only on the
/// seed and its dotted name.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn normal<T: Float>(&self, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
        let mut r = rng::named(self.seed, name);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                T::from_f64(z * std)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// He-normal over fan-in.
    pub fn kaiming<T: Float>(&self, name: &str, shape: &[usize]) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        self.normal(name, shape, (2.0 / fan_in as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &Init,
        name: &str,
        partition: Partition,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let wname = format!("{name}.weight");
        let w = store.add_param(wname.clone(), partition, init.kaiming(&wname, &[cout, cin, k, k]));
        let b = bias.then(|| store.add_param(format!("{name}.bias"), partition, Tensor::zeros(&[cout])));
        Conv { w, b, stride, pad: k / 2 }
    }

    /// All-zero weights: the layer starts as a constant 0 but still
    /// receives weight gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn zeroed<T: Float>(store: &mut ParamStore<T>, name: &str, partition: Partition, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        let w = store.add_param(format!("{name}.weight"), partition, Tensor::zeros(&[cout, cin, k, k]));
        let b = bias.then(|| store.add_param(format!("{name}.bias"), partition, Tensor::zeros(&[cout])));
        Conv { w, b, stride, pad: k / 2 }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<T: Float>(store: &mut ParamStore<T>, weight: Tensor<T>, name: &str, partition: Partition) -> Self {
        let out = weight.dim(0);
        let w = store.add_param(format!("{name}.weight"), partition, weight);
        let b = store.add_param(format!("{name}.bias"), partition, Tensor::zeros(&[out]));
        Dense { w, b }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }
}

/// Convolution without bias followed by batch normalization.
#[derive(Debug, Clone)]
pub(crate) struct ConvBn {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufferId,
    pub var: BufferId,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &Init, name: &str, partition: Partition, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let conv = Conv::new(store, init, &format!("{name}.conv"), partition, cin, cout, k, stride, false);
        let gamma = store.add_param(format!("{name}.bn.gamma"), partition, Tensor::full(&[cout], T::one()));
        let beta = store.add_param(format!("{name}.bn.beta"), partition, Tensor::zeros(&[cout]));
        let mean = store.add_buffer(format!("{name}.bn.running_mean"), partition, Tensor::zeros(&[cout]));
        let var = store.add_buffer(format!("{name}.bn.running_var"), partition, Tensor::full(&[cout], T::one()));
        ConvBn { conv, gamma, beta, mean, var }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: BnMode) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm(y, g, b, store, (self.mean, self.var), mode, BN_EPS, BN_MOMENTUM)
    }
}

/// Two 3×3 conv-bn layers with an identity or projected shortcut.
#[derive(Debug, Clone)]
pub(crate) struct BasicBlock {
    pub c1: ConvBn,
    pub c2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let p = Partition::Backbone;
        let c1 = ConvBn::new(store, init, &format!("{name}.conv1"), p, cin, cout, 3, stride);
        let c2 = ConvBn::new(store, init, &format!("{name}.conv2"), p, cout, cout, 3, 1);
        let shortcut = (cin != cout || stride != 1).then(|| ConvBn::new(store, init, &format!("{name}.shortcut"), p, cin, cout, 1, stride));
        BasicBlock { c1, c2, shortcut }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: BnMode) -> Result<Var> {
        let h = self.c1.forward(tape, store, x, mode)?;
        let h = tape.relu(h);
        let h = self.c2.forward(tape, store, h, mode)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, store, x, mode)?,
            None => x,
        };
        let y = tape.add(h, skip)?;
        Ok(tape.relu(y))
    }
}
