//! Central finite-difference oracle for tape primitives (f64).

use detlab::autodiff::{ParamStore, Partition, Tape, Var};
use detlab::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor so exactly-zero gradients compare by absolute error.
pub const REL_FLOOR: f64 = 1e-3;

pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

#[derive(Debug, Clone, Copy)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

fn scalar_loss(
    store: &ParamStore<f64>,
    ids: &[detlab::autodiff::ParamId],
    weights: &mut Option<Tensor<f64>>,
    seed: u64,
    build: &Build<'_>,
) -> Result<(Tape<f64>, Var)> {
    let mut tape = Tape::new(true);
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
    let out = build(&mut tape, &vars)?;
    if tape.shape(out).is_empty() {
        return Ok((tape, out));
    }
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        random_tensor(&mut rng, tape.shape(out), -1.0, 1.0)
    });
    let wv = tape.input(w.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    Ok((tape, loss))
}

/// Compares analytic gradients of every input against central differences.
/// At most `max_elems` entries per input are probed.
pub fn check(inputs: &[Tensor<f64>], differentiable: &[bool], seed: u64, max_elems: usize, build: &Build<'_>) -> CheckOutcome {
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = inputs.iter().enumerate().map(|(i, t)| store.add_param(format!("in{i}"), Partition::Head, t.clone())).collect();
    for (&id, &d) in ids.iter().zip(differentiable) {
        store.set_trainable(id, d);
    }
    let mut weights = None;
    let (tape, loss) = scalar_loss(&store, &ids, &mut weights, seed, build).expect("forward");
    tape.backward(loss, &mut store).expect("backward");
    let analytic: Vec<Option<Tensor<f64>>> = ids.iter().map(|&id| store.param(id).grad.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcome = CheckOutcome { max_rel_err: 0.0, checked: 0 };
    for (i, &id) in ids.iter().enumerate() {
        if !differentiable[i] {
            continue;
        }
        let n = inputs[i].numel();
        let grad = analytic[i].clone().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let probes: Vec<usize> = if n <= max_elems { (0..n).collect() } else { (0..max_elems).map(|_| rng.gen_range(0..n)).collect() };
        for j in probes {
            let orig = store.param(id).value.data()[j];
            store.param_mut(id).value.data_mut()[j] = orig + EPS;
            let (t, l) = scalar_loss(&store, &ids, &mut weights, seed, build).unwrap();
            let plus = t.value(l).item();
            store.param_mut(id).value.data_mut()[j] = orig - EPS;
            let (t, l) = scalar_loss(&store, &ids, &mut weights, seed, build).unwrap();
            let minus = t.value(l).item();
            store.param_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            outcome.max_rel_err = outcome.max_rel_err.max(rel);
            outcome.checked += 1;
        }
    }
    outcome
}

pub struct Case {
    pub primitive: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub differentiable: Vec<bool>,
    pub build: Box<Build<'static>>,
}

fn dims(rng: &mut ChaCha8Rng, rank_lo: usize) -> Vec<usize> {
    let rank = rng.gen_range(rank_lo..=4);
    (0..rank).map(|_| rng.gen_range(1..=6)).collect()
}

/// Values bounded away from zero so kinked primitives stay smooth under ±EPS.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = random_tensor(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        *v += 0.05 * v.signum();
    }
    t
}

/// Names of every differentiable primitive the detector zoo uses.
pub const PRIMITIVES: &[&str] = &[
    "conv2d",
    "batch_norm_train",
    "batch_norm_frozen",
    "relu",
    "sigmoid",
    "max_pool2d",
    "upsample_nearest2x",
    "global_avg_pool",
    "linear",
    "add",
    "mul",
    "scale",
    "sum",
    "concat_channels",
    "softmax",
    "flatten_anchors",
    "concat_rows",
    "gather_rows",
    "reshape",
    "roi_align",
    "cross_entropy",
    "weighted_cross_entropy",
    "focal_loss",
    "smooth_l1",
];

/// One randomized instance of `primitive`.
pub fn case(primitive: &'static str, seed: u64) -> Case {
    use detlab::autodiff::{BnMode, RoiRef};
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ primitive.len() as u64);
    let one = |t: Tensor<f64>| (vec![t], vec![true]);
    let (inputs, differentiable, build): (Vec<Tensor<f64>>, Vec<bool>, Box<Build<'static>>) = match primitive {
        "conv2d" => {
            let n = rng.gen_range(1..=2);
            let cin = rng.gen_range(1..=3);
            let cout = rng.gen_range(1..=3);
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..k);
            let h = rng.gen_range(k.max(2)..=6);
            let w = rng.gen_range(k.max(2)..=6);
            let bias = rng.gen_bool(0.5);
            let mut inputs = vec![random_tensor(&mut rng, &[n, cin, h, w], -1.0, 1.0), random_tensor(&mut rng, &[cout, cin, k, k], -1.0, 1.0)];
            if bias {
                inputs.push(random_tensor(&mut rng, &[cout], -1.0, 1.0));
            }
            let d = vec![true; inputs.len()];
            (inputs, d, Box::new(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)))
        }
        "batch_norm_train" | "batch_norm_frozen" => {
            let frozen = primitive == "batch_norm_frozen";
            let c = rng.gen_range(1..=3);
            let n = rng.gen_range(1..=3);
            let h = rng.gen_range(1..=4);
            let w = rng.gen_range(2..=4);
            let x = random_tensor(&mut rng, &[n, c, h, w], -2.0, 2.0);
            let gamma = random_tensor(&mut rng, &[c], 0.5, 1.5);
            let beta = random_tensor(&mut rng, &[c], -0.5, 0.5);
            let mean = random_tensor(&mut rng, &[c], -0.5, 0.5);
            let var = random_tensor(&mut rng, &[c], 0.5, 2.0);
            let mut stats = ParamStore::<f64>::new();
            let rm = stats.add_buffer("rm", Partition::Backbone, mean);
            let rv = stats.add_buffer("rv", Partition::Backbone, var);
            let mode = if frozen { BnMode::FrozenStats } else { BnMode::TrainStats };
            (vec![x, gamma, beta], vec![true; 3], Box::new(move |t, v| t.batch_norm(v[0], v[1], v[2], &stats, (rm, rv), mode, 1e-5, 0.1)))
        }
        "relu" => {
            let s = dims(&mut rng, 1);
            let (i, d) = one(away_from_zero(&mut rng, &s));
            (i, d, Box::new(|t, v| Ok(t.relu(v[0]))))
        }
        "sigmoid" => {
            let s = dims(&mut rng, 1);
            let (i, d) = one(random_tensor(&mut rng, &s, -3.0, 3.0));
            (i, d, Box::new(|t, v| Ok(t.sigmoid(v[0]))))
        }
        "max_pool2d" => {
            let k = rng.gen_range(2..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..k);
            let s = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(k..=6), rng.gen_range(k..=6)];
            let (i, d) = one(random_tensor(&mut rng, &s, -1.0, 1.0));
            (i, d, Box::new(move |t, v| t.max_pool2d(v[0], k, stride, pad)))
        }
        "upsample_nearest2x" => {
            let s = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=6)];
            let (i, d) = one(random_tensor(&mut rng, &s, -1.0, 1.0));
            (i, d, Box::new(|t, v| t.upsample_nearest2x(v[0])))
        }
        "global_avg_pool" => {
            let s = [rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=6)];
            let (i, d) = one(random_tensor(&mut rng, &s, -1.0, 1.0));
            (i, d, Box::new(|t, v| t.global_avg_pool(v[0])))
        }
        "linear" => {
            let (n, din, dout) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=6));
            let inputs = vec![
                random_tensor(&mut rng, &[n, din], -1.0, 1.0),
                random_tensor(&mut rng, &[dout, din], -1.0, 1.0),
                random_tensor(&mut rng, &[dout], -1.0, 1.0),
            ];
            (inputs, vec![true; 3], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))))
        }
        "add" | "mul" => {
            let s = dims(&mut rng, 1);
            let inputs = vec![random_tensor(&mut rng, &s, -1.0, 1.0), random_tensor(&mut rng, &s, -1.0, 1.0)];
            let is_add = primitive == "add";
            (inputs, vec![true; 2], Box::new(move |t, v| if is_add { t.add(v[0], v[1]) } else { t.mul(v[0], v[1]) }))
        }
        "scale" => {
            let s = dims(&mut rng, 1);
            let c = rng.gen_range(-2.0..2.0);
            let (i, d) = one(random_tensor(&mut rng, &s, -1.0, 1.0));
            (i, d, Box::new(move |t, v| Ok(t.scale(v[0], c))))
        }
        "sum" => {
            let s = dims(&mut rng, 1);
            let (i, d) = one(random_tensor(&mut rng, &s, -1.0, 1.0));
            (i, d, Box::new(|t, v| Ok(t.sum(v[0]))))
        }
        "concat_channels" => {
            let parts = rng.gen_range(2..=3);
            let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=5), rng.gen_range(1..=5));
            let inputs: Vec<_> = (0..parts)
                .map(|_| {
                    let c = rng.gen_range(1..=3);
                    random_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0)
                })
                .collect();
            let d = vec![true; parts];
            (inputs, d, Box::new(|t, v| t.concat_channels(v)))
        }
        "softmax" => {
            let shape = [rng.gen_range(1..=6), rng.gen_range(1..=6)];
            let (i, d) = one(random_tensor(&mut rng, &shape, -2.0, 2.0));
            (i, d, Box::new(|t, v| t.softmax(v[0])))
        }
        "flatten_anchors" => {
            let k = rng.gen_range(1..=3);
            let a = rng.gen_range(1..=2);
            let s = [rng.gen_range(1..=2), a * k, rng.gen_range(1..=5), rng.gen_range(1..=5)];
            let (i, d) = one(random_tensor(&mut rng, &s, -1.0, 1.0));
            (i, d, Box::new(move |t, v| t.flatten_anchors(v[0], k)))
        }
        "concat_rows" => {
            let cols = rng.gen_range(1..=5);
            let parts = rng.gen_range(2..=3);
            let inputs: Vec<_> = (0..parts)
                .map(|_| {
                    let r = rng.gen_range(1..=4);
                    random_tensor(&mut rng, &[r, cols], -1.0, 1.0)
                })
                .collect();
            let d = vec![true; parts];
            (inputs, d, Box::new(|t, v| t.concat_rows(v)))
        }
        "gather_rows" => {
            let (rows, cols) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
            let idx: Vec<usize> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..rows)).collect();
            let (i, d) = one(random_tensor(&mut rng, &[rows, cols], -1.0, 1.0));
            (i, d, Box::new(move |t, v| t.gather_rows(v[0], &idx)))
        }
        "reshape" => {
            let s = dims(&mut rng, 2);
            let numel: usize = s.iter().product();
            let (i, d) = one(random_tensor(&mut rng, &s, -1.0, 1.0));
            (i, d, Box::new(move |t, v| t.reshape(v[0], &[numel])))
        }
        "roi_align" => {
            let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
            let f0 = random_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0);
            let f1 = random_tensor(&mut rng, &[n, c, h.div_ceil(2), w.div_ceil(2)], -1.0, 1.0);
            let (img_h, img_w) = ((h * 2) as f64, (w * 2) as f64);
            let rois: Vec<RoiRef> = (0..rng.gen_range(1..=4))
                .map(|_| {
                    let x1 = rng.gen_range(0.0..img_w - 1.0);
                    let y1 = rng.gen_range(0.0..img_h - 1.0);
                    let x2 = rng.gen_range(x1 + 0.5..img_w);
                    let y2 = rng.gen_range(y1 + 0.5..img_h);
                    RoiRef { batch: rng.gen_range(0..n), level: rng.gen_range(0..2), bbox: [x1, y1, x2, y2] }
                })
                .collect();
            let pooled = rng.gen_range(1..=3);
            (vec![f0, f1], vec![true; 2], Box::new(move |t, v| t.roi_align(v, &[2, 4], &rois, pooled)))
        }
        "cross_entropy" | "weighted_cross_entropy" => {
            let (m, c) = (rng.gen_range(1..=6), rng.gen_range(2..=6));
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..c)).collect();
            let weights: Option<Vec<f64>> = (primitive == "weighted_cross_entropy").then(|| (0..c).map(|_| rng.gen_range(0.2..3.0)).collect());
            let (i, d) = one(random_tensor(&mut rng, &[m, c], -2.0, 2.0));
            (i, d, Box::new(move |t, v| t.cross_entropy(v[0], &targets, weights.as_deref(), None)))
        }
        "focal_loss" => {
            let (m, c) = (rng.gen_range(1..=6), rng.gen_range(2..=6));
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..c)).collect();
            let gamma = [0.0, 0.5, 1.0, 2.0][rng.gen_range(0..4)];
            let alpha = rng.gen_range(0.25..1.0);
            let (i, d) = one(random_tensor(&mut rng, &[m, c], -2.0, 2.0));
            (i, d, Box::new(move |t, v| t.focal_loss(v[0], &targets, gamma, alpha, m as f64)))
        }
        "smooth_l1" => {
            let rows = rng.gen_range(1..=6);
            let pred = random_tensor(&mut rng, &[rows, 4], -1.0, 1.0);
            let beta = rng.gen_range(0.1..1.0);
            let mut target = random_tensor(&mut rng, &[rows, 4], -1.0, 1.0);
            // keep |pred - target| away from the quadratic/linear seam
            for (t, &p) in target.data_mut().iter_mut().zip(pred.data()) {
                if ((p - *t).abs() - beta).abs() < 0.01 {
                    *t += 0.05;
                }
            }
            (vec![pred], vec![true], Box::new(move |t, v| t.smooth_l1(v[0], &target, beta, rows as f64)))
        }
        other => panic!("unknown primitive {other}"),
    };
    Case { primitive, inputs, differentiable, build }
}

pub fn run_case(c: &Case, seed: u64) -> CheckOutcome {
    check(&c.inputs, &c.differentiable, seed, 48, c.build.as_ref())
}
