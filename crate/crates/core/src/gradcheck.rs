//! Central finite-difference checks of every analytic backward pass.
//!
//! Each layer trial builds a randomly shaped layer in `f64`, draws random
//! inputs and a random upstream weighting `w`, and compares the analytic
//! gradient of `Σ w·y` with `(L(θ+h) − L(θ−h)) / 2h` on sampled coordinates
//! of every input and parameter. The network check does the same for the
//! cross-entropy loss of a reduced MedNet.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MedNetConfig, ModelGraph, Variant};
use crate::layers::{
    set_broken_relu_backward, softmax_cross_entropy, BatchNorm2d, Conv2d, ConvSpec, Dropout, FullyConnected, Layer,
    Mode, Padding, ParamRole, Relu,
};
use crate::layers::{Add, Concat, GlobalAvgPool, SoftmaxOutput};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Coordinates sampled per tensor per trial.
const COORDS_PER_TENSOR: usize = 8;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub step: f64,
    pub layer_tolerance: f64,
    pub network_tolerance: f64,
    /// Scalar parameters probed in the end-to-end check.
    pub network_coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            trials: 20,
            step: 1e-5,
            layer_tolerance: 1e-4,
            network_tolerance: 1e-3,
            network_coordinates: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

/// Deliberate defects for mutation testing of the suite itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// ReLU backward ignores its mask.
    ReluBackward,
}

/// Runs `f` with `fault` active on the current thread.
pub fn with_fault<R>(fault: Fault, f: impl FnOnce() -> R) -> R {
    match fault {
        Fault::ReluBackward => {
            let prev = set_broken_relu_backward(true);
            let out = f();
            set_broken_relu_backward(prev);
            out
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One layer instance plus the inputs to differentiate at.
struct Case {
    layer: Layer<f64>,
    inputs: Vec<Tensor<f64>>,
}

fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Values kept at least `gap` away from zero, for kinked functions.
fn off_zero_tensor(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.normal();
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn conv_case(rng: &mut Rng) -> Result<Case> {
    let kernel = [1, 3, 5, 7][rng.below(4)];
    let stride = 1 + rng.below(2);
    let padding = if rng.bernoulli(0.75) || kernel > 5 { Padding::Same } else { Padding::Valid };
    let (n, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let h = dim(rng, kernel.max(3), kernel.max(3) + 3);
    let w = dim(rng, kernel.max(3), kernel.max(3) + 3);
    let spec = ConvSpec { padding, ..ConvSpec::square(kernel, stride, cin, cout).with_bias(rng.bernoulli(0.5)) };
    Ok(Case { layer: Layer::Conv2d(Conv2d::new(spec, rng)?), inputs: vec![normal_tensor(&[n, h, w, cin], rng)] })
}

fn batchnorm_case(rng: &mut Rng, frozen: bool) -> Result<Case> {
    let c = dim(rng, 1, 4);
    let shape = [dim(rng, 2, 3), dim(rng, 1, 4), dim(rng, 1, 4), c];
    let mut bn = BatchNorm2d::new(c, 1e-5, 0.9)?;
    bn.set_affine(normal_tensor(&[c], rng), normal_tensor(&[c], rng))?;
    if frozen {
        let var = Tensor::from_fn(&[c], |_| rng.uniform_range(0.5, 2.0));
        bn.set_running(normal_tensor(&[c], rng), var)?;
        bn.set_frozen(true);
    }
    Ok(Case { layer: Layer::BatchNorm2d(bn), inputs: vec![normal_tensor(&shape, rng)] })
}

fn nhwc(rng: &mut Rng) -> [usize; 4] {
    [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4)]
}

fn layer_cases() -> Vec<(&'static str, fn(&mut Rng) -> Result<Case>)> {
    vec![
        ("conv2d", conv_case),
        ("batchnorm2d", |r| batchnorm_case(r, false)),
        ("batchnorm2d (frozen)", |r| batchnorm_case(r, true)),
        ("relu", |r| {
            let s = nhwc(r);
            Ok(Case { layer: Layer::Relu(Relu::default()), inputs: vec![off_zero_tensor(&s, 1e-3, r)] })
        }),
        ("dropout", |r| {
            let s = nhwc(r);
            Ok(Case { layer: Layer::Dropout(Dropout::new(0.3)?), inputs: vec![normal_tensor(&s, r)] })
        }),
        ("concat", |r| {
            let [n, h, w, _] = nhwc(r);
            let inputs = (0..dim(r, 2, 4)).map(|_| normal_tensor(&[n, h, w, dim(r, 1, 3)], r)).collect();
            Ok(Case { layer: Layer::Concat(Concat::default()), inputs })
        }),
        ("add", |r| {
            let s = nhwc(r);
            let inputs = (0..dim(r, 2, 3)).map(|_| normal_tensor(&s, r)).collect();
            Ok(Case { layer: Layer::Add(Add::default()), inputs })
        }),
        ("global_avg_pool", |r| {
            let s = nhwc(r);
            Ok(Case { layer: Layer::GlobalAvgPool(GlobalAvgPool::default()), inputs: vec![normal_tensor(&s, r)] })
        }),
        ("fully_connected", |r| {
            let (n, din, dout) = (dim(r, 1, 4), dim(r, 1, 6), dim(r, 1, 5));
            let mut fc = FullyConnected::new(din, dout, r)?;
            fc.set_weight(normal_tensor(&[din, dout], r), normal_tensor(&[dout], r))?;
            Ok(Case { layer: Layer::FullyConnected(fc), inputs: vec![normal_tensor(&[n, din], r)] })
        }),
        ("softmax_output", |r| {
            let (n, k) = (dim(r, 1, 4), dim(r, 2, 5));
            Ok(Case { layer: Layer::SoftmaxOutput(SoftmaxOutput), inputs: vec![normal_tensor(&[n, k], r)] })
        }),
    ]
}

/// Scalar objective of a layer case: `Σ w·y`, except for the softmax output
/// whose backward expects the gradient of cross-entropy with respect to
/// its logits, so the objective is the cross-entropy itself.
fn objective(case: &Case, w: &Tensor<f64>, labels: &[usize], rng_seed: u64) -> Result<f64> {
    let mut layer = case.layer.clone();
    let refs: Vec<&Tensor<f64>> = case.inputs.iter().collect();
    let y = layer.forward(&refs, Mode::Train, &mut Rng::new(rng_seed))?;
    if let Layer::SoftmaxOutput(_) = layer {
        return Ok(softmax_cross_entropy(&case.inputs[0], labels)?.loss);
    }
    Ok(y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
}

fn sample_coords(len: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= COORDS_PER_TENSOR {
        return (0..len).collect();
    }
    (0..COORDS_PER_TENSOR).map(|_| rng.below(len)).collect()
}

struct Tally {
    coordinates: usize,
    max_rel: f64,
}

impl Tally {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.coordinates += 1;
        let e = relative_error(analytic, numeric);
        // NaN must fail the check rather than vanish in `max`.
        self.max_rel = if e.is_nan() { f64::INFINITY } else { self.max_rel.max(e) };
    }
}

fn check_case(case: Case, h: f64, rng: &mut Rng, tally: &mut Tally) -> Result<()> {
    let mask_seed = rng.below(1 << 30) as u64;
    let mut layer = case.layer.clone();
    let refs: Vec<&Tensor<f64>> = case.inputs.iter().collect();
    let y = layer.forward(&refs, Mode::Train, &mut Rng::new(mask_seed))?;
    let (w, labels, upstream) = if let Layer::SoftmaxOutput(_) = layer {
        let k = y.shape()[1];
        let labels: Vec<usize> = (0..y.shape()[0]).map(|_| rng.below(k)).collect();
        let grad = softmax_cross_entropy(&case.inputs[0], &labels)?.grad_logits;
        (Tensor::zeros(y.shape()), labels, grad)
    } else {
        let w = normal_tensor(y.shape(), rng);
        (w.clone(), Vec::new(), w)
    };
    let input_grads = layer.backward(&upstream, true)?;
    if input_grads.len() != case.inputs.len() {
        return Err(Error::InvalidConfig(format!(
            "backward returned {} input gradients for {} inputs",
            input_grads.len(),
            case.inputs.len()
        )));
    }

    for (i, grad) in input_grads.iter().enumerate() {
        for c in sample_coords(grad.numel(), rng) {
            let mut probe = Case { layer: case.layer.clone(), inputs: case.inputs.clone() };
            probe.inputs[i].data_mut()[c] += h;
            let plus = objective(&probe, &w, &labels, mask_seed)?;
            probe.inputs[i].data_mut()[c] -= 2.0 * h;
            let minus = objective(&probe, &w, &labels, mask_seed)?;
            tally.record(grad.data()[c], (plus - minus) / (2.0 * h));
        }
    }

    let params: Vec<(usize, Tensor<f64>)> = layer
        .params()
        .into_iter()
        .enumerate()
        .filter(|(_, (_, p))| p.role == ParamRole::Learnable)
        .map(|(j, (name, p))| {
            p.grad.clone().map(|g| (j, g)).ok_or_else(|| Error::InvalidConfig(format!("no gradient for {name}")))
        })
        .collect::<Result<_>>()?;
    for (j, grad) in params {
        for c in sample_coords(grad.numel(), rng) {
            let mut probe = Case { layer: case.layer.clone(), inputs: case.inputs.clone() };
            let nudge = |probe: &mut Case, d: f64| probe.layer.params_mut()[j].1.value.data_mut()[c] += d;
            nudge(&mut probe, h);
            let plus = objective(&probe, &w, &labels, mask_seed)?;
            nudge(&mut probe, -2.0 * h);
            let minus = objective(&probe, &w, &labels, mask_seed)?;
            tally.record(grad.data()[c], (plus - minus) / (2.0 * h));
        }
    }
    Ok(())
}

/// Finite-difference check of every layer primitive.
pub fn check_layers(config: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let base = Rng::new(config.seed);
    let mut out = Vec::new();
    for (k, (name, make)) in layer_cases().into_iter().enumerate() {
        let mut tally = Tally { coordinates: 0, max_rel: 0.0 };
        for trial in 0..config.trials {
            let mut rng = base.fork(((k as u64) << 32) | trial as u64);
            let case = make(&mut rng)?;
            check_case(case, config.step, &mut rng, &mut tally)?;
        }
        out.push(CheckResult {
            name: name.into(),
            trials: config.trials,
            coordinates: tally.coordinates,
            max_rel_error: tally.max_rel,
            tolerance: config.layer_tolerance,
            passed: tally.max_rel < config.layer_tolerance,
        });
    }
    Ok(out)
}

/// End-to-end check on a reduced MedNet (16×16 input, narrow channels) with
/// batch statistics and a fixed dropout mask.
pub fn check_network(config: &GradCheckConfig) -> Result<CheckResult> {
    let base = Rng::new(config.seed).fork(u64::MAX);
    let cfg = MedNetConfig { dropout_rate: 0.25, ..MedNetConfig::tiny(Variant::Gray, 3) };
    let mut graph = ModelGraph::<f64>::assemble(&cfg, &mut base.fork(0))?;
    let mut rng = base.fork(1);
    let batch = 4;
    let x = normal_tensor(&[batch, cfg.input_h, cfg.input_w, cfg.input_channels], &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(cfg.num_classes)).collect();
    let mask_seed = 17;

    let loss_at = |g: &mut ModelGraph<f64>| -> Result<f64> {
        let out = g.forward(&x, &mut Rng::new(mask_seed))?;
        g.clear();
        Ok(softmax_cross_entropy(&out.logits, &labels)?.loss)
    };

    graph.set_mode(Mode::Train);
    let out = graph.forward(&x, &mut Rng::new(mask_seed))?;
    let step = softmax_cross_entropy(&out.logits, &labels)?;
    graph.zero_grads();
    graph.backward(&step.grad_logits)?;
    let mut analytic = Vec::new();
    graph.for_each_trainable(|name, p| {
        if let Some(g) = &p.grad {
            analytic.push((name.to_string(), g.clone()));
        }
    });
    graph.clear();

    let mut tally = Tally { coordinates: 0, max_rel: 0.0 };
    for _ in 0..config.network_coordinates {
        let (name, grad) = &analytic[rng.below(analytic.len())];
        let c = rng.below(grad.numel());
        let mut probe = graph.clone();
        probe.param_mut(name).unwrap().value.data_mut()[c] += config.step;
        let plus = loss_at(&mut probe)?;
        probe.param_mut(name).unwrap().value.data_mut()[c] -= 2.0 * config.step;
        let minus = loss_at(&mut probe)?;
        tally.record(grad.data()[c], (plus - minus) / (2.0 * config.step));
    }
    Ok(CheckResult {
        name: "mednet (reduced, end to end)".into(),
        trials: 1,
        coordinates: tally.coordinates,
        max_rel_error: tally.max_rel,
        tolerance: config.network_tolerance,
        passed: tally.max_rel < config.network_tolerance,
    })
}

/// Every layer check followed by the network check.
pub fn run_suite(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut results = check_layers(config)?;
    results.push(check_network(config)?);
    Ok(GradCheckReport { config: config.clone(), results })
}
