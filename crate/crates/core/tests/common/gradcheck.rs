//! Central finite-difference checks of every backward pass and of both
//! composed training losses.

use std::sync::Arc;

use pfedes_core::model::{GradMode, Layer, Model, ModelSpec};
use pfedes_core::ops::{self, PaddingMode};
use pfedes_core::protocol::{extractor_loss_and_grad, model_loss_and_grad};
use pfedes_core::{build_cnn, build_extractor, ImageShape, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor: gradients below this are compared absolutely at
/// `REL_TOL * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-5;
pub const INSTANCES: usize = 20;
/// Share of checked entries allowed to straddle a ReLU kink or max-pool tie.
pub const MAX_KINK_SHARE: f64 = 0.02;
/// One-sided differences carry an O(STEP) truncation error.
const ONE_SIDED_TOL: f64 = 1e-3;
/// Coordinates sampled per instance for models too big to check exhaustively.
const SAMPLED_COORDS: usize = 40;

#[derive(Debug, Clone, Default)]
pub struct Check {
    pub name: &'static str,
    pub instances: usize,
    pub entries: usize,
    pub kinks: usize,
    pub failures: usize,
    pub worst: f64,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            ..Self::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
            && self.instances >= INSTANCES
            && (self.kinks as f64) <= MAX_KINK_SHARE * self.entries as f64
    }

    /// Compares `analytic[i]` with a central difference of `f` at every `i` in `coords`.
    fn compare(&mut self, x: &[f64], analytic: &[f64], coords: &[usize], f: impl Fn(&[f64]) -> f64) {
        let mut probe = x.to_vec();
        let f0 = f(x);
        for &i in coords {
            probe[i] = x[i] + STEP;
            let up = f(&probe);
            probe[i] = x[i] - STEP;
            let down = f(&probe);
            probe[i] = x[i];
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            self.entries += 1;
            if err <= REL_TOL {
                self.worst = self.worst.max(err);
                continue;
            }
            // A ReLU kink or pool tie inside the probe interval: the one-sided
            // slopes disagree and the analytic value is one of them.
            let (fwd, bwd) = ((up - f0) / STEP, (f0 - down) / STEP);
            let close = |s: f64| (a - s).abs() <= ONE_SIDED_TOL * a.abs().max(s.abs()).max(REL_FLOOR);
            if !close_rel(fwd, bwd) && (close(fwd) || close(bwd)) {
                self.kinks += 1;
            } else {
                self.failures += 1;
                if std::env::var("GRADCHECK_DEBUG").is_ok() {
                    eprintln!("{} coord {i}: analytic {a:e} numeric {numeric:e} fwd {fwd:e} bwd {bwd:e}", self.name);
                }
                self.worst = self.worst.max(err);
            }
        }
        self.instances += 1;
    }

    fn compare_all(&mut self, x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) {
        let coords: Vec<usize> = (0..x.len()).collect();
        self.compare(x, analytic, &coords, f);
    }
}

fn close_rel(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL_TOL * a.abs().max(b.abs()).max(REL_FLOOR)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn with(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), data.to_vec()).unwrap()
}

/// Scalar probe `Σ y ⊙ r` whose gradient w.r.t. `y` is `r`.
fn dot(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub fn conv(mode: PaddingMode, seed: u64) -> Check {
    let mut check = Check::new(match mode {
        PaddingMode::Valid => "conv2d (valid)",
        PaddingMode::Same => "conv2d (same)",
    });
    let mut r = rng(seed);
    for _ in 0..INSTANCES {
        let (ci, co, k) = (r.random_range(1..=3), r.random_range(1..=3), [1, 3, 5][r.random_range(0..3)]);
        let (h, w) = (r.random_range(k..=k + 3), r.random_range(k..=k + 3));
        let batch = r.random_range(1..=2);
        let x = random(&mut r, &[batch, ci, h, w]);
        let kernel = random(&mut r, &[co, ci, k, k]);
        let bias = random(&mut r, &[co]);
        let y = ops::conv2d_forward(&x, &kernel, &bias, mode).unwrap();
        let up = random(&mut r, y.shape());
        let g = ops::conv2d_backward(&x, &kernel, mode, &up).unwrap();
        let loss = |x: &Tensor, k: &Tensor, b: &Tensor| dot(&ops::conv2d_forward(x, k, b, mode).unwrap(), &up);
        check.compare_all(x.data(), g.input_grad.data(), |v| loss(&with(&x, v), &kernel, &bias));
        check.compare_all(kernel.data(), g.param_grad.data(), |v| loss(&x, &with(&kernel, v), &bias));
        check.compare_all(bias.data(), g.bias_grad.data(), |v| loss(&x, &kernel, &with(&bias, v)));
        check.instances -= 2;
    }
    check
}

pub fn linear(seed: u64) -> Check {
    let mut check = Check::new("linear");
    let mut r = rng(seed);
    for _ in 0..INSTANCES {
        let (batch, d_in, d_out) = (r.random_range(1..=4), r.random_range(1..=12), r.random_range(1..=6));
        let x = random(&mut r, &[batch, d_in]);
        let w = random(&mut r, &[d_out, d_in]);
        let b = random(&mut r, &[d_out]);
        let up = random(&mut r, &[batch, d_out]);
        let g = ops::linear_backward(&x, &w, &up).unwrap();
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&ops::linear_forward(x, w, b).unwrap(), &up);
        check.compare_all(x.data(), g.input_grad.data(), |v| loss(&with(&x, v), &w, &b));
        check.compare_all(w.data(), g.param_grad.data(), |v| loss(&x, &with(&w, v), &b));
        check.compare_all(b.data(), g.bias_grad.data(), |v| loss(&x, &w, &with(&b, v)));
        check.instances -= 2;
    }
    check
}

pub fn maxpool(seed: u64) -> Check {
    let mut check = Check::new("maxpool2d");
    let mut r = rng(seed);
    for _ in 0..INSTANCES {
        let shape = [r.random_range(1..=2), r.random_range(1..=3), 2 * r.random_range(1..=3), 2 * r.random_range(1..=3)];
        let x = random(&mut r, &shape);
        let (y, idx) = ops::maxpool2d_forward(&x).unwrap();
        let up = random(&mut r, y.shape());
        let g = ops::maxpool2d_backward(&idx, &up).unwrap();
        check.compare_all(x.data(), g.data(), |v| dot(&ops::maxpool2d_forward(&with(&x, v)).unwrap().0, &up));
    }
    check
}

pub fn relu(seed: u64) -> Check {
    let mut check = Check::new("relu");
    let mut r = rng(seed);
    for _ in 0..INSTANCES {
        let shape = [r.random_range(1..=3), r.random_range(1..=8)];
        let x = random(&mut r, &shape);
        let up = random(&mut r, x.shape());
        let g = ops::relu_backward(&x, &up).unwrap();
        check.compare_all(x.data(), g.data(), |v| dot(&ops::relu_forward(&with(&x, v)), &up));
    }
    check
}

pub fn cross_entropy(seed: u64) -> Check {
    let mut check = Check::new("softmax cross-entropy");
    let mut r = rng(seed);
    for _ in 0..INSTANCES {
        let (batch, classes) = (r.random_range(1..=4), r.random_range(2..=10));
        let logits = Tensor::from_fn(vec![batch, classes], |_| r.random_range(-4.0..4.0));
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
        let (_, g) = ops::softmax_cross_entropy_batch(&logits, &labels).unwrap();
        check.compare_all(logits.data(), g.data(), |v| {
            ops::softmax_cross_entropy_batch(&with(&logits, v), &labels).unwrap().0
        });
    }
    check
}

fn small_cnn(r: &mut ChaCha8Rng, shape: ImageShape, classes: usize) -> ModelSpec {
    let layers = vec![
        Layer::Conv { kernel: 3, out_channels: r.random_range(2..=3), padding: PaddingMode::Valid },
        Layer::Relu,
        Layer::MaxPool,
        Layer::Linear { out_features: r.random_range(4..=8) },
        Layer::Relu,
        Layer::Linear { out_features: classes },
    ];
    ModelSpec::new(layers, shape, Some(classes)).unwrap()
}

fn batch(r: &mut ChaCha8Rng, size: usize, shape: ImageShape, classes: usize) -> (Tensor, Vec<usize>) {
    let [c, h, w] = shape.dims();
    let x = Tensor::from_fn(vec![size, c, h, w], |_| r.random_range(0.0..1.0));
    (x, (0..size).map(|_| r.random_range(0..classes)).collect())
}

fn model_with(m: &Model, v: &[f64]) -> Model {
    Model::new(m.spec().clone(), ParamSet::new(m.params().manifest().clone(), v.to_vec()).unwrap()).unwrap()
}

/// Full model backward: CE loss w.r.t. every parameter and the input.
pub fn model_backward(seed: u64) -> Check {
    let mut check = Check::new("model backward (CE)");
    let mut r = rng(seed);
    for i in 0..INSTANCES {
        let shape = ImageShape::new(r.random_range(1..=2), 6, 6);
        let classes = r.random_range(2..=4);
        let spec = Arc::new(small_cnn(&mut r, shape, classes));
        let model = Model::init(spec, seed ^ i as u64);
        let (x, labels) = batch(&mut r, 3, shape, classes);
        let (logits, trace) = model.forward_traced(&x).unwrap();
        let (_, up) = ops::softmax_cross_entropy_batch(&logits, &labels).unwrap();
        let (grads, dx) = model.backward(&trace, up, GradMode::Full).unwrap();
        let loss = |m: &Model, x: &Tensor| ops::softmax_cross_entropy_batch(&m.forward(x).unwrap(), &labels).unwrap().0;
        check.compare_all(model.params().values(), grads.unwrap().values(), |v| loss(&model_with(&model, v), &x));
        check.compare_all(x.data(), dx.data(), |v| loss(&model, &with(&x, v)));
        check.instances -= 1;
    }
    check
}

/// Zoo CNN at 1×16×16, sampled coordinates.
pub fn zoo_backward(seed: u64) -> Check {
    let mut check = Check::new("zoo CNN backward (sampled)");
    let mut r = rng(seed);
    let shape = ImageShape::new(1, 16, 16);
    for i in 0..INSTANCES {
        let variant = (i % 5) as u8 + 1;
        let spec = Arc::new(build_cnn(variant, 10, shape).unwrap());
        let model = Model::init(spec, seed ^ i as u64);
        let (x, labels) = batch(&mut r, 2, shape, 10);
        let (logits, trace) = model.forward_traced(&x).unwrap();
        let (_, up) = ops::softmax_cross_entropy_batch(&logits, &labels).unwrap();
        let (grads, _) = model.backward(&trace, up, GradMode::Full).unwrap();
        let coords = sampled_coords(&mut r, &model);
        check.compare(model.params().values(), grads.unwrap().values(), &coords, |v| {
            ops::softmax_cross_entropy_batch(&model_with(&model, v).forward(&x).unwrap(), &labels)
                .unwrap()
                .0
        });
    }
    check
}

/// Picks coordinates from every parameter tensor so no layer goes unchecked.
fn sampled_coords(r: &mut ChaCha8Rng, model: &Model) -> Vec<usize> {
    let manifest = model.params().manifest();
    let entries = manifest.entries().len();
    (0..SAMPLED_COORDS)
        .map(|j| manifest.range(j % entries))
        .map(|range| r.random_range(range))
        .collect()
}

/// Model-training loss `mu·CE(F(G(x))) + (1-mu)·CE(F(x))` w.r.t. the model,
/// extractor frozen.
pub fn model_phase_loss(seed: u64) -> Check {
    let mut check = Check::new("model-phase loss (w.r.t. model)");
    let mut r = rng(seed);
    for i in 0..INSTANCES {
        let shape = ImageShape::new(r.random_range(1..=3), 6, 6);
        let classes = r.random_range(2..=4);
        let model = Model::init(Arc::new(small_cnn(&mut r, shape, classes)), seed ^ i as u64);
        let extractor = Model::init(Arc::new(build_extractor(shape)), !seed ^ i as u64);
        let mu = r.random_range(0.05..=0.5);
        let (x, labels) = batch(&mut r, 3, shape, classes);
        let step = model_loss_and_grad(&model, &extractor, &x, &labels, mu).unwrap();
        check.compare_all(model.params().values(), step.grads.values(), |v| {
            model_loss_and_grad(&model_with(&model, v), &extractor, &x, &labels, mu).unwrap().loss
        });
    }
    check
}

/// Extractor-training loss `CE(F(G(x)))` w.r.t. the extractor, model frozen.
pub fn extractor_phase_loss(seed: u64) -> Check {
    let mut check = Check::new("extractor-phase loss (w.r.t. extractor)");
    let mut r = rng(seed);
    for i in 0..INSTANCES {
        let shape = ImageShape::new(r.random_range(1..=3), 6, 6);
        let classes = r.random_range(2..=4);
        let model = Model::init(Arc::new(small_cnn(&mut r, shape, classes)), seed ^ i as u64);
        let extractor = Model::init(Arc::new(build_extractor(shape)), !seed ^ i as u64);
        let (x, labels) = batch(&mut r, 3, shape, classes);
        let step = extractor_loss_and_grad(&model, &extractor, &x, &labels).unwrap();
        check.compare_all(extractor.params().values(), step.grads.values(), |v| {
            extractor_loss_and_grad(&model, &model_with(&extractor, v), &x, &labels).unwrap().loss
        });
    }
    check
}

pub fn all(seed: u64) -> Vec<Check> {
    vec![
        conv(PaddingMode::Valid, seed),
        conv(PaddingMode::Same, seed + 1),
        linear(seed + 2),
        maxpool(seed + 3),
        relu(seed + 4),
        cross_entropy(seed + 5),
        model_backward(seed + 6),
        zoo_backward(seed + 7),
        model_phase_loss(seed + 8),
        extractor_phase_loss(seed + 9),
    ]
}
