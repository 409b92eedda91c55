//! Minimal feed-forward network core: 1-D convolutions over time, leaky ReLU,
//! global temporal max-pooling, dense layers, dropout, additive Gaussian
//! noise, and sigmoid outputs, with exact reverse-mode gradients.
//!
//! The network maps a variable-length feature sequence (T x D) to a
//! fixed-length vector of per-keyword detection probabilities: the global
//! max-pool takes the per-channel maximum over time, so the output dimension
//! does not depend on the input length.

mod adam;
mod model_io;

pub use adam::{AdamState, LrSchedule};
pub use model_io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};

use ndarray::{Array1, Array2, ArrayD, ArrayView2, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::FormatError;
use crate::scalar::Real;

/// Clamp bound for sigmoid outputs and cross-entropy terms.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has {got} frames but the conv stack needs at least {min}")]
    InputTooShort { min: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("activation cache is stale: model revision {model} != cache revision {cache}")]
    StaleActivations { model: u64, cache: u64 },
    #[error("invalid layer stack: {0}")]
    InvalidSpec(String),
    #[error("model dtype is {found} bytes per scalar, expected {expected}")]
    DtypeMismatch { found: usize, expected: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// One layer of the network. Hyperparameters only; weights live in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    LeakyRelu {
        alpha: f64,
    },
    GlobalMaxPoolTime,
    Dense {
        units: usize,
    },
    Dropout {
        p: f64,
    },
    GaussianNoise {
        sigma: f64,
    },
    Sigmoid,
}

/// Weight/bias pair of a parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: ArrayD<T>,
    pub bias: Array1<T>,
}

/// Value flowing between layers: a time x channels map before the global
/// pool, a flat vector after it.
#[derive(Debug, Clone)]
pub enum StageValue<T> {
    Time(Array2<T>),
    Flat(Array1<T>),
}

impl<T: Real> StageValue<T> {
    fn map(&self, mut f: impl FnMut(T) -> T) -> StageValue<T> {
        match self {
            StageValue::Time(a) => StageValue::Time(a.map(|v| f(*v))),
            StageValue::Flat(a) => StageValue::Flat(a.map(|v| f(*v))),
        }
    }

    fn zip_map(&self, other: &StageValue<T>, f: impl Fn(T, T) -> T) -> StageValue<T> {
        match (self, other) {
            (StageValue::Time(a), StageValue::Time(b)) => {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, y| *x = f(*x, *y));
                StageValue::Time(out)
            }
            (StageValue::Flat(a), StageValue::Flat(b)) => {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, y| *x = f(*x, *y));
                StageValue::Flat(out)
            }
            _ => unreachable!("stage shapes validated at construction"),
        }
    }
}

/// Per-layer state recorded during a training-mode forward pass.
#[derive(Debug, Clone)]
enum LayerRecord<T> {
    None,
    /// Argmax time index per channel for the global max-pool.
    PoolArgmax(Vec<usize>),
    /// Multiplier applied by dropout (0 or 1/(1-p)) per element.
    DropoutMask(StageValue<T>),
}

/// Cached activations from a training-mode forward pass, consumed by
/// [`CnnModel::backward`].
pub struct TrainCache<T> {
    revision: u64,
    /// Input to each layer, in layer order.
    inputs: Vec<StageValue<T>>,
    records: Vec<LayerRecord<T>>,
    output: Array1<T>,
}

impl<T: Real> TrainCache<T> {
    pub fn output(&self) -> &Array1<T> {
        &self.output
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The convolutional keyword spotter: an ordered layer stack plus its
/// parameter tensors.
#[derive(Debug, Clone)]
pub struct CnnModel<T> {
    input_dim: usize,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams<T>>>,
    rng_seed: u64,
    revision: u64,
    min_input_len: usize,
    output_len: usize,
}

/// Shape of the value between layers during validation.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    Time(usize),
    Flat(usize),
}

fn validate_stack(input_dim: usize, layers: &[LayerSpec]) -> Result<(Stage, usize), NnError> {
    if input_dim == 0 {
        return Err(NnError::InvalidSpec("input dimension must be >= 1".into()));
    }
    let mut stage = Stage::Time(input_dim);
    let mut pools = 0usize;
    for (i, layer) in layers.iter().enumerate() {
        stage = match (layer, stage) {
            (LayerSpec::Conv1d { filters, kernel, stride }, Stage::Time(_)) => {
                if *filters == 0 || *kernel == 0 || *stride == 0 {
                    return Err(NnError::InvalidSpec(format!(
                        "layer {i}: conv1d needs filters, kernel, stride >= 1"
                    )));
                }
                Stage::Time(*filters)
            }
            (LayerSpec::Conv1d { .. }, Stage::Flat(_)) => {
                return Err(NnError::InvalidSpec(format!(
                    "layer {i}: conv1d after the global pool"
                )))
            }
            (LayerSpec::GlobalMaxPoolTime, Stage::Time(c)) => {
                pools += 1;
                Stage::Flat(c)
            }
            (LayerSpec::GlobalMaxPoolTime, Stage::Flat(_)) => {
                return Err(NnError::InvalidSpec(format!(
                    "layer {i}: second global pool"
                )))
            }
            (LayerSpec::Dense { units }, Stage::Flat(_)) => {
                if *units == 0 {
                    return Err(NnError::InvalidSpec(format!(
                        "layer {i}: dense needs units >= 1"
                    )));
                }
                Stage::Flat(*units)
            }
            (LayerSpec::Dense { .. }, Stage::Time(_)) => {
                return Err(NnError::InvalidSpec(format!(
                    "layer {i}: dense before the global pool"
                )))
            }
            (LayerSpec::LeakyRelu { alpha }, s) => {
                if !alpha.is_finite() {
                    return Err(NnError::InvalidSpec(format!(
                        "layer {i}: non-finite leak"
                    )));
                }
                s
            }
            (LayerSpec::Dropout { p }, s) => {
                if !(0.0..1.0).contains(p) {
                    return Err(NnError::InvalidSpec(format!(
                        "layer {i}: dropout p must be in [0, 1)"
                    )));
                }
                s
            }
            (LayerSpec::GaussianNoise { sigma }, s) => {
                if !(*sigma >= 0.0) {
                    return Err(NnError::InvalidSpec(format!(
                        "layer {i}: noise sigma must be >= 0"
                    )));
                }
                s
            }
            (LayerSpec::Sigmoid, Stage::Flat(u)) => {
                if i + 1 != layers.len() {
                    return Err(NnError::InvalidSpec(format!(
                        "layer {i}: sigmoid must be the final layer"
                    )));
                }
                Stage::Flat(u)
            }
            (LayerSpec::Sigmoid, Stage::Time(_)) => {
                return Err(NnError::InvalidSpec(format!(
                    "layer {i}: sigmoid before the global pool"
                )))
            }
        };
    }
    if pools != 1 {
        return Err(NnError::InvalidSpec(format!(
            "need exactly one global max-pool, found {pools}"
        )));
    }
    if !matches!(layers.last(), Some(LayerSpec::Sigmoid)) {
        return Err(NnError::InvalidSpec("final layer must be sigmoid".into()));
    }
    // Minimum input length so that every conv output has >= 1 frame.
    let mut min_len = 1usize;
    for layer in layers.iter().rev() {
        if let LayerSpec::Conv1d { kernel, stride, .. } = layer {
            min_len = (min_len - 1) * stride + kernel;
        }
    }
    Ok((stage, min_len))
}

impl<T: Real> CnnModel<T> {
    /// Build a model with fan-in-scaled uniform weight initialization
    /// (Kaiming bound with the leaky-ReLU gain, so activation magnitudes
    /// survive deep stacks), deterministic in `seed`.
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>, seed: u64) -> Result<Self, NnError> {
        let (out_stage, min_input_len) = validate_stack(input_dim, &layers)?;
        let output_len = match out_stage {
            Stage::Flat(u) => u,
            Stage::Time(_) => unreachable!("validated"),
        };
        // gain = 2 / (1 + alpha^2) for the default leak of 1/3.
        let uniform_bound = |fan_in: usize| {
            let gain = 2.0 / (1.0 + (1.0f64 / 3.0).powi(2));
            (3.0 * gain / fan_in as f64).sqrt()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.len());
        let mut stage = Stage::Time(input_dim);
        for layer in &layers {
            let p = match (layer, stage) {
                (LayerSpec::Conv1d { filters, kernel, .. }, Stage::Time(c_in)) => {
                    let bound = uniform_bound(kernel * c_in);
                    let weights = ArrayD::from_shape_fn(
                        IxDyn(&[*filters, *kernel, c_in]),
                        |_| T::from_f64_c(rng.random_range(-bound..bound)),
                    );
                    let bias = Array1::from_elem(*filters, T::zero());
                    stage = Stage::Time(*filters);
                    Some(LayerParams { weights, bias })
                }
                (LayerSpec::Dense { units }, Stage::Flat(c_in)) => {
                    let bound = uniform_bound(c_in);
                    let weights = ArrayD::from_shape_fn(IxDyn(&[*units, c_in]), |_| {
                        T::from_f64_c(rng.random_range(-bound..bound))
                    });
                    let bias = Array1::from_elem(*units, T::zero());
                    stage = Stage::Flat(*units);
                    Some(LayerParams { weights, bias })
                }
                (LayerSpec::GlobalMaxPoolTime, Stage::Time(c)) => {
                    stage = Stage::Flat(c);
                    None
                }
                _ => None,
            };
            params.push(p);
        }
        Ok(Self {
            input_dim,
            layers,
            params,
            rng_seed: seed,
            revision: 0,
            min_input_len,
            output_len,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    /// Shortest input (in frames) the conv stack accepts.
    pub fn min_input_len(&self) -> usize {
        self.min_input_len
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<LayerParams<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams<T>>] {
        &mut self.params
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub(crate) fn bump_revision(&mut self) {
        self.revision += 1;
    }

    pub(crate) fn set_state(&mut self, rng_seed: u64, revision: u64) {
        self.rng_seed = rng_seed;
        self.revision = revision;
    }

    /// Reassemble a model from stored layers and parameter tensors,
    /// revalidating the stack and every tensor shape.
    pub(crate) fn from_parts(
        input_dim: usize,
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams<T>>>,
    ) -> Result<Self, NnError> {
        let reference = Self::new(input_dim, layers, 0)?;
        if params.len() != reference.params.len() {
            return Err(NnError::InvalidSpec(format!(
                "expected {} parameter slots, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (i, (got, want)) in params.iter().zip(&reference.params).enumerate() {
            match (got, want) {
                (Some(g), Some(w)) => {
                    if g.weights.shape() != w.weights.shape() || g.bias.len() != w.bias.len() {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {i}: stored tensor shape {:?} does not match spec {:?}",
                            g.weights.shape(),
                            w.weights.shape()
                        )));
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(NnError::InvalidSpec(format!(
                        "layer {i}: parameter presence does not match spec"
                    )))
                }
            }
        }
        Ok(Self {
            params,
            ..reference
        })
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }

    fn check_input(&self, input: &ArrayView2<T>) -> Result<(), NnError> {
        if input.ncols() != self.input_dim {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim,
                got: input.ncols(),
                context: "input feature dimension".into(),
            });
        }
        if input.nrows() < self.min_input_len {
            return Err(NnError::InputTooShort {
                min: self.min_input_len,
                got: input.nrows(),
            });
        }
        Ok(())
    }

    /// Deterministic inference: dropout and noise disabled.
    pub fn predict(&self, input: ArrayView2<T>) -> Result<Array1<T>, NnError> {
        self.check_input(&input)?;
        let (out, _) = self.run(input, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0), false);
        Ok(out)
    }

    /// Training-mode forward pass with recorded activations, dropout masks
    /// and noise draws.
    pub fn forward_train<R: Rng>(
        &self,
        input: ArrayView2<T>,
        rng: &mut R,
    ) -> Result<(Array1<T>, TrainCache<T>), NnError> {
        self.check_input(&input)?;
        let (out, cache) = self.run(input, Mode::Train, rng, true);
        Ok((out, cache.expect("cache requested")))
    }

    fn run<R: Rng>(
        &self,
        input: ArrayView2<T>,
        mode: Mode,
        rng: &mut R,
        record: bool,
    ) -> (Array1<T>, Option<TrainCache<T>>) {
        let mut value = StageValue::Time(input.to_owned());
        let mut inputs = Vec::new();
        let mut records = Vec::new();
        for (layer, params) in self.layers.iter().zip(&self.params) {
            if record {
                inputs.push(value.clone());
            }
            let mut rec = LayerRecord::None;
            value = match layer {
                LayerSpec::Conv1d { stride, .. } => {
                    let p = params.as_ref().expect("conv has params");
                    let StageValue::Time(x) = &value else { unreachable!() };
                    StageValue::Time(conv1d_forward(x, p, *stride))
                }
                LayerSpec::LeakyRelu { alpha } => {
                    let a = T::from_f64_c(*alpha);
                    value.map(|v| if v >= T::zero() { v } else { a * v })
                }
                LayerSpec::GlobalMaxPoolTime => {
                    let StageValue::Time(x) = &value else { unreachable!() };
                    let (pooled, argmax) = global_max_pool(x);
                    rec = LayerRecord::PoolArgmax(argmax);
                    StageValue::Flat(pooled)
                }
                LayerSpec::Dense { .. } => {
                    let p = params.as_ref().expect("dense has params");
                    let StageValue::Flat(x) = &value else { unreachable!() };
                    StageValue::Flat(dense_forward(x, p))
                }
                LayerSpec::Dropout { p } => {
                    if mode == Mode::Eval {
                        value
                    } else {
                        let keep_scale = T::from_f64_c(1.0 / (1.0 - p));
                        let mask = value.map(|_| {
                            if rng.random::<f64>() < *p {
                                T::zero()
                            } else {
                                keep_scale
                            }
                        });
                        let out = value.zip_map(&mask, |v, m| v * m);
                        rec = LayerRecord::DropoutMask(mask);
                        out
                    }
                }
                LayerSpec::GaussianNoise { sigma } => {
                    if mode == Mode::Eval || *sigma == 0.0 {
                        value
                    } else {
                        let s = *sigma;
                        value.map(|v| {
                            let draw: f64 = rng.sample(rand_distr::StandardNormal);
                            v + T::from_f64_c(draw * s)
                        })
                    }
                }
                LayerSpec::Sigmoid => value.map(sigmoid_clamped),
            };
            if record {
                records.push(rec);
            }
        }
        let StageValue::Flat(output) = value else {
            unreachable!("stack validated to end flat")
        };
        let cache = record.then(|| TrainCache {
            revision: self.revision,
            inputs,
            records,
            output: output.clone(),
        });
        (output, cache)
    }

    /// Reverse-mode gradients of the summed binary cross-entropy between the
    /// cached prediction and `targets`, for every parameter tensor.
    pub fn backward(&self, cache: &TrainCache<T>, targets: &[T]) -> Result<Gradients<T>, NnError> {
        if cache.revision != self.revision {
            return Err(NnError::StaleActivations {
                model: self.revision,
                cache: cache.revision,
            });
        }
        if targets.len() != self.output_len {
            return Err(NnError::DimensionMismatch {
                expected: self.output_len,
                got: targets.len(),
                context: "target vector".into(),
            });
        }
        let mut grads: Vec<Option<LayerParams<T>>> = self
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| LayerParams {
                    weights: ArrayD::zeros(p.weights.raw_dim()),
                    bias: Array1::from_elem(p.bias.len(), T::zero()),
                })
            })
            .collect();

        // d(loss)/d(prediction) for the clamped cross-entropy.
        let lo = T::from_f64_c(PROB_EPSILON);
        let hi = T::one() - lo;
        let mut grad = StageValue::Flat(Array1::from_shape_fn(self.output_len, |j| {
            let p = cache.output[j];
            if p <= lo || p >= hi {
                T::zero()
            } else {
                let y = targets[j];
                -y / p + (T::one() - y) / (T::one() - p)
            }
        }));

        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[idx];
            let record = &cache.records[idx];
            grad = match layer {
                LayerSpec::Sigmoid => {
                    // Recompute the clamped output from the cached input.
                    let StageValue::Flat(x) = input else { unreachable!() };
                    let StageValue::Flat(g) = &grad else { unreachable!() };
                    let out = Array1::from_shape_fn(x.len(), |j| {
                        let s = sigmoid_clamped(x[j]);
                        if s <= lo || s >= hi {
                            T::zero()
                        } else {
                            g[j] * s * (T::one() - s)
                        }
                    });
                    StageValue::Flat(out)
                }
                LayerSpec::LeakyRelu { alpha } => {
                    let a = T::from_f64_c(*alpha);
                    input.zip_map_with_grad(&grad, |x, g| {
                        if x >= T::zero() {
                            g
                        } else {
                            a * g
                        }
                    })
                }
                LayerSpec::Dropout { .. } => match record {
                    LayerRecord::DropoutMask(mask) => grad.zip_map(mask, |g, m| g * m),
                    // Eval-mode cache has no mask; dropout was the identity.
                    LayerRecord::None => grad,
                    _ => unreachable!(),
                },
                LayerSpec::GaussianNoise { .. } => grad,
                LayerSpec::GlobalMaxPoolTime => {
                    let StageValue::Time(x) = input else { unreachable!() };
                    let StageValue::Flat(g) = &grad else { unreachable!() };
                    let LayerRecord::PoolArgmax(argmax) = record else {
                        unreachable!("pool layer records argmax")
                    };
                    let mut gx = Array2::from_elem(x.raw_dim(), T::zero());
                    for (c, &t) in argmax.iter().enumerate() {
                        gx[(t, c)] = g[c];
                    }
                    StageValue::Time(gx)
                }
                LayerSpec::Dense { .. } => {
                    let p = self.params[idx].as_ref().expect("dense has params");
                    let gp = grads[idx].as_mut().expect("dense grad slot");
                    let StageValue::Flat(x) = input else { unreachable!() };
                    let StageValue::Flat(g) = &grad else { unreachable!() };
                    StageValue::Flat(dense_backward(x, g, p, gp))
                }
                LayerSpec::Conv1d { stride, .. } => {
                    let p = self.params[idx].as_ref().expect("conv has params");
                    let gp = grads[idx].as_mut().expect("conv grad slot");
                    let StageValue::Time(x) = input else { unreachable!() };
                    let StageValue::Time(g) = &grad else { unreachable!() };
                    StageValue::Time(conv1d_backward(x, g, p, gp, *stride))
                }
            };
        }
        Ok(Gradients(grads))
    }
}

impl<T: Real> StageValue<T> {
    /// zip over (layer input, gradient) of identical shape.
    fn zip_map_with_grad(&self, grad: &StageValue<T>, f: impl Fn(T, T) -> T) -> StageValue<T> {
        match (self, grad) {
            (StageValue::Time(x), StageValue::Time(g)) => {
                StageValue::Time(Array2::from_shape_fn(x.raw_dim(), |ix| f(x[ix], g[ix])))
            }
            (StageValue::Flat(x), StageValue::Flat(g)) => {
                StageValue::Flat(Array1::from_shape_fn(x.len(), |i| f(x[i], g[i])))
            }
            _ => unreachable!("stage shapes validated at construction"),
        }
    }
}

/// Per-layer parameter gradients, shaped like the model's parameters.
pub struct Gradients<T>(pub Vec<Option<LayerParams<T>>>);

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &CnnModel<T>) -> Self {
        Self(
            model
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weights: ArrayD::zeros(p.weights.raw_dim()),
                        bias: Array1::from_elem(p.bias.len(), T::zero()),
                    })
                })
                .collect(),
        )
    }

    /// Elementwise accumulate (summed-loss semantics over a batch).
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                a.weights.zip_mut_with(&b.weights, |x, y| *x += *y);
                a.bias.zip_mut_with(&b.bias, |x, y| *x += *y);
            }
        }
    }
}

fn sigmoid_clamped<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    let lo = T::from_f64_c(PROB_EPSILON);
    let hi = T::one() - lo;
    s.max(lo).min(hi)
}

fn conv1d_forward<T: Real>(x: &Array2<T>, p: &LayerParams<T>, stride: usize) -> Array2<T> {
    let (t_in, c_in) = x.dim();
    let shape = p.weights.shape();
    let (c_out, kernel) = (shape[0], shape[1]);
    debug_assert_eq!(shape[2], c_in);
    let t_out = (t_in - kernel) / stride + 1;
    let xs = x.as_slice().expect("contiguous");
    let ws = p.weights.as_slice().expect("contiguous");
    let mut out = Array2::from_elem((t_out, c_out), T::zero());
    for i in 0..t_out {
        let x_base = i * stride * c_in;
        for o in 0..c_out {
            let w_base = o * kernel * c_in;
            let mut acc = p.bias[o];
            for k in 0..kernel {
                let xrow = &xs[x_base + k * c_in..x_base + (k + 1) * c_in];
                let wrow = &ws[w_base + k * c_in..w_base + (k + 1) * c_in];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += *xv * *wv;
                }
            }
            out[(i, o)] = acc;
        }
    }
    out
}

fn conv1d_backward<T: Real>(
    x: &Array2<T>,
    g_out: &Array2<T>,
    p: &LayerParams<T>,
    gp: &mut LayerParams<T>,
    stride: usize,
) -> Array2<T> {
    let (_, c_in) = x.dim();
    let shape = p.weights.shape();
    let (c_out, kernel) = (shape[0], shape[1]);
    let t_out = g_out.nrows();
    let mut g_in = Array2::from_elem(x.raw_dim(), T::zero());
    let ws = p.weights.as_slice().expect("contiguous");
    let gws = gp.weights.as_slice_mut().expect("contiguous");
    for i in 0..t_out {
        for o in 0..c_out {
            let g = g_out[(i, o)];
            if g == T::zero() {
                continue;
            }
            gp.bias[o] += g;
            let w_base = o * kernel * c_in;
            for k in 0..kernel {
                let t = i * stride + k;
                for ci in 0..c_in {
                    gws[w_base + k * c_in + ci] += g * x[(t, ci)];
                    g_in[(t, ci)] += g * ws[w_base + k * c_in + ci];
                }
            }
        }
    }
    g_in
}

/// Per-channel maximum over time, recording the first argmax index.
fn global_max_pool<T: Real>(x: &Array2<T>) -> (Array1<T>, Vec<usize>) {
    let (t_in, c) = x.dim();
    let mut pooled = Array1::from_elem(c, T::neg_infinity());
    let mut argmax = vec![0usize; c];
    for t in 0..t_in {
        for ci in 0..c {
            if x[(t, ci)] > pooled[ci] {
                pooled[ci] = x[(t, ci)];
                argmax[ci] = t;
            }
        }
    }
    (pooled, argmax)
}

fn dense_forward<T: Real>(x: &Array1<T>, p: &LayerParams<T>) -> Array1<T> {
    let shape = p.weights.shape();
    let (units, c_in) = (shape[0], shape[1]);
    let ws = p.weights.as_slice().expect("contiguous");
    Array1::from_shape_fn(units, |u| {
        let row = &ws[u * c_in..(u + 1) * c_in];
        let mut acc = p.bias[u];
        for (xv, wv) in x.iter().zip(row) {
            acc += *xv * *wv;
        }
        acc
    })
}

fn dense_backward<T: Real>(
    x: &Array1<T>,
    g_out: &Array1<T>,
    p: &LayerParams<T>,
    gp: &mut LayerParams<T>,
) -> Array1<T> {
    let shape = p.weights.shape();
    let (units, c_in) = (shape[0], shape[1]);
    let ws = p.weights.as_slice().expect("contiguous");
    let gws = gp.weights.as_slice_mut().expect("contiguous");
    let mut g_in = Array1::from_elem(c_in, T::zero());
    for u in 0..units {
        let g = g_out[u];
        gp.bias[u] += g;
        for ci in 0..c_in {
            gws[u * c_in + ci] += g * x[ci];
            g_in[ci] += g * ws[u * c_in + ci];
        }
    }
    g_in
}

/// Summed binary cross-entropy of a prediction against a target vector, with
/// each predicted probability clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Real>(targets: &[T], prediction: &[T]) -> Result<T, NnError> {
    if targets.len() != prediction.len() {
        return Err(NnError::DimensionMismatch {
            expected: targets.len(),
            got: prediction.len(),
            context: "bce_loss".into(),
        });
    }
    let lo = T::from_f64_c(PROB_EPSILON);
    let hi = T::one() - lo;
    let mut loss = T::zero();
    for (&y, &p) in targets.iter().zip(prediction) {
        let p = p.max(lo).min(hi);
        loss -= y * p.ln() + (T::one() - y) * (T::one() - p).ln();
    }
    Ok(loss)
}

/// The network shape used for the full-scale corpus: ten conv layers from 80
/// to 512 filters, two 3000-unit dense layers with dropout 0.5, leaky ReLU
/// (alpha = 1/3) activations and an optional input noise layer.
pub fn full_architecture(l_outputs: usize, use_noise: bool) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    if use_noise {
        layers.push(LayerSpec::GaussianNoise { sigma: 0.1 });
    }
    for filters in [80, 80, 96, 96, 128, 128, 256, 256, 512, 512] {
        layers.push(LayerSpec::Conv1d {
            filters,
            kernel: 5,
            stride: 1,
        });
        layers.push(LayerSpec::LeakyRelu { alpha: 1.0 / 3.0 });
    }
    layers.push(LayerSpec::GlobalMaxPoolTime);
    for _ in 0..2 {
        layers.push(LayerSpec::Dense { units: 3000 });
        layers.push(LayerSpec::LeakyRelu { alpha: 1.0 / 3.0 });
        layers.push(LayerSpec::Dropout { p: 0.5 });
    }
    layers.push(LayerSpec::Dense { units: l_outputs });
    layers.push(LayerSpec::Sigmoid);
    layers
}

/// A small stack of the same shape for desk-scale corpora and tests.
pub fn compact_architecture(l_outputs: usize, use_noise: bool) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    if use_noise {
        layers.push(LayerSpec::GaussianNoise { sigma: 0.1 });
    }
    for filters in [16, 32] {
        layers.push(LayerSpec::Conv1d {
            filters,
            kernel: 5,
            stride: 1,
        });
        layers.push(LayerSpec::LeakyRelu { alpha: 1.0 / 3.0 });
    }
    layers.push(LayerSpec::GlobalMaxPoolTime);
    layers.push(LayerSpec::Dense { units: 32 });
    layers.push(LayerSpec::LeakyRelu { alpha: 1.0 / 3.0 });
    layers.push(LayerSpec::Dropout { p: 0.3 });
    layers.push(LayerSpec::Dense { units: l_outputs });
    layers.push(LayerSpec::Sigmoid);
    layers
}
