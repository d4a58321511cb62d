//! Toy-scale training harness: a sequential model over the convolution
//! blocks, manual backprop, SGD with momentum, the joint classification +
//! orthonormality loss, and a synthetic dataset generator.
//!
//! Small by design: single images map through pure layer functions, batches
//! are mapped over samples and reduced in ascending sample order, so training
//! is bit-deterministic for a given seed on a fixed platform. ReLU is applied
//! only after a whole block (in particular after the depthwise step of a
//! blueprint block, never between its pointwise steps).

use std::error::Error;
use std::fmt;

use rayon::prelude::*;

use crate::blueprint::{
    bsconv_s_backward, bsconv_s_forward, bsconv_u_backward, bsconv_u_forward, ortho_loss,
    ortho_loss_grad, BsconvSParams, BsconvUParams,
};
use crate::complexity::{LayerKind, LayerSpec, SpecError};
use crate::conv::{
    conv2d_depthwise, conv2d_standard, conv2d_standard_backward, depthwise_backward, dsc_block,
    dsc_block_backward, ConvGeometry,
};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, ShapeError, Tensor};

#[derive(Debug)]
pub enum TrainError {
    Shape(ShapeError),
    Spec(SpecError),
    LabelOutOfRange { label: usize, classes: usize },
    /// Training aborted; carries the diagnostics of the failing step.
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    BadConfig(String),
    EmptyDataset,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Shape(e) => write!(f, "{e}"),
            TrainError::Spec(e) => write!(f, "{e}"),
            TrainError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            TrainError::NonFiniteLoss { epoch, batch, loss } => {
                write!(f, "non-finite loss {loss} at epoch {epoch}, batch {batch}")
            }
            TrainError::BadConfig(msg) => write!(f, "bad config: {msg}"),
            TrainError::EmptyDataset => write!(f, "dataset has no training samples"),
        }
    }
}

impl Error for TrainError {}

impl From<ShapeError> for TrainError {
    fn from(e: ShapeError) -> Self {
        TrainError::Shape(e)
    }
}

impl From<SpecError> for TrainError {
    fn from(e: SpecError) -> Self {
        TrainError::Spec(e)
    }
}

/// One model layer with its allocated parameters.
#[derive(Clone, Debug)]
pub enum Layer<S: Scalar> {
    Standard { kernels: Tensor<S>, geom: ConvGeometry },
    Pointwise { weights: Tensor<S> },
    Depthwise { kernels: Tensor<S>, geom: ConvGeometry },
    Dsc {
        dw_kernels: Tensor<S>,
        pw_weights: Tensor<S>,
        geom: ConvGeometry,
    },
    BsconvU(BsconvUParams<S>),
    BsconvS(BsconvSParams<S>),
    Relu,
    GlobalAvgPool,
    Linear { weights: Tensor<S>, bias: Tensor<S> },
}

impl<S: Scalar> Layer<S> {
    /// Allocate a layer per its spec with fan-in-scaled init. Factored
    /// blueprint layers are shape-preserving, so their specs must use
    /// stride 1 and "same" padding.
    pub fn from_spec(spec: &LayerSpec, seed: u64) -> Result<Self, TrainError> {
        spec.validate()?;
        let m = spec.in_channels;
        let n = spec.out_channels;
        let k = spec.kernel;
        let geom = ConvGeometry::new(k, spec.stride, spec.effective_padding())?;
        let he = |fan: usize| (2.0 / fan as f64).sqrt();
        match spec.kind {
            LayerKind::StandardConv => {
                let mut kernels = Tensor::zeros(&[n, m, k, k])?;
                SeededRng::stream(seed, 0).fill_normal(&mut kernels, he(m * k * k));
                Ok(Layer::Standard { kernels, geom })
            }
            LayerKind::Pointwise => {
                require_plain_geometry(spec)?;
                let mut weights = Tensor::zeros(&[n, m])?;
                SeededRng::stream(seed, 0).fill_normal(&mut weights, he(m));
                Ok(Layer::Pointwise { weights })
            }
            LayerKind::Depthwise => {
                let mut kernels = Tensor::zeros(&[m, k, k])?;
                SeededRng::stream(seed, 0).fill_normal(&mut kernels, he(k * k));
                Ok(Layer::Depthwise { kernels, geom })
            }
            LayerKind::Dsc => {
                // cross-kernel materialization matches standard-conv init:
                // dw ~ N(0, 2/K^2), pw ~ N(0, 1/M)
                let mut dw_kernels = Tensor::zeros(&[m, k, k])?;
                let mut pw_weights = Tensor::zeros(&[n, m])?;
                SeededRng::stream(seed, 0).fill_normal(&mut dw_kernels, he(k * k));
                SeededRng::stream(seed, 1)
                    .fill_normal(&mut pw_weights, 1.0 / (m as f64).sqrt());
                Ok(Layer::Dsc {
                    dw_kernels,
                    pw_weights,
                    geom,
                })
            }
            LayerKind::BsconvU => {
                require_plain_geometry(spec)?;
                Ok(Layer::BsconvU(BsconvUParams::init(m, n, k, seed)))
            }
            LayerKind::BsconvS => {
                require_plain_geometry(spec)?;
                Ok(Layer::BsconvS(BsconvSParams::init(
                    m,
                    n,
                    k,
                    spec.subspace_ratio(),
                    seed,
                )))
            }
            LayerKind::Relu => Ok(Layer::Relu),
            LayerKind::GlobalAvgPool => Ok(Layer::GlobalAvgPool),
            LayerKind::Linear => {
                let mut weights = Tensor::zeros(&[n, m])?;
                SeededRng::stream(seed, 0)
                    .fill_normal(&mut weights, 1.0 / (m as f64).sqrt());
                let bias = Tensor::zeros(&[n])?;
                Ok(Layer::Linear { weights, bias })
            }
        }
    }

    /// Declarative description of the allocated layer.
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Standard { kernels, geom } => {
                let mut s = LayerSpec::conv(
                    LayerKind::StandardConv,
                    kernels.extent(1),
                    kernels.extent(0),
                    geom.kernel,
                );
                s.stride = geom.stride;
                s.padding = Some(geom.pad);
                s
            }
            Layer::Pointwise { weights } => {
                LayerSpec::pointwise(weights.extent(1), weights.extent(0))
            }
            Layer::Depthwise { kernels, geom } => {
                let mut s = LayerSpec::conv(
                    LayerKind::Depthwise,
                    kernels.extent(0),
                    kernels.extent(0),
                    geom.kernel,
                );
                s.stride = geom.stride;
                s.padding = Some(geom.pad);
                s
            }
            Layer::Dsc {
                dw_kernels,
                pw_weights,
                geom,
            } => {
                let mut s = LayerSpec::conv(
                    LayerKind::Dsc,
                    dw_kernels.extent(0),
                    pw_weights.extent(0),
                    geom.kernel,
                );
                s.stride = geom.stride;
                s.padding = Some(geom.pad);
                s
            }
            Layer::BsconvU(p) => LayerSpec::conv(
                LayerKind::BsconvU,
                p.in_channels(),
                p.out_channels(),
                p.kernel(),
            ),
            Layer::BsconvS(p) => LayerSpec::conv(
                LayerKind::BsconvS,
                p.in_channels(),
                p.out_channels(),
                p.kernel(),
            )
            .with_p(p.ratio),
            Layer::Relu => LayerSpec::relu(),
            Layer::GlobalAvgPool => LayerSpec::global_avg_pool(),
            Layer::Linear { weights, .. } => {
                LayerSpec::linear(weights.extent(1), weights.extent(0))
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        match self {
            Layer::Standard { kernels, .. } => vec![kernels],
            Layer::Pointwise { weights } => vec![weights],
            Layer::Depthwise { kernels, .. } => vec![kernels],
            Layer::Dsc {
                dw_kernels,
                pw_weights,
                ..
            } => vec![dw_kernels, pw_weights],
            Layer::BsconvU(p) => vec![&p.blueprints, &p.weights],
            Layer::BsconvS(p) => vec![&p.blueprints, &p.weights_subspace, &p.basis],
            Layer::Relu | Layer::GlobalAvgPool => vec![],
            Layer::Linear { weights, bias } => vec![weights, bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Layer::Standard { kernels, .. } => vec![kernels],
            Layer::Pointwise { weights } => vec![weights],
            Layer::Depthwise { kernels, .. } => vec![kernels],
            Layer::Dsc {
                dw_kernels,
                pw_weights,
                ..
            } => vec![dw_kernels, pw_weights],
            Layer::BsconvU(p) => vec![&mut p.blueprints, &mut p.weights],
            Layer::BsconvS(p) => {
                vec![&mut p.blueprints, &mut p.weights_subspace, &mut p.basis]
            }
            Layer::Relu | Layer::GlobalAvgPool => vec![],
            Layer::Linear { weights, bias } => vec![weights, bias],
        }
    }

    /// Weight decay applies to every parameter except the classifier bias.
    pub fn decay_mask(&self) -> Vec<bool> {
        match self {
            Layer::Linear { .. } => vec![true, false],
            other => vec![true; other.params().len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>, TrainError> {
        Ok(match self {
            Layer::Standard { kernels, geom } => conv2d_standard(input, kernels, *geom)?,
            Layer::Pointwise { weights } => crate::conv::conv2d_pointwise(input, weights)?,
            Layer::Depthwise { kernels, geom } => conv2d_depthwise(input, kernels, *geom)?,
            Layer::Dsc {
                dw_kernels,
                pw_weights,
                geom,
            } => dsc_block(input, dw_kernels, pw_weights, *geom)?,
            Layer::BsconvU(p) => bsconv_u_forward(input, p)?,
            Layer::BsconvS(p) => bsconv_s_forward(input, p)?,
            Layer::Relu => input.map(|x| if x > S::zero() { x } else { S::zero() }),
            Layer::GlobalAvgPool => global_avg_pool(input)?,
            Layer::Linear { weights, bias } => linear_forward(input, weights, bias)?,
        })
    }

    /// Backward through this layer: returns the input cotangent and the
    /// parameter gradients in [`Layer::params`] order.
    pub fn backward(
        &self,
        input: &Tensor<S>,
        d_out: &Tensor<S>,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>), TrainError> {
        Ok(match self {
            Layer::Standard { kernels, geom } => {
                let (di, dk) = conv2d_standard_backward(input, kernels, *geom, d_out)?;
                (di, vec![dk])
            }
            Layer::Pointwise { weights } => {
                let (di, dw) = crate::conv::pointwise_backward(input, weights, d_out)?;
                (di, vec![dw])
            }
            Layer::Depthwise { kernels, geom } => {
                let (di, dk) = depthwise_backward(input, kernels, *geom, d_out)?;
                (di, vec![dk])
            }
            Layer::Dsc {
                dw_kernels,
                pw_weights,
                geom,
            } => {
                let (di, ddw, dpw) =
                    dsc_block_backward(input, dw_kernels, pw_weights, *geom, d_out)?;
                (di, vec![ddw, dpw])
            }
            Layer::BsconvU(p) => {
                let (di, db, dw) = bsconv_u_backward(input, p, d_out)?;
                (di, vec![db, dw])
            }
            Layer::BsconvS(p) => {
                let (di, db, dwa, dwb) = bsconv_s_backward(input, p, d_out)?;
                (di, vec![db, dwa, dwb])
            }
            Layer::Relu => {
                if input.shape() != d_out.shape() {
                    return Err(ShapeError::ShapeMismatch {
                        left: input.shape().to_vec(),
                        right: d_out.shape().to_vec(),
                    }
                    .into());
                }
                let data = input
                    .data()
                    .iter()
                    .zip(d_out.data())
                    .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                (Tensor::from_vec(input.shape(), data)?, vec![])
            }
            Layer::GlobalAvgPool => (global_avg_pool_backward(input, d_out)?, vec![]),
            Layer::Linear { weights, bias: _ } => {
                let (di, dw, db) = linear_backward(input, weights, d_out)?;
                (di, vec![dw, db])
            }
        })
    }
}

fn require_plain_geometry(spec: &LayerSpec) -> Result<(), TrainError> {
    let same_pad = (spec.kernel.max(1) - 1) / 2;
    if spec.stride != 1 || spec.effective_padding() != same_pad {
        return Err(TrainError::BadConfig(format!(
            "layer '{}' is shape-preserving; stride 1 and same padding required",
            spec.kind
        )));
    }
    Ok(())
}

fn global_avg_pool<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>, TrainError> {
    if input.ndim() != 3 {
        return Err(ShapeError::RankExpected {
            expected: 3,
            got: input.ndim(),
        }
        .into());
    }
    let (c, y, x) = (input.extent(0), input.extent(1), input.extent(2));
    let plane = y * x;
    let count = S::from_f64(plane as f64);
    let mut out = Tensor::zeros(&[c])?;
    for ch in 0..c {
        let mut acc = S::zero();
        for &v in &input.data()[ch * plane..(ch + 1) * plane] {
            acc += v;
        }
        out.data_mut()[ch] = acc / count;
    }
    Ok(out)
}

fn global_avg_pool_backward<S: Scalar>(
    input: &Tensor<S>,
    d_out: &Tensor<S>,
) -> Result<Tensor<S>, TrainError> {
    let (c, y, x) = (input.extent(0), input.extent(1), input.extent(2));
    if d_out.shape() != [c] {
        return Err(ShapeError::ShapeMismatch {
            left: d_out.shape().to_vec(),
            right: vec![c],
        }
        .into());
    }
    let count = S::from_f64((y * x) as f64);
    let mut d_in = Tensor::zeros(input.shape())?;
    let plane = y * x;
    for ch in 0..c {
        let g = d_out.data()[ch] / count;
        for v in &mut d_in.data_mut()[ch * plane..(ch + 1) * plane] {
            *v = g;
        }
    }
    Ok(d_in)
}

fn linear_forward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>, TrainError> {
    if input.ndim() != 1 {
        return Err(ShapeError::RankExpected {
            expected: 1,
            got: input.ndim(),
        }
        .into());
    }
    let (out_n, in_n) = (weights.extent(0), weights.extent(1));
    if input.extent(0) != in_n {
        return Err(ShapeError::ChannelMismatch {
            expected: in_n,
            got: input.extent(0),
        }
        .into());
    }
    let mut out = Tensor::zeros(&[out_n])?;
    for o in 0..out_n {
        let mut acc = S::zero();
        for i in 0..in_n {
            acc += weights.data()[o * in_n + i] * input.data()[i];
        }
        out.data_mut()[o] = acc + bias.data()[o];
    }
    Ok(out)
}

fn linear_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    d_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), TrainError> {
    let (out_n, in_n) = (weights.extent(0), weights.extent(1));
    let mut d_in = Tensor::zeros(&[in_n])?;
    let mut d_w = Tensor::zeros(&[out_n, in_n])?;
    let d_b = Tensor::from_vec(&[out_n], d_out.data().to_vec())?;
    for o in 0..out_n {
        let g = d_out.data()[o];
        for i in 0..in_n {
            d_w.data_mut()[o * in_n + i] = g * input.data()[i];
            d_in.data_mut()[i] += weights.data()[o * in_n + i] * g;
        }
    }
    Ok((d_in, d_w, d_b))
}

/// Numerically stable softmax cross-entropy for one sample: returns the loss
/// and the logit gradient.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &[S],
    label: usize,
) -> Result<(S, Vec<S>), TrainError> {
    let classes = logits.len();
    if label >= classes {
        return Err(TrainError::LabelOutOfRange { label, classes });
    }
    let mut mx = logits[0];
    for &v in &logits[1..] {
        if v > mx {
            mx = v;
        }
    }
    let exps: Vec<S> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let mut sum = S::zero();
    for &e in &exps {
        sum += e;
    }
    let loss = mx + sum.ln() - logits[label];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let p = e / sum;
            if i == label {
                p - S::one()
            } else {
                p
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Per-layer parameter gradients, aligned with `Layer::params` order.
pub type ParamGrads<S> = Vec<Vec<Tensor<S>>>;

/// Batched forward result: logits are `[batch, classes]`, caches hold each
/// layer's input per sample (what backward needs).
pub struct BatchForward<S: Scalar> {
    pub logits: Tensor<S>,
    pub caches: Vec<Vec<Tensor<S>>>,
}

/// Sequential feed-forward model.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Scalar> Model<S> {
    /// Allocate a model from layer specs; layer `i` draws from an
    /// independent substream of `seed`.
    pub fn from_specs(specs: &[LayerSpec], seed: u64) -> Result<Self, TrainError> {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                Layer::from_spec(
                    spec,
                    seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Model { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Flattened parameter vector (layer order, then `Layer::params` order).
    pub fn param_vector(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for p in layer.params() {
                out.extend_from_slice(p.data());
            }
        }
        out
    }

    pub fn set_param_vector(&mut self, values: &[S]) {
        assert_eq!(values.len(), self.param_count(), "parameter vector length");
        let mut off = 0;
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                let n = p.len();
                p.data_mut().copy_from_slice(&values[off..off + n]);
                off += n;
            }
        }
    }

    /// Forward one sample; returns each layer's input (the backward cache)
    /// and the final activation.
    pub fn forward_sample(
        &self,
        input: &Tensor<S>,
    ) -> Result<(Vec<Tensor<S>>, Tensor<S>), TrainError> {
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut cur = input.clone();
        for layer in &self.layers {
            cache.push(cur.clone());
            cur = layer.forward(&cur)?;
        }
        Ok((cache, cur))
    }

    /// Forward a batch; samples are independent and mapped in parallel,
    /// results assembled in sample order.
    pub fn forward(&self, batch: &[Tensor<S>]) -> Result<BatchForward<S>, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let per: Vec<(Vec<Tensor<S>>, Tensor<S>)> = batch
            .par_iter()
            .map(|x| self.forward_sample(x))
            .collect::<Result<_, _>>()?;
        let classes = per[0].1.extent(0);
        let mut logits = Tensor::zeros(&[batch.len(), classes])?;
        let mut caches = Vec::with_capacity(batch.len());
        for (i, (cache, logit)) in per.into_iter().enumerate() {
            if logit.ndim() != 1 || logit.extent(0) != classes {
                return Err(ShapeError::ShapeMismatch {
                    left: logit.shape().to_vec(),
                    right: vec![classes],
                }
                .into());
            }
            logits.data_mut()[i * classes..(i + 1) * classes].copy_from_slice(logit.data());
            caches.push(cache);
        }
        Ok(BatchForward { logits, caches })
    }

    /// Sum of the orthonormality penalties over all subspace layers.
    pub fn ortho_penalty(&self) -> S {
        let mut total = S::zero();
        for layer in &self.layers {
            if let Layer::BsconvS(p) = layer {
                total += ortho_loss(&p.basis);
            }
        }
        total
    }

    /// Mean basis residual over subspace layers (0 when there are none);
    /// the per-epoch metric.
    pub fn ortho_residual(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for layer in &self.layers {
            if let Layer::BsconvS(p) = layer {
                total += ortho_loss(&p.basis).to_f64();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    /// Zero-shaped gradient buffers for every parameter.
    pub fn zero_grads(&self) -> ParamGrads<S> {
        self.layers
            .iter()
            .map(|l| {
                l.params()
                    .into_iter()
                    .map(|p| Tensor::zeros(p.shape()).unwrap())
                    .collect()
            })
            .collect()
    }

    /// Joint loss and its parameter gradients on a batch: mean cross-entropy
    /// plus `alpha` times the summed orthonormality penalty. Also reports the
    /// number of correctly classified samples. Weight decay is an optimizer
    /// concern and is *not* part of this gradient.
    pub fn loss_and_gradients(
        &self,
        batch: &[&Tensor<S>],
        labels: &[usize],
        alpha: f64,
    ) -> Result<(S, ParamGrads<S>, usize), TrainError> {
        assert_eq!(batch.len(), labels.len(), "one label per sample");
        if batch.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let inv_batch = S::from_f64(1.0 / batch.len() as f64);

        type SampleOut<S> = (S, bool, Vec<Vec<Tensor<S>>>);
        let per: Vec<SampleOut<S>> = batch
            .par_iter()
            .zip(labels.par_iter())
            .map(|(x, &label)| -> Result<SampleOut<S>, TrainError> {
                let (cache, logits) = self.forward_sample(x)?;
                if logits.ndim() != 1 {
                    return Err(ShapeError::RankExpected {
                        expected: 1,
                        got: logits.ndim(),
                    }
                    .into());
                }
                let (loss, dlogits) = softmax_cross_entropy(logits.data(), label)?;
                let correct = argmax(logits.data()) == label;
                let scaled: Vec<S> = dlogits.into_iter().map(|g| g * inv_batch).collect();
                let mut d = Tensor::from_vec(&[scaled.len()], scaled)?;
                let mut grads: Vec<Vec<Tensor<S>>> = vec![Vec::new(); self.layers.len()];
                for (li, layer) in self.layers.iter().enumerate().rev() {
                    let (d_in, pgrads) = layer.backward(&cache[li], &d)?;
                    grads[li] = pgrads;
                    d = d_in;
                }
                Ok((loss, correct, grads))
            })
            .collect::<Result<_, _>>()?;

        // ascending sample order keeps the reduction bit-reproducible
        let mut total_loss = S::zero();
        let mut correct = 0usize;
        let mut grads = self.zero_grads();
        for (loss, ok, sample_grads) in per {
            total_loss += loss * inv_batch;
            correct += ok as usize;
            for (gl, sl) in grads.iter_mut().zip(sample_grads) {
                for (g, s) in gl.iter_mut().zip(sl) {
                    for (gv, sv) in g.data_mut().iter_mut().zip(s.data()) {
                        *gv += *sv;
                    }
                }
            }
        }

        if alpha != 0.0 {
            let alpha_s = S::from_f64(alpha);
            for (layer, gl) in self.layers.iter().zip(grads.iter_mut()) {
                if let Layer::BsconvS(p) = layer {
                    total_loss += alpha_s * ortho_loss(&p.basis);
                    let og = ortho_loss_grad(&p.basis);
                    // basis is the third parameter of a subspace layer
                    let gb = &mut gl[2];
                    for (gv, ov) in gb.data_mut().iter_mut().zip(og.data()) {
                        *gv += alpha_s * *ov;
                    }
                }
            }
        }

        Ok((total_loss, grads, correct))
    }

    /// Flattened analytic gradient, aligned with [`Model::param_vector`].
    pub fn gradient_vector(
        &self,
        batch: &[&Tensor<S>],
        labels: &[usize],
        alpha: f64,
    ) -> Result<Vec<S>, TrainError> {
        let (_, grads, _) = self.loss_and_gradients(batch, labels, alpha)?;
        let mut out = Vec::with_capacity(self.param_count());
        for gl in &grads {
            for g in gl {
                out.extend_from_slice(g.data());
            }
        }
        Ok(out)
    }
}

fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Joint loss `mean CE + alpha * sum(ortho)` of already-computed logits.
pub fn joint_loss<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
    model: &Model<S>,
    alpha: f64,
) -> Result<S, TrainError> {
    if logits.ndim() != 2 || logits.extent(0) != labels.len() {
        return Err(ShapeError::ShapeMismatch {
            left: logits.shape().to_vec(),
            right: vec![labels.len(), logits.extent(logits.ndim() - 1)],
        }
        .into());
    }
    let classes = logits.extent(1);
    let inv = S::from_f64(1.0 / labels.len() as f64);
    let mut total = S::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let (loss, _) = softmax_cross_entropy(row, label)?;
        total += loss * inv;
    }
    total += S::from_f64(alpha) * model.ortho_penalty();
    Ok(total)
}

/// Learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    /// `lr0 * factor^(milestones passed)`; a milestone counts once
    /// `epoch >= milestone`.
    Step { milestones: Vec<usize>, factor: f64 },
    /// `lr0 * (1 - epoch / total)`: reaches zero after `total` epochs.
    Linear { total: usize },
}

impl Schedule {
    pub fn lr(&self, lr0: f64, epoch: usize) -> f64 {
        match self {
            Schedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                lr0 * factor.powi(passed as i32)
            }
            Schedule::Linear { total } => {
                let total = (*total).max(1);
                lr0 * (1.0 - (epoch as f64 / total as f64)).max(0.0)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr0: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Step-schedule defaults for the 30-epoch toy runs: SGD momentum 0.9,
    /// weight decay 1e-4, lr 0.1 decayed x0.1 at epochs 15, 22, 27.
    pub fn toy_default(seed: u64) -> Self {
        TrainConfig {
            lr0: 0.1,
            schedule: Schedule::Step {
                milestones: vec![15, 22, 27],
                factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            alpha: 0.0,
            epochs: 30,
            batch_size: 16,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr0 > 0.0) {
            return Err(TrainError::BadConfig(format!("lr0 {} must be > 0", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadConfig(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig("weight_decay must be >= 0".into()));
        }
        if self.alpha < 0.0 {
            return Err(TrainError::BadConfig("alpha must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Classic SGD momentum state: `v <- mu v + g`, `theta <- theta - lr v`,
/// where `g` already contains weight decay. The velocity is decoupled from
/// the learning rate.
pub struct MomentumSgd<S: Scalar> {
    velocity: ParamGrads<S>,
}

impl<S: Scalar> MomentumSgd<S> {
    pub fn new(model: &Model<S>) -> Self {
        MomentumSgd {
            velocity: model.zero_grads(),
        }
    }

    pub fn step(
        &mut self,
        model: &mut Model<S>,
        grads: &ParamGrads<S>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        let lr = S::from_f64(lr);
        let mu = S::from_f64(momentum);
        let wd = S::from_f64(weight_decay);
        for (li, layer) in model.layers.iter_mut().enumerate() {
            let mask = layer.decay_mask();
            for (pi, param) in layer.params_mut().into_iter().enumerate() {
                let v = self.velocity[li][pi].data_mut();
                let g = grads[li][pi].data();
                let p = param.data_mut();
                let decay = mask[pi];
                for i in 0..p.len() {
                    let mut gi = g[i];
                    if decay {
                        gi += wd * p[i];
                    }
                    v[i] = mu * v[i] + gi;
                    p[i] = p[i] - lr * v[i];
                }
            }
        }
    }
}

/// Deterministic synthetic image dataset.
#[derive(Clone, Debug)]
pub struct Dataset<S: Scalar> {
    pub train: Vec<(Tensor<S>, usize)>,
    pub test: Vec<(Tensor<S>, usize)>,
    pub classes: usize,
    pub image_size: usize,
}

/// Synthetic 3-channel dataset of oriented gratings: class `c` has its own
/// orientation (`pi c / classes`) and wavelength, each sample a random phase,
/// per-channel gain, and pixel noise. Random phase keeps raw-pixel class
/// means near zero (so the task is not linearly trivial) while a small
/// convolution net separates the orientations easily. The test split draws
/// `max(1, per_class / 4)` extra samples per class, disjoint by construction.
pub fn make_toy_dataset<S: Scalar>(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Dataset<S> {
    assert!(classes >= 2, "need at least two classes");
    assert!(per_class >= 1 && size >= 4, "degenerate dataset shape");
    let test_per_class = (per_class / 4).max(1);
    let mut train = Vec::with_capacity(classes * per_class);
    let mut test = Vec::with_capacity(classes * test_per_class);
    for class in 0..classes {
        let mut rng = SeededRng::stream(seed, class as u64 + 1);
        let angle = std::f64::consts::PI * class as f64 / classes as f64;
        let wavelength = 4.0 + 2.0 * (class % 2) as f64;
        let (dy, dx) = (angle.sin(), angle.cos());
        for i in 0..per_class + test_per_class {
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            let gains = [
                rng.uniform(0.7, 1.3),
                rng.uniform(0.7, 1.3),
                rng.uniform(0.7, 1.3),
            ];
            let mut img = Tensor::zeros(&[3, size, size]).unwrap();
            for ch in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let t = (x as f64 * dx + y as f64 * dy) * std::f64::consts::TAU
                            / wavelength
                            + phase;
                        let value = gains[ch] * t.sin() + 0.25 * rng.normal();
                        img.set(&[ch, y, x], S::from_f64(value));
                    }
                }
            }
            if i < per_class {
                train.push((img, class));
            } else {
                test.push((img, class));
            }
        }
    }
    Dataset {
        train,
        test,
        classes,
        image_size: size,
    }
}

/// Standard toy classifier shape: conv stem, one mixing block of the chosen
/// kind, global average pooling, linear head.
pub fn toy_model_specs(
    block: LayerKind,
    width: usize,
    classes: usize,
    p: Option<f64>,
) -> Vec<LayerSpec> {
    let mut mixer = LayerSpec::conv(block, width, width, 3);
    mixer.p = p;
    vec![
        LayerSpec::conv(LayerKind::StandardConv, 3, width, 3),
        LayerSpec::relu(),
        mixer,
        LayerSpec::relu(),
        LayerSpec::global_avg_pool(),
        LayerSpec::linear(width, classes),
    ]
}

/// Per-epoch training metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ortho_residual: f64,
}

/// Classification accuracy of the model on a labelled set.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    set: &[(Tensor<S>, usize)],
) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let correct: usize = set
        .par_iter()
        .map(|(x, label)| -> Result<usize, TrainError> {
            let (_, logits) = model.forward_sample(x)?;
            Ok((argmax(logits.data()) == *label) as usize)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / set.len() as f64)
}

/// One optimizer step on one batch: gradients (including the weight-decay
/// term and `alpha` times the orthonormality gradient) then the momentum
/// update at the scheduled rate. Exposed for step-level tests; training
/// loops over this.
pub fn backward_and_step<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut MomentumSgd<S>,
    batch: &[&Tensor<S>],
    labels: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, usize), TrainError> {
    let (loss, grads, correct) = model.loss_and_gradients(batch, labels, config.alpha)?;
    let lr = config.schedule.lr(config.lr0, epoch);
    opt.step(model, &grads, lr, config.momentum, config.weight_decay);
    Ok((loss.to_f64(), correct))
}

/// Full training loop. Deterministic in `(config.seed, config)`: the shuffle
/// stream, init streams, and fixed-order reductions leave no nondeterminism.
pub fn train_model<S: Scalar>(
    model: &mut Model<S>,
    data: &Dataset<S>,
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut opt = MomentumSgd::new(model);
    let mut shuffle_rng = SeededRng::stream(config.seed, 0xD47A);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        let lr = config.schedule.lr(config.lr0, epoch);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Tensor<S>> = chunk.iter().map(|&i| &data.train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train[i].1).collect();
            let (loss, grads, ok) = model.loss_and_gradients(&batch, &labels, config.alpha)?;
            let loss = loss.to_f64();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            opt.step(model, &grads, lr, config.momentum, config.weight_decay);
            epoch_loss += loss * chunk.len() as f64;
            correct += ok;
        }
        let n = data.train.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss: epoch_loss / n,
            train_acc: correct as f64 / n,
            test_acc: evaluate(model, &data.test)?,
            ortho_residual: model.ortho_residual(),
        });
    }
    Ok(metrics)
}

/// One sweep point: test accuracy and final basis residual for one `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub alpha: f64,
    pub test_acc: f64,
    pub ortho_residual: f64,
}

/// Train one model per `alpha` from an identical init seed and report the
/// final test accuracy and basis residual of each run.
pub fn alpha_sweep<S: Scalar>(
    specs: &[LayerSpec],
    data: &Dataset<S>,
    alphas: &[f64],
    config: &TrainConfig,
) -> Result<Vec<SweepPoint>, TrainError> {
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut model = Model::<S>::from_specs(specs, config.seed)?;
        let mut cfg = config.clone();
        cfg.alpha = alpha;
        let metrics = train_model(&mut model, data, &cfg)?;
        let last = metrics.last().ok_or(TrainError::EmptyDataset)?;
        out.push(SweepPoint {
            alpha,
            test_acc: last.test_acc,
            ortho_residual: last.ortho_residual,
        });
    }
    Ok(out)
}

/// Model-level gradient audit: compares the analytic gradient with central
/// finite differences over the entire flattened parameter vector and returns
/// the worst relative error (infinity-norm scale). Meaningful in f64.
pub fn gradient_audit<S: Scalar>(
    model: &Model<S>,
    batch: &[&Tensor<S>],
    labels: &[usize],
    alpha: f64,
    step_scale: f64,
) -> Result<f64, TrainError> {
    let analytic: Vec<f64> = model
        .gradient_vector(batch, labels, alpha)?
        .iter()
        .map(|g| g.to_f64())
        .collect();
    let theta = model.param_vector();
    let mut probe = model.clone();
    let mut fd = Vec::with_capacity(theta.len());
    let owned: Vec<Tensor<S>> = batch.iter().map(|&t| t.clone()).collect();
    let refs: Vec<&Tensor<S>> = owned.iter().collect();
    let mut values = theta.clone();
    for i in 0..theta.len() {
        let h = S::from_f64(step_scale * theta[i].to_f64().abs().max(1.0));
        values[i] = theta[i] + h;
        probe.set_param_vector(&values);
        let hi = loss_value(&probe, &refs, labels, alpha)?;
        values[i] = theta[i] - h;
        probe.set_param_vector(&values);
        let lo = loss_value(&probe, &refs, labels, alpha)?;
        values[i] = theta[i];
        fd.push((hi - lo) / (2.0 * h.to_f64()));
    }
    probe.set_param_vector(&values);
    let scale = analytic
        .iter()
        .chain(&fd)
        .fold(0.0f64, |acc, &x| acc.max(x.abs()))
        .max(1e-12);
    let worst = analytic
        .iter()
        .zip(&fd)
        .fold(0.0f64, |acc, (&a, &b)| acc.max((a - b).abs()));
    Ok(worst / scale)
}

fn loss_value<S: Scalar>(
    model: &Model<S>,
    batch: &[&Tensor<S>],
    labels: &[usize],
    alpha: f64,
) -> Result<f64, TrainError> {
    let owned: Vec<Tensor<S>> = batch.iter().map(|&t| t.clone()).collect();
    let fwd = model.forward(&owned)?;
    Ok(joint_loss(&fwd.logits, labels, model, alpha)?.to_f64())
}
