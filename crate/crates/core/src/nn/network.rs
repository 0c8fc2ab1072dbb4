use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::batchnorm::{bn_backward_input, bn_backward_params, bn_forward_cached, BnCache};
use super::{activation, activation_grad, BnMode, LayerSpec, BN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward_input, conv2d_backward_kernels, conv2d_trimmed, matmul, matmul_nt, matmul_tn, upsample2x,
    upsample2x_adjoint, upsample_conv2d, upsample_conv2d_backward_input, upsample_conv2d_backward_kernels,
    upsample_conv_supported, Tensor,
};

/// Standard deviation of the Gaussian used for fc/conv weights.
pub const WEIGHT_INIT_STD: f64 = 0.02;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Stored normalization statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// An explicit layer graph plus its parameters.
///
/// Every mutable borrow of parameters or running statistics stamps the
/// network with a fresh generation, which invalidates outstanding traces.
#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<LayerSpec>,
    /// Per-sample dims before layer 0, after layer 0, ..., after the last layer.
    dims: Vec<Vec<usize>>,
    params: Vec<Vec<Tensor>>,
    running: Vec<Option<RunningStats>>,
    generation: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.dims == other.dims
            && self.params == other.params
            && self.running == other.running
    }
}

impl Network {
    /// Validates the layer chain for per-sample `input_dims`. Weights start at
    /// zero, batch-norm gains at one, running statistics at (0, 1).
    pub fn new(input_dims: &[usize], layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if input_dims.is_empty() || input_dims.contains(&0) {
            return Err(Error::dim(format!("invalid network input {input_dims:?}")));
        }
        let mut dims = vec![input_dims.to_vec()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_dims(dims.last().unwrap())
                .map_err(|e| Error::dim(format!("layer {i}: {e}")))?;
            dims.push(next);
        }
        let params = layers
            .iter()
            .map(|l| {
                let shapes = l.param_shapes();
                shapes
                    .iter()
                    .enumerate()
                    .map(|(j, s)| {
                        let fill = if matches!(l, LayerSpec::BatchNorm { .. }) && j == 0 {
                            1.0
                        } else {
                            0.0
                        };
                        Tensor::full(s, fill)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let running = layers
            .iter()
            .map(|l| match l {
                LayerSpec::BatchNorm { features } => Ok(Some(RunningStats {
                    mean: Tensor::zeros(&[*features])?,
                    var: Tensor::full(&[*features], 1.0)?,
                })),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            layers,
            dims,
            params,
            running,
            generation: next_generation(),
        })
    }

    /// Gaussian(0, 0.02) weights, zero biases, unit gains, zero shifts.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, WEIGHT_INIT_STD).expect("valid std");
        let layers = self.layers.clone();
        for (layer, params) in layers.iter().zip(self.params_mut()) {
            match layer {
                LayerSpec::FullyConnected { .. } | LayerSpec::Conv { .. } => {
                    for v in params[0].data_mut() {
                        *v = normal.sample(&mut rng);
                    }
                    params[1].data_mut().fill(0.0);
                }
                LayerSpec::BatchNorm { .. } => {
                    params[0].data_mut().fill(1.0);
                    params[1].data_mut().fill(0.0);
                }
                _ => {}
            }
        }
        for r in self.running_mut().iter_mut().flatten() {
            r.mean.data_mut().fill(0.0);
            r.var.data_mut().fill(1.0);
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-sample input dims.
    pub fn input_dims(&self) -> &[usize] {
        &self.dims[0]
    }

    /// Per-sample output dims.
    pub fn output_dims(&self) -> &[usize] {
        self.dims.last().unwrap()
    }

    /// Per-sample dims entering layer `i`.
    pub fn layer_input_dims(&self, i: usize) -> &[usize] {
        &self.dims[i]
    }

    /// Latent dimension when the input is a flat vector.
    pub fn latent_dim(&self) -> Option<usize> {
        (self.dims[0].len() == 1).then(|| self.dims[0][0])
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor>] {
        self.generation = next_generation();
        &mut self.params
    }

    pub fn running(&self) -> &[Option<RunningStats>] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [Option<RunningStats>] {
        self.generation = next_generation();
        &mut self.running
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().flatten().map(|t| t.numel()).sum()
    }

    /// Replaces the running statistics with the batch statistics of one
    /// BatchStats forward pass over `input`.
    pub fn calibrate_running(&mut self, input: &Tensor) -> Result<()> {
        let (_, trace) = forward(self, input, BnMode::BatchStats)?;
        self.update_running(&trace, 0.0)
    }

    /// Folds the batch statistics recorded in `trace` into the running
    /// statistics: `new = momentum·old + (1 − momentum)·batch`.
    pub fn update_running(&mut self, trace: &ForwardTrace, momentum: f64) -> Result<()> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::Trace("trace does not belong to this network".into()));
        }
        if trace.mode != BnMode::BatchStats {
            return Err(Error::Trace("running statistics need a BatchStats trace".into()));
        }
        let mut updates = Vec::new();
        for (i, cache) in trace.caches.iter().enumerate() {
            if let LayerCache::BatchNorm(c) = cache {
                let (m, v) = (c.batch_mean.as_ref(), c.batch_var.as_ref());
                updates.push((i, m.unwrap().clone(), v.unwrap().clone()));
            }
        }
        for (i, m, v) in updates {
            let r = self.running_mut()[i]
                .as_mut()
                .ok_or_else(|| Error::Trace(format!("layer {i} is not batch norm")))?;
            for (old, new) in r.mean.data_mut().iter_mut().zip(&m) {
                *old = momentum * *old + (1.0 - momentum) * new;
            }
            for (old, new) in r.var.data_mut().iter_mut().zip(&v) {
                *old = momentum * *old + (1.0 - momentum) * new;
            }
        }
        Ok(())
    }

    /// Whether layer `i` is an upsample whose work is folded into conv `i + 1`.
    fn fuses_upsample(&self, i: usize) -> bool {
        matches!(self.layers[i], LayerSpec::Upsample2x)
            && matches!(
                self.layers.get(i + 1),
                Some(LayerSpec::Conv { k, stride, pad, .. }) if upsample_conv_supported(*k, *stride, *pad)
            )
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    Dense {
        input: Tensor,
    },
    Conv {
        input: Tensor,
    },
    /// Conv preceded by a fused upsample; `input` is the pre-upsample tensor.
    UpConv {
        input: Tensor,
    },
    /// Upsample executed inside the following conv.
    FusedUpsample,
    Upsample,
    Reshape {
        input_dims: Vec<usize>,
    },
    BatchNorm(BnCache),
    Activation {
        input: Tensor,
    },
}

/// Cached activations of one forward call; consumed by the reverse passes.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    generation: u64,
    mode: BnMode,
    batch: usize,
    caches: Vec<LayerCache>,
}

impl ForwardTrace {
    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn layer_count(&self) -> usize {
        self.caches.len()
    }

    /// `(layer index, input)` of every activation layer.
    pub fn activation_inputs(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.caches.iter().enumerate().filter_map(|(i, c)| match c {
            LayerCache::Activation { input } => Some((i, input)),
            _ => None,
        })
    }

    /// `(layer index, mean, var)` of every batch-norm layer normalized with
    /// batch statistics.
    pub fn batch_statistics(&self) -> Vec<(usize, &[f64], &[f64])> {
        self.caches
            .iter()
            .enumerate()
            .filter_map(|(i, c)| match c {
                LayerCache::BatchNorm(BnCache {
                    batch_mean: Some(m),
                    batch_var: Some(v),
                    ..
                }) => Some((i, m.as_slice(), v.as_slice())),
                _ => None,
            })
            .collect()
    }
}

/// Gradients congruent with [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Vec<Tensor>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Result<Self> {
        let grads = net
            .params()
            .iter()
            .map(|ps| ps.iter().map(|p| Tensor::zeros(p.dims())).collect())
            .collect::<Result<Vec<Vec<Tensor>>>>()?;
        Ok(ParamGrads { grads })
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::dim("parameter gradient sets differ in layer count"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.len() != b.len() {
                return Err(Error::dim("parameter gradient sets differ in tensor count"));
            }
            for (x, y) in a.iter_mut().zip(b) {
                x.expect_same_shape(y, "ParamGrads::add_assign")?;
                for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                    *p += q;
                }
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter().flatten()
    }
}

fn with_layer<T>(i: usize, layer: &LayerSpec, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric { context } => Error::Numeric {
            context: format!("layer {i} ({}): {context}", layer.kind()),
        },
        other => other,
    })
}

fn add_channel_bias(t: &mut Tensor, bias: &Tensor) {
    let d = t.dims().to_vec();
    let (b, c) = (d[0], d[1]);
    let s: usize = d[2..].iter().product();
    let data = t.data_mut();
    for bi in 0..b {
        for ch in 0..c {
            let bv = bias.data()[ch];
            for v in &mut data[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                *v += bv;
            }
        }
    }
}

/// Sum of `g` over every axis except 1.
fn channel_sums(g: &Tensor) -> Tensor {
    let d = g.dims();
    let (b, c) = (d[0], d[1]);
    let s: usize = d[2..].iter().product();
    let mut out = vec![0.0; c];
    for bi in 0..b {
        for (ch, o) in out.iter_mut().enumerate() {
            for v in &g.data()[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                *o += v;
            }
        }
    }
    Tensor::from_parts(&[c], out)
}

/// Evaluates `net` on a batch. The input is `[B, ...input_dims]`.
pub fn forward(net: &Network, input: &Tensor, mode: BnMode) -> Result<(Tensor, ForwardTrace)> {
    let d = input.dims();
    if d.len() != net.input_dims().len() + 1 || &d[1..] != net.input_dims() {
        return Err(Error::dim(format!(
            "network expects [B, {:?}], got {}",
            net.input_dims(),
            input.shape()
        )));
    }
    let batch = d[0];
    if mode == BnMode::BatchStats && net.has_batchnorm() && batch < 2 {
        return Err(Error::Mode(format!(
            "batch statistics need at least 2 samples, got {batch}"
        )));
    }
    input.ensure_finite("network input")?;

    let mut caches = Vec::with_capacity(net.layers.len());
    let mut x = input.clone();
    let mut i = 0;
    while i < net.layers.len() {
        let layer = &net.layers[i];
        let params = &net.params[i];
        if net.fuses_upsample(i) {
            let conv = &net.layers[i + 1];
            let LayerSpec::Conv { pad, .. } = conv else {
                unreachable!()
            };
            let cp = &net.params[i + 1];
            let mut y = with_layer(i + 1, conv, upsample_conv2d(&x, &cp[0], *pad))?;
            add_channel_bias(&mut y, &cp[1]);
            with_layer(i + 1, conv, y.ensure_finite("output"))?;
            caches.push(LayerCache::FusedUpsample);
            caches.push(LayerCache::UpConv { input: x });
            x = y;
            i += 2;
            continue;
        }
        let (y, cache) = match layer {
            LayerSpec::FullyConnected { .. } => {
                let mut y = with_layer(i, layer, matmul(&x, &params[0]))?;
                let out = y.dims()[1];
                for row in y.data_mut().chunks_mut(out) {
                    for (v, b) in row.iter_mut().zip(params[1].data()) {
                        *v += b;
                    }
                }
                (y, LayerCache::Dense { input: x })
            }
            LayerSpec::Conv { stride, pad, .. } => {
                let mut y = with_layer(i, layer, conv2d_trimmed(&x, &params[0], *stride, *pad))?;
                add_channel_bias(&mut y, &params[1]);
                (y, LayerCache::Conv { input: x })
            }
            LayerSpec::Upsample2x => (with_layer(i, layer, upsample2x(&x))?, LayerCache::Upsample),
            LayerSpec::Reshape { target } => {
                let input_dims = x.dims().to_vec();
                let mut dims = vec![batch];
                dims.extend_from_slice(target);
                (x.reshape(&dims)?, LayerCache::Reshape { input_dims })
            }
            LayerSpec::BatchNorm { .. } => {
                let r = net.running[i].as_ref().expect("batch norm has running stats");
                let (y, c) = with_layer(
                    i,
                    layer,
                    bn_forward_cached(&x, &params[0], &params[1], mode, (&r.mean, &r.var), BN_EPS),
                )?;
                (y, LayerCache::BatchNorm(c))
            }
            LayerSpec::Activation(kind) => {
                let y = with_layer(i, layer, activation(*kind, &x))?;
                (y, LayerCache::Activation { input: x })
            }
        };
        with_layer(i, layer, y.ensure_finite("output"))?;
        caches.push(cache);
        x = y;
        i += 1;
    }
    Ok((
        x,
        ForwardTrace {
            generation: net.generation,
            mode,
            batch,
            caches,
        },
    ))
}

fn check_trace(net: &Network, trace: &ForwardTrace, grad_output: &Tensor) -> Result<()> {
    if trace.generation != net.generation || trace.caches.len() != net.layers.len() {
        return Err(Error::Trace(
            "trace was produced by a different or since-modified network".into(),
        ));
    }
    let d = grad_output.dims();
    if d.len() != net.output_dims().len() + 1 || d[0] != trace.batch || &d[1..] != net.output_dims() {
        return Err(Error::dim(format!(
            "grad_output {} does not match network output [{}, {:?}]",
            grad_output.shape(),
            trace.batch,
            net.output_dims()
        )));
    }
    grad_output.ensure_finite("grad_output")
}

/// Shared reverse sweep. Returns the input gradient when `want_input` and the
/// parameter gradients when `want_params`.
fn backward(
    net: &Network,
    trace: &ForwardTrace,
    grad_output: &Tensor,
    want_input: bool,
    want_params: bool,
) -> Result<(Option<Tensor>, Option<ParamGrads>)> {
    check_trace(net, trace, grad_output)?;
    let mut grads = if want_params {
        Some(ParamGrads::zeros_like(net)?)
    } else {
        None
    };
    let mut g = grad_output.clone();
    for i in (0..net.layers.len()).rev() {
        let layer = &net.layers[i];
        let params = &net.params[i];
        // The gradient flowing out of layer 0 is only needed for the input.
        let need_below = i > 0 || want_input;
        let next = match (&trace.caches[i], layer) {
            (LayerCache::Dense { input }, _) => {
                if let Some(pg) = grads.as_mut() {
                    pg.grads[i][0] = with_layer(i, layer, matmul_tn(input, &g))?;
                    pg.grads[i][1] = column_sums(&g);
                }
                if need_below {
                    with_layer(i, layer, matmul_nt(&g, &params[0]))?
                } else {
                    g
                }
            }
            (LayerCache::Conv { input }, LayerSpec::Conv { stride, pad, .. }) => {
                if let Some(pg) = grads.as_mut() {
                    pg.grads[i][0] = with_layer(
                        i,
                        layer,
                        conv2d_backward_kernels(input, params[0].dims(), &g, *stride, *pad),
                    )?;
                    pg.grads[i][1] = channel_sums(&g);
                }
                if need_below {
                    with_layer(
                        i,
                        layer,
                        conv2d_backward_input(input.dims(), &params[0], &g, *stride, *pad),
                    )?
                } else {
                    g
                }
            }
            (LayerCache::UpConv { input }, LayerSpec::Conv { pad, .. }) => {
                if let Some(pg) = grads.as_mut() {
                    pg.grads[i][0] = with_layer(
                        i,
                        layer,
                        upsample_conv2d_backward_kernels(input, params[0].dims(), &g, *pad),
                    )?;
                    pg.grads[i][1] = channel_sums(&g);
                }
                // The fused upsample sits at i - 1.
                if i > 1 || want_input {
                    with_layer(
                        i,
                        layer,
                        upsample_conv2d_backward_input(input.dims(), &params[0], &g, *pad),
                    )?
                } else {
                    g
                }
            }
            (LayerCache::FusedUpsample, _) => g,
            (LayerCache::Upsample, _) => with_layer(i, layer, upsample2x_adjoint(&g))?,
            (LayerCache::Reshape { input_dims }, _) => g.reshape(input_dims)?,
            (LayerCache::BatchNorm(cache), _) => {
                if let Some(pg) = grads.as_mut() {
                    let (dg, ds) = with_layer(i, layer, bn_backward_params(cache, &g))?;
                    pg.grads[i][0] = dg;
                    pg.grads[i][1] = ds;
                }
                if need_below {
                    with_layer(i, layer, bn_backward_input(cache, &params[0], &g))?
                } else {
                    g
                }
            }
            (LayerCache::Activation { input }, LayerSpec::Activation(kind)) => {
                if need_below {
                    with_layer(i, layer, activation_grad(*kind, input, &g))?
                } else {
                    g
                }
            }
            _ => {
                return Err(Error::Trace(format!(
                    "layer {i}: cached state does not match a {} layer",
                    layer.kind()
                )))
            }
        };
        g = next;
    }
    Ok((want_input.then_some(g), grads))
}

fn column_sums(g: &Tensor) -> Tensor {
    let (b, n) = (g.dims()[0], g.dims()[1]);
    let mut out = vec![0.0; n];
    for row in g.data().chunks(n).take(b) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(&[n], out)
}

/// `∂⟨grad_output, output⟩ / ∂input` for the traced forward pass.
pub fn backward_input(net: &Network, trace: &ForwardTrace, grad_output: &Tensor) -> Result<Tensor> {
    let (g, _) = backward(net, trace, grad_output, true, false)?;
    Ok(g.expect("input gradient requested"))
}

/// `∂⟨grad_output, output⟩ / ∂params` for the traced forward pass.
pub fn backward_params(net: &Network, trace: &ForwardTrace, grad_output: &Tensor) -> Result<ParamGrads> {
    let (_, p) = backward(net, trace, grad_output, false, true)?;
    Ok(p.expect("parameter gradients requested"))
}

/// Both reverse passes in one sweep.
pub fn backward_both(net: &Network, trace: &ForwardTrace, grad_output: &Tensor) -> Result<(Tensor, ParamGrads)> {
    let (g, p) = backward(net, trace, grad_output, true, true)?;
    Ok((g.expect("input gradient"), p.expect("parameter gradients")))
}
