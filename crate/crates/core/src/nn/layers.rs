use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::ConvGeometry;
use super::gemm::gemm;
use super::tensor::Tensor;
use super::{NnError, Result};

/// Standard deviation of the Gaussian used for conv/dense weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Adjoint of [`LayerSpec::Conv3d`] with the same kernel/stride/padding;
    /// maps `in_channels` on the coarse grid to `out_channels` on the fine grid.
    Conv3dTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Normalizes axis 1 (channels or features) over batch and spatial axes.
    BatchNorm {
        channels: usize,
        /// Weight of the previous running statistic in the moving average.
        momentum: f64,
        epsilon: f64,
    },
    LeakyRelu {
        slope: f64,
    },
    /// Inverted dropout: survivors are rescaled by `1 / (1 - rate)`.
    Dropout {
        rate: f64,
    },
    Sigmoid,
    Tanh,
    Flatten,
    /// Reshape of the per-sample shape.
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            LayerSpec::Conv3d { stride, kernel, .. }
            | LayerSpec::Conv3dTranspose { stride, kernel, .. } => {
                if stride == 0 || kernel == 0 {
                    return Err("stride and kernel must be at least 1".into());
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(format!("dropout rate {rate} outside [0, 1)"));
                }
            }
            LayerSpec::LeakyRelu { slope } => {
                if !(slope > 0.0 && slope < 1.0) {
                    return Err(format!("leaky slope {slope} outside (0, 1)"));
                }
            }
            LayerSpec::BatchNorm {
                momentum, epsilon, ..
            } => {
                if !(0.0..1.0).contains(&momentum) || !(epsilon > 0.0) {
                    return Err("batch-norm momentum must be in [0, 1) and epsilon > 0".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let spatial = |s: &[usize]| -> std::result::Result<[usize; 3], String> {
            if s.len() != 4 {
                return Err(format!("expected [C, D, H, W], got {s:?}"));
            }
            Ok([s[1], s[2], s[3]])
        };
        match self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input != [*in_features] {
                    return Err(format!("dense expects [{in_features}], got {input:?}"));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let grid = spatial(input)?;
                if input[0] != *in_channels {
                    return Err(format!(
                        "conv expects {in_channels} channels, got {}",
                        input[0]
                    ));
                }
                let out = ConvGeometry::conv_output(grid, *kernel, *stride, *padding)
                    .ok_or_else(|| format!("kernel {kernel} does not fit grid {grid:?}"))?;
                Ok(vec![*out_channels, out[0], out[1], out[2]])
            }
            LayerSpec::Conv3dTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let grid = spatial(input)?;
                if input[0] != *in_channels {
                    return Err(format!(
                        "transposed conv expects {in_channels} channels, got {}",
                        input[0]
                    ));
                }
                let out = ConvGeometry::transpose_output(grid, *kernel, *stride, *padding)
                    .ok_or_else(|| format!("padding too large for grid {grid:?}"))?;
                Ok(vec![*out_channels, out[0], out[1], out[2]])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if input.first() != Some(channels) {
                    return Err(format!(
                        "batch norm expects {channels} channels, got {input:?}"
                    ));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(format!("cannot reshape {input:?} to {shape:?}"));
                }
                Ok(shape.clone())
            }
            LayerSpec::LeakyRelu { .. }
            | LayerSpec::Dropout { .. }
            | LayerSpec::Sigmoid
            | LayerSpec::Tanh => Ok(input.to_vec()),
        }
    }

    fn params(&self) -> Vec<(Vec<usize>, ParamInit)> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => vec![
                (vec![out_features, in_features], ParamInit::Gaussian),
                (vec![out_features], ParamInit::Zeros),
            ],
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                (
                    vec![out_channels, in_channels, kernel, kernel, kernel],
                    ParamInit::Gaussian,
                ),
                (vec![out_channels], ParamInit::Zeros),
            ],
            LayerSpec::Conv3dTranspose {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                (
                    vec![in_channels, out_channels, kernel, kernel, kernel],
                    ParamInit::Gaussian,
                ),
                (vec![out_channels], ParamInit::Zeros),
            ],
            LayerSpec::BatchNorm { channels, .. } => vec![
                (vec![channels], ParamInit::Ones),
                (vec![channels], ParamInit::Zeros),
                (vec![channels], ParamInit::FrozenZeros),
                (vec![channels], ParamInit::FrozenOnes),
            ],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ParamInit {
    Gaussian,
    Zeros,
    Ones,
    FrozenZeros,
    FrozenOnes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter tensors of a [`Sequential`] network, in layer order.
///
/// Batch-norm running statistics are stored here too (with
/// `requires_grad == false`) so that a checkpoint captures the full state.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug)]
enum LayerCache {
    Dense {
        input: Vec<f64>,
    },
    Conv {
        cols: Vec<f64>,
    },
    ConvTranspose {
        gathered: Vec<f64>,
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu {
        input: Vec<f64>,
    },
    Dropout {
        mask: Option<Vec<f64>>,
    },
    Activation {
        output: Vec<f64>,
    },
    Shape,
}

/// Intermediates of one forward pass, consumed by a single backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    /// Full (batched) input shape of every layer, plus the final output shape.
    shapes: Vec<Vec<usize>>,
    consumed: bool,
}

/// Running-statistic updates produced by a train-mode batch-norm pass.
struct RunningUpdate {
    mean_index: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
    momentum: f64,
}

/// A sequential network: a validated layer list with a fixed per-sample
/// input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SequentialSpec")]
pub struct Sequential {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    #[serde(skip)]
    sample_shapes: Vec<Vec<usize>>,
    #[serde(skip)]
    param_offsets: Vec<usize>,
    #[serde(skip)]
    param_shapes: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct SequentialSpec {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

impl TryFrom<SequentialSpec> for Sequential {
    type Error = NnError;

    fn try_from(s: SequentialSpec) -> Result<Self> {
        Sequential::new(s.input_shape, s.layers)
    }
}

impl Sequential {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut sample_shapes = vec![input_shape.clone()];
        let mut param_offsets = Vec::with_capacity(layers.len());
        let mut param_shapes = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            layer
                .validate()
                .map_err(|detail| NnError::InvalidLayer { layer: i, detail })?;
            let next = layer
                .output_shape(sample_shapes.last().unwrap())
                .map_err(|detail| NnError::ShapeMismatch { layer: i, detail })?;
            sample_shapes.push(next);
            param_offsets.push(param_shapes.len());
            param_shapes.extend(layer.params().into_iter().map(|(s, _)| s));
        }
        Ok(Self {
            input_shape,
            layers,
            sample_shapes,
            param_offsets,
            param_shapes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.sample_shapes.last().unwrap()
    }

    /// Expected shapes of every parameter tensor.
    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    pub fn init_params(&self, rng: &mut dyn RngCore) -> Params {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut tensors = Vec::new();
        for layer in &self.layers {
            for (shape, init) in layer.params() {
                let n: usize = shape.iter().product();
                let (data, trainable) = match init {
                    ParamInit::Gaussian => ((0..n).map(|_| normal.sample(rng)).collect(), true),
                    ParamInit::Zeros => (vec![0.0; n], true),
                    ParamInit::Ones => (vec![1.0; n], true),
                    ParamInit::FrozenZeros => (vec![0.0; n], false),
                    ParamInit::FrozenOnes => (vec![1.0; n], false),
                };
                let mut t = Tensor::new(shape, data).expect("valid param shape");
                t.requires_grad = trainable;
                tensors.push(t);
            }
        }
        Params { tensors }
    }

    /// Checks that `params` has the tensor layout this network expects.
    pub fn check_params(&self, params: &Params) -> Result<()> {
        if params.tensors.len() != self.param_shapes.len()
            || params
                .tensors
                .iter()
                .zip(&self.param_shapes)
                .any(|(t, s)| t.shape() != s.as_slice())
        {
            return Err(NnError::DimMismatch(format!(
                "parameter layout does not match network ({} tensors, expected {})",
                params.tensors.len(),
                self.param_shapes.len()
            )));
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape().len() < 2 || input.sample_shape() != self.input_shape.as_slice() {
            return Err(NnError::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "input {:?} does not match [N, {:?}]",
                    input.shape(),
                    self.input_shape
                ),
            });
        }
        Ok(())
    }

    /// Forward pass that records a cache for [`backward`](Self::backward).
    ///
    /// In train mode dropout is active, batch norm uses batch statistics and
    /// its running statistics in `params` are updated.
    pub fn forward(
        &self,
        params: &mut Params,
        input: &Tensor,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor, ForwardCache)> {
        self.check_input(input)?;
        self.check_params(params)?;
        let mut x = Tensor::new(input.shape().to_vec(), input.data().to_vec())?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut updates = Vec::new();
        for li in 0..self.layers.len() {
            shapes.push(x.shape().to_vec());
            let (y, cache, update) = self.layer_forward(li, params, x, mode, Some(rng), true)?;
            layers.push(cache.expect("cache requested"));
            updates.extend(update);
            x = y;
        }
        shapes.push(x.shape().to_vec());
        for u in updates {
            let m = u.momentum;
            for (r, b) in params.tensors[u.mean_index]
                .data_mut()
                .iter_mut()
                .zip(&u.mean)
            {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in params.tensors[u.mean_index + 1]
                .data_mut()
                .iter_mut()
                .zip(&u.var)
            {
                *r = m * *r + (1.0 - m) * b;
            }
        }
        Ok((
            x,
            ForwardCache {
                layers,
                shapes,
                consumed: false,
            },
        ))
    }

    /// Cache-free eval-mode forward pass; a pure function of its inputs.
    pub fn forward_eval(&self, params: &Params, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        self.check_params(params)?;
        let mut x = Tensor::new(input.shape().to_vec(), input.data().to_vec())?;
        for li in 0..self.layers.len() {
            x = self
                .layer_forward(li, params, x, Mode::Eval, None, false)?
                .0;
        }
        Ok(x)
    }

    /// Backpropagates `upstream` (gradient w.r.t. the output), accumulating
    /// parameter gradients into `params` and returning the input gradient.
    pub fn backward(
        &self,
        cache: &mut ForwardCache,
        params: &mut Params,
        upstream: &Tensor,
    ) -> Result<Tensor> {
        let mut store: Vec<Option<Vec<f64>>> = params
            .tensors
            .iter_mut()
            .map(|t| {
                t.requires_grad.then(|| {
                    let n = t.len();
                    t.grad.take().unwrap_or_else(|| vec![0.0; n])
                })
            })
            .collect();
        let result = self.backward_impl(cache, params, upstream, Some(&mut store));
        for (t, g) in params.tensors.iter_mut().zip(store) {
            if g.is_some() {
                t.grad = g;
            }
        }
        result
    }

    /// Backward pass that only computes the input gradient; parameters and
    /// their gradients are left untouched (a frozen network).
    pub fn backward_input(
        &self,
        cache: &mut ForwardCache,
        params: &Params,
        upstream: &Tensor,
    ) -> Result<Tensor> {
        self.backward_impl(cache, params, upstream, None)
    }

    fn backward_impl(
        &self,
        cache: &mut ForwardCache,
        params: &Params,
        upstream: &Tensor,
        mut sink: Option<&mut Vec<Option<Vec<f64>>>>,
    ) -> Result<Tensor> {
        if cache.consumed {
            return Err(NnError::StaleCache);
        }
        let out_shape = cache.shapes.last().unwrap();
        if upstream.shape() != out_shape.as_slice() {
            return Err(NnError::ShapeMismatch {
                layer: self.layers.len().saturating_sub(1),
                detail: format!(
                    "upstream gradient {:?} does not match output {out_shape:?}",
                    upstream.shape()
                ),
            });
        }
        cache.consumed = true;
        let layer_caches = std::mem::take(&mut cache.layers);
        let mut grad = upstream.data().to_vec();
        for (li, lc) in layer_caches.into_iter().enumerate().rev() {
            let in_shape = &cache.shapes[li];
            let out_shape = &cache.shapes[li + 1];
            grad = self.layer_backward(
                li,
                params,
                lc,
                in_shape,
                out_shape,
                grad,
                sink.as_deref_mut(),
            );
        }
        Tensor::new(cache.shapes[0].clone(), grad)
    }

    fn layer_forward(
        &self,
        li: usize,
        params: &Params,
        x: Tensor,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
        want_cache: bool,
    ) -> Result<(Tensor, Option<LayerCache>, Option<RunningUpdate>)> {
        let p0 = self.param_offsets[li];
        let n = x.batch();
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&self.sample_shapes[li + 1]);
        let p = |k: usize| params.tensors[p0 + k].data();
        let mut update = None;

        let (y, cache): (Vec<f64>, Option<LayerCache>) = match &self.layers[li] {
            &LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let mut y = vec![0.0; n * out_features];
                for row in y.chunks_exact_mut(out_features) {
                    row.copy_from_slice(p(1));
                }
                gemm(
                    n,
                    in_features,
                    out_features,
                    x.data(),
                    false,
                    p(0),
                    true,
                    1.0,
                    &mut y,
                );
                let cache = want_cache.then(|| LayerCache::Dense {
                    input: x.into_data(),
                });
                (y, cache)
            }
            &LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let g = self.conv_geometry(li, in_channels, kernel, stride, padding, false);
                let olen = g.output_len();
                let cols_n = n * olen;
                let ck = g.col_rows();
                let mut cols = vec![0.0; ck * cols_n];
                let in_len = in_channels * g.input_len();
                for (s, sample) in x.data().chunks_exact(in_len).enumerate() {
                    g.im2col(sample, &mut cols, cols_n, s * olen);
                }
                let mut tmp = vec![0.0; out_channels * cols_n];
                gemm(
                    out_channels,
                    ck,
                    cols_n,
                    p(0),
                    false,
                    &cols,
                    false,
                    0.0,
                    &mut tmp,
                );
                let bias = p(1);
                let mut y = vec![0.0; n * out_channels * olen];
                for s in 0..n {
                    for co in 0..out_channels {
                        let src = &tmp[co * cols_n + s * olen..][..olen];
                        let dst = &mut y[(s * out_channels + co) * olen..][..olen];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d = v + bias[co];
                        }
                    }
                }
                (y, want_cache.then_some(LayerCache::Conv { cols }))
            }
            &LayerSpec::Conv3dTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let g = self.conv_geometry(li, out_channels, kernel, stride, padding, true);
                let ilen = g.output_len();
                let cols_n = n * ilen;
                let ck = g.col_rows();
                let gathered = gather_channels(x.data(), n, in_channels, ilen);
                let mut cols = vec![0.0; ck * cols_n];
                gemm(
                    ck,
                    in_channels,
                    cols_n,
                    p(0),
                    true,
                    &gathered,
                    false,
                    0.0,
                    &mut cols,
                );
                let olen = g.input_len();
                let mut y = vec![0.0; n * out_channels * olen];
                for (s, dst) in y.chunks_exact_mut(out_channels * olen).enumerate() {
                    g.col2im(&cols, cols_n, s * ilen, dst);
                }
                let bias = p(1);
                for sample in y.chunks_exact_mut(out_channels * olen) {
                    for (co, plane) in sample.chunks_exact_mut(olen).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bias[co]);
                    }
                }
                (
                    y,
                    want_cache.then_some(LayerCache::ConvTranspose { gathered }),
                )
            }
            &LayerSpec::BatchNorm {
                channels,
                momentum,
                epsilon,
            } => {
                let spatial = x.len() / (n * channels);
                let count = (n * spatial) as f64;
                let (gamma, beta) = (p(0), p(1));
                let batch_stats = mode == Mode::Train;
                let (mean, var) = if batch_stats {
                    let mut mean = vec![0.0; channels];
                    let mut var = vec![0.0; channels];
                    for_each_channel(x.data(), n, channels, spatial, |c, v| mean[c] += v);
                    mean.iter_mut().for_each(|m| *m /= count);
                    for_each_channel(x.data(), n, channels, spatial, |c, v| {
                        let d = v - mean[c];
                        var[c] += d * d;
                    });
                    var.iter_mut().for_each(|s| *s /= count);
                    (mean, var)
                } else {
                    (p(2).to_vec(), p(3).to_vec())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                let mut xhat = x.into_data();
                let mut y = vec![0.0; xhat.len()];
                for (i, (xh, out)) in xhat.iter_mut().zip(y.iter_mut()).enumerate() {
                    let c = (i / spatial) % channels;
                    *xh = (*xh - mean[c]) * inv_std[c];
                    *out = gamma[c] * *xh + beta[c];
                }
                if batch_stats {
                    let unbias = if count > 1.0 {
                        count / (count - 1.0)
                    } else {
                        1.0
                    };
                    update = Some(RunningUpdate {
                        mean_index: p0 + 2,
                        mean,
                        var: var.iter().map(|v| v * unbias).collect(),
                        momentum,
                    });
                }
                let cache = want_cache.then_some(LayerCache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                });
                (y, cache)
            }
            &LayerSpec::LeakyRelu { slope } => {
                let y = x
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { slope * v })
                    .collect();
                (
                    y,
                    want_cache.then(|| LayerCache::LeakyRelu {
                        input: x.into_data(),
                    }),
                )
            }
            &LayerSpec::Dropout { rate } => {
                if mode == Mode::Train && rate > 0.0 {
                    let rng = rng.ok_or_else(|| {
                        NnError::Internal("train-mode dropout needs a random source".into())
                    })?;
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                        .collect();
                    let y = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                    (
                        y,
                        want_cache.then_some(LayerCache::Dropout { mask: Some(mask) }),
                    )
                } else {
                    (
                        x.into_data(),
                        want_cache.then_some(LayerCache::Dropout { mask: None }),
                    )
                }
            }
            LayerSpec::Sigmoid => {
                let y: Vec<f64> = x.data().iter().map(|&v| sigmoid(v)).collect();
                let cache = want_cache.then(|| LayerCache::Activation { output: y.clone() });
                (y, cache)
            }
            LayerSpec::Tanh => {
                let y: Vec<f64> = x.data().iter().map(|v| v.tanh()).collect();
                let cache = want_cache.then(|| LayerCache::Activation { output: y.clone() });
                (y, cache)
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                (x.into_data(), want_cache.then_some(LayerCache::Shape))
            }
        };
        Ok((Tensor::new(out_shape, y)?, cache, update))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        li: usize,
        params: &Params,
        cache: LayerCache,
        in_shape: &[usize],
        out_shape: &[usize],
        dy: Vec<f64>,
        sink: Option<&mut Vec<Option<Vec<f64>>>>,
    ) -> Vec<f64> {
        let p0 = self.param_offsets[li];
        let n = in_shape[0];
        let p = |k: usize| params.tensors[p0 + k].data();
        let mut sink = sink;
        macro_rules! grad_of {
            ($k:expr) => {
                sink.as_deref_mut().and_then(|s| s[p0 + $k].as_mut())
            };
        }

        match (&self.layers[li], cache) {
            (
                &LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                LayerCache::Dense { input },
            ) => {
                if let Some(gw) = grad_of!(0) {
                    gemm(
                        out_features,
                        n,
                        in_features,
                        &dy,
                        true,
                        &input,
                        false,
                        1.0,
                        gw,
                    );
                }
                if let Some(gb) = grad_of!(1) {
                    for row in dy.chunks_exact(out_features) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
                let mut dx = vec![0.0; n * in_features];
                gemm(
                    n,
                    out_features,
                    in_features,
                    &dy,
                    false,
                    p(0),
                    false,
                    0.0,
                    &mut dx,
                );
                dx
            }
            (
                &LayerSpec::Conv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                LayerCache::Conv { cols },
            ) => {
                let g = self.conv_geometry(li, in_channels, kernel, stride, padding, false);
                let olen = g.output_len();
                let cols_n = n * olen;
                let ck = g.col_rows();
                let dtmp = gather_channels(&dy, n, out_channels, olen);
                if let Some(gw) = grad_of!(0) {
                    gemm(out_channels, cols_n, ck, &dtmp, false, &cols, true, 1.0, gw);
                }
                if let Some(gb) = grad_of!(1) {
                    for (co, row) in dtmp.chunks_exact(cols_n).enumerate() {
                        gb[co] += row.iter().sum::<f64>();
                    }
                }
                let mut dcols = cols;
                gemm(
                    ck,
                    out_channels,
                    cols_n,
                    p(0),
                    true,
                    &dtmp,
                    false,
                    0.0,
                    &mut dcols,
                );
                let in_len = in_channels * g.input_len();
                let mut dx = vec![0.0; n * in_len];
                for (s, dst) in dx.chunks_exact_mut(in_len).enumerate() {
                    g.col2im(&dcols, cols_n, s * olen, dst);
                }
                dx
            }
            (
                &LayerSpec::Conv3dTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                LayerCache::ConvTranspose { gathered },
            ) => {
                let g = self.conv_geometry(li, out_channels, kernel, stride, padding, true);
                let ilen = g.output_len();
                let olen = g.input_len();
                let cols_n = n * ilen;
                let ck = g.col_rows();
                let mut dcols = vec![0.0; ck * cols_n];
                for (s, sample) in dy.chunks_exact(out_channels * olen).enumerate() {
                    g.im2col(sample, &mut dcols, cols_n, s * ilen);
                }
                if let Some(gw) = grad_of!(0) {
                    gemm(
                        in_channels,
                        cols_n,
                        ck,
                        &gathered,
                        false,
                        &dcols,
                        true,
                        1.0,
                        gw,
                    );
                }
                if let Some(gb) = grad_of!(1) {
                    for sample in dy.chunks_exact(out_channels * olen) {
                        for (co, plane) in sample.chunks_exact(olen).enumerate() {
                            gb[co] += plane.iter().sum::<f64>();
                        }
                    }
                }
                let mut dg = vec![0.0; in_channels * cols_n];
                gemm(
                    in_channels,
                    ck,
                    cols_n,
                    p(0),
                    false,
                    &dcols,
                    false,
                    0.0,
                    &mut dg,
                );
                scatter_channels(&dg, n, in_channels, ilen)
            }
            (
                &LayerSpec::BatchNorm { channels, .. },
                LayerCache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            ) => {
                let spatial = xhat.len() / (n * channels);
                let count = (n * spatial) as f64;
                let gamma = p(0);
                let mut sum_dy = vec![0.0; channels];
                let mut sum_dy_xhat = vec![0.0; channels];
                for (i, (d, xh)) in dy.iter().zip(&xhat).enumerate() {
                    let c = (i / spatial) % channels;
                    sum_dy[c] += d;
                    sum_dy_xhat[c] += d * xh;
                }
                if let Some(gg) = grad_of!(0) {
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(g, s)| *g += s);
                }
                if let Some(gb) = grad_of!(1) {
                    gb.iter_mut().zip(&sum_dy).for_each(|(g, s)| *g += s);
                }
                dy.iter()
                    .zip(&xhat)
                    .enumerate()
                    .map(|(i, (d, xh))| {
                        let c = (i / spatial) % channels;
                        if batch_stats {
                            gamma[c] * inv_std[c] / count
                                * (count * d - sum_dy[c] - xh * sum_dy_xhat[c])
                        } else {
                            gamma[c] * inv_std[c] * d
                        }
                    })
                    .collect()
            }
            (&LayerSpec::LeakyRelu { slope }, LayerCache::LeakyRelu { input }) => dy
                .iter()
                .zip(&input)
                .map(|(d, &x)| if x > 0.0 { *d } else { slope * d })
                .collect(),
            (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => match mask {
                Some(mask) => dy.iter().zip(&mask).map(|(d, m)| d * m).collect(),
                None => dy,
            },
            (LayerSpec::Sigmoid, LayerCache::Activation { output }) => dy
                .iter()
                .zip(&output)
                .map(|(d, y)| d * y * (1.0 - y))
                .collect(),
            (LayerSpec::Tanh, LayerCache::Activation { output }) => dy
                .iter()
                .zip(&output)
                .map(|(d, y)| d * (1.0 - y * y))
                .collect(),
            (LayerSpec::Flatten | LayerSpec::Reshape { .. }, LayerCache::Shape) => {
                debug_assert_eq!(
                    in_shape.iter().product::<usize>(),
                    out_shape.iter().product::<usize>()
                );
                dy
            }
            _ => unreachable!("cache kind always matches its layer"),
        }
    }

    /// Geometry of layer `li`. For a transposed convolution the geometry is
    /// that of the forward convolution it is the adjoint of: its "input" is
    /// the layer's output grid.
    fn conv_geometry(
        &self,
        li: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> ConvGeometry {
        let grid = |s: &[usize]| [s[1], s[2], s[3]];
        let before = grid(&self.sample_shapes[li]);
        let after = grid(&self.sample_shapes[li + 1]);
        let (input, output) = if transposed {
            (after, before)
        } else {
            (before, after)
        };
        ConvGeometry {
            channels,
            input,
            output,
            kernel,
            stride,
            padding,
        }
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn for_each_channel(
    data: &[f64],
    n: usize,
    channels: usize,
    spatial: usize,
    mut f: impl FnMut(usize, f64),
) {
    for s in 0..n {
        for c in 0..channels {
            for &v in &data[(s * channels + c) * spatial..][..spatial] {
                f(c, v);
            }
        }
    }
}

/// `[N, C, L]` to `[C, N * L]`.
fn gather_channels(x: &[f64], n: usize, channels: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for c in 0..channels {
            out[c * n * len + s * len..][..len]
                .copy_from_slice(&x[(s * channels + c) * len..][..len]);
        }
    }
    out
}

/// `[C, N * L]` to `[N, C, L]`.
fn scatter_channels(x: &[f64], n: usize, channels: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for c in 0..channels {
            out[(s * channels + c) * len..][..len]
                .copy_from_slice(&x[c * n * len + s * len..][..len]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn probe(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    /// Checks analytic input and parameter gradients of `sum(w * net(x))`
    /// against central differences. Dropout masks are reproduced by
    /// reseeding the forward RNG.
    fn check_gradients(net: &Sequential, batch: usize, mode: Mode, tol: f64) {
        let mut params = net.init_params(&mut seeded(11));
        // Larger weights than the default init so curvature is visible.
        for t in params.tensors.iter_mut().filter(|t| t.requires_grad) {
            let noise = probe(t.len(), t.len() as u64);
            for (w, n) in t.data_mut().iter_mut().zip(noise) {
                *w += 0.3 * n;
            }
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(net.input_shape());
        let x = Tensor::new(shape.clone(), probe(shape.iter().product(), 5)).unwrap();

        let objective = |params: &Params, x: &Tensor| -> (f64, Tensor) {
            let mut p = params.clone();
            let (y, _) = net.forward(&mut p, x, mode, &mut seeded(99)).unwrap();
            let w = probe(y.len(), 77);
            let f = y.data().iter().zip(&w).map(|(a, b)| a * b).sum();
            (f, Tensor::new(y.shape().to_vec(), w).unwrap())
        };

        let mut p = params.clone();
        let (_, mut cache) = net.forward(&mut p, &x, mode, &mut seeded(99)).unwrap();
        let (_, upstream) = objective(&params, &x);
        let mut grads = params.clone();
        let dx = net.backward(&mut cache, &mut grads, &upstream).unwrap();

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + a.abs().max(b.abs()));
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&params, &xp).0 - objective(&params, &xm).0) / (2.0 * h);
            assert!(
                rel(fd, dx.data()[i]) < tol,
                "input {i}: fd {fd} vs {}",
                dx.data()[i]
            );
        }
        for (ti, t) in params.tensors.iter().enumerate() {
            if !t.requires_grad {
                assert!(grads.tensors[ti].grad.is_none());
                continue;
            }
            let g = grads.tensors[ti].grad.as_ref().unwrap();
            for j in 0..t.len() {
                let mut pp = params.clone();
                pp.tensors[ti].data_mut()[j] += h;
                let mut pm = params.clone();
                pm.tensors[ti].data_mut()[j] -= h;
                let fd = (objective(&pp, &x).0 - objective(&pm, &x).0) / (2.0 * h);
                assert!(rel(fd, g[j]) < tol, "param {ti}[{j}]: fd {fd} vs {}", g[j]);
            }
        }
    }

    fn conv_stack() -> Sequential {
        Sequential::new(
            vec![2, 4, 4, 4],
            vec![
                LayerSpec::Conv3d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::batch_norm(3),
                LayerSpec::LeakyRelu { slope: 0.1 },
                LayerSpec::Conv3dTranspose {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Tanh,
                LayerSpec::Conv3d {
                    in_channels: 2,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 128,
                    out_features: 3,
                },
                LayerSpec::Sigmoid,
            ],
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_train() {
        check_gradients(&conv_stack(), 3, Mode::Train, 1e-5);
    }

    #[test]
    fn gradients_match_finite_differences_eval() {
        check_gradients(&conv_stack(), 2, Mode::Eval, 1e-5);
    }

    #[test]
    fn dense_batchnorm_reshape_gradients() {
        let net = Sequential::new(
            vec![5],
            vec![
                LayerSpec::Dense {
                    in_features: 5,
                    out_features: 8,
                },
                LayerSpec::Reshape {
                    shape: vec![2, 1, 2, 2],
                },
                LayerSpec::batch_norm(2),
                LayerSpec::LeakyRelu { slope: 0.2 },
                LayerSpec::Conv3dTranspose {
                    in_channels: 2,
                    out_channels: 1,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Sigmoid,
            ],
        )
        .unwrap();
        assert_eq!(net.output_shape(), &[1, 2, 4, 4]);
        check_gradients(&net, 4, Mode::Train, 1e-5);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let net = Sequential::new(
            vec![1, 3, 3, 3],
            vec![LayerSpec::Conv3d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
            }],
        )
        .unwrap();
        let mut params = net.init_params(&mut seeded(0));
        params.tensors[0] = Tensor::new(vec![1, 1, 3, 3, 3], probe(27, 1))
            .unwrap()
            .trainable();
        params.tensors[1].data_mut()[0] = 0.25;
        let x = Tensor::new(vec![1, 1, 3, 3, 3], probe(27, 2)).unwrap();
        let y = net.forward_eval(&params, &x).unwrap();
        let w = params.tensors[0].data();
        for oz in 0..3i64 {
            for oy in 0..3i64 {
                for ox in 0..3i64 {
                    let mut acc = 0.25;
                    for kz in 0..3i64 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (z, yy, xx) = (oz + kz - 1, oy + ky - 1, ox + kx - 1);
                                if [z, yy, xx].iter().all(|v| (0..3).contains(v)) {
                                    acc += w[((kz * 3 + ky) * 3 + kx) as usize]
                                        * x.data()[((z * 3 + yy) * 3 + xx) as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[((oz * 3 + oy) * 3 + ox) as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let net = Sequential::new(
            vec![3, 2, 2, 2],
            vec![LayerSpec::BatchNorm {
                channels: 3,
                momentum: 0.9,
                epsilon: 1e-12,
            }],
        )
        .unwrap();
        let mut params = net.init_params(&mut seeded(0));
        let x = Tensor::new(
            vec![4, 3, 2, 2, 2],
            probe(96, 3).iter().map(|v| 5.0 * v + 2.0).collect(),
        )
        .unwrap();
        let (y, _) = net
            .forward(&mut params, &x, Mode::Train, &mut seeded(0))
            .unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 3 + c) * 8..][..8].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(
                mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9,
                "{mean} {var}"
            );
        }
        // Running statistics moved toward the batch statistics.
        assert!(params.tensors[2].data().iter().all(|&m| m > 0.0));
    }

    #[test]
    fn dropout_rate_and_eval_identity() {
        let net = Sequential::new(vec![10_000], vec![LayerSpec::Dropout { rate: 0.15 }]).unwrap();
        let mut params = net.init_params(&mut seeded(0));
        let x = Tensor::full(vec![2, 10_000], 1.0);
        let (y, _) = net
            .forward(&mut params, &x, Mode::Train, &mut seeded(3))
            .unwrap();
        let dropped = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 20_000.0;
        assert!((dropped - 0.15).abs() < 0.02, "{dropped}");
        let kept = y.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.85).abs() < 1e-12);
        assert_eq!(net.forward_eval(&params, &x).unwrap().data(), x.data());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let net = conv_stack();
        let mut params = net.init_params(&mut seeded(0));
        let x = Tensor::zeros(vec![2, 2, 4, 4, 4]);
        let (y, mut cache) = net
            .forward(&mut params, &x, Mode::Train, &mut seeded(1))
            .unwrap();
        let up = Tensor::full(y.shape().to_vec(), 1.0);
        net.backward(&mut cache, &mut params, &up).unwrap();
        assert!(matches!(
            net.backward(&mut cache, &mut params, &up),
            Err(NnError::StaleCache)
        ));
        assert!(matches!(
            net.backward_input(&mut cache, &params, &up),
            Err(NnError::StaleCache)
        ));
    }

    #[test]
    fn backward_input_leaves_params_untouched() {
        let net = conv_stack();
        let mut params = net.init_params(&mut seeded(0));
        let x = Tensor::full(vec![2, 2, 4, 4, 4], 0.3);
        let (y, mut cache) = net
            .forward(&mut params, &x, Mode::Train, &mut seeded(1))
            .unwrap();
        let before = params.clone();
        let dx = net
            .backward_input(&mut cache, &params, &Tensor::full(y.shape().to_vec(), 1.0))
            .unwrap();
        assert_eq!(dx.shape(), x.shape());
        assert_eq!(params, before);
        assert!(params.tensors.iter().all(|t| t.grad.is_none()));
    }

    #[test]
    fn rejects_bad_layers_and_inputs() {
        assert!(matches!(
            Sequential::new(
                vec![4],
                vec![LayerSpec::Dense {
                    in_features: 3,
                    out_features: 1
                }]
            ),
            Err(NnError::ShapeMismatch { layer: 0, .. })
        ));
        assert!(matches!(
            Sequential::new(vec![4], vec![LayerSpec::Dropout { rate: 1.0 }]),
            Err(NnError::InvalidLayer { .. })
        ));
        let net = Sequential::new(vec![4], vec![LayerSpec::Sigmoid]).unwrap();
        let params = net.init_params(&mut seeded(0));
        assert!(net
            .forward_eval(&params, &Tensor::zeros(vec![1, 3]))
            .is_err());
    }

    #[test]
    fn network_json_round_trip_rebuilds_layout() {
        let net = conv_stack();
        let json = serde_json::to_string(&net).unwrap();
        let back: Sequential = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn eval_forward_is_pure(seed in any::<u64>(), batch in 1usize..4) {
            let net = conv_stack();
            let mut params = net.init_params(&mut seeded(seed));
            // Make running stats non-trivial first.
            let warm = Tensor::new(vec![3, 2, 4, 4, 4], probe(384, seed)).unwrap();
            net.forward(&mut params, &warm, Mode::Train, &mut seeded(seed)).unwrap();
            let x = Tensor::new(vec![batch, 2, 4, 4, 4], probe(batch * 128, seed ^ 1)).unwrap();
            let snapshot = params.clone();
            let a = net.forward_eval(&params, &x).unwrap();
            let b = net.forward_eval(&params, &x).unwrap();
            prop_assert_eq!(a.data(), b.data());
            prop_assert_eq!(&params, &snapshot);
            // Eval outputs of one sample do not depend on its batch mates.
            let first = Tensor::new(vec![1, 2, 4, 4, 4], x.data()[..128].to_vec()).unwrap();
            let solo = net.forward_eval(&params, &first).unwrap();
            for (u, v) in solo.data().iter().zip(a.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn sigmoid_is_stable(v in -1e4f64..1e4) {
            let s = sigmoid(v);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((s + sigmoid(-v) - 1.0).abs() < 1e-12);
        }
    }
}
