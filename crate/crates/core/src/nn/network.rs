use crate::error::{Error, Result};
use crate::instrumentation::DownsamplePointId;
use crate::nn::ops::{self, BnCache, BnMode, ConvGeometry, PoolGeometry, PoolPadding, Reduction, RunningStats};
use crate::nn::{Real, Tensor};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    slot: usize,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "parameter shape");
        Self {
            name: name.into(),
            shape,
            value,
            slot: usize::MAX,
        }
    }

    /// Position of this parameter in [`Network::params`] order.
    pub fn slot(&self) -> usize {
        self.slot
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub geometry: ConvGeometry,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    /// Set for strided convolutions.
    pub point: Option<DownsamplePointId>,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running: Option<RunningStats<T>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]),
            running: None,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub geometry: PoolGeometry,
    pub point: Option<DownsamplePointId>,
}

/// `relu(main(x) + shortcut(x))`; an empty shortcut is the identity.
#[derive(Clone, Debug)]
pub struct Residual<T> {
    pub main: Vec<Layer<T>>,
    pub shortcut: Vec<Layer<T>>,
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu,
    MaxPool(MaxPool2d),
    Residual(Residual<T>),
    GlobalAvgPool,
    Flatten,
    Linear(Linear<T>),
}

/// Parameter gradients indexed by [`Param::slot`].
pub type Gradients<T> = Vec<Vec<T>>;

/// Signals around one downsampling step, recorded by
/// [`Network::forward_traced`]: `pre` is the dense (stride-1) output of the
/// strided layer and `post` is `pre` downsampled by `factor`.
#[derive(Clone, Debug)]
pub struct DenseCapture<T> {
    pub point: DownsamplePointId,
    pub factor: usize,
    pub pre: Tensor<T>,
    pub post: Tensor<T>,
}

enum LayerCache<T> {
    None,
    Conv(Tensor<T>),
    BatchNorm(BnCache<T>),
    Relu(Tensor<T>),
    MaxPool {
        argmax: Vec<u32>,
        input_dims: [usize; 4],
    },
    Residual {
        main: Vec<LayerCache<T>>,
        shortcut: Vec<LayerCache<T>>,
        output: Tensor<T>,
    },
    GlobalAvgPool([usize; 4]),
    Flatten([usize; 4]),
    Linear(Tensor<T>),
}

/// Intermediate values kept by a forward pass for [`Network::backward`].
pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
}

struct Pass<'a, T> {
    mode: BnMode,
    keep_cache: bool,
    batch_stats: Vec<RunningStats<T>>,
    captures: Option<&'a mut Vec<DenseCapture<T>>>,
}

/// A sequential stack of layers with residual blocks.
#[derive(Clone, Debug)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    n_params: usize,
}

impl<T: Real> Network<T> {
    pub fn new(mut layers: Vec<Layer<T>>) -> Self {
        let mut slot = 0;
        visit_params_mut(&mut layers, &mut |p| {
            p.slot = slot;
            slot += 1;
        });
        Self { layers, n_params: slot }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Trainable parameters in slot order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::with_capacity(self.n_params);
        visit_params(&self.layers, &mut |p| out.push(p));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::with_capacity(self.n_params);
        visit_params_mut(&mut self.layers, &mut |p| out.push(p));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm2d<T>> {
        let mut out = Vec::new();
        visit_layers(&self.layers, &mut |l| {
            if let Layer::BatchNorm(bn) = l {
                out.push(bn);
            }
        });
        out
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut out = Vec::new();
        visit_layers_mut(&mut self.layers, &mut |l| {
            if let Layer::BatchNorm(bn) = l {
                out.push(bn);
            }
        });
        out
    }

    /// Whether every batch-norm layer has running statistics (eval mode is
    /// usable).
    pub fn has_running_stats(&self) -> bool {
        self.batchnorms().iter().all(|bn| bn.running.is_some())
    }

    /// Gives every batch-norm layer zero-mean unit-variance running
    /// statistics, as if freshly constructed in a framework that
    /// initializes them eagerly.
    pub fn init_running_stats(&mut self) {
        for bn in self.batchnorms_mut() {
            let c = bn.channels();
            bn.running = Some(RunningStats::identity(c));
        }
    }

    /// Downsampling points in forward order.
    pub fn downsample_points(&self) -> Vec<DownsamplePointId> {
        let mut out = Vec::new();
        visit_layers(&self.layers, &mut |l| match l {
            Layer::Conv(c) if c.geometry.stride > 1 => {
                out.extend(c.point.clone());
            }
            Layer::MaxPool(p) if p.geometry.stride > 1 => {
                out.extend(p.point.clone());
            }
            _ => {}
        });
        out
    }

    /// Training-mode forward pass: batch-norm uses batch statistics and its
    /// running statistics are updated.
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let mut pass = Pass {
            mode: BnMode::Train,
            keep_cache: true,
            batch_stats: Vec::new(),
            captures: None,
        };
        let (out, layers) = run_layers(&self.layers, input.clone(), &mut pass)?;
        let mut stats = pass.batch_stats.into_iter();
        for bn in self.batchnorms_mut() {
            let batch = stats.next().expect("one statistics record per batch-norm layer");
            let momentum = T::from_f64_lossy(bn.momentum);
            bn.running
                .get_or_insert_with(|| RunningStats::identity(batch.mean.len()))
                .blend(&batch, momentum);
        }
        Ok((out, ForwardCache { layers }))
    }

    /// Inference forward pass.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut pass = Pass {
            mode: BnMode::Eval,
            keep_cache: false,
            batch_stats: Vec::new(),
            captures: None,
        };
        Ok(run_layers(&self.layers, input.clone(), &mut pass)?.0)
    }

    /// Inference forward pass that keeps what [`Network::backward`] needs.
    pub fn forward_eval_cached(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let mut pass = Pass {
            mode: BnMode::Eval,
            keep_cache: true,
            batch_stats: Vec::new(),
            captures: None,
        };
        let (out, layers) = run_layers(&self.layers, input.clone(), &mut pass)?;
        Ok((out, ForwardCache { layers }))
    }

    /// Inference forward pass in which every strided layer is evaluated
    /// densely and then downsampled, recording both signals. The output is
    /// bit-identical to [`Network::forward_eval`].
    pub fn forward_traced(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<DenseCapture<T>>)> {
        let mut captures = Vec::new();
        let mut pass = Pass {
            mode: BnMode::Eval,
            keep_cache: false,
            batch_stats: Vec::new(),
            captures: Some(&mut captures),
        };
        let out = run_layers(&self.layers, input.clone(), &mut pass)?.0;
        Ok((out, captures))
    }

    /// Back-propagates `grad_output` through the pass that produced `cache`.
    /// Returns the input gradient and, when requested, parameter gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_output: &Tensor<T>,
        param_grads: bool,
    ) -> Result<(Tensor<T>, Option<Gradients<T>>)> {
        let mut grads = param_grads.then(|| vec![Vec::new(); self.n_params]);
        let dx = backward_layers(&self.layers, &cache.layers, grad_output.clone(), grads.as_mut())?;
        Ok((dx, grads))
    }

    /// Mean cross-entropy loss, its input gradient and parameter gradients
    /// for a training-mode pass.
    pub fn loss_and_grads(&mut self, input: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>, Gradients<T>)> {
        let (logits, cache) = self.forward_train(input)?;
        let loss = ops::softmax_cross_entropy(&logits, labels, Reduction::Mean)?;
        let (dx, grads) = self.backward(&cache, &loss.grad_logits, true)?;
        Ok((loss.loss, dx, grads.expect("requested")))
    }
}

fn run_layers<T: Real>(
    layers: &[Layer<T>],
    mut x: Tensor<T>,
    pass: &mut Pass<'_, T>,
) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
    let mut caches = Vec::with_capacity(if pass.keep_cache { layers.len() } else { 0 });
    for layer in layers {
        let (y, cache) = run_layer(layer, x, pass)?;
        if pass.keep_cache {
            caches.push(cache);
        }
        x = y;
    }
    Ok((x, caches))
}

fn run_layer<T: Real>(layer: &Layer<T>, x: Tensor<T>, pass: &mut Pass<'_, T>) -> Result<(Tensor<T>, LayerCache<T>)> {
    let keep = pass.keep_cache;
    Ok(match layer {
        Layer::Conv(conv) => {
            let bias = conv.bias.as_ref().map(|b| b.value.as_slice());
            let stride = conv.geometry.stride;
            let y = match (&mut pass.captures, &conv.point) {
                (Some(captures), Some(point)) if stride > 1 => {
                    let pre = ops::conv2d(&x, &conv.weight.value, bias, &conv.geometry.dense())?;
                    let post = pre.downsample(stride)?;
                    captures.push(DenseCapture {
                        point: point.clone(),
                        factor: stride,
                        pre,
                        post: post.clone(),
                    });
                    post
                }
                _ => ops::conv2d(&x, &conv.weight.value, bias, &conv.geometry)?,
            };
            (y, if keep { LayerCache::Conv(x) } else { LayerCache::None })
        }
        Layer::BatchNorm(bn) => {
            let out = ops::batchnorm(
                &x,
                &bn.gamma.value,
                &bn.beta.value,
                bn.running.as_ref(),
                pass.mode,
                T::from_f64_lossy(bn.eps),
            )?;
            if let Some(stats) = out.batch_stats {
                pass.batch_stats.push(stats);
            }
            (
                out.output,
                if keep {
                    LayerCache::BatchNorm(out.cache)
                } else {
                    LayerCache::None
                },
            )
        }
        Layer::Relu => {
            let y = ops::relu(&x);
            let cache = if keep {
                LayerCache::Relu(y.clone())
            } else {
                LayerCache::None
            };
            (y, cache)
        }
        Layer::MaxPool(pool) => {
            let g = pool.geometry;
            let out = match (&mut pass.captures, &pool.point) {
                (Some(captures), Some(point)) if g.stride > 1 => {
                    if g.padding != (g.window - 1) / 2 {
                        return Err(Error::Shape(format!(
                            "max pool with padding {} has no same-padded dense form for window {}",
                            g.padding, g.window
                        )));
                    }
                    let dense = ops::maxpool_dense(&x, g.window, PoolPadding::Same)?;
                    let post = dense.output.downsample(g.stride)?;
                    captures.push(DenseCapture {
                        point: point.clone(),
                        factor: g.stride,
                        pre: dense.output,
                        post: post.clone(),
                    });
                    // Only the forward value is needed while tracing.
                    ops::PoolOutput {
                        output: post,
                        argmax: Vec::new(),
                    }
                }
                _ => ops::maxpool2d(&x, &g)?,
            };
            let cache = if keep {
                LayerCache::MaxPool {
                    argmax: out.argmax,
                    input_dims: x.dims(),
                }
            } else {
                LayerCache::None
            };
            (out.output, cache)
        }
        Layer::Residual(block) => {
            let (main, main_cache) = run_layers(&block.main, x.clone(), pass)?;
            let (skip, skip_cache) = if block.shortcut.is_empty() {
                (x, Vec::new())
            } else {
                run_layers(&block.shortcut, x, pass)?
            };
            if main.dims() != skip.dims() {
                return Err(Error::Shape(format!(
                    "residual branches disagree: {:?} vs {:?}",
                    main.dims(),
                    skip.dims()
                )));
            }
            let sum: Vec<T> = main.data().iter().zip(skip.data()).map(|(&a, &b)| a + b).collect();
            let y = ops::relu(&Tensor::new(main.dims(), sum)?);
            let cache = if keep {
                LayerCache::Residual {
                    main: main_cache,
                    shortcut: skip_cache,
                    output: y.clone(),
                }
            } else {
                LayerCache::None
            };
            (y, cache)
        }
        Layer::GlobalAvgPool => {
            let dims = x.dims();
            (ops::global_avg_pool(&x), LayerCache::GlobalAvgPool(dims))
        }
        Layer::Flatten => {
            let dims = x.dims();
            let len = x.sample_len();
            (x.reshape([dims[0], len, 1, 1])?, LayerCache::Flatten(dims))
        }
        Layer::Linear(lin) => {
            let y = ops::linear(&x, &lin.weight.value, &lin.bias.value)?;
            (y, if keep { LayerCache::Linear(x) } else { LayerCache::None })
        }
    })
}

fn store<T>(grads: &mut Option<&mut Gradients<T>>, param: &Param<T>, value: Option<Vec<T>>) {
    if let (Some(g), Some(v)) = (grads.as_deref_mut(), value) {
        g[param.slot] = v;
    }
}

fn backward_layers<T: Real>(
    layers: &[Layer<T>],
    caches: &[LayerCache<T>],
    mut dy: Tensor<T>,
    mut grads: Option<&mut Gradients<T>>,
) -> Result<Tensor<T>> {
    if caches.len() != layers.len() {
        return Err(Error::invalid("forward cache does not match the network"));
    }
    for (layer, cache) in layers.iter().zip(caches).rev() {
        let want = grads.is_some();
        dy = match (layer, cache) {
            (Layer::Conv(conv), LayerCache::Conv(input)) => {
                let g = ops::conv2d_backward(
                    input,
                    &conv.weight.value,
                    conv.bias.is_some(),
                    &conv.geometry,
                    &dy,
                    want,
                )?;
                store(&mut grads, &conv.weight, g.weight);
                if let Some(b) = &conv.bias {
                    store(&mut grads, b, g.bias);
                }
                g.input
            }
            (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) => {
                let g = ops::batchnorm_backward(c, &bn.gamma.value, &dy)?;
                store(&mut grads, &bn.gamma, Some(g.gamma));
                store(&mut grads, &bn.beta, Some(g.beta));
                g.input
            }
            (Layer::Relu, LayerCache::Relu(out)) => ops::relu_backward(out, &dy),
            (Layer::MaxPool(_), LayerCache::MaxPool { argmax, input_dims }) => {
                ops::maxpool_backward(&dy, argmax, *input_dims)
            }
            (Layer::Residual(block), LayerCache::Residual { main, shortcut, output }) => {
                let dsum = ops::relu_backward(output, &dy);
                let dmain = backward_layers(&block.main, main, dsum.clone(), grads.as_deref_mut())?;
                let dskip = if block.shortcut.is_empty() {
                    dsum
                } else {
                    backward_layers(&block.shortcut, shortcut, dsum, grads.as_deref_mut())?
                };
                let data = dmain.data().iter().zip(dskip.data()).map(|(&a, &b)| a + b).collect();
                Tensor::new(dmain.dims(), data)?
            }
            (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool(dims)) => ops::global_avg_pool_backward(&dy, *dims),
            (Layer::Flatten, LayerCache::Flatten(dims)) => dy.reshape(*dims)?,
            (Layer::Linear(lin), LayerCache::Linear(input)) => {
                let g = ops::linear_backward(input, &lin.weight.value, &dy, want)?;
                store(&mut grads, &lin.weight, g.weight);
                store(&mut grads, &lin.bias, g.bias);
                g.input
            }
            _ => return Err(Error::invalid("forward cache was not recorded for backward")),
        };
    }
    Ok(dy)
}

fn visit_layers<'a, T>(layers: &'a [Layer<T>], f: &mut impl FnMut(&'a Layer<T>)) {
    for layer in layers {
        f(layer);
        if let Layer::Residual(block) = layer {
            visit_layers(&block.main, f);
            visit_layers(&block.shortcut, f);
        }
    }
}

fn visit_layers_mut<'a, T>(layers: &'a mut [Layer<T>], f: &mut impl FnMut(&'a mut Layer<T>)) {
    for layer in layers {
        if let Layer::Residual(block) = layer {
            visit_layers_mut(&mut block.main, f);
            visit_layers_mut(&mut block.shortcut, f);
        } else {
            f(layer);
        }
    }
}

fn visit_params<'a, T>(layers: &'a [Layer<T>], f: &mut impl FnMut(&'a Param<T>)) {
    visit_layers(layers, &mut |layer| match layer {
        Layer::Conv(c) => {
            f(&c.weight);
            if let Some(b) = &c.bias {
                f(b);
            }
        }
        Layer::BatchNorm(bn) => {
            f(&bn.gamma);
            f(&bn.beta);
        }
        Layer::Linear(l) => {
            f(&l.weight);
            f(&l.bias);
        }
        _ => {}
    });
}

fn visit_params_mut<'a, T>(layers: &'a mut [Layer<T>], f: &mut impl FnMut(&'a mut Param<T>)) {
    visit_layers_mut(layers, &mut |layer| match layer {
        Layer::Conv(c) => {
            f(&mut c.weight);
            if let Some(b) = &mut c.bias {
                f(b);
            }
        }
        Layer::BatchNorm(bn) => {
            f(&mut bn.gamma);
            f(&mut bn.beta);
        }
        Layer::Linear(l) => {
            f(&mut l.weight);
            f(&mut l.bias);
        }
        _ => {}
    });
}
