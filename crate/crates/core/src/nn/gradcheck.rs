//! Finite-difference checks of every backward pass, in double precision.
//!
//! Each layer is wrapped in a scalar objective `L = sum(r * y)` with a fixed
//! random `r`, so `dL/dy = r` seeds the backward pass. The analytic gradient
//! of every input and parameter tensor is compared against central
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::ops::{self, BnMode, ConvGeometry, PoolGeometry, Reduction, RunningStats};
use crate::nn::{build_model, Family, ModelSpec, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome for one tensor of one case.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub layer: &'static str,
    pub case: String,
    pub tensor: String,
    pub error: f64,
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max|a - n| / max(max|a|, max|n|)`; zero when both are identically zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Suite {
    rng: ChaCha8Rng,
    h: f64,
    out: Vec<GradCheck>,
}

impl Suite {
    fn normal(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.rng.sample(StandardNormal)).collect()
    }

    fn tensor(&mut self, dims: [usize; 4]) -> Tensor<f64> {
        let data = self.normal(dims.iter().product());
        Tensor::new(dims, data).expect("dims")
    }

    fn record(&mut self, layer: &'static str, case: &str, tensor: &str, analytic: &[f64], numeric: &[f64]) {
        self.out.push(GradCheck {
            layer,
            case: case.to_string(),
            tensor: tensor.to_string(),
            error: relative_error(analytic, numeric),
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        n: usize,
        ci: usize,
        co: usize,
        hw: usize,
        k: usize,
        s: usize,
        p: usize,
        bias: bool,
    ) -> Result<()> {
        let geom = ConvGeometry::new(ci, co, k, s, p);
        let case = format!(
            "n{n} c{ci}->{co} {hw}x{hw} k{k} s{s} p{p}{}",
            if bias { " bias" } else { "" }
        );
        let x = self.tensor([n, ci, hw, hw]);
        let w = self.normal(geom.weight_len());
        let b = bias.then(|| self.normal(co));
        let y = ops::conv2d(&x, &w, b.as_deref(), &geom)?;
        let r = self.tensor(y.dims());
        let g = ops::conv2d_backward(&x, &w, bias, &geom, &r, true)?;
        let h = self.h;
        let objective = |x: &Tensor<f64>, w: &[f64], b: Option<&[f64]>| {
            dot(ops::conv2d(x, w, b, &geom).expect("conv").data(), r.data())
        };
        let num_x = central_difference(
            |v| objective(&Tensor::new(x.dims(), v.to_vec()).unwrap(), &w, b.as_deref()),
            x.data(),
            h,
        );
        self.record("conv2d", &case, "input", g.input.data(), &num_x);
        let num_w = central_difference(|v| objective(&x, v, b.as_deref()), &w, h);
        self.record(
            "conv2d",
            &case,
            "weight",
            g.weight.as_deref().unwrap_or_default(),
            &num_w,
        );
        if let Some(b) = &b {
            let num_b = central_difference(|v| objective(&x, &w, Some(v)), b, h);
            self.record("conv2d", &case, "bias", g.bias.as_deref().unwrap_or_default(), &num_b);
        }
        Ok(())
    }

    fn batchnorm(&mut self, dims: [usize; 4], mode: BnMode) -> Result<()> {
        let c = dims[1];
        let case = format!("{dims:?} {mode:?}");
        let x = self.tensor(dims);
        let gamma: Vec<f64> = self.normal(c).iter().map(|v| 1.0 + 0.5 * v).collect();
        let beta = self.normal(c);
        let running = RunningStats {
            mean: self.normal(c),
            var: self.normal(c).iter().map(|v| 0.5 + v.abs()).collect(),
        };
        let forward = |x: &Tensor<f64>, g: &[f64], b: &[f64]| {
            ops::batchnorm(x, g, b, Some(&running), mode, 1e-5).expect("batchnorm")
        };
        let out = forward(&x, &gamma, &beta);
        let r = self.tensor(dims);
        let grads = ops::batchnorm_backward(&out.cache, &gamma, &r)?;
        let h = self.h;
        let objective = |x: &Tensor<f64>, g: &[f64], b: &[f64]| dot(forward(x, g, b).output.data(), r.data());
        let num_x = central_difference(
            |v| objective(&Tensor::new(dims, v.to_vec()).unwrap(), &gamma, &beta),
            x.data(),
            h,
        );
        self.record("batchnorm", &case, "input", grads.input.data(), &num_x);
        let num_g = central_difference(|v| objective(&x, v, &beta), &gamma, h);
        self.record("batchnorm", &case, "gamma", &grads.gamma, &num_g);
        let num_b = central_difference(|v| objective(&x, &gamma, v), &beta, h);
        self.record("batchnorm", &case, "beta", &grads.beta, &num_b);
        Ok(())
    }

    fn relu(&mut self, dims: [usize; 4]) {
        let x = self.tensor(dims);
        let r = self.tensor(dims);
        let y = ops::relu(&x);
        let g = ops::relu_backward(&y, &r);
        let num = central_difference(
            |v| dot(ops::relu(&Tensor::new(dims, v.to_vec()).unwrap()).data(), r.data()),
            x.data(),
            self.h,
        );
        self.record("relu", &format!("{dims:?}"), "input", g.data(), &num);
    }

    fn maxpool(&mut self, dims: [usize; 4], geom: PoolGeometry) -> Result<()> {
        let x = self.tensor(dims);
        let out = ops::maxpool2d(&x, &geom)?;
        let r = self.tensor(out.output.dims());
        let g = ops::maxpool_backward(&r, &out.argmax, dims);
        let num = central_difference(
            |v| {
                let y = ops::maxpool2d(&Tensor::new(dims, v.to_vec()).unwrap(), &geom).expect("pool");
                dot(y.output.data(), r.data())
            },
            x.data(),
            self.h,
        );
        let case = format!("{dims:?} k{} s{} p{}", geom.window, geom.stride, geom.padding);
        self.record("maxpool2d", &case, "input", g.data(), &num);
        Ok(())
    }

    fn global_avg_pool(&mut self, dims: [usize; 4]) {
        let x = self.tensor(dims);
        let r = self.tensor([dims[0], dims[1], 1, 1]);
        let g = ops::global_avg_pool_backward(&r, dims);
        let num = central_difference(
            |v| {
                dot(
                    ops::global_avg_pool(&Tensor::new(dims, v.to_vec()).unwrap()).data(),
                    r.data(),
                )
            },
            x.data(),
            self.h,
        );
        self.record("global_avg_pool", &format!("{dims:?}"), "input", g.data(), &num);
    }

    fn linear(&mut self, n: usize, fin: usize, fout: usize) -> Result<()> {
        let case = format!("n{n} {fin}->{fout}");
        let x = self.tensor([n, fin, 1, 1]);
        let w = self.normal(fin * fout);
        let b = self.normal(fout);
        let r = self.tensor([n, fout, 1, 1]);
        let g = ops::linear_backward(&x, &w, &r, true)?;
        let h = self.h;
        let objective =
            |x: &Tensor<f64>, w: &[f64], b: &[f64]| dot(ops::linear(x, w, b).expect("linear").data(), r.data());
        let num_x = central_difference(
            |v| objective(&Tensor::new(x.dims(), v.to_vec()).unwrap(), &w, &b),
            x.data(),
            h,
        );
        self.record("linear", &case, "input", g.input.data(), &num_x);
        let num_w = central_difference(|v| objective(&x, v, &b), &w, h);
        self.record(
            "linear",
            &case,
            "weight",
            g.weight.as_deref().unwrap_or_default(),
            &num_w,
        );
        let num_b = central_difference(|v| objective(&x, &w, v), &b, h);
        self.record("linear", &case, "bias", g.bias.as_deref().unwrap_or_default(), &num_b);
        Ok(())
    }

    fn cross_entropy(&mut self, n: usize, k: usize, reduction: Reduction) -> Result<()> {
        let logits = self.tensor([n, k, 1, 1]);
        let labels: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..k)).collect();
        let out = ops::softmax_cross_entropy(&logits, &labels, reduction)?;
        let num = central_difference(
            |v| {
                let t = Tensor::new(logits.dims(), v.to_vec()).unwrap();
                ops::softmax_cross_entropy(&t, &labels, reduction).expect("loss").loss
            },
            logits.data(),
            self.h,
        );
        let case = format!("n{n} k{k} {reduction:?}");
        self.record("softmax_cross_entropy", &case, "logits", out.grad_logits.data(), &num);
        Ok(())
    }

    /// Whole model in training mode, input and every parameter.
    fn model(&mut self, spec: &ModelSpec, batch: usize) -> Result<()> {
        let seed = self.rng.random();
        let mut model = build_model::<f64>(spec, seed)?;
        let size = spec.input_size;
        let x = self.tensor([batch, spec.input_channels, size, size]);
        let labels: Vec<usize> = (0..batch).map(|i| i % spec.n_classes).collect();
        let (_, dx, grads) = model.network.loss_and_grads(&x, &labels)?;
        let case = format!("{} w{} d{} {size}x{size}", spec.family, spec.base_width, spec.depth);
        let h = self.h;
        let template = model.network.clone();
        let loss_at = |net: &mut crate::nn::Network<f64>, x: &Tensor<f64>| {
            let (logits, _) = net.forward_train(x).expect("forward");
            ops::softmax_cross_entropy(&logits, &labels, Reduction::Mean)
                .expect("loss")
                .loss
        };
        let num_x = central_difference(
            |v| loss_at(&mut template.clone(), &Tensor::new(x.dims(), v.to_vec()).unwrap()),
            x.data(),
            h,
        );
        self.record("model", &case, "input", dx.data(), &num_x);
        for (slot, param) in template.params().iter().enumerate() {
            let num = central_difference(
                |v| {
                    let mut net = template.clone();
                    net.params_mut()[slot].value.copy_from_slice(v);
                    loss_at(&mut net, &x)
                },
                &param.value,
                h,
            );
            self.record("model", &case, &param.name, &grads[slot], &num);
        }
        Ok(())
    }
}

/// Runs the standard suite: at least five random shapes for each layer plus
/// small whole models. One entry per checked tensor.
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        h: DEFAULT_STEP,
        out: Vec::new(),
    };
    for &(n, ci, co, hw, k, st, p, bias) in &[
        (1, 1, 1, 5, 3, 1, 1, false),
        (2, 2, 3, 6, 3, 1, 1, true),
        (2, 3, 2, 7, 3, 2, 1, false),
        (1, 2, 4, 6, 1, 2, 0, false),
        (3, 2, 2, 5, 1, 1, 0, true),
        (2, 1, 2, 8, 5, 1, 2, false),
        (1, 3, 2, 7, 3, 2, 0, true),
    ] {
        s.conv(n, ci, co, hw, k, st, p, bias)?;
    }
    for dims in [[2, 1, 3, 3], [3, 2, 2, 2], [4, 3, 1, 1], [2, 2, 4, 3], [5, 1, 2, 2]] {
        s.batchnorm(dims, BnMode::Train)?;
        s.batchnorm(dims, BnMode::Eval)?;
    }
    for dims in [[1, 1, 3, 3], [2, 2, 4, 4], [3, 1, 2, 5], [1, 4, 1, 1], [2, 3, 3, 2]] {
        s.relu(dims);
        s.global_avg_pool(dims);
    }
    for (dims, window, stride, padding) in [
        ([1, 1, 4, 4], 2, 2, 0),
        ([2, 2, 5, 5], 3, 2, 1),
        ([1, 3, 6, 6], 3, 1, 1),
        ([2, 1, 7, 5], 2, 1, 0),
        ([1, 2, 8, 8], 3, 2, 1),
    ] {
        s.maxpool(
            dims,
            PoolGeometry {
                window,
                stride,
                padding,
            },
        )?;
    }
    for (n, fin, fout) in [(1, 1, 1), (2, 5, 3), (4, 3, 7), (3, 8, 2), (5, 6, 6)] {
        s.linear(n, fin, fout)?;
    }
    for (n, k) in [(1, 2), (2, 5), (4, 3), (3, 10), (6, 4)] {
        s.cross_entropy(n, k, Reduction::Mean)?;
        s.cross_entropy(n, k, Reduction::Sum)?;
    }
    for spec in [
        ModelSpec::resnet(Family::ResnetC, 2, 1, 3, 8),
        ModelSpec::resnet(Family::ResnetW, 2, 1, 4, 8),
        ModelSpec::fc(Family::Fc1h, 5, 3, 4),
        ModelSpec::fc(Family::Fc2h, 4, 3, 4),
        ModelSpec::resnet(Family::ResnetD, 2, 2, 3, 8),
        ModelSpec {
            stem_stride: 2,
            stem_pool: true,
            ..ModelSpec::resnet(Family::ResnetC, 2, 1, 3, 16)
        },
    ] {
        s.model(&spec, 3)?;
    }
    Ok(s.out)
}
