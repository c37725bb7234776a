use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{self, Reduction};
use crate::nn::{adam_step, AdamConfig, AdamState, Checkpoint, ImageSet, Model, Network, Tensor};

const EVAL_BATCH: usize = 256;

/// Optimization schedule. The learning rate is divided by `lr_drop_factor`
/// from the 0-based epoch `lr_drop_epoch` onwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            lr_drop_epoch: 35,
            lr_drop_factor: 10.0,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if self.lr_drop_epoch > self.epochs {
            return Err(Error::invalid(format!(
                "learning-rate drop epoch {} is after the last epoch {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.learning_rate) || !finite_nonneg(self.weight_decay) {
            return Err(Error::invalid(
                "learning rate and weight decay must be finite and non-negative",
            ));
        }
        if !(self.lr_drop_factor.is_finite() && self.lr_drop_factor > 0.0) {
            return Err(Error::invalid("learning-rate drop factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.learning_rate / self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }

    fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate_at(epoch),
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Training statistics of one epoch, measured on the training batches as
/// they were seen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn train(model: Model<f32>, data: &ImageSet, config: &TrainConfig) -> Result<Checkpoint> {
    train_with_progress(model, data, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    model: Model<f32>,
    data: &ImageSet,
    config: &TrainConfig,
    progress: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    let mut checkpoint = Checkpoint {
        optimizer: AdamState::for_params(&model.network.params()),
        model,
        config: config.clone(),
        epoch: 0,
        history: Vec::new(),
    };
    resume(&mut checkpoint, data, progress)?;
    Ok(checkpoint)
}

/// Runs the remaining epochs of `checkpoint.config`.
pub fn resume(checkpoint: &mut Checkpoint, data: &ImageSet, mut progress: impl FnMut(&EpochRecord)) -> Result<()> {
    let config = checkpoint.config.clone();
    config.validate()?;
    check_compatible(&checkpoint.model, data)?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let network = &mut checkpoint.model.network;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in checkpoint.epoch..config.epochs {
        order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let adam = config.adam(epoch);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let (input, labels) = data.batch(chunk);
            let (logits, cache) = network.forward_train(&input)?;
            let loss = ops::softmax_cross_entropy(&logits, &labels, Reduction::Mean)?;
            if !loss.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                });
            }
            loss_sum += loss.per_sample.iter().map(|&l| l as f64).sum::<f64>();
            correct += count_top1(&logits, &labels);
            let (_, grads) = network.backward(&cache, &loss.grad_logits, true)?;
            let grads = grads.expect("requested");
            adam_step(&mut network.params_mut(), &grads, &mut checkpoint.optimizer, &adam)?;
        }
        let record = EpochRecord {
            epoch,
            learning_rate: adam.learning_rate,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        progress(&record);
        checkpoint.history.push(record);
        checkpoint.epoch = epoch + 1;
    }
    Ok(())
}

fn check_compatible(model: &Model<f32>, data: &ImageSet) -> Result<()> {
    let spec = &model.spec;
    if data.n_classes() != spec.n_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model has {}",
            data.n_classes(),
            spec.n_classes
        )));
    }
    let expected = [spec.input_channels, spec.input_size, spec.input_size];
    if data.image_dims() != expected {
        return Err(Error::Shape(format!(
            "dataset images are {:?}, model expects {expected:?}",
            data.image_dims()
        )));
    }
    Ok(())
}

fn count_top1(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| rank_of_label(logits.sample(i), y) == 0)
        .count()
}

/// Number of classes ranked above `label`. Ties go to the lower class index.
pub fn rank_of_label<T: PartialOrd>(logits: &[T], label: usize) -> usize {
    let target = &logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, v)| v > target || (v == target && j < label))
        .count()
}

/// Eval-mode logits for every sample, in order.
pub fn predict(network: &Network<f32>, data: &ImageSet) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (input, _) = data.batch(chunk);
        let logits = network.forward_eval(&input)?;
        logits.ensure_finite("evaluation forward pass")?;
        out.extend((0..chunk.len()).map(|i| logits.sample(i).to_vec()));
    }
    Ok(out)
}

/// Top-k accuracy for each `k` in `topk`.
pub fn evaluate(network: &Network<f32>, data: &ImageSet, topk: &[usize]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if let Some(&k) = topk.iter().find(|&&k| k == 0 || k > data.n_classes()) {
        return Err(Error::invalid(format!(
            "top-{k} accuracy is undefined for {} classes",
            data.n_classes()
        )));
    }
    let logits = predict(network, data)?;
    if logits.first().map(Vec::len) != Some(data.n_classes()) {
        return Err(Error::Shape("model output width differs from the class count".into()));
    }
    let ranks: Vec<usize> = logits
        .iter()
        .enumerate()
        .map(|(i, l)| rank_of_label(l, data.label(i)))
        .collect();
    Ok(topk
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / data.len() as f64)
        .collect())
}
