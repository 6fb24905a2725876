//! Training: cross-entropy objective, AdamW with decoupled weight decay,
//! and a polynomial learning-rate schedule with constant-factor warm-up.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::decoder::predict_labels;
use crate::error::{Error, Result};
use crate::label::IGNORE_INDEX;
use crate::metrics::ConfusionMatrix;
use crate::model::Model;
use crate::nn::{Fwd, GradAccum, ParamStore};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate train/val mIoU every this many epochs (the final epoch is
    /// always evaluated); records between evaluations carry NaN.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-3,
            total_epochs: 60,
            warmup_epochs: 10,
            warmup_factor: 0.1,
            poly_power: 0.9,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 4,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.base_lr <= 0.0 || self.warmup_factor <= 0.0 || self.poly_power <= 0.0 {
            return Err(Error::Config("rates and powers must be positive".into()));
        }
        if self.batch_size == 0 || self.total_epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size, total_epochs and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at a schedule position. Warm-up epochs run at the
/// constant `base_lr * warmup_factor`; afterwards the rate decays as
/// `base_lr * (1 - t)^power` where `t` is the fraction of post-warm-up
/// iterations completed (`iter_frac` positions within the epoch).
pub fn lr_at(epoch: usize, iter_frac: f64, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * cfg.warmup_factor;
    }
    let span = (cfg.total_epochs - cfg.warmup_epochs) as f64;
    let t = ((epoch - cfg.warmup_epochs) as f64 + iter_frac) / span;
    cfg.base_lr * (1.0 - t.min(1.0)).powf(cfg.poly_power)
}

/// First/second moment accumulators mirroring the parameter store.
pub struct OptimizerState<E: Element = f32> {
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    pub step: u64,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        let zeros: Vec<Tensor<E>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update: decoupled weight decay applied to the parameter
/// before the bias-corrected moment update. Parameters without gradients
/// are untouched. Elementwise arithmetic runs in f64 and is cast once.
pub fn adamw_step<E: Element>(
    store: &mut ParamStore<E>,
    grads: &GradAccum<E>,
    state: &mut OptimizerState<E>,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.adam_beta1.powf(t);
    let bc2 = 1.0 - cfg.adam_beta2.powf(t);
    for id in store.ids().collect::<Vec<_>>() {
        let Some(g) = grads.get(id) else { continue };
        let g = g.clone();
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let p = store.value_mut(id);
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i].to_f64();
            let mut pi = pd[i].to_f64();
            pi -= lr * cfg.weight_decay * pi;
            let mi = cfg.adam_beta1 * md[i].to_f64() + (1.0 - cfg.adam_beta1) * gi;
            let vi = cfg.adam_beta2 * vd[i].to_f64() + (1.0 - cfg.adam_beta2) * gi * gi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            pi -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            pd[i] = E::from_f64(pi);
            md[i] = E::from_f64(mi);
            vd[i] = E::from_f64(vi);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    /// Mean IoU on the validation split; NaN when there is none.
    pub val_miou: f64,
    pub train_miou: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_val_miou: f64,
    pub best_epoch: Option<usize>,
}

/// Runs one forward/backward over a sample and absorbs parameter
/// gradients; returns the loss.
fn train_step(model: &Model<f32>, sample: &Sample, accum: &mut GradAccum<f32>) -> Result<f64> {
    let (images, labels) = sample;
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &model.store, true);
    let vars: Vec<Var> = images
        .iter()
        .map(|img| fx.tape.leaf(img.clone(), false))
        .collect();
    let logits = model.forward_on_tape(&mut fx, &vars)?;
    let loss = fx.tape.cross_entropy(logits, labels.data(), IGNORE_INDEX)?;
    let loss_value = tape.value(loss).scalar_value()?.to_f64();
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss_value}")));
    }
    tape.backward(loss)?;
    accum.absorb(&tape);
    Ok(loss_value)
}

/// Global confusion matrix and mean IoU of a model over samples.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<(ConfusionMatrix, f64)> {
    let classes = model.config.decoder.num_classes;
    let mut cm = ConfusionMatrix::new(classes);
    for (images, labels) in samples {
        let logits = model.forward(images)?;
        let pred = predict_labels(&logits)?;
        cm.accumulate(&pred, labels, IGNORE_INDEX)?;
    }
    let miou = cm.miou()?;
    Ok((cm, miou))
}

/// Deterministic training loop: fixed shuffle stream from the seed, batch
/// gradients averaged over independent per-sample passes, one optimizer
/// step per batch. `on_epoch` sees every epoch record; `on_best` fires
/// when the validation mIoU improves (and once at the end), giving the
/// caller its checkpoint hooks.
pub fn train(
    model: &mut Model<f32>,
    train_samples: &[Sample],
    val_samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
    mut on_best: impl FnMut(&Model<f32>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    for (images, _) in train_samples.iter().chain(val_samples) {
        if images.len() != model.config.num_modalities {
            return Err(Error::Config(format!(
                "dataset provides {} modalities, model expects {}",
                images.len(),
                model.config.num_modalities
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut opt = OptimizerState::new(&model.store);
    let mut log = TrainLog::default();
    let mut iter: u64 = 0;
    for epoch in 0..cfg.total_epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut epoch_loss = 0.0f64;
        let epoch_lr = lr_at(epoch, 0.0, cfg);
        for (bi, batch) in batches.iter().enumerate() {
            let lr = lr_at(epoch, bi as f64 / batches.len() as f64, cfg);
            let mut accum = GradAccum::new(&model.store);
            let mut batch_loss = 0.0f64;
            for &si in batch.iter() {
                batch_loss += train_step(model, &train_samples[si], &mut accum)?;
            }
            accum.scale(1.0 / batch.len() as f64);
            batch_loss /= batch.len() as f64;
            epoch_loss += batch_loss * batch.len() as f64;
            adamw_step(&mut model.store, &accum, &mut opt, lr, cfg);
            model.step += 1;
            iter += 1;
        }
        epoch_loss /= train_samples.len() as f64;
        let eval_now = epoch % cfg.eval_every == 0 || epoch + 1 == cfg.total_epochs;
        let train_miou = if eval_now {
            evaluate(model, train_samples)?.1
        } else {
            f64::NAN
        };
        let val_miou = if eval_now && !val_samples.is_empty() {
            evaluate(model, val_samples)?.1
        } else {
            f64::NAN
        };
        let record = EpochRecord {
            epoch,
            iter,
            lr: epoch_lr,
            loss: epoch_loss,
            val_miou,
            train_miou,
        };
        on_epoch(&record);
        log.records.push(record);
        if !val_miou.is_nan() && (log.best_epoch.is_none() || val_miou > log.best_val_miou) {
            log.best_val_miou = val_miou;
            log.best_epoch = Some(epoch);
            on_best(model)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn warmup_is_a_constant_tenth() {
        let c = TrainConfig {
            base_lr: 6e-5,
            total_epochs: 100,
            ..cfg()
        };
        for epoch in 0..10 {
            assert_eq!(lr_at(epoch, 0.5, &c), 6e-6);
        }
    }

    #[test]
    fn poly_decay_boundary_midpoint_and_monotonicity() {
        let c = TrainConfig {
            base_lr: 1.0,
            total_epochs: 30,
            warmup_epochs: 10,
            ..cfg()
        };
        // first post-warm-up iteration runs at exactly base_lr
        assert_eq!(lr_at(10, 0.0, &c), 1.0);
        // halfway through the decay span: (1 - 0.5)^0.9
        let mid = lr_at(20, 0.0, &c);
        assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-9);
        assert!((mid - 0.535_886_731).abs() < 1e-6);
        // non-increasing after warm-up
        let mut prev = f64::INFINITY;
        for epoch in 10..30 {
            for frac in [0.0, 0.25, 0.5, 0.75] {
                let lr = lr_at(epoch, frac, &c);
                assert!(lr <= prev + 1e-15);
                prev = lr;
            }
        }
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_a_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let mut pb = crate::nn::ParamBuilder::new(&mut store, 0);
        pb.trunc_normal("w", &[8], 0.5);
        let before = store.value(ParamId(0)).clone();
        let mut state = OptimizerState::new(&store);
        let grads = GradAccum::new(&store); // no gradients absorbed
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        adamw_step(&mut store, &grads, &mut state, 0.1, &c);
        assert!(store.value(ParamId(0)).bit_eq(&before));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // single scalar parameter, g = 1: bias-corrected ratio is 1, so
        // the update is -lr up to eps
        let mut store = ParamStore::<f64>::new();
        store_insert_scalar(&mut store, 1.0);
        let mut state = OptimizerState::new(&store);
        let mut grads = GradAccum::new(&store);
        absorb_scalar_grad(&mut grads, &store, 1.0);
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        adamw_step(&mut store, &grads, &mut state, 0.01, &c);
        let got = store.value(ParamId(0)).data()[0];
        assert!((got - (1.0 - 0.01)).abs() < 1e-9, "{got}");
    }

    #[test]
    fn adamw_descends_a_parabola_monotonically() {
        // f(x) = x^2 from x = 1 at lr 0.1: f strictly decreases for 10 steps
        let mut store = ParamStore::<f64>::new();
        store_insert_scalar(&mut store, 1.0);
        let mut state = OptimizerState::new(&store);
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let x = store.value(ParamId(0)).data()[0];
            let mut grads = GradAccum::new(&store);
            absorb_scalar_grad(&mut grads, &store, 2.0 * x);
            adamw_step(&mut store, &grads, &mut state, 0.1, &c);
            let fx = store.value(ParamId(0)).data()[0].powi(2);
            assert!(fx < prev, "f went from {prev} to {fx}");
            prev = fx;
        }
    }

    #[test]
    fn adamw_with_zero_decay_matches_textbook_adam() {
        // independent f64 Adam recurrence on a scalar descent
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        let mut store = ParamStore::<f64>::new();
        store_insert_scalar(&mut store, 0.7);
        let mut state = OptimizerState::new(&store);

        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for step in 1..=20 {
            let g = 2.0 * x + 0.3; // gradient of x^2 + 0.3x
            let gm = 2.0 * store.value(ParamId(0)).data()[0] + 0.3;
            let mut grads = GradAccum::new(&store);
            absorb_scalar_grad(&mut grads, &store, gm);
            adamw_step(&mut store, &grads, &mut state, 0.05, &c);

            m = c.adam_beta1 * m + (1.0 - c.adam_beta1) * g;
            v = c.adam_beta2 * v + (1.0 - c.adam_beta2) * g * g;
            let mhat = m / (1.0 - c.adam_beta1.powi(step));
            let vhat = v / (1.0 - c.adam_beta2.powi(step));
            x -= 0.05 * mhat / (vhat.sqrt() + c.adam_eps);
            assert!(
                (x - store.value(ParamId(0)).data()[0]).abs() <= 1e-12,
                "diverged at step {step}"
            );
        }
    }

    fn store_insert_scalar(store: &mut ParamStore<f64>, value: f64) {
        let mut pb = crate::nn::ParamBuilder::new(store, 0);
        pb.zeros("x", &[1]);
        store.value_mut(ParamId(0)).data_mut()[0] = value;
    }

    fn absorb_scalar_grad(grads: &mut GradAccum<f64>, store: &ParamStore<f64>, g: f64) {
        let mut tape = Tape::<f64>::new();
        let leaf = tape.leaf_param(store.value(ParamId(0)).clone(), 0);
        let scaled = tape.scale(leaf, g);
        let loss = tape.sum_all(scaled);
        tape.backward(loss).unwrap();
        grads.absorb(&tape);
    }
}
