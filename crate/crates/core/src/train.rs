//! Masked fine-tuning: gradients are multiplied by the selection mask before
//! the optimizer sees them, so frozen entries never move and their Adam
//! moments stay exactly zero.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::refine::RefinePlan;
use crate::rng;
use crate::selector::SelectionMask;
use crate::tensor::{Element, Graph, Tensor};
use crate::vit::{ForwardOptions, ViTModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Base learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    /// Learning rate at the last step.
    pub final_learning_rate: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient, applied to selected entries only.
    pub weight_decay: f64,
    /// Global-norm clipping of the masked gradient; off when `None`.
    pub grad_clip: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            final_learning_rate: 1e-5,
            warmup_steps: 0,
            epochs: 10,
            batch_size: 32,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            eval_batch_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(self.final_learning_rate >= 0.0 && self.final_learning_rate.is_finite()) {
            return bad(format!(
                "final_learning_rate {} must be nonnegative",
                self.final_learning_rate
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Linear warmup to `base`, then half-cosine decay to `final_lr` at step
/// `total - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub final_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(1).saturating_sub(self.warmup);
        if span == 0 {
            return self.base;
        }
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.final_lr + (self.base - self.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Hyperparameters of one update, separated from the model for testing.
#[derive(Clone, Copy, Debug)]
pub struct UpdateRule {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// 1-based step number, used for Adam bias correction.
    pub t: usize,
}

/// Updates `param` in place from `grad`, touching only entries where
/// `mask == 1`. For SGD `m` and `v` are ignored.
pub fn apply_update<F: Element>(
    rule: &UpdateRule,
    param: &mut [F],
    grad: &[F],
    mask: &[u8],
    m: &mut [F],
    v: &mut [F],
) {
    let lr = F::of(rule.lr);
    let wd = F::of(rule.weight_decay);
    match rule.optimizer {
        Optimizer::Sgd => {
            for i in 0..param.len() {
                if mask[i] == 1 {
                    let g = grad[i] + wd * param[i];
                    param[i] -= lr * g;
                }
            }
        }
        Optimizer::Adam => {
            let (b1, b2) = (F::of(rule.beta1), F::of(rule.beta2));
            let c1 = F::of(1.0 - rule.beta1.powi(rule.t as i32));
            let c2 = F::of(1.0 - rule.beta2.powi(rule.t as i32));
            let eps = F::of(rule.eps);
            for i in 0..param.len() {
                if mask[i] == 1 {
                    let g = grad[i] + wd * param[i];
                    m[i] = b1 * m[i] + (F::one() - b1) * g;
                    v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    param[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// Parameters, optimizer moments, step counter and mask.
#[derive(Clone, Debug)]
pub struct TrainState<F> {
    pub model: ViTModel<F>,
    mask: SelectionMask,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: usize,
    config: TrainConfig,
    schedule: CosineSchedule,
}

impl<F: Element> TrainState<F> {
    /// `total_steps` fixes the length of the cosine schedule.
    pub fn new(
        mut model: ViTModel<F>,
        mask: SelectionMask,
        config: TrainConfig,
        total_steps: usize,
    ) -> Result<Self> {
        config.validate()?;
        model
            .params()
            .registry()
            .ensure_congruent(mask.registry())?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (slot, p) in model.params_mut().iter_mut().enumerate() {
            let live = mask.bits(slot).contains(&1);
            p.tensor.set_requires_grad(live);
            let n = if live { p.tensor.numel() } else { 0 };
            m.push(vec![F::zero(); n]);
            v.push(vec![F::zero(); n]);
        }
        let schedule = CosineSchedule {
            base: config.learning_rate,
            final_lr: config.final_learning_rate,
            warmup: config.warmup_steps,
            total: total_steps.max(1),
        };
        Ok(Self {
            model,
            mask,
            m,
            v,
            step: 0,
            config,
            schedule,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn mask(&self) -> &SelectionMask {
        &self.mask
    }

    pub fn schedule(&self) -> &CosineSchedule {
        &self.schedule
    }

    /// First moments of `slot`, empty when the parameter is fully frozen.
    pub fn first_moment(&self, slot: usize) -> &[F] {
        &self.m[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &[F] {
        &self.v[slot]
    }

    pub fn into_model(self) -> ViTModel<F> {
        self.model
    }
}

/// One masked optimizer step on a batch. Returns the batch loss.
pub fn masked_step<F: Element>(
    state: &mut TrainState<F>,
    images: &Tensor<F>,
    labels: &[usize],
    plan: Option<&RefinePlan>,
) -> Result<f64> {
    let params = state.model.params_mut();
    params.zero_grad();
    let mut g = Graph::new();
    let trace = state
        .model
        .forward(&mut g, images, plan, ForwardOptions::default())?;
    let loss = g.cross_entropy(trace.logits, labels)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {value} at step {}",
            state.step
        )));
    }
    g.backward(loss, state.model.params_mut())?;

    let rule = UpdateRule {
        optimizer: state.config.optimizer,
        lr: state.schedule.lr(state.step),
        beta1: state.config.beta1,
        beta2: state.config.beta2,
        eps: state.config.eps,
        weight_decay: state.config.weight_decay,
        t: state.step + 1,
    };
    let params = state.model.params_mut();

    let mut masked: Vec<Option<Vec<F>>> = Vec::with_capacity(params.len());
    for (slot, p) in params.iter().enumerate() {
        let bits = state.mask.bits(slot);
        masked.push(p.tensor.grad().map(|gr| {
            gr.iter()
                .zip(bits)
                .map(|(&x, &b)| if b == 1 { x } else { F::zero() })
                .collect()
        }));
    }
    if let Some(clip) = state.config.grad_clip {
        let norm = masked
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = F::of(clip / norm);
            masked
                .iter_mut()
                .flatten()
                .for_each(|g| g.iter_mut().for_each(|x| *x *= s));
        }
    }
    for (slot, grad) in masked.into_iter().enumerate() {
        let Some(grad) = grad else { continue };
        let bits = state.mask.bits(slot);
        let p = params.by_slot_mut(slot);
        if let Some(name) = grad
            .iter()
            .any(|x| !x.is_finite())
            .then(|| p.info.name.clone())
        {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {name} at step {}",
                state.step
            )));
        }
        let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
        apply_update(&rule, p.tensor.data_mut(), &grad, bits, m, v);
    }
    state.step += 1;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate used by the last step of the epoch.
    pub lr: f64,
}

/// CSV with header `epoch,train_loss,val_accuracy,lr`.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,val_accuracy,lr\n");
    for m in history {
        s.push_str(&format!(
            "{},{},{},{}\n",
            m.epoch, m.train_loss, m.val_accuracy, m.lr
        ));
    }
    s
}

/// Runs `epochs * ceil(|train| / batch_size)` masked steps, shuffling each
/// epoch from the `seed` stream, and evaluates on `val` after every epoch.
pub fn fine_tune<F: Element>(
    state: &mut TrainState<F>,
    plan: Option<&RefinePlan>,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let cfg = state.config.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(seed, &format!("batches/{epoch}")));
        let mut total = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch::<F>(chunk);
            lr = state.schedule.lr(state.step);
            total += masked_step(state, &x, &y, plan)? * chunk.len() as f64;
        }
        let val_accuracy = evaluate(&state.model, plan, val, cfg.eval_batch_size)?;
        history.push(EpochMetrics {
            epoch,
            train_loss: total / train.len() as f64,
            val_accuracy,
            lr,
        });
    }
    Ok(history)
}

/// Index of the largest logit, ties to the lower class.
pub fn argmax<F: Element>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict<F: Element>(
    model: &ViTModel<F>,
    plan: Option<&RefinePlan>,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch::<F>(chunk);
        let logits = model.logits(&x, plan)?;
        let k = logits.shape()[1];
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

/// Fraction of examples whose predicted class equals the label.
pub fn evaluate<F: Element>(
    model: &ViTModel<F>,
    plan: Option<&RefinePlan>,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let pred = predict(model, plan, data, batch_size)?;
    let hits = pred
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, Split, SyntheticTaskSpec, TaskFamily};
    use crate::vit::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 2,
            seed: 1,
        }
    }

    fn data(n: usize, split: Split) -> Dataset {
        let spec = SyntheticTaskSpec {
            family: TaskFamily::QuadrantClass,
            image_size: 8,
            channels: 1,
            num_classes: 2,
            train: n,
            val: n,
            test: n,
            noise: 0.0,
            seed: 4,
        };
        generate_split(&spec, split).unwrap()
    }

    fn rule(optimizer: Optimizer, lr: f64) -> UpdateRule {
        UpdateRule {
            optimizer,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 1,
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = [1.0f64];
        apply_update(
            &rule(Optimizer::Sgd, 0.1),
            &mut p,
            &[2.0],
            &[1],
            &mut [],
            &mut [],
        );
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = [1.0f64, 1.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        apply_update(
            &rule(Optimizer::Adam, 0.01),
            &mut p,
            &[3.0, 3.0],
            &[1, 0],
            &mut m,
            &mut v,
        );
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert_eq!((p[1], m[1], v[1]), (1.0, 0.0, 0.0));
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            base: 0.1,
            final_lr: 0.001,
            warmup: 5,
            total: 50,
        };
        assert!((s.lr(5) - 0.1).abs() < 1e-12);
        assert!((s.lr(49) - 0.001).abs() < 1e-12);
        assert!((s.lr(0) - 0.02).abs() < 1e-12);
        assert!(s.lr(20) < s.lr(10));
    }

    #[test]
    fn zero_mask_changes_nothing() {
        let model = ViTModel::<f32>::new(cfg()).unwrap();
        let reg = model.params().registry();
        let before = model.params().clone();
        let mut st = TrainState::new(
            model,
            SelectionMask::filled(&reg, false),
            TrainConfig::default(),
            10,
        )
        .unwrap();
        let d = data(8, Split::Train);
        let (x, y) = d.batch::<f32>(&[0, 1, 2, 3]);
        let loss = masked_step(&mut st, &x, &y, None).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        for (a, b) in before.iter().zip(st.model.params().iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn full_mask_sgd_equals_plain_sgd() {
        let model = ViTModel::<f64>::new(cfg()).unwrap();
        let reg = model.params().registry();
        let d = data(8, Split::Train);
        let (x, y) = d.batch::<f64>(&[0, 1, 2, 3]);

        let mut plain = model.clone();
        plain.params_mut().set_requires_grad(true);
        let mut g = Graph::new();
        let t = plain
            .forward(&mut g, &x, None, ForwardOptions::default())
            .unwrap();
        let loss = g.cross_entropy(t.logits, &y).unwrap();
        plain.params_mut().zero_grad();
        g.backward(loss, plain.params_mut()).unwrap();
        let expect: Vec<Vec<f64>> = plain
            .params()
            .iter()
            .map(|p| {
                p.tensor
                    .data()
                    .iter()
                    .zip(p.tensor.grad().unwrap())
                    .map(|(&w, &gr)| w - 0.05 * gr)
                    .collect()
            })
            .collect();

        let tc = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 0.05,
            final_learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(model, SelectionMask::filled(&reg, true), tc, 10).unwrap();
        masked_step(&mut st, &x, &y, None).unwrap();
        for (p, e) in st.model.params().iter().zip(&expect) {
            assert_eq!(p.tensor.data(), e.as_slice(), "{}", p.info.name);
        }
    }

    #[test]
    fn frozen_entries_and_moments_stay_put() {
        let model = ViTModel::<f32>::new(cfg()).unwrap();
        let reg = model.params().registry();
        let before = model.params().clone();
        let mut mask = SelectionMask::filled(&reg, false);
        for slot in 0..reg.len() {
            for (i, b) in mask.bits_mut(slot).iter_mut().enumerate() {
                *b = (i % 3 == 0) as u8;
            }
        }
        let mut st = TrainState::new(model, mask.clone(), TrainConfig::default(), 20).unwrap();
        let d = data(16, Split::Train);
        for s in 0..20 {
            let idx: Vec<usize> = (0..4).map(|i| (s * 4 + i) % 16).collect();
            let (x, y) = d.batch::<f32>(&idx);
            masked_step(&mut st, &x, &y, None).unwrap();
        }
        let mut moved = 0;
        for (slot, (a, b)) in before.iter().zip(st.model.params().iter()).enumerate() {
            for i in 0..a.tensor.numel() {
                if mask.bits(slot)[i] == 0 {
                    assert_eq!(a.tensor.data()[i].to_bits(), b.tensor.data()[i].to_bits());
                    assert_eq!(st.first_moment(slot)[i], 0.0);
                    assert_eq!(st.second_moment(slot)[i], 0.0);
                } else if a.tensor.data()[i] != b.tensor.data()[i] {
                    moved += 1;
                }
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn fine_tune_is_deterministic_and_evaluates() {
        let run = || {
            let model = ViTModel::<f32>::new(cfg()).unwrap();
            let reg = model.params().registry();
            let tc = TrainConfig {
                epochs: 2,
                batch_size: 8,
                ..TrainConfig::default()
            };
            let steps = tc.epochs * tc.steps_per_epoch(24);
            let mut st =
                TrainState::new(model, SelectionMask::filled(&reg, true), tc, steps).unwrap();
            fine_tune(
                &mut st,
                None,
                &data(24, Split::Train),
                &data(24, Split::Val),
                9,
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.len(), 2);
        assert!(metrics_csv(&a).starts_with("epoch,train_loss,val_accuracy,lr\n"));
    }

    #[test]
    fn constant_prediction_accuracy_is_class_share() {
        let mut model = ViTModel::<f32>::new(cfg()).unwrap();
        for name in ["head.weight", "head.bias"] {
            let t = model.params().get(name).unwrap();
            let z = Tensor::zeros(t.shape().to_vec());
            model.params_mut().assign(name, z).unwrap();
        }
        // all logits tie, so class 0 is predicted everywhere
        let d = data(40, Split::Test);
        let share = d.class_counts()[0] as f64 / 40.0;
        assert_eq!(evaluate(&model, None, &d, 16).unwrap(), share);
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }
}
