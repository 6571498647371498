use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Model, VariantSpec, MIN_INPUT_SIDE};
use crate::params::{InitScheme, Mode, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};
use crate::train::checkpoint::{Checkpoint, Record};
use crate::train::config::TrainConfig;
use crate::train::data::{epoch_order, load_dataset, Dataset};
use crate::train::optim::{AdamW, OptimizerState};
use crate::train::schedule::{lr_at, LrSchedule};

const EVAL_BATCH: usize = 64;
const AUGMENT_SALT: u64 = 0xA076_1D64_78BD_642F;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub final_loss: f64,
    /// Fraction of correct predictions over the most recent epoch.
    pub train_accuracy: f64,
    /// `(epoch, accuracy)` for each evaluation.
    pub evaluations: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Seed of the per-step session rng (stochastic depth), a function of the
/// run seed and the step only.
fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn augment_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SALT);
    rng.set_stream(step);
    rng
}

fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            best.0 == label
        })
        .count()
}

/// Full training state: model, optimizer, position in the run.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub train_data: Dataset,
    pub eval_data: Option<Dataset>,
    schedule: LrSchedule,
    steps_per_epoch: usize,
    order: Option<(u64, Vec<usize>)>,
}

impl<T: Scalar> Trainer<T> {
    /// Loads data and builds a freshly initialized model.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let train_data = load_dataset(&config.train_data)?;
        let eval_data = config.eval_data.as_ref().map(load_dataset).transpose()?;
        let spec = match &config.variant {
            Some(_) => config.variant_spec()?.with_classes(train_data.num_classes),
            None => config.variant_spec()?,
        };
        check_geometry(&spec, &train_data)?;
        if let Some(e) = &eval_data {
            check_geometry(&spec, e)?;
        }
        let model = Model::new(spec, config.seed, InitScheme::Standard)?;
        let optimizer = OptimizerState::new(&model.params, AdamW::new(config.weight_decay));
        let steps_per_epoch = train_data.len().div_ceil(config.batch_size);
        let schedule = LrSchedule::from_epochs(config.lr, config.warmup_epochs, config.epochs, steps_per_epoch);
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
            train_data,
            eval_data,
            schedule,
            steps_per_epoch,
            order: None,
        })
    }

    /// Restores a run from a checkpoint written by [`Trainer::checkpoint`],
    /// using the configuration stored inside it.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_json(&ckpt.text("meta.config_json")?)?;
        let mut t = Self::new(config)?;
        let spec: VariantSpec = serde_json::from_str(&ckpt.text("meta.spec_json")?)?;
        if spec != t.model.spec {
            return Err(Error::Schema("checkpoint variant differs from the configured one".into()));
        }
        ckpt.fill_store("param.", &mut t.model.params)?;
        t.optimizer.step = ckpt.integer("adamw.step")?;
        for (i, e) in t.model.params.entries().iter().enumerate() {
            if e.kind.trainable() {
                t.optimizer.m[i] = ckpt.tensor(&format!("adamw.m.{}", e.name))?;
                t.optimizer.v[i] = ckpt.tensor(&format!("adamw.v.{}", e.name))?;
            }
        }
        t.step = ckpt.integer("meta.step")?;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        let total = self.schedule.total_steps;
        self.config.max_steps.map_or(total, |m| m.min(total))
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        self.schedule
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch as u64;
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, epoch_order(self.train_data.len(), self.config.seed, epoch)));
        }
        let order = &self.order.as_ref().expect("order cached").1;
        let bs = self.config.batch_size;
        order[pos * bs..((pos + 1) * bs).min(order.len())].to_vec()
    }

    /// One optimizer step on the next batch of the run.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let step = self.step;
        let lr = lr_at(step, &self.schedule);
        let indices = self.batch_indices(step);
        let mut rng = augment_rng(self.config.seed, step);
        let (images, labels) = self
            .train_data
            .batch::<T>(&indices, self.config.augment.then_some(&mut rng));

        self.model.params.zero_grad();
        let (loss, hits, out) = {
            let mut s = Session::new(&self.model.params, Mode::Train, step_seed(self.config.seed, step));
            let x = s.constant(images);
            let fwd = self.model.forward(&mut s, x, self.config.drop_path)?;
            let loss = s.tape.cross_entropy(fwd.logits, &labels)?;
            let loss_value = s.tape.value(loss).data()[0].as_f64();
            let hits = correct(s.tape.value(fwd.logits), &labels);
            s.backward(loss)?;
            (loss_value, hits, s.finish())
        };
        out.apply(&mut self.model.params);
        let grad_norm = self.model.params.grad_norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged { step, lr, grad_norm });
        }
        self.optimizer.update(&mut self.model.params, lr)?;
        self.step += 1;
        Ok(StepStats {
            step,
            epoch: step / self.steps_per_epoch as u64,
            lr,
            loss,
            accuracy: hits as f64 / labels.len() as f64,
            grad_norm,
        })
    }

    /// Runs to the end of the schedule (or `max_steps`), evaluating and
    /// checkpointing every `eval_interval` epochs and at the end.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepStats)) -> Result<TrainReport> {
        let spe = self.steps_per_epoch as u64;
        let total = self.total_steps();
        let mut report = TrainReport {
            steps: 0,
            final_loss: f64::NAN,
            train_accuracy: 0.0,
            evaluations: Vec::new(),
            checkpoints: Vec::new(),
        };
        let (mut epoch_hits, mut epoch_seen) = (0.0, 0usize);
        while self.step < total {
            let stats = self.train_step()?;
            on_step(&stats);
            let n = self.batch_len(stats.step);
            epoch_hits += stats.accuracy * n as f64;
            epoch_seen += n;
            report.final_loss = stats.loss;
            report.steps += 1;
            let epoch_done = self.step.is_multiple_of(spe);
            if epoch_done || self.step == total {
                report.train_accuracy = epoch_hits / epoch_seen.max(1) as f64;
                (epoch_hits, epoch_seen) = (0.0, 0);
                let epoch = self.step.div_ceil(spe);
                if epoch.is_multiple_of(self.config.eval_interval as u64) || self.step == total {
                    if let Some(eval) = &self.eval_data {
                        report.evaluations.push((epoch, evaluate(&self.model, eval)?));
                    }
                    if let Some(dir) = &self.config.checkpoint_dir {
                        let ckpt = self.checkpoint()?;
                        let path = dir.join(format!("epoch_{epoch:04}.vipckpt"));
                        ckpt.save(&path)?;
                        ckpt.save(&dir.join("last.vipckpt"))?;
                        report.checkpoints.push(path);
                    }
                }
            }
        }
        Ok(report)
    }

    fn batch_len(&self, step: u64) -> usize {
        let pos = (step % self.steps_per_epoch as u64) as usize;
        let bs = self.config.batch_size;
        (self.train_data.len() - pos * bs).min(bs)
    }

    /// Everything needed to continue the run bit-exactly.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = model_checkpoint(&self.model, (self.train_data.height, self.train_data.width))?;
        c.push(Record::text("meta.config_json", &self.config.to_json()))?;
        c.push(Record::integers("meta.epoch", &[self.step / self.steps_per_epoch as u64]))?;
        c.push(Record::integers("meta.step", &[self.step]))?;
        c.push(Record::integers("meta.seed", &[self.config.seed]))?;
        c.push(Record::integers("adamw.step", &[self.optimizer.step]))?;
        let h = self.optimizer.hyper;
        c.push(Record::tensor(
            "adamw.hyper",
            &Tensor::<f64>::new(&[4], vec![h.beta1, h.beta2, h.eps, h.weight_decay])?,
        ))?;
        for (i, e) in self.model.params.entries().iter().enumerate() {
            if e.kind.trainable() {
                c.push(Record::tensor(format!("adamw.m.{}", e.name), &self.optimizer.m[i]))?;
                c.push(Record::tensor(format!("adamw.v.{}", e.name), &self.optimizer.v[i]))?;
            }
        }
        Ok(c)
    }
}

fn check_geometry(spec: &VariantSpec, data: &Dataset) -> Result<()> {
    if data.height < MIN_INPUT_SIDE || data.width < MIN_INPUT_SIDE {
        return Err(Error::dim(
            "dataset",
            format!("{}x{} images are smaller than the {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} minimum", data.height, data.width),
        ));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::Schema(format!("label {bad} but the model has {} classes", spec.num_classes)));
    }
    Ok(())
}

/// Model weights, spec and input geometry as a checkpoint.
pub fn model_checkpoint<T: Scalar>(model: &Model<T>, input_hw: (usize, usize)) -> Result<Checkpoint> {
    let mut c = Checkpoint::new();
    c.push(Record::text("meta.spec_json", &serde_json::to_string(&model.spec)?))?;
    c.push(Record::integers("meta.input_hw", &[input_hw.0 as u64, input_hw.1 as u64]))?;
    c.push_store("param.", &model.params)?;
    Ok(c)
}

impl<T: Scalar> Model<T> {
    /// Rebuilds a model from a checkpoint's spec and parameter records.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: VariantSpec = serde_json::from_str(&ckpt.text("meta.spec_json")?)?;
        let mut model = Model::new(spec, 0, InitScheme::Standard)?;
        ckpt.fill_store("param.", &mut model.params)?;
        Ok(model)
    }
}

/// Top-1 accuracy in evaluation mode, in dataset order, without augmentation.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    check_geometry(&model.spec, data)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(PathBuf::from("<evaluation set>")));
    }
    let mut hits = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch::<T>(chunk, None);
        let mut s = Session::new(&model.params, Mode::Eval, 0);
        let x = s.constant(images);
        let out = model.forward(&mut s, x, 0.0)?;
        hits += correct(s.tape.value(out.logits), &labels);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Evaluates a checkpoint, requiring the data to match the geometry it was
/// trained on.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &Dataset) -> Result<f64> {
    let hw = ckpt.integers("meta.input_hw")?;
    if hw != [data.height as u64, data.width as u64] {
        return Err(Error::dim(
            "evaluate",
            format!(
                "checkpoint expects {}x{} inputs, data is {}x{}",
                hw.first().copied().unwrap_or(0),
                hw.get(1).copied().unwrap_or(0),
                data.height,
                data.width
            ),
        ));
    }
    let model = Model::<f32>::from_checkpoint(ckpt)?;
    evaluate(&model, data)
}

/// Trains from a configuration and returns the final checkpoint.
pub fn train(config: TrainConfig) -> Result<Checkpoint> {
    let mut t = Trainer::<f32>::new(config)?;
    t.run(|_| {})?;
    t.checkpoint()
}

/// Store values as raw bytes, for bitwise comparisons in tests and tools.
pub fn store_bytes<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    for e in store.entries() {
        for v in e.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}
