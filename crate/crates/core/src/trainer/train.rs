use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{stack_batch, SegSample};
use super::optim::{poly_lr, Adam};
use super::sliding::sliding_window_infer;
use super::Model;
use crate::autodiff::Tape;
use crate::config::{ModelConfig, TrainConfig};
use crate::container::{Entry, EntryData, TensorFile};
use crate::decoder::predict_mask;
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::metrics::{evaluate_sample, MetricReport};
use crate::params::ParamStore;

/// Name of the UTF-8 model-config entry inside a checkpoint.
pub const CONFIG_ENTRY: &str = "meta.config";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub dice: f64,
    pub ce: f64,
    pub total: f64,
}

/// Seeded batch order: the sample indices are reshuffled each time the
/// queue runs dry, so every sample is seen once per pass.
struct BatchSampler {
    rng: ChaCha8Rng,
    n: usize,
    queue: VecDeque<usize>,
}

impl BatchSampler {
    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.queue.is_empty() {
                    let mut order: Vec<usize> = (0..self.n).collect();
                    order.shuffle(&mut self.rng);
                    self.queue.extend(order);
                }
                self.queue.pop_front().unwrap()
            })
            .collect()
    }
}

/// Runs `cfg.total_steps()` Adam steps with poly decay on dice + CE.
/// `on_step` sees every log row as it is produced.
pub fn train(model: &mut Model, data: &[SegSample], cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let classes = model.cfg.decoder.num_classes;
    if let Some(s) = data.iter().find(|s| s.num_classes != classes) {
        return Err(Error::Config(format!("{} has {} classes, model has {classes}", s.id, s.num_classes)));
    }
    let total_steps = cfg.total_steps();
    let mut sampler = BatchSampler { rng: ChaCha8Rng::seed_from_u64(cfg.seed), n: data.len(), queue: VecDeque::new() };
    let mut adam = Adam::from_config(cfg);
    let mut log = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let (images, mask) = stack_batch(data, &sampler.next(cfg.batch_size))?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let logits = model.forward(&mut tape, x)?;
        let terms = total_loss(&mut tape, logits, &mask)?;
        let row = StepLog {
            step,
            lr: poly_lr(step, total_steps, cfg.lr0, cfg.poly_power),
            dice: tape.value(terms.dice).item(),
            ce: tape.value(terms.ce).item(),
            total: tape.value(terms.total).item(),
        };
        if !row.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        tape.backward(terms.total)?;
        model.store.zero_grads();
        model.store.accumulate_grads(&tape);
        adam.step(&mut model.store, row.lr)?;
        on_step(&row);
        log.push(row);
    }
    model.store.zero_grads();
    Ok(log)
}

pub fn format_loss_log(log: &[StepLog]) -> String {
    let mut s = String::from("step\tlr\tdice_loss\tce_loss\ttotal\n");
    for r in log {
        let _ = writeln!(s, "{}\t{:e}\t{:e}\t{:e}\t{:e}", r.step, r.lr, r.dice, r.ce, r.total);
    }
    s
}

/// All parameters (f64) plus the model config as a UTF-8 TOML block.
pub fn checkpoint_file(model: &Model) -> Result<TensorFile> {
    let mut file = model.store.to_container("");
    let text = toml::to_string(&model.cfg).map_err(|e| Error::Format(format!("config encode: {e}")))?;
    file.push(Entry { name: CONFIG_ENTRY.into(), trainable: false, dims: vec![text.len()], data: EntryData::U8(text.into_bytes()) });
    Ok(file)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    checkpoint_file(model)?.save(path)
}

/// Rebuilds the model from the embedded config and overwrites every
/// parameter with the stored values; names and shapes must match exactly.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = TensorFile::load(path)?;
    let entry = file.get(CONFIG_ENTRY).ok_or_else(|| Error::Format(format!("checkpoint lacks `{CONFIG_ENTRY}`")))?;
    let EntryData::U8(bytes) = &entry.data else {
        return Err(Error::Format(format!("`{CONFIG_ENTRY}` must be u8")));
    };
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("config block: {e}")))?;
    let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config block: {e}")))?;
    let mut model = Model::build(cfg)?;
    let stored = ParamStore::from_container(&file)?;
    if stored.len() != model.store.len() {
        return Err(Error::Format(format!("checkpoint has {} tensors, model expects {}", stored.len(), model.store.len())));
    }
    for (name, e) in stored.iter() {
        let slot = model.store.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.value.shape() != e.value.shape() {
            return Err(Error::shape("load_checkpoint", format!("{name}: {:?} vs {:?}", e.value.shape(), slot.value.shape())));
        }
        slot.value = e.value.clone();
    }
    Ok(model)
}

/// Metrics of `model` on `data`, by full-image or sliding-window inference.
pub fn evaluate(model: &Model, data: &[SegSample], window: Option<(usize, f64)>) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for s in data {
        let (h, w) = (s.height(), s.width());
        let image = s.image.reshape(&[1, 3, h, w])?;
        let logits = match window {
            Some((win, overlap)) => sliding_window_infer(model, &image, win, overlap)?,
            None => model.logits(&image)?,
        };
        let pred = predict_mask(&logits);
        report.push_sample(evaluate_sample(&s.id, &pred, &s.mask, h, w, s.num_classes));
    }
    Ok(report)
}
