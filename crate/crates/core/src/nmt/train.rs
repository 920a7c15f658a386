use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, TrainConfig};
use super::data::TaskData;
use super::data::Split;
use super::layers::Real;
use super::model::{Batch, Model, Params};
use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::heads::HeadMask;

/// Sentences per gradient job. Jobs are reduced in index order, so the sum
/// does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Encoded source and reference of one training sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<Token>,
    pub reference: Vec<Token>,
}

/// All language pairs of a split, interleaved by sentence id.
pub fn examples(task: &TaskData, split: Split) -> Result<Vec<Example>> {
    let corpora = task.split(split);
    let n = corpora.values().next().map_or(0, |c| c.len());
    let mut out = Vec::with_capacity(n * corpora.len());
    for sid in 0..n {
        for (lang, corpus) in corpora {
            let s = &corpus.sentences[sid];
            out.push(Example {
                source: task.vocab.encode_source(lang, &s.source)?,
                reference: s.reference.clone(),
            });
        }
    }
    Ok(out)
}

pub fn batch_of<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Batch {
    Batch::new(
        examples
            .into_iter()
            .map(|e| (e.source.as_slice(), e.reference.as_slice())),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: usize,
    /// Mean token cross-entropy over the epoch's training batches.
    pub train_loss: f64,
    /// Mean token cross-entropy on the fixed dev batch after the epoch.
    pub dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Dev loss of the initial parameters.
    pub initial_dev_loss: f64,
    pub epochs: Vec<EpochStats>,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(params: &Params<f32>) -> Self {
        let m: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params<f32>, grad: &Params<f32>, lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let b1 = tc.beta1 as f32;
        let b2 = tc.beta2 as f32;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        let eps = tc.adam_eps as f32;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Summed loss and gradient of `examples`, computed in fixed-size jobs and
/// reduced in order.
pub fn batch_gradient<T: Real>(model: &Model<T>, examples: &[&Example]) -> Result<(f64, usize, Params<T>)> {
    let parts: Vec<Result<(f64, Params<T>)>> = examples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| model.loss_and_grad(&batch_of(chunk.iter().copied()), &HeadMask::empty()))
        .collect();
    let tokens = examples.iter().map(|e| e.reference.len() + 1).sum();
    let mut loss = 0.0;
    let mut total: Option<Params<T>> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        match &mut total {
            Some(t) => t.add_assign(&g),
            None => total = Some(g),
        }
    }
    let grad = total.unwrap_or_else(|| model.params.zeros_like());
    Ok((loss, tokens, grad))
}

pub fn mean_loss<T: Real>(model: &Model<T>, examples: &[Example]) -> Result<f64> {
    let parts: Vec<Result<f64>> = examples
        .par_chunks(GRAD_CHUNK * 4)
        .map(|c| model.loss(&batch_of(c), &HeadMask::empty()))
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    let tokens: usize = examples.iter().map(|e| e.reference.len() + 1).sum();
    Ok(total / tokens.max(1) as f64)
}

/// Trains from the config's initialisation. `dev` provides the fixed dev
/// batch for loss tracking; `on_epoch` observes progress.
pub fn train(
    config: &ModelConfig,
    train_set: &[Example],
    dev: &[Example],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Checkpoint, TrainReport)> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut model = Model::<f32>::new(config.clone())?;
    for e in train_set.iter().chain(dev) {
        if e.source.len() > config.max_len || e.reference.len() + 1 > config.max_len {
            return Err(Error::Config(format!(
                "example longer than max_len {}",
                config.max_len
            )));
        }
        if e.source.iter().chain(&e.reference).any(|&t| t as usize >= config.vocab_size) {
            return Err(Error::Config("example token outside the model vocabulary".into()));
        }
    }
    let dev_set = &dev[..tc.dev_batch.min(dev.len())];
    let mut report = TrainReport {
        initial_dev_loss: if dev_set.is_empty() { f64::NAN } else { mean_loss(&model, dev_set)? },
        epochs: Vec::new(),
    };
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    let total_steps = tc.epochs * train_set.len().div_ceil(tc.batch_size);

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for ids in order.chunks(tc.batch_size) {
            let batch: Vec<&Example> = ids.iter().map(|&i| &train_set[i]).collect();
            let (loss, tokens, mut grad) = batch_gradient(&model, &batch)?;
            if !loss.is_finite() || !grad.sq_norm().is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            epoch_loss += loss;
            epoch_tokens += tokens;
            grad.scale(1.0 / tokens as f32);
            if tc.clip_norm > 0.0 {
                let norm = grad.sq_norm().sqrt();
                if norm > tc.clip_norm {
                    grad.scale((tc.clip_norm / norm) as f32);
                }
            }
            adam.step(&mut model.params, &grad, tc.lr_at(step, total_steps), tc);
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            step,
            train_loss: epoch_loss / epoch_tokens.max(1) as f64,
            dev_loss: if dev_set.is_empty() { f64::NAN } else { mean_loss(&model, dev_set)? },
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }

    Ok((
        Checkpoint {
            config: model.config.clone(),
            step: step as u64,
            params: model.params,
        },
        report,
    ))
}
