//! Cross-entropy training with SGDM and a plateau-driven learning-rate
//! ladder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack, Augment, Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{Mode, NetworkGraph, ParamSet};
use crate::tensor::{Sgdm, Tensor};

pub const DEFAULT_LR_LADDER: [f64; 4] = [0.01, 0.005, 0.001, 0.0001];

fn default_lr_ladder() -> Vec<f64> {
    DEFAULT_LR_LADDER.to_vec()
}

fn default_patience() -> usize {
    3
}

fn default_threshold() -> f64 {
    1e-4
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Learning rates in order of use; the first is the initial rate.
    #[serde(default = "default_lr_ladder")]
    pub lr_ladder: Vec<f64>,
    /// Epochs without validation improvement before stepping down.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Relative improvement that resets the patience counter.
    #[serde(default = "default_threshold")]
    pub plateau_threshold: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub augment: Augment,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.lr_ladder.is_empty() || self.lr_ladder.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "learning-rate ladder must be non-empty and strictly decreasing, got {:?}",
                self.lr_ladder
            )));
        }
        for &lr in &self.lr_ladder {
            Sgdm::new(lr, self.momentum)?;
        }
        if self.patience == 0 || !(self.plateau_threshold >= 0.0) {
            return Err(Error::Config("patience must be ≥1 and threshold non-negative".into()));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Epoch budget used up.
    MaxEpochs,
    /// Plateau at the last rung of the ladder.
    LadderExhausted,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights with the lowest validation loss seen, initial weights included.
    pub graph: NetworkGraph,
    pub history: Vec<EpochRecord>,
    /// 0 when no epoch improved on the initial weights.
    pub best_epoch: usize,
    pub stop: StopReason,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Tracks the plateau schedule; usable for any loss sequence.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    ladder: Vec<f64>,
    rung: usize,
    patience: usize,
    threshold: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(ladder: &[f64], patience: usize, threshold: f64, initial_loss: f64) -> Self {
        PlateauSchedule {
            ladder: ladder.to_vec(),
            rung: 0,
            patience,
            threshold,
            best: initial_loss,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.ladder[self.rung]
    }

    /// Records a validation loss. Returns `(improved, exhausted)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        let improved = loss < self.best - self.threshold * self.best.abs();
        if improved {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let mut exhausted = false;
        if self.stale >= self.patience {
            if self.rung + 1 < self.ladder.len() {
                self.rung += 1;
                self.stale = 0;
            } else {
                exhausted = true;
            }
        }
        (improved, exhausted)
    }
}

/// Mean cross-entropy and top-1 accuracy on the evaluation views of
/// `indices`.
pub fn evaluate(graph: &NetworkGraph, data: &Dataset, indices: &[usize], aug: &Augment) -> Result<Evaluation> {
    let head = graph
        .head
        .ok_or_else(|| Error::Graph("evaluation needs a classifier head".into()))?;
    if indices.is_empty() {
        return Ok(Evaluation {
            loss: f64::NAN,
            accuracy: f64::NAN,
        });
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(64) {
        let views: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&i| aug.eval_view(&data.samples[i].pixels, data.channels, data.size))
            .collect();
        let batch = stack(&views, data.channels, aug.crop)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
        let mut fwd = graph.run(&batch, Mode::Eval, false)?;
        let logits = fwd.outputs[head];
        let l = fwd.tape.softmax_cross_entropy(logits, &labels)?;
        loss += fwd.tape.value(l).data()[0] * chunk.len() as f64;
        correct += count_correct(fwd.tape.value(logits), &labels);
    }
    Ok(Evaluation {
        loss: loss / indices.len() as f64,
        accuracy: correct as f64 / indices.len() as f64,
    })
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Options for one pass over a sample list.
pub struct EpochPlan<'a> {
    pub data: &'a Dataset,
    pub indices: &'a [usize],
    pub augment: &'a Augment,
    pub batch_size: usize,
    pub optimizer: Sgdm,
}

/// One shuffled pass of minibatch SGDM. `inspect` sees the graph and the
/// parameter gradients of every minibatch before the update is applied.
/// Returns the sample-weighted mean training loss.
pub fn run_epoch(
    graph: &mut NetworkGraph,
    velocity: &mut ParamSet,
    plan: &EpochPlan,
    rng: &mut ChaCha8Rng,
    mut inspect: impl FnMut(&NetworkGraph, &ParamSet) -> Result<()>,
) -> Result<f64> {
    let head = graph
        .head
        .ok_or_else(|| Error::Graph("training needs a classifier head".into()))?;
    let data = plan.data;
    let mut order = plan.indices.to_vec();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(plan.batch_size) {
        let views: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&i| plan.augment.train_view(&data.samples[i].pixels, data.channels, data.size, rng))
            .collect();
        let batch = stack(&views, data.channels, plan.augment.crop)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
        let mut fwd = graph.forward(&batch, Mode::Train)?;
        let loss = fwd.tape.softmax_cross_entropy(fwd.outputs[head], &labels)?;
        let value = fwd.tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged: loss is {value} at learning rate {}",
                plan.optimizer.lr
            )));
        }
        fwd.tape.backward(loss)?;
        let grads = fwd.param_grads(graph);
        inspect(graph, &grads)?;
        graph.update_running_stats(&fwd.bn_stats);
        for ((node, g), v) in graph.nodes.iter_mut().zip(&grads).zip(velocity.iter_mut()) {
            for ((p, gt), vt) in node.params.iter_mut().zip(g).zip(v.iter_mut()) {
                plan.optimizer.step(p, gt.data(), vt)?;
            }
        }
        total += value * chunk.len() as f64;
    }
    Ok(total / order.len().max(1) as f64)
}

fn check_compat(graph: &NetworkGraph, data: &Dataset, aug: &Augment) -> Result<()> {
    if graph.class_count() != Some(data.class_count) {
        return Err(Error::Config(format!(
            "classifier head has {:?} outputs, dataset has {} classes",
            graph.class_count(),
            data.class_count
        )));
    }
    let inp = graph.input;
    if inp.channels != data.channels || inp.height != aug.crop || inp.width != aug.crop {
        return Err(Error::Config(format!(
            "network expects {}×{}×{} inputs, data pipeline yields {}×{}×{}",
            inp.channels, inp.height, inp.width, data.channels, aug.crop, aug.crop
        )));
    }
    Ok(())
}

/// Trains until the ladder is exhausted or `max_epochs` is reached and
/// returns the best-validation weights.
pub fn train(graph: &NetworkGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compat(graph, data, &cfg.augment)?;
    let train_idx = data.indices(Split::Train);
    let mut val_idx = data.indices(Split::Val);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = graph.clone();
    let mut velocity = current.zeros_like_params();
    let initial = evaluate(&current, data, &val_idx, &cfg.augment)?;
    let mut schedule = PlateauSchedule::new(&cfg.lr_ladder, cfg.patience, cfg.plateau_threshold, initial.loss);
    let mut best = (initial.loss, current.clone(), 0usize);
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        let plan = EpochPlan {
            data,
            indices: &train_idx,
            augment: &cfg.augment,
            batch_size: cfg.batch_size,
            optimizer: Sgdm::new(lr, cfg.momentum)?,
        };
        let train_loss = run_epoch(&mut current, &mut velocity, &plan, &mut rng, |_, _| Ok(()))?;
        let val = evaluate(&current, data, &val_idx, &cfg.augment)?;
        if !val.loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss is {} after epoch {epoch}", val.loss)));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            lr,
        });
        log::debug!("epoch {epoch}: train {train_loss:.4} val {:.4} acc {:.3} lr {lr}", val.loss, val.accuracy);
        if val.loss < best.0 {
            best = (val.loss, current.clone(), epoch);
        }
        let (_, exhausted) = schedule.observe(val.loss);
        if exhausted {
            stop = StopReason::LadderExhausted;
            break;
        }
    }
    Ok(TrainOutcome {
        graph: best.1,
        history,
        best_epoch: best.2,
        stop,
    })
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_accuracy,lr\n");
    for r in history {
        s.push_str(&format!(
            "{},{:.9},{:.9},{:.6},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.lr
        ));
    }
    s
}
