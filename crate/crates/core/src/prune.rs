//! First-order Taylor importance and the iterative prune-while-training
//! loop.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack, Augment, Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{resolve_prune_groups, visit_member_params, Mode, NetworkGraph, ParamSet, PrunePlan, PruneGroups};
use crate::seed::derive_seed;
use crate::tensor::Sgdm;
use crate::train::{run_epoch, train, EpochPlan, TrainConfig, TrainOutcome};

/// How member parameters are reduced to a group score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringStrategy {
    /// `Σ (g·w)²` over the group's parameters.
    #[default]
    Taylor,
    /// The same sum divided by the group's parameter count.
    TaylorPerParameter,
}

/// Per-group importance of one minibatch, from the gradients of that
/// minibatch's loss and the weights they were computed at.
pub fn group_importance(
    graph: &NetworkGraph,
    groups: &PruneGroups,
    grads: &ParamSet,
    strategy: ScoringStrategy,
) -> Result<Vec<f64>> {
    if grads.len() != graph.nodes.len()
        || graph
            .nodes
            .iter()
            .zip(grads)
            .any(|(n, g)| n.params.len() != g.len() || n.params.iter().zip(g).any(|(p, gt)| p.shape() != gt.shape()))
    {
        return Err(Error::Backward("gradients missing or misaligned with the graph's parameters".into()));
    }
    let mut scores = Vec::with_capacity(groups.len());
    for group in groups.groups() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for m in &group.members {
            let node = &graph.nodes[m.node];
            visit_member_params(node, m.channel, |p, k| {
                let gw = grads[m.node][p].data()[k] * node.params[p].data()[k];
                sum += gw * gw;
                count += 1;
            });
        }
        scores.push(match strategy {
            ScoringStrategy::Taylor => sum,
            ScoringStrategy::TaylorPerParameter => sum / count.max(1) as f64,
        });
    }
    Ok(scores)
}

/// Running per-group score sums over the minibatches of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTable {
    sums: Vec<f64>,
    count: usize,
}

impl ImportanceTable {
    pub fn new(groups: usize) -> Self {
        ImportanceTable {
            sums: vec![0.0; groups],
            count: 0,
        }
    }

    pub fn accumulate(&mut self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.sums.len() {
            return Err(Error::Prune(format!("{} scores for {} groups", scores.len(), self.sums.len())));
        }
        for (s, v) in self.sums.iter_mut().zip(scores) {
            *s += v;
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    /// Epoch averages; `None` before the first minibatch.
    pub fn averages(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sums.iter().map(|s| s / self.count as f64).collect())
    }
}

fn default_fraction() -> f64 {
    0.01
}

fn default_subset() -> f64 {
    0.25
}

fn default_lr() -> f64 {
    0.01
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    /// Share of live filters removed after each epoch.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    /// Share of the training split used for scoring epochs.
    #[serde(default = "default_subset")]
    pub subset_fraction: f64,
    /// Stop once this share of the original filters is gone.
    #[serde(default)]
    pub target_sparsity: Option<f64>,
    /// Stop after this many epochs.
    #[serde(default)]
    pub max_iterations: Option<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    /// Draw a fresh scoring subset every epoch instead of once per run.
    #[serde(default)]
    pub resample_subset: bool,
    #[serde(default)]
    pub scoring: ScoringStrategy,
    /// Call the evaluation hook every this many iterations (0 = never).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::Config(format!("prune fraction must lie in (0, 1), got {}", self.fraction)));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "scoring subset fraction must lie in (0, 1], got {}",
                self.subset_fraction
            )));
        }
        if self.target_sparsity.is_none() && self.max_iterations.is_none() {
            return Err(Error::Config("prune schedule needs a target sparsity or an iteration budget".into()));
        }
        if let Some(t) = self.target_sparsity {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("target sparsity must lie in (0, 1), got {t}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Sgdm::new(self.lr, self.momentum)?;
        Ok(())
    }

    /// Number of groups to remove from `live`.
    pub fn removal_count(&self, live: usize) -> usize {
        (self.fraction * live as f64).ceil() as usize
    }
}

/// Lowest-scoring groups chosen for removal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub chosen: Vec<usize>,
    /// Groups passed over because removing them would empty a layer.
    pub skipped: Vec<usize>,
}

/// Picks the `k` lowest scores, ties broken by group order (anchor layer
/// index, then channel index), skipping any group whose removal would
/// leave a layer without channels.
pub fn select_lowest(graph: &NetworkGraph, groups: &PruneGroups, scores: &[f64], k: usize) -> Result<Selection> {
    if scores.len() != groups.len() {
        return Err(Error::Prune(format!("{} scores for {} groups", scores.len(), groups.len())));
    }
    let shapes = graph.shapes()?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut live: Vec<usize> = shapes.iter().map(|s| s.channels).collect();
    let mut chosen = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for gid in order {
        if chosen.len() == k {
            break;
        }
        let group = &groups.groups()[gid];
        let mut per_node: HashMap<usize, usize> = HashMap::new();
        for m in &group.members {
            *per_node.entry(m.node).or_default() += 1;
        }
        if per_node.iter().any(|(&n, &c)| live[n] <= c) {
            skipped.push(gid);
            continue;
        }
        for (n, c) in per_node {
            live[n] -= c;
        }
        chosen.push(gid);
    }
    Ok(Selection { chosen, skipped })
}

/// A group removed during pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct RemovedGroup {
    /// Id of the group's first member layer.
    pub layer: String,
    /// Channel index in that layer at removal time.
    pub channel: usize,
    /// Output width of that layer in the unpruned network.
    pub original_width: usize,
    /// Epoch-average score.
    pub score: f64,
}

pub struct PruneEpochOutcome {
    pub graph: NetworkGraph,
    pub velocity: ParamSet,
    pub table: ImportanceTable,
    pub removed: Vec<RemovedGroup>,
    /// Groups passed over; see [`Selection::skipped`].
    pub skipped: usize,
    pub train_loss: f64,
    pub warnings: Vec<String>,
}

/// Inputs of one pruning epoch that stay fixed over a run.
pub struct PruneContext<'a> {
    pub data: &'a Dataset,
    pub augment: &'a Augment,
    pub schedule: &'a PruneSchedule,
    /// Original output width of every layer, by node id.
    pub original_widths: &'a HashMap<String, usize>,
}

/// One epoch over `subset`: forward, backward, importance accumulation at
/// the pre-update weights, SGDM update; then removal of the
/// `⌈fraction · live⌉` lowest-average groups.
pub fn prune_epoch(
    graph: &NetworkGraph,
    velocity: &ParamSet,
    subset: &[usize],
    ctx: &PruneContext,
    rng: &mut ChaCha8Rng,
) -> Result<PruneEpochOutcome> {
    let schedule = ctx.schedule;
    let groups = resolve_prune_groups(graph)?;
    let mut table = ImportanceTable::new(groups.len());
    let mut current = graph.clone();
    let mut vel = velocity.clone();
    let plan = EpochPlan {
        data: ctx.data,
        indices: subset,
        augment: ctx.augment,
        batch_size: schedule.batch_size,
        optimizer: Sgdm::new(schedule.lr, schedule.momentum)?,
    };
    let train_loss = run_epoch(&mut current, &mut vel, &plan, rng, |g, grads| {
        table.accumulate(&group_importance(g, &groups, grads, schedule.scoring)?)
    })?;

    let mut warnings = Vec::new();
    let Some(avg) = table.averages() else {
        warnings.push("scoring subset produced no minibatches; nothing removed".to_string());
        return Ok(PruneEpochOutcome {
            graph: current,
            velocity: vel,
            table,
            removed: vec![],
            skipped: 0,
            train_loss,
            warnings,
        });
    };
    let k = schedule.removal_count(groups.len());
    if k == 0 {
        warnings.push(format!("removal count is 0 for {} live filters", groups.len()));
    }
    let sel = select_lowest(&current, &groups, &avg, k)?;
    if !sel.skipped.is_empty() {
        warnings.push(format!("skipped {} groups that would empty a layer", sel.skipped.len()));
    }
    if sel.chosen.len() < k {
        warnings.push(format!("removed {} of {k} requested groups", sel.chosen.len()));
    }
    let removed = sel
        .chosen
        .iter()
        .map(|&gid| {
            let a = groups.groups()[gid].anchor;
            let id = current.nodes[a.node].id.clone();
            RemovedGroup {
                original_width: ctx.original_widths.get(&id).copied().unwrap_or(0),
                layer: id,
                channel: a.channel,
                score: avg[gid],
            }
        })
        .collect();
    let prune = PrunePlan::new(&current, &groups, &sel.chosen)?;
    let velocity = prune.apply_params(&current, &vel)?;
    let graph = prune.apply(&current)?;
    Ok(PruneEpochOutcome {
        graph,
        velocity,
        table,
        removed,
        skipped: sel.skipped.len(),
        train_loss,
        warnings,
    })
}

/// Metrics reported by the evaluation hook.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub eer_1to1: Option<f64>,
    pub eer_5to5: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneRecord {
    pub iteration: usize,
    pub pruned_fraction: f64,
    pub live_filters: usize,
    pub learnables: usize,
    pub embedding_size: usize,
    /// Output width of every conv layer, in node order.
    pub filters_per_layer: Vec<usize>,
    pub removed: Vec<RemovedGroup>,
    pub skipped: usize,
    pub train_loss: f64,
    pub metrics: Option<EvalMetrics>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PruneTrajectory {
    /// Conv layer ids, matching `filters_per_layer`.
    pub layers: Vec<String>,
    /// Iteration 0 describes the unpruned network.
    pub records: Vec<PruneRecord>,
    pub warnings: Vec<String>,
}

pub struct PruneRun {
    pub graph: NetworkGraph,
    pub trajectory: PruneTrajectory,
}

/// Original layer widths keyed by node id.
pub fn layer_widths(graph: &NetworkGraph) -> Result<HashMap<String, usize>> {
    let shapes = graph.shapes()?;
    Ok(graph
        .nodes
        .iter()
        .zip(shapes)
        .map(|(n, s)| (n.id.clone(), s.channels))
        .collect())
}

fn record(graph: &NetworkGraph, iteration: usize, initial: usize, live: usize) -> PruneRecord {
    PruneRecord {
        iteration,
        pruned_fraction: 1.0 - live as f64 / initial as f64,
        live_filters: live,
        learnables: graph.count_learnables(),
        embedding_size: graph.embedding_size(),
        filters_per_layer: graph.filters_per_layer().into_iter().map(|(_, c)| c).collect(),
        removed: vec![],
        skipped: 0,
        train_loss: f64::NAN,
        metrics: None,
    }
}

/// Iterates [`prune_epoch`] until the target sparsity or the iteration
/// budget is reached. `on_iteration` sees every record (iteration 0
/// included) with the graph it describes; `eval` runs at the configured
/// interval and at the end.
pub fn run_pruning(
    graph: &NetworkGraph,
    data: &Dataset,
    augment: &Augment,
    schedule: &PruneSchedule,
    mut eval: impl FnMut(usize, &NetworkGraph) -> Result<EvalMetrics>,
    mut on_iteration: impl FnMut(&PruneRecord, &NetworkGraph) -> Result<()>,
) -> Result<PruneRun> {
    schedule.validate()?;
    augment.validate()?;
    let train_idx = data.indices(Split::Train);
    let subset_seed = derive_seed(schedule.seed, "prune/subset");
    let mut subset = data.subsample(&train_idx, schedule.subset_fraction, subset_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(schedule.seed, "prune/batches"));
    let original_widths = layer_widths(graph)?;
    let ctx = PruneContext {
        data,
        augment,
        schedule,
        original_widths: &original_widths,
    };

    let initial = resolve_prune_groups(graph)?.len();
    if initial == 0 {
        return Err(Error::Prune("network has no prunable filters".into()));
    }
    let mut trajectory = PruneTrajectory {
        layers: graph.filters_per_layer().into_iter().map(|(id, _)| id).collect(),
        ..Default::default()
    };
    let mut current = graph.clone();
    let mut velocity = current.zeros_like_params();
    let mut first = record(&current, 0, initial, initial);
    if schedule.eval_every > 0 {
        first.metrics = Some(eval(0, &current)?);
    }
    on_iteration(&first, &current)?;
    trajectory.records.push(first);

    let mut live = initial;
    let mut iteration = 0;
    loop {
        let reached = schedule
            .target_sparsity
            .is_some_and(|t| 1.0 - live as f64 / initial as f64 >= t - 1e-12);
        let budget = schedule.max_iterations.is_some_and(|m| iteration >= m);
        if reached || budget {
            break;
        }
        iteration += 1;
        if schedule.resample_subset {
            subset = data.subsample(&train_idx, schedule.subset_fraction, derive_seed(subset_seed, &iteration.to_string()));
        }
        let out = prune_epoch(&current, &velocity, &subset, &ctx, &mut rng)?;
        for w in &out.warnings {
            log::warn!("iteration {iteration}: {w}");
            trajectory.warnings.push(format!("iteration {iteration}: {w}"));
        }
        if out.removed.is_empty() {
            trajectory.warnings.push(format!("iteration {iteration}: no removable filters left; stopping"));
            break;
        }
        live -= out.removed.len();
        current = out.graph;
        velocity = out.velocity;
        let mut rec = record(&current, iteration, initial, live);
        rec.removed = out.removed;
        rec.skipped = out.skipped;
        rec.train_loss = out.train_loss;
        let at_end = schedule
            .target_sparsity
            .is_some_and(|t| 1.0 - live as f64 / initial as f64 >= t - 1e-12)
            || schedule.max_iterations == Some(iteration);
        if schedule.eval_every > 0 && (iteration % schedule.eval_every == 0 || at_end) {
            rec.metrics = Some(eval(iteration, &current)?);
        }
        log::info!(
            "prune iteration {iteration}: {:.1}% pruned, {} learnables",
            rec.pruned_fraction * 100.0,
            rec.learnables
        );
        on_iteration(&rec, &current)?;
        trajectory.records.push(rec);
    }
    Ok(PruneRun {
        graph: current,
        trajectory,
    })
}

/// Retrains a pruned network with the ordinary trainer.
pub fn retrain(graph: &NetworkGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(graph, data, cfg)
}

/// Epoch-averaged importance at fixed weights (no updates), over
/// evaluation views of `indices` in order.
pub fn score_without_updates(
    graph: &NetworkGraph,
    data: &Dataset,
    indices: &[usize],
    augment: &Augment,
    batch_size: usize,
    strategy: ScoringStrategy,
) -> Result<(PruneGroups, ImportanceTable)> {
    let head = graph
        .head
        .ok_or_else(|| Error::Graph("scoring needs a classifier head".into()))?;
    let groups = resolve_prune_groups(graph)?;
    let mut table = ImportanceTable::new(groups.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let views: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&i| augment.eval_view(&data.samples[i].pixels, data.channels, data.size))
            .collect();
        let batch = stack(&views, data.channels, augment.crop)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
        let mut fwd = graph.forward(&batch, Mode::Train)?;
        let loss = fwd.tape.softmax_cross_entropy(fwd.outputs[head], &labels)?;
        fwd.tape.backward(loss)?;
        let grads = fwd.param_grads(graph);
        table.accumulate(&group_importance(graph, &groups, &grads, strategy)?)?;
    }
    Ok((groups, table))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// `iteration,pruned_fraction,learnables,embedding_size,eer_1to1,eer_5to5`
pub fn trajectory_csv(t: &PruneTrajectory) -> String {
    let mut s = String::from("iteration,pruned_fraction,learnables,embedding_size,eer_1to1,eer_5to5\n");
    for r in &t.records {
        let m = r.metrics.unwrap_or_default();
        s.push_str(&format!(
            "{},{:.6},{},{},{},{}\n",
            r.iteration,
            r.pruned_fraction,
            r.learnables,
            r.embedding_size,
            opt(m.eer_1to1),
            opt(m.eer_5to5)
        ));
    }
    s
}

/// Iteration × conv-layer matrix of output widths.
pub fn layer_filters_csv(t: &PruneTrajectory) -> String {
    let mut s = String::from("iteration");
    for l in &t.layers {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for r in &t.records {
        s.push_str(&r.iteration.to_string());
        for c in &r.filters_per_layer {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
    }
    s
}

/// One row per removed group.
pub fn removals_csv(t: &PruneTrajectory) -> String {
    let mut s = String::from("iteration,layer,channel,original_width,score\n");
    for r in &t.records {
        for g in &r.removed {
            s.push_str(&format!(
                "{},{},{},{},{:e}\n",
                r.iteration, g.layer, g.channel, g.original_width, g.score
            ));
        }
    }
    s
}
