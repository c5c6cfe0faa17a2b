//! Pipeline stages over one run directory: data, training, pruning,
//! retraining, verification, explanation. Every artifact carries the
//! config hash and is checked against it when read back.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ladder_name, ExperimentConfig};
use crate::data::{generate_synthetic_identities, Dataset, Split};
use crate::error::{Error, Result};
use crate::explain::{
    average_heatmap, compare_networks, heatmap_csv, heatmap_pgm, histogram, histogram_csv, psnr_csv, Comparison,
    PSNR_CAP,
};
use crate::graph::{build_architecture, Checkpoint, NetworkGraph};
use crate::prune::{layer_filters_csv, removals_csv, run_pruning, trajectory_csv, EvalMetrics, PruneRun};
use crate::seed::derive_seed;
use crate::train::{evaluate, history_csv, train, TrainOutcome};
use crate::verify::{build_templates, eer_csv, extract_descriptors, score_protocol, scores_csv, Eer, EerRow, ScoreSet};

pub const ORIGINAL: &str = "original";
pub const PRUNED: &str = "pruned";
const HASH_KEY: &str = "config_hash";

/// Artifact locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config(&self) -> PathBuf {
        self.at("config.toml")
    }
    pub fn train_data(&self) -> PathBuf {
        self.at("data/train.fpds")
    }
    pub fn verify_data(&self) -> PathBuf {
        self.at("data/verify.fpds")
    }
    pub fn trained(&self) -> PathBuf {
        self.at("model/trained.fpm")
    }
    pub fn train_history(&self) -> PathBuf {
        self.at("model/history.csv")
    }
    pub fn checkpoint(&self, iteration: usize) -> PathBuf {
        self.at(&format!("prune/checkpoints/iter_{iteration:04}.fpm"))
    }
    pub fn trajectory(&self) -> PathBuf {
        self.at("prune/trajectory.csv")
    }
    pub fn layer_filters(&self) -> PathBuf {
        self.at("prune/layer_filters.csv")
    }
    pub fn removals(&self) -> PathBuf {
        self.at("prune/removals.csv")
    }
    pub fn accuracy(&self) -> PathBuf {
        self.at("prune/accuracy.csv")
    }
    pub fn retrained(&self, variant: &str, iteration: usize) -> PathBuf {
        self.at(&format!("retrain/{variant}/iter_{iteration:04}.fpm"))
    }
    pub fn retrain_history(&self, variant: &str, iteration: usize) -> PathBuf {
        self.at(&format!("retrain/{variant}/iter_{iteration:04}_history.csv"))
    }
    pub fn eval_summary(&self) -> PathBuf {
        self.at("eval/summary.csv")
    }
    pub fn eer(&self, variant: &str) -> PathBuf {
        self.at(&format!("eval/eer_{variant}.csv"))
    }
    pub fn scores(&self, variant: &str, iteration: usize, template: usize) -> PathBuf {
        self.at(&format!("eval/{variant}/iter_{iteration:04}_t{template}.csv"))
    }
    pub fn explain_dir(&self) -> PathBuf {
        self.at("explain")
    }
    pub fn explain_summary(&self) -> PathBuf {
        self.at("explain/summary.csv")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.at("report")
    }
}

fn missing(path: &Path) -> Error {
    Error::MissingInput(path.display().to_string())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => missing(path),
        _ => Error::Io(e),
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn hash_line(hash: &str) -> String {
    format!("# {HASH_KEY}={hash}\n")
}

/// Writes `body` under a config-hash comment line.
pub fn write_text(path: &Path, hash: &str, body: &str) -> Result<()> {
    write_bytes(path, format!("{}{body}", hash_line(hash)).as_bytes())
}

/// Reads a text artifact and strips its hash line, which must match.
pub fn read_text(path: &Path, hash: &str) -> Result<String> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::Corrupt(format!("{} is not UTF-8", path.display())))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let found = first
        .strip_prefix(&format!("# {HASH_KEY}="))
        .ok_or_else(|| Error::Corrupt(format!("{} has no config hash line", path.display())))?;
    check_hash(path, found, hash)?;
    Ok(rest.to_string())
}

fn check_hash(path: &Path, found: &str, want: &str) -> Result<()> {
    if found != want {
        return Err(Error::Config(format!(
            "{} was produced by config {found}, current config is {want}",
            path.display()
        )));
    }
    Ok(())
}

fn write_checkpoint(path: &Path, hash: &str, graph: &NetworkGraph, meta: &[(&str, String)]) -> Result<()> {
    let mut ck = Checkpoint::new(graph.clone());
    ck.meta.push((HASH_KEY.to_string(), hash.to_string()));
    ck.meta.extend(meta.iter().map(|(k, v)| (k.to_string(), v.clone())));
    ck.meta.sort();
    write_bytes(path, &ck.to_bytes())
}

/// Loads a model file; files without a config hash are accepted.
pub fn read_checkpoint(path: &Path, hash: &str) -> Result<Checkpoint> {
    let ck = Checkpoint::from_bytes(&read_bytes(path)?)?;
    if let Some(found) = ck.meta_value(HASH_KEY) {
        check_hash(path, found, hash)?;
    }
    Ok(ck)
}

fn write_dataset(path: &Path, hash: &str, data: &Dataset) -> Result<()> {
    write_bytes(path, &data.to_bytes_with_meta(&[(HASH_KEY.to_string(), hash.to_string())]))
}

fn read_dataset(path: &Path, hash: &str) -> Result<Dataset> {
    let (ds, meta) = Dataset::from_bytes_with_meta(&read_bytes(path)?)?;
    if let Some((_, found)) = meta.iter().find(|(k, _)| k == HASH_KEY) {
        check_hash(path, found, hash)?;
    }
    Ok(ds)
}

/// Classification accuracy on the validation split and verification EER
/// per template size.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMetrics {
    pub accuracy: f64,
    pub eer: Vec<(usize, Eer)>,
    pub learnables: usize,
    pub embedding_size: usize,
}

impl ModelMetrics {
    pub fn eer_for(&self, template: usize) -> Option<f64> {
        self.eer.iter().find(|(t, _)| *t == template).map(|(_, e)| e.eer)
    }
}

pub fn evaluate_model(
    cfg: &ExperimentConfig,
    graph: &NetworkGraph,
    train_data: &Dataset,
    verify_data: &Dataset,
) -> Result<(ModelMetrics, Vec<(usize, ScoreSet)>)> {
    let aug = &cfg.train.augment;
    let mut val = train_data.indices(Split::Val);
    if val.is_empty() {
        val = train_data.indices(Split::Train);
    }
    let accuracy = evaluate(graph, train_data, &val, aug)?.accuracy;
    let all: Vec<usize> = (0..verify_data.len()).collect();
    let descriptors = extract_descriptors(graph, verify_data, &all, aug)?;
    let mut eer = Vec::new();
    let mut sets = Vec::new();
    for &t in &cfg.verification.template_sizes {
        let protocol = cfg.protocol(t);
        let set = score_protocol(&build_templates(&descriptors, &protocol)?, &protocol)?;
        eer.push((t, crate::verify::score_set_eer(&set)?));
        sets.push((t, set));
    }
    Ok((
        ModelMetrics {
            accuracy,
            eer,
            learnables: graph.count_learnables(),
            embedding_size: graph.embedding_size(),
        },
        sets,
    ))
}

/// Writes the resolved config and both datasets.
pub fn gen_data(cfg: &ExperimentConfig, run: &RunDir) -> Result<(Dataset, Dataset)> {
    let hash = cfg.hash();
    let mut train_set = generate_synthetic_identities(&cfg.synthetic_config())?;
    train_set.assign_holdout(cfg.data.validation_fraction, derive_seed(cfg.seed, "holdout"))?;
    let verify_set = generate_synthetic_identities(&cfg.verification_data_config())?;
    write_bytes(&run.config(), cfg.to_toml().as_bytes())?;
    write_dataset(&run.train_data(), &hash, &train_set)?;
    write_dataset(&run.verify_data(), &hash, &verify_set)?;
    Ok((train_set, verify_set))
}

pub fn load_data(cfg: &ExperimentConfig, run: &RunDir) -> Result<(Dataset, Dataset)> {
    let hash = cfg.hash();
    Ok((read_dataset(&run.train_data(), &hash)?, read_dataset(&run.verify_data(), &hash)?))
}

pub fn train_stage(cfg: &ExperimentConfig, run: &RunDir) -> Result<TrainOutcome> {
    let hash = cfg.hash();
    let data = read_dataset(&run.train_data(), &hash)?;
    let graph = build_architecture(&cfg.model, cfg.model_seed())?;
    let out = train(&graph, &data, &cfg.train_config())?;
    write_checkpoint(
        &run.trained(),
        &hash,
        &out.graph,
        &[("stage", "trained".into()), ("best_epoch", out.best_epoch.to_string())],
    )?;
    write_text(&run.train_history(), &hash, &history_csv(&out.history))?;
    Ok(out)
}

fn accuracy_csv(run: &PruneRun) -> String {
    let mut s = String::from("iteration,pruned_fraction,learnables,val_accuracy\n");
    for r in &run.trajectory.records {
        let acc = r.metrics.and_then(|m| m.accuracy).map(|a| format!("{a:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{:.6},{},{acc}\n", r.iteration, r.pruned_fraction, r.learnables));
    }
    s
}

/// Prunes `checkpoint` (default: the trained model), writing a model file
/// per iteration and the trajectory tables.
pub fn prune_stage(cfg: &ExperimentConfig, run: &RunDir, checkpoint: Option<&Path>) -> Result<PruneRun> {
    let hash = cfg.hash();
    let (train_set, verify_set) = load_data(cfg, run)?;
    let src = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.trained());
    let graph = read_checkpoint(&src, &hash)?.graph;
    let out = run_pruning(
        &graph,
        &train_set,
        &cfg.train.augment,
        &cfg.prune_schedule(),
        |_, g| {
            let (m, _) = evaluate_model(cfg, g, &train_set, &verify_set)?;
            Ok(EvalMetrics {
                eer_1to1: m.eer_for(1),
                eer_5to5: m.eer_for(5),
                accuracy: Some(m.accuracy),
            })
        },
        |rec, g| {
            write_checkpoint(
                &run.checkpoint(rec.iteration),
                &hash,
                g,
                &[
                    ("stage", "pruned".into()),
                    ("iteration", rec.iteration.to_string()),
                    ("pruned_fraction", format!("{:.6}", rec.pruned_fraction)),
                ],
            )
        },
    )?;
    write_text(&run.trajectory(), &hash, &trajectory_csv(&out.trajectory))?;
    write_text(&run.layer_filters(), &hash, &layer_filters_csv(&out.trajectory))?;
    write_text(&run.removals(), &hash, &removals_csv(&out.trajectory))?;
    write_text(&run.accuracy(), &hash, &accuracy_csv(&out))?;
    Ok(out)
}

/// Rows of a headerless CSV body, skipping the column line.
pub fn csv_rows(body: &str) -> Vec<Vec<String>> {
    body.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// `(iteration, pruned_fraction)` of every trajectory row.
pub fn read_trajectory(cfg: &ExperimentConfig, run: &RunDir) -> Result<Vec<(usize, f64)>> {
    let body = read_text(&run.trajectory(), &cfg.hash())?;
    csv_rows(&body)
        .iter()
        .map(|r| {
            let it = r.first().and_then(|v| v.parse().ok());
            let f = r.get(1).and_then(|v| v.parse().ok());
            it.zip(f).ok_or_else(|| Error::Corrupt(format!("bad trajectory row {r:?}")))
        })
        .collect()
}

/// First iteration reaching each level, in level order, without repeats.
pub fn logged_iterations(trajectory: &[(usize, f64)], levels: &[f64]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for &l in levels {
        if let Some(&(it, f)) = trajectory.iter().find(|(_, f)| *f >= l - 1e-9) {
            if !out.iter().any(|(i, _)| *i == it) {
                out.push((it, f));
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct RetrainResult {
    pub variant: String,
    pub iteration: usize,
    pub outcome: TrainOutcome,
}

/// Retrains the pruned checkpoints at the configured sparsities with every
/// ladder; or, given `checkpoint`, just that model.
pub fn retrain_stage(cfg: &ExperimentConfig, run: &RunDir, checkpoint: Option<&Path>) -> Result<Vec<RetrainResult>> {
    let hash = cfg.hash();
    let train_set = read_dataset(&run.train_data(), &hash)?;
    let targets: Vec<(PathBuf, usize)> = match checkpoint {
        Some(p) => {
            let ck = read_checkpoint(p, &hash)?;
            let it = ck.meta_value("iteration").and_then(|v| v.parse().ok()).unwrap_or(0);
            vec![(p.to_path_buf(), it)]
        }
        None => logged_iterations(&read_trajectory(cfg, run)?, &cfg.retrain.at_sparsities)
            .into_iter()
            .map(|(it, _)| (run.checkpoint(it), it))
            .collect(),
    };
    let mut out = Vec::new();
    for (path, it) in targets {
        let ck = read_checkpoint(&path, &hash)?;
        for ladder in &cfg.retrain.ladders {
            let variant = ladder_name(ladder);
            let res = train(&ck.graph, &train_set, &cfg.retrain_config(ladder, it))?;
            write_checkpoint(
                &run.retrained(&variant, it),
                &hash,
                &res.graph,
                &[
                    ("stage", format!("retrained-{variant}")),
                    ("iteration", it.to_string()),
                    ("best_epoch", res.best_epoch.to_string()),
                ],
            )?;
            write_text(&run.retrain_history(&variant, it), &hash, &history_csv(&res.history))?;
            out.push(RetrainResult {
                variant,
                iteration: it,
                outcome: res,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub variant: String,
    pub iteration: usize,
    pub sparsity: f64,
    pub metrics: ModelMetrics,
}

/// Models evaluated by default: the trained network, then every logged
/// pruning level unretrained and after each retraining ladder.
fn default_models(cfg: &ExperimentConfig, run: &RunDir) -> Result<Vec<(String, usize, f64, PathBuf)>> {
    let traj = read_trajectory(cfg, run)?;
    let mut models = vec![(ORIGINAL.to_string(), 0, 0.0, run.trained())];
    let mut levels = cfg.retrain.at_sparsities.clone();
    for s in &cfg.explain.at_sparsities {
        if !levels.iter().any(|l| (l - s).abs() < 1e-12) {
            levels.push(*s);
        }
    }
    let logged = logged_iterations(&traj, &cfg.retrain.at_sparsities);
    for (it, f) in logged_iterations(&traj, &levels) {
        models.push((PRUNED.to_string(), it, f, run.checkpoint(it)));
        if logged.iter().any(|(i, _)| *i == it) {
            for ladder in &cfg.retrain.ladders {
                let v = ladder_name(ladder);
                let p = run.retrained(&v, it);
                models.push((v, it, f, p));
            }
        }
    }
    Ok(models)
}

fn summary_csv(rows: &[EvalRow], sizes: &[usize]) -> String {
    let mut s = String::from("variant,iteration,sparsity,learnables,embedding_size,accuracy");
    for t in sizes {
        s.push_str(&format!(",eer_t{t}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{},{},{:.6}",
            r.variant, r.iteration, r.sparsity, r.metrics.learnables, r.metrics.embedding_size, r.metrics.accuracy
        ));
        for t in sizes {
            s.push_str(&format!(",{:.9}", r.metrics.eer_for(*t).unwrap_or(f64::NAN)));
        }
        s.push('\n');
    }
    s
}

/// Scores and EERs for one checkpoint, or for the default model set.
pub fn eval_stage(cfg: &ExperimentConfig, run: &RunDir, checkpoint: Option<&Path>) -> Result<Vec<EvalRow>> {
    let hash = cfg.hash();
    let (train_set, verify_set) = load_data(cfg, run)?;
    let sizes = &cfg.verification.template_sizes;
    if let Some(p) = checkpoint {
        let graph = read_checkpoint(p, &hash)?.graph;
        let (m, sets) = evaluate_model(cfg, &graph, &train_set, &verify_set)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
        let dir = run.root.join("eval/custom");
        for (t, set) in &sets {
            write_text(&dir.join(format!("{stem}_t{t}.csv")), &hash, &scores_csv(set))?;
        }
        let rows: Vec<EerRow> = m
            .eer
            .iter()
            .map(|(t, e)| EerRow {
                template_size: *t,
                iteration: 0,
                eer: *e,
            })
            .collect();
        write_text(&dir.join(format!("{stem}_eer.csv")), &hash, &eer_csv(&rows))?;
        return Ok(vec![EvalRow {
            variant: stem,
            iteration: 0,
            sparsity: f64::NAN,
            metrics: m,
        }]);
    }
    let models = default_models(cfg, run)?;
    let absent: Vec<String> = models
        .iter()
        .filter(|m| !m.3.exists())
        .map(|m| m.3.display().to_string())
        .collect();
    if !absent.is_empty() {
        return Err(Error::MissingInput(absent.join(", ")));
    }
    let mut rows = Vec::new();
    let mut eer_rows: Vec<(String, Vec<EerRow>)> = Vec::new();
    for (variant, it, f, path) in models {
        let graph = read_checkpoint(&path, &hash)?.graph;
        let (m, sets) = evaluate_model(cfg, &graph, &train_set, &verify_set)?;
        for (t, set) in &sets {
            write_text(&run.scores(&variant, it, *t), &hash, &scores_csv(set))?;
        }
        let entry = match eer_rows.iter().position(|(v, _)| *v == variant) {
            Some(i) => &mut eer_rows[i].1,
            None => {
                eer_rows.push((variant.clone(), Vec::new()));
                &mut eer_rows.last_mut().expect("pushed").1
            }
        };
        entry.extend(m.eer.iter().map(|(t, e)| EerRow {
            template_size: *t,
            iteration: it,
            eer: *e,
        }));
        rows.push(EvalRow {
            variant,
            iteration: it,
            sparsity: f,
            metrics: m,
        });
    }
    for (variant, mut list) in eer_rows {
        list.sort_by_key(|r| (r.template_size, r.iteration));
        write_text(&run.eer(&variant), &hash, &eer_csv(&list))?;
    }
    write_text(&run.eval_summary(), &hash, &summary_csv(&rows, sizes))?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct ExplainRow {
    pub variant: String,
    pub iteration: usize,
    pub sparsity: f64,
    pub comparison: Comparison,
    pub eer_original: Option<f64>,
    pub eer_variant: Option<f64>,
}

/// Evenly spaced verification images.
pub fn explain_indices(cfg: &ExperimentConfig, n: usize) -> Vec<usize> {
    let k = cfg.explain.images.min(n);
    (0..k).map(|i| i * n / k.max(1)).collect()
}

fn write_comparison(run: &RunDir, hash: &str, name: &str, c: &Comparison, bins: usize) -> Result<()> {
    let dir = run.explain_dir();
    write_text(&dir.join(format!("{name}_psnr.csv")), hash, &psnr_csv(c))?;
    write_text(
        &dir.join(format!("{name}_hist.csv")),
        hash,
        &histogram_csv(&histogram(&c.psnr, bins, 0.0, PSNR_CAP)?),
    )?;
    let avg = average_heatmap(&c.maps_b)?;
    write_text(&dir.join(format!("{name}_average.csv")), hash, &heatmap_csv(&avg))?;
    write_bytes(&dir.join(format!("{name}_average.pgm")), &pgm_with_hash(&avg, hash))?;
    for (k, (img, map)) in c.images.iter().zip(&c.maps_b).take(2).enumerate() {
        write_bytes(&dir.join(format!("{name}_image{k}_{img}.pgm")), &pgm_with_hash(map, hash))?;
    }
    Ok(())
}

/// PGM with the config hash as a comment after the magic.
fn pgm_with_hash(h: &crate::explain::Heatmap, hash: &str) -> Vec<u8> {
    let raw = heatmap_pgm(h, 8);
    let mut out = b"P5\n".to_vec();
    out.extend_from_slice(hash_line(hash).as_bytes());
    out.extend_from_slice(&raw[3..]);
    out
}

/// PSNR of heatmaps between two models, or between the trained model and
/// every pruned variant at the configured explanation levels.
pub fn explain_stage(
    cfg: &ExperimentConfig,
    run: &RunDir,
    pair: Option<(&Path, &Path)>,
) -> Result<Vec<ExplainRow>> {
    let hash = cfg.hash();
    let (train_set, verify_set) = load_data(cfg, run)?;
    let idx = explain_indices(cfg, verify_set.len());
    let lime = cfg.lime_config();
    let aug = &cfg.train.augment;
    let eer1 = |g: &NetworkGraph| -> Result<Option<f64>> {
        let (m, _) = evaluate_model(cfg, g, &train_set, &verify_set)?;
        Ok(m.eer.first().map(|(_, e)| e.eer))
    };
    let summary_header = "variant,iteration,sparsity,mean_psnr,eer_original,eer_variant\n";
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    if let Some((a, b)) = pair {
        let ga = read_checkpoint(a, &hash)?.graph;
        let gb = read_checkpoint(b, &hash)?.graph;
        let c = compare_networks(&ga, &gb, &verify_set, &idx, aug, &lime)?;
        write_comparison(run, &hash, "custom", &c, cfg.explain.bins)?;
        let row = ExplainRow {
            variant: "custom".into(),
            iteration: 0,
            sparsity: f64::NAN,
            eer_original: eer1(&ga)?,
            eer_variant: eer1(&gb)?,
            comparison: c,
        };
        write_text(
            &run.explain_dir().join("custom_summary.csv"),
            &hash,
            &format!(
                "{summary_header}custom,0,,{:.9},{},{}\n",
                row.comparison.mean_psnr(),
                fmt(row.eer_original),
                fmt(row.eer_variant)
            ),
        )?;
        return Ok(vec![row]);
    }
    let original = read_checkpoint(&run.trained(), &hash)?.graph;
    let eer_original = eer1(&original)?;
    let traj = read_trajectory(cfg, run)?;
    let retrained_at = logged_iterations(&traj, &cfg.retrain.at_sparsities);
    let mut rows = Vec::new();
    let mut summary = String::from(summary_header);
    let mut original_written = false;
    for (it, f) in logged_iterations(&traj, &cfg.explain.at_sparsities) {
        let mut variants = vec![(PRUNED.to_string(), run.checkpoint(it))];
        if retrained_at.iter().any(|(i, _)| *i == it) {
            for ladder in &cfg.retrain.ladders {
                let v = ladder_name(ladder);
                variants.push((v.clone(), run.retrained(&v, it)));
            }
        }
        for (variant, path) in variants {
            let g = read_checkpoint(&path, &hash)?.graph;
            let c = compare_networks(&original, &g, &verify_set, &idx, aug, &lime)?;
            if !original_written {
                let avg = average_heatmap(&c.maps_a)?;
                write_bytes(&run.explain_dir().join("original_average.pgm"), &pgm_with_hash(&avg, &hash))?;
                write_text(&run.explain_dir().join("original_average.csv"), &hash, &heatmap_csv(&avg))?;
                original_written = true;
            }
            write_comparison(run, &hash, &format!("{variant}_iter_{it:04}"), &c, cfg.explain.bins)?;
            let eer_variant = eer1(&g)?;
            summary.push_str(&format!(
                "{variant},{it},{f:.6},{:.9},{},{}\n",
                c.mean_psnr(),
                fmt(eer_original),
                fmt(eer_variant)
            ));
            rows.push(ExplainRow {
                variant,
                iteration: it,
                sparsity: f,
                comparison: c,
                eer_original,
                eer_variant,
            });
        }
    }
    write_text(&run.explain_summary(), &hash, &summary)?;
    Ok(rows)
}

/// Everything a full run produces, for programmatic inspection.
pub struct PipelineResult {
    pub trained: TrainOutcome,
    pub prune: PruneRun,
    pub retrained: Vec<RetrainResult>,
    pub eval: Vec<EvalRow>,
    pub explain: Vec<ExplainRow>,
}

/// All stages in order, then the report.
pub fn run_pipeline(cfg: &ExperimentConfig, run: &RunDir) -> Result<PipelineResult> {
    gen_data(cfg, run)?;
    let trained = train_stage(cfg, run)?;
    let prune = prune_stage(cfg, run, None)?;
    let retrained = retrain_stage(cfg, run, None)?;
    let eval = eval_stage(cfg, run, None)?;
    let explain = explain_stage(cfg, run, None)?;
    crate::report::report_stage(run)?;
    Ok(PipelineResult {
        trained,
        prune,
        retrained,
        eval,
        explain,
    })
}
