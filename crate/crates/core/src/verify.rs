//! Face verification: flip-averaged descriptors, 1- and 5-image templates,
//! the genuine/impostor pairing protocol, cosine scoring and EER.

use std::collections::BTreeMap;

use crate::data::{flip_horizontal, stack, Augment, Dataset, Pose};
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;

const EMBED_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub subject: usize,
    pub pose: Pose,
    /// Index of the source sample in its dataset.
    pub image: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    /// Mean of the member descriptors.
    pub values: Vec<f64>,
    pub subject: usize,
    pub pose: Pose,
    pub members: Vec<usize>,
}

/// `(f(x) + f(mirror(x))) / 2` at the embedding node for each image of
/// `indices`, using the evaluation view.
pub fn extract_descriptors(
    graph: &NetworkGraph,
    data: &Dataset,
    indices: &[usize],
    augment: &Augment,
) -> Result<Vec<Descriptor>> {
    augment.validate()?;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EMBED_CHUNK) {
        let mut views = Vec::with_capacity(2 * chunk.len());
        for &i in chunk {
            let s = data
                .samples
                .get(i)
                .ok_or_else(|| Error::Config(format!("sample index {i} out of range")))?;
            let v = augment.eval_view(&s.pixels, data.channels, data.size);
            views.push(flip_horizontal(&v, data.channels, augment.crop));
            views.push(v);
        }
        let emb = graph.embed(&stack(&views, data.channels, augment.crop)?)?;
        let e = emb.shape()[1];
        let rows = emb.data();
        for (j, &i) in chunk.iter().enumerate() {
            let flipped = &rows[2 * j * e..(2 * j + 1) * e];
            let plain = &rows[(2 * j + 1) * e..(2 * j + 2) * e];
            let s = &data.samples[i];
            out.push(Descriptor {
                values: plain.iter().zip(flipped).map(|(a, b)| (a + b) / 2.0).collect(),
                subject: s.label,
                pose: s.pose,
                image: i,
            });
        }
    }
    Ok(out)
}

/// Shape of a verification experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolConfig {
    pub subjects: usize,
    /// Images per subject and pose.
    pub images_per_pose: usize,
    pub poses: usize,
    /// Descriptors averaged into one template.
    pub template_size: usize,
    /// Impostor comparisons per subject and pose category.
    pub impostor_window: usize,
}

impl ProtocolConfig {
    pub fn templates_per_pose(&self) -> usize {
        self.images_per_pose / self.template_size.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Protocol(m));
        if self.poses == 0 || self.template_size == 0 || self.impostor_window == 0 {
            return bad("poses, template size and impostor window must be non-zero".into());
        }
        if self.images_per_pose % self.template_size != 0 {
            return bad(format!(
                "{} images per pose do not split into templates of {}",
                self.images_per_pose, self.template_size
            ));
        }
        if self.templates_per_pose() < 2 {
            return bad(format!(
                "need at least two templates per subject and pose, got {}",
                self.templates_per_pose()
            ));
        }
        if self.subjects <= self.impostor_window {
            return bad(format!(
                "{} subjects cannot supply {} distinct impostors each; lower the impostor window",
                self.subjects, self.impostor_window
            ));
        }
        Ok(())
    }
}

/// A template addressed by subject, pose index and position among that
/// subject's templates of the pose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TemplateRef {
    pub subject: usize,
    pub pose: usize,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Genuine,
    Impostor,
}

impl PairLabel {
    pub fn name(self) -> &'static str {
        match self {
            PairLabel::Genuine => "genuine",
            PairLabel::Impostor => "impostor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Comparison {
    pub a: TemplateRef,
    pub b: TemplateRef,
    pub label: PairLabel,
}

/// Pose categories: each pose with itself, then every unordered pair.
fn pose_categories(poses: usize) -> Vec<(usize, usize)> {
    let mut cats: Vec<(usize, usize)> = (0..poses).map(|p| (p, p)).collect();
    for a in 0..poses {
        for b in a + 1..poses {
            cats.push((a, b));
        }
    }
    cats
}

/// Genuine pairs compare each template of a subject with its remaining
/// ones (same pose, no symmetric duplicates) and with every template of
/// each other pose. Impostor pairs compare the first template of a subject
/// with the second template of the next `impostor_window` subjects,
/// cyclically, once per pose category.
pub fn build_protocol(cfg: &ProtocolConfig) -> Result<Vec<Comparison>> {
    cfg.validate()?;
    let t = cfg.templates_per_pose();
    let r = |subject, pose, index| TemplateRef { subject, pose, index };
    let mut out = Vec::new();
    for (pa, pb) in pose_categories(cfg.poses) {
        for s in 0..cfg.subjects {
            for i in 0..t {
                let from = if pa == pb { i + 1 } else { 0 };
                for j in from..t {
                    out.push(Comparison {
                        a: r(s, pa, i),
                        b: r(s, pb, j),
                        label: PairLabel::Genuine,
                    });
                }
            }
        }
    }
    for (pa, pb) in pose_categories(cfg.poses) {
        for s in 0..cfg.subjects {
            for d in 1..=cfg.impostor_window {
                out.push(Comparison {
                    a: r(s, pa, 0),
                    b: r((s + d) % cfg.subjects, pb, 1),
                    label: PairLabel::Impostor,
                });
            }
        }
    }
    Ok(out)
}

/// `(genuine, impostor)` counts from the closed forms.
pub fn protocol_counts(cfg: &ProtocolConfig) -> (usize, usize) {
    let (n, t, p) = (cfg.subjects, cfg.templates_per_pose(), cfg.poses);
    let pairs = p * (p - 1) / 2;
    let genuine = p * n * (t * (t - 1) / 2) + pairs * n * t * t;
    (genuine, (p + pairs) * n * cfg.impostor_window)
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Protocol(format!("template lengths differ: {} vs {}", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Numerical("cosine score of a zero-norm template".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Templates keyed by [`TemplateRef`], built from the first
/// `images_per_pose` descriptors (in image order) of every subject and pose.
/// Subjects and poses are renumbered densely in sorted order.
pub fn build_templates(
    descriptors: &[Descriptor],
    cfg: &ProtocolConfig,
) -> Result<BTreeMap<TemplateRef, Template>> {
    cfg.validate()?;
    let mut by_key: BTreeMap<(usize, Pose), Vec<&Descriptor>> = BTreeMap::new();
    for d in descriptors {
        by_key.entry((d.subject, d.pose)).or_default().push(d);
    }
    let mut subjects: Vec<usize> = by_key.keys().map(|k| k.0).collect();
    subjects.dedup();
    let mut poses: Vec<Pose> = by_key.keys().map(|k| k.1).collect();
    poses.sort();
    poses.dedup();
    if subjects.len() != cfg.subjects || poses.len() != cfg.poses {
        return Err(Error::Protocol(format!(
            "descriptors cover {} subjects and {} poses, protocol expects {} and {}",
            subjects.len(),
            poses.len(),
            cfg.subjects,
            cfg.poses
        )));
    }
    let mut out = BTreeMap::new();
    for (si, &subject) in subjects.iter().enumerate() {
        for (pi, &pose) in poses.iter().enumerate() {
            let mut list = by_key.get(&(subject, pose)).cloned().unwrap_or_default();
            if list.len() < cfg.images_per_pose {
                return Err(Error::Protocol(format!(
                    "subject {subject}, pose {}: {} images, protocol needs {}",
                    pose.name(),
                    list.len(),
                    cfg.images_per_pose
                )));
            }
            list.sort_by_key(|d| d.image);
            for (ti, members) in list[..cfg.images_per_pose].chunks(cfg.template_size).enumerate() {
                let len = members[0].values.len();
                let mut values = vec![0.0; len];
                for m in members {
                    if m.values.len() != len {
                        return Err(Error::Protocol("descriptors of differing length".into()));
                    }
                    for (v, x) in values.iter_mut().zip(&m.values) {
                        *v += x;
                    }
                }
                values.iter_mut().for_each(|v| *v /= members.len() as f64);
                out.insert(
                    TemplateRef {
                        subject: si,
                        pose: pi,
                        index: ti,
                    },
                    Template {
                        values,
                        subject,
                        pose,
                        members: members.iter().map(|m| m.image).collect(),
                    },
                );
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Score {
    pub subject_a: usize,
    pub subject_b: usize,
    pub pose_a: Pose,
    pub pose_b: Pose,
    pub template_size: usize,
    pub score: f64,
    pub label: PairLabel,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScoreSet {
    pub scores: Vec<Score>,
}

impl ScoreSet {
    pub fn genuine(&self) -> Vec<f64> {
        self.of(PairLabel::Genuine)
    }

    pub fn impostor(&self) -> Vec<f64> {
        self.of(PairLabel::Impostor)
    }

    fn of(&self, label: PairLabel) -> Vec<f64> {
        self.scores.iter().filter(|s| s.label == label).map(|s| s.score).collect()
    }
}

/// Scores every comparison of the protocol.
pub fn score_protocol(templates: &BTreeMap<TemplateRef, Template>, cfg: &ProtocolConfig) -> Result<ScoreSet> {
    let pairs = build_protocol(cfg)?;
    let mut scores = Vec::with_capacity(pairs.len());
    for c in pairs {
        let get = |r: &TemplateRef| {
            templates
                .get(r)
                .ok_or_else(|| Error::Protocol(format!("no template for {r:?}")))
        };
        let (a, b) = (get(&c.a)?, get(&c.b)?);
        scores.push(Score {
            subject_a: a.subject,
            subject_b: b.subject,
            pose_a: a.pose,
            pose_b: b.pose,
            template_size: cfg.template_size,
            score: cosine_score(&a.values, &b.values)?,
            label: c.label,
        });
    }
    Ok(ScoreSet { scores })
}

/// Descriptors of `indices`, templates and scores in one pass.
pub fn verify(
    graph: &NetworkGraph,
    data: &Dataset,
    indices: &[usize],
    augment: &Augment,
    cfg: &ProtocolConfig,
) -> Result<ScoreSet> {
    let d = extract_descriptors(graph, data, indices, augment)?;
    score_protocol(&build_templates(&d, cfg)?, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate with acceptance at `score ≥ threshold`. The rates are
/// evaluated at every distinct score and past the largest one; the
/// crossing of FAR and FRR is interpolated linearly between the adjacent
/// operating points that bracket it.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<Eer> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Protocol(format!(
            "EER needs both classes ({} genuine, {} impostor)",
            genuine.len(),
            impostor.len()
        )));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite verification score".into()));
    }
    let mut g = genuine.to_vec();
    let mut i = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    i.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = g.iter().chain(&i).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (ng, ni) = (g.len() as f64, i.len() as f64);
    // FAR = impostors ≥ τ, FRR = genuines < τ.
    let rates = |t: f64| {
        let far = (i.len() - i.partition_point(|&s| s < t)) as f64 / ni;
        let frr = g.partition_point(|&s| s < t) as f64 / ng;
        (far, frr)
    };
    let mut prev = (thresholds[0], rates(thresholds[0]));
    let points = thresholds[1..]
        .iter()
        .map(|&t| (t, rates(t)))
        .chain(std::iter::once((f64::INFINITY, (0.0, 1.0))));
    for (t, (far, frr)) in points {
        let (pt, (pfar, pfrr)) = prev;
        let (d0, d1) = (pfar - pfrr, far - frr);
        if d0 == 0.0 {
            return Ok(Eer { eer: pfar, threshold: pt });
        }
        if d1 <= 0.0 {
            let a = d0 / (d0 - d1);
            let threshold = if t.is_finite() { pt + a * (t - pt) } else { pt };
            return Ok(Eer {
                eer: pfar + a * (far - pfar),
                threshold,
            });
        }
        prev = (t, (far, frr));
    }
    unreachable!("FAR − FRR ends at −1")
}

pub fn score_set_eer(set: &ScoreSet) -> Result<Eer> {
    compute_eer(&set.genuine(), &set.impostor())
}

/// `subject_a,subject_b,pose_a,pose_b,template_size,score,label`
pub fn scores_csv(set: &ScoreSet) -> String {
    let mut s = String::from("subject_a,subject_b,pose_a,pose_b,template_size,score,label\n");
    for x in &set.scores {
        s.push_str(&format!(
            "{},{},{},{},{},{:.9},{}\n",
            x.subject_a,
            x.subject_b,
            x.pose_a.name(),
            x.pose_b.name(),
            x.template_size,
            x.score,
            x.label.name()
        ));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerRow {
    pub template_size: usize,
    pub iteration: usize,
    pub eer: Eer,
}

/// `template_size,iteration,eer,threshold`
pub fn eer_csv(rows: &[EerRow]) -> String {
    let mut s = String::from("template_size,iteration,eer,threshold\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.9},{:.9}\n",
            r.template_size, r.iteration, r.eer.eer, r.eer.threshold
        ));
    }
    s
}
