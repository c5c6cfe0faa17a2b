//! Grid-based LIME relevance maps for descriptor networks, heatmap
//! averaging, and PSNR comparison between networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack, Augment, Dataset};
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::seed::derive_seed;
use crate::verify::cosine_score;

/// PSNR reported for identical maps.
pub const PSNR_CAP: f64 = 100.0;

const EMBED_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimeConfig {
    #[serde(default = "eight")]
    pub grid_rows: usize,
    #[serde(default = "eight")]
    pub grid_cols: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Probability that a cell stays visible in a perturbation.
    #[serde(default = "half")]
    pub keep_probability: f64,
    #[serde(default)]
    pub seed: u64,
}

fn eight() -> usize {
    8
}

fn default_samples() -> usize {
    256
}

fn half() -> f64 {
    0.5
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            grid_rows: 8,
            grid_cols: 8,
            samples: 256,
            keep_probability: 0.5,
            seed: 0,
        }
    }
}

impl LimeConfig {
    pub fn cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::Config("LIME grid must have at least one row and column".into()));
        }
        if self.samples < self.cells() {
            return Err(Error::Config(format!(
                "{} LIME samples cannot fit {} cells",
                self.samples,
                self.cells()
            )));
        }
        if !(self.keep_probability > 0.0 && self.keep_probability < 1.0) {
            return Err(Error::Config(format!(
                "keep probability must lie in (0, 1), got {}",
                self.keep_probability
            )));
        }
        Ok(())
    }
}

/// How cell relevances were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitMethod {
    /// Least-squares linear surrogate over random masks.
    Surrogate,
    /// Response drop from hiding one cell at a time; used when the
    /// surrogate's normal equations are singular.
    SingleOcclusion,
    /// The response never changed.
    Constant,
}

impl FitMethod {
    pub fn name(self) -> &'static str {
        match self {
            FitMethod::Surrogate => "surrogate",
            FitMethod::SingleOcclusion => "single-occlusion",
            FitMethod::Constant => "constant",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, min-max normalized to [0, 1].
    pub values: Vec<f64>,
    pub method: FitMethod,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Min-max scaling to [0, 1]; constant input maps to zeros.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Grid cell of every pixel of a `height × width` plane.
pub fn cell_index(rows: usize, cols: usize, height: usize, width: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push((y * rows / height) * cols + x * cols / width);
        }
    }
    out
}

/// Solves the least-squares fit of `y` on `[1, masks]` through Cholesky
/// factorization of the normal equations. `None` when they are singular.
fn fit_surrogate(masks: &[Vec<bool>], y: &[f64], cells: usize) -> Option<Vec<f64>> {
    let p = cells + 1;
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    let mut row = vec![0.0; p];
    for (m, &yi) in masks.iter().zip(y) {
        row[0] = 1.0;
        for (r, &bit) in row[1..].iter_mut().zip(m) {
            *r = if bit { 1.0 } else { 0.0 };
        }
        for i in 0..p {
            if row[i] == 0.0 {
                continue;
            }
            b[i] += row[i] * yi;
            for j in 0..p {
                a[i * p + j] += row[i] * row[j];
            }
        }
    }
    let scale = (0..p).map(|i| a[i * p + i]).fold(0.0, f64::max);
    let tol = 1e-10 * scale.max(1.0);
    let mut l = vec![0.0; p * p];
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if d <= tol {
            return None;
        }
        let d = d.sqrt();
        l[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / d;
        }
    }
    let mut z = vec![0.0; p];
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * p + k] * z[k];
        }
        z[i] = s / l[i * p + i];
    }
    let mut beta = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in i + 1..p {
            s -= l[k * p + i] * beta[k];
        }
        beta[i] = s / l[i * p + i];
    }
    Some(beta[1..].to_vec())
}

/// LIME over an abstract response: `response` maps a batch of visibility
/// masks (one flag per cell) to model responses.
pub fn explain_cells(
    cfg: &LimeConfig,
    seed: u64,
    mut response: impl FnMut(&[Vec<bool>]) -> Result<Vec<f64>>,
) -> Result<Heatmap> {
    cfg.validate()?;
    let cells = cfg.cells();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<Vec<bool>> = (0..cfg.samples)
        .map(|_| (0..cells).map(|_| rng.gen_bool(cfg.keep_probability)).collect())
        .collect();
    let y = response(&masks)?;
    if y.len() != masks.len() {
        return Err(Error::Numerical(format!("{} responses for {} masks", y.len(), masks.len())));
    }
    let heatmap = |values: Vec<f64>, method| Heatmap {
        rows: cfg.grid_rows,
        cols: cfg.grid_cols,
        values,
        method,
    };
    if y.iter().all(|&v| v == y[0]) {
        return Ok(heatmap(vec![0.0; cells], FitMethod::Constant));
    }
    if let Some(coef) = fit_surrogate(&masks, &y, cells) {
        return Ok(heatmap(normalize(&coef), FitMethod::Surrogate));
    }
    log::debug!("LIME surrogate singular; falling back to single-cell occlusion");
    let mut probes = vec![vec![true; cells]];
    for c in 0..cells {
        let mut m = vec![true; cells];
        m[c] = false;
        probes.push(m);
    }
    let r = response(&probes)?;
    let deltas: Vec<f64> = r[1..].iter().map(|v| r[0] - v).collect();
    Ok(heatmap(normalize(&deltas), FitMethod::SingleOcclusion))
}

/// Replaces the pixels of hidden cells with `fill`.
pub fn apply_mask(image: &[f64], fill: &[f64], channels: usize, cell_of: &[usize], mask: &[bool]) -> Vec<f64> {
    let plane = cell_of.len();
    let mut out = image.to_vec();
    for c in 0..channels {
        for (p, &cell) in cell_of.iter().enumerate() {
            if !mask[cell] {
                out[c * plane + p] = fill[c * plane + p];
            }
        }
    }
    out
}

/// Embeddings of `images` (each `C×H×W` at the graph's input size).
fn embed_all(graph: &NetworkGraph, images: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (c, h) = (graph.input.channels, graph.input.height);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        let e = graph.embed(&stack(chunk, c, h)?)?;
        let w = e.shape()[1];
        out.extend(e.data().chunks(w).map(|r| r.to_vec()));
    }
    Ok(out)
}

fn similarity(a: &[f64], b: &[f64]) -> f64 {
    cosine_score(a, b).unwrap_or(0.0)
}

/// Relevance of each grid cell of `image` (already at the graph's input
/// size) for the network's descriptor: the response to a masked image is
/// its cosine similarity to the unmasked descriptor; hidden cells take the
/// values of `fill`. A zero-norm descriptor counts as similarity 0.
pub fn lime_heatmap(graph: &NetworkGraph, image: &[f64], fill: &[f64], cfg: &LimeConfig, seed: u64) -> Result<Heatmap> {
    let s = graph.input;
    if s.height != s.width {
        return Err(Error::Config("LIME expects square inputs".into()));
    }
    let n = s.channels * s.height * s.width;
    if image.len() != n || fill.len() != n {
        return Err(Error::Shape {
            op: "lime",
            detail: format!("image {} / fill {} values, network expects {n}", image.len(), fill.len()),
        });
    }
    let cell_of = cell_index(cfg.grid_rows, cfg.grid_cols, s.height, s.width);
    let reference = embed_all(graph, &[image.to_vec()])?.remove(0);
    explain_cells(cfg, seed, |masks| {
        let views: Vec<Vec<f64>> = masks
            .iter()
            .map(|m| apply_mask(image, fill, s.channels, &cell_of, m))
            .collect();
        Ok(embed_all(graph, &views)?
            .iter()
            .map(|d| similarity(d, &reference))
            .collect())
    })
}

/// Element-wise mean, re-normalized.
pub fn average_heatmap(maps: &[Heatmap]) -> Result<Heatmap> {
    let first = maps.first().ok_or_else(|| Error::Config("no heatmaps to average".into()))?;
    if maps.iter().any(|m| m.rows != first.rows || m.cols != first.cols) {
        return Err(Error::Config("heatmaps of differing grid size".into()));
    }
    let mut acc = vec![0.0; first.values.len()];
    for m in maps {
        for (a, v) in acc.iter_mut().zip(&m.values) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= maps.len() as f64);
    Ok(Heatmap {
        rows: first.rows,
        cols: first.cols,
        values: normalize(&acc),
        method: first.method,
    })
}

/// `−10·log10(MSE)` in dB, capped at [`PSNR_CAP`].
pub fn heatmap_psnr(a: &Heatmap, b: &Heatmap) -> Result<f64> {
    if a.values.len() != b.values.len() || a.rows != b.rows {
        return Err(Error::Config("heatmaps of differing grid size".into()));
    }
    let mse = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.values.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Equal-width bins over `[lo, hi]`; values outside land in the edge bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<Bin>> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::Config(format!("invalid histogram range [{lo}, {hi}] with {bins} bins")));
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin {
            left: lo + i as f64 * width,
            right: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in values {
        let i = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        out[i].count += 1;
    }
    Ok(out)
}

/// Heatmaps of two networks over the same images with shared masks, and
/// the per-image PSNR between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub images: Vec<usize>,
    pub maps_a: Vec<Heatmap>,
    pub maps_b: Vec<Heatmap>,
    pub psnr: Vec<f64>,
}

impl Comparison {
    pub fn mean_psnr(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len().max(1) as f64
    }
}

/// Evaluation view of the dataset's mean image.
pub fn mean_fill(data: &Dataset, augment: &Augment) -> Vec<f64> {
    augment.eval_view(&data.mean_image(), data.channels, data.size)
}

/// Heatmaps of `graph` for `indices`; the masks of image `i` are seeded
/// from `cfg.seed` and `i`.
pub fn explain_images(
    graph: &NetworkGraph,
    data: &Dataset,
    indices: &[usize],
    augment: &Augment,
    cfg: &LimeConfig,
) -> Result<Vec<Heatmap>> {
    augment.validate()?;
    let fill = mean_fill(data, augment);
    indices
        .iter()
        .map(|&i| {
            let s = data
                .samples
                .get(i)
                .ok_or_else(|| Error::Config(format!("sample index {i} out of range")))?;
            let view = augment.eval_view(&s.pixels, data.channels, data.size);
            lime_heatmap(graph, &view, &fill, cfg, derive_seed(cfg.seed, &format!("lime/{i}")))
        })
        .collect()
}

pub fn compare_networks(
    a: &NetworkGraph,
    b: &NetworkGraph,
    data: &Dataset,
    indices: &[usize],
    augment: &Augment,
    cfg: &LimeConfig,
) -> Result<Comparison> {
    let maps_a = explain_images(a, data, indices, augment, cfg)?;
    let maps_b = explain_images(b, data, indices, augment, cfg)?;
    let psnr = maps_a
        .iter()
        .zip(&maps_b)
        .map(|(x, y)| heatmap_psnr(x, y))
        .collect::<Result<_>>()?;
    Ok(Comparison {
        images: indices.to_vec(),
        maps_a,
        maps_b,
        psnr,
    })
}

/// Binary PGM, each cell drawn as a `scale × scale` block.
pub fn heatmap_pgm(h: &Heatmap, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let (w, ht) = (h.cols * scale, h.rows * scale);
    let mut out = format!("P5\n{w} {ht}\n255\n").into_bytes();
    for y in 0..ht {
        for x in 0..w {
            let v = h.get(y / scale, x / scale).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

/// One grid row per line.
pub fn heatmap_csv(h: &Heatmap) -> String {
    let mut s = String::new();
    for r in 0..h.rows {
        let row: Vec<String> = (0..h.cols).map(|c| format!("{:.9}", h.get(r, c))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// `bin_left,bin_right,count`
pub fn histogram_csv(bins: &[Bin]) -> String {
    let mut s = String::from("bin_left,bin_right,count\n");
    for b in bins {
        s.push_str(&format!("{},{},{}\n", b.left, b.right, b.count));
    }
    s
}

/// `image,psnr`
pub fn psnr_csv(c: &Comparison) -> String {
    let mut s = String::from("image,psnr\n");
    for (i, p) in c.images.iter().zip(&c.psnr) {
        s.push_str(&format!("{i},{p:.9}\n"));
    }
    s
}
