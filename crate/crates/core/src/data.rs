//! Synthetic face-like identities, dataset splits, and the crop/flip
//! augmentation pipeline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{check_crc, check_header, Reader, Writer};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"FPDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pose {
    Frontal,
    ThreeQuarter,
    Profile,
}

impl Pose {
    pub const ALL: [Pose; 3] = [Pose::Frontal, Pose::ThreeQuarter, Pose::Profile];

    /// Head yaw in degrees.
    pub fn yaw(self) -> f64 {
        match self {
            Pose::Frontal => 0.0,
            Pose::ThreeQuarter => 40.0,
            Pose::Profile => 75.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pose::Frontal => "frontal",
            Pose::ThreeQuarter => "three-quarter",
            Pose::Profile => "profile",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Pose::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Corrupt(format!("unknown pose code {c}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `channels × size × size`, row-major.
    pub pixels: Vec<f64>,
    pub label: usize,
    pub pose: Pose,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub class_count: usize,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticIdentityConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
    #[serde(default = "all_poses")]
    pub poses: Vec<Pose>,
    pub seed: u64,
    pub noise: f64,
    /// Scale of the per-identity deviation from the shared face template.
    #[serde(default = "default_distinctiveness")]
    pub distinctiveness: f64,
}

fn all_poses() -> Vec<Pose> {
    Pose::ALL.to_vec()
}

fn default_distinctiveness() -> f64 {
    1.0
}

impl SyntheticIdentityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::Config(format!("need at least 2 identities, got {}", self.identities)));
        }
        if self.poses.is_empty() {
            return Err(Error::Config("pose set is empty".into()));
        }
        if self.images_per_identity == 0 || self.image_size < 4 {
            return Err(Error::Config("images per identity must be ≥1 and image size ≥4".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.distinctiveness >= 0.0) {
            return Err(Error::Config("noise and distinctiveness must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Geometry of one identity, in canonical (frontal) coordinates on [-1, 1]².
#[derive(Clone, Debug)]
struct FaceShape {
    face_rx: f64,
    face_ry: f64,
    skin: f64,
    eye_x: f64,
    eye_y: f64,
    eye_r: f64,
    eye_depth: f64,
    brow_y: f64,
    brow_tilt: f64,
    nose_len: f64,
    nose_w: f64,
    mouth_y: f64,
    mouth_w: f64,
    marks: Vec<(f64, f64, f64, f64)>,
    /// Yaw direction: +1 turns right, -1 left.
    turn: f64,
}

impl FaceShape {
    fn sample(rng: &mut ChaCha8Rng, d: f64) -> Self {
        let mut j = |base: f64, spread: f64| base + 2.0 * d * spread * rng.gen_range(-1.0..1.0);
        let face_rx = j(0.62, 0.12);
        let face_ry = j(0.82, 0.1);
        let skin = j(0.55, 0.15);
        let eye_x = j(0.3, 0.09);
        let eye_y = j(-0.2, 0.08);
        let eye_r = j(0.11, 0.04);
        let eye_depth = j(0.4, 0.15);
        let brow_y = j(-0.38, 0.06);
        let brow_tilt = j(0.0, 0.15);
        let nose_len = j(0.28, 0.1);
        let nose_w = j(0.07, 0.03);
        let mouth_y = j(0.42, 0.08);
        let mouth_w = j(0.26, 0.1);
        let n_marks = rng.gen_range(3..=5);
        let marks = (0..n_marks)
            .map(|_| {
                (
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(0.06..0.16),
                    d * rng.gen_range(-0.9..0.9),
                )
            })
            .collect();
        let turn = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        FaceShape {
            face_rx,
            face_ry,
            skin,
            eye_x,
            eye_y,
            eye_r,
            eye_depth,
            brow_y,
            brow_tilt,
            nose_len,
            nose_w,
            mouth_y,
            mouth_w,
            marks,
            turn,
        }
    }

    /// Intensity at canonical coordinates.
    fn intensity(&self, u: f64, v: f64) -> f64 {
        let blob = |x: f64, y: f64, sx: f64, sy: f64| (-((u - x) / sx).powi(2) - ((v - y) / sy).powi(2)).exp();
        let r = (u / self.face_rx).powi(2) + (v / self.face_ry).powi(2);
        let inside = 1.0 / (1.0 + ((r - 1.0) * 12.0).exp());
        let mut val = 0.1 + self.skin * inside;
        for side in [-1.0, 1.0] {
            val -= self.eye_depth * blob(side * self.eye_x, self.eye_y, self.eye_r, self.eye_r * 0.7);
            let by = self.brow_y + side * self.brow_tilt * 0.1;
            val -= 0.25 * blob(side * self.eye_x, by, self.eye_r * 1.4, 0.035);
        }
        val += 0.2 * blob(0.0, self.eye_y + self.nose_len * 0.6, self.nose_w, self.nose_len * 0.5);
        val -= 0.3 * blob(0.0, self.mouth_y, self.mouth_w * 0.5, 0.04);
        for &(x, y, s, a) in &self.marks {
            val += a * blob(x, y, s, s) * inside;
        }
        val
    }

    /// Renders at `pose` by mapping output pixels back to canonical
    /// coordinates: horizontal squash and shift emulate yaw, a shear adds
    /// the perspective slant.
    fn render(&self, pose: Pose, size: usize) -> Vec<f64> {
        let yaw = pose.yaw().to_radians();
        let squash = 0.65 + 0.35 * yaw.cos();
        let shift = 0.22 * yaw.sin() * self.turn;
        let shear = 0.12 * yaw.sin() * self.turn;
        let mut px = Vec::with_capacity(size * size);
        for y in 0..size {
            let v = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                let uc = (u - shift) / squash - shear * v;
                px.push(self.intensity(uc, v));
            }
        }
        px
    }
}

/// Renders `identities × images_per_identity` grayscale images. Images of an
/// identity cycle through the configured poses; noise is the only
/// per-image variation.
pub fn generate_synthetic_identities(cfg: &SyntheticIdentityConfig) -> Result<Dataset> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut samples = Vec::with_capacity(cfg.identities * cfg.images_per_identity);
    for id in 0..cfg.identities {
        let mut shape_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("identity/{id}")));
        let face = FaceShape::sample(&mut shape_rng, cfg.distinctiveness);
        let renders: Vec<Vec<f64>> = cfg.poses.iter().map(|&p| face.render(p, cfg.image_size)).collect();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("noise/{id}")));
        for i in 0..cfg.images_per_identity {
            let k = i % cfg.poses.len();
            let mut pixels = renders[k].clone();
            if cfg.noise > 0.0 {
                for p in &mut pixels {
                    *p = (*p + noise.sample(&mut noise_rng)) as f32 as f64;
                }
            } else {
                for p in &mut pixels {
                    *p = *p as f32 as f64;
                }
            }
            samples.push(Sample {
                pixels,
                label: id,
                pose: cfg.poses[k],
                split: Split::Train,
            });
        }
    }
    Ok(Dataset {
        channels: 1,
        size: cfg.image_size,
        class_count: cfg.identities,
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels_per_image();
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.class_count {
                return Err(Error::Config(format!("sample {i}: label {} ≥ class count {}", s.label, self.class_count)));
            }
            if s.pixels.len() != n {
                return Err(Error::Config(format!("sample {i}: {} pixels, expected {n}", s.pixels.len())));
            }
        }
        Ok(())
    }

    /// Marks `floor(fraction · n_c)` samples of each class for validation,
    /// at least one whenever the class has more than one sample.
    pub fn assign_holdout(&mut self, fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction must lie in [0, 1), got {fraction}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut self.samples {
            s.split = Split::Train;
        }
        for c in 0..self.class_count {
            let mut idx: Vec<usize> = (0..self.samples.len()).filter(|&i| self.samples[i].label == c).collect();
            let n = idx.len();
            let k = if n > 1 { ((fraction * n as f64).floor() as usize).max(1) } else { 0 };
            idx.shuffle(&mut rng);
            for &i in &idx[..k] {
                self.samples[i].split = Split::Val;
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Per-pixel mean over all samples.
    pub fn mean_image(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.pixels_per_image()];
        for s in &self.samples {
            for (a, p) in acc.iter_mut().zip(&s.pixels) {
                *a += p;
            }
        }
        let n = self.samples.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Uniform random subset of `fraction` of the training indices
    /// (at least one).
    pub fn subsample(&self, indices: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
        let mut idx = indices.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1.min(idx.len()), idx.len());
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with_meta(&[])
    }

    /// File bytes carrying free-form key/value metadata after the header.
    pub fn to_bytes_with_meta(&self, meta: &[(String, String)]) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.len(meta.len());
        for (k, v) in meta {
            w.str(k);
            w.str(v);
        }
        w.len(self.channels);
        w.len(self.size);
        w.len(self.class_count);
        w.len(self.samples.len());
        let px = [self.channels, self.size, self.size];
        for s in &self.samples {
            w.len(s.label);
            w.u8(s.pose.code());
            w.u8(u8::from(s.split == Split::Val));
            w.tensor(&Tensor::new(px.to_vec(), s.pixels.clone()).expect("sample shape"));
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_bytes_with_meta(bytes).map(|(d, _)| d)
    }

    pub fn from_bytes_with_meta(bytes: &[u8]) -> Result<(Self, Vec<(String, String)>)> {
        check_header(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let body = check_crc(bytes)?;
        let mut r = Reader::new(body);
        r.take(8)?;
        let n_meta = r.len()?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            meta.push((r.str()?, r.str()?));
        }
        let channels = r.len()?;
        let size = r.len()?;
        let class_count = r.len()?;
        let n = r.len()?;
        let mut samples = Vec::new();
        for _ in 0..n {
            let label = r.len()?;
            let pose = Pose::from_code(r.u8()?)?;
            let split = if r.bool()? { Split::Val } else { Split::Train };
            let t = r.tensor()?;
            if t.shape() != [channels, size, size] {
                return Err(Error::Corrupt(format!("sample shape {:?}", t.shape())));
            }
            samples.push(Sample {
                pixels: t.into_data(),
                label,
                pose,
                split,
            });
        }
        if !r.is_done() {
            return Err(Error::Corrupt("trailing bytes after dataset".into()));
        }
        let ds = Dataset {
            channels,
            size,
            class_count,
            samples,
        };
        ds.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok((ds, meta))
    }
}

/// Resize-then-crop geometry shared by the training and evaluation paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Side length after resizing the (square) image.
    pub resize: usize,
    /// Side length of the crop fed to the network.
    pub crop: usize,
    #[serde(default = "yes")]
    pub random_crop: bool,
    #[serde(default = "yes")]
    pub flip: bool,
}

fn yes() -> bool {
    true
}

impl Augment {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!("crop {} must be in 1..={}", self.crop, self.resize)));
        }
        if (self.resize - self.crop) % 2 != 0 {
            return Err(Error::Config(format!(
                "resize {} minus crop {} must be even so the centre crop is exact",
                self.resize, self.crop
            )));
        }
        Ok(())
    }

    pub fn max_offset(&self) -> usize {
        self.resize - self.crop
    }

    /// Training view: resize, random crop, random horizontal flip.
    pub fn train_view(&self, pixels: &[f64], channels: usize, size: usize, rng: &mut impl Rng) -> Vec<f64> {
        let img = resize_bilinear(pixels, channels, size, self.resize);
        let (oy, ox) = if self.random_crop {
            (rng.gen_range(0..=self.max_offset()), rng.gen_range(0..=self.max_offset()))
        } else {
            (self.max_offset() / 2, self.max_offset() / 2)
        };
        let out = crop(&img, channels, self.resize, oy, ox, self.crop);
        if self.flip && rng.gen_bool(0.5) {
            flip_horizontal(&out, channels, self.crop)
        } else {
            out
        }
    }

    /// Evaluation view: resize and centre crop.
    pub fn eval_view(&self, pixels: &[f64], channels: usize, size: usize) -> Vec<f64> {
        let img = resize_bilinear(pixels, channels, size, self.resize);
        let o = self.max_offset() / 2;
        crop(&img, channels, self.resize, o, o, self.crop)
    }
}

/// Half-pixel-centred bilinear resize of square planes.
pub fn resize_bilinear(pixels: &[f64], channels: usize, from: usize, to: usize) -> Vec<f64> {
    if from == to {
        return pixels.to_vec();
    }
    let scale = from as f64 / to as f64;
    let coord = |o: usize| {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(channels * to * to);
    for c in 0..channels {
        let plane = &pixels[c * from * from..(c + 1) * from * from];
        for y in 0..to {
            let (y0, y1, fy) = coord(y);
            for x in 0..to {
                let (x0, x1, fx) = coord(x);
                let top = plane[y0 * from + x0] * (1.0 - fx) + plane[y0 * from + x1] * fx;
                let bot = plane[y1 * from + x0] * (1.0 - fx) + plane[y1 * from + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

pub fn crop(pixels: &[f64], channels: usize, size: usize, oy: usize, ox: usize, side: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(channels * side * side);
    for c in 0..channels {
        for y in 0..side {
            let row = (c * size + oy + y) * size + ox;
            out.extend_from_slice(&pixels[row..row + side]);
        }
    }
    out
}

pub fn flip_horizontal(pixels: &[f64], channels: usize, size: usize) -> Vec<f64> {
    let mut out = pixels.to_vec();
    for row in out.chunks_exact_mut(size).take(channels * size) {
        row.reverse();
    }
    out
}

/// Stacks views into a `[N, C, side, side]` batch.
pub fn stack(views: &[Vec<f64>], channels: usize, side: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(views.len() * channels * side * side);
    for v in views {
        data.extend_from_slice(v);
    }
    Tensor::new(vec![views.len(), channels, side, side], data)
}
