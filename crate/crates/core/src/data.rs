//! Synthetic phantom slices, the augmentation pipeline and the on-disk
//! dataset container.
//!
//! Container layout: `meta.json`, `images.bin` (f32 little-endian, row-major,
//! one fixed-size record per slice) and `masks.bin` (one u8 label per pixel).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::windowing::Grid;

pub const CONTAINER_VERSION: u32 = 1;
const PLACEMENT_ATTEMPTS: usize = 200;
const LAYOUT_RESTARTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Blob,
    Ring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub label: u8,
    pub name: String,
    pub family: ShapeFamily,
    /// Mean intensity band.
    pub intensity: [f64; 2],
    /// Semi-axis band in pixels at the central slice.
    pub size: [f64; 2],
    pub count: [usize; 2],
    /// Expected band of the mean per-slice pixel frequency.
    pub frequency: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub classes: Vec<ClassSpec>,
    /// Standard deviation of the correlated noise.
    pub noise: f64,
    pub subjects: usize,
    pub slices_per_subject: usize,
    /// Classes seen with labels during pretraining.
    pub group_a: Vec<u8>,
    /// Classes reserved for adaptation.
    pub group_b: Vec<u8>,
}

impl PhantomSpec {
    pub fn toy() -> Self {
        let class = |label: u8, name: &str, family, intensity, size, frequency| ClassSpec {
            label,
            name: name.to_string(),
            family,
            intensity,
            size,
            count: [1, 1],
            frequency,
        };
        PhantomSpec {
            image_size: 64,
            classes: vec![
                class(1, "organ_a", ShapeFamily::Ellipse, [0.70, 0.80], [8.0, 10.0], [0.03, 0.10]),
                class(2, "vessel_a", ShapeFamily::Ring, [0.95, 1.05], [5.0, 7.0], [0.006, 0.04]),
                class(3, "lesion_a", ShapeFamily::Blob, [0.45, 0.55], [4.0, 6.0], [0.005, 0.03]),
                class(4, "organ_b", ShapeFamily::Blob, [0.30, 0.38], [6.5, 8.0], [0.02, 0.07]),
                class(5, "vessel_b", ShapeFamily::Ellipse, [1.15, 1.25], [3.5, 5.0], [0.004, 0.025]),
                class(6, "lesion_b", ShapeFamily::Ring, [0.58, 0.64], [5.0, 6.5], [0.005, 0.035]),
            ],
            noise: 0.04,
            subjects: 20,
            slices_per_subject: 8,
            group_a: vec![1, 2, 3],
            group_b: vec![4, 5, 6],
        }
    }

    pub fn class(&self, label: u8) -> Result<&ClassSpec> {
        self.classes.iter().find(|c| c.label == label).ok_or_else(|| Error::Unknown { kind: "class", name: label.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.image_size < 16 {
            return bad(format!("image_size {} is below 16", self.image_size));
        }
        if self.subjects < 3 || self.slices_per_subject == 0 {
            return bad("need at least 3 subjects and one slice each".into());
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.label == 0 || self.classes[..i].iter().any(|d| d.label == c.label) {
                return bad(format!("class label {} is zero or duplicated", c.label));
            }
            if !(c.size[0] > 1.0 && c.size[0] <= c.size[1]) || c.count[0] > c.count[1] || c.intensity[0] > c.intensity[1] {
                return bad(format!("class {}: malformed band", c.label));
            }
            // The body ellipse has semi-axes of at least 0.38·size.
            if 2.0 * c.size[1] > 0.6 * self.image_size as f64 {
                return bad(format!("class {} (size {}) cannot fit in a {} px body", c.label, c.size[1], self.image_size));
            }
        }
        for l in self.group_a.iter().chain(&self.group_b) {
            self.class(*l)?;
        }
        if self.group_a.iter().any(|l| self.group_b.contains(l)) {
            return bad("class groups A and B overlap".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Unknown { kind: "split", name: s.to_string() }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub subject: usize,
    pub index: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: PhantomSpec,
    pub seed: u64,
    /// Split of every subject.
    pub splits: Vec<Split>,
    /// Ordered by subject, then slice.
    pub slices: Vec<Slice>,
}

impl Dataset {
    pub fn size(&self) -> usize {
        self.spec.image_size
    }

    pub fn subjects_in(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&s| self.splits[s] == split).collect()
    }

    pub fn slices_of(&self, subjects: &[usize]) -> Vec<&Slice> {
        self.slices.iter().filter(|s| subjects.contains(&s.subject)).collect()
    }

    pub fn split_slices(&self, split: Split) -> Vec<&Slice> {
        self.slices_of(&self.subjects_in(split))
    }
}

/// 70/10/20 subject split; the validation and test parts get at least one
/// subject each.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    let test = ((n as f64 * 0.2).round() as usize).max(1);
    (n - val - test, val, test)
}

struct Instance {
    label: u8,
    family: ShapeFamily,
    center: [f64; 2],
    axes: [f64; 2],
    angle: f64,
    harmonics: [(f64, f64); 2],
    intensity: f64,
    gradient: [f64; 2],
}

impl Instance {
    /// Normalised radius of `(x, y)`; the shape covers `r ≤ 1`.
    fn radius(&self, x: f64, y: f64, scale: f64) -> f64 {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / (self.axes[0] * scale);
        let v = (-s * dx + c * dy) / (self.axes[1] * scale);
        let r = (u * u + v * v).sqrt();
        match self.family {
            ShapeFamily::Blob => {
                let t = v.atan2(u);
                let m = 1.0 + self.harmonics[0].0 * (2.0 * t + self.harmonics[0].1).sin() + self.harmonics[1].0 * (3.0 * t + self.harmonics[1].1).sin();
                r / m
            }
            _ => r,
        }
    }

    fn covers(&self, x: f64, y: f64, scale: f64) -> bool {
        let r = self.radius(x, y, scale);
        match self.family {
            ShapeFamily::Ring => (0.55..=1.0).contains(&r),
            _ => r <= 1.0,
        }
    }
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(subject as u64 + 1);
    r
}

fn box_blur(v: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 0..n {
        for j in 0..n {
            let (mut s, mut k) = (0.0, 0.0);
            for a in i.saturating_sub(1)..(i + 2).min(n) {
                for b in j.saturating_sub(1)..(j + 2).min(n) {
                    s += v[a * n + b];
                    k += 1.0;
                }
            }
            out[i * n + j] = s / k;
        }
    }
    out
}

/// Zero-mean noise with a short spatial correlation, scaled to `std`.
fn correlated_noise(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white: Vec<f64> = (0..n * n).map(|_| normal.sample(rng)).collect();
    let smooth = box_blur(&box_blur(&white, n), n);
    let sd = (smooth.iter().map(|v| v * v).sum::<f64>() / smooth.len() as f64).sqrt().max(1e-12);
    smooth.iter().map(|v| v * std / sd).collect()
}

fn reach(family: ShapeFamily, axes: [f64; 2]) -> f64 {
    axes[0].max(axes[1]) * if family == ShapeFamily::Blob { 1.3 } else { 1.0 }
}

/// One attempt at a non-overlapping layout of the whole catalog.
fn place_instances(spec: &PhantomSpec, body_center: [f64; 2], body_axes: [f64; 2], rng: &mut impl Rng) -> Option<Vec<Instance>> {
    let mut placed: Vec<Instance> = Vec::new();
    // Large shapes first; they are the hardest to fit.
    let mut order: Vec<&ClassSpec> = spec.classes.iter().collect();
    order.sort_by(|a, b| b.size[1].total_cmp(&a.size[1]));
    for c in order {
        let count = rng.random_range(c.count[0]..=c.count[1]);
        for _ in 0..count {
            let mut ok = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let axes = [rng.random_range(c.size[0]..=c.size[1]), rng.random_range(c.size[0]..=c.size[1])];
                let r = reach(c.family, axes);
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                let rad = rng.random_range(0.0..1.0f64).sqrt();
                let room = [body_axes[0] - r - 2.0, body_axes[1] - r - 2.0];
                if room[0] <= 0.0 || room[1] <= 0.0 {
                    return None;
                }
                let center = [body_center[0] + rad * room[0] * ang.cos(), body_center[1] + rad * room[1] * ang.sin()];
                let clear = placed.iter().all(|p| {
                    let d = ((p.center[0] - center[0]).powi(2) + (p.center[1] - center[1]).powi(2)).sqrt();
                    d > reach(p.family, p.axes) + r + 1.5
                });
                if !clear {
                    continue;
                }
                placed.push(Instance {
                    label: c.label,
                    family: c.family,
                    center,
                    axes,
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                    harmonics: [(rng.random_range(0.05..0.2), rng.random_range(0.0..6.28)), (rng.random_range(0.0..0.1), rng.random_range(0.0..6.28))],
                    intensity: rng.random_range(c.intensity[0]..=c.intensity[1]),
                    gradient: [rng.random_range(-0.004..0.004), rng.random_range(-0.004..0.004)],
                });
                ok = true;
                break;
            }
            if !ok {
                return None;
            }
        }
    }
    Some(placed)
}

fn generate_subject(spec: &PhantomSpec, seed: u64, subject: usize) -> Result<Vec<Slice>> {
    let mut rng = subject_rng(seed, subject);
    let n = spec.image_size as f64;
    let mid = (n - 1.0) / 2.0;
    let body_axes = [n * rng.random_range(0.42..0.47), n * rng.random_range(0.40..0.45)];
    let body_center = [mid + rng.random_range(-1.5..1.5), mid + rng.random_range(-1.5..1.5)];
    let body_grad = [rng.random_range(-0.002..0.002), rng.random_range(-0.002..0.002)];
    let placed = (0..LAYOUT_RESTARTS)
        .find_map(|_| place_instances(spec, body_center, body_axes, &mut rng))
        .ok_or_else(|| Error::Dataset(format!("the class catalog cannot be placed in subject {subject}")))?;

    let side = spec.image_size;
    let k = spec.slices_per_subject;
    let mut slices = Vec::with_capacity(k);
    for z in 0..k {
        // Objects shrink towards the outer slices like sections of a solid.
        let t = if k == 1 { 0.0 } else { (z as f64 / (k - 1) as f64) * 2.0 - 1.0 };
        let scale = (1.0 - 0.6 * t * t).sqrt();
        let noise = correlated_noise(side, spec.noise, &mut rng);
        let mut image = Vec::with_capacity(side * side);
        let mut mask = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                let (x, y) = (j as f64, i as f64);
                let bx = (x - body_center[0]) / body_axes[0];
                let by = (y - body_center[1]) / body_axes[1];
                let (mut v, mut l) = if bx * bx + by * by <= 1.0 {
                    (0.2 + body_grad[0] * (x - mid) + body_grad[1] * (y - mid), 0u8)
                } else {
                    (0.0, 0u8)
                };
                for p in &placed {
                    if p.covers(x, y, scale) {
                        v = p.intensity + p.gradient[0] * (x - p.center[0]) + p.gradient[1] * (y - p.center[1]);
                        l = p.label;
                    }
                }
                image.push((v + noise[i * side + j]) as f32);
                mask.push(l);
            }
        }
        slices.push(Slice { subject, index: z, image, mask });
    }
    Ok(slices)
}

/// Deterministic per `(spec, seed)`; every subject draws from its own stream.
pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut slices = Vec::with_capacity(spec.subjects * spec.slices_per_subject);
    for s in 0..spec.subjects {
        slices.extend(generate_subject(spec, seed, s)?);
    }
    let (train, val, _) = split_counts(spec.subjects);
    let mut order: Vec<usize> = (0..spec.subjects).collect();
    order.shuffle(&mut subject_rng(seed, usize::MAX - 1));
    let mut splits = vec![Split::Test; spec.subjects];
    for (rank, &s) in order.iter().enumerate() {
        splits[s] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(Dataset { spec: spec.clone(), seed, splits, slices })
}

/// Maps dataset labels onto bank indices: `labels[m]` becomes `m`, anything
/// else becomes background.
pub fn remap_mask(mask: &[u8], labels: &[u8]) -> Vec<u8> {
    let mut lut = [0u8; 256];
    for (m, &l) in labels.iter().enumerate().skip(1) {
        lut[l as usize] = m as u8;
    }
    mask.iter().map(|&v| lut[v as usize]).collect()
}

// ---------------------------------------------------------------- container

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SubjectMeta {
    id: usize,
    split: Split,
    slices: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    seed: u64,
    spec: PhantomSpec,
    image_size: usize,
    subjects: Vec<SubjectMeta>,
    images_sha256: String,
    masks_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn f32_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_le(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Truncated(format!("{} bytes is not a whole number of f32 values", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let images: Vec<u8> = ds.slices.iter().flat_map(|s| f32_le_bytes(&s.image)).collect();
    let masks: Vec<u8> = ds.slices.iter().flat_map(|s| s.mask.iter().copied()).collect();
    let subjects = (0..ds.splits.len())
        .map(|id| SubjectMeta { id, split: ds.splits[id], slices: ds.slices.iter().filter(|s| s.subject == id).count() })
        .collect();
    let meta = Meta {
        format_version: CONTAINER_VERSION,
        seed: ds.seed,
        spec: ds.spec.clone(),
        image_size: ds.size(),
        subjects,
        images_sha256: sha256_hex(&images),
        masks_sha256: sha256_hex(&masks),
    };
    fs::write(dir.join("images.bin"), &images)?;
    fs::write(dir.join("masks.bin"), &masks)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)
        .map_err(|e| Error::Dataset(format!("meta.json: {e}")))?;
    if meta.format_version != CONTAINER_VERSION {
        return Err(Error::Dataset(format!("container version {} is not {CONTAINER_VERSION}", meta.format_version)));
    }
    let images = fs::read(dir.join("images.bin"))?;
    let masks = fs::read(dir.join("masks.bin"))?;
    let px = meta.image_size * meta.image_size;
    let n: usize = meta.subjects.iter().map(|s| s.slices).sum();
    if images.len() != n * px * 4 {
        return Err(Error::Truncated(format!("images.bin has {} bytes, expected {}", images.len(), n * px * 4)));
    }
    if masks.len() != n * px {
        return Err(Error::Truncated(format!("masks.bin has {} bytes, expected {}", masks.len(), n * px)));
    }
    if sha256_hex(&images) != meta.images_sha256 {
        return Err(Error::Checksum("images.bin does not match meta.json".into()));
    }
    if sha256_hex(&masks) != meta.masks_sha256 {
        return Err(Error::Checksum("masks.bin does not match meta.json".into()));
    }
    let values = f32_from_le(&images)?;
    let mut slices = Vec::with_capacity(n);
    let mut k = 0;
    for s in &meta.subjects {
        for index in 0..s.slices {
            let mask = masks[k * px..(k + 1) * px].to_vec();
            if let Some(&bad) = mask.iter().find(|&&l| l != 0 && meta.spec.classes.iter().all(|c| c.label != l)) {
                return Err(Error::Dataset(format!("label {bad} is not in the class catalog")));
            }
            slices.push(Slice { subject: s.id, index, image: values[k * px..(k + 1) * px].to_vec(), mask });
            k += 1;
        }
    }
    let splits = meta.subjects.iter().map(|s| s.split).collect();
    Ok(Dataset { spec: meta.spec, seed: meta.seed, splits, slices })
}

// ------------------------------------------------------------- augmentation

fn uniform(r: [f64; 2], rng: &mut impl Rng) -> f64 {
    if r[0] < r[1] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Ranges of the random transforms. Zero-width ranges disable a transform.
#[derive(Clone, Debug, PartialEq)]
pub struct AugPolicy {
    pub intensity_scale: [f64; 2],
    pub intensity_shift: [f64; 2],
    pub gamma: [f64; 2],
    pub rotation_deg: f64,
    pub scale: [f64; 2],
    pub shear: f64,
    pub mask_fraction: [f64; 2],
    pub mask_block: usize,
}

impl AugPolicy {
    pub fn identity() -> Self {
        AugPolicy {
            intensity_scale: [1.0, 1.0],
            intensity_shift: [0.0, 0.0],
            gamma: [1.0, 1.0],
            rotation_deg: 0.0,
            scale: [1.0, 1.0],
            shear: 0.0,
            mask_fraction: [0.0, 0.0],
            mask_block: 8,
        }
    }

    pub fn weak() -> Self {
        AugPolicy { intensity_scale: [0.9, 1.1], intensity_shift: [-0.05, 0.05], gamma: [0.85, 1.15], ..Self::identity() }
    }

    pub fn strong(mask_fraction: [f64; 2]) -> Self {
        AugPolicy { rotation_deg: 10.0, scale: [0.9, 1.1], shear: 0.05, mask_fraction, ..Self::weak() }
    }

    /// Linear part of a random affine map from view offsets to slice offsets.
    pub fn sample_affine(&self, rng: &mut impl Rng) -> [[f64; 2]; 2] {
        let th = if self.rotation_deg > 0.0 { rng.random_range(-self.rotation_deg..self.rotation_deg).to_radians() } else { 0.0 };
        let s = uniform(self.scale, rng);
        let sh = if self.shear > 0.0 { rng.random_range(-self.shear..self.shear) } else { 0.0 };
        let (sn, cs) = th.sin_cos();
        // Rotation · scale · shear.
        [[s * cs, s * (cs * sh - sn)], [s * sn, s * (sn * sh + cs)]]
    }
}

/// How a view was produced from its slice.
#[derive(Clone, Debug, PartialEq)]
pub struct AugRecord {
    pub matrix: [[f64; 2]; 2],
    pub view_center: [f64; 2],
    pub source_center: [f64; 2],
    pub intensity_scale: f64,
    pub intensity_shift: f64,
    pub gamma: f64,
    /// Per pixel, whether the strong pipeline dropped or shuffled it.
    pub masked: Vec<bool>,
}

impl AugRecord {
    /// Slice coordinates `(x, y)` of view pixel `(row, col)`.
    pub fn map(&self, row: f64, col: f64) -> [f64; 2] {
        let u = col - self.view_center[0];
        let v = row - self.view_center[1];
        let m = &self.matrix;
        [self.source_center[0] + m[0][0] * u + m[0][1] * v, self.source_center[1] + m[1][0] * u + m[1][1] * v]
    }

    pub fn grid(&self, h: usize, w: usize) -> Grid {
        let points = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| self.map(i as f64, j as f64)).collect();
        Grid { h, w, points }
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked.iter().filter(|&&m| m).count() as f64 / self.masked.len().max(1) as f64
    }

    /// Half extents of the view footprint around its centre, in slice pixels.
    pub fn half_extent(matrix: &[[f64; 2]; 2], h: usize, w: usize) -> [f64; 2] {
        let (a, b) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        [matrix[0][0].abs() * a + matrix[0][1].abs() * b, matrix[1][0].abs() * a + matrix[1][1].abs() * b]
    }
}

/// Bilinear sample with edge clamping.
pub fn sample_bilinear(img: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, c: usize| img[r * w + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub h: usize,
    pub w: usize,
    pub image: Vec<f64>,
    pub record: AugRecord,
}

impl View {
    pub fn grid(&self) -> Grid {
        self.record.grid(self.h, self.w)
    }
}

fn intensity(values: &mut [f64], scale: f64, shift: f64, gamma: f64) {
    if gamma != 1.0 {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for v in values.iter_mut() {
                *v = lo + (hi - lo) * ((*v - lo) / (hi - lo)).powf(gamma);
            }
        }
    }
    for v in values.iter_mut() {
        *v = *v * scale + shift;
    }
}

/// Renders an `out.0 × out.1` view of `img` through `matrix` centred at
/// `center` and applies the intensity transforms.
pub fn render_view(
    img: &[f64],
    size: (usize, usize),
    out: (usize, usize),
    center: [f64; 2],
    matrix: [[f64; 2]; 2],
    policy: &AugPolicy,
    rng: &mut impl Rng,
) -> View {
    let (h, w) = out;
    let record = AugRecord {
        matrix,
        view_center: [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0],
        source_center: center,
        intensity_scale: uniform(policy.intensity_scale, rng),
        intensity_shift: uniform(policy.intensity_shift, rng),
        gamma: uniform(policy.gamma, rng),
        masked: vec![false; h * w],
    };
    let identity = matrix == [[1.0, 0.0], [0.0, 1.0]];
    let mut image = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let [x, y] = record.map(i as f64, j as f64);
            image.push(if identity && x.fract() == 0.0 && y.fract() == 0.0 && x >= 0.0 && y >= 0.0 && (x as usize) < size.1 && (y as usize) < size.0 {
                img[y as usize * size.1 + x as usize]
            } else {
                sample_bilinear(img, size.0, size.1, x, y)
            });
        }
    }
    intensity(&mut image, record.intensity_scale, record.intensity_shift, record.gamma);
    View { h, w, image, record }
}

/// Intensity-only view of a crop centred at `center`.
pub fn augment_weak(img: &[f64], size: (usize, usize), out: (usize, usize), center: [f64; 2], policy: &AugPolicy, rng: &mut impl Rng) -> View {
    render_view(img, size, out, center, [[1.0, 0.0], [0.0, 1.0]], policy, rng)
}

/// Affine, intensity and block masking: a random fraction of
/// `mask_block`-sized blocks is either zeroed or cyclically shuffled.
pub fn augment_strong(
    img: &[f64],
    size: (usize, usize),
    out: (usize, usize),
    center: [f64; 2],
    matrix: [[f64; 2]; 2],
    policy: &AugPolicy,
    rng: &mut impl Rng,
) -> View {
    let mut view = render_view(img, size, out, center, matrix, policy, rng);
    let (h, w) = out;
    let bs = policy.mask_block.max(1);
    let (bh, bw) = (h / bs, w / bs);
    let nb = bh * bw;
    let [lo, hi] = policy.mask_fraction;
    if nb == 0 || hi <= 0.0 {
        return view;
    }
    let f = if lo < hi { rng.random_range(lo..hi) } else { lo };
    let k = ((f * nb as f64).round() as usize).clamp((lo * nb as f64).ceil() as usize, (hi * nb as f64).floor() as usize);
    let mut blocks: Vec<usize> = (0..nb).collect();
    blocks.shuffle(rng);
    let chosen = &blocks[..k];
    let n_shuffle = if k >= 4 { k / 2 } else { 0 };
    let (shuffled, dropped) = chosen.split_at(n_shuffle);
    let copy = |b: usize| -> Vec<f64> {
        let (r0, c0) = ((b / bw) * bs, (b % bw) * bs);
        (0..bs).flat_map(|i| (0..bs).map(move |j| (i, j))).map(|(i, j)| view.image[(r0 + i) * w + c0 + j]).collect()
    };
    let contents: Vec<Vec<f64>> = shuffled.iter().map(|&b| copy(b)).collect();
    let write = |b: usize, src: Option<&[f64]>, image: &mut Vec<f64>, masked: &mut Vec<bool>| {
        let (r0, c0) = ((b / bw) * bs, (b % bw) * bs);
        for i in 0..bs {
            for j in 0..bs {
                let p = (r0 + i) * w + c0 + j;
                image[p] = src.map_or(0.0, |s| s[i * bs + j]);
                masked[p] = true;
            }
        }
    };
    let (mut image, mut masked) = (std::mem::take(&mut view.image), std::mem::take(&mut view.record.masked));
    for (q, &b) in shuffled.iter().enumerate() {
        write(b, Some(&contents[(q + 1) % contents.len()]), &mut image, &mut masked);
    }
    for &b in dropped {
        write(b, None, &mut image, &mut masked);
    }
    view.image = image;
    view.record.masked = masked;
    view
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec { subjects: 10, slices_per_subject: 3, ..PhantomSpec::toy() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec(), 3).unwrap();
        let b = generate(&small_spec(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate(&small_spec(), 4).unwrap();
        assert_ne!(a.slices[0].image, c.slices[0].image);
    }

    #[test]
    fn split_is_by_subject() {
        let ds = generate(&small_spec(), 1).unwrap();
        let counts = [Split::Train, Split::Val, Split::Test].map(|s| ds.subjects_in(s).len());
        assert_eq!(counts, [7, 1, 2]);
        assert_eq!(split_counts(20), (14, 2, 4));
        for s in &ds.slices {
            assert!(s.mask.iter().all(|&l| l <= 6));
        }
    }

    #[test]
    fn class_frequencies_within_bands() {
        let spec = PhantomSpec::toy();
        let ds = generate(&spec, 11).unwrap();
        for c in &spec.classes {
            let masks: Vec<&[u8]> = ds.slices.iter().map(|s| s.mask.as_slice()).collect();
            let f = crate::supervise::class_frequencies(&masks, &[c.label])[0];
            assert!(f >= c.frequency[0] && f <= c.frequency[1], "class {}: {f}", c.label);
        }
    }

    #[test]
    fn groups_must_be_disjoint() {
        let spec = PhantomSpec { group_b: vec![3, 4], ..PhantomSpec::toy() };
        assert!(spec.validate().is_err());
        let spec = PhantomSpec { image_size: 24, ..PhantomSpec::toy() };
        assert!(generate(&spec, 0).is_err());
    }

    #[test]
    fn container_round_trip_and_checksum() {
        let ds = generate(&small_spec(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
        let first = fs::read(dir.path().join("images.bin")).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("images.bin")).unwrap(), first);

        let mut bytes = first.clone();
        bytes[17] ^= 0x40;
        fs::write(dir.path().join("images.bin"), &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Checksum(_))));
        fs::write(dir.path().join("images.bin"), &first[..first.len() - 3]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Truncated(_))));
    }

    #[test]
    fn payload_bytes_are_little_endian() {
        // Golden encoding, independent of host byte order.
        let bytes = f32_le_bytes(&[1.0, -2.5, 0.15625]);
        assert_eq!(bytes, vec![0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0, 0x00, 0x00, 0x20, 0x3e]);
        assert_eq!(f32_from_le(&bytes).unwrap(), vec![1.0, -2.5, 0.15625]);
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn remap_to_banks() {
        assert_eq!(remap_mask(&[0, 1, 4, 5, 6, 4], &[0, 4, 6]), vec![0, 0, 1, 0, 2, 1]);
    }

    #[test]
    fn identity_policy_is_identity() {
        let img: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AugPolicy::identity();
        let v = augment_strong(&img, (8, 8), (8, 8), [3.5, 3.5], p.sample_affine(&mut rng), &p, &mut rng);
        assert_eq!(v.image, img);
        assert_eq!(v.record.masked_fraction(), 0.0);
    }

    #[test]
    fn affine_record_tracks_image_content() {
        let n = 64;
        let peaks = [[20.3, 22.1], [41.7, 25.4], [24.2, 40.6], [39.5, 42.2]];
        let img: Vec<f64> = (0..n * n)
            .map(|p| {
                let (y, x) = ((p / n) as f64, (p % n) as f64);
                peaks.iter().map(|c| (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / 4.0).exp()).sum()
            })
            .collect();
        let policy = AugPolicy { intensity_scale: [1.0, 1.0], intensity_shift: [0.0, 0.0], gamma: [1.0, 1.0], ..AugPolicy::strong([0.0, 0.0]) };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let m = policy.sample_affine(&mut rng);
            let v = augment_strong(&img, (n, n), (48, 48), [31.5, 31.5], m, &policy, &mut rng);
            for c in &peaks {
                // Locate the peak in the view by a local intensity centroid.
                let (mut best, mut at) = (f64::MIN, 0);
                for (p, &val) in v.image.iter().enumerate() {
                    let [x, y] = v.record.map((p / 48) as f64, (p % 48) as f64);
                    if (x - c[0]).abs() < 4.0 && (y - c[1]).abs() < 4.0 && val > best {
                        best = val;
                        at = p;
                    }
                }
                let (ar, ac) = (at / 48, at % 48);
                let (mut sw, mut sr, mut sc) = (0.0, 0.0, 0.0);
                for r in ar.saturating_sub(3)..(ar + 4).min(48) {
                    for col in ac.saturating_sub(3)..(ac + 4).min(48) {
                        let wgt = v.image[r * 48 + col].powi(4);
                        sw += wgt;
                        sr += wgt * r as f64;
                        sc += wgt * col as f64;
                    }
                }
                let [x, y] = v.record.map(sr / sw, sc / sw);
                let d = ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt();
                assert!(d < 0.5, "peak {c:?} maps to ({x}, {y})");
            }
        }
    }

    #[test]
    fn masked_fraction_in_band() {
        let img = vec![1.0; 64 * 64];
        let policy = AugPolicy::strong([0.1, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for out in [48, 32] {
            for _ in 0..50 {
                let m = policy.sample_affine(&mut rng);
                let v = augment_strong(&img, (64, 64), (out, out), [31.5, 31.5], m, &policy, &mut rng);
                let f = v.record.masked_fraction();
                assert!((0.1..=0.4).contains(&f), "{f}");
                let zeros = v.image.iter().filter(|&&x| x == 0.0).count();
                assert!(zeros <= v.record.masked.iter().filter(|&&m| m).count());
            }
        }
    }
}
