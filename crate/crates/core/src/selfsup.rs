//! Dense self-supervision: multi-crop views, online prototypes from
//! spatially weighted soft clustering, student-teacher correspondence and the
//! prototype-assignment loss.

use std::rc::Rc;

use rand::Rng;

use crate::config::ExperimentConfig;
use crate::data::{augment_strong, augment_weak, AugPolicy, AugRecord, View};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{softmax_in_place, unit_rows};
use crate::seghead::COSINE_EPS;
use crate::tensor::Tensor;
use crate::windowing::Grid;

pub const CPA_LOG_GUARD: f64 = 1e-12;
/// Total assignment mass below which a prototype counts as empty.
pub const EMPTY_CLUSTER_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ViewTriplet {
    pub teacher: View,
    pub students: [View; 2],
}

/// Teacher crop with weak augmentation plus two strongly augmented student
/// crops whose footprints lie inside the teacher crop.
pub fn make_views(img: &[f64], size: (usize, usize), cfg: &ExperimentConfig, rng: &mut impl Rng) -> Result<ViewTriplet> {
    let [ft, f1, f2] = cfg.fovs();
    let (h, w) = size;
    if h < ft || w < ft {
        return Err(Error::Geometry(format!("{h}x{w} slice is smaller than the {ft} px teacher view")));
    }
    let weak = AugPolicy::weak();
    let strong = AugPolicy::strong(cfg.mask_fraction);
    let tc = [rng.random_range(0..=w - ft) as f64 + (ft as f64 - 1.0) / 2.0, rng.random_range(0..=h - ft) as f64 + (ft as f64 - 1.0) / 2.0];
    let teacher = augment_weak(img, size, (ft, ft), tc, &weak, rng);
    let s1 = student_view(img, size, tc, ft, f1, &strong, rng);
    let s2 = student_view(img, size, tc, ft, f2, &strong, rng);
    Ok(ViewTriplet { teacher, students: [s1, s2] })
}

fn student_view(img: &[f64], size: (usize, usize), tc: [f64; 2], ft: usize, fov: usize, policy: &AugPolicy, rng: &mut impl Rng) -> View {
    let half_t = (ft as f64 - 1.0) / 2.0;
    let mut m = policy.sample_affine(rng);
    let mut ext = AugRecord::half_extent(&m, fov, fov);
    if ext[0] > half_t || ext[1] > half_t {
        m = [[1.0, 0.0], [0.0, 1.0]];
        ext = AugRecord::half_extent(&m, fov, fov);
    }
    let mut pick = |c: f64, e: f64| if e < half_t { rng.random_range(c - half_t + e..=c + half_t - e) } else { c };
    let center = [pick(tc[0], ext[0]), pick(tc[1], ext[1])];
    augment_strong(img, size, (fov, fov), center, m, policy, rng)
}

/// Grid of an embedding at `stride` relative to its pixel grid: every cell
/// sits at the mean of the pixels it covers.
pub fn embed_grid(pixels: &Grid, stride: usize) -> Result<Grid> {
    if stride == 0 || pixels.h % stride != 0 || pixels.w % stride != 0 {
        return Err(Error::Geometry(format!("{}x{} grid is not divisible by stride {stride}", pixels.h, pixels.w)));
    }
    let (h, w) = (pixels.h / stride, pixels.w / stride);
    let k = (stride * stride) as f64;
    let mut points = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut p = [0.0, 0.0];
            for a in 0..stride {
                for b in 0..stride {
                    let q = pixels.at(i * stride + a, j * stride + b);
                    p[0] += q[0];
                    p[1] += q[1];
                }
            }
            points.push([p[0] / k, p[1] / k]);
        }
    }
    Ok(Grid { h, w, points })
}

/// Row-major indices of the cells `(offset + 2a, offset + 2b)`.
pub fn subsample_indices(h: usize, w: usize, offset: (usize, usize)) -> Vec<usize> {
    let mut out = Vec::new();
    for i in (offset.0..h).step_by(2) {
        for j in (offset.1..w).step_by(2) {
            out.push(i * w + j);
        }
    }
    out
}

pub fn subsample_shape(h: usize, w: usize, offset: (usize, usize)) -> (usize, usize) {
    ((h - offset.0).div_ceil(2), (w - offset.1).div_ceil(2))
}

pub fn subsample_grid(g: &Grid, offset: (usize, usize)) -> Grid {
    let (h, w) = subsample_shape(g.h, g.w, offset);
    Grid { h, w, points: subsample_indices(g.h, g.w, offset).into_iter().map(|p| g.points[p]).collect() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub c: usize,
    /// `N_k × C`.
    pub centroids: Vec<f64>,
    pub positions: Vec<[f64; 2]>,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.c..(k + 1) * self.c]
    }
}

fn bilinear_cell(values: &[f64], h: usize, w: usize, c: usize, y: f64, x: f64, out: &mut [f64]) {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    for (ch, o) in out.iter_mut().enumerate() {
        let at = |r: usize, q: usize| values[(r * w + q) * c + ch];
        *o = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
    }
}

/// Seeds on an `r`-spaced lattice of cell centres, `((a + 0.5)·r − 0.5)` in
/// cell coordinates; centroids and world positions are bilinear samples.
pub fn seed_prototypes(values: &[f64], grid: &Grid, c: usize, r: usize) -> Result<PrototypeBank> {
    let (h, w) = (grid.h, grid.w);
    if values.len() != h * w * c {
        return Err(Error::shape(format!("{} values for a {h}x{w}x{c} map", values.len())));
    }
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Geometry(format!("{h}x{w} map is not divisible by reduction {r}")));
    }
    let pts: Vec<f64> = grid.points.iter().flat_map(|p| [p[0], p[1]]).collect();
    let mut centroids = Vec::with_capacity((h / r) * (w / r) * c);
    let mut positions = Vec::with_capacity((h / r) * (w / r));
    let mut buf = vec![0.0; c];
    let mut pos = [0.0; 2];
    for a in 0..h / r {
        for b in 0..w / r {
            let y = (a as f64 + 0.5) * r as f64 - 0.5;
            let x = (b as f64 + 0.5) * r as f64 - 0.5;
            bilinear_cell(values, h, w, c, y, x, &mut buf);
            bilinear_cell(&pts, h, w, 2, y, x, &mut pos);
            centroids.extend_from_slice(&buf);
            positions.push(pos);
        }
    }
    Ok(PrototypeBank { c, centroids, positions })
}

/// `σ² = fwhm² / (8 ln 2)`, so the weight is exactly 0.5 at distance `fwhm/2`.
pub fn fwhm_variance(fwhm: f64) -> f64 {
    fwhm * fwhm / (8.0 * std::f64::consts::LN_2)
}

/// `W[n][k] = exp(−‖p_n − pos_k‖² / 2σ²)`; an infinite `fwhm` gives 1.
pub fn spatial_weights(points: &[[f64; 2]], positions: &[[f64; 2]], fwhm: f64) -> Vec<f64> {
    let two_var = 2.0 * fwhm_variance(fwhm);
    let mut out = Vec::with_capacity(points.len() * positions.len());
    for p in points {
        for q in positions {
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            out.push((-d2 / two_var).exp());
        }
    }
    out
}

/// `Φ[n][k] = softmax_k(cos(F_n, c_k) / τ)`.
pub fn assign(values: &[f64], c: usize, bank: &PrototypeBank, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("assignment temperature {tau} is not positive")));
    }
    if c != bank.c || values.len() % c != 0 {
        return Err(Error::shape(format!("{c}-channel features against a {}-channel bank", bank.c)));
    }
    let (fu, _) = unit_rows(values, c, COSINE_EPS);
    let (cu, _) = unit_rows(&bank.centroids, c, COSINE_EPS);
    let k = bank.len();
    let mut phi = Vec::with_capacity(values.len() / c * k);
    for f in fu.chunks(c) {
        let start = phi.len();
        phi.extend(cu.chunks(c).map(|q| f.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / tau));
        softmax_in_place(&mut phi[start..]);
    }
    Ok(phi)
}

/// Weighted means of features and positions under `Φ̃`; prototypes with no
/// mass keep their previous state and are flagged.
pub fn update_prototypes(values: &[f64], points: &[[f64; 2]], weights: &[f64], prev: &PrototypeBank) -> (PrototypeBank, Vec<bool>) {
    let (c, k) = (prev.c, prev.len());
    let mut mass = vec![0.0; k];
    let mut sum = vec![0.0; k * c];
    let mut pos = vec![[0.0; 2]; k];
    for (n, f) in values.chunks(c).enumerate() {
        for j in 0..k {
            let wgt = weights[n * k + j];
            if wgt == 0.0 {
                continue;
            }
            mass[j] += wgt;
            for (s, v) in sum[j * c..(j + 1) * c].iter_mut().zip(f) {
                *s += wgt * v;
            }
            pos[j][0] += wgt * points[n][0];
            pos[j][1] += wgt * points[n][1];
        }
    }
    let mut next = prev.clone();
    let mut empty = vec![false; k];
    for j in 0..k {
        if mass[j] <= EMPTY_CLUSTER_EPS {
            empty[j] = true;
            continue;
        }
        for (dst, s) in next.centroids[j * c..(j + 1) * c].iter_mut().zip(&sum[j * c..(j + 1) * c]) {
            *dst = s / mass[j];
        }
        next.positions[j] = [pos[j][0] / mass[j], pos[j][1] / mass[j]];
    }
    (next, empty)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams {
    pub reduction: usize,
    pub iters: usize,
    pub tau: f64,
    pub fwhm: f64,
}

impl ClusterParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        ClusterParams { reduction: cfg.proto_reduction, iters: cfg.cluster_iters, tau: cfg.tau_teacher, fwhm: cfg.fwhm }
    }
}

/// Seeds, then `iters` rounds of assign, spatial weighting and update.
pub fn cluster(values: &[f64], grid: &Grid, c: usize, p: ClusterParams) -> Result<PrototypeBank> {
    let mut bank = seed_prototypes(values, grid, c, p.reduction)?;
    for _ in 0..p.iters {
        let phi = assign(values, c, &bank, p.tau)?;
        let wp = spatial_weights(&grid.points, &bank.positions, p.fwhm);
        let tilde: Vec<f64> = phi.iter().zip(&wp).map(|(a, b)| a * b).collect();
        bank = update_prototypes(values, &grid.points, &tilde, &bank).0;
    }
    Ok(bank)
}

fn nearest_candidates(axis: &[f64], v: f64) -> std::ops::RangeInclusive<usize> {
    let i = axis.partition_point(|&a| a < v);
    i.saturating_sub(1).min(axis.len() - 1)..=(i + 1).min(axis.len() - 1)
}

/// For every student cell, the teacher cell closest in world coordinates;
/// ties go to the smaller row-major teacher index.
pub fn correspondence(student: &Grid, teacher: &Grid) -> Vec<usize> {
    let d2 = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
    if teacher.is_regular() {
        let xs: Vec<f64> = (0..teacher.w).map(|j| teacher.at(0, j)[0]).collect();
        let ys: Vec<f64> = (0..teacher.h).map(|i| teacher.at(i, 0)[1]).collect();
        return student
            .points
            .iter()
            .map(|&p| {
                let mut best = (f64::INFINITY, 0);
                for i in nearest_candidates(&ys, p[1]) {
                    for j in nearest_candidates(&xs, p[0]) {
                        let t = i * teacher.w + j;
                        let d = d2(p, teacher.points[t]);
                        if d < best.0 {
                            best = (d, t);
                        }
                    }
                }
                best.1
            })
            .collect();
    }
    student
        .points
        .iter()
        .map(|&p| {
            let mut best = (f64::INFINITY, 0);
            for (t, &q) in teacher.points.iter().enumerate() {
                let d = d2(p, q);
                if d < best.0 {
                    best = (d, t);
                }
            }
            best.1
        })
        .collect()
}

/// Mean soft cross-entropy `−Σ_k Φ_t log Φ_s` over student cells, the teacher
/// row taken through `corr`.
pub fn cpa_cross_entropy(phi_s: &[f64], phi_t: &[f64], k: usize, corr: &[usize]) -> f64 {
    let n = corr.len();
    let mut total = 0.0;
    for (i, &t) in corr.iter().enumerate() {
        let s = &phi_s[i * k..(i + 1) * k];
        let tt = &phi_t[t * k..(t + 1) * k];
        total -= tt.iter().zip(s).map(|(a, b)| a * b.max(CPA_LOG_GUARD).ln()).sum::<f64>();
    }
    total / n.max(1) as f64
}

/// `½ Σ_n CE(Φ_sn, Φ_t ∘ corr_n)` over the two students.
pub fn cpa_loss_values(students: [(&[f64], &[usize]); 2], phi_t: &[f64], k: usize) -> f64 {
    0.5 * students.iter().map(|(s, corr)| cpa_cross_entropy(s, phi_t, k, corr)).sum::<f64>()
}

/// Differentiable student term: `f_rows: [n, C]` student embeddings,
/// `targets: [n, N_k]` teacher rows (constants). Returns the mean over rows of
/// `−Σ_k t_k log softmax_k(cos(f, c_k) / τ_s)`.
pub fn cpa_student_term(g: &mut Graph, f_rows: Var, bank: &PrototypeBank, tau_s: f64, targets: &[f64]) -> Result<Var> {
    let shape = g.shape(f_rows).to_vec();
    let [n, c] = <[usize; 2]>::try_from(shape.as_slice()).map_err(|_| Error::shape("student rows must be [n, C]"))?;
    let k = bank.len();
    if c != bank.c || targets.len() != n * k {
        return Err(Error::shape(format!("{n}x{c} rows, {} targets, bank {k}x{}", targets.len(), bank.c)));
    }
    let protos = g.input(Tensor::new(&[k, c], bank.centroids.clone())?);
    let cos = g.cosine_sim(f_rows, protos, COSINE_EPS);
    let logits = g.scale(cos, 1.0 / tau_s);
    let logp = g.log_softmax(logits);
    let w = Tensor::new(&[n, k], targets.iter().map(|t| -t / n as f64).collect())?;
    Ok(g.dot_const(logp, w))
}

/// Teacher rows gathered for each student cell.
pub fn gather_targets(phi_t: &[f64], k: usize, corr: &[usize]) -> Vec<f64> {
    corr.iter().flat_map(|&t| phi_t[t * k..(t + 1) * k].iter().copied()).collect()
}

/// Cosine similarity of one query embedding against every cell of a map.
pub fn similarity_map(query: &[f64], values: &[f64], c: usize) -> Vec<f64> {
    let (q, _) = unit_rows(query, c, COSINE_EPS);
    let (u, _) = unit_rows(values, c, COSINE_EPS);
    u.chunks(c).map(|f| f.iter().zip(&q).map(|(a, b)| a * b).sum()).collect()
}

/// Row indices for gathering `idx` out of sample `b` of a `[B, N, C]` batch.
pub fn batch_rows(b: usize, n: usize, idx: &[usize]) -> Rc<Vec<usize>> {
    Rc::new(idx.iter().map(|&i| b * n + i).collect())
}
