//! Dice overlap, average symmetric surface distance, per-subject aggregation
//! and the paired t-test.
//!
//! Volumes are `[D, H, W]` label stacks; 2D masks are volumes with `D = 1`.
//! A surface voxel is a foreground voxel with a background voxel among its
//! in-bounds 26 neighbours (8 neighbours when `D = 1`). A mask that fills the
//! whole volume has no such voxel and uses all of its voxels as surface.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn plane(h: usize, w: usize) -> Self {
        Dims { d: 1, h, w }
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `2|A∩B| / (|A|+|B|)`, and 1 when both masks are empty.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("dsc: {} vs {} voxels", pred.len(), gt.len())));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

pub fn surface(mask: &[bool], dims: Dims) -> Vec<usize> {
    let Dims { d, h, w } = dims;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[idx(z, y, x)] {
                    continue;
                }
                let mut border = false;
                'n: for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (zz, yy, xx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                            if zz < 0 || yy < 0 || xx < 0 || zz >= d as i64 || yy >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            if !mask[idx(zz as usize, yy as usize, xx as usize)] {
                                border = true;
                                break 'n;
                            }
                        }
                    }
                }
                if border {
                    out.push(idx(z, y, x));
                }
            }
        }
    }
    if out.is_empty() {
        out = (0..mask.len()).filter(|&i| mask[i]).collect();
    }
    out
}

/// One-dimensional squared-distance transform (lower envelope of parabolas)
/// of `f` sampled at spacing `s`.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let sites: Vec<usize> = (0..f.len()).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let parab = |q: usize| (q as f64 * s, f[q]);
    let mut v = vec![sites[0]];
    let mut z = vec![f64::NEG_INFINITY, f64::INFINITY];
    for &q in &sites[1..] {
        let (qs, fq) = parab(q);
        loop {
            let (ps, fp) = parab(*v.last().expect("non-empty envelope"));
            let sx = ((fq + qs * qs) - (fp + ps * ps)) / (2.0 * (qs - ps));
            if sx <= z[v.len() - 1] {
                v.pop();
                z.pop();
                continue;
            }
            *z.last_mut().expect("boundary") = sx;
            v.push(q);
            z.push(f64::INFINITY);
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qs = q as f64 * s;
        while z[k + 1] < qs {
            k += 1;
        }
        let (ps, fp) = parab(v[k]);
        *o = (qs - ps) * (qs - ps) + fp;
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest voxel of
/// `sites`, with per-axis spacing `(z, y, x)`.
pub fn squared_edt(sites: &[usize], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let Dims { d, h, w } = dims;
    let mut g = vec![f64::INFINITY; dims.len()];
    for &s in sites {
        g[s] = 0.0;
    }
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut pass = |g: &mut Vec<f64>, n: usize, stride: usize, starts: Vec<usize>, s: f64| {
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        for st in starts {
            for i in 0..n {
                line[i] = g[st + i * stride];
            }
            edt_1d(&line, s, &mut out);
            for i in 0..n {
                g[st + i * stride] = out[i];
            }
        }
    };
    let xs: Vec<usize> = (0..d * h).map(|r| r * w).collect();
    pass(&mut g, w, 1, xs, spacing[2]);
    let ys: Vec<usize> = (0..d).flat_map(|z| (0..w).map(move |x| z * h * w + x)).collect();
    pass(&mut g, h, w, ys, spacing[1]);
    let zs: Vec<usize> = (0..h * w).collect();
    pass(&mut g, d, h * w, zs, spacing[0]);
    g
}

/// Mean of the two directed average surface distances; `None` when either
/// mask is empty.
pub fn assd(pred: &[bool], gt: &[bool], dims: Dims, spacing: [f64; 3]) -> Result<Option<f64>> {
    if pred.len() != dims.len() || gt.len() != dims.len() {
        return Err(Error::shape(format!("assd: {} / {} voxels for {dims:?}", pred.len(), gt.len())));
    }
    if !pred.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return Ok(None);
    }
    let (sa, sb) = (surface(pred, dims), surface(gt, dims));
    let (da, db) = (squared_edt(&sb, dims, spacing), squared_edt(&sa, dims, spacing));
    let mean = |s: &[usize], dt: &[f64]| s.iter().map(|&i| dt[i].sqrt()).sum::<f64>() / s.len() as f64;
    Ok(Some(0.5 * (mean(&sa, &da) + mean(&sb, &db))))
}

/// Two-sided paired t-test p-value. Zero-variance differences give 1 when
/// the mean difference is zero and 0 otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired series of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

/// One CSV row: one subject and one foreground class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scheme: String,
    pub budget: String,
    pub subject: usize,
    pub class: u8,
    /// Percent.
    pub dsc: f64,
    /// Pixels; empty when undefined.
    pub assd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Summary { mean: f64::NAN, std: f64::NAN, median: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Summary { mean, std, median, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassSummary {
    pub class: u8,
    pub dsc: Summary,
    pub assd: Summary,
    pub assd_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub scheme: String,
    pub budget: String,
    pub rows: Vec<MetricRow>,
    pub classes: Vec<ClassSummary>,
    /// Foreground-class mean DSC per subject, in subject order.
    pub subject_dsc: Vec<(usize, f64)>,
    /// Summary of `subject_dsc`.
    pub dsc: Summary,
    pub assd: Summary,
    pub assd_excluded: usize,
}

/// Per-class statistics plus the subject-level foreground mean.
pub fn aggregate(rows: Vec<MetricRow>) -> EvalReport {
    let (scheme, budget) = rows.first().map(|r| (r.scheme.clone(), r.budget.clone())).unwrap_or_default();
    let mut classes: Vec<u8> = rows.iter().map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut subjects: Vec<usize> = rows.iter().map(|r| r.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let class_summaries = classes
        .iter()
        .map(|&c| {
            let of: Vec<&MetricRow> = rows.iter().filter(|r| r.class == c).collect();
            let dsc: Vec<f64> = of.iter().map(|r| r.dsc).collect();
            let assd: Vec<f64> = of.iter().filter_map(|r| r.assd).collect();
            ClassSummary { class: c, dsc: Summary::of(&dsc), assd: Summary::of(&assd), assd_excluded: of.len() - assd.len() }
        })
        .collect();
    let mut subject_dsc = Vec::new();
    let mut subject_assd = Vec::new();
    for &s in &subjects {
        let of: Vec<&MetricRow> = rows.iter().filter(|r| r.subject == s).collect();
        subject_dsc.push((s, of.iter().map(|r| r.dsc).sum::<f64>() / of.len() as f64));
        let a: Vec<f64> = of.iter().filter_map(|r| r.assd).collect();
        if !a.is_empty() {
            subject_assd.push(a.iter().sum::<f64>() / a.len() as f64);
        }
    }
    let dsc = Summary::of(&subject_dsc.iter().map(|x| x.1).collect::<Vec<_>>());
    let assd_excluded = rows.iter().filter(|r| r.assd.is_none()).count();
    EvalReport { scheme, budget, rows, classes: class_summaries, subject_dsc, dsc, assd: Summary::of(&subject_assd), assd_excluded }
}

pub const CSV_HEADER: [&str; 6] = ["scheme", "budget", "subject", "class", "dsc", "assd"];

/// Writes rows with [`CSV_HEADER`]; floats use six decimals.
pub fn write_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(|e| Error::Invalid(e.to_string()))?;
    for r in rows {
        let assd = r.assd.map(|a| format!("{a:.6}")).unwrap_or_default();
        w.write_record([r.scheme.clone(), r.budget.clone(), r.subject.to_string(), r.class.to_string(), format!("{:.6}", r.dsc), assd])
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(|e| Error::Invalid(format!("csv: {e}")))).collect()
}
