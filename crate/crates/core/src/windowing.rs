//! Window partition, cyclic shift and world-coordinate grids.
//!
//! Feature cells are addressed row-major. A window ordering lists, for every
//! window cell (windows row-major, cells row-major inside a window), the
//! image-order index of the source cell; it doubles as the provenance map.

use crate::error::{Error, Result};

/// World position `(x, y)` of every cell of a `h × w` map, in pixels of the
/// un-augmented slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub points: Vec<[f64; 2]>,
}

impl Grid {
    pub fn at(&self, row: usize, col: usize) -> [f64; 2] {
        self.points[row * self.w + col]
    }

    /// True if the grid is an axis-aligned lattice: x depends on the column only,
    /// y on the row only, both strictly increasing.
    pub fn is_regular(&self) -> bool {
        if self.h == 0 || self.w == 0 {
            return false;
        }
        for i in 0..self.h {
            for j in 0..self.w {
                let p = self.at(i, j);
                if p[0] != self.at(0, j)[0] || p[1] != self.at(i, 0)[1] {
                    return false;
                }
            }
        }
        (1..self.w).all(|j| self.at(0, j)[0] > self.at(0, j - 1)[0])
            && (1..self.h).all(|i| self.at(i, 0)[1] > self.at(i - 1, 0)[1])
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Grid {
        Grid {
            h: self.h,
            w: self.w,
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
        }
    }
}

/// `grid[i][j] = origin + stride·(j, i)`.
pub fn make_grid(origin: [f64; 2], stride: f64, shape: (usize, usize)) -> Result<Grid> {
    if !(stride > 0.0) {
        return Err(Error::Geometry(format!("grid stride must be positive, got {stride}")));
    }
    let (h, w) = shape;
    let mut points = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            points.push([origin[0] + stride * j as f64, origin[1] + stride * i as f64]);
        }
    }
    Ok(Grid { h, w, points })
}

/// Spatial `h × w × c` feature grid with attached world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub values: Vec<f64>,
    pub grid: Grid,
    pub level_stride: f64,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, values: Vec<f64>, grid: Grid, level_stride: f64) -> Result<Self> {
        if values.len() != h * w * c {
            return Err(Error::shape(format!("feature map {h}x{w}x{c} got {} values", values.len())));
        }
        if grid.h != h || grid.w != w {
            return Err(Error::shape(format!("grid {}x{} for map {h}x{w}", grid.h, grid.w)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(FeatureMap { h, w, c, values, grid, level_stride })
    }

    /// Map with a unit-stride grid at the origin.
    pub fn from_values(h: usize, w: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        let grid = make_grid([0.0, 0.0], 1.0, (h, w))?;
        Self::new(h, w, c, values, grid, 1.0)
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.w + col) * self.c;
        &self.values[o..o + self.c]
    }
}

/// Window-ordered content of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedContent {
    pub window: usize,
    pub c: usize,
    /// `n_windows × window² × c`.
    pub windows: Vec<f64>,
    /// World positions in window order.
    pub grid_points: Vec<[f64; 2]>,
    /// Window cell -> `(row, col)` in the unshifted source map.
    pub provenance: Vec<(usize, usize)>,
    /// Shift applied before windowing, if any.
    pub shifted: Option<(isize, isize)>,
    pub level_stride: f64,
}

impl WindowedContent {
    pub fn n_windows(&self) -> usize {
        self.provenance.len() / (self.window * self.window)
    }

    pub fn window_len(&self) -> usize {
        self.window * self.window
    }
}

fn check_divisible(h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Geometry(format!("{h}x{w} is not divisible by window {window}")));
    }
    Ok(())
}

/// For each window-order position, the image-order index of the source cell.
/// `shift` is applied first with [`cyclic_shift`] semantics.
pub fn window_order(h: usize, w: usize, window: usize, shift: (isize, isize)) -> Result<Vec<usize>> {
    check_divisible(h, w, window)?;
    let (hh, ww) = (h as isize, w as isize);
    let mut order = Vec::with_capacity(h * w);
    for wy in 0..h / window {
        for wx in 0..w / window {
            for dy in 0..window {
                for dx in 0..window {
                    // Shifted cell (i, j) holds source cell (i - s) mod H.
                    let i = (wy * window + dy) as isize;
                    let j = (wx * window + dx) as isize;
                    let si = (i - shift.0).rem_euclid(hh) as usize;
                    let sj = (j - shift.1).rem_euclid(ww) as usize;
                    order.push(si * w + sj);
                }
            }
        }
    }
    Ok(order)
}

/// Inverse of a permutation given as a gather list.
pub fn invert_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &src) in order.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

fn windowed(fm: &FeatureMap, window: usize, shift: Option<(isize, isize)>) -> Result<WindowedContent> {
    let order = window_order(fm.h, fm.w, window, shift.unwrap_or((0, 0)))?;
    let mut windows = Vec::with_capacity(fm.values.len());
    let mut grid_points = Vec::with_capacity(order.len());
    let mut provenance = Vec::with_capacity(order.len());
    for &src in &order {
        let (r, c) = (src / fm.w, src % fm.w);
        windows.extend_from_slice(fm.cell(r, c));
        grid_points.push(fm.grid.points[src]);
        provenance.push((r, c));
    }
    Ok(WindowedContent { window, c: fm.c, windows, grid_points, provenance, shifted: shift, level_stride: fm.level_stride })
}

/// Splits `fm` into non-overlapping `window × window` windows. No padding.
pub fn partition(fm: &FeatureMap, window: usize) -> Result<WindowedContent> {
    windowed(fm, window, None)
}

/// Cyclic shift followed by [`partition`]; provenance still refers to the
/// unshifted map so [`reverse`] undoes both.
pub fn partition_shifted(fm: &FeatureMap, window: usize, shift: (isize, isize)) -> Result<WindowedContent> {
    windowed(fm, window, Some(shift))
}

/// Scatters windowed content back into a `shape.0 × shape.1` map.
pub fn reverse(wc: &WindowedContent, shape: (usize, usize)) -> Result<FeatureMap> {
    let (h, w) = shape;
    let n = h * w;
    if wc.provenance.len() != n || wc.windows.len() != n * wc.c {
        return Err(Error::Geometry(format!(
            "windowed content with {} cells cannot fill {h}x{w}",
            wc.provenance.len()
        )));
    }
    let mut values = vec![0.0; n * wc.c];
    let mut points = vec![[0.0; 2]; n];
    let mut seen = vec![false; n];
    for (pos, &(r, c)) in wc.provenance.iter().enumerate() {
        if r >= h || c >= w {
            return Err(Error::Geometry(format!("provenance ({r}, {c}) outside {h}x{w}")));
        }
        let dst = r * w + c;
        if std::mem::replace(&mut seen[dst], true) {
            return Err(Error::Geometry(format!("provenance visits ({r}, {c}) twice")));
        }
        values[dst * wc.c..(dst + 1) * wc.c].copy_from_slice(&wc.windows[pos * wc.c..(pos + 1) * wc.c]);
        points[dst] = wc.grid_points[pos];
    }
    FeatureMap::new(h, w, wc.c, values, Grid { h, w, points }, wc.level_stride)
}

/// Moves cell `(i, j)` to `((i + rows) mod H, (j + cols) mod W)`; the grid moves
/// with the values.
pub fn cyclic_shift(fm: &FeatureMap, shift: (isize, isize)) -> FeatureMap {
    let (h, w, c) = (fm.h, fm.w, fm.c);
    let mut values = vec![0.0; fm.values.len()];
    let mut points = vec![[0.0; 2]; h * w];
    for i in 0..h {
        for j in 0..w {
            let di = (i as isize + shift.0).rem_euclid(h as isize) as usize;
            let dj = (j as isize + shift.1).rem_euclid(w as isize) as usize;
            let (s, d) = (i * w + j, di * w + dj);
            values[d * c..(d + 1) * c].copy_from_slice(&fm.values[s * c..(s + 1) * c]);
            points[d] = fm.grid.points[s];
        }
    }
    FeatureMap { h, w, c, values, grid: Grid { h, w, points }, level_stride: fm.level_stride }
}

/// Largest window `<= window` that tiles an `h × w` map exactly.
pub fn effective_window(h: usize, w: usize, window: usize) -> usize {
    (1..=window.min(h).min(w)).rev().find(|k| h % k == 0 && w % k == 0).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::from_values(h, w, c, (0..h * w * c).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn partition_counts_windows() {
        let wc = partition(&ramp(16, 16, 3), 8).unwrap();
        assert_eq!(wc.n_windows(), 4);
        assert_eq!(wc.window_len(), 64);
    }

    #[test]
    fn single_window_is_flattened_input() {
        let fm = ramp(8, 8, 2);
        let wc = partition(&fm, 8).unwrap();
        assert_eq!(wc.windows, fm.values);
    }

    #[test]
    fn partition_rejects_indivisible_shape() {
        assert!(partition(&ramp(10, 8, 1), 4).is_err());
    }

    #[test]
    fn reverse_detects_corrupt_provenance() {
        let fm = ramp(4, 4, 1);
        let mut wc = partition(&fm, 2).unwrap();
        wc.provenance[1] = wc.provenance[0];
        assert!(reverse(&wc, (4, 4)).is_err());
        let mut wc = partition(&fm, 2).unwrap();
        wc.provenance[0] = (9, 0);
        assert!(reverse(&wc, (4, 4)).is_err());
        assert!(reverse(&partition(&fm, 2).unwrap(), (2, 8)).is_err());
        assert!(reverse(&partition(&fm, 2).unwrap(), (4, 3)).is_err());
    }

    #[test]
    fn delta_moves_with_shift() {
        let mut v = vec![0.0; 64];
        v[0] = 1.0;
        let fm = FeatureMap::from_values(8, 8, 1, v).unwrap();
        let s = cyclic_shift(&fm, (4, 4));
        assert_eq!(s.values[4 * 8 + 4], 1.0);
        assert_eq!(s.values.iter().sum::<f64>(), 1.0);
        assert_eq!(s.grid.at(4, 4), [0.0, 0.0]);
        assert_eq!(cyclic_shift(&fm, (0, 0)), fm);
    }

    #[test]
    fn grid_examples() {
        let g = make_grid([0.0, 0.0], 1.0, (2, 2)).unwrap();
        assert_eq!(g.points, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        // A crop at row 10, col 20 translates the grid by (x=20, y=10).
        let g2 = make_grid([20.0, 10.0], 1.0, (2, 2)).unwrap();
        assert_eq!(g2, g.translate(20.0, 10.0));
        let g3 = make_grid([0.5, 0.5], 2.0, (3, 4)).unwrap();
        for i in 0..3 {
            for j in 1..4 {
                assert_eq!(g3.at(i, j)[0] - g3.at(i, j - 1)[0], 2.0);
            }
        }
        for i in 1..3 {
            assert_eq!(g3.at(i, 0)[1] - g3.at(i - 1, 0)[1], 2.0);
        }
        assert!(g3.is_regular());
        assert!(make_grid([0.0, 0.0], 0.0, (2, 2)).is_err());
    }

    #[test]
    fn effective_window_clamps_to_divisor() {
        assert_eq!(effective_window(32, 32, 4), 4);
        assert_eq!(effective_window(6, 6, 4), 3);
        assert_eq!(effective_window(5, 5, 8), 5);
        assert_eq!(effective_window(20, 20, 8), 5);
    }

    proptest! {
        #[test]
        fn partition_reverse_round_trip(hw in 1usize..5, ww in 1usize..5, win in 1usize..5, c in 1usize..4, seed in 0u64..1000) {
            let (h, w) = (hw * win, ww * win);
            let vals: Vec<f64> = (0..h * w * c).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 7.0).collect();
            let fm = FeatureMap::from_values(h, w, c, vals).unwrap();
            let wc = partition(&fm, win).unwrap();
            prop_assert_eq!(reverse(&wc, (h, w)).unwrap(), fm.clone());
            let s = (win / 2) as isize;
            let wcs = partition_shifted(&fm, win, (-s, -s)).unwrap();
            prop_assert_eq!(reverse(&wcs, (h, w)).unwrap(), fm.clone());
            prop_assert_eq!(cyclic_shift(&cyclic_shift(&fm, (s, -s)), (-s, s)), fm);
        }

        #[test]
        fn shifted_partition_matches_shift_then_partition(h in 1usize..4, win in 1usize..4, sh in -5isize..5) {
            let fm = ramp(h * win, 2 * win, 2);
            let a = partition_shifted(&fm, win, (sh, sh)).unwrap();
            let b = partition(&cyclic_shift(&fm, (sh, sh)), win).unwrap();
            prop_assert_eq!(a.windows, b.windows);
            prop_assert_eq!(a.grid_points, b.grid_points);
        }
    }
}
