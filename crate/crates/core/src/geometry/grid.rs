//! One-dimensional grid builders: the per-period ξ₁ template shared by the
//! ε-mesh and the cell meshes, graded ξ₂ axes and vertical segments.

use super::{derive_offsets, Branch, GeometryError, GeometryParams};
use serde::{Deserialize, Serialize};

/// Nodes of one period (0,1) in the fast variable ξ₁. Every rod wall
/// b ± h/2 is a node; intervals between walls are split uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodTemplate {
    pub nodes: Vec<f64>,
    /// Template node indices of the (left, right) walls of each branch,
    /// in [`Branch::ALL`] order.
    pub walls: [(usize, usize); 7],
    /// Target spacing used for the uniform refinement.
    pub dxi: f64,
}

impl PeriodTemplate {
    /// Template with `cells_across` cells across the narrowest rod.
    pub fn new(p: &GeometryParams, cells_across: usize) -> Result<Self, GeometryError> {
        if cells_across < 2 {
            return Err(GeometryError::BadResolution(format!(
                "cells_across = {cells_across} < 2"
            )));
        }
        Self::with_spacing(p, p.min_width() / cells_across as f64)
    }

    /// Template whose intervals are no wider than `dxi`.
    pub fn with_spacing(p: &GeometryParams, dxi: f64) -> Result<Self, GeometryError> {
        let o = derive_offsets(p);
        let mut raw = vec![0.0, 1.0];
        for b in Branch::ALL {
            let c = o.center(b);
            let h = p.width(b);
            raw.push(c - h / 2.0);
            raw.push(c + h / 2.0);
        }
        raw.sort_by(f64::total_cmp);
        let mut breaks: Vec<f64> = Vec::new();
        for v in raw {
            if breaks.last().map_or(true, |&l| v - l > 1e-12) {
                breaks.push(v);
            }
        }
        let mut nodes = vec![breaks[0]];
        for w in breaks.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let n = (((hi - lo) / dxi) - 1e-9).ceil().max(1.0) as usize;
            for k in 1..n {
                nodes.push(lo + (hi - lo) * k as f64 / n as f64);
            }
            nodes.push(hi);
        }
        let snap = |v: f64| -> usize {
            let (k, _) = nodes
                .iter()
                .enumerate()
                .map(|(k, &x)| (k, (x - v).abs()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            k
        };
        let mut walls = [(0, 0); 7];
        for b in Branch::ALL {
            let c = o.center(b);
            let h = p.width(b);
            let (lo, hi) = (snap(c - h / 2.0), snap(c + h / 2.0));
            if hi <= lo + 1 {
                return Err(GeometryError::SnapConflict(format!(
                    "branch {} has fewer than 2 cells across",
                    b.label()
                )));
            }
            walls[b.index()] = (lo, hi);
        }
        Ok(Self { nodes, walls, dxi })
    }

    pub fn cells(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn wall(&self, b: Branch) -> (usize, usize) {
        self.walls[b.index()]
    }

    /// Snapped wall coordinates of a branch in ξ₁.
    pub fn wall_xi(&self, b: Branch) -> (f64, f64) {
        let (l, r) = self.wall(b);
        (self.nodes[l], self.nodes[r])
    }
}

/// Geometric grading of a ξ₂ axis: first step, growth ratio, step cap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grading {
    pub first: f64,
    pub ratio: f64,
    pub max_step: f64,
}

/// Nodes 0 = s₀ < s₁ < … < s_K = extent with steps first·ratio^k capped at
/// max_step. Axes with a common grading agree node-for-node up to the last
/// step, so truncation lengths can be compared on identical grids.
pub fn graded_axis(g: &Grading, extent: f64) -> Vec<f64> {
    let mut s = vec![0.0];
    let mut step = g.first;
    loop {
        let last = *s.last().unwrap();
        if last + step >= extent - 0.25 * step {
            s.push(extent);
            break;
        }
        s.push(last + step);
        step = (step * g.ratio).min(g.max_step);
    }
    s
}

/// Ascending x₂ nodes of the segment [bot, top]. An end with a band lists
/// the band offsets (ξ units, starting at 0) that are placed at
/// end ± eps·s exactly; elsewhere steps grow geometrically up to `bulk`
/// and the middle gap is filled uniformly. End ordinates are copied
/// bitwise.
pub fn segment_nodes(
    bot: f64,
    top: f64,
    bottom_band: Option<&[f64]>,
    top_band: Option<&[f64]>,
    eps: f64,
    bulk: f64,
    growth: f64,
) -> Vec<f64> {
    let len = top - bot;
    let mid = bot + len / 2.0;
    let mut lower = vec![bot];
    if let Some(band) = bottom_band {
        lower.extend(band.iter().skip(1).map(|s| bot + eps * s));
    }
    let mut upper = vec![top];
    if let Some(band) = top_band {
        upper.extend(band.iter().skip(1).map(|s| top - eps * s));
    }
    let last_step = |v: &Vec<f64>| {
        if v.len() >= 2 {
            (v[v.len() - 1] - v[v.len() - 2]).abs()
        } else {
            bulk
        }
    };
    let mut step = last_step(&lower).min(bulk);
    loop {
        step = (step * growth).min(bulk);
        let next = lower.last().unwrap() + step;
        if next >= mid {
            break;
        }
        lower.push(next);
    }
    let mut step = last_step(&upper).min(bulk);
    loop {
        step = (step * growth).min(bulk);
        let next = upper.last().unwrap() - step;
        if next <= mid {
            break;
        }
        upper.push(next);
    }
    let lo = *lower.last().unwrap();
    let hi = *upper.last().unwrap();
    let h = last_step(&lower).max(last_step(&upper)).min(bulk);
    let n = (((hi - lo) / h) - 1e-9).ceil().max(1.0) as usize;
    for k in 1..n {
        lower.push(lo + (hi - lo) * k as f64 / n as f64);
    }
    upper.reverse();
    lower.extend(upper);
    lower
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> GeometryParams {
        GeometryParams {
            a: 1.0,
            n: 8,
            l1: 0.5,
            l2: 0.5,
            l3: 0.5,
            h0: 0.6,
            h11: 0.28,
            h12: 0.28,
            h21: 0.12,
            h22: 0.12,
            h23: 0.12,
            h24: 0.12,
            d0: 1.0,
        }
    }

    #[test]
    fn template_contains_walls_and_is_sorted() {
        let t = PeriodTemplate::new(&params(), 3).unwrap();
        assert!(t.nodes.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(t.nodes[0], 0.0);
        assert_eq!(*t.nodes.last().unwrap(), 1.0);
        for b in Branch::ALL {
            let (l, r) = t.wall(b);
            assert!(r - l >= 3);
            let (lo, hi) = t.wall_xi(b);
            assert!((hi - lo - params().width(b)).abs() < 1e-12);
        }
    }

    #[test]
    fn too_coarse_resolution_rejected() {
        assert!(PeriodTemplate::new(&params(), 1).is_err());
    }

    #[test]
    fn graded_axis_prefix_is_shared() {
        let g = Grading {
            first: 0.05,
            ratio: 1.1,
            max_step: 0.5,
        };
        let a = graded_axis(&g, 10.0);
        let b = graded_axis(&g, 20.0);
        assert_eq!(*a.last().unwrap(), 10.0);
        let common = a.len() - 2;
        assert_eq!(a[..common], b[..common]);
    }

    #[test]
    fn segment_keeps_bands_exact() {
        let band = [0.0, 0.1, 0.25, 0.45];
        let eps = 0.01;
        let v = segment_nodes(-1.0, -0.5, Some(&band), Some(&band), eps, 0.05, 1.3);
        assert_eq!(v[0], -1.0);
        assert_eq!(*v.last().unwrap(), -0.5);
        assert!(v.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(v[2], -1.0 + eps * 0.25);
        assert_eq!(v[v.len() - 3], -0.5 - eps * 0.25);
        let max_step = v.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        assert!(max_step <= 0.05 + 1e-12);
    }

    #[test]
    fn segment_without_bands_is_uniformish() {
        let v = segment_nodes(0.0, 1.0, None, None, 0.1, 0.1, 1.2);
        assert_eq!(v.len(), 11);
    }
}
