//! Junction-layer and branch-layer (cell) problems on truncated periodicity
//! cells, with far-field extraction.
//!
//! A cell is one upper part (the periodic half-strip Π⁺ or a parent strip)
//! joined at ξ₂ = 0 to one or two lower strips. All parts share the ξ₁
//! template of the ε-mesh, so sampled cell values are exact at matched
//! mesh nodes.

use crate::fem;
use crate::geometry::{graded_axis, Branch, GeometryParams, Grading, PeriodTemplate};
use crate::linalg::{CscMatrix, LinalgError, SpdSolver};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error("Neumann data not compatible: sum {sum:e}")]
    CompatibilityFailure { sum: f64 },
    #[error("far-field fit residual {residual:e} at exit {exit} exceeds threshold")]
    TruncationTooSmall { exit: String, residual: f64 },
    #[error("far-field fit ill conditioned at exit {0}")]
    FitIllConditioned(String),
    #[error("point ({0}, {1}) lies in no strip of the cell")]
    OutsideCell(f64, f64),
    #[error("invalid cell spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Which periodicity cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    /// Π₀: periodic Π⁺ over the level-0 strip.
    Pi0,
    /// Π₁: level-0 strip over the two level-1 strips.
    Pi1,
    /// Π₂⁽¹⁾: strip (1,1) over (2,1), (2,2).
    Pi2_1,
    /// Π₂⁽²⁾: strip (1,2) over (2,3), (2,4).
    Pi2_2,
}

impl CellKind {
    pub const ALL: [CellKind; 4] = [CellKind::Pi0, CellKind::Pi1, CellKind::Pi2_1, CellKind::Pi2_2];

    /// Upper strip (`None` for the periodic Π⁺) and lower strips.
    pub fn strips(self) -> (Option<Branch>, Vec<Branch>) {
        match self {
            CellKind::Pi0 => (None, vec![Branch::new(0, 0)]),
            CellKind::Pi1 => (Some(Branch::new(0, 0)), vec![Branch::new(1, 0), Branch::new(1, 1)]),
            CellKind::Pi2_1 => (Some(Branch::new(1, 0)), vec![Branch::new(2, 0), Branch::new(2, 1)]),
            CellKind::Pi2_2 => (Some(Branch::new(1, 1)), vec![Branch::new(2, 2), Branch::new(2, 3)]),
        }
    }

    /// Interface level the cell lives on.
    pub fn level(self) -> usize {
        match self {
            CellKind::Pi0 => 0,
            CellKind::Pi1 => 1,
            CellKind::Pi2_1 | CellKind::Pi2_2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Pi0 => "Pi0",
            CellKind::Pi1 => "Pi1",
            CellKind::Pi2_1 => "Pi2_1",
            CellKind::Pi2_2 => "Pi2_2",
        }
    }
}

/// Which layer problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellField {
    /// Z⁽⁰⁾₁: ∂ξ₁Z = −1 on the lower strip walls.
    Z01,
    /// Z⁽⁰⁾₂: growth ξ₂ at +∞.
    Z02,
    /// Ξ₁: flux leaves through the first lower strip.
    Xi1,
    /// Ξ₂: flux leaves through the second lower strip.
    Xi2,
    /// Z of the branch cells: ∂ξ₁Z = −1 on all vertical walls.
    Z,
}

impl CellField {
    fn wall_data(self) -> bool {
        matches!(self, CellField::Z01 | CellField::Z)
    }

    pub fn name(self) -> &'static str {
        match self {
            CellField::Z01 => "Z0_1",
            CellField::Z02 => "Z0_2",
            CellField::Xi1 => "Xi1",
            CellField::Xi2 => "Xi2",
            CellField::Z => "Z",
        }
    }
}

/// Geometry and resolution of a truncated cell.
#[derive(Clone, Debug)]
pub struct CellSpec {
    pub kind: CellKind,
    pub params: GeometryParams,
    pub template: PeriodTemplate,
    pub grading: Grading,
    /// Truncation half-length L in ξ₂.
    pub length: f64,
}

impl CellSpec {
    pub fn new(
        kind: CellKind,
        params: &GeometryParams,
        template: PeriodTemplate,
        grading: Grading,
        length: f64,
    ) -> Result<Self, CellError> {
        let max_h = params.widths().into_iter().fold(1.0, f64::max);
        if !(length >= 5.0 * max_h) {
            return Err(CellError::InvalidSpec(format!("L = {length} < 5·max(1, h)")));
        }
        if !(grading.first > 0.0 && grading.ratio >= 1.0 && grading.max_step >= grading.first) {
            return Err(CellError::InvalidSpec(format!("bad grading {grading:?}")));
        }
        Ok(Self {
            kind,
            params: params.clone(),
            template,
            grading,
            length,
        })
    }

    /// Stand-alone resolution: at least `cells_across` cells across the
    /// narrowest strip and a ξ₂ grading that resolves the fastest decay.
    pub fn standalone(kind: CellKind, params: &GeometryParams, cells_across: usize, length: f64) -> Result<Self, CellError> {
        let template = PeriodTemplate::new(params, cells_across).map_err(|e| CellError::InvalidSpec(e.to_string()))?;
        let grading = Grading {
            first: template.dxi,
            ratio: 1.03,
            max_step: 0.2,
        };
        Self::new(kind, params, template, grading, length)
    }
}

/// One part of the cell grid.
#[derive(Clone, Debug)]
pub struct Part {
    /// `None` for the periodic Π⁺.
    pub branch: Option<Branch>,
    /// Template column range (inclusive).
    pub cols: (usize, usize),
    /// |ξ₂| of the rows, ascending from 0.
    pub rows: Vec<f64>,
    pub upward: bool,
    ids: Vec<usize>,
}

impl Part {
    pub fn ncols(&self) -> usize {
        self.cols.1 - self.cols.0 + 1
    }

    /// Node at row `k` and template column `c`.
    pub fn id(&self, k: usize, c: usize) -> usize {
        self.ids[k * self.ncols() + c - self.cols.0]
    }

    pub fn xi2(&self, k: usize) -> f64 {
        if self.upward {
            self.rows[k]
        } else {
            -self.rows[k]
        }
    }

    pub fn periodic(&self) -> bool {
        self.branch.is_none()
    }
}

/// Structured Q1 grid of a truncated cell.
#[derive(Clone, Debug)]
pub struct CellMesh {
    pub spec: CellSpec,
    pub xi1: Vec<f64>,
    /// Part 0 is the upper part, then the lower strips in branch order.
    pub parts: Vec<Part>,
    pub coords: Vec<[f64; 2]>,
    /// (nodes [bl, br, tr, tl], hx, hy).
    pub cells: Vec<([usize; 4], f64, f64)>,
}

impl CellMesh {
    pub fn build(spec: &CellSpec) -> Self {
        let t = &spec.template;
        let xi1 = t.nodes.clone();
        let p = xi1.len() - 1;
        let rows = graded_axis(&spec.grading, spec.length);
        let (upper, lower) = spec.kind.strips();
        let mut coords: Vec<[f64; 2]> = Vec::new();
        let mut parts = Vec::new();

        let cols = upper.map_or((0, p), |b| t.wall(b));
        let mut ids = Vec::new();
        for &s in &rows {
            let first = coords.len();
            for c in cols.0..=cols.1 {
                if upper.is_none() && c == p {
                    ids.push(first);
                } else {
                    ids.push(coords.len());
                    coords.push([xi1[c], s]);
                }
            }
        }
        let top = Part {
            branch: upper,
            cols,
            rows: rows.clone(),
            upward: true,
            ids,
        };
        parts.push(top);
        for b in lower {
            let cols = t.wall(b);
            let mut ids: Vec<usize> = (cols.0..=cols.1).map(|c| parts[0].id(0, c)).collect();
            for &s in &rows[1..] {
                for c in cols.0..=cols.1 {
                    ids.push(coords.len());
                    coords.push([xi1[c], -s]);
                }
            }
            parts.push(Part {
                branch: Some(b),
                cols,
                rows: rows.clone(),
                upward: false,
                ids,
            });
        }

        let mut cells = Vec::new();
        for part in &parts {
            for k in 0..part.rows.len() - 1 {
                let (lo, hi) = if part.upward { (k, k + 1) } else { (k + 1, k) };
                let hy = part.rows[k + 1] - part.rows[k];
                for c in part.cols.0..part.cols.1 {
                    let nodes = [part.id(lo, c), part.id(lo, c + 1), part.id(hi, c + 1), part.id(hi, c)];
                    cells.push((nodes, xi1[c + 1] - xi1[c], hy));
                }
            }
        }
        Self {
            spec: spec.clone(),
            xi1,
            parts,
            coords,
            cells,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Width of a part in ξ₁ (snapped walls).
    pub fn width(&self, part: usize) -> f64 {
        let c = self.parts[part].cols;
        self.xi1[c.1] - self.xi1[c.0]
    }

    /// Center used in the −ξ₁ + b asymptote of a part.
    pub fn center(&self, part: usize) -> f64 {
        let o = crate::geometry::derive_offsets(&self.spec.params);
        self.parts[part].branch.map_or(0.5, |b| o.center(b))
    }

    /// Exit label, e.g. `top`, `(1,2)`.
    pub fn exit_label(&self, part: usize) -> String {
        match self.parts[part].branch {
            None => "top".into(),
            Some(b) if part == 0 => format!("top{}", b.label()),
            Some(b) => b.label(),
        }
    }
}

/// Far-field record of one exit.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitRecord {
    pub label: String,
    pub part: usize,
    /// Fitted slope in ξ₂ of the cross-sectional mean.
    pub slope: f64,
    /// Fitted constant (after removing −ξ₁ + b for wall-data fields).
    pub constant: f64,
    pub decay_rate: f64,
    pub fit_residual: f64,
    /// Slope forced by flux conservation.
    pub expected_slope: f64,
    /// Leading decay rate admitted by the problem's symmetry.
    pub expected_rate: f64,
    /// b in the asymptote −ξ₁ + b + C, or `None` for asymptotes without a
    /// ξ₁ term.
    pub center: Option<f64>,
}

/// A layer-problem solution with its far-field data.
#[derive(Clone, Debug)]
pub struct CellSolution {
    pub mesh: Arc<CellMesh>,
    pub field: CellField,
    pub values: Vec<f64>,
    pub exits: Vec<ExitRecord>,
    pub normalization: &'static str,
}

/// Factored cell problem; one factorization serves every field on the cell.
pub struct CellProblem {
    pub mesh: Arc<CellMesh>,
    solver: SpdSolver,
    pin: usize,
}

const COMPAT_TOL: f64 = 1e-12;
const TRUNCATION_TOL: f64 = 1e-6;

impl CellProblem {
    pub fn new(spec: &CellSpec) -> Result<Self, CellError> {
        let mesh = Arc::new(CellMesh::build(spec));
        let n = mesh.num_nodes();
        let pin = mesh.parts[0].id(0, mesh.parts[0].cols.0);
        let mut trip = Vec::with_capacity(16 * mesh.cells.len() + 1);
        for &(nodes, hx, hy) in &mesh.cells {
            let k = fem::stiffness(hx, hy);
            for a in 0..4 {
                for b in 0..4 {
                    if nodes[a] != pin && nodes[b] != pin {
                        trip.push((nodes[a], nodes[b], k[a][b]));
                    }
                }
            }
        }
        trip.push((pin, pin, 1.0));
        let k = CscMatrix::from_triplets(n, &trip);
        let mut solver = SpdSolver::analyze(&k)?;
        solver.factor(&k)?;
        Ok(Self { mesh, solver, pin })
    }

    /// Neumann slope imposed at the truncated end of each part.
    fn end_slopes(&self, field: CellField) -> Vec<f64> {
        let m = &self.mesh;
        let h_top = if m.parts[0].periodic() { 1.0 } else { m.width(0) };
        match field {
            CellField::Z01 | CellField::Z => vec![0.0; m.parts.len()],
            CellField::Z02 => vec![1.0, h_top / m.width(1)],
            CellField::Xi1 => vec![1.0, h_top / m.width(1), 0.0],
            CellField::Xi2 => vec![1.0, 0.0, h_top / m.width(2)],
        }
    }

    fn check_field(&self, field: CellField) -> Result<(), CellError> {
        let pi0 = self.mesh.spec.kind == CellKind::Pi0;
        let ok = match field {
            CellField::Z01 | CellField::Z02 => pi0,
            _ => !pi0,
        };
        if ok {
            Ok(())
        } else {
            Err(CellError::InvalidSpec(format!(
                "field {} not defined on {}",
                field.name(),
                self.mesh.spec.kind.name()
            )))
        }
    }

    /// Assembled Neumann right-hand side.
    pub fn rhs(&self, field: CellField) -> Vec<f64> {
        let m = &self.mesh;
        let mut f = vec![0.0; m.num_nodes()];
        let slopes = self.end_slopes(field);
        for (pi, part) in m.parts.iter().enumerate() {
            let last = part.rows.len() - 1;
            // ∂νZ on the truncated end: +s at the top, −s at the bottom
            let g = if part.upward { slopes[pi] } else { -slopes[pi] };
            if g != 0.0 {
                for c in part.cols.0..part.cols.1 {
                    let w = g * (m.xi1[c + 1] - m.xi1[c]) / 2.0;
                    f[part.id(last, c)] += w;
                    f[part.id(last, c + 1)] += w;
                }
            }
            if field.wall_data() && !part.periodic() {
                // ∂ξ₁Z = −1: outward ∂νZ = +1 on the left wall, −1 on the right
                for k in 0..last {
                    let w = (part.rows[k + 1] - part.rows[k]) / 2.0;
                    for (col, sign) in [(part.cols.0, 1.0), (part.cols.1, -1.0)] {
                        f[part.id(k, col)] += sign * w;
                        f[part.id(k + 1, col)] += sign * w;
                    }
                }
            }
        }
        f
    }

    pub fn solve(&self, field: CellField) -> Result<CellSolution, CellError> {
        self.check_field(field)?;
        let mut f = self.rhs(field);
        let sum: f64 = f.iter().sum();
        let scale: f64 = f.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        if sum.abs() > COMPAT_TOL * scale {
            return Err(CellError::CompatibilityFailure { sum });
        }
        f[self.pin] = 0.0;
        let values = self.solver.solve(&f)?;
        let mut sol = CellSolution {
            mesh: self.mesh.clone(),
            field,
            values,
            exits: Vec::new(),
            normalization: "",
        };
        let slopes = self.end_slopes(field);
        let centers: Vec<Option<f64>> = (0..self.mesh.parts.len())
            .map(|pi| {
                let wall_asymptote = match field {
                    CellField::Z01 => pi > 0,
                    CellField::Z => true,
                    _ => false,
                };
                wall_asymptote.then(|| self.mesh.center(pi))
            })
            .collect();
        let shift = if field == CellField::Z01 {
            sol.normalization = "zero mean on the top truncation row";
            let top = &self.mesh.parts[0];
            let last = top.rows.len() - 1;
            -trapezoid_mean(&self.mesh, top, |c| sol.values[top.id(last, c)])
        } else {
            sol.normalization = "top asymptote constant zero";
            let (_, c, _) = fit_mean_line(&sol, 0, centers[0]);
            -c
        };
        for v in &mut sol.values {
            *v += shift;
        }
        for pi in 0..self.mesh.parts.len() {
            let rate = expected_rate(&self.mesh, field, pi);
            let rec = extract_far_field(&sol, pi, centers[pi], slopes[pi], rate)?;
            sol.exits.push(rec);
        }
        Ok(sol)
    }
}

fn expected_rate(m: &CellMesh, field: CellField, part: usize) -> f64 {
    if m.parts[part].periodic() {
        2.0 * PI
    } else if field == CellField::Z02 {
        // Z⁽⁰⁾₂ is even about the strip center: the first mode is absent
        2.0 * PI / m.width(part)
    } else {
        PI / m.width(part)
    }
}

fn trapezoid_mean<F: Fn(usize) -> f64>(m: &CellMesh, part: &Part, v: F) -> f64 {
    let mut s = 0.0;
    for c in part.cols.0..part.cols.1 {
        s += 0.5 * (m.xi1[c + 1] - m.xi1[c]) * (v(c) + v(c + 1));
    }
    s / (m.xi1[part.cols.1] - m.xi1[part.cols.0])
}

/// Least-squares line through (x, y): (slope, intercept, RMS residual).
fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - icpt).powi(2)).sum();
    (slope, icpt, (rss / n).sqrt())
}

/// Fit of the cross-sectional mean over the outer 25% of a part.
fn fit_mean_line(sol: &CellSolution, pi: usize, center: Option<f64>) -> (f64, f64, f64) {
    let m = &sol.mesh;
    let part = &m.parts[pi];
    let l = m.spec.length;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for k in 0..part.rows.len() {
        if part.rows[k] < 0.75 * l - 1e-12 {
            continue;
        }
        let mean = trapezoid_mean(m, part, |c| {
            let shape = center.map_or(0.0, |b| -m.xi1[c] + b);
            sol.values[part.id(k, c)] - shape
        });
        xs.push(part.xi2(k));
        ys.push(mean);
    }
    line_fit(&xs, &ys)
}

/// Slope, constant and decay rate of one exit.
pub fn extract_far_field(
    sol: &CellSolution,
    pi: usize,
    center: Option<f64>,
    expected_slope: f64,
    expected_rate: f64,
) -> Result<ExitRecord, CellError> {
    let m = &sol.mesh;
    let part = &m.parts[pi];
    let label = m.exit_label(pi);
    let (slope, constant, fit_residual) = fit_mean_line(sol, pi, center);
    let scale = 1.0 + constant.abs() + slope.abs() * m.spec.length;
    if !(fit_residual <= TRUNCATION_TOL * scale) {
        return Err(CellError::TruncationTooSmall {
            exit: label,
            residual: fit_residual,
        });
    }
    let dev: Vec<f64> = (0..part.rows.len())
        .map(|k| {
            let asym = slope * part.xi2(k) + constant;
            (part.cols.0..=part.cols.1)
                .map(|c| {
                    let shape = center.map_or(0.0, |b| -m.xi1[c] + b);
                    (sol.values[part.id(k, c)] - shape - asym).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let vmax = sol.values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let floor = 1e-9 * vmax;
    let decay_rate = if dev.iter().all(|&d| d <= floor) {
        // the asymptote is exact: no transient to fit
        f64::INFINITY
    } else {
        fit_decay(m, pi, &dev, floor).ok_or_else(|| CellError::FitIllConditioned(label.clone()))?
    };
    Ok(ExitRecord {
        label,
        part: pi,
        slope,
        constant,
        decay_rate,
        fit_residual,
        expected_slope,
        expected_rate,
        center,
    })
}

/// Log-linear fit of the deviation beyond one strip width, stopping at
/// the noise floor.
fn fit_decay(m: &CellMesh, pi: usize, dev: &[f64], floor: f64) -> Option<f64> {
    let part = &m.parts[pi];
    let width = if part.periodic() { 1.0 } else { m.width(pi) };
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for k in 0..part.rows.len() {
        if part.rows[k] < width {
            continue;
        }
        if dev[k] <= floor {
            break;
        }
        xs.push(part.rows[k]);
        ys.push(dev[k].ln());
    }
    if xs.len() < 3 {
        return None;
    }
    Some(-line_fit(&xs, &ys).0)
}

impl CellSolution {
    /// Value and ξ-gradient at ξ, with 1-periodic wrap in ξ₁ and the stored
    /// asymptote beyond the truncation.
    pub fn sample(&self, xi1: f64, xi2: f64) -> Result<(f64, [f64; 2]), CellError> {
        let m = &self.mesh;
        let mut s = xi1 - xi1.floor();
        if s >= 1.0 {
            s -= 1.0;
        }
        let tol = 1e-9;
        let inside = |pi: usize| {
            let c = m.parts[pi].cols;
            m.parts[pi].periodic() || (s >= m.xi1[c.0] - tol && s <= m.xi1[c.1] + tol)
        };
        let pi = if xi2 >= 0.0 {
            Some(0).filter(|&p| inside(p))
        } else {
            (1..m.parts.len()).find(|&p| inside(p))
        }
        .ok_or(CellError::OutsideCell(xi1, xi2))?;
        let part = &m.parts[pi];
        let r = xi2.abs();
        if r > m.spec.length {
            let e = &self.exits[pi];
            let (shape, ds) = e.center.map_or((0.0, 0.0), |b| (-s + b, -1.0));
            return Ok((e.slope * xi2 + e.constant + shape, [ds, e.slope]));
        }
        let (c0, c1) = part.cols;
        let s = s.clamp(m.xi1[c0], m.xi1[c1]);
        let c = locate(&m.xi1[c0..=c1], s) + c0;
        let k = locate(&part.rows, r);
        let hx = m.xi1[c + 1] - m.xi1[c];
        let hr = part.rows[k + 1] - part.rows[k];
        let u = (s - m.xi1[c]) / hx;
        let w = (r - part.rows[k]) / hr;
        let v00 = self.values[part.id(k, c)];
        let v10 = self.values[part.id(k, c + 1)];
        let v01 = self.values[part.id(k + 1, c)];
        let v11 = self.values[part.id(k + 1, c + 1)];
        let val = (1.0 - u) * (1.0 - w) * v00 + u * (1.0 - w) * v10 + (1.0 - u) * w * v01 + u * w * v11;
        let d1 = ((1.0 - w) * (v10 - v00) + w * (v11 - v01)) / hx;
        let dr = ((1.0 - u) * (v01 - v00) + u * (v11 - v10)) / hr;
        let d2 = if part.upward { dr } else { -dr };
        Ok((val, [d1, d2]))
    }

    /// Discrete flux ∫∂ξ₂Z dξ₁ through the row `k` of part `pi`, computed
    /// variationally from the cells on the far side of the cut (the side
    /// away from ξ₂ = 0), so it is conserved exactly by the discrete
    /// equations.
    pub fn cut_flux(&self, pi: usize, k: usize) -> f64 {
        let m = &self.mesh;
        let part = &m.parts[pi];
        let mut r = vec![0.0; m.num_nodes()];
        let last = part.rows.len() - 1;
        for kk in k..last {
            let hy = part.rows[kk + 1] - part.rows[kk];
            let (lo, hi) = if part.upward { (kk, kk + 1) } else { (kk + 1, kk) };
            for c in part.cols.0..part.cols.1 {
                let nodes = [part.id(lo, c), part.id(lo, c + 1), part.id(hi, c + 1), part.id(hi, c)];
                let ke = fem::stiffness(m.xi1[c + 1] - m.xi1[c], hy);
                for a in 0..4 {
                    for b in 0..4 {
                        r[nodes[a]] += ke[a][b] * self.values[nodes[b]];
                    }
                }
            }
        }
        // subtract boundary loads applied beyond the cut
        let problem_rhs = partial_rhs(m, self.field, pi, k);
        let mut flux = 0.0;
        for c in part.cols.0..=part.cols.1 {
            if part.periodic() && c == part.cols.1 {
                continue;
            }
            let a = part.id(k, c);
            flux += r[a] - problem_rhs[a];
        }
        // residual on the cut row equals the flux entering the far side
        if part.upward {
            -flux
        } else {
            flux
        }
    }

    pub fn exit(&self, label: &str) -> Option<&ExitRecord> {
        self.exits.iter().find(|e| e.label == label)
    }

    /// Plain-text header followed by a little-endian f64 block of nodal
    /// values.
    pub fn export(&self, path: &Path) -> std::io::Result<()> {
        let m = &self.mesh;
        let mut head = String::new();
        let w = m.spec.params.widths();
        let _ = writeln!(head, "kind = {}", m.spec.kind.name());
        let _ = writeln!(head, "field = {}", self.field.name());
        let _ = writeln!(head, "widths = {:?}", w);
        let _ = writeln!(head, "L = {:.17e}", m.spec.length);
        let _ = writeln!(head, "dxi = {:.17e}", m.spec.template.dxi);
        let _ = writeln!(head, "normalization = {}", self.normalization);
        let _ = writeln!(head, "nodes = {}", self.values.len());
        head.push_str("end\n");
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(head.as_bytes())?;
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()
    }
}

/// Boundary loads on the far side of row `k` of part `pi`, including the
/// row itself.
fn partial_rhs(m: &CellMesh, field: CellField, pi: usize, k: usize) -> Vec<f64> {
    let mut f = vec![0.0; m.num_nodes()];
    let part = &m.parts[pi];
    let last = part.rows.len() - 1;
    let h_top = if m.parts[0].periodic() { 1.0 } else { m.width(0) };
    let slope = match field {
        CellField::Z01 | CellField::Z => 0.0,
        CellField::Z02 => [1.0, h_top / m.width(1)][pi],
        CellField::Xi1 => [1.0, h_top / m.width(1), 0.0][pi],
        CellField::Xi2 => [1.0, 0.0, h_top / m.width(2)][pi],
    };
    let g = if part.upward { slope } else { -slope };
    for c in part.cols.0..part.cols.1 {
        let w = g * (m.xi1[c + 1] - m.xi1[c]) / 2.0;
        f[part.id(last, c)] += w;
        f[part.id(last, c + 1)] += w;
    }
    if field.wall_data() && !part.periodic() {
        for kk in k..last {
            let w = (part.rows[kk + 1] - part.rows[kk]) / 2.0;
            for (col, sign) in [(part.cols.0, 1.0), (part.cols.1, -1.0)] {
                f[part.id(kk, col)] += sign * w;
                f[part.id(kk + 1, col)] += sign * w;
            }
        }
    }
    f
}

/// Index i with v[i] ≤ x ≤ v[i+1] (clamped to the valid range).
fn locate(v: &[f64], x: f64) -> usize {
    let i = v.partition_point(|&a| a <= x);
    i.saturating_sub(1).min(v.len() - 2)
}

/// Junction-layer problem Z⁽⁰⁾_p on Π₀, p ∈ {1, 2}.
pub fn solve_junction_layer(spec: &CellSpec, p: usize) -> Result<CellSolution, CellError> {
    if spec.kind != CellKind::Pi0 || !(p == 1 || p == 2) {
        return Err(CellError::InvalidSpec(format!("junction layer needs Pi0 and p ∈ {{1,2}}, got p = {p}")));
    }
    let prob = CellProblem::new(spec)?;
    prob.solve(if p == 1 { CellField::Z01 } else { CellField::Z02 })
}

/// Branch-layer solutions Ξ₁, Ξ₂.
pub fn solve_branch_layer_xi(spec: &CellSpec) -> Result<(CellSolution, CellSolution), CellError> {
    let prob = CellProblem::new(spec)?;
    Ok((prob.solve(CellField::Xi1)?, prob.solve(CellField::Xi2)?))
}

/// Branch-layer solution Z with ∂ξ₁Z = −1 on the vertical walls.
pub fn solve_branch_layer_z(spec: &CellSpec) -> Result<CellSolution, CellError> {
    CellProblem::new(spec)?.solve(CellField::Z)
}

/// Every cell solution the corrector needs.
#[derive(Clone, Debug)]
pub struct CellSet {
    pub z01: CellSolution,
    pub z02: CellSolution,
    /// (Z, Ξ₁, Ξ₂) on Π₁, Π₂⁽¹⁾, Π₂⁽²⁾.
    pub branch: [(CellSolution, CellSolution, CellSolution); 3],
}

impl CellSet {
    /// Solves the four cells concurrently on a shared template and grading.
    pub fn solve(params: &GeometryParams, template: &PeriodTemplate, grading: Grading, length: f64) -> Result<Self, CellError> {
        let results: Vec<Result<Vec<CellSolution>, CellError>> = CellKind::ALL
            .par_iter()
            .map(|&kind| {
                let spec = CellSpec::new(kind, params, template.clone(), grading, length)?;
                let prob = CellProblem::new(&spec)?;
                let fields: &[CellField] = if kind == CellKind::Pi0 {
                    &[CellField::Z01, CellField::Z02]
                } else {
                    &[CellField::Z, CellField::Xi1, CellField::Xi2]
                };
                fields.iter().map(|&f| prob.solve(f)).collect()
            })
            .collect();
        let mut it = results.into_iter();
        let mut pi0 = it.next().unwrap()?.into_iter();
        let mut next3 = || -> Result<(CellSolution, CellSolution, CellSolution), CellError> {
            let mut v = it.next().unwrap()?.into_iter();
            Ok((v.next().unwrap(), v.next().unwrap(), v.next().unwrap()))
        };
        let branch = [next3()?, next3()?, next3()?];
        Ok(Self {
            z01: pi0.next().unwrap(),
            z02: pi0.next().unwrap(),
            branch,
        })
    }

    pub fn all(&self) -> Vec<&CellSolution> {
        let mut v = vec![&self.z01, &self.z02];
        for (a, b, c) in &self.branch {
            v.extend([a, b, c]);
        }
        v
    }

    /// `name = value` lines (17 significant digits) for every far-field
    /// constant and slope.
    pub fn constants_manifest(&self) -> String {
        let mut s = String::new();
        for sol in self.all() {
            for e in &sol.exits {
                let key = format!("{}.{}.{}", sol.mesh.spec.kind.name(), sol.field.name(), e.label);
                let _ = writeln!(s, "{key}.constant = {:.16e}", e.constant);
                let _ = writeln!(s, "{key}.slope = {:.16e}", e.slope);
                let _ = writeln!(s, "{key}.decay_rate = {:.16e}", e.decay_rate);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(h0: f64, h1: f64, h2: f64) -> GeometryParams {
        GeometryParams {
            a: 1.0,
            n: 8,
            l1: 0.5,
            l2: 0.5,
            l3: 0.5,
            h0,
            h11: h1,
            h12: h1,
            h21: h2,
            h22: h2,
            h23: h2,
            h24: h2,
            d0: 1.0,
        }
    }

    #[test]
    fn z02_slopes_and_normalization() {
        let p = params(0.5, 0.2, 0.08);
        let spec = CellSpec::standalone(CellKind::Pi0, &p, 4, 10.0).unwrap();
        let z = solve_junction_layer(&spec, 2).unwrap();
        assert!((z.exits[0].slope - 1.0).abs() < 1e-9);
        assert!(z.exits[0].constant.abs() < 1e-12);
        assert!((z.exits[1].slope - 2.0).abs() < 1e-9, "{}", z.exits[1].slope);
    }

    #[test]
    fn rhs_is_compatible_for_every_field() {
        let p = params(0.5, 0.2, 0.08);
        for kind in CellKind::ALL {
            let spec = CellSpec::standalone(kind, &p, 3, 6.0).unwrap();
            let prob = CellProblem::new(&spec).unwrap();
            let fields: &[CellField] = if kind == CellKind::Pi0 {
                &[CellField::Z01, CellField::Z02]
            } else {
                &[CellField::Z, CellField::Xi1, CellField::Xi2]
            };
            for &f in fields {
                let s: f64 = prob.rhs(f).iter().sum();
                assert!(s.abs() < 1e-12, "{kind:?} {f:?} {s}");
            }
        }
    }

    #[test]
    fn sample_reproduces_nodes_and_wraps() {
        let p = params(0.5, 0.2, 0.08);
        let spec = CellSpec::standalone(CellKind::Pi1, &p, 3, 6.0).unwrap();
        let z = solve_branch_layer_z(&spec).unwrap();
        let part = &z.mesh.parts[1];
        let (k, c) = (3, part.cols.0 + 1);
        let (v, _) = z.sample(z.mesh.xi1[c], part.xi2(k)).unwrap();
        assert!((v - z.values[part.id(k, c)]).abs() < 1e-12);
        let (w, _) = z.sample(z.mesh.xi1[c] + 3.0, part.xi2(k)).unwrap();
        assert!((v - w).abs() < 1e-12);
        // gap between the two lower strips
        let gap = 0.5;
        assert!(matches!(z.sample(gap, -1.0), Err(CellError::OutsideCell(..))));
    }

    #[test]
    fn asymptote_used_beyond_truncation() {
        let p = params(0.5, 0.2, 0.08);
        let spec = CellSpec::standalone(CellKind::Pi0, &p, 4, 10.0).unwrap();
        let z = solve_junction_layer(&spec, 2).unwrap();
        let (v, g) = z.sample(0.5, -30.0).unwrap();
        let e = &z.exits[1];
        assert_eq!(v, -30.0 * e.slope + e.constant);
        assert_eq!(g[1], e.slope);
    }

    #[test]
    fn sampled_gradient_matches_finite_differences() {
        let p = params(0.5, 0.2, 0.08);
        let spec = CellSpec::standalone(CellKind::Pi0, &p, 4, 10.0).unwrap();
        let z = solve_junction_layer(&spec, 2).unwrap();
        let m = &z.mesh;
        let d = 1e-7;
        let mut worst = 0.0f64;
        for part in &m.parts {
            for k in 1..part.rows.len() - 2 {
                for c in part.cols.0..part.cols.1 {
                    // cell centre, away from the kinks of the bilinear interpolant
                    let x = 0.5 * (m.xi1[c] + m.xi1[c + 1]);
                    let r = 0.5 * (part.rows[k] + part.rows[k + 1]);
                    let y = if part.upward { r } else { -r };
                    let (_, g) = z.sample(x, y).unwrap();
                    let fd1 = (z.sample(x + d, y).unwrap().0 - z.sample(x - d, y).unwrap().0) / (2.0 * d);
                    let fd2 = (z.sample(x, y + d).unwrap().0 - z.sample(x, y - d).unwrap().0) / (2.0 * d);
                    let scale = g[0].abs().max(g[1].abs()).max(1e-3);
                    worst = worst.max((fd1 - g[0]).abs() / scale).max((fd2 - g[1]).abs() / scale);
                }
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn wrong_field_for_kind_is_rejected() {
        let p = params(0.5, 0.2, 0.08);
        let spec = CellSpec::standalone(CellKind::Pi1, &p, 3, 6.0).unwrap();
        assert!(CellProblem::new(&spec).unwrap().solve(CellField::Z02).is_err());
        assert!(matches!(
            CellSpec::standalone(CellKind::Pi1, &p, 3, 2.0),
            Err(CellError::InvalidSpec(_))
        ));
    }
}
