//! Homogenized multi-sheeted problem: a Q1 discretization of the body Ω₀
//! coupled to per-column P1 chains on the branching layers D₀, D₁, D₂.
//!
//! Interface values are shared unknowns, so value continuity holds by
//! construction and the Kirchhoff flux conditions are natural. Each x₁
//! column of the layers is a tree hanging from the bottom row of the body
//! grid, which the optional Schur fast path eliminates column by column.

use crate::eps_solver::TimeGrid;
use crate::fem::{self, GAUSS2, GAUSS3};
use crate::geometry::{Branch, GeometryParams};
use crate::linalg::{CscMatrix, SpdSolver};
use crate::model::{delta1, Nonlinearity, ProblemData, Sheet};
use crate::newton::{newton, Linearization, NewtonSettings, SolverError, StepDiagnostics};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

/// All sheets in storage order: the body, then [`Branch::ALL`].
pub const SHEETS: [Sheet; 8] = [
    Sheet::Body,
    Sheet::Branch(Branch::ALL[0]),
    Sheet::Branch(Branch::ALL[1]),
    Sheet::Branch(Branch::ALL[2]),
    Sheet::Branch(Branch::ALL[3]),
    Sheet::Branch(Branch::ALL[4]),
    Sheet::Branch(Branch::ALL[5]),
    Sheet::Branch(Branch::ALL[6]),
];

/// Position of a sheet in [`SHEETS`].
pub fn sheet_index(s: Sheet) -> usize {
    match s {
        Sheet::Body => 0,
        Sheet::Branch(b) => 1 + b.index(),
    }
}

pub fn sheet_name(s: Sheet) -> String {
    match s {
        Sheet::Body => "body".into(),
        Sheet::Branch(b) => format!("v{}", b.label()),
    }
}

/// Interval counts of the homogenized grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomResolution {
    pub nx: usize,
    pub ny_body: usize,
    pub ny: [usize; 3],
}

impl HomResolution {
    /// Step close to `h` in every direction, at least three intervals each.
    pub fn uniform(p: &GeometryParams, h: f64) -> Self {
        let n = |len: f64| ((len / h).round() as usize).max(3);
        Self {
            nx: n(p.a),
            ny_body: n(p.d0),
            ny: p.lengths().map(n),
        }
    }

    pub fn refined(&self) -> Self {
        Self {
            nx: 2 * self.nx,
            ny_body: 2 * self.ny_body,
            ny: self.ny.map(|n| 2 * n),
        }
    }
}

/// Uniform grids shared by all sheets. Body rows ascend from x₂ = 0;
/// layer rows descend from the top interface of the layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HomGrid {
    pub params: GeometryParams,
    pub x1: Vec<f64>,
    /// Trapezoid weights of the x₁ grid.
    pub wx: Vec<f64>,
    pub body_y: Vec<f64>,
    pub level_y: [Vec<f64>; 3],
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|k| if k == n { b } else { a + (b - a) * k as f64 / n as f64 })
        .collect()
}

impl HomGrid {
    pub fn new(p: &GeometryParams, res: &HomResolution) -> Result<Self, SolverError> {
        if res.nx < 3 || res.ny_body < 3 || res.ny.iter().any(|&n| n < 3) {
            return Err(SolverError::Mesh("homogenized grids need at least 3 intervals per direction".into()));
        }
        let x1 = linspace(0.0, p.a, res.nx);
        let dx = p.a / res.nx as f64;
        let mut wx = vec![dx; res.nx + 1];
        wx[0] = dx / 2.0;
        wx[res.nx] = dx / 2.0;
        let level_y = [0, 1, 2].map(|i| linspace(p.interface_y(i), p.interface_y(i + 1), res.ny[i]));
        Ok(Self {
            params: p.clone(),
            x1,
            wx,
            body_y: linspace(0.0, p.d0, res.ny_body),
            level_y,
        })
    }

    pub fn ncols(&self) -> usize {
        self.x1.len()
    }

    pub fn rows(&self, s: Sheet) -> &[f64] {
        match s {
            Sheet::Body => &self.body_y,
            Sheet::Branch(b) => &self.level_y[b.level],
        }
    }

    /// Positive row spacing of a sheet.
    pub fn dy(&self, s: Sheet) -> f64 {
        let r = self.rows(s);
        (r[1] - r[0]).abs()
    }

    pub fn dx(&self) -> f64 {
        self.x1[1] - self.x1[0]
    }

    fn intervals(&self, level: usize) -> usize {
        self.level_y[level].len() - 1
    }

    pub fn num_body(&self) -> usize {
        self.ncols() * self.body_y.len()
    }

    /// Unknowns per column tree (shared top nodes excluded).
    pub fn tree_size(&self) -> usize {
        self.intervals(0) + 2 * self.intervals(1) + 4 * self.intervals(2)
    }

    pub fn num_dofs(&self) -> usize {
        self.num_body() + self.ncols() * self.tree_size()
    }

    /// Local tree offset of the first own node (k = 1) of a branch sheet.
    fn tree_offset(&self, b: Branch) -> usize {
        let (n0, n1, n2) = (self.intervals(0), self.intervals(1), self.intervals(2));
        match b.level {
            0 => 0,
            1 => n0 + b.m * n1,
            _ => n0 + 2 * n1 + b.m * n2,
        }
    }

    /// Global unknown of node k of a sheet in column c.
    pub fn dof(&self, s: Sheet, c: usize, k: usize) -> usize {
        match s {
            Sheet::Body => k * self.ncols() + c,
            Sheet::Branch(b) => {
                if k == 0 {
                    match b.parent() {
                        None => self.dof(Sheet::Body, c, 0),
                        Some(parent) => {
                            let top = self.intervals(parent.level);
                            self.dof(Sheet::Branch(parent), c, top)
                        }
                    }
                } else {
                    self.num_body() + c * self.tree_size() + self.tree_offset(b) + k - 1
                }
            }
        }
    }

    /// Parent of every local tree node; `None` marks the body root.
    fn tree_parents(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.tree_size()];
        for b in Branch::ALL {
            let off = self.tree_offset(b);
            let top = match b.parent() {
                None => None,
                Some(p) => Some(self.tree_offset(p) + self.intervals(p.level) - 1),
            };
            for k in 1..=self.intervals(b.level) {
                out[off + k - 1] = if k == 1 { top } else { Some(off + k - 2) };
            }
        }
        out
    }
}

/// Reaction slot: 0 body k, 1..=3 layer k_i, 4..=6 Robin κ_i.
fn slot(data: &ProblemData, s: usize) -> &Nonlinearity {
    match s {
        0 => &data.k,
        1..=3 => &data.k_levels[s - 1],
        _ => &data.kappa[s - 4],
    }
}

/// Assembled homogenized system.
pub struct HomogenizedSystem {
    pub grid: Arc<HomGrid>,
    pub data: ProblemData,
    pub stiffness: CscMatrix,
    /// Consistent body mass plus h-weighted lumped layer mass.
    pub mass: CscMatrix,
    /// Row sums of `mass`, used as Newton weights.
    pub lumped: Vec<f64>,
    reaction: Vec<(usize, usize, f64)>,
    load_f0: Vec<f64>,
    load_g0: Vec<f64>,
    /// Unweighted lumped measure of every unknown summed over its sheets.
    v_weights: Vec<f64>,
    /// Body stiffness plus unweighted layer stiffness.
    seminorm: CscMatrix,
    f0_shape_norm: f64,
    g_shape_norms: [f64; 3],
}

pub fn assemble(grid: Arc<HomGrid>, data: &ProblemData) -> Result<HomogenizedSystem, SolverError> {
    let g = &*grid;
    let p = &g.params;
    let n = g.num_dofs();
    let nc = g.ncols();
    let dx = g.dx();
    let dyb = g.dy(Sheet::Body);
    let mut body_cells = Vec::new();
    for r in 0..g.body_y.len() - 1 {
        for c in 0..nc - 1 {
            body_cells.push(([r * nc + c, r * nc + c + 1, (r + 1) * nc + c + 1, (r + 1) * nc + c], c, r));
        }
    }
    let kb = fem::stiffness(dx, dyb);
    let mb = fem::mass(dx, dyb);
    let mut s_trip = Vec::new();
    let mut semi_trip = Vec::new();
    let mut m_trip = Vec::new();
    let mut reaction = Vec::new();
    let mut v_weights = vec![0.0; n];
    let mut load_f0 = vec![0.0; n];
    let mut load_g0 = vec![0.0; n];
    let mut f0_sq = 0.0;
    for &(nodes, c, r) in &body_cells {
        for a in 0..4 {
            for b in 0..4 {
                s_trip.push((nodes[a], nodes[b], kb[a][b]));
                m_trip.push((nodes[a], nodes[b], mb[a][b]));
            }
            reaction.push((nodes[a], 0, dx * dyb / 4.0));
            v_weights[nodes[a]] += dx * dyb / 4.0;
        }
        for &s in &GAUSS2 {
            for &t in &GAUSS2 {
                let w = 0.25 * dx * dyb;
                let f = data.f0.shape(g.x1[c] + s * dx, g.body_y[r] + t * dyb);
                f0_sq += w * f * f;
                let phi = fem::shape(s, t);
                for a in 0..4 {
                    load_f0[nodes[a]] += w * f * phi[a];
                }
            }
        }
    }
    semi_trip.extend_from_slice(&s_trip);
    let mut g_sq = [0.0; 3];
    for b in Branch::ALL {
        let sheet = Sheet::Branch(b);
        let h = p.width(b);
        let i = b.level;
        let ys = g.rows(sheet);
        let dy = g.dy(sheet);
        let robin = 2.0 * delta1(data.alpha[i]);
        let gw = 2.0 * delta1(data.beta[i]);
        for c in 0..nc {
            let w = g.wx[c];
            for k in 0..ys.len() - 1 {
                let (a, bb) = (g.dof(sheet, c, k), g.dof(sheet, c, k + 1));
                let st = w / dy;
                for (x, y, v) in [(a, a, st), (bb, bb, st), (a, bb, -st), (bb, a, -st)] {
                    s_trip.push((x, y, h * v));
                    semi_trip.push((x, y, v));
                }
                let half = w * dy / 2.0;
                for node in [a, bb] {
                    m_trip.push((node, node, h * half));
                    reaction.push((node, 1 + i, h * half));
                    if robin > 0.0 {
                        reaction.push((node, 4 + i, robin * half));
                    }
                    v_weights[node] += half;
                }
                for &s in &GAUSS2 {
                    let y = ys[k] + s * (ys[k + 1] - ys[k]);
                    let gv = data.g0.shape(i, p, g.x1[c], y);
                    if b.m == 0 {
                        g_sq[i] += w * dy * 0.5 * gv * gv;
                    }
                    if gw > 0.0 {
                        load_g0[a] += gw * w * dy * 0.5 * gv * (1.0 - s);
                        load_g0[bb] += gw * w * dy * 0.5 * gv * s;
                    }
                }
            }
        }
    }
    let stiffness = CscMatrix::from_triplets(n, &s_trip);
    let mass = CscMatrix::from_triplets(n, &m_trip);
    let lumped = mass.matvec(&vec![1.0; n]);
    Ok(HomogenizedSystem {
        seminorm: CscMatrix::from_triplets(n, &semi_trip),
        grid,
        data: data.clone(),
        stiffness,
        mass,
        lumped,
        reaction: merge(reaction),
        load_f0,
        load_g0,
        v_weights,
        f0_shape_norm: f0_sq.sqrt(),
        g_shape_norms: g_sq.map(f64::sqrt),
    })
}

fn merge(mut v: Vec<(usize, usize, f64)>) -> Vec<(usize, usize, f64)> {
    v.sort_by_key(|e| (e.0, e.1));
    let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(v.len());
    for e in v {
        match out.last_mut() {
            Some(l) if l.0 == e.0 && l.1 == e.1 => l.2 += e.2,
            _ => out.push(e),
        }
    }
    out
}

impl HomogenizedSystem {
    pub fn num_dofs(&self) -> usize {
        self.lumped.len()
    }

    /// Whether any Robin κ block is present.
    pub fn has_robin_blocks(&self) -> bool {
        self.reaction.iter().any(|r| r.1 >= 4)
    }

    fn add_nonlinear(&self, u: &[f64], out: &mut [f64]) {
        for &(a, s, w) in &self.reaction {
            out[a] += w * slot(&self.data, s).eval(u[a]);
        }
    }

    pub fn nonlinear_jacobian(&self, u: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; u.len()];
        for &(a, s, w) in &self.reaction {
            d[a] += w * slot(&self.data, s).deriv(u[a]);
        }
        d
    }

    /// Discrete operator 𝒜u = S u + reaction(u).
    pub fn apply_operator(&self, u: &[f64]) -> Vec<f64> {
        let mut out = self.stiffness.matvec(u);
        self.add_nonlinear(u, &mut out);
        out
    }

    /// Load vector **F**(t) plus any manufactured sheet sources.
    pub fn load(&self, t: f64) -> Vec<f64> {
        let d = &self.data;
        let (a, b) = (d.f0.time_factor(t), d.g0.time_factor(t));
        let mut f: Vec<f64> = self.load_f0.iter().zip(&self.load_g0).map(|(x, y)| a * x + b * y).collect();
        if let Some(extra) = &d.extra {
            let g = &*self.grid;
            let nc = g.ncols();
            let (dx, dyb) = (g.dx(), g.dy(Sheet::Body));
            let (gx, gw) = GAUSS3;
            for r in 0..g.body_y.len() - 1 {
                for c in 0..nc - 1 {
                    let nodes = [r * nc + c, r * nc + c + 1, (r + 1) * nc + c + 1, (r + 1) * nc + c];
                    for (qs, &s) in gx.iter().enumerate() {
                        for (qt, &tt) in gx.iter().enumerate() {
                            let w = gw[qs] * gw[qt] * dx * dyb;
                            let v = (extra.volume)(Sheet::Body, g.x1[c] + s * dx, g.body_y[r] + tt * dyb, t);
                            let phi = fem::shape(s, tt);
                            for k in 0..4 {
                                f[nodes[k]] += w * v * phi[k];
                            }
                        }
                    }
                }
            }
            for b in Branch::ALL {
                let sheet = Sheet::Branch(b);
                let ys = g.rows(sheet);
                let dy = g.dy(sheet);
                for c in 0..nc {
                    for k in 0..ys.len() - 1 {
                        let (na, nb) = (g.dof(sheet, c, k), g.dof(sheet, c, k + 1));
                        for (q, &s) in gx.iter().enumerate() {
                            let y = ys[k] + s * (ys[k + 1] - ys[k]);
                            let v = (extra.volume)(sheet, g.x1[c], y, t) * g.wx[c] * dy * gw[q];
                            f[na] += v * (1.0 - s);
                            f[nb] += v * s;
                        }
                    }
                }
            }
        }
        f
    }

    /// Implicit Euler residual M(u − u_prev)/dt + 𝒜u − F.
    pub fn residual(&self, u: &[f64], u_prev: &[f64], dt: f64, load: &[f64]) -> Vec<f64> {
        let du: Vec<f64> = u.iter().zip(u_prev).map(|(a, b)| (a - b) / dt).collect();
        let mut r = self.mass.matvec(&du);
        let su = self.stiffness.matvec(u);
        for i in 0..r.len() {
            r[i] += su[i] - load[i];
        }
        self.add_nonlinear(u, &mut r);
        r
    }

    /// Discrete ‖·‖²_V: lumped L² summed over all sheets, without h weights.
    pub fn v_norm_sq(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.v_weights).map(|(x, w)| w * x * x).sum()
    }

    /// Discrete ‖·‖²_H: ‖·‖²_V plus the body gradient and the layer
    /// ∂_{x₂} seminorms, without h weights.
    pub fn h_norm_sq(&self, u: &[f64]) -> f64 {
        self.v_norm_sq(u) + self.seminorm.quad_form(u)
    }

    /// Reaction part Σ w·(k(u) − k(w))·(u − w) of the monotonicity pairing.
    pub fn reaction_pairing(&self, u: &[f64], w: &[f64]) -> f64 {
        self.reaction
            .iter()
            .map(|&(a, s, wt)| {
                let f = slot(&self.data, s);
                wt * (f.eval(u[a]) - f.eval(w[a])) * (u[a] - w[a])
            })
            .sum()
    }

    /// Weighted square Σ w·d² over the reaction weights of the layer and
    /// body nonlinearities (Robin blocks excluded).
    pub fn reaction_weighted_sq(&self, d: &[f64]) -> f64 {
        self.reaction
            .iter()
            .filter(|r| r.1 < 4)
            .map(|&(a, _, w)| w * d[a] * d[a])
            .sum()
    }

    fn min_width(&self) -> f64 {
        self.grid.params.min_width()
    }

    fn max_width(&self) -> f64 {
        self.grid.params.widths().into_iter().fold(0.0, f64::max)
    }

    /// ⟨𝒜u − 𝒜w, u − w⟩ and its bound c₁·min(1, min h)·‖u − w‖²_V.
    pub fn monotonicity_probe(&self, u: &[f64], w: &[f64]) -> (f64, f64) {
        let au = self.apply_operator(u);
        let aw = self.apply_operator(w);
        let d: Vec<f64> = u.iter().zip(w).map(|(a, b)| a - b).collect();
        let pairing = au.iter().zip(&aw).zip(&d).map(|((a, b), c)| (a - b) * c).sum();
        let c1 = self.data.k.c1.min(self.data.k_levels.iter().map(|f| f.c1).fold(f64::INFINITY, f64::min));
        (pairing, c1 * self.min_width().min(1.0) * self.v_norm_sq(&d))
    }

    /// ⟨𝒜φ, φ⟩ and C₃‖φ‖²_H − δ‖φ‖²_V − C₄(δ) with C₃ = min(1, min h)·min(1, c₁)
    /// and C₄(δ) = Σ_a (Σ w|f(0)|)²/(4δ V_a) from Young's inequality per node.
    pub fn coercivity_probe(&self, phi: &[f64], delta: f64) -> (f64, f64) {
        let lhs = crate::linalg::dot(&self.apply_operator(phi), phi);
        let c1 = self.data.k.c1.min(self.data.k_levels.iter().map(|f| f.c1).fold(f64::INFINITY, f64::min));
        let c3 = self.min_width().min(1.0) * c1.min(1.0);
        let mut at_zero = vec![0.0; phi.len()];
        for &(a, s, w) in &self.reaction {
            at_zero[a] += w * slot(&self.data, s).at_zero().abs();
        }
        let c4: f64 = at_zero
            .iter()
            .zip(&self.v_weights)
            .map(|(z, v)| z * z / (4.0 * delta * v))
            .sum();
        (lhs, c3 * self.h_norm_sq(phi) - delta * self.v_norm_sq(phi) - c4)
    }

    /// |⟨𝒜φ, ψ⟩| and C₁(1 + ‖φ‖_H)‖ψ‖_H with C₁ = max(max(1, max h) + c₂ω,
    /// √(Σ_a K_a²/V_a)), where ω bounds the reaction weights by the V
    /// weights and K_a = Σ w|f(0)| at node a.
    pub fn boundedness_probe(&self, phi: &[f64], psi: &[f64]) -> (f64, f64) {
        let lhs = crate::linalg::dot(&self.apply_operator(phi), psi).abs();
        let c2 = [self.data.k]
            .iter()
            .chain(&self.data.k_levels)
            .chain(&self.data.kappa)
            .map(|f| f.c2)
            .fold(0.0, f64::max);
        let mut total_w = vec![0.0; phi.len()];
        let mut at_zero = vec![0.0; phi.len()];
        for &(a, s, w) in &self.reaction {
            total_w[a] += w;
            at_zero[a] += w * slot(&self.data, s).at_zero().abs();
        }
        let omega = total_w.iter().zip(&self.v_weights).map(|(t, v)| t / v).fold(0.0, f64::max);
        let k0: f64 = at_zero.iter().zip(&self.v_weights).map(|(z, v)| z * z / v).sum::<f64>().sqrt();
        let c1 = (self.max_width().max(1.0) + c2 * omega).max(k0);
        (lhs, c1 * (1.0 + self.h_norm_sq(phi).sqrt()) * self.h_norm_sq(psi).sqrt())
    }

    /// A-priori bound on ‖uⁿ‖_M for each time level from the discrete
    /// energy inequality. `None` when manufactured sources are present.
    pub fn energy_bound(&self, grid: &TimeGrid) -> Option<Vec<f64>> {
        if self.data.extra.is_some() {
            return None;
        }
        let d = &self.data;
        let c1r = d.k.c1.min(d.k_levels.iter().map(|f| f.c1).fold(f64::INFINITY, f64::min));
        let mut k0sq = 0.0;
        let mut b_robin = 0.0;
        for &(_, s, w) in &self.reaction {
            let f = slot(d, s);
            if s < 4 {
                k0sq += w * f.at_zero().powi(2);
            } else {
                b_robin += w * f.at_zero().powi(2) / (4.0 * f.c1);
            }
        }
        let (c, extra_b) = if k0sq > 0.0 {
            (c1r / 2.0, k0sq / (2.0 * c1r))
        } else {
            (c1r, 0.0)
        };
        // ∫ g ψ over one sheet is bounded by ‖g‖·‖u‖_M/√h
        let g_coef: f64 = Branch::ALL
            .iter()
            .map(|&b| 2.0 * delta1(d.beta[b.level]) * self.g_shape_norms[b.level] / self.grid.params.width(b).sqrt())
            .sum();
        let mut out = vec![0.0];
        let mut a = 0.0f64;
        for n in 1..grid.times.len() {
            let t = grid.times[n];
            let dt = grid.dt(n);
            let phi = d.f0.time_factor(t).abs() * self.f0_shape_norm + d.g0.time_factor(t).abs() * g_coef;
            let b = extra_b + b_robin;
            let p = a + dt * phi;
            let q = 1.0 + c * dt;
            a = (p + (p * p + 4.0 * q * dt * b).sqrt()) / (2.0 * q);
            out.push(a);
        }
        Some(out)
    }

    pub fn field(&self, u: &[f64]) -> MultiSheetedField {
        MultiSheetedField::from_dofs(self.grid.clone(), u)
    }
}

/// How Newton corrections are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMode {
    /// One sparse Cholesky factorization of the whole system.
    Monolithic,
    /// Eliminate the column trees onto the body block first.
    TreeSchur,
}

/// Column-tree elimination state.
struct TreeSchur {
    nb: usize,
    ts: usize,
    parents: Vec<Option<usize>>,
    offdiag: Vec<f64>,
    tree_diag: Vec<f64>,
    body_base: CscMatrix,
    body_diag: Vec<usize>,
    spd: SpdSolver,
    dtil: Vec<f64>,
}

impl TreeSchur {
    fn new(grid: &HomGrid, base: &CscMatrix) -> Result<Self, SolverError> {
        let nb = grid.num_body();
        let ts = grid.tree_size();
        let parents = grid.tree_parents();
        let nt = grid.ncols() * ts;
        let mut offdiag = vec![0.0; nt];
        let mut tree_diag = vec![0.0; nt];
        for c in 0..grid.ncols() {
            for (li, p) in parents.iter().enumerate() {
                let i = nb + c * ts + li;
                let pi = match p {
                    Some(q) => nb + c * ts + q,
                    None => c,
                };
                offdiag[c * ts + li] = base.get(i, pi);
                tree_diag[c * ts + li] = base.get(i, i);
            }
        }
        let keep: Vec<usize> = (0..nb).collect();
        let body_base = base.submatrix(&keep);
        let body_diag = body_base.diagonal_positions();
        let spd = SpdSolver::analyze(&body_base)?;
        Ok(Self {
            nb,
            ts,
            parents,
            offdiag,
            tree_diag,
            body_base,
            body_diag,
            spd,
            dtil: Vec::new(),
        })
    }

    fn factor(&mut self, jd: &[f64]) -> Result<(), SolverError> {
        let (nb, ts) = (self.nb, self.ts);
        let mut dtil: Vec<f64> = self.tree_diag.iter().zip(&jd[nb..]).map(|(a, b)| a + b).collect();
        let parents = &self.parents;
        let offdiag = &self.offdiag;
        let roots: Vec<f64> = dtil
            .par_chunks_mut(ts)
            .enumerate()
            .map(|(c, d)| {
                let e = &offdiag[c * ts..(c + 1) * ts];
                let mut root = 0.0;
                for li in (0..ts).rev() {
                    let s = e[li] * e[li] / d[li];
                    match parents[li] {
                        Some(p) => d[p] -= s,
                        None => root -= s,
                    }
                }
                root
            })
            .collect();
        let mut jb = self.body_base.clone();
        for (i, &p) in self.body_diag.iter().enumerate() {
            jb.values_mut()[p] += jd[i];
        }
        for (c, r) in roots.iter().enumerate() {
            jb.values_mut()[self.body_diag[c]] += r;
        }
        self.spd.factor(&jb)?;
        self.dtil = dtil;
        Ok(())
    }

    fn solve(&self, r: &[f64]) -> Result<Vec<f64>, SolverError> {
        let (nb, ts) = (self.nb, self.ts);
        let mut x = r.to_vec();
        let (xb, xt) = x.split_at_mut(nb);
        let parents = &self.parents;
        let roots: Vec<f64> = xt
            .par_chunks_mut(ts)
            .enumerate()
            .map(|(c, v)| {
                let e = &self.offdiag[c * ts..(c + 1) * ts];
                let d = &self.dtil[c * ts..(c + 1) * ts];
                let mut root = 0.0;
                for li in (0..ts).rev() {
                    let f = e[li] * v[li] / d[li];
                    match parents[li] {
                        Some(p) => v[p] -= f,
                        None => root -= f,
                    }
                }
                root
            })
            .collect();
        for (c, r) in roots.iter().enumerate() {
            xb[c] += r;
        }
        let sol = self.spd.solve(xb)?;
        xb.copy_from_slice(&sol);
        let xb: &[f64] = xb;
        xt.par_chunks_mut(ts).enumerate().for_each(|(c, v)| {
            let e = &self.offdiag[c * ts..(c + 1) * ts];
            let d = &self.dtil[c * ts..(c + 1) * ts];
            for li in 0..ts {
                let xp = match parents[li] {
                    Some(p) => v[p],
                    None => xb[c],
                };
                v[li] = (v[li] - e[li] * xp) / d[li];
            }
        });
        Ok(x)
    }
}

enum Factor {
    Monolithic { spd: SpdSolver, diag_pos: Vec<usize> },
    Tree(Box<TreeSchur>),
}

struct HomLinearization<'a> {
    sys: &'a HomogenizedSystem,
    base: &'a CscMatrix,
    factor: &'a mut Factor,
    ready: &'a mut bool,
}

impl Linearization for HomLinearization<'_> {
    fn refactor(&mut self, u: &[f64]) -> Result<(), SolverError> {
        let d = self.sys.nonlinear_jacobian(u);
        match self.factor {
            Factor::Monolithic { spd, diag_pos } => {
                let mut j = self.base.clone();
                for (i, &p) in diag_pos.iter().enumerate() {
                    j.values_mut()[p] += d[i];
                }
                spd.factor(&j)?;
            }
            Factor::Tree(t) => t.factor(&d)?,
        }
        *self.ready = true;
        Ok(())
    }

    fn ready(&self) -> bool {
        *self.ready
    }

    fn solve(&self, r: &[f64]) -> Result<Vec<f64>, SolverError> {
        match &*self.factor {
            Factor::Monolithic { spd, .. } => Ok(spd.solve(r)?),
            Factor::Tree(t) => t.solve(r),
        }
    }
}

/// Time trajectory of the homogenized problem.
#[derive(Clone, Debug)]
pub struct HomTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Implicit Euler time stepper for the homogenized system.
pub struct HomSolver {
    pub system: HomogenizedSystem,
    pub settings: NewtonSettings,
    pub mode: LinearMode,
    base: Option<(f64, CscMatrix)>,
    factor: Option<Factor>,
    ready: bool,
}

impl HomSolver {
    pub fn new(system: HomogenizedSystem, settings: NewtonSettings, mode: LinearMode) -> Self {
        Self {
            system,
            settings,
            mode,
            base: None,
            factor: None,
            ready: false,
        }
    }

    fn prepare(&mut self, dt: f64) -> Result<(), SolverError> {
        if self.base.as_ref().is_some_and(|(d, _)| *d == dt) {
            return Ok(());
        }
        let base = self.system.mass.axpby(1.0 / dt, &self.system.stiffness, 1.0);
        let factor = match self.mode {
            LinearMode::Monolithic => match self.factor.take() {
                Some(Factor::Monolithic { spd, diag_pos }) => Factor::Monolithic { spd, diag_pos },
                _ => Factor::Monolithic {
                    spd: SpdSolver::analyze(&base)?,
                    diag_pos: base.diagonal_positions(),
                },
            },
            LinearMode::TreeSchur => Factor::Tree(Box::new(TreeSchur::new(&self.system.grid, &base)?)),
        };
        self.factor = Some(factor);
        self.base = Some((dt, base));
        self.ready = false;
        Ok(())
    }

    pub fn step(&mut self, u_prev: &[f64], dt: f64, t_next: f64) -> Result<(Vec<f64>, StepDiagnostics), SolverError> {
        if u_prev.len() != self.system.num_dofs() {
            return Err(SolverError::ShapeMismatch {
                expected: self.system.num_dofs(),
                got: u_prev.len(),
            });
        }
        self.prepare(dt)?;
        let load = self.system.load(t_next);
        let sys = &self.system;
        let mut lin = HomLinearization {
            sys,
            base: &self.base.as_ref().unwrap().1,
            factor: self.factor.as_mut().unwrap(),
            ready: &mut self.ready,
        };
        newton(
            u_prev.to_vec(),
            |u| sys.residual(u, u_prev, dt, &load),
            &sys.lumped,
            &mut lin,
            &self.settings,
        )
    }

    /// One linear solve J x = r with the Jacobian at `u`, for testing the
    /// fast path against the monolithic factorization.
    pub fn jacobian_solve(&mut self, u: &[f64], dt: f64, r: &[f64]) -> Result<Vec<f64>, SolverError> {
        self.prepare(dt)?;
        let mut lin = HomLinearization {
            sys: &self.system,
            base: &self.base.as_ref().unwrap().1,
            factor: self.factor.as_mut().unwrap(),
            ready: &mut self.ready,
        };
        lin.refactor(u)?;
        lin.solve(r)
    }

    pub fn solve(&mut self, grid: &TimeGrid) -> Result<HomTrajectory, SolverError> {
        let mut u = vec![0.0; self.system.num_dofs()];
        let mut states = vec![u.clone()];
        let mut diagnostics = vec![StepDiagnostics::default()];
        for n in 1..grid.times.len() {
            let (next, d) = self.step(&u, grid.dt(n), grid.times[n]).map_err(|e| SolverError::Step {
                step: n,
                source: Box::new(e),
            })?;
            u = next;
            states.push(u.clone());
            diagnostics.push(d);
        }
        Ok(HomTrajectory {
            times: grid.times.clone(),
            states,
            diagnostics,
        })
    }
}

/// Per-sheet nodal arrays, stored column-major (`values[s][c·rows + k]`).
/// Shared interface nodes appear in every sheet that contains them.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSheetedField {
    pub grid: Arc<HomGrid>,
    pub values: Vec<Vec<f64>>,
}

/// Cubic Lagrange stencil on a uniform grid: first node and weights.
pub(crate) fn lagrange4(nodes: &[f64], x: f64) -> (usize, [f64; 4]) {
    let n = nodes.len();
    let h = nodes[1] - nodes[0];
    let pos = (x - nodes[0]) / h;
    let start = (pos.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
    let s = pos - start as f64;
    let w = [
        -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0,
        s * (s - 2.0) * (s - 3.0) / 2.0,
        -s * (s - 1.0) * (s - 3.0) / 2.0,
        s * (s - 1.0) * (s - 2.0) / 6.0,
    ];
    (start, w)
}

/// End of a sheet where an x₂ trace is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum End {
    /// Largest x₂ of the sheet.
    Top,
    Bottom,
}

impl MultiSheetedField {
    pub fn from_dofs(grid: Arc<HomGrid>, u: &[f64]) -> Self {
        let values = SHEETS
            .iter()
            .map(|&s| {
                let rows = grid.rows(s).len();
                let mut v = vec![0.0; grid.ncols() * rows];
                for c in 0..grid.ncols() {
                    for k in 0..rows {
                        v[c * rows + k] = u[grid.dof(s, c, k)];
                    }
                }
                v
            })
            .collect();
        Self { grid, values }
    }

    /// Samples `f(sheet, x₁, x₂)` at every node of every sheet.
    pub fn from_fn<F: Fn(Sheet, f64, f64) -> f64>(grid: Arc<HomGrid>, f: F) -> Self {
        let values = SHEETS
            .iter()
            .map(|&s| {
                let ys = grid.rows(s);
                grid.x1.iter().flat_map(|&x| ys.iter().map(move |&y| (x, y))).map(|(x, y)| f(s, x, y)).collect()
            })
            .collect();
        Self { grid, values }
    }

    pub fn get(&self, s: Sheet, c: usize, k: usize) -> f64 {
        let rows = self.grid.rows(s).len();
        self.values[sheet_index(s)][c * rows + k]
    }

    fn column(&self, s: Sheet, c: usize) -> &[f64] {
        let rows = self.grid.rows(s).len();
        &self.values[sheet_index(s)][c * rows..(c + 1) * rows]
    }

    /// Second-order one-sided ∂_{x₂} at an end of a sheet in column c.
    pub fn dx2_trace(&self, s: Sheet, c: usize, end: End) -> f64 {
        let v = self.column(s, c);
        let n = v.len() - 1;
        let dy = self.grid.dy(s);
        // index 0 is the top for layers and the bottom for the body
        let first = matches!((s, end), (Sheet::Body, End::Bottom) | (Sheet::Branch(_), End::Top));
        let (a, b, cc, sign) = if first {
            (v[0], v[1], v[2], if s == Sheet::Body { 1.0 } else { -1.0 })
        } else {
            (v[n], v[n - 1], v[n - 2], if s == Sheet::Body { -1.0 } else { 1.0 })
        };
        sign * (-3.0 * a + 4.0 * b - cc) / (2.0 * dy)
    }

    /// ∂_{x₁} at node (c, k) by central differences, second-order one-sided
    /// at the ends.
    pub fn dx1_node(&self, s: Sheet, c: usize, k: usize) -> f64 {
        let n = self.grid.ncols() - 1;
        let h = self.grid.dx();
        let v = |c| self.get(s, c, k);
        if c == 0 {
            (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)
        } else if c == n {
            (3.0 * v(n) - 4.0 * v(n - 1) + v(n - 2)) / (2.0 * h)
        } else {
            (v(c + 1) - v(c - 1)) / (2.0 * h)
        }
    }

    /// Cubic interpolation of node data `f(c, k)` of a sheet at (x₁, x₂).
    fn interp<F: Fn(usize, usize) -> f64>(&self, s: Sheet, x1: f64, x2: f64, f: F) -> f64 {
        let (c0, wc) = lagrange4(&self.grid.x1, x1);
        let ys = self.grid.rows(s);
        let (k0, wk) = lagrange4(ys, x2);
        let mut out = 0.0;
        for (i, a) in wc.iter().enumerate() {
            for (j, b) in wk.iter().enumerate() {
                out += a * b * f(c0 + i, k0 + j);
            }
        }
        out
    }

    pub fn value_at(&self, s: Sheet, x1: f64, x2: f64) -> f64 {
        self.interp(s, x1, x2, |c, k| self.get(s, c, k))
    }

    pub fn dx1_at(&self, s: Sheet, x1: f64, x2: f64) -> f64 {
        self.interp(s, x1, x2, |c, k| self.dx1_node(s, c, k))
    }

    /// Cubic interpolation in x₁ of an x₂ trace derivative.
    pub fn dx2_trace_at(&self, s: Sheet, x1: f64, end: End) -> f64 {
        let (c0, wc) = lagrange4(&self.grid.x1, x1);
        wc.iter().enumerate().map(|(i, w)| w * self.dx2_trace(s, c0 + i, end)).sum()
    }

    /// Largest difference between the copies of each shared interface node.
    pub fn trace_mismatch(&self) -> f64 {
        let g = &self.grid;
        let mut worst = 0.0f64;
        for c in 0..g.ncols() {
            for b in Branch::ALL {
                let s = Sheet::Branch(b);
                let (ps, pk) = match b.parent() {
                    None => (Sheet::Body, 0),
                    Some(p) => (Sheet::Branch(p), g.rows(Sheet::Branch(p)).len() - 1),
                };
                worst = worst.max((self.get(s, c, 0) - self.get(ps, c, pk)).abs());
            }
        }
        worst
    }

    /// Writes the binary block `JNCHOM01` (u32 version, u64 columns, then
    /// per sheet a u64 row count followed by little-endian f64 values) and a
    /// text manifest with the grids and a SHA-256 of the block.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"JNCHOM01");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(self.grid.ncols() as u64).to_le_bytes());
        for (s, v) in SHEETS.iter().zip(&self.values) {
            bytes.extend_from_slice(&(self.grid.rows(*s).len() as u64).to_le_bytes());
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, &bytes)?;
        let digest = Sha256::digest(&bytes);
        let mut m = String::new();
        m.push_str(&format!("file = {}\n", path.file_name().unwrap_or_default().to_string_lossy()));
        m.push_str(&format!("sha256 = {}\n", hex(&digest)));
        let g = &self.grid;
        m.push_str(&format!("x1 = [{}, {}] intervals {}\n", g.x1[0], g.x1[g.ncols() - 1], g.ncols() - 1));
        for s in SHEETS {
            let ys = g.rows(s);
            m.push_str(&format!("{} = [{}, {}] intervals {}\n", sheet_name(s), ys[0], ys[ys.len() - 1], ys.len() - 1));
        }
        std::fs::write(path.with_extension("manifest.txt"), m)
    }

    /// Reads a block written by [`MultiSheetedField::save`] for this grid.
    pub fn load(grid: Arc<HomGrid>, path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        if bytes.len() < 20 || &bytes[..8] != b"JNCHOM01" {
            return Err(bad("not a homogenized field block"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
        if u64_at(12) != grid.ncols() {
            return Err(bad("column count differs from grid"));
        }
        let mut o = 20;
        let mut values = Vec::new();
        for s in SHEETS {
            if o + 8 > bytes.len() || u64_at(o) != grid.rows(s).len() {
                return Err(bad("row count differs from grid"));
            }
            o += 8;
            let len = grid.rows(s).len() * grid.ncols();
            if o + 8 * len > bytes.len() {
                return Err(bad("truncated block"));
            }
            values.push(
                (0..len)
                    .map(|i| f64::from_le_bytes(bytes[o + 8 * i..o + 8 * i + 8].try_into().unwrap()))
                    .collect(),
            );
            o += 8 * len;
        }
        Ok(Self { grid, values })
    }

    /// CSV of interface traces: value and parent/children fluxes per column.
    pub fn export_interface_csv(&self, path: &Path) -> std::io::Result<()> {
        let rep = check_transmission(self);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "x1,interface,parent,value,parent_flux,children_flux,defect")?;
        for row in &rep.rows {
            writeln!(
                f,
                "{:.12e},{},{},{:.12e},{:.12e},{:.12e},{:.12e}",
                row.x1, row.interface, row.parent, row.value, row.parent_flux, row.children_flux, row.defect
            )?;
        }
        f.flush()
    }
}

/// Lowercase hexadecimal encoding of a digest.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Kirchhoff balance at one interface node.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionRow {
    pub x1: f64,
    pub interface: usize,
    pub parent: String,
    pub value: f64,
    pub parent_flux: f64,
    pub children_flux: f64,
    pub defect: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionReport {
    pub rows: Vec<TransmissionRow>,
    /// Largest |defect| at I₀, I₁, I₂.
    pub max_defect: [f64; 3],
}

/// Kirchhoff defects h_parent·∂v_parent − Σ h_child·∂v_child from
/// second-order one-sided differences, per interface and column.
pub fn check_transmission(field: &MultiSheetedField) -> TransmissionReport {
    let g = &field.grid;
    let p = &g.params;
    let mut rows = Vec::new();
    let mut max_defect = [0.0f64; 3];
    for c in 0..g.ncols() {
        let mut push = |interface: usize, parent: Sheet, pf: f64, children: &[Branch]| {
            let cf: f64 = children
                .iter()
                .map(|&b| p.width(b) * field.dx2_trace(Sheet::Branch(b), c, End::Top))
                .sum();
            let defect = pf - cf;
            max_defect[interface] = max_defect[interface].max(defect.abs());
            rows.push(TransmissionRow {
                x1: g.x1[c],
                interface,
                parent: sheet_name(parent),
                value: field.get(Sheet::Branch(children[0]), c, 0),
                parent_flux: pf,
                children_flux: cf,
                defect,
            });
        };
        push(0, Sheet::Body, field.dx2_trace(Sheet::Body, c, End::Bottom), &[Branch::new(0, 0)]);
        for parent in [Branch::new(0, 0), Branch::new(1, 0), Branch::new(1, 1)] {
            let s = Sheet::Branch(parent);
            let pf = p.width(parent) * field.dx2_trace(s, c, End::Bottom);
            push(parent.level + 1, s, pf, &parent.children().unwrap());
        }
    }
    TransmissionReport { rows, max_defect }
}
