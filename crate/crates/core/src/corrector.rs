//! Approximating function R_ε built from the homogenized solution and the
//! cell solutions, and the error norms it is compared with.
//!
//! Everything that depends only on the geometry (cell values, sawtooth
//! functions, cutoffs) is sampled once per mesh node. Per time level only
//! the homogenized sheets are interpolated to the ε-mesh and the interface
//! traces are formed.

use crate::cell_solver::{CellError, CellSet, CellSolution};
use crate::fem;
use crate::geometry::{derive_offsets, Branch, Region, StructuredMesh};
use crate::homogenized::{lagrange4, sheet_index, End, HomGrid, MultiSheetedField, SHEETS};
use crate::linalg::CscMatrix;
use crate::model::{delta1, perturbation_shape, ProblemData, Sheet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrectorError {
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid corrector configuration: {0}")]
    InvalidConfig(String),
}

/// Cutoff configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectorConfig {
    /// χ₀ = 1 on |x₂| ≤ τ₀/2 and 0 on |x₂| ≥ τ₀.
    pub tau0: f64,
}

impl CorrectorConfig {
    /// τ₀ = 0.4·min(l₁, l₂, l₃, d₀).
    pub fn default_for(p: &crate::geometry::GeometryParams) -> Self {
        Self {
            tau0: 0.4 * p.l1.min(p.l2).min(p.l3).min(p.d0),
        }
    }

    pub fn validate(&self, p: &crate::geometry::GeometryParams) -> Result<(), CorrectorError> {
        let lim = p.l1.min(p.l2).min(p.l3).min(p.d0) / 2.0;
        if !(self.tau0 > 0.0 && self.tau0 < lim) {
            return Err(CorrectorError::InvalidConfig(format!("tau0 = {} not in (0, {lim})", self.tau0)));
        }
        Ok(())
    }

    /// χ₀(x₂): quintic C² ramp between τ₀/2 and τ₀.
    pub fn chi(&self, x2: f64) -> f64 {
        let r = x2.abs();
        let half = self.tau0 / 2.0;
        if r <= half {
            1.0
        } else if r >= self.tau0 {
            0.0
        } else {
            let s = (r - half) / half;
            1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
        }
    }
}

/// Sawtooth Y(ξ₁) = −ξ₁ + b + [ξ₁].
pub fn sawtooth(b: f64, xi1: f64) -> f64 {
    -xi1 + b + xi1.floor()
}

// Interface traces per x₁ column.
const A0: usize = 0; // ∂x₁v⁺(x₁, 0)
const B0: usize = 1; // ∂x₂v⁺(x₁, 0)
const A1: usize = 2; // ∂x₁v⁽⁰⁾(x₁, −l₁)
const P1: usize = 3; // h₁ₘ∂x₂v⁽¹'ᵐ⁾/h₀ at −l₁, m = 0, 1
const A2: usize = 5; // ∂x₁v⁽¹'ᵐ⁾ at −l₁−l₂, m = 0, 1
const P2: usize = 7; // h₂ₖ∂x₂v⁽²'ᵏ⁾/h₁,parent at −l₁−l₂, k = 0..3
const TRACES: usize = 11;

/// Flux-form η products on the homogenized x₁ grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EtaProducts {
    /// h₁ₘ∂x₂v⁽¹'ᵐ⁾/h₀ at I₁ per column.
    pub level1: Vec<[f64; 2]>,
    /// h₂ₖ∂x₂v⁽²'ᵏ⁾/h₁,parent at I₂ per column.
    pub level2: Vec<[f64; 4]>,
    /// η₁ where |h₀∂x₂v⁽⁰⁾| exceeds the tolerance.
    pub eta1: Vec<Option<f64>>,
    /// η₂,ₘ for the two level-1 parents, same convention.
    pub eta2: Vec<[Option<f64>; 2]>,
}

/// Tolerance below which η is reported as undefined.
pub const TOL_ETA: f64 = 1e-10;

/// Computes the products η·∂x₂v that enter the corrector without dividing
/// by the interface flux.
pub fn eta_flux_products(field: &MultiSheetedField) -> EtaProducts {
    let g = &field.grid;
    let p = &g.params;
    let mut out = EtaProducts {
        level1: Vec::new(),
        level2: Vec::new(),
        eta1: Vec::new(),
        eta2: Vec::new(),
    };
    let top = |b: Branch, c| field.dx2_trace(Sheet::Branch(b), c, End::Top);
    for c in 0..g.ncols() {
        let l1 = [0, 1].map(|m| p.width(Branch::new(1, m)) * top(Branch::new(1, m), c) / p.h0);
        let l2 = [0, 1, 2, 3].map(|k| {
            let b = Branch::new(2, k);
            p.width(b) * top(b, c) / p.width(b.parent().unwrap())
        });
        let ratio = |num: f64, den: f64| (den.abs() > TOL_ETA).then(|| num / den);
        let d0 = p.h0 * field.dx2_trace(Sheet::Branch(Branch::new(0, 0)), c, End::Bottom);
        out.eta1.push(ratio(p.h0 * l1[0], d0));
        out.eta2.push([0, 1].map(|m| {
            let parent = Branch::new(1, m);
            let d = p.width(parent) * field.dx2_trace(Sheet::Branch(parent), c, End::Bottom);
            ratio(p.width(parent) * l2[2 * m], d)
        }));
        out.level1.push(l1);
        out.level2.push(l2);
    }
    out
}

/// One evaluation of R_ε at a node on behalf of one region.
#[derive(Clone, Copy, Debug)]
struct Occurrence {
    node: u32,
    sheet: u8,
    row: u32,
    col: u32,
    y: f64,
    terms: (u32, u32),
}

/// Precomputed sampling of R_ε on an ε-mesh.
pub struct Corrector {
    pub mesh: Arc<StructuredMesh>,
    pub grid: Arc<HomGrid>,
    pub config: CorrectorConfig,
    /// Distinct ε-mesh ordinates per sheet and their x₂ stencils.
    rows: Vec<Vec<(usize, [f64; 4])>>,
    /// x₁ stencil of every ε-mesh column.
    cols: Vec<(usize, [f64; 4])>,
    occ: Vec<Occurrence>,
    terms: Vec<(u8, f64)>,
}

/// R_ε at one time level.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectorSnapshot {
    pub values: Vec<f64>,
    /// Largest |R_above − R_below| over interface nodes.
    pub max_jump: f64,
    /// Plain sheet value v⁽ⁱ'ᵐ⁾(x) per node (Corollary reference).
    pub sheet_values: Vec<f64>,
}

fn x2_stencil(ys: &[f64], y: f64) -> (usize, [f64; 4]) {
    let n = ys.len();
    if y == ys[0] {
        (0, [1.0, 0.0, 0.0, 0.0])
    } else if y == ys[n - 1] {
        (n - 4, [0.0, 0.0, 0.0, 1.0])
    } else {
        lagrange4(ys, y)
    }
}

fn sheet_of(r: Region) -> Sheet {
    match r {
        Region::Body => Sheet::Body,
        Region::Rod { branch, .. } => Sheet::Branch(branch),
    }
}

impl Corrector {
    pub fn new(
        mesh: Arc<StructuredMesh>,
        grid: Arc<HomGrid>,
        cells: &CellSet,
        config: CorrectorConfig,
    ) -> Result<Self, CorrectorError> {
        let p = &mesh.layout.params;
        config.validate(p)?;
        if grid.params != *p && grid.params.with_n(p.n) != *p {
            return Err(CorrectorError::GridMismatch("homogenized grid geometry differs from the mesh".into()));
        }
        if cells.z01.mesh.xi1 != mesh.template.nodes {
            return Err(CorrectorError::GridMismatch("cell template differs from the mesh template".into()));
        }
        let eps = mesh.eps;
        let per = mesh.template.cells();
        let offsets = derive_offsets(p);

        // distinct ordinates per sheet
        let mut row_index: Vec<HashMap<u64, usize>> = vec![HashMap::new(); 8];
        let mut rows: Vec<Vec<(usize, [f64; 4])>> = vec![Vec::new(); 8];
        for reg in &mesh.regions {
            let s = sheet_of(reg.region);
            let si = sheet_index(s);
            for &y in &reg.rows {
                if let std::collections::hash_map::Entry::Vacant(e) = row_index[si].entry(y.to_bits()) {
                    e.insert(rows[si].len());
                    rows[si].push(x2_stencil(grid.rows(s), y));
                }
            }
        }
        let cols = mesh.x1.iter().map(|&x| x2_stencil(&grid.x1, x)).collect();

        let z = [&cells.branch[0], &cells.branch[1], &cells.branch[2]];
        let sample = |sol: &CellSolution, s: f64, xi2: f64| -> Result<f64, CorrectorError> { Ok(sol.sample(s, xi2)?.0) };

        let per_region: Vec<Result<(Vec<Occurrence>, Vec<(u8, f64)>), CorrectorError>> = mesh
            .regions
            .par_iter()
            .map(|reg| {
                let mut occ = Vec::new();
                let mut terms: Vec<(u8, f64)> = Vec::new();
                let sheet = sheet_of(reg.region);
                let si = sheet_index(sheet);
                for (r, &x2) in reg.rows.iter().enumerate() {
                    let row = row_index[si][&x2.to_bits()];
                    for cc in 0..reg.ncols() {
                        let gcol = reg.cols.0 + cc;
                        let j = match reg.region {
                            Region::Body => (gcol / per).min(p.n - 1),
                            Region::Rod { j, .. } => j,
                        };
                        let s = mesh.xi1_of_col(gcol, j);
                        let mut t: Vec<(u8, f64)> = Vec::new();
                        let mut push = |k: usize, v: f64| {
                            if v != 0.0 {
                                t.push((k as u8, v));
                            }
                        };
                        let chi = |i: usize| config.chi(x2 - p.interface_y(i));
                        let xi = |i: usize| (x2 - p.interface_y(i)) / eps;
                        let y = match reg.region {
                            Region::Body => {
                                let c0 = chi(0);
                                if c0 > 0.0 {
                                    let x = xi(0);
                                    push(A0, c0 * sample(&cells.z01, s, x)?);
                                    push(B0, c0 * (sample(&cells.z02, s, x)? - x));
                                }
                                0.0
                            }
                            Region::Rod { branch, .. } => {
                                let y = sawtooth(offsets.center(branch), s);
                                match branch.level {
                                    0 => {
                                        let c0 = chi(0);
                                        if c0 > 0.0 {
                                            let x = xi(0);
                                            push(A0, c0 * (sample(&cells.z01, s, x)? - y));
                                            push(B0, c0 * (sample(&cells.z02, s, x)? - x / p.h0));
                                        }
                                        let c1 = chi(1);
                                        if c1 > 0.0 {
                                            let x = xi(1);
                                            let (zz, x1, x2c) = z[0];
                                            push(A1, c1 * (sample(zz, s, x)? - y));
                                            push(P1, c1 * (sample(x1, s, x)? - x));
                                            push(P1 + 1, c1 * (sample(x2c, s, x)? - x));
                                        }
                                    }
                                    1 => {
                                        let m = branch.m;
                                        let c1 = chi(1);
                                        if c1 > 0.0 {
                                            let x = xi(1);
                                            let (zz, x1, x2c) = z[0];
                                            push(A1, c1 * (sample(zz, s, x)? - y));
                                            let d = |k: usize| {
                                                if k == m {
                                                    p.h0 / p.width(Branch::new(1, k)) * x
                                                } else {
                                                    0.0
                                                }
                                            };
                                            push(P1, c1 * (sample(x1, s, x)? - d(0)));
                                            push(P1 + 1, c1 * (sample(x2c, s, x)? - d(1)));
                                        }
                                        let c2 = chi(2);
                                        if c2 > 0.0 {
                                            let x = xi(2);
                                            let (zz, x1, x2c) = z[1 + m];
                                            push(A2 + m, c2 * (sample(zz, s, x)? - y));
                                            push(P2 + 2 * m, c2 * (sample(x1, s, x)? - x));
                                            push(P2 + 2 * m + 1, c2 * (sample(x2c, s, x)? - x));
                                        }
                                    }
                                    _ => {
                                        let parent = branch.parent().unwrap();
                                        let (m, q) = (parent.m, branch.m % 2);
                                        let c2 = chi(2);
                                        if c2 > 0.0 {
                                            let x = xi(2);
                                            let (zz, x1, x2c) = z[1 + m];
                                            push(A2 + m, c2 * (sample(zz, s, x)? - y));
                                            let d = |k: usize| {
                                                if k == q {
                                                    p.width(parent) / p.width(branch) * x
                                                } else {
                                                    0.0
                                                }
                                            };
                                            push(P2 + 2 * m, c2 * (sample(x1, s, x)? - d(0)));
                                            push(P2 + 2 * m + 1, c2 * (sample(x2c, s, x)? - d(1)));
                                        }
                                    }
                                }
                                y
                            }
                        };
                        occ.push(Occurrence {
                            node: reg.id(r, cc) as u32,
                            sheet: si as u8,
                            row: row as u32,
                            col: gcol as u32,
                            y,
                            terms: (terms.len() as u32, t.len() as u32),
                        });
                        terms.extend(t);
                    }
                }
                Ok((occ, terms))
            })
            .collect();
        let mut occ = Vec::new();
        let mut terms = Vec::new();
        for res in per_region {
            let (o, t) = res?;
            let shift = terms.len() as u32;
            occ.extend(o.into_iter().map(|mut x| {
                x.terms.0 += shift;
                x
            }));
            terms.extend(t);
        }
        Ok(Self {
            mesh,
            grid,
            config,
            rows,
            cols,
            occ,
            terms,
        })
    }

    /// Interpolates node data `f(c, k)` of a sheet to every (ε-row, ε-column).
    fn sheet_grid<F: Fn(usize, usize) -> f64>(&self, s: Sheet, f: F) -> Vec<f64> {
        let si = sheet_index(s);
        let nxh = self.grid.ncols();
        let ncol = self.cols.len();
        let mut out = vec![0.0; self.rows[si].len() * ncol];
        let mut tmp = vec![0.0; nxh];
        for (r, &(k0, wk)) in self.rows[si].iter().enumerate() {
            for (c, t) in tmp.iter_mut().enumerate() {
                *t = (0..4).map(|j| wk[j] * f(c, k0 + j)).sum();
            }
            for (g, &(c0, wc)) in self.cols.iter().enumerate() {
                out[r * ncol + g] = (0..4).map(|i| wc[i] * tmp[c0 + i]).sum();
            }
        }
        out
    }

    fn traces(&self, field: &MultiSheetedField) -> Vec<[f64; TRACES]> {
        let g = &self.grid;
        let p = &g.params;
        let eta = eta_flux_products(field);
        let body_bottom = 0;
        let d0_bottom = g.rows(Sheet::Branch(Branch::new(0, 0))).len() - 1;
        let d1_bottom = g.rows(Sheet::Branch(Branch::new(1, 0))).len() - 1;
        let per_col: Vec<[f64; TRACES]> = (0..g.ncols())
            .map(|c| {
                let mut t = [0.0; TRACES];
                t[A0] = field.dx1_node(Sheet::Body, c, body_bottom);
                t[B0] = field.dx2_trace(Sheet::Body, c, End::Bottom);
                t[A1] = field.dx1_node(Sheet::Branch(Branch::new(0, 0)), c, d0_bottom);
                t[P1..P1 + 2].copy_from_slice(&eta.level1[c]);
                for m in 0..2 {
                    t[A2 + m] = field.dx1_node(Sheet::Branch(Branch::new(1, m)), c, d1_bottom);
                }
                t[P2..P2 + 4].copy_from_slice(&eta.level2[c]);
                t
            })
            .collect();
        let _ = p;
        self.cols
            .iter()
            .map(|&(c0, wc)| {
                let mut t = [0.0; TRACES];
                for (k, v) in t.iter_mut().enumerate() {
                    *v = (0..4).map(|i| wc[i] * per_col[c0 + i][k]).sum();
                }
                t
            })
            .collect()
    }

    /// R_ε at one time level from the homogenized field.
    pub fn evaluate(&self, field: &MultiSheetedField) -> Result<CorrectorSnapshot, CorrectorError> {
        if !Arc::ptr_eq(&field.grid, &self.grid) && *field.grid != *self.grid {
            return Err(CorrectorError::GridMismatch("field lives on another homogenized grid".into()));
        }
        let eps = self.mesh.eps;
        let ncol = self.cols.len();
        let grids: Vec<(Vec<f64>, Vec<f64>)> = SHEETS
            .par_iter()
            .map(|&s| {
                let v = self.sheet_grid(s, |c, k| field.get(s, c, k));
                let d = if s == Sheet::Body {
                    Vec::new()
                } else {
                    self.sheet_grid(s, |c, k| field.dx1_node(s, c, k))
                };
                (v, d)
            })
            .collect();
        let traces = self.traces(field);
        let vals: Vec<(f64, f64)> = self
            .occ
            .par_iter()
            .map(|o| {
                let (v, d) = &grids[o.sheet as usize];
                let at = o.row as usize * ncol + o.col as usize;
                let base = v[at];
                let mut corr = if d.is_empty() { 0.0 } else { o.y * d[at] };
                let tr = &traces[o.col as usize];
                for &(k, coef) in &self.terms[o.terms.0 as usize..(o.terms.0 + o.terms.1) as usize] {
                    corr += coef * tr[k as usize];
                }
                (base + eps * corr, base)
            })
            .collect();
        let n = self.mesh.num_nodes();
        let mut values = vec![f64::NAN; n];
        let mut sheet_values = vec![f64::NAN; n];
        let mut max_jump = 0.0f64;
        for (o, &(r, base)) in self.occ.iter().zip(&vals) {
            let a = o.node as usize;
            if values[a].is_nan() {
                values[a] = r;
                sheet_values[a] = base;
            } else {
                max_jump = max_jump.max((values[a] - r).abs());
            }
        }
        Ok(CorrectorSnapshot {
            values,
            max_jump,
            sheet_values,
        })
    }

    /// Occurrences per node; interface nodes are evaluated by two regions.
    pub fn interface_node_count(&self) -> usize {
        let mut seen = vec![0u8; self.mesh.num_nodes()];
        for o in &self.occ {
            seen[o.node as usize] = seen[o.node as usize].saturating_add(1);
        }
        seen.iter().filter(|&&c| c > 1).count()
    }
}

/// Matrices of the error norms on an ε-mesh: full mass and stiffness plus
/// body-only and rod-only masses for the Corollary components.
pub struct ErrorNorms {
    pub mass: CscMatrix,
    pub stiffness: CscMatrix,
    pub body: CscMatrix,
    pub rods: CscMatrix,
}

impl ErrorNorms {
    pub fn new(mesh: &StructuredMesh) -> Self {
        let n = mesh.num_nodes();
        let part = |keep: &dyn Fn(bool) -> bool, local: fn(f64, f64) -> fem::Local| {
            fem::assemble(
                n,
                mesh.cells
                    .iter()
                    .filter(|c| keep(mesh.regions[c.region].region == Region::Body))
                    .map(|c| (c.nodes, local(c.x1.1 - c.x1.0, c.x2.1 - c.x2.0))),
            )
        };
        Self {
            mass: part(&|_| true, fem::mass),
            stiffness: part(&|_| true, fem::stiffness),
            body: part(&|b| b, fem::mass),
            rods: part(&|b| !b, fem::mass),
        }
    }
}

/// Running error norms of R_ε − v_ε over a trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorAccumulator {
    pub max_l2: f64,
    h1_integral: f64,
    last: Option<(f64, f64)>,
    pub max_jump: f64,
    /// ‖v_ε − v⁺‖_{L²(Ω₀)} and the rod sum at the last time level seen.
    pub corollary: (f64, f64),
}

impl ErrorAccumulator {
    /// Adds one time level; the H¹ part is integrated by the trapezoid rule.
    pub fn add(
        &mut self,
        norms: &ErrorNorms,
        t: f64,
        u: &[f64],
        snap: &CorrectorSnapshot,
    ) -> Result<(), CorrectorError> {
        if u.len() != snap.values.len() {
            return Err(CorrectorError::ShapeMismatch {
                expected: snap.values.len(),
                got: u.len(),
            });
        }
        let e: Vec<f64> = snap.values.iter().zip(u).map(|(r, v)| r - v).collect();
        let l2 = norms.mass.quad_form(&e);
        let h1 = l2 + norms.stiffness.quad_form(&e);
        self.max_l2 = self.max_l2.max(l2.sqrt());
        if let Some((t0, h0)) = self.last {
            self.h1_integral += 0.5 * (t - t0) * (h0 + h1);
        }
        self.last = Some((t, h1));
        self.max_jump = self.max_jump.max(snap.max_jump);
        let c: Vec<f64> = snap.sheet_values.iter().zip(u).map(|(r, v)| v - r).collect();
        self.corollary = (norms.body.quad_form(&c).max(0.0).sqrt(), norms.rods.quad_form(&c).max(0.0).sqrt());
        Ok(())
    }

    pub fn l2_h1(&self) -> f64 {
        self.h1_integral.sqrt()
    }
}

/// Right-hand side terms of the error bound for a given ε.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub eps_term: f64,
    pub alpha_term: f64,
    pub beta_term: f64,
    pub g_term: f64,
}

impl BoundTerms {
    /// ε^{1−ρ}, Σ ε^{α_i−1+δ_{α_i,1}}, Σ (1−δ_{β_i,1})ε^{β_i−1} and
    /// Σ δ_{β_i,1}·max_t ‖g_ε − g₀‖_{L²(G⁽ⁱ⁾_ε)}.
    pub fn new(data: &ProblemData, p: &crate::geometry::GeometryParams, rho: f64) -> Self {
        let eps = p.eps();
        let alpha_term = data.alpha.iter().map(|&a| eps.powf(a - 1.0 + delta1(a))).sum();
        let beta_term = data.beta.iter().map(|&b| (1.0 - delta1(b)) * eps.powf(b - 1.0)).sum();
        let mut g_term = 0.0;
        if data.g_perturbation != 0.0 {
            // max_t |perturbation_time| = |amplitude|·(1 − e^{−5T})
            let amp = data.perturbation_time(data.t_final).abs();
            for i in 0..3 {
                if delta1(data.beta[i]) == 0.0 {
                    continue;
                }
                let (lo, hi) = (p.interface_y(i + 1), p.interface_y(i));
                let n = 2000;
                let int: f64 = (0..n)
                    .map(|k| perturbation_shape(lo + (k as f64 + 0.5) / n as f64 * (hi - lo)).powi(2))
                    .sum::<f64>()
                    * (hi - lo)
                    / n as f64;
                let width: f64 = (0..Branch::count_at(i)).map(|m| p.width(Branch::new(i, m))).sum();
                g_term += eps * amp * (width * p.a * int).sqrt();
            }
        }
        Self {
            eps_term: eps.powf(1.0 - rho),
            alpha_term,
            beta_term,
            g_term,
        }
    }
}

/// One row of the error report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub eps: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub max_l2: f64,
    pub l2h1: f64,
    pub corollary_l2_body: f64,
    pub corollary_l2_rods: f64,
    pub bound: BoundTerms,
}

impl ErrorRecord {
    pub const CSV_HEADER: &'static str = "eps,N,max_L2,L2H1,corollary_L2_body,corollary_L2_rods,bound_eps_term,bound_alpha_term,bound_beta_term,bound_g_term";

    pub fn total(&self) -> f64 {
        self.max_l2 + self.l2h1
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.17e},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.eps,
            self.n,
            self.max_l2,
            self.l2h1,
            self.corollary_l2_body,
            self.corollary_l2_rods,
            self.bound.eps_term,
            self.bound.alpha_term,
            self.bound.beta_term,
            self.bound.g_term
        )
    }
}

/// Least-squares slope of log y against log x with its standard error.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let se = if lx.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    (slope, se)
}

/// Best single constant C for y ≈ C·g (least squares) and the relative
/// residual ‖y − Cg‖/‖y‖.
pub fn single_constant_fit(y: &[f64], g: &[f64]) -> (f64, f64) {
    let c = y.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / g.iter().map(|b| b * b).sum::<f64>();
    let res = y.iter().zip(g).map(|(a, b)| (a - c * b).powi(2)).sum::<f64>().sqrt();
    let norm = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    (c, res / norm)
}
