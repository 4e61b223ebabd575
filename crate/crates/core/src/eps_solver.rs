//! Semilinear parabolic problem on Ω_ε: Q1 finite elements, lumped
//! nonlinear reaction and Robin terms, implicit Euler in time and Newton.

use crate::fem::{self, GAUSS2, GAUSS3};
use crate::geometry::{EdgeTag, Region, StructuredMesh};
use crate::linalg::{CscMatrix, SpdSolver};
use crate::model::{perturbation_shape, Nonlinearity, ProblemData, Sheet};
pub use crate::newton::{JacobianPolicy, NewtonSettings, SolverError, StepDiagnostics};
use crate::newton::{newton, Linearization};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

/// Uniform or explicit time grid t₀ = 0 < … < t_K = T.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(t_final: f64, steps: usize) -> Self {
        Self {
            times: (0..=steps).map(|k| t_final * k as f64 / steps as f64).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self, n: usize) -> f64 {
        self.times[n] - self.times[n - 1]
    }
}

/// Assembled ε-problem.
pub struct DiscreteEpsSystem {
    pub mesh: Arc<StructuredMesh>,
    pub data: ProblemData,
    pub stiffness: CscMatrix,
    pub mass: CscMatrix,
    /// Row sums of the mass matrix.
    pub lumped: Vec<f64>,
    /// (node, nonlinearity slot, weight): slot 0 is k, slot 1 + i is k_i.
    reaction: Vec<(usize, usize, f64)>,
    /// (node, level, ε^{α_i}·lumped wall length).
    robin: Vec<(usize, usize, f64)>,
    load_f0: Vec<f64>,
    load_g0: Vec<f64>,
    load_pert: Vec<f64>,
    /// ‖shape(f₀)‖ in L²(Ω₀).
    f0_shape_norm: f64,
    /// Per level ε^{β_i}‖shape(g₀)‖ and ε^{β_i}·ε‖w‖ on Υ⁽ⁱ⁾.
    g_norms: [(f64, f64); 3],
}

fn sheet_of(region: Region) -> Sheet {
    match region {
        Region::Body => Sheet::Body,
        Region::Rod { branch, .. } => Sheet::Branch(branch),
    }
}

/// Builds matrices, lumped weights and the separable load vectors.
pub fn assemble(mesh: Arc<StructuredMesh>, data: &ProblemData) -> Result<DiscreteEpsSystem, SolverError> {
    mesh.check_tags().map_err(|e| SolverError::Mesh(e.to_string()))?;
    let n = mesh.num_nodes();
    let p = &mesh.layout.params;
    let eps = mesh.eps;
    let stiffness = fem::assemble(
        n,
        mesh.cells.iter().map(|c| (c.nodes, fem::stiffness(c.x1.1 - c.x1.0, c.x2.1 - c.x2.0))),
    );
    let mass = fem::assemble(
        n,
        mesh.cells.iter().map(|c| (c.nodes, fem::mass(c.x1.1 - c.x1.0, c.x2.1 - c.x2.0))),
    );
    let lumped: Vec<f64> = {
        let mut l = vec![0.0; n];
        for c in &mesh.cells {
            let q = c.area() / 4.0;
            for &a in &c.nodes {
                l[a] += q;
            }
        }
        l
    };

    let mut reaction = Vec::with_capacity(4 * mesh.cells.len());
    let mut load_f0 = vec![0.0; n];
    let mut f0_sq = 0.0;
    for c in &mesh.cells {
        let region = mesh.regions[c.region].region;
        let slot = match region {
            Region::Body => 0,
            Region::Rod { branch, .. } => 1 + branch.level,
        };
        let q = c.area() / 4.0;
        for &a in &c.nodes {
            reaction.push((a, slot, q));
        }
        if region == Region::Body {
            let (hx, hy) = (c.x1.1 - c.x1.0, c.x2.1 - c.x2.0);
            for &s in &GAUSS2 {
                for &t in &GAUSS2 {
                    let f = data.f0.shape(c.x1.0 + s * hx, c.x2.0 + t * hy);
                    if f == 0.0 {
                        continue;
                    }
                    let w = 0.25 * hx * hy;
                    f0_sq += w * f * f;
                    let phi = fem::shape(s, t);
                    for k in 0..4 {
                        load_f0[c.nodes[k]] += w * f * phi[k];
                    }
                }
            }
        }
    }
    reaction = merge(reaction);

    let mut robin = Vec::new();
    let mut load_g0 = vec![0.0; n];
    let mut load_pert = vec![0.0; n];
    let mut g_sq = [(0.0, 0.0); 3];
    for e in &mesh.boundary {
        let EdgeTag::UpsilonLateral(b) = e.tag else {
            continue;
        };
        let i = b.level;
        let wa = eps.powf(data.alpha[i]) * e.length / 2.0;
        robin.push((e.nodes[0], i, wa));
        robin.push((e.nodes[1], i, wa));
        let eb = eps.powf(data.beta[i]);
        let (pa, pb) = (mesh.coords[e.nodes[0]], mesh.coords[e.nodes[1]]);
        for &s in &GAUSS2 {
            let x1 = pa[0];
            let x2 = pa[1] + s * (pb[1] - pa[1]);
            let w = e.length / 2.0;
            let g = data.g0.shape(i, p, x1, x2);
            let pw = eps * perturbation_shape(x2);
            g_sq[i].0 += w * g * g;
            g_sq[i].1 += w * pw * pw;
            load_g0[e.nodes[0]] += eb * w * g * (1.0 - s);
            load_g0[e.nodes[1]] += eb * w * g * s;
            load_pert[e.nodes[0]] += eb * w * pw * (1.0 - s);
            load_pert[e.nodes[1]] += eb * w * pw * s;
        }
    }
    robin = merge(robin);
    let g_norms = [0, 1, 2].map(|i| {
        let eb = eps.powf(data.beta[i]);
        (eb * g_sq[i].0.sqrt(), eb * g_sq[i].1.sqrt())
    });

    Ok(DiscreteEpsSystem {
        mesh,
        data: data.clone(),
        stiffness,
        mass,
        lumped,
        reaction,
        robin,
        load_f0,
        load_g0,
        load_pert,
        f0_shape_norm: f0_sq.sqrt(),
        g_norms,
    })
}

/// Sorts (node, slot, weight) triples and sums duplicates.
fn merge(mut v: Vec<(usize, usize, f64)>) -> Vec<(usize, usize, f64)> {
    v.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(v.len() / 3);
    for (a, s, w) in v {
        match out.last_mut() {
            Some(l) if l.0 == a && l.1 == s => l.2 += w,
            _ => out.push((a, s, w)),
        }
    }
    out
}

impl DiscreteEpsSystem {
    pub fn num_nodes(&self) -> usize {
        self.lumped.len()
    }

    fn slot(&self, s: usize) -> &Nonlinearity {
        if s == 0 {
            &self.data.k
        } else {
            &self.data.k_levels[s - 1]
        }
    }

    /// Diagonal Robin weights ε^{α_i}·∫φ_a over Υ⁽ⁱ⁾ as (node, weight).
    pub fn robin_weights(&self, level: usize) -> Vec<(usize, f64)> {
        self.robin
            .iter()
            .filter(|r| r.1 == level)
            .map(|r| (r.0, r.2))
            .collect()
    }

    /// Nonlinear part R(u) + B(u) added into `out`.
    fn add_nonlinear(&self, u: &[f64], out: &mut [f64]) {
        for &(a, s, w) in &self.reaction {
            out[a] += w * self.slot(s).eval(u[a]);
        }
        for &(a, i, w) in &self.robin {
            out[a] += w * self.data.kappa[i].eval(u[a]);
        }
    }

    /// Diagonal of the Jacobian of R + B.
    pub fn nonlinear_jacobian(&self, u: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; u.len()];
        for &(a, s, w) in &self.reaction {
            d[a] += w * self.slot(s).deriv(u[a]);
        }
        for &(a, i, w) in &self.robin {
            d[a] += w * self.data.kappa[i].deriv(u[a]);
        }
        d
    }

    /// Discrete operator A_ε u = S u + R(u) + B(u).
    pub fn apply_operator(&self, u: &[f64]) -> Vec<f64> {
        let mut out = self.stiffness.matvec(u);
        self.add_nonlinear(u, &mut out);
        out
    }

    /// Load vector F(t): f₀ plus ε^{β_i}g_ε on Υ⁽ⁱ⁾ plus any manufactured
    /// sources.
    pub fn load(&self, t: f64) -> Vec<f64> {
        let d = &self.data;
        let (a, b, c) = (d.f0.time_factor(t), d.g0.time_factor(t), d.perturbation_time(t));
        let mut f: Vec<f64> = (0..self.num_nodes())
            .map(|i| a * self.load_f0[i] + b * self.load_g0[i] + c * self.load_pert[i])
            .collect();
        if let Some(extra) = &d.extra {
            let mesh = &self.mesh;
            for cell in &mesh.cells {
                let sheet = sheet_of(mesh.regions[cell.region].region);
                let (hx, hy) = (cell.x1.1 - cell.x1.0, cell.x2.1 - cell.x2.0);
                let (gx, gw) = GAUSS3;
                for (qs, &s) in gx.iter().enumerate() {
                    for (qt, &tt) in gx.iter().enumerate() {
                        let w = gw[qs] * gw[qt] * hx * hy;
                        let v = (extra.volume)(sheet, cell.x1.0 + s * hx, cell.x2.0 + tt * hy, t);
                        let phi = fem::shape(s, tt);
                        for k in 0..4 {
                            f[cell.nodes[k]] += w * v * phi[k];
                        }
                    }
                }
            }
            if let Some(bf) = &extra.boundary {
                for e in &mesh.boundary {
                    let (pa, pb) = (mesh.coords[e.nodes[0]], mesh.coords[e.nodes[1]]);
                    let (gx, gw) = GAUSS3;
                    for (q, &s) in gx.iter().enumerate() {
                        let x1 = pa[0] + s * (pb[0] - pa[0]);
                        let x2 = pa[1] + s * (pb[1] - pa[1]);
                        let v = bf(e.tag, e.normal, x1, x2, t) * gw[q] * e.length;
                        f[e.nodes[0]] += v * (1.0 - s);
                        f[e.nodes[1]] += v * s;
                    }
                }
            }
        }
        f
    }

    /// Implicit Euler residual M(u − u_prev)/dt + A_ε u − F(t).
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

    /// Residual of the same time step recomputed cell by cell with
    /// quadrature, independent of the assembled matrices.
    pub fn residual_by_cells(&self, u: &[f64], u_prev: &[f64], dt: f64, t: f64) -> Vec<f64> {
        let mesh = &self.mesh;
        let mut r = vec![0.0; u.len()];
        for c in &mesh.cells {
            let (hx, hy) = (c.x1.1 - c.x1.0, c.x2.1 - c.x2.0);
            for &s in &GAUSS2 {
                for &tt in &GAUSS2 {
                    let w = 0.25 * hx * hy;
                    let phi = fem::shape(s, tt);
                    let g = fem::shape_grad(s, tt, hx, hy);
                    let mut ut = 0.0;
                    let mut gu = [0.0, 0.0];
                    for k in 0..4 {
                        let a = c.nodes[k];
                        ut += phi[k] * (u[a] - u_prev[a]) / dt;
                        gu[0] += g[k][0] * u[a];
                        gu[1] += g[k][1] * u[a];
                    }
                    for k in 0..4 {
                        r[c.nodes[k]] += w * (ut * phi[k] + gu[0] * g[k][0] + gu[1] * g[k][1]);
                    }
                }
            }
            let f = match mesh.regions[c.region].region {
                Region::Body => &self.data.k,
                Region::Rod { branch, .. } => &self.data.k_levels[branch.level],
            };
            for &a in &c.nodes {
                r[a] += c.area() / 4.0 * f.eval(u[a]);
            }
        }
        for e in &mesh.boundary {
            if let EdgeTag::UpsilonLateral(b) = e.tag {
                let w = self.mesh.eps.powf(self.data.alpha[b.level]) * e.length / 2.0;
                for &a in &e.nodes {
                    r[a] += w * self.data.kappa[b.level].eval(u[a]);
                }
            }
        }
        let f = self.load(t);
        for i in 0..r.len() {
            r[i] -= f[i];
        }
        r
    }

    /// Pairing (A u − A w)·(u − w) and its bound c₁(u − w)ᵀM(u − w).
    pub fn monotonicity_probe(&self, u: &[f64], w: &[f64]) -> (f64, f64) {
        let au = self.apply_operator(u);
        let aw = self.apply_operator(w);
        let d: Vec<f64> = u.iter().zip(w).map(|(a, b)| a - b).collect();
        let pairing: f64 = au.iter().zip(&aw).zip(&d).map(|((a, b), c)| (a - b) * c).sum();
        let c1 = self.data.k.c1.min(self.data.k_levels.iter().map(|f| f.c1).fold(f64::INFINITY, f64::min));
        (pairing, c1 * self.mass.quad_form(&d))
    }

    /// A-priori bound on ‖uⁿ‖_{L²} for each time level, from the energy
    /// inequality of the implicit Euler scheme. `None` when manufactured
    /// sources are present.
    pub fn energy_bound(&self, grid: &TimeGrid) -> Option<Vec<f64>> {
        if self.data.extra.is_some() {
            return None;
        }
        let d = &self.data;
        let c1r = d.k.c1.min(d.k_levels.iter().map(|f| f.c1).fold(f64::INFINITY, f64::min));
        let k0: f64 = self
            .reaction
            .iter()
            .map(|&(_, s, w)| w * self.slot(s).at_zero().powi(2))
            .sum::<f64>()
            .sqrt();
        let mut kk = [0.0f64; 3];
        for &(_, i, w) in &self.robin {
            kk[i] += w * d.kappa[i].at_zero().powi(2);
        }
        let eps = self.mesh.eps;
        let (c, extra_b) = if k0 > 0.0 {
            (c1r / 2.0, k0 * k0 / (2.0 * c1r))
        } else {
            (c1r, 0.0)
        };
        let mut out = vec![0.0];
        let mut a = 0.0f64;
        for n in 1..grid.times.len() {
            let t = grid.times[n];
            let dt = grid.dt(n);
            let phi = d.f0.time_factor(t).abs() * self.f0_shape_norm;
            let mut b = extra_b;
            for i in 0..3 {
                let g = d.g0.time_factor(t).abs() * self.g_norms[i].0
                    + d.perturbation_time(t).abs() * self.g_norms[i].1;
                let coef = kk[i].sqrt() + eps.powf(-d.alpha[i] / 2.0) * g;
                b += coef * coef / (4.0 * d.kappa[i].c1);
            }
            let p = a + dt * phi;
            let q = 1.0 + c * dt;
            a = (p + (p * p + 4.0 * q * dt * b).sqrt()) / (2.0 * q);
            out.push(a);
        }
        Some(out)
    }
}

/// Time trajectory of the ε-problem.
#[derive(Clone, Debug)]
pub struct EpsTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

struct EpsLinearization<'a> {
    sys: &'a DiscreteEpsSystem,
    base: &'a CscMatrix,
    diag_pos: &'a [usize],
    spd: &'a mut SpdSolver,
    ready: &'a mut bool,
}

impl Linearization for EpsLinearization<'_> {
    fn refactor(&mut self, u: &[f64]) -> Result<(), SolverError> {
        let mut j = self.base.clone();
        let d = self.sys.nonlinear_jacobian(u);
        for (i, &p) in self.diag_pos.iter().enumerate() {
            j.values_mut()[p] += d[i];
        }
        self.spd.factor(&j)?;
        *self.ready = true;
        Ok(())
    }

    fn ready(&self) -> bool {
        *self.ready
    }

    fn solve(&self, r: &[f64]) -> Result<Vec<f64>, SolverError> {
        Ok(self.spd.solve(r)?)
    }
}

/// Time stepper owning the factorization state.
pub struct EpsSolver {
    pub system: DiscreteEpsSystem,
    pub settings: NewtonSettings,
    spd: SpdSolver,
    diag_pos: Vec<usize>,
    base: Option<(f64, CscMatrix)>,
    ready: bool,
}

impl EpsSolver {
    pub fn new(system: DiscreteEpsSystem, settings: NewtonSettings) -> Result<Self, SolverError> {
        let pattern = system.mass.axpby(1.0, &system.stiffness, 1.0);
        let spd = SpdSolver::analyze(&pattern)?;
        let diag_pos = pattern.diagonal_positions();
        Ok(Self {
            system,
            settings,
            spd,
            diag_pos,
            base: None,
            ready: false,
        })
    }

    /// One implicit Euler step from `u_prev` to time `t_next`.
    pub fn step(&mut self, u_prev: &[f64], dt: f64, t_next: f64) -> Result<(Vec<f64>, StepDiagnostics), SolverError> {
        if u_prev.len() != self.system.num_nodes() {
            return Err(SolverError::ShapeMismatch {
                expected: self.system.num_nodes(),
                got: u_prev.len(),
            });
        }
        if self.base.as_ref().map_or(true, |(d, _)| *d != dt) {
            let base = self.system.mass.axpby(1.0 / dt, &self.system.stiffness, 1.0);
            self.base = Some((dt, base));
            self.ready = false;
        }
        let load = self.system.load(t_next);
        let sys = &self.system;
        let mut lin = EpsLinearization {
            sys,
            base: &self.base.as_ref().unwrap().1,
            diag_pos: &self.diag_pos,
            spd: &mut self.spd,
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

    /// Steps through the grid from zero initial data, handing each new
    /// state to `observer`.
    pub fn solve_with<F>(&mut self, grid: &TimeGrid, mut observer: F) -> Result<Vec<StepDiagnostics>, SolverError>
    where
        F: FnMut(usize, f64, &[f64]) -> Result<(), SolverError>,
    {
        let mut u = vec![0.0; self.system.num_nodes()];
        observer(0, grid.times[0], &u)?;
        let mut diags = vec![StepDiagnostics::default()];
        for n in 1..grid.times.len() {
            let (next, d) = self
                .step(&u, grid.dt(n), grid.times[n])
                .map_err(|e| SolverError::Step {
                    step: n,
                    source: Box::new(e),
                })?;
            u = next;
            observer(n, grid.times[n], &u)?;
            diags.push(d);
        }
        Ok(diags)
    }

    pub fn solve(&mut self, grid: &TimeGrid) -> Result<EpsTrajectory, SolverError> {
        let mut states = Vec::with_capacity(grid.times.len());
        let diagnostics = self.solve_with(grid, |_, _, u| {
            states.push(u.to_vec());
            Ok(())
        })?;
        Ok(EpsTrajectory {
            times: grid.times.clone(),
            states,
            diagnostics,
        })
    }
}

/// |ψ·(residual of step n)| for n = 1..K, recomputed cell by cell.
pub fn weak_residual(sys: &DiscreteEpsSystem, traj: &EpsTrajectory, probe: &[f64]) -> Result<Vec<f64>, SolverError> {
    if probe.len() != sys.num_nodes() {
        return Err(SolverError::ShapeMismatch {
            expected: sys.num_nodes(),
            got: probe.len(),
        });
    }
    Ok((1..traj.states.len())
        .map(|n| {
            let dt = traj.times[n] - traj.times[n - 1];
            let r = sys.residual_by_cells(&traj.states[n], &traj.states[n - 1], dt, traj.times[n]);
            r.iter().zip(probe).map(|(a, b)| a * b).sum::<f64>().abs()
        })
        .collect())
}

/// Both sides of the rod identity
/// (εh/2)∫_Υ φ dx₂ = ∫_G φ dx − ε∫_G Y(x₁/ε)∂x₁φ dx
/// for the rod in mesh region `region`. The wall integral uses φ itself,
/// the rod integrals use its Q1 interpolant, so the sides differ by the
/// interpolation error O(Δx²).
pub fn integral_identity_sides<F>(mesh: &StructuredMesh, region: usize, phi: F) -> (f64, f64)
where
    F: Fn(f64, f64) -> f64,
{
    let g = &mesh.regions[region];
    let Region::Rod { branch, j } = g.region else {
        panic!("region {region} is not a rod");
    };
    let eps = mesh.eps;
    let h = mesh.layout.params.width(branch);
    let b = mesh.layout.offsets.center(branch);
    let (x_lo, x_hi) = (mesh.x1[g.cols.0], mesh.x1[g.cols.1]);
    let mut wall = 0.0;
    for r in 0..g.rows.len() - 1 {
        let (y0, y1) = (g.rows[r + 1], g.rows[r]);
        for &s in &GAUSS2 {
            let y = y0 + s * (y1 - y0);
            wall += 0.5 * (y1 - y0) * (phi(x_lo, y) + phi(x_hi, y));
        }
    }
    let lhs = eps * h / 2.0 * wall;
    let mut rhs = 0.0;
    let (gx, gw) = GAUSS3;
    for r in 0..g.rows.len() - 1 {
        for c in 0..g.ncols() - 1 {
            let (xa, xb) = (mesh.x1[g.cols.0 + c], mesh.x1[g.cols.0 + c + 1]);
            let (ya, yb) = (g.rows[r + 1], g.rows[r]);
            let (hx, hy) = (xb - xa, yb - ya);
            let vals = [phi(xa, ya), phi(xb, ya), phi(xb, yb), phi(xa, yb)];
            for (qs, &s) in gx.iter().enumerate() {
                for (qt, &t) in gx.iter().enumerate() {
                    let w = gw[qs] * gw[qt] * hx * hy;
                    let sh = fem::shape(s, t);
                    let gr = fem::shape_grad(s, t, hx, hy);
                    let v: f64 = (0..4).map(|k| sh[k] * vals[k]).sum();
                    let dx: f64 = (0..4).map(|k| gr[k][0] * vals[k]).sum();
                    let xi1 = (xa + s * hx) / eps;
                    let y = -xi1 + b + j as f64;
                    rhs += w * (v - eps * y * dx);
                }
            }
        }
    }
    (lhs, rhs)
}

/// Binary trajectory checkpoint: magic `JNCTRAJ1`, u32 version, u64 node
/// count, u64 number of time levels, then little-endian f64 states in
/// row-major order (one row per time level).
pub fn write_checkpoint(path: &Path, traj: &EpsTrajectory) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"JNCTRAJ1")?;
    f.write_all(&1u32.to_le_bytes())?;
    let nodes = traj.states.first().map_or(0, Vec::len) as u64;
    f.write_all(&nodes.to_le_bytes())?;
    f.write_all(&(traj.states.len() as u64).to_le_bytes())?;
    for s in &traj.states {
        for v in s {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()
}

pub fn read_checkpoint(path: &Path) -> std::io::Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    if bytes.len() < 28 || &bytes[..8] != b"JNCTRAJ1" {
        return Err(bad("not a trajectory checkpoint"));
    }
    let nodes = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let levels = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    if bytes.len() != 28 + 8 * nodes * levels {
        return Err(bad("truncated checkpoint"));
    }
    Ok((0..levels)
        .map(|k| {
            (0..nodes)
                .map(|i| {
                    let o = 28 + 8 * (k * nodes + i);
                    f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_layout, GeometryParams, MeshResolution, VerticalPolicy};
    use crate::model::{make_zero_case, Nonlinearity};

    fn mesh(n: usize, cells: usize, step: f64) -> Arc<StructuredMesh> {
        let p = GeometryParams {
            a: 1.0,
            n,
            l1: 0.3,
            l2: 0.3,
            l3: 0.3,
            h0: 0.6,
            h11: 0.28,
            h12: 0.28,
            h21: 0.12,
            h22: 0.12,
            h23: 0.12,
            h24: 0.12,
            d0: 0.5,
        };
        let layout = build_layout(&p.validate().unwrap());
        Arc::new(
            StructuredMesh::build(
                &layout,
                &MeshResolution {
                    cells_across: cells,
                    vertical: VerticalPolicy::Uniform { step },
                },
            )
            .unwrap(),
        )
    }

    #[test]
    fn stiffness_annihilates_constants_and_mass_sums_to_area() {
        let m = mesh(4, 2, 0.1);
        let sys = assemble(m.clone(), &ProblemData::default_case()).unwrap();
        let ones = vec![1.0; m.num_nodes()];
        let s1 = sys.stiffness.matvec(&ones);
        assert!(s1.iter().all(|v| v.abs() < 1e-10));
        let area = m.layout.area();
        assert!((sys.mass.total() - area).abs() < 1e-10 * area);
    }

    #[test]
    fn robin_weights_live_on_walls_and_scale_with_alpha() {
        let data = ProblemData::default_case();
        let norm = |n: usize| {
            let sys = assemble(mesh(n, 2, 0.1), &data).unwrap();
            let w = sys.robin_weights(1);
            for &(a, _) in &w {
                let x = sys.mesh.coords[a][0];
                let on_wall = sys.mesh.regions.iter().any(|g| {
                    matches!(g.region, Region::Rod { branch, .. } if branch.level == 1)
                        && (sys.mesh.x1[g.cols.0] == x || sys.mesh.x1[g.cols.1] == x)
                });
                assert!(on_wall);
            }
            let total: f64 = w.iter().map(|x| x.1).sum();
            total
        };
        // total weight ε^α·|Υ| with |Υ| = 2Nl growing like 1/ε
        let (a, b) = (norm(8), norm(16));
        let expected = 2f64.powf(data.alpha[1] - 1.0);
        assert!((a / b - expected).abs() < 1e-10, "ratio {}", a / b);
    }

    #[test]
    fn zero_case_stays_zero() {
        let m = mesh(2, 2, 0.1);
        let sys = assemble(m, &make_zero_case()).unwrap();
        let mut solver = EpsSolver::new(sys, NewtonSettings::default()).unwrap();
        let traj = solver.solve(&TimeGrid::uniform(0.1, 3)).unwrap();
        assert!(traj.states.iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(traj.diagnostics[1..].iter().all(|d| d.iterations == 1));
    }

    #[test]
    fn linear_case_takes_one_newton_iteration() {
        let mut data = ProblemData::default_case();
        data.k = Nonlinearity::affine(1.0, 0.0);
        data.k_levels = [data.k; 3];
        data.kappa = [data.k; 3];
        let sys = assemble(mesh(2, 2, 0.1), &data).unwrap();
        let mut solver = EpsSolver::new(sys, NewtonSettings::default()).unwrap();
        let traj = solver.solve(&TimeGrid::uniform(0.1, 3)).unwrap();
        assert!(traj.diagnostics[1..].iter().all(|d| d.iterations == 1));
        // global balance: probe 1 equals the residual sum
        let ones = vec![1.0; solver.system.num_nodes()];
        let r = weak_residual(&solver.system, &traj, &ones).unwrap();
        assert!(r.iter().all(|&v| v < 1e-9), "{r:?}");
    }

    #[test]
    fn cellwise_residual_matches_assembled_residual() {
        let data = ProblemData::default_case();
        let sys = assemble(mesh(4, 2, 0.1), &data).unwrap();
        let n = sys.num_nodes();
        let u: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let up: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let a = sys.residual(&u, &up, 0.01, &sys.load(0.2));
        let b = sys.residual_by_cells(&u, &up, 0.01, 0.2);
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            assert!((a[i] - b[i]).abs() < 1e-11 * scale);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let traj = EpsTrajectory {
            times: vec![0.0, 1.0],
            states: vec![vec![0.0, 1.5], vec![2.0, -3.0]],
            diagnostics: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_checkpoint(&path, &traj).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), traj.states);
    }

    #[test]
    fn identity_defect_is_second_order() {
        let phi = |x: f64, y: f64| (3.0 * x + 1.0).sin() * (2.0 * y).cos() + x * x * y;
        let defect = |cells: usize| {
            let m = mesh(4, cells, 0.3 / cells as f64);
            let (l, r) = integral_identity_sides(&m, m.region_index(crate::geometry::Branch::new(1, 1), 2), phi);
            (l - r).abs()
        };
        let (d1, d2) = (defect(2), defect(4));
        assert!(d2 < d1 / 3.0, "{d1:e} {d2:e}");
    }
}
