//! Run configuration, the per-N pipeline, ε-sweeps with slope fits, plot
//! data and run manifests.

use crate::cell_solver::{CellError, CellSet};
use crate::corrector::{
    loglog_slope, single_constant_fit, BoundTerms, Corrector, CorrectorConfig, CorrectorError, ErrorAccumulator,
    ErrorNorms, ErrorRecord,
};
use crate::eps_solver::{self, EpsSolver, TimeGrid};
use crate::geometry::{build_layout, GeometryError, GeometryParams, Grading, MeshResolution, StructuredMesh, VerticalPolicy};
use crate::homogenized::{self, hex, HomGrid, HomResolution, HomSolver, LinearMode};
use crate::model::{make_zero_case, BodySource, Family, ModelError, Nonlinearity, ProblemData, WallSource};
use crate::newton::{JacobianPolicy, NewtonSettings, SolverError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("N = {n}: {source}")]
    Solver { n: usize, source: SolverError },
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Corrector(#[from] CorrectorError),
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// 2 for configuration problems, 3 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Geometry(_) | HarnessError::Model(_) | HarnessError::MalformedCsv(_) => 2,
            _ => 3,
        }
    }
}

/// Named data presets that the `[data]` section modifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Default,
    Zero,
}

/// Problem data as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub preset: Preset,
    pub alpha: Option<[f64; 3]>,
    pub beta: Option<[f64; 3]>,
    pub t_final: Option<f64>,
    pub g_perturbation: Option<f64>,
    pub f0: Option<BodySource>,
    pub g0: Option<WallSource>,
    /// One reaction law for the body, every level and every wall.
    pub reaction: Option<Family>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Default,
            alpha: None,
            beta: None,
            t_final: None,
            g_perturbation: None,
            f0: None,
            g0: None,
            reaction: None,
        }
    }
}

/// Matched vertical grading of the ε-mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    pub cells_across: usize,
    pub grading: Grading,
    pub band: f64,
    pub band_fraction: f64,
    pub bulk: f64,
    pub growth: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            cells_across: 3,
            grading: Grading {
                first: 0.04,
                ratio: 1.15,
                max_step: 0.25,
            },
            band: 4.0,
            band_fraction: 0.4,
            bulk: 0.05,
            growth: 1.3,
        }
    }
}

/// dt = min(dt_factor·ε², T/min_steps).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub dt_factor: f64,
    pub min_steps: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            dt_factor: 10.0,
            min_steps: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomConfig {
    /// Target step of the homogenized grids.
    pub h: f64,
    pub mode: LinearMode,
}

impl Default for HomConfig {
    fn default() -> Self {
        Self {
            h: 0.025,
            mode: LinearMode::TreeSchur,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellConfig {
    /// Truncation length L of every strip.
    pub length: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self { length: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ns: Vec<usize>,
    /// Reporting parameter of the ε^{1−ρ} bound.
    pub rho: f64,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ns: vec![8, 16, 32, 64],
            rho: 0.1,
            workers: 1,
        }
    }
}

/// Whole run configuration; every section has defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Geometry; its `N` is used by single runs.
    pub geometry: GeometryParams,
    pub data: DataConfig,
    pub mesh: MeshConfig,
    pub time: TimeConfig,
    pub hom: HomConfig,
    pub cells: CellConfig,
    pub newton: NewtonSettings,
    pub corrector: Option<CorrectorConfig>,
    pub sweep: SweepConfig,
    pub seed: u64,
}

/// Reference geometry of the sweeps.
pub fn reference_geometry(n: usize) -> GeometryParams {
    GeometryParams {
        a: 1.0,
        n,
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

impl Default for Config {
    fn default() -> Self {
        Self {
            geometry: reference_geometry(8),
            data: DataConfig::default(),
            mesh: MeshConfig::default(),
            time: TimeConfig::default(),
            hom: HomConfig::default(),
            cells: CellConfig::default(),
            newton: NewtonSettings {
                // the M/dt scaled residual stalls near 1e-10 once dt ~ ε² is small
                tol: 1e-9,
                max_iter: 25,
                jacobian: JacobianPolicy::Lagged { max_ratio: 0.1 },
            },
            corrector: None,
            sweep: SweepConfig::default(),
            seed: 0,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Config = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// sha256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Checks every entry the pipeline will run.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let s = &self.sweep;
        if s.ns.len() < 3 || s.ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Config("sweep.ns must be strictly increasing with at least 3 entries".into()));
        }
        if !(s.rho > 0.0 && s.rho < 1.0) {
            return Err(HarnessError::Config(format!("rho = {} not in (0, 1)", s.rho)));
        }
        if s.workers == 0 {
            return Err(HarnessError::Config("workers must be positive".into()));
        }
        if !(self.time.dt_factor > 0.0) || self.time.min_steps == 0 {
            return Err(HarnessError::Config("time policy needs dt_factor > 0 and min_steps ≥ 1".into()));
        }
        if !(self.hom.h > 0.0) || !(self.cells.length > 0.0) {
            return Err(HarnessError::Config("hom.h and cells.length must be positive".into()));
        }
        for &n in std::iter::once(&self.geometry.n).chain(&s.ns) {
            let p = self.params(n);
            p.validate()?;
            self.problem_data().validate(&p)?;
            if let Some(c) = self.corrector {
                c.validate(&p)?;
            }
        }
        Ok(())
    }

    pub fn params(&self, n: usize) -> GeometryParams {
        self.geometry.with_n(n)
    }

    pub fn problem_data(&self) -> ProblemData {
        let d = &self.data;
        let mut data = match d.preset {
            Preset::Default => ProblemData::default_case(),
            Preset::Zero => make_zero_case(),
        };
        if let Some(a) = d.alpha {
            data.alpha = a;
        }
        if let Some(b) = d.beta {
            data.beta = b;
        }
        if let Some(t) = d.t_final {
            data.t_final = t;
        }
        if let Some(g) = d.g_perturbation {
            data.g_perturbation = g;
        }
        if let Some(f) = d.f0 {
            data.f0 = f;
        }
        if let Some(g) = d.g0 {
            data.g0 = g;
        }
        if let Some(f) = d.reaction {
            // bounds are certified later from the family itself
            let (c1, c2) = f.derivative_range(-1e3, 1e3).unwrap_or((0.0, 0.0));
            let k = Nonlinearity::new(f, c1, c2);
            data.k = k;
            data.k_levels = [k; 3];
            data.kappa = [k; 3];
        }
        data
    }

    pub fn mesh_resolution(&self) -> MeshResolution {
        let m = &self.mesh;
        MeshResolution {
            cells_across: m.cells_across,
            vertical: VerticalPolicy::Matched {
                grading: m.grading,
                band: m.band,
                band_fraction: m.band_fraction,
                bulk: m.bulk,
                growth: m.growth,
            },
        }
    }

    /// Uniform time grid with dt = min(dt_factor·ε², T/min_steps).
    pub fn time_grid(&self, n: usize, t_final: f64) -> TimeGrid {
        let eps = self.params(n).eps();
        let dt = (self.time.dt_factor * eps * eps).min(t_final / self.time.min_steps as f64);
        TimeGrid::uniform(t_final, (t_final / dt).ceil() as usize)
    }
}

/// Solver counters of one pipeline entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntryStats {
    pub eps_nodes: usize,
    pub hom_dofs: usize,
    pub steps: usize,
    pub newton_iterations: usize,
    pub factorizations: usize,
    pub max_jump: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryResult {
    pub record: ErrorRecord,
    pub stats: EntryStats,
}

/// Everything for one ε: mesh, cells, both problems, R_ε and the norms.
pub fn run_entry(cfg: &Config, n: usize) -> Result<EntryResult, HarnessError> {
    let p = cfg.params(n);
    let valid = p.validate()?;
    let data = cfg.problem_data();
    data.validate(&p)?;
    let solver = |source| HarnessError::Solver { n, source };
    let layout = build_layout(&valid);
    let mesh = Arc::new(StructuredMesh::build(&layout, &cfg.mesh_resolution())?);
    let cells = CellSet::solve(&p, &mesh.template, cfg.mesh.grading, cfg.cells.length)?;
    let tg = cfg.time_grid(n, data.t_final);

    let grid = Arc::new(HomGrid::new(&p, &HomResolution::uniform(&p, cfg.hom.h)).map_err(solver)?);
    let mut hom = HomSolver::new(homogenized::assemble(grid.clone(), &data).map_err(solver)?, cfg.newton, cfg.hom.mode);
    let htraj = hom.solve(&tg).map_err(solver)?;

    let corr = Corrector::new(mesh.clone(), grid, &cells, cfg.corrector.unwrap_or_else(|| CorrectorConfig::default_for(&p)))?;
    let norms = ErrorNorms::new(&mesh);
    let mut eps = EpsSolver::new(eps_solver::assemble(mesh.clone(), &data).map_err(solver)?, cfg.newton).map_err(solver)?;
    let mut acc = ErrorAccumulator::default();
    let mut failure: Option<CorrectorError> = None;
    let diags = eps
        .solve_with(&tg, |k, t, u| {
            let res = corr
                .evaluate(&hom.system.field(&htraj.states[k]))
                .and_then(|s| acc.add(&norms, t, u, &s));
            res.map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                SolverError::Mesh(msg)
            })
        })
        .map_err(|e| match failure.take() {
            Some(c) => HarnessError::Corrector(c),
            None => solver(e),
        })?;
    let (corollary_l2_body, corollary_l2_rods) = acc.corollary;
    let record = ErrorRecord {
        eps: p.eps(),
        n,
        max_l2: acc.max_l2,
        l2h1: acc.l2_h1(),
        corollary_l2_body,
        corollary_l2_rods,
        bound: BoundTerms::new(&data, &p, cfg.sweep.rho),
    };
    let stats = EntryStats {
        eps_nodes: mesh.num_nodes(),
        hom_dofs: hom.system.num_dofs(),
        steps: tg.steps(),
        newton_iterations: diags.iter().chain(&htraj.diagnostics).map(|d| d.iterations).sum(),
        factorizations: diags.iter().chain(&htraj.diagnostics).map(|d| d.factorizations).sum(),
        max_jump: acc.max_jump,
    };
    Ok(EntryResult { record, stats })
}

/// Fitted rates of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Slope of log(max-L² + L²H¹) against log ε and its standard error.
    pub slope: f64,
    pub slope_se: f64,
    /// Slope of the summed Corollary norms.
    pub corollary_slope: f64,
    pub corollary_slope_se: f64,
    /// min(1−ρ, α_i−1+δ_{α_i,1}, β_i−1 for β_i ≠ 1).
    pub predicted_exponent: f64,
    /// Single constant C and relative residual of error ≈ C·(ε^{β−1} + ε^{1−ρ}),
    /// with the smallest β ≠ 1 (only ε^{1−ρ} if every β is 1).
    pub fit_constant: f64,
    pub fit_residual: f64,
    pub max_jump: f64,
    /// max_t of the weighted L² distance between the homogenized solution
    /// and its refinement, on the time grid of the largest N.
    pub hom_grid_error: f64,
    /// hom_grid_error over the smallest measured error of the sweep.
    pub hom_grid_ratio: f64,
}

/// Largest R_ε jump still attributed to rounding.
pub const TOL_JUMP: f64 = 1e-12;

impl SweepSummary {
    /// Rate acceptance. When ε^{1−ρ} dominates the bound the error slope and
    /// the Corollary slope must reach 0.7; when a smaller exponent e
    /// dominates the slope must reach 0.7·e and the single-constant fit
    /// against the bound shape must leave at most 25% relative residual.
    /// R_ε jumps must stay at rounding level in both cases.
    pub fn verdict(&self, rho: f64) -> (bool, String) {
        let jumps = self.max_jump <= TOL_JUMP;
        if self.predicted_exponent >= 1.0 - rho {
            let ok = self.slope >= 0.7 && self.corollary_slope >= 0.7 && jumps;
            (ok, format!(
                "slope {:.4} ± {:.4} (≥ 0.7), corollary slope {:.4} (≥ 0.7), max jump {:.1e}",
                self.slope, self.slope_se, self.corollary_slope, self.max_jump
            ))
        } else {
            let need = 0.7 * self.predicted_exponent;
            let ok = self.slope >= need && self.fit_residual <= 0.25 && jumps;
            (ok, format!(
                "slope {:.4} ± {:.4} (≥ {need:.3}), fit residual {:.3} (≤ 0.25), max jump {:.1e}",
                self.slope, self.slope_se, self.fit_residual, self.max_jump
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub entries: Vec<EntryResult>,
    pub summary: SweepSummary,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(ErrorRecord::CSV_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&e.record.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Predicted dominant exponent of the error bound.
pub fn predicted_exponent(data: &ProblemData, rho: f64) -> f64 {
    let mut e = 1.0 - rho;
    for i in 0..3 {
        e = e.min(data.alpha[i] - 1.0 + crate::model::delta1(data.alpha[i]));
        if data.beta[i] != 1.0 {
            e = e.min(data.beta[i] - 1.0);
        }
    }
    e
}

/// Reference shape ε^{β_min−1} + ε^{1−ρ} of the β-dominated bound.
pub fn reference_shape(data: &ProblemData, eps: f64, rho: f64) -> f64 {
    let beta = data.beta.iter().copied().filter(|&b| b != 1.0).fold(f64::INFINITY, f64::min);
    let b = if beta.is_finite() { eps.powf(beta - 1.0) } else { 0.0 };
    b + eps.powf(1.0 - rho)
}

/// Self-refinement check of the homogenized reference: solves on the
/// configured grid and on its uniform refinement and returns
/// max_t (Σ_sheets h·∫|v_h − v_{h/2}|²)^{1/2} over the coarse nodes.
pub fn hom_refinement_error(cfg: &Config, n: usize) -> Result<f64, HarnessError> {
    let p = cfg.params(n);
    let data = cfg.problem_data();
    let solver = |source| HarnessError::Solver { n, source };
    let tg = cfg.time_grid(n, data.t_final);
    let coarse_res = HomResolution::uniform(&p, cfg.hom.h);
    let solve = |res: HomResolution| -> Result<(Arc<HomGrid>, Vec<Vec<f64>>, homogenized::HomogenizedSystem), HarnessError> {
        let grid = Arc::new(HomGrid::new(&p, &res).map_err(solver)?);
        let mut hs = HomSolver::new(homogenized::assemble(grid.clone(), &data).map_err(solver)?, cfg.newton, cfg.hom.mode);
        let traj = hs.solve(&tg).map_err(solver)?;
        Ok((grid, traj.states, hs.system))
    };
    let (cg, cstates, csys) = solve(coarse_res)?;
    let (_, fstates, fsys) = solve(coarse_res.refined())?;
    let mut worst = 0.0f64;
    for (cu, fu) in cstates.iter().zip(&fstates) {
        let (cf, ff) = (csys.field(cu), fsys.field(fu));
        let mut sum = 0.0;
        for s in homogenized::SHEETS {
            let h = match s {
                crate::model::Sheet::Body => 1.0,
                crate::model::Sheet::Branch(b) => p.width(b),
            };
            let rows = cg.rows(s).len();
            let dy = cg.dy(s);
            for c in 0..cg.ncols() {
                for k in 0..rows {
                    let wy = if k == 0 || k + 1 == rows { dy / 2.0 } else { dy };
                    let d = cf.get(s, c, k) - ff.get(s, 2 * c, 2 * k);
                    sum += h * cg.wx[c] * wy * d * d;
                }
            }
        }
        worst = worst.max(sum.sqrt());
    }
    Ok(worst)
}

pub fn summarize(cfg: &Config, entries: &[EntryResult]) -> SweepSummary {
    let data = cfg.problem_data();
    let rho = cfg.sweep.rho;
    let eps: Vec<f64> = entries.iter().map(|e| e.record.eps).collect();
    let tot: Vec<f64> = entries.iter().map(|e| e.record.total()).collect();
    let cor: Vec<f64> = entries
        .iter()
        .map(|e| e.record.corollary_l2_body + e.record.corollary_l2_rods)
        .collect();
    let (slope, slope_se) = loglog_slope(&eps, &tot);
    let (corollary_slope, corollary_slope_se) = loglog_slope(&eps, &cor);
    let shape: Vec<f64> = eps.iter().map(|&e| reference_shape(&data, e, rho)).collect();
    let (fit_constant, fit_residual) = single_constant_fit(&tot, &shape);
    SweepSummary {
        slope,
        slope_se,
        corollary_slope,
        corollary_slope_se,
        predicted_exponent: predicted_exponent(&data, rho),
        fit_constant,
        fit_residual,
        max_jump: entries.iter().fold(0.0, |m, e| m.max(e.stats.max_jump)),
        hom_grid_error: f64::NAN,
        hom_grid_ratio: f64::NAN,
    }
}

/// Runs every N of the sweep, up to `workers` at a time.
pub fn run_sweep(cfg: &Config) -> Result<SweepReport, HarnessError> {
    cfg.validate()?;
    // entries run `workers` at a time; results keep the order of ns
    let mut entries = Vec::new();
    for chunk in cfg.sweep.ns.chunks(cfg.sweep.workers) {
        entries.extend(chunk.par_iter().map(|&n| run_entry(cfg, n)).collect::<Vec<_>>());
    }
    let entries = entries.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut summary = summarize(cfg, &entries);
    let n_max = *cfg.sweep.ns.last().unwrap();
    summary.hom_grid_error = hom_refinement_error(cfg, n_max)?;
    let smallest = entries.iter().map(|e| e.record.total()).fold(f64::INFINITY, f64::min);
    summary.hom_grid_ratio = summary.hom_grid_error / smallest;
    Ok(SweepReport { entries, summary })
}

/// Writes `contents` and returns its sha256.
fn write_hashed(path: &Path, contents: &[u8]) -> std::io::Result<String> {
    std::fs::write(path, contents)?;
    Ok(hex(&Sha256::digest(contents)))
}

/// Provenance of a run; only the listed artifacts are reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub geometry_hash: String,
    pub newton: NewtonSettings,
    pub unix_time: u64,
    pub artifacts: Vec<(String, String)>,
    pub version: String,
}

impl RunManifest {
    pub fn new(cfg: &Config, artifacts: Vec<(String, String)>) -> Self {
        let geometry = toml::to_string(&cfg.geometry).expect("geometry serializes");
        Self {
            config_hash: cfg.hash(),
            geometry_hash: hex(&Sha256::digest(geometry.as_bytes())),
            newton: cfg.newton,
            unix_time: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            artifacts,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join("manifest.toml");
        std::fs::write(&path, toml::to_string(self).expect("manifest serializes"))?;
        Ok(path)
    }
}

/// Writes the error CSV, a summary and the manifest of a sweep.
pub fn write_sweep(cfg: &Config, report: &SweepReport, dir: &Path) -> Result<RunManifest, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut artifacts = Vec::new();
    let csv = report.csv();
    artifacts.push(("errors.csv".to_string(), write_hashed(&dir.join("errors.csv"), csv.as_bytes())?));
    let mut summary = toml::to_string(&report.summary).expect("summary serializes");
    for e in &report.entries {
        let _ = writeln!(
            summary,
            "# N = {}: {} nodes, {} homogenized dofs, {} steps, {} Newton iterations, {} factorizations",
            e.record.n, e.stats.eps_nodes, e.stats.hom_dofs, e.stats.steps, e.stats.newton_iterations, e.stats.factorizations
        );
    }
    artifacts.push(("summary.toml".to_string(), write_hashed(&dir.join("summary.toml"), summary.as_bytes())?));
    artifacts.push(("config.toml".to_string(), write_hashed(&dir.join("config.toml"), cfg.to_toml().as_bytes())?));
    let manifest = RunManifest::new(cfg, artifacts);
    manifest.write(dir)?;
    Ok(manifest)
}

/// Parses an error CSV written by [`write_sweep`].
pub fn read_error_csv(text: &str) -> Result<Vec<ErrorRecord>, HarnessError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == ErrorRecord::CSV_HEADER => {}
        _ => return Err(HarnessError::MalformedCsv("missing or unexpected header".into())),
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(HarnessError::MalformedCsv(format!("row {} has {} fields", k + 1, f.len())));
        }
        let num = |i: usize| {
            f[i].trim()
                .parse::<f64>()
                .map_err(|_| HarnessError::MalformedCsv(format!("row {}: bad number {:?}", k + 1, f[i])))
        };
        out.push(ErrorRecord {
            eps: num(0)?,
            n: f[1]
                .trim()
                .parse()
                .map_err(|_| HarnessError::MalformedCsv(format!("row {}: bad N", k + 1)))?,
            max_l2: num(2)?,
            l2h1: num(3)?,
            corollary_l2_body: num(4)?,
            corollary_l2_rods: num(5)?,
            bound: BoundTerms {
                eps_term: num(6)?,
                alpha_term: num(7)?,
                beta_term: num(8)?,
                g_term: num(9)?,
            },
        });
    }
    if out.len() < 2 {
        return Err(HarnessError::MalformedCsv("need at least two rows".into()));
    }
    Ok(out)
}

/// Files written by [`emit_plotdata`] and the fitted slope they show.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotData {
    pub files: Vec<PathBuf>,
    pub slope: f64,
}

/// Log-log curves (measured error, summed bound terms, fit line) as CSV
/// files plus a static SVG rendering.
pub fn emit_plotdata(csv: &Path, dir: &Path) -> Result<PlotData, HarnessError> {
    let text = std::fs::read_to_string(csv)?;
    let recs = read_error_csv(&text)?;
    std::fs::create_dir_all(dir)?;
    let eps: Vec<f64> = recs.iter().map(|r| r.eps).collect();
    let meas: Vec<f64> = recs.iter().map(ErrorRecord::total).collect();
    let bound: Vec<f64> = recs
        .iter()
        .map(|r| r.bound.eps_term + r.bound.alpha_term + r.bound.beta_term + r.bound.g_term)
        .collect();
    let (slope, _) = loglog_slope(&eps, &meas);
    let n = eps.len() as f64;
    let icpt = meas.iter().map(|v| v.ln()).sum::<f64>() / n - slope * eps.iter().map(|v| v.ln()).sum::<f64>() / n;
    let fit: Vec<f64> = eps.iter().map(|e| (icpt + slope * e.ln()).exp()).collect();
    let curves = [("measured", &meas), ("bound", &bound), ("fit", &fit)];
    let mut files = Vec::new();
    for (name, ys) in curves {
        let mut s = format!("eps,{name}\n");
        for (e, y) in eps.iter().zip(ys.iter()) {
            let _ = writeln!(s, "{e:.17e},{y:.17e}");
        }
        let path = dir.join(format!("{name}.csv"));
        std::fs::write(&path, s)?;
        files.push(path);
    }
    let path = dir.join("rates.svg");
    std::fs::write(&path, render_svg(&eps, &curves, slope))?;
    files.push(path);
    Ok(PlotData { files, slope })
}

fn render_svg(eps: &[f64], curves: &[(&str, &Vec<f64>)], slope: f64) -> String {
    let (w, h, m) = (640.0, 480.0, 60.0);
    let lx: Vec<f64> = eps.iter().map(|v| v.log10()).collect();
    let ly: Vec<f64> = curves.iter().flat_map(|(_, ys)| ys.iter().filter(|v| **v > 0.0).map(|v| v.log10())).collect();
    let (x0, x1) = (lx.iter().copied().fold(f64::INFINITY, f64::min), lx.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ly.iter().copied().fold(f64::INFINITY, f64::min), ly.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let sx = |x: f64| m + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * m);
    let colors = ["#1f77b4", "#d62728", "#2ca02c"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"14\">log10 eps</text>\n\
         <text x=\"15\" y=\"{cy}\" font-size=\"14\" transform=\"rotate(-90 15 {cy})\">log10 error</text>\n",
        b = h - m,
        r = w - m,
        cx = w / 2.0,
        ty = h - 15.0,
        cy = h / 2.0
    );
    for (k, (name, ys)) in curves.iter().enumerate() {
        let pts: Vec<String> = lx
            .iter()
            .zip(ys.iter())
            .filter(|(_, y)| **y > 0.0)
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(y.log10())))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{p}\"/>\n<text x=\"{tx}\" y=\"{tyy}\" fill=\"{c}\" font-size=\"13\">{name}</text>",
            c = colors[k % 3],
            p = pts.join(" "),
            tx = m + 10.0,
            tyy = m + 16.0 * (k as f64 + 1.0)
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"13\">slope = {slope:.4}</text>\n</svg>", w - m - 120.0, m + 16.0);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = Config::default();
        let back = Config::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::from_toml("bogus = 1"), Err(HarnessError::Config(_))));
        let e = Config::from_toml("[sweep]\nns = [8, 16]\nrho = 0.1\nworkers = 1").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn sections_override_the_preset() {
        let cfg = Config::from_toml("[data]\npreset = \"default\"\nbeta = [1.5, 1.5, 1.5]\n").unwrap();
        let d = cfg.problem_data();
        assert_eq!(d.beta, [1.5; 3]);
        assert!((predicted_exponent(&d, 0.1) - 0.5).abs() < 1e-15);
        assert!((predicted_exponent(&ProblemData::default_case(), 0.1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn time_policy_scales_with_eps_squared() {
        let cfg = Config::default();
        assert_eq!(cfg.time_grid(8, 0.5).steps(), 20);
        let g = cfg.time_grid(64, 0.5);
        assert!(g.dt(1) <= 10.0 / 64.0f64.powi(2) + 1e-15);
        assert_eq!(*g.times.last().unwrap(), 0.5);
    }

    #[test]
    fn zero_case_has_zero_errors() {
        let mut cfg = Config::default();
        cfg.data.preset = Preset::Zero;
        cfg.data.t_final = Some(0.1);
        let r = run_entry(&cfg, 4).unwrap();
        assert_eq!(r.record.max_l2, 0.0);
        assert_eq!(r.record.l2h1, 0.0);
        assert_eq!(r.record.corollary_l2_body + r.record.corollary_l2_rods, 0.0);
    }

    #[test]
    fn csv_round_trip_and_malformed_input() {
        let rec = |n: usize| ErrorRecord {
            eps: 1.0 / n as f64,
            n,
            max_l2: 0.3 / n as f64,
            l2h1: 0.1 / n as f64,
            corollary_l2_body: 0.0,
            corollary_l2_rods: 0.0,
            bound: BoundTerms {
                eps_term: 1.0,
                alpha_term: 0.0,
                beta_term: 0.0,
                g_term: 0.0,
            },
        };
        let text = format!("{}\n{}\n{}\n", ErrorRecord::CSV_HEADER, rec(8).csv_row(), rec(16).csv_row());
        let back = read_error_csv(&text).unwrap();
        assert_eq!(back, vec![rec(8), rec(16)]);
        assert!(matches!(read_error_csv(""), Err(HarnessError::MalformedCsv(_))));
        assert!(matches!(read_error_csv(ErrorRecord::CSV_HEADER), Err(HarnessError::MalformedCsv(_))));
    }

    #[test]
    fn partial_sections_keep_field_defaults() {
        let cfg = Config::from_toml("[sweep]\nns = [4, 6, 8]\n").unwrap();
        assert_eq!(cfg.sweep.ns, vec![4, 6, 8]);
        assert_eq!(cfg.sweep.rho, SweepConfig::default().rho);
        assert!(matches!(Config::from_toml("[sweep]\nnz = [4]\n"), Err(HarnessError::Config(_))));
    }

    #[test]
    fn plot_slope_matches_sweep_fit() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = format!("{}\n", ErrorRecord::CSV_HEADER);
        let mut eps = Vec::new();
        let mut tot = Vec::new();
        for n in [8usize, 16, 32, 64] {
            let e = 1.0 / n as f64;
            let r = ErrorRecord {
                eps: e,
                n,
                max_l2: 0.5 * e.powf(0.9) * (1.0 + 0.1 * (n as f64).sin()),
                l2h1: 0.2 * e,
                corollary_l2_body: 0.0,
                corollary_l2_rods: 0.0,
                bound: BoundTerms {
                    eps_term: e.powf(0.9),
                    alpha_term: 3.0 * e,
                    beta_term: 3.0 * e,
                    g_term: 0.0,
                },
            };
            eps.push(e);
            tot.push(r.total());
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        let csv = dir.path().join("errors.csv");
        std::fs::write(&csv, text).unwrap();
        let plot = emit_plotdata(&csv, &dir.path().join("plot")).unwrap();
        assert_eq!(plot.files.len(), 4);
        let (slope, _) = loglog_slope(&eps, &tot);
        assert!((plot.slope - slope).abs() < 1e-12);
        let svg = std::fs::read_to_string(&plot.files[3]).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("slope ="));
    }
}
