//! Problem data: nonlinearities with certified derivative bounds, sources,
//! Robin exponents, the time horizon, and manufactured-solution cases.

use crate::geometry::{Branch, EdgeTag, GeometryParams};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{name}: derivative {derivative} at s = {witness} violates declared bound {bound}")]
    BoundViolation {
        name: String,
        witness: f64,
        derivative: f64,
        bound: f64,
    },
    #[error("{0}: certification interval leaves the domain of the family")]
    DomainViolation(String),
    #[error("invalid problem data: {0}")]
    Invalid(String),
}

/// Closed-form scalar families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// λs + c
    Affine { lambda: f64, c: f64 },
    /// σs + λs/(1+μs²)
    Saturating { sigma: f64, lambda: f64, mu: f64 },
    /// σs + λ tanh s
    TanhBlend { lambda: f64, sigma: f64 },
    /// λs/(1+μs), only on s > −1/μ
    MichaelisMenten { lambda: f64, mu: f64 },
}

impl Family {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Family::Affine { lambda, c } => lambda * s + c,
            Family::Saturating { sigma, lambda, mu } => sigma * s + lambda * s / (1.0 + mu * s * s),
            Family::TanhBlend { lambda, sigma } => sigma * s + lambda * s.tanh(),
            Family::MichaelisMenten { lambda, mu } => lambda * s / (1.0 + mu * s),
        }
    }

    pub fn deriv(&self, s: f64) -> f64 {
        match *self {
            Family::Affine { lambda, .. } => lambda,
            Family::Saturating { sigma, lambda, mu } => {
                let u = mu * s * s;
                sigma + lambda * (1.0 - u) / ((1.0 + u) * (1.0 + u))
            }
            Family::TanhBlend { lambda, sigma } => {
                let t = s.tanh();
                sigma + lambda * (1.0 - t * t)
            }
            Family::MichaelisMenten { lambda, mu } => {
                let d = 1.0 + mu * s;
                lambda / (d * d)
            }
        }
    }

    /// Exact range of the derivative over [lo, hi].
    pub fn derivative_range(&self, lo: f64, hi: f64) -> Option<(f64, f64)> {
        match *self {
            Family::Affine { lambda, .. } => Some((lambda, lambda)),
            Family::TanhBlend { .. } => {
                // f′ is even and monotone in |s|
                let far = lo.abs().max(hi.abs());
                let near = if lo <= 0.0 && hi >= 0.0 { 0.0 } else { lo.abs().min(hi.abs()) };
                let (a, b) = (self.deriv(far), self.deriv(near));
                Some((a.min(b), a.max(b)))
            }
            Family::Saturating { sigma, lambda, mu } => {
                // g(u) = (1−u)/(1+u)² with u = μs² is decreasing on [0,3] and
                // increasing on [3,∞), minimum −1/8 at u = 3
                let u = |s: f64| mu * s * s;
                let g = |u: f64| (1.0 - u) / ((1.0 + u) * (1.0 + u));
                let umin = if lo <= 0.0 && hi >= 0.0 { 0.0 } else { u(lo).min(u(hi)) };
                let umax = u(lo).max(u(hi));
                let mut vals = vec![g(umin), g(umax)];
                if umin <= 3.0 && umax >= 3.0 {
                    vals.push(-0.125);
                }
                let gmin = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let gmax = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (a, b) = (sigma + lambda * gmin, sigma + lambda * gmax);
                Some((a.min(b), a.max(b)))
            }
            Family::MichaelisMenten { mu, .. } => {
                if 1.0 + mu * lo <= 0.0 || 1.0 + mu * hi <= 0.0 {
                    return None;
                }
                let (a, b) = (self.deriv(lo), self.deriv(hi));
                Some((a.min(b), a.max(b)))
            }
        }
    }
}

/// A nonlinearity with declared bounds c1 ≤ f′ ≤ c2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nonlinearity {
    pub family: Family,
    pub c1: f64,
    pub c2: f64,
}

impl Nonlinearity {
    pub fn new(family: Family, c1: f64, c2: f64) -> Self {
        Self { family, c1, c2 }
    }

    pub fn affine(lambda: f64, c: f64) -> Self {
        Self::new(Family::Affine { lambda, c }, lambda, lambda)
    }

    pub fn tanh_blend(lambda: f64, sigma: f64) -> Self {
        Self::new(Family::TanhBlend { lambda, sigma }, sigma, sigma + lambda)
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        self.family.eval(s)
    }

    #[inline]
    pub fn deriv(&self, s: f64) -> f64 {
        self.family.deriv(s)
    }

    pub fn at_zero(&self) -> f64 {
        self.family.eval(0.0)
    }
}

/// Outcome of a derivative-bound certification.
#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub interval: (f64, f64),
    pub sampled_min: f64,
    pub sampled_max: f64,
    pub analytic_min: f64,
    pub analytic_max: f64,
    pub c1: f64,
    pub c2: f64,
    pub pass: bool,
}

const CERT_SAMPLES: usize = 20_001;

/// Certifies c1 ≤ f′ ≤ c2 on [−S, S].
pub fn certify_bounds(name: &str, f: &Nonlinearity, s: f64) -> Result<Certificate, ModelError> {
    if !(s > 0.0) {
        return Err(ModelError::Invalid(format!("certification half-width {s}")));
    }
    certify_on(name, f, -s, s)
}

/// Certifies c1 ≤ f′ ≤ c2 on [lo, hi] by dense sampling and the family's
/// closed-form derivative range.
pub fn certify_on(name: &str, f: &Nonlinearity, lo: f64, hi: f64) -> Result<Certificate, ModelError> {
    let (amin, amax) = f
        .family
        .derivative_range(lo, hi)
        .ok_or_else(|| ModelError::DomainViolation(name.to_string()))?;
    let mut smin = (f64::INFINITY, lo);
    let mut smax = (f64::NEG_INFINITY, lo);
    for k in 0..CERT_SAMPLES {
        let s = lo + (hi - lo) * k as f64 / (CERT_SAMPLES - 1) as f64;
        let d = f.deriv(s);
        if d < smin.0 {
            smin = (d, s);
        }
        if d > smax.0 {
            smax = (d, s);
        }
    }
    let tol = 1e-12 * (1.0 + f.c2.abs());
    if amin < f.c1 - tol || smin.0 < f.c1 - tol {
        return Err(ModelError::BoundViolation {
            name: name.to_string(),
            witness: smin.1,
            derivative: smin.0.min(amin),
            bound: f.c1,
        });
    }
    if amax > f.c2 + tol || smax.0 > f.c2 + tol {
        return Err(ModelError::BoundViolation {
            name: name.to_string(),
            witness: smax.1,
            derivative: smax.0.max(amax),
            bound: f.c2,
        });
    }
    Ok(Certificate {
        interval: (lo, hi),
        sampled_min: smin.0,
        sampled_max: smax.0,
        analytic_min: amin,
        analytic_max: amax,
        c1: f.c1,
        c2: f.c2,
        pass: true,
    })
}

fn ramp(rate: f64, t: f64) -> f64 {
    if rate > 0.0 {
        1.0 - (-rate * t).exp()
    } else {
        1.0
    }
}

/// Source f₀ in the body.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BodySource {
    Zero,
    /// amplitude·(1 − e^{−rate·t})·(1 − r²/R²)³ for r < R, compactly
    /// supported when the disc lies inside Ω₀.
    Bump {
        center: [f64; 2],
        radius: f64,
        amplitude: f64,
        rate: f64,
    },
}

impl BodySource {
    pub fn eval(&self, x1: f64, x2: f64, t: f64) -> f64 {
        self.time_factor(t) * self.shape(x1, x2)
    }

    /// f₀ = time_factor(t)·shape(x).
    pub fn time_factor(&self, t: f64) -> f64 {
        match *self {
            BodySource::Zero => 0.0,
            BodySource::Bump { amplitude, rate, .. } => amplitude * ramp(rate, t),
        }
    }

    pub fn shape(&self, x1: f64, x2: f64) -> f64 {
        match *self {
            BodySource::Zero => 0.0,
            BodySource::Bump { center, radius, .. } => {
                let r2 = ((x1 - center[0]).powi(2) + (x2 - center[1]).powi(2)) / (radius * radius);
                if r2 >= 1.0 {
                    0.0
                } else {
                    (1.0 - r2).powi(3)
                }
            }
        }
    }

    /// True if the support is compactly embedded in the body.
    pub fn compact_in(&self, p: &GeometryParams) -> bool {
        match *self {
            BodySource::Zero => true,
            BodySource::Bump { center, radius, .. } => {
                center[0] - radius > 0.0
                    && center[0] + radius < p.a
                    && center[1] - radius > 0.0
                    && center[1] + radius < p.d0
            }
        }
    }
}

/// Wall source g₀⁽ⁱ⁾, one expression shared by all levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WallSource {
    Zero,
    /// amplitude·(1 − e^{−rate·t})·(1 + ½cos(2π·waves·x₁/a))·sin²(π(x₂ − y_{i+1})/l_{i+1});
    /// the value and the x₂-derivative vanish at both ends of D_i.
    Profile { amplitude: f64, waves: f64, rate: f64 },
}

impl WallSource {
    /// g₀ = time_factor(t)·shape(level, x).
    pub fn time_factor(&self, t: f64) -> f64 {
        match *self {
            WallSource::Zero => 0.0,
            WallSource::Profile { amplitude, rate, .. } => amplitude * ramp(rate, t),
        }
    }

    fn shape_parts(&self, level: usize, p: &GeometryParams, x1: f64, x2: f64) -> (f64, f64) {
        match *self {
            WallSource::Zero => (0.0, 0.0),
            WallSource::Profile { waves, .. } => {
                let len = p.lengths()[level];
                let arg = PI * (x2 - p.interface_y(level + 1)) / len;
                let horiz = 1.0 + 0.5 * (2.0 * PI * waves * x1 / p.a).cos();
                (horiz * arg.sin() * arg.sin(), horiz * PI / len * (2.0 * arg).sin())
            }
        }
    }

    pub fn shape(&self, level: usize, p: &GeometryParams, x1: f64, x2: f64) -> f64 {
        self.shape_parts(level, p, x1, x2).0
    }

    pub fn eval(&self, level: usize, p: &GeometryParams, x1: f64, x2: f64, t: f64) -> f64 {
        self.time_factor(t) * self.shape(level, p, x1, x2)
    }

    pub fn dx2(&self, level: usize, p: &GeometryParams, x1: f64, x2: f64, t: f64) -> f64 {
        self.time_factor(t) * self.shape_parts(level, p, x1, x2).1
    }
}

/// Which sheet or rod population a quantity refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sheet {
    Body,
    Branch(Branch),
}

pub type VolumeFn = Arc<dyn Fn(Sheet, f64, f64, f64) -> f64 + Send + Sync>;
pub type BoundaryFn = Arc<dyn Fn(EdgeTag, [f64; 2], f64, f64, f64) -> f64 + Send + Sync>;

/// Additional source terms used by manufactured solutions. `volume` is
/// added to the right-hand side in every region (for the homogenized
/// problem it is the sheet equation's source); `boundary` is a Neumann flux
/// added on every exterior edge of the ε-mesh.
#[derive(Clone)]
pub struct ExtraSources {
    pub volume: VolumeFn,
    pub boundary: Option<BoundaryFn>,
}

impl std::fmt::Debug for ExtraSources {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ExtraSources")
    }
}

#[derive(Clone, Debug)]
pub struct ProblemData {
    pub k: Nonlinearity,
    pub k_levels: [Nonlinearity; 3],
    pub kappa: [Nonlinearity; 3],
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    pub t_final: f64,
    pub f0: BodySource,
    pub g0: WallSource,
    /// g_ε = g₀ + ε·amplitude·w with w = (1 − e^{−5t})·cos(3x₂ + 1).
    pub g_perturbation: f64,
    pub extra: Option<ExtraSources>,
}

/// Spatial profile w(x₂) = cos(3x₂ + 1) of the optional g_ε perturbation.
pub fn perturbation_shape(x2: f64) -> f64 {
    (3.0 * x2 + 1.0).cos()
}

/// Kronecker δ_{x,1}.
pub fn delta1(x: f64) -> f64 {
    if x == 1.0 {
        1.0
    } else {
        0.0
    }
}

impl ProblemData {
    /// The reference configuration used by the sweeps.
    pub fn default_case() -> Self {
        let k = Nonlinearity::tanh_blend(0.5, 1.0);
        Self {
            k,
            k_levels: [k; 3],
            kappa: [k; 3],
            alpha: [2.0; 3],
            beta: [2.0; 3],
            t_final: 0.5,
            f0: BodySource::Bump {
                center: [0.5, 0.6],
                radius: 0.35,
                amplitude: 20.0,
                rate: 10.0,
            },
            g0: WallSource::Profile {
                amplitude: 1.0,
                waves: 1.0,
                rate: 5.0,
            },
            g_perturbation: 0.0,
            extra: None,
        }
    }

    pub fn g_eps(&self, level: usize, p: &GeometryParams, x1: f64, x2: f64, t: f64) -> f64 {
        let g = self.g0.eval(level, p, x1, x2, t);
        if self.g_perturbation == 0.0 {
            g
        } else {
            g + p.eps() * self.perturbation_time(t) * perturbation_shape(x2)
        }
    }

    /// Time factor of the perturbation g_ε − g₀ = ε·perturbation_time(t)·w(x₂).
    pub fn perturbation_time(&self, t: f64) -> f64 {
        self.g_perturbation * ramp(5.0, t)
    }

    /// Nonlinearity of a sheet or rod population.
    pub fn reaction(&self, s: Sheet) -> &Nonlinearity {
        match s {
            Sheet::Body => &self.k,
            Sheet::Branch(b) => &self.k_levels[b.level],
        }
    }

    /// Lower bound shared by every nonlinearity.
    pub fn c1(&self) -> f64 {
        self.all().iter().map(|f| f.c1).fold(f64::INFINITY, f64::min)
    }

    pub fn c2(&self) -> f64 {
        self.all().iter().map(|f| f.c2).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all(&self) -> [Nonlinearity; 7] {
        [
            self.k,
            self.k_levels[0],
            self.k_levels[1],
            self.k_levels[2],
            self.kappa[0],
            self.kappa[1],
            self.kappa[2],
        ]
    }

    pub fn names() -> [&'static str; 7] {
        ["k", "k0", "k1", "k2", "kap0", "kap1", "kap2"]
    }

    pub fn certify_all(&self, s: f64) -> Result<Vec<Certificate>, ModelError> {
        Self::names()
            .iter()
            .zip(self.all().iter())
            .map(|(n, f)| certify_bounds(n, f, s))
            .collect()
    }

    /// Checks exponents, horizon, source support and the vanishing of g₀
    /// and ∂x₂g₀ at the ends of D_i when β_i = 1.
    pub fn validate(&self, p: &GeometryParams) -> Result<(), ModelError> {
        if !(self.t_final > 0.0) {
            return Err(ModelError::Invalid(format!("T = {}", self.t_final)));
        }
        for i in 0..3 {
            if !(self.alpha[i] >= 1.0) || !(self.beta[i] >= 1.0) {
                return Err(ModelError::Invalid(format!(
                    "exponents must be >= 1 (alpha{i} = {}, beta{i} = {})",
                    self.alpha[i], self.beta[i]
                )));
            }
        }
        for (n, f) in Self::names().iter().zip(self.all().iter()) {
            if !(f.c1 > 0.0 && f.c1 <= f.c2) {
                return Err(ModelError::Invalid(format!("{n}: need 0 < c1 <= c2")));
            }
        }
        if !self.f0.compact_in(p) {
            return Err(ModelError::Invalid("f0 support must lie inside the body".into()));
        }
        for i in 0..3 {
            if self.beta[i] == 1.0 {
                let d = self.g0_end_defect(i, p);
                if d > 1e-12 {
                    return Err(ModelError::Invalid(format!(
                        "g0 on level {i} does not vanish at the interfaces (defect {d:e})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest |g₀| or |∂x₂g₀| sampled on the two end ordinates of D_i.
    pub fn g0_end_defect(&self, level: usize, p: &GeometryParams) -> f64 {
        let mut worst: f64 = 0.0;
        for y in [p.interface_y(level), p.interface_y(level + 1)] {
            for kx in 0..=32 {
                let x1 = p.a * kx as f64 / 32.0;
                for kt in 0..=8 {
                    let t = self.t_final * kt as f64 / 8.0;
                    worst = worst
                        .max(self.g0.eval(level, p, x1, y, t).abs())
                        .max(self.g0.dx2(level, p, x1, y, t).abs() * p.lengths()[level]);
                }
            }
        }
        worst
    }
}

/// Zero data with k(0) = k_i(0) = κ_i(0) = 0; both problems have the zero
/// solution.
pub fn make_zero_case() -> ProblemData {
    ProblemData {
        f0: BodySource::Zero,
        g0: WallSource::Zero,
        ..ProblemData::default_case()
    }
}

/// Time factor τ(t) of a manufactured solution u = τ(t)φ(x).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeProfile {
    /// τ = t: implicit Euler reproduces the time dependence exactly.
    Linear,
    /// τ = sin(2t).
    Sine,
}

impl TimeProfile {
    pub fn tau(self, t: f64) -> f64 {
        match self {
            TimeProfile::Linear => t,
            TimeProfile::Sine => (2.0 * t).sin(),
        }
    }

    pub fn dtau(self, t: f64) -> f64 {
        match self {
            TimeProfile::Linear => 1.0,
            TimeProfile::Sine => 2.0 * (2.0 * t).cos(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManufacturedKind {
    Eps,
    Homogenized,
}

pub type ExactFn = Arc<dyn Fn(Sheet, f64, f64, f64) -> f64 + Send + Sync>;

/// A closed-form solution together with the data that produce it.
#[derive(Clone)]
pub struct ManufacturedCase {
    pub kind: ManufacturedKind,
    pub data: ProblemData,
    /// Exact field; for the ε kind the sheet argument only selects the
    /// region (all regions share one smooth function).
    pub exact: ExactFn,
    /// x₂-profiles q and q′ of the homogenized kind per sheet (the field is
    /// τ(t)P(x₁)q(x₂)).
    pub profile: Option<Arc<HomProfile>>,
}

/// Profiles of the homogenized manufactured solution v = τ(t)P(x₁)q(x₂),
/// P = 2 + cos(πx₁/a). Each q is a quadratic in x₂ on its own segment.
#[derive(Clone, Debug)]
pub struct HomProfile {
    pub a: f64,
    /// (origin y, q(y), q′(y), ½q″) per sheet: q(x₂) = c0 + c1(x₂−y) + c2(x₂−y)².
    pub body: (f64, f64, f64, f64),
    pub branches: [(f64, f64, f64, f64); 7],
}

impl HomProfile {
    fn coeffs(&self, s: Sheet) -> (f64, f64, f64, f64) {
        match s {
            Sheet::Body => self.body,
            Sheet::Branch(b) => self.branches[b.index()],
        }
    }

    pub fn q(&self, s: Sheet, x2: f64) -> f64 {
        let (y, c0, c1, c2) = self.coeffs(s);
        let d = x2 - y;
        c0 + c1 * d + c2 * d * d
    }

    pub fn dq(&self, s: Sheet, x2: f64) -> f64 {
        let (y, _, c1, c2) = self.coeffs(s);
        c1 + 2.0 * c2 * (x2 - y)
    }

    pub fn ddq(&self, s: Sheet) -> f64 {
        2.0 * self.coeffs(s).3
    }

    pub fn p(&self, x1: f64) -> f64 {
        2.0 + (PI * x1 / self.a).cos()
    }

    pub fn ddp(&self, x1: f64) -> f64 {
        -(PI / self.a).powi(2) * (PI * x1 / self.a).cos()
    }

    fn build(p: &GeometryParams) -> Self {
        let s = 0.8;
        // body: q = 1 + s(x₂ − x₂²/(2d₀)), so q′(d₀) = 0
        let body = (0.0, 1.0, s, -s / (2.0 * p.d0));
        let mut branches = [(0.0, 0.0, 0.0, 0.0); 7];
        branches[0] = (0.0, 1.0, s / p.h0, 0.6);
        let eval = |c: (f64, f64, f64, f64), x: f64| {
            let d = x - c.0;
            (c.1 + c.2 * d + c.3 * d * d, c.2 + 2.0 * c.3 * d)
        };
        let y1 = p.interface_y(1);
        let (a1, dq0) = eval(branches[0], y1);
        let flux1 = p.h0 * dq0;
        let theta = [0.3, 0.7];
        let bend = [0.4, -0.3];
        for m in 0..2 {
            let b = Branch::new(1, m);
            branches[b.index()] = (y1, a1, theta[m] * flux1 / p.width(b), bend[m]);
        }
        let y2 = p.interface_y(2);
        let theta2 = [0.4, 0.6];
        for pm in 0..2 {
            let parent = Branch::new(1, pm);
            let (a2, dq1) = eval(branches[parent.index()], y2);
            let flux2 = p.width(parent) * dq1;
            for (k, child) in parent.children().unwrap().into_iter().enumerate() {
                let slope = theta2[k] * flux2 / p.width(child);
                // q′(y₂ − l₃) = 0
                branches[child.index()] = (y2, a2, slope, slope / (2.0 * p.l3));
            }
        }
        Self {
            a: p.a,
            body,
            branches,
        }
    }
}

/// Builds a manufactured case on the given geometry with default
/// nonlinearities and time factor `time`.
pub fn make_manufactured(kind: ManufacturedKind, p: &GeometryParams, time: TimeProfile) -> ManufacturedCase {
    let base = ProblemData {
        f0: BodySource::Zero,
        g0: WallSource::Zero,
        t_final: 0.5,
        ..ProblemData::default_case()
    };
    match kind {
        ManufacturedKind::Eps => manufactured_eps(base, p.clone(), time),
        ManufacturedKind::Homogenized => manufactured_hom(base, p, time),
    }
}

// φ(x) = cos(1.3x₁ + 0.2)·(1 + 0.5 sin(1.1x₂ + 0.3))
fn phi(x1: f64, x2: f64) -> (f64, [f64; 2], f64) {
    let (c, dc, ddc) = {
        let a = 1.3 * x1 + 0.2;
        (a.cos(), -1.3 * a.sin(), -1.69 * a.cos())
    };
    let (d, dd, ddd) = {
        let b = 1.1 * x2 + 0.3;
        (1.0 + 0.5 * b.sin(), 0.55 * b.cos(), -0.605 * b.sin())
    };
    (c * d, [dc * d, c * dd], ddc * d + c * ddd)
}

fn manufactured_eps(base: ProblemData, p: GeometryParams, time: TimeProfile) -> ManufacturedCase {
    let data0 = base.clone();
    let volume: VolumeFn = Arc::new(move |s, x1, x2, t| {
        let (f, _, lap) = phi(x1, x2);
        let u = time.tau(t) * f;
        time.dtau(t) * f - time.tau(t) * lap + data0.reaction(s).eval(u)
    });
    let data1 = base.clone();
    let eps = p.eps();
    let boundary: BoundaryFn = Arc::new(move |tag, n, x1, x2, t| {
        let (f, g, _) = phi(x1, x2);
        let tau = time.tau(t);
        let flux = tau * (n[0] * g[0] + n[1] * g[1]);
        match tag {
            EdgeTag::UpsilonLateral(b) => {
                flux + eps.powf(data1.alpha[b.level]) * data1.kappa[b.level].eval(tau * f)
            }
            _ => flux,
        }
    });
    let data = ProblemData {
        extra: Some(ExtraSources {
            volume,
            boundary: Some(boundary),
        }),
        ..base
    };
    ManufacturedCase {
        kind: ManufacturedKind::Eps,
        data,
        exact: Arc::new(move |_, x1, x2, t| time.tau(t) * phi(x1, x2).0),
        profile: None,
    }
}

fn manufactured_hom(base: ProblemData, p: &GeometryParams, time: TimeProfile) -> ManufacturedCase {
    let prof = Arc::new(HomProfile::build(p));
    let widths = p.widths();
    let d = base.clone();
    let pr = prof.clone();
    let volume: VolumeFn = Arc::new(move |s, x1, x2, t| {
        let (tau, dtau) = (time.tau(t), time.dtau(t));
        let (pp, q) = (pr.p(x1), pr.q(s, x2));
        let u = tau * pp * q;
        match s {
            Sheet::Body => dtau * pp * q - tau * (pr.ddp(x1) * q + pp * pr.ddq(s)) + d.k.eval(u),
            Sheet::Branch(b) => {
                let h = widths[b.index()];
                let i = b.level;
                h * dtau * pp * q - h * tau * pp * pr.ddq(s)
                    + h * d.k_levels[i].eval(u)
                    + 2.0 * delta1(d.alpha[i]) * d.kappa[i].eval(u)
            }
        }
    });
    let pr = prof.clone();
    ManufacturedCase {
        kind: ManufacturedKind::Homogenized,
        data: ProblemData {
            extra: Some(ExtraSources {
                volume,
                boundary: None,
            }),
            ..base
        },
        exact: Arc::new(move |s, x1, x2, t| time.tau(t) * pr.p(x1) * pr.q(s, x2)),
        profile: Some(prof),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> GeometryParams {
        GeometryParams {
            a: 1.0,
            n: 4,
            l1: 0.5,
            l2: 0.4,
            l3: 0.3,
            h0: 0.6,
            h11: 0.25,
            h12: 0.3,
            h21: 0.1,
            h22: 0.12,
            h23: 0.1,
            h24: 0.14,
            d0: 1.0,
        }
    }

    #[test]
    fn affine_certifies() {
        let c = certify_bounds("k", &Nonlinearity::affine(1.0, 0.0), 10.0).unwrap();
        assert!(c.pass);
        assert_eq!(c.sampled_min, 1.0);
    }

    #[test]
    fn tanh_blend_bounds() {
        let f = Family::TanhBlend {
            lambda: 1.0,
            sigma: 0.5,
        };
        assert!(certify_bounds("k", &Nonlinearity::new(f, 0.4, 1.5), 10.0).is_ok());
        match certify_bounds("k", &Nonlinearity::new(f, 0.6, 1.5), 10.0) {
            Err(ModelError::BoundViolation { witness, derivative, .. }) => {
                assert!(witness.abs() > 5.0);
                assert!(derivative < 0.6);
            }
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn michaelis_menten_on_positive_range() {
        let (lambda, mu, s) = (2.0, 0.5, 4.0);
        let f = Family::MichaelisMenten { lambda, mu };
        let low = lambda / (1.0 + mu * s).powi(2);
        assert!(certify_on("kap", &Nonlinearity::new(f, low, lambda), 0.0, s).is_ok());
        assert!(certify_on("kap", &Nonlinearity::new(f, low * 1.01, lambda), 0.0, s).is_err());
        assert!(matches!(
            certify_bounds("kap", &Nonlinearity::new(f, low, lambda), s),
            Err(ModelError::DomainViolation(_))
        ));
    }

    #[test]
    fn saturating_range_matches_sampling() {
        let f = Family::Saturating {
            sigma: 1.0,
            lambda: 0.8,
            mu: 2.0,
        };
        let (lo, hi) = f.derivative_range(-3.0, 3.0).unwrap();
        assert!((lo - (1.0 - 0.1)).abs() < 1e-12);
        assert!((hi - 1.8).abs() < 1e-12);
        assert!(certify_bounds("k", &Nonlinearity::new(f, 0.9, 1.8), 3.0).is_ok());
    }

    #[test]
    fn g0_vanishes_at_interfaces() {
        let d = ProblemData {
            beta: [1.0; 3],
            ..ProblemData::default_case()
        };
        for i in 0..3 {
            assert!(d.g0_end_defect(i, &params()) <= 1e-12);
        }
        assert!(d.validate(&params()).is_ok());
    }

    #[test]
    fn default_case_is_valid() {
        let d = ProblemData::default_case();
        d.validate(&params()).unwrap();
        assert_eq!(d.certify_all(50.0).unwrap().len(), 7);
        let z = make_zero_case();
        for f in z.all() {
            assert_eq!(f.at_zero(), 0.0);
        }
    }

    #[test]
    fn hom_profile_satisfies_transmission() {
        let p = params();
        let pr = HomProfile::build(&p);
        let br = |l, m| Sheet::Branch(Branch::new(l, m));
        let y1 = p.interface_y(1);
        let y2 = p.interface_y(2);
        let y3 = p.interface_y(3);
        assert!((pr.q(Sheet::Body, 0.0) - pr.q(br(0, 0), 0.0)).abs() < 1e-14);
        assert!((pr.dq(Sheet::Body, 0.0) - p.h0 * pr.dq(br(0, 0), 0.0)).abs() < 1e-14);
        assert!(pr.dq(Sheet::Body, p.d0).abs() < 1e-14);
        let k1 = p.h0 * pr.dq(br(0, 0), y1) - p.h11 * pr.dq(br(1, 0), y1) - p.h12 * pr.dq(br(1, 1), y1);
        assert!(k1.abs() < 1e-14);
        for m in 0..2 {
            assert!((pr.q(br(0, 0), y1) - pr.q(br(1, m), y1)).abs() < 1e-14);
        }
        for (parent, (c0, c1)) in [(0, (0, 1)), (1, (2, 3))] {
            let pb = Branch::new(1, parent);
            let flux = p.width(pb) * pr.dq(br(1, parent), y2)
                - p.width(Branch::new(2, c0)) * pr.dq(br(2, c0), y2)
                - p.width(Branch::new(2, c1)) * pr.dq(br(2, c1), y2);
            assert!(flux.abs() < 1e-14);
            for c in [c0, c1] {
                assert!((pr.q(br(1, parent), y2) - pr.q(br(2, c), y2)).abs() < 1e-14);
                assert!(pr.dq(br(2, c), y3).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn eps_manufactured_source_matches_definition() {
        let p = params();
        let case = make_manufactured(ManufacturedKind::Eps, &p, TimeProfile::Sine);
        let extra = case.data.extra.clone().unwrap();
        let (x1, x2, t) = (0.3, -0.2, 0.4);
        let h = 1e-4;
        let u = |x1: f64, x2: f64, t: f64| (case.exact)(Sheet::Body, x1, x2, t);
        let ut = (u(x1, x2, t + h) - u(x1, x2, t - h)) / (2.0 * h);
        let lap = (u(x1 + h, x2, t) + u(x1 - h, x2, t) + u(x1, x2 + h, t) + u(x1, x2 - h, t)
            - 4.0 * u(x1, x2, t))
            / (h * h);
        let s = Sheet::Branch(Branch::new(0, 0));
        let want = ut - lap + case.data.k_levels[0].eval(u(x1, x2, t));
        assert!(((extra.volume)(s, x1, x2, t) - want).abs() < 1e-5);
    }
}
