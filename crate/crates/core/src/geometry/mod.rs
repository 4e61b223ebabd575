//! Thick fractal junction geometry: parameters, rod offsets, the rod layout
//! of Ω_ε and a conforming rectilinear mesh with tagged boundaries.

mod grid;
mod mesh;

pub use grid::{graded_axis, segment_nodes, Grading, PeriodTemplate};
pub use mesh::{
    BoundaryEdge, EdgeTag, InterfaceEdge, MeshCell, MeshResolution, Region, RegionGrid,
    StructuredMesh, VerticalPolicy,
};

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("nesting violation: {0}")]
    NestingViolation(String),
    #[error("range violation: {name} = {value}")]
    RangeViolation { name: &'static str, value: f64 },
    #[error("bad rod count N = {0} (need N >= 2)")]
    BadCount(usize),
    #[error("snap conflict: {0}")]
    SnapConflict(String),
    #[error("untagged boundary edge between nodes {0} and {1}")]
    UntaggedBoundary(usize, usize),
    #[error("invalid mesh resolution: {0}")]
    BadResolution(String),
}

/// A branch of the junction tree: `level` 0, 1 or 2 and a zero-based
/// branch index `m` (1 branch at level 0, 2 at level 1, 4 at level 2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Branch {
    pub level: usize,
    pub m: usize,
}

impl Branch {
    pub const fn new(level: usize, m: usize) -> Self {
        Self { level, m }
    }

    /// All seven branches, level by level.
    pub const ALL: [Branch; 7] = [
        Branch::new(0, 0),
        Branch::new(1, 0),
        Branch::new(1, 1),
        Branch::new(2, 0),
        Branch::new(2, 1),
        Branch::new(2, 2),
        Branch::new(2, 3),
    ];

    pub fn count_at(level: usize) -> usize {
        1 << level
    }

    /// Position in [`Branch::ALL`].
    pub fn index(self) -> usize {
        (1 << self.level) - 1 + self.m
    }

    pub fn parent(self) -> Option<Branch> {
        (self.level > 0).then(|| Branch::new(self.level - 1, self.m / 2))
    }

    pub fn children(self) -> Option<[Branch; 2]> {
        (self.level < 2).then(|| {
            [
                Branch::new(self.level + 1, 2 * self.m),
                Branch::new(self.level + 1, 2 * self.m + 1),
            ]
        })
    }

    /// Label with the one-based branch index, e.g. `(1,2)`.
    pub fn label(self) -> String {
        format!("({},{})", self.level, self.m + 1)
    }
}

/// Geometric parameters of Ω_ε. ε = a/N is always derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryParams {
    pub a: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub h0: f64,
    pub h11: f64,
    pub h12: f64,
    pub h21: f64,
    pub h22: f64,
    pub h23: f64,
    pub h24: f64,
    pub d0: f64,
}

impl GeometryParams {
    pub fn eps(&self) -> f64 {
        self.a / self.n as f64
    }

    /// Relative width h of a branch.
    pub fn width(&self, b: Branch) -> f64 {
        match (b.level, b.m) {
            (0, 0) => self.h0,
            (1, 0) => self.h11,
            (1, 1) => self.h12,
            (2, 0) => self.h21,
            (2, 1) => self.h22,
            (2, 2) => self.h23,
            (2, 3) => self.h24,
            _ => panic!("no branch {b:?}"),
        }
    }

    pub fn widths(&self) -> [f64; 7] {
        Branch::ALL.map(|b| self.width(b))
    }

    pub fn min_width(&self) -> f64 {
        self.widths().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn lengths(&self) -> [f64; 3] {
        [self.l1, self.l2, self.l3]
    }

    /// Ordinate of interface I_i: 0, −l1, −l1−l2, and the rod bases at
    /// −l1−l2−l3 for i = 3. Every module uses this for interface rows so
    /// coordinates agree bitwise.
    pub fn interface_y(&self, i: usize) -> f64 {
        match i {
            0 => 0.0,
            1 => -self.l1,
            2 => -(self.l1 + self.l2),
            3 => -(self.l1 + self.l2 + self.l3),
            _ => panic!("no interface {i}"),
        }
    }

    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }

    pub fn validate(&self) -> Result<ValidatedParams, GeometryError> {
        if self.n < 2 {
            return Err(GeometryError::BadCount(self.n));
        }
        let positive = [
            ("a", self.a),
            ("l1", self.l1),
            ("l2", self.l2),
            ("l3", self.l3),
            ("d0", self.d0),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(GeometryError::RangeViolation { name, value });
            }
        }
        let names = ["h0", "h11", "h12", "h21", "h22", "h23", "h24"];
        for (name, value) in names.into_iter().zip(self.widths()) {
            if !(value > 0.0 && value < 1.0) {
                return Err(GeometryError::RangeViolation { name, value });
            }
        }
        let nest = [
            (self.h11 + self.h12, self.h0, "h11 + h12 < h0"),
            (self.h21 + self.h22, self.h11, "h21 + h22 < h11"),
            (self.h23 + self.h24, self.h12, "h23 + h24 < h12"),
        ];
        for (sum, bound, what) in nest {
            if sum >= bound {
                return Err(GeometryError::NestingViolation(format!(
                    "{what} fails: {sum} >= {bound}"
                )));
            }
        }
        Ok(ValidatedParams(self.clone()))
    }
}

/// Parameters that passed [`GeometryParams::validate`].
#[derive(Clone, Debug, PartialEq)]
pub struct ValidatedParams(GeometryParams);

impl std::ops::Deref for ValidatedParams {
    type Target = GeometryParams;
    fn deref(&self) -> &GeometryParams {
        &self.0
    }
}

impl ValidatedParams {
    pub fn into_inner(self) -> GeometryParams {
        self.0
    }
}

/// Relative center offsets of the rods inside one period.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Offsets {
    pub b0: f64,
    pub b11: f64,
    pub b12: f64,
    pub b21: f64,
    pub b22: f64,
    pub b23: f64,
    pub b24: f64,
}

impl Offsets {
    pub fn center(&self, b: Branch) -> f64 {
        match (b.level, b.m) {
            (0, 0) => self.b0,
            (1, 0) => self.b11,
            (1, 1) => self.b12,
            (2, 0) => self.b21,
            (2, 1) => self.b22,
            (2, 2) => self.b23,
            (2, 3) => self.b24,
            _ => panic!("no branch {b:?}"),
        }
    }
}

pub fn derive_offsets(p: &GeometryParams) -> Offsets {
    Offsets {
        b0: 0.5,
        b11: (1.0 - p.h0 + p.h11) / 2.0,
        b12: (1.0 + p.h0 - p.h12) / 2.0,
        b21: (1.0 - p.h0 + p.h21) / 2.0,
        b22: (1.0 - p.h0 + 2.0 * p.h11 - p.h22) / 2.0,
        b23: (1.0 + p.h0 - 2.0 * p.h12 + p.h23) / 2.0,
        b24: (1.0 + p.h0 - p.h24) / 2.0,
    }
}

/// One thin rod G^{(i,m)}_j(ε).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RodSpec {
    pub branch: Branch,
    pub j: usize,
    pub x1: (f64, f64),
    pub x2: (f64, f64),
}

impl RodSpec {
    pub fn area(&self) -> f64 {
        (self.x1.1 - self.x1.0) * (self.x2.1 - self.x2.0)
    }
}

/// Body rectangle plus the 7N rods, ordered by level, then period j,
/// then branch m.
#[derive(Clone, Debug)]
pub struct JunctionLayout {
    pub params: GeometryParams,
    pub offsets: Offsets,
    pub body: ((f64, f64), (f64, f64)),
    pub rods: Vec<RodSpec>,
}

/// Rod periods are indexed j = 0..N−1.
pub const PERIOD_INDEXING: &str = "j = 0..N-1";

pub fn build_layout(p: &ValidatedParams) -> JunctionLayout {
    let offsets = derive_offsets(p);
    let eps = p.eps();
    let mut rods = Vec::with_capacity(7 * p.n);
    for level in 0..3 {
        let x2 = (p.interface_y(level + 1), p.interface_y(level));
        for j in 0..p.n {
            for m in 0..Branch::count_at(level) {
                let branch = Branch::new(level, m);
                let c = eps * (j as f64 + offsets.center(branch));
                let half = eps * p.width(branch) / 2.0;
                rods.push(RodSpec {
                    branch,
                    j,
                    x1: (c - half, c + half),
                    x2,
                });
            }
        }
    }
    JunctionLayout {
        params: (**p).clone(),
        offsets,
        body: ((0.0, p.a), (0.0, p.d0)),
        rods,
    }
}

impl JunctionLayout {
    /// Analytic area of Ω_ε.
    pub fn area(&self) -> f64 {
        let p = &self.params;
        let body = p.a * p.d0;
        let rods: f64 = self.rods.iter().map(RodSpec::area).sum();
        body + rods
    }

    /// Plain-text rod table: one rod per line with level, one-based m, j and
    /// the rectangle bounds at 17 significant digits.
    pub fn export_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# periods {PERIOD_INDEXING}");
        let _ = writeln!(s, "# level m j x1_lo x1_hi x2_lo x2_hi");
        for r in &self.rods {
            let _ = writeln!(
                s,
                "{} {} {} {:.16e} {:.16e} {:.16e} {:.16e}",
                r.branch.level,
                r.branch.m + 1,
                r.j,
                r.x1.0,
                r.x1.1,
                r.x2.0,
                r.x2.1
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_params() -> GeometryParams {
        GeometryParams {
            a: 1.0,
            n: 16,
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
    fn level_one_offsets() {
        let p = GeometryParams {
            h0: 0.5,
            h11: 0.2,
            h12: 0.2,
            h21: 0.05,
            h22: 0.05,
            h23: 0.05,
            h24: 0.05,
            ..sample_params()
        };
        let o = derive_offsets(&p);
        assert!((o.b11 - 0.35).abs() < 1e-15);
        assert!((o.b12 - 0.65).abs() < 1e-15);
    }

    #[test]
    fn level_two_offsets() {
        let p = GeometryParams {
            h0: 0.9,
            h11: 0.3,
            h12: 0.3,
            h21: 0.1,
            h22: 0.1,
            h23: 0.1,
            h24: 0.1,
            ..sample_params()
        };
        let o = derive_offsets(&p);
        for (got, want) in [(o.b21, 0.1), (o.b22, 0.3), (o.b23, 0.7), (o.b24, 0.9)] {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn strict_nesting_is_required() {
        let p = GeometryParams {
            h0: 0.5,
            h11: 0.25,
            h12: 0.25,
            ..sample_params()
        };
        assert!(matches!(p.validate(), Err(GeometryError::NestingViolation(_))));
    }

    #[test]
    fn open_interval_for_widths() {
        let p = GeometryParams {
            h0: 1.0,
            ..sample_params()
        };
        assert!(matches!(
            p.validate(),
            Err(GeometryError::RangeViolation { name: "h0", .. })
        ));
    }

    #[test]
    fn count_and_lengths_checked() {
        let p = GeometryParams {
            n: 1,
            ..sample_params()
        };
        assert_eq!(p.validate(), Err(GeometryError::BadCount(1)));
        let p = GeometryParams {
            d0: 0.0,
            ..sample_params()
        };
        assert!(p.validate().is_err());
        assert!(sample_params().validate().is_ok());
    }

    #[test]
    fn two_period_layout() {
        let p = GeometryParams {
            n: 2,
            h0: 0.5,
            h11: 0.2,
            h12: 0.2,
            h21: 0.05,
            h22: 0.05,
            h23: 0.05,
            h24: 0.05,
            ..sample_params()
        };
        let layout = build_layout(&p.validate().unwrap());
        let r = layout.rods[0];
        assert_eq!((r.branch, r.j), (Branch::new(0, 0), 0));
        assert!((r.x1.0 - 0.125).abs() < 1e-15 && (r.x1.1 - 0.375).abs() < 1e-15);
        assert_eq!(r.x2, (-0.5, 0.0));
    }

    #[test]
    fn rod_count_is_seven_n() {
        let p = sample_params().with_n(4);
        let layout = build_layout(&p.validate().unwrap());
        assert_eq!(layout.rods.len(), 28);
    }

    #[test]
    fn flush_walls_in_layout() {
        let layout = build_layout(&sample_params().validate().unwrap());
        let find = |b: Branch, j: usize| {
            *layout
                .rods
                .iter()
                .find(|r| r.branch == b && r.j == j)
                .unwrap()
        };
        for j in 0..16 {
            let r0 = find(Branch::new(0, 0), j);
            let r11 = find(Branch::new(1, 0), j);
            let r12 = find(Branch::new(1, 1), j);
            assert!((r11.x1.0 - r0.x1.0).abs() < 1e-14);
            assert!((r12.x1.1 - r0.x1.1).abs() < 1e-14);
        }
    }

    #[test]
    fn export_has_one_line_per_rod() {
        let layout = build_layout(&sample_params().with_n(3).validate().unwrap());
        let text = layout.export_text();
        let rows: Vec<_> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 21);
        let fields: Vec<_> = rows[0].split_whitespace().collect();
        assert_eq!(fields.len(), 7);
        let x1_lo: f64 = fields[3].parse().unwrap();
        assert_eq!(x1_lo, layout.rods[0].x1.0);
    }

    #[test]
    fn branch_tree_bookkeeping() {
        assert_eq!(Branch::new(2, 3).parent(), Some(Branch::new(1, 1)));
        assert_eq!(
            Branch::new(1, 0).children(),
            Some([Branch::new(2, 0), Branch::new(2, 1)])
        );
        for (k, b) in Branch::ALL.iter().enumerate() {
            assert_eq!(b.index(), k);
        }
        assert_eq!(Branch::new(2, 1).label(), "(2,2)");
    }
}
