//! Conforming rectilinear quad mesh of Ω_ε.
//!
//! Node ordering is fixed: regions in the order body, level-0 rods,
//! level-1 rods, level-2 rods (rods period-major, then branch); inside a
//! region nodes are row-major with rows from top to bottom and columns from
//! left to right. A rod's top row is the parent's bottom row and is not
//! renumbered.

use super::grid::{graded_axis, segment_nodes, Grading, PeriodTemplate};
use super::{Branch, GeometryError, JunctionLayout};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// How rows are placed along x₂.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VerticalPolicy {
    /// Uniform steps no larger than `step` in every segment.
    Uniform { step: f64 },
    /// Near each interface the rows are ε times the cell-grid ξ₂ nodes up
    /// to |ξ₂| ≤ min(band, band_fraction·l/ε); elsewhere steps grow by
    /// `growth` up to `bulk`.
    Matched {
        grading: Grading,
        band: f64,
        band_fraction: f64,
        bulk: f64,
        growth: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshResolution {
    /// Cells across the narrowest rod (≥ 2).
    pub cells_across: usize,
    pub vertical: VerticalPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Body,
    Rod { branch: Branch, j: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeTag {
    UpsilonLateral(Branch),
    RodBase(usize),
    BodyExterior,
    InterfaceQ(Branch),
}

#[derive(Clone, Debug)]
pub struct RegionGrid {
    pub region: Region,
    /// Global column indices `cols.0..=cols.1`.
    pub cols: (usize, usize),
    /// Row ordinates from top to bottom (rods include the shared top row).
    pub rows: Vec<f64>,
    /// Node ids, row-major.
    pub ids: Vec<usize>,
}

impl RegionGrid {
    pub fn ncols(&self) -> usize {
        self.cols.1 - self.cols.0 + 1
    }

    pub fn id(&self, row: usize, col: usize) -> usize {
        self.ids[row * self.ncols() + col]
    }

    pub fn bottom_row(&self) -> &[usize] {
        let nc = self.ncols();
        &self.ids[(self.rows.len() - 1) * nc..]
    }
}

/// Axis-aligned quad; nodes counter-clockwise from bottom-left.
#[derive(Clone, Copy, Debug)]
pub struct MeshCell {
    pub nodes: [usize; 4],
    pub region: usize,
    pub x1: (f64, f64),
    pub x2: (f64, f64),
}

impl MeshCell {
    pub fn area(&self) -> f64 {
        (self.x1.1 - self.x1.0) * (self.x2.1 - self.x2.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub tag: EdgeTag,
    pub normal: [f64; 2],
    pub length: f64,
}

/// Horizontal edge on Q^{(i)} between a parent and its child rod (or the
/// body and a level-0 rod).
#[derive(Clone, Copy, Debug)]
pub struct InterfaceEdge {
    pub nodes: [usize; 2],
    pub tag: EdgeTag,
    pub j: usize,
}

#[derive(Clone, Debug)]
pub struct StructuredMesh {
    pub layout: JunctionLayout,
    pub eps: f64,
    pub template: PeriodTemplate,
    /// Global x₁ columns, N·P + 1 of them.
    pub x1: Vec<f64>,
    /// ξ₂ offsets of the matched band (empty for uniform meshes).
    pub band: Vec<f64>,
    pub coords: Vec<[f64; 2]>,
    pub regions: Vec<RegionGrid>,
    pub cells: Vec<MeshCell>,
    pub boundary: Vec<BoundaryEdge>,
    pub interfaces: Vec<InterfaceEdge>,
}

fn band_offsets(g: &Grading, limit: f64) -> Vec<f64> {
    graded_axis(g, 10.0 * limit.max(1.0) + 10.0)
        .into_iter()
        .take_while(|&s| s <= limit + 1e-12)
        .collect()
}

impl StructuredMesh {
    pub fn build(layout: &JunctionLayout, res: &MeshResolution) -> Result<Self, GeometryError> {
        let p = &layout.params;
        let eps = p.eps();
        let n = p.n;
        let template = PeriodTemplate::new(p, res.cells_across)?;
        let pcells = template.cells();
        let ncol = n * pcells + 1;
        let x1: Vec<f64> = (0..ncol)
            .map(|g| {
                if g == ncol - 1 {
                    p.a
                } else {
                    eps * ((g / pcells) as f64 + template.nodes[g % pcells])
                }
            })
            .collect();

        let ys: [f64; 4] = [0, 1, 2, 3].map(|i| p.interface_y(i));
        let lengths = p.lengths();
        let (body_rows, level_rows, band) = match &res.vertical {
            VerticalPolicy::Uniform { step } => {
                if !(*step > 0.0) {
                    return Err(GeometryError::BadResolution(format!("step = {step}")));
                }
                let seg = |lo: f64, hi: f64| segment_nodes(lo, hi, None, None, eps, *step, 1.0);
                let body = seg(0.0, p.d0);
                let levels = [0, 1, 2].map(|i| seg(ys[i + 1], ys[i]));
                (body, levels, Vec::new())
            }
            VerticalPolicy::Matched {
                grading,
                band,
                band_fraction,
                bulk,
                growth,
            } => {
                let shortest = lengths.iter().copied().fold(p.d0, f64::min);
                let limit = band.min(band_fraction * shortest / eps);
                let b = band_offsets(grading, limit);
                let body = segment_nodes(0.0, p.d0, Some(&b), None, eps, *bulk, *growth);
                let levels = [0, 1, 2].map(|i| {
                    let bottom = (i < 2).then_some(b.as_slice());
                    segment_nodes(ys[i + 1], ys[i], bottom, Some(&b), eps, *bulk, *growth)
                });
                (body, levels, b)
            }
        };
        let desc = |v: &Vec<f64>| -> Vec<f64> { v.iter().rev().copied().collect() };
        let body_rows = desc(&body_rows);
        let level_rows = level_rows.map(|v| desc(&v));

        let mut coords: Vec<[f64; 2]> = Vec::new();
        let mut regions: Vec<RegionGrid> = Vec::new();

        // body
        let mut ids = Vec::with_capacity(body_rows.len() * ncol);
        for &y in &body_rows {
            for &x in &x1 {
                ids.push(coords.len());
                coords.push([x, y]);
            }
        }
        regions.push(RegionGrid {
            region: Region::Body,
            cols: (0, ncol - 1),
            rows: body_rows,
            ids,
        });

        // rods, level by level; the parent's region index is known from
        // the fixed ordering
        let region_index = |b: Branch, j: usize| -> usize {
            match b.level {
                0 => 1 + j,
                1 => 1 + n + 2 * j + b.m,
                _ => 1 + 3 * n + 4 * j + b.m,
            }
        };
        for level in 0..3 {
            for j in 0..n {
                for m in 0..Branch::count_at(level) {
                    let branch = Branch::new(level, m);
                    let (wl, wr) = template.wall(branch);
                    let cols = (j * pcells + wl, j * pcells + wr);
                    let nc = cols.1 - cols.0 + 1;
                    let parent = match branch.parent() {
                        None => &regions[0],
                        Some(pb) => &regions[region_index(pb, j)],
                    };
                    let prow = parent.rows.len() - 1;
                    let mut ids = Vec::with_capacity(level_rows[level].len() * nc);
                    for c in cols.0..=cols.1 {
                        ids.push(parent.id(prow, c - parent.cols.0));
                    }
                    for &y in &level_rows[level][1..] {
                        for c in cols.0..=cols.1 {
                            ids.push(coords.len());
                            coords.push([x1[c], y]);
                        }
                    }
                    debug_assert_eq!(regions.len(), region_index(branch, j));
                    regions.push(RegionGrid {
                        region: Region::Rod { branch, j },
                        cols,
                        rows: level_rows[level].clone(),
                        ids,
                    });
                }
            }
        }

        let mut cells = Vec::new();
        for (ri, g) in regions.iter().enumerate() {
            let nc = g.ncols();
            for r in 0..g.rows.len() - 1 {
                for c in 0..nc - 1 {
                    let tl = g.id(r, c);
                    let tr = g.id(r, c + 1);
                    let bl = g.id(r + 1, c);
                    let br = g.id(r + 1, c + 1);
                    cells.push(MeshCell {
                        nodes: [bl, br, tr, tl],
                        region: ri,
                        x1: (x1[g.cols.0 + c], x1[g.cols.0 + c + 1]),
                        x2: (g.rows[r + 1], g.rows[r]),
                    });
                }
            }
        }

        let mut boundary = Vec::new();
        let mut interfaces = Vec::new();
        let edge = |a: usize, b: usize, tag: EdgeTag, normal: [f64; 2], coords: &[[f64; 2]]| {
            let (pa, pb) = (coords[a], coords[b]);
            BoundaryEdge {
                nodes: [a, b],
                tag,
                normal,
                length: ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt(),
            }
        };
        for g in &regions {
            let nc = g.ncols();
            let nr = g.rows.len();
            let (wall_tag, base_tag) = match g.region {
                Region::Body => (EdgeTag::BodyExterior, EdgeTag::BodyExterior),
                Region::Rod { branch, .. } => {
                    (EdgeTag::UpsilonLateral(branch), EdgeTag::RodBase(branch.level))
                }
            };
            if g.region == Region::Body {
                for c in 0..nc - 1 {
                    boundary.push(edge(g.id(0, c), g.id(0, c + 1), EdgeTag::BodyExterior, [0.0, 1.0], &coords));
                }
            }
            for r in 0..nr - 1 {
                boundary.push(edge(g.id(r, 0), g.id(r + 1, 0), wall_tag, [-1.0, 0.0], &coords));
                boundary.push(edge(g.id(r, nc - 1), g.id(r + 1, nc - 1), wall_tag, [1.0, 0.0], &coords));
            }
            // bottom row: interface under children, exterior elsewhere
            let children: Vec<(Branch, usize, (usize, usize))> = match g.region {
                Region::Body => (0..n)
                    .map(|j| (Branch::new(0, 0), j, regions[region_index(Branch::new(0, 0), j)].cols))
                    .collect(),
                Region::Rod { branch, j } => branch
                    .children()
                    .map(|ch| ch.iter().map(|&b| (b, j, regions[region_index(b, j)].cols)).collect())
                    .unwrap_or_default(),
            };
            for c in 0..nc - 1 {
                let gc = g.cols.0 + c;
                let (a, b) = (g.id(nr - 1, c), g.id(nr - 1, c + 1));
                match children.iter().find(|(_, _, cc)| gc >= cc.0 && gc < cc.1) {
                    Some(&(child, j, _)) => interfaces.push(InterfaceEdge {
                        nodes: [a, b],
                        tag: EdgeTag::InterfaceQ(child),
                        j,
                    }),
                    None => boundary.push(edge(a, b, base_tag, [0.0, -1.0], &coords)),
                }
            }
        }

        let mesh = Self {
            layout: layout.clone(),
            eps,
            template,
            x1,
            band,
            coords,
            regions,
            cells,
            boundary,
            interfaces,
        };
        mesh.check_tags()?;
        Ok(mesh)
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Sum of cell areas.
    pub fn area(&self) -> f64 {
        self.cells.iter().map(MeshCell::area).sum()
    }

    pub fn region_index(&self, b: Branch, j: usize) -> usize {
        let n = self.layout.params.n;
        match b.level {
            0 => 1 + j,
            1 => 1 + n + 2 * j + b.m,
            _ => 1 + 3 * n + 4 * j + b.m,
        }
    }

    /// Template column of global column `g` relative to period `j`.
    pub fn xi1_of_col(&self, g: usize, j: usize) -> f64 {
        let k = g - j * self.template.cells();
        self.template.nodes[k]
    }

    /// Every edge used by exactly one cell must carry a boundary tag and
    /// every interface edge must be shared by two cells.
    pub fn check_tags(&self) -> Result<(), GeometryError> {
        let key = |a: usize, b: usize| (a.min(b), a.max(b));
        let mut count: HashMap<(usize, usize), u32> = HashMap::new();
        for c in &self.cells {
            for k in 0..4 {
                *count.entry(key(c.nodes[k], c.nodes[(k + 1) % 4])).or_default() += 1;
            }
        }
        let mut tagged: HashMap<(usize, usize), u32> = HashMap::new();
        for e in &self.boundary {
            *tagged.entry(key(e.nodes[0], e.nodes[1])).or_default() += 1;
        }
        for e in &self.interfaces {
            let k = key(e.nodes[0], e.nodes[1]);
            if count.get(&k) != Some(&2) {
                return Err(GeometryError::UntaggedBoundary(k.0, k.1));
            }
        }
        let mut keys: Vec<_> = count.iter().filter(|(_, &c)| c == 1).map(|(k, _)| *k).collect();
        keys.sort_unstable();
        for k in keys {
            if tagged.get(&k) != Some(&1) {
                return Err(GeometryError::UntaggedBoundary(k.0, k.1));
            }
        }
        if tagged.len() != self.boundary.len() {
            return Err(GeometryError::UntaggedBoundary(0, 0));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_layout, GeometryParams};

    fn params(n: usize) -> GeometryParams {
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

    fn matched() -> MeshResolution {
        MeshResolution {
            cells_across: 3,
            vertical: VerticalPolicy::Matched {
                grading: Grading {
                    first: 0.04,
                    ratio: 1.15,
                    max_step: 0.5,
                },
                band: 4.0,
                band_fraction: 0.4,
                bulk: 0.05,
                growth: 1.3,
            },
        }
    }

    #[test]
    fn area_matches_layout() {
        for res in [
            matched(),
            MeshResolution {
                cells_across: 2,
                vertical: VerticalPolicy::Uniform { step: 0.1 },
            },
        ] {
            let layout = build_layout(&params(8).validate().unwrap());
            let mesh = StructuredMesh::build(&layout, &res).unwrap();
            let rel = (mesh.area() - layout.area()).abs() / layout.area();
            assert!(rel < 1e-12, "relative area error {rel}");
        }
    }

    #[test]
    fn interfaces_share_nodes() {
        let layout = build_layout(&params(4).validate().unwrap());
        let mesh = StructuredMesh::build(&layout, &matched()).unwrap();
        for (ri, g) in mesh.regions.iter().enumerate().skip(1) {
            if let Region::Rod { branch, j } = g.region {
                let parent = match branch.parent() {
                    None => &mesh.regions[0],
                    Some(pb) => &mesh.regions[mesh.region_index(pb, j)],
                };
                let prow = parent.rows.len() - 1;
                for c in 0..g.ncols() {
                    let id = g.id(0, c);
                    assert_eq!(id, parent.id(prow, g.cols.0 + c - parent.cols.0));
                }
                assert!(ri > 0);
            }
        }
        // one interface edge per cell width under each rod
        let level0: usize = mesh
            .interfaces
            .iter()
            .filter(|e| e.tag == EdgeTag::InterfaceQ(Branch::new(0, 0)))
            .count();
        let (l, r) = mesh.template.wall(Branch::new(0, 0));
        assert_eq!(level0, 4 * (r - l));
    }

    #[test]
    fn node_ordering_is_region_major() {
        let layout = build_layout(&params(3).validate().unwrap());
        let mesh = StructuredMesh::build(&layout, &matched()).unwrap();
        let mut next = 0;
        for g in &mesh.regions {
            let skip = if g.region == Region::Body { 0 } else { g.ncols() };
            for &id in &g.ids[skip..] {
                assert_eq!(id, next);
                next += 1;
            }
        }
        assert_eq!(next, mesh.num_nodes());
        assert_eq!(mesh.regions.len(), 1 + 7 * 3);
    }

    #[test]
    fn rods_have_requested_resolution() {
        let layout = build_layout(&params(4).validate().unwrap());
        let mesh = StructuredMesh::build(&layout, &matched()).unwrap();
        for g in &mesh.regions[1..] {
            assert!(g.ncols() >= 4);
        }
        // band rows sit at ε·s below the level-0 top
        let rows = &mesh.regions[1].rows;
        assert_eq!(rows[0], 0.0);
        assert_eq!(rows[1], -mesh.eps * mesh.band[1]);
    }

    #[test]
    fn boundary_normals_point_outward() {
        let layout = build_layout(&params(4).validate().unwrap());
        let mesh = StructuredMesh::build(&layout, &matched()).unwrap();
        for e in &mesh.boundary {
            let [a, b] = e.nodes;
            let mid = [
                (mesh.coords[a][0] + mesh.coords[b][0]) / 2.0,
                (mesh.coords[a][1] + mesh.coords[b][1]) / 2.0,
            ];
            let probe = [mid[0] + 1e-9 * e.normal[0], mid[1] + 1e-9 * e.normal[1]];
            let inside = mesh.cells.iter().any(|c| {
                probe[0] > c.x1.0 && probe[0] < c.x1.1 && probe[1] > c.x2.0 && probe[1] < c.x2.1
            });
            assert!(!inside, "edge {:?} normal points inward", e.nodes);
        }
    }
}
