//! Bilinear (Q1) elements on axis-aligned rectangles.
//!
//! Local node order is counter-clockwise from the bottom-left corner:
//! (0,0), (1,0), (1,1), (0,1) in reference coordinates.

use crate::linalg::CscMatrix;

/// Two-point Gauss abscissae on [0, 1]; both weights are 1/2.
pub const GAUSS2: [f64; 2] = [
    0.5 - 0.288_675_134_594_812_9,
    0.5 + 0.288_675_134_594_812_9,
];

/// Three-point Gauss rule on [0, 1] (abscissae, weights).
pub const GAUSS3: ([f64; 3], [f64; 3]) = (
    [
        0.5 - 0.387_298_334_620_741_7,
        0.5,
        0.5 + 0.387_298_334_620_741_7,
    ],
    [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0],
);

pub type Local = [[f64; 4]; 4];

#[inline]
pub fn shape(s: f64, t: f64) -> [f64; 4] {
    [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t]
}

/// Physical gradients of the shape functions on an hx × hy cell.
#[inline]
pub fn shape_grad(s: f64, t: f64, hx: f64, hy: f64) -> [[f64; 2]; 4] {
    [
        [-(1.0 - t) / hx, -(1.0 - s) / hy],
        [(1.0 - t) / hx, -s / hy],
        [t / hx, s / hy],
        [-t / hx, (1.0 - s) / hy],
    ]
}

/// Exact stiffness matrix (what 2×2 Gauss integrates exactly).
pub fn stiffness(hx: f64, hy: f64) -> Local {
    let a = hy / hx / 6.0;
    let b = hx / hy / 6.0;
    let kx = [
        [2.0, -2.0, -1.0, 1.0],
        [-2.0, 2.0, 1.0, -1.0],
        [-1.0, 1.0, 2.0, -2.0],
        [1.0, -1.0, -2.0, 2.0],
    ];
    let ky = [
        [2.0, 1.0, -1.0, -2.0],
        [1.0, 2.0, -2.0, -1.0],
        [-1.0, -2.0, 2.0, 1.0],
        [-2.0, -1.0, 1.0, 2.0],
    ];
    let mut k = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            k[i][j] = a * kx[i][j] + b * ky[i][j];
        }
    }
    k
}

/// Exact consistent mass matrix.
pub fn mass(hx: f64, hy: f64) -> Local {
    let c = hx * hy / 36.0;
    let m = [
        [4.0, 2.0, 1.0, 2.0],
        [2.0, 4.0, 2.0, 1.0],
        [1.0, 2.0, 4.0, 2.0],
        [2.0, 1.0, 2.0, 4.0],
    ];
    m.map(|r| r.map(|v| c * v))
}

/// Sums local matrices into a global sparse matrix.
pub fn assemble<I>(n: usize, cells: I) -> CscMatrix
where
    I: IntoIterator<Item = ([usize; 4], Local)>,
{
    let mut t = Vec::new();
    for (nodes, k) in cells {
        for a in 0..4 {
            for b in 0..4 {
                t.push((nodes[a], nodes[b], k[a][b]));
            }
        }
    }
    CscMatrix::from_triplets(n, &t)
}
