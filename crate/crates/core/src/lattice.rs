//! Lattice parameters, lattice matrices, and Niggli reduction.
//!
//! A lattice is stored either as six parameters (lengths in angstrom, angles in
//! degrees) or as a 3x3 matrix whose rows are the lattice vectors. The
//! canonical matrix orientation is lower-triangular: `a` along x, `b` in the
//! xy-plane. Niggli reduction follows the Krivy-Gruber iteration with a
//! volume-scaled stability tolerance.

use crate::error::{Error, Result};

/// Minimum cell volume (cubic angstrom) before a lattice counts as degenerate.
pub const DEGENERATE_VOLUME: f64 = 1e-12;

const NIGGLI_MAX_ITERS: usize = 10_000;

/// Roto-translation invariant cell description: lengths (a, b, c) in angstrom
/// and angles (alpha, beta, gamma) in degrees, each angle within [60, 120].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeParams {
    pub lengths: [f64; 3],
    pub angles: [f64; 3],
}

impl LatticeParams {
    pub fn new(lengths: [f64; 3], angles: [f64; 3]) -> Result<Self> {
        let p = Self { lengths, angles };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &l) in self.lengths.iter().enumerate() {
            if !l.is_finite() || l <= 0.0 {
                return Err(Error::InvalidLattice(format!("length {} = {l}", i)));
            }
        }
        // small slack: Niggli-reduced cells land exactly on the 60/120 boundary
        for (i, &a) in self.angles.iter().enumerate() {
            if !a.is_finite() || a < 60.0 - 1e-9 || a > 120.0 + 1e-9 {
                return Err(Error::InvalidLattice(format!(
                    "angle {} = {a} outside [60, 120] degrees",
                    i
                )));
            }
        }
        let v = self.volume();
        if !v.is_finite() || v < DEGENERATE_VOLUME {
            return Err(Error::InvalidLattice(format!("degenerate cell, volume {v}")));
        }
        Ok(())
    }

    /// Cell volume in cubic angstrom.
    pub fn volume(&self) -> f64 {
        let [a, b, c] = self.lengths;
        let [ca, cb, cg] = [
            self.angles[0].to_radians().cos(),
            self.angles[1].to_radians().cos(),
            self.angles[2].to_radians().cos(),
        ];
        let g = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg;
        a * b * c * g.max(0.0).sqrt()
    }
}

/// Lattice matrix; row `i` is lattice vector `l_i` in cartesian angstrom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeMatrix {
    pub rows: [[f64; 3]; 3],
}

impl LatticeMatrix {
    pub fn det(&self) -> f64 {
        let r = &self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn volume(&self) -> f64 {
        self.det().abs()
    }

    /// Applies the lattice map to one fractional coordinate: sum_k f_k * l_k.
    pub fn cartesian(&self, f: [f64; 3]) -> [f64; 3] {
        let r = &self.rows;
        [
            f[0] * r[0][0] + f[1] * r[1][0] + f[2] * r[2][0],
            f[0] * r[0][1] + f[1] * r[1][1] + f[2] * r[2][1],
            f[0] * r[0][2] + f[1] * r[1][2] + f[2] * r[2][2],
        ]
    }

    fn row_dot(&self, i: usize, j: usize) -> f64 {
        let a = self.rows[i];
        let b = self.rows[j];
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }
}

/// Builds the canonical lower-triangular matrix for the given parameters.
pub fn params_to_matrix(p: &LatticeParams) -> Result<LatticeMatrix> {
    p.validate()?;
    let [a, b, c] = p.lengths;
    let alpha = p.angles[0].to_radians();
    let beta = p.angles[1].to_radians();
    let gamma = p.angles[2].to_radians();
    let (ca, cb, cg) = (alpha.cos(), beta.cos(), gamma.cos());
    let sg = gamma.sin();
    if sg.abs() < 1e-12 {
        return Err(Error::InvalidLattice("gamma is degenerate".into()));
    }
    let cx = c * cb;
    let cy = c * (ca - cb * cg) / sg;
    let cz2 = c * c - cx * cx - cy * cy;
    if cz2 <= 0.0 {
        return Err(Error::InvalidLattice("angles give no 3-D cell".into()));
    }
    let m = LatticeMatrix {
        rows: [
            [a, 0.0, 0.0],
            [b * cg, b * sg, 0.0],
            [cx, cy, cz2.sqrt()],
        ],
    };
    if m.volume() < DEGENERATE_VOLUME {
        return Err(Error::InvalidLattice(format!(
            "degenerate cell, volume {}",
            m.volume()
        )));
    }
    Ok(m)
}

/// Extracts lengths (row norms) and pairwise angles in degrees.
pub fn matrix_to_params(m: &LatticeMatrix) -> Result<LatticeParams> {
    if m.volume() < DEGENERATE_VOLUME {
        return Err(Error::InvalidLattice(
            "near-collinear rows, volume below 1e-12".into(),
        ));
    }
    let mut lengths = [0.0; 3];
    for i in 0..3 {
        lengths[i] = m.row_dot(i, i).sqrt();
    }
    let angle = |i: usize, j: usize| -> f64 {
        let c = m.row_dot(i, j) / (lengths[i] * lengths[j]);
        c.clamp(-1.0, 1.0).acos().to_degrees()
    };
    Ok(LatticeParams {
        lengths,
        angles: [angle(1, 2), angle(0, 2), angle(0, 1)],
    })
}

/// Integer change of basis applied by Niggli reduction; rows express the new
/// lattice vectors in terms of the old ones, determinant always +1.
pub type BasisChange = [[i64; 3]; 3];

fn apply_row_op(basis: &mut [[f64; 3]; 3], change: &mut BasisChange, op: &dyn Fn(&mut [[f64; 3]; 3])) {
    op(basis);
    let mut c = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = change[i][j] as f64;
        }
    }
    op(&mut c);
    for i in 0..3 {
        for j in 0..3 {
            change[i][j] = c[i][j].round() as i64;
        }
    }
}

/// Krivy-Gruber Niggli reduction.
///
/// Returns the reduced matrix together with the unimodular change of basis
/// `P` such that `reduced = P * input` (rows as lattice vectors). Volume is
/// preserved exactly up to floating-point recomputation.
pub fn niggli_reduce(m: &LatticeMatrix) -> Result<(LatticeMatrix, BasisChange)> {
    let vol = m.volume();
    if vol < DEGENERATE_VOLUME {
        return Err(Error::InvalidLattice(format!("degenerate cell, volume {vol}")));
    }
    let eps = 1e-5 * vol.cbrt();

    let mut basis = m.rows;
    let mut change: BasisChange = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];

    let gt = |x: f64, y: f64| x > y + eps;
    let lt = |x: f64, y: f64| x < y - eps;
    let eq = move |x: f64, y: f64| !gt(x, y) && !lt(x, y);

    let mut iters = 0usize;
    loop {
        iters += 1;
        if iters > NIGGLI_MAX_ITERS {
            return Err(Error::ReductionFailure(NIGGLI_MAX_ITERS));
        }

        let metric = LatticeMatrix { rows: basis };
        let aa = metric.row_dot(0, 0);
        let bb = metric.row_dot(1, 1);
        let cc = metric.row_dot(2, 2);
        let xi = 2.0 * metric.row_dot(1, 2);
        let eta = 2.0 * metric.row_dot(0, 2);
        let zeta = 2.0 * metric.row_dot(0, 1);

        // step 1: order a, b
        if gt(aa, bb) || (eq(aa, bb) && gt(xi.abs(), eta.abs())) {
            apply_row_op(&mut basis, &mut change, &|b| {
                b.swap(0, 1);
                for v in &mut b[2] {
                    *v = -*v;
                }
            });
            continue;
        }
        // step 2: order b, c
        if gt(bb, cc) || (eq(bb, cc) && gt(eta.abs(), zeta.abs())) {
            apply_row_op(&mut basis, &mut change, &|b| {
                b.swap(1, 2);
                for v in &mut b[0] {
                    *v = -*v;
                }
            });
            continue;
        }

        // steps 3/4: fix the signs of the off-diagonal metric terms
        let sign_of = |x: f64| {
            if x > eps {
                1i64
            } else if x < -eps {
                -1
            } else {
                0
            }
        };
        let (l, mm, n) = (sign_of(xi), sign_of(eta), sign_of(zeta));
        let (i, j, k) = if l * mm * n == 1 {
            (l, mm, n)
        } else {
            let mut i = if l == 1 { -1 } else { 1 };
            let mut j = if mm == 1 { -1 } else { 1 };
            let mut k = if n == 1 { -1 } else { 1 };
            if i * j * k == -1 {
                if l == 0 {
                    i = -1;
                } else if mm == 0 {
                    j = -1;
                } else {
                    k = -1;
                }
            }
            (i, j, k)
        };
        if i == -1 || j == -1 || k == -1 {
            let signs = [i as f64, j as f64, k as f64];
            apply_row_op(&mut basis, &mut change, &move |b| {
                for r in 0..3 {
                    for v in &mut b[r] {
                        *v *= signs[r];
                    }
                }
            });
            // fall through to steps 5-8 with updated signs
        }

        let metric = LatticeMatrix { rows: basis };
        let aa = metric.row_dot(0, 0);
        let bb = metric.row_dot(1, 1);
        let xi = 2.0 * metric.row_dot(1, 2);
        let eta = 2.0 * metric.row_dot(0, 2);
        let zeta = 2.0 * metric.row_dot(0, 1);

        // step 5: reduce |xi| against b
        if gt(xi.abs(), bb) || (eq(xi, bb) && lt(2.0 * eta, zeta)) || (eq(xi, -bb) && lt(zeta, 0.0)) {
            let s = if xi > 0.0 { 1.0 } else { -1.0 };
            apply_row_op(&mut basis, &mut change, &move |b| {
                for t in 0..3 {
                    b[2][t] -= s * b[1][t];
                }
            });
            continue;
        }
        // step 6: reduce |eta| against a
        if gt(eta.abs(), aa) || (eq(eta, aa) && lt(2.0 * xi, zeta)) || (eq(eta, -aa) && lt(zeta, 0.0)) {
            let s = if eta > 0.0 { 1.0 } else { -1.0 };
            apply_row_op(&mut basis, &mut change, &move |b| {
                for t in 0..3 {
                    b[2][t] -= s * b[0][t];
                }
            });
            continue;
        }
        // step 7: reduce |zeta| against a
        if gt(zeta.abs(), aa) || (eq(zeta, aa) && lt(2.0 * xi, eta)) || (eq(zeta, -aa) && lt(eta, 0.0)) {
            let s = if zeta > 0.0 { 1.0 } else { -1.0 };
            apply_row_op(&mut basis, &mut change, &move |b| {
                for t in 0..3 {
                    b[1][t] -= s * b[0][t];
                }
            });
            continue;
        }
        // step 8: final body-diagonal condition
        let total = xi + eta + zeta + aa + bb;
        if lt(total, 0.0) || (eq(total, 0.0) && gt(2.0 * (aa + eta) + zeta, 0.0)) {
            apply_row_op(&mut basis, &mut change, &|b| {
                for t in 0..3 {
                    b[2][t] += b[0][t] + b[1][t];
                }
            });
            continue;
        }
        break;
    }

    let reduced = LatticeMatrix { rows: basis };
    debug_assert!({
        let det = det3_i64(&change);
        det == 1
    });
    Ok((reduced, change))
}

pub(crate) fn det3_i64(m: &BasisChange) -> i64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Integer inverse of a unimodular matrix (adjugate divided by determinant).
pub(crate) fn inverse_unimodular(m: &BasisChange) -> BasisChange {
    let det = det3_i64(m);
    debug_assert!(det == 1 || det == -1);
    let adj = [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
        ],
        [
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
        ],
        [
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ];
    let mut out = adj;
    if det == -1 {
        for row in &mut out {
            for v in row {
                *v = -*v;
            }
        }
    }
    out
}
