//! The crystal state: atom types, fractional coordinates, and lattice
//! parameters for one primitive unit cell.

use std::collections::BTreeMap;

use crate::elements::MAX_Z;
use crate::error::{Error, Result};
use crate::lattice::{
    inverse_unimodular, matrix_to_params, niggli_reduce, params_to_matrix, LatticeParams,
};
use crate::torus::wrap_unit;

#[derive(Debug, Clone, PartialEq)]
pub struct Crystal {
    /// Atomic numbers, one per site.
    pub atom_types: Vec<u8>,
    /// Fractional coordinates in [0,1), one triple per site.
    pub frac_coords: Vec<[f64; 3]>,
    pub lattice: LatticeParams,
}

impl Crystal {
    pub fn new(atom_types: Vec<u8>, frac_coords: Vec<[f64; 3]>, lattice: LatticeParams) -> Result<Self> {
        let c = Self {
            atom_types,
            frac_coords,
            lattice,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.atom_types.is_empty() {
            return Err(Error::InvalidCrystal("no sites".into()));
        }
        if self.atom_types.len() != self.frac_coords.len() {
            return Err(Error::InvalidCrystal(format!(
                "{} atom types but {} coordinates",
                self.atom_types.len(),
                self.frac_coords.len()
            )));
        }
        for (i, &z) in self.atom_types.iter().enumerate() {
            if z == 0 || z > MAX_Z {
                return Err(Error::InvalidCrystal(format!("site {i}: atomic number {z}")));
            }
        }
        for (i, f) in self.frac_coords.iter().enumerate() {
            for (axis, &x) in f.iter().enumerate() {
                if !x.is_finite() || !(0.0..1.0).contains(&x) {
                    return Err(Error::InvalidCrystal(format!(
                        "site {i} axis {axis}: fractional coordinate {x} outside [0,1)"
                    )));
                }
            }
        }
        self.lattice.validate()
    }

    pub fn n_sites(&self) -> usize {
        self.atom_types.len()
    }

    pub fn volume(&self) -> f64 {
        self.lattice.volume()
    }

    /// Element -> site count map.
    pub fn composition(&self) -> BTreeMap<u8, usize> {
        let mut m = BTreeMap::new();
        for &z in &self.atom_types {
            *m.entry(z).or_insert(0) += 1;
        }
        m
    }
}

/// Cartesian coordinates of every site, one triple per site.
pub fn frac_to_cart(c: &Crystal) -> Result<Vec<[f64; 3]>> {
    let m = params_to_matrix(&c.lattice)?;
    Ok(c.frac_coords.iter().map(|&f| m.cartesian(f)).collect())
}

/// Half-open image search radius: 1 normally, 2 for strongly skewed or
/// elongated cells where the nearest image can sit two cells away.
fn image_range(p: &LatticeParams) -> i64 {
    let skewed = p.angles.iter().any(|&a| !(75.0..=105.0).contains(&a));
    let lmin = p.lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    let lmax = p.lengths.iter().cloned().fold(0.0f64, f64::max);
    if skewed || lmax / lmin > 3.0 {
        2
    } else {
        1
    }
}

/// Minimum-image cartesian distance over all distinct site pairs.
///
/// Returns +infinity for unary crystals, which have no pair.
pub fn min_periodic_distance(c: &Crystal) -> Result<f64> {
    let n = c.n_sites();
    if n < 2 {
        return Ok(f64::INFINITY);
    }
    let m = params_to_matrix(&c.lattice)?;
    let range = image_range(&c.lattice);
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d = [0.0; 3];
            for t in 0..3 {
                let raw = c.frac_coords[i][t] - c.frac_coords[j][t];
                d[t] = raw - raw.round();
            }
            for ka in -range..=range {
                for kb in -range..=range {
                    for kc in -range..=range {
                        let v = m.cartesian([d[0] + ka as f64, d[1] + kb as f64, d[2] + kc as f64]);
                        let dist2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                        if dist2 < best {
                            best = dist2;
                        }
                    }
                }
            }
        }
    }
    Ok(best.sqrt())
}

/// Distance from a site to its own nearest periodic image, i.e. the shortest
/// lattice vector reachable within the search box.
pub fn shortest_self_image_distance(p: &LatticeParams) -> Result<f64> {
    let m = params_to_matrix(p)?;
    let range = image_range(p).max(2);
    let mut best = f64::INFINITY;
    for ka in -range..=range {
        for kb in -range..=range {
            for kc in -range..=range {
                if ka == 0 && kb == 0 && kc == 0 {
                    continue;
                }
                let v = m.cartesian([ka as f64, kb as f64, kc as f64]);
                best = best.min((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt());
            }
        }
    }
    Ok(best)
}

/// Replaces the cell by its Niggli-reduced representative, rewriting the
/// fractional coordinates into the new basis.
pub fn niggli_reduce_crystal(c: &Crystal) -> Result<Crystal> {
    let m = params_to_matrix(&c.lattice)?;
    let (reduced, change) = niggli_reduce(&m)?;
    // cartesian positions are invariant: f' = (P^T)^{-1} f
    let inv = inverse_unimodular(&change);
    let coords = c
        .frac_coords
        .iter()
        .map(|&f| {
            let mut out = [0.0; 3];
            for i in 0..3 {
                // (P^{-1})^T row i = column i of inv
                out[i] = wrap_unit(
                    inv[0][i] as f64 * f[0] + inv[1][i] as f64 * f[1] + inv[2][i] as f64 * f[2],
                );
            }
            out
        })
        .collect();
    Ok(Crystal {
        atom_types: c.atom_types.clone(),
        frac_coords: coords,
        lattice: matrix_to_params(&reduced)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cubic(a: f64, sites: Vec<(u8, [f64; 3])>) -> Crystal {
        let (atom_types, frac_coords) = sites.into_iter().unzip();
        Crystal::new(
            atom_types,
            frac_coords,
            LatticeParams::new([a, a, a], [90.0, 90.0, 90.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn cart_of_cubic_center() {
        let c = cubic(2.0, vec![(11, [0.5, 0.5, 0.5]), (17, [0.0, 0.0, 0.0])]);
        let cart = frac_to_cart(&c).unwrap();
        assert_eq!(cart[0], [1.0, 1.0, 1.0]);
        assert_eq!(cart[1], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn cart_matches_row_combination_for_triclinic() {
        let lattice = LatticeParams::new([3.0, 4.0, 5.0], [80.0, 100.0, 95.0]).unwrap();
        let c = Crystal::new(vec![6], vec![[0.3, 0.6, 0.9]], lattice).unwrap();
        let m = params_to_matrix(&c.lattice).unwrap();
        let cart = frac_to_cart(&c).unwrap()[0];
        let f = c.frac_coords[0];
        for t in 0..3 {
            let direct = f[0] * m.rows[0][t] + f[1] * m.rows[1][t] + f[2] * m.rows[2][t];
            assert_relative_eq!(cart[t], direct, max_relative = 1e-14);
        }
    }

    #[test]
    fn min_distance_simple_and_wrapped() {
        let c = cubic(4.0, vec![(11, [0.0, 0.0, 0.0]), (17, [0.5, 0.0, 0.0])]);
        assert_relative_eq!(min_periodic_distance(&c).unwrap(), 2.0, max_relative = 1e-12);
        let c = cubic(4.0, vec![(11, [0.0, 0.0, 0.0]), (17, [0.95, 0.0, 0.0])]);
        assert_relative_eq!(min_periodic_distance(&c).unwrap(), 0.2, max_relative = 1e-9);
    }

    #[test]
    fn unary_min_distance_is_infinite() {
        let c = cubic(4.0, vec![(26, [0.2, 0.3, 0.4])]);
        assert_eq!(min_periodic_distance(&c).unwrap(), f64::INFINITY);
    }

    #[test]
    fn min_distance_invariant_under_global_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let lattice = LatticeParams::new(
                [3.0 + rng.gen::<f64>(), 3.5, 4.0],
                [85.0, 95.0, 100.0],
            )
            .unwrap();
            let n = 4;
            let coords: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.gen(), rng.gen(), rng.gen()])
                .collect();
            let c = Crystal::new(vec![8; n], coords.clone(), lattice).unwrap();
            let u = [rng.gen::<f64>(), rng.gen(), rng.gen()];
            let shifted: Vec<[f64; 3]> = coords
                .iter()
                .map(|f| [wrap_unit(f[0] + u[0]), wrap_unit(f[1] + u[1]), wrap_unit(f[2] + u[2])])
                .collect();
            let cs = Crystal::new(vec![8; n], shifted, lattice).unwrap();
            assert_relative_eq!(
                min_periodic_distance(&c).unwrap(),
                min_periodic_distance(&cs).unwrap(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn self_image_distance_is_shortest_lattice_vector() {
        let p = LatticeParams::new([0.4, 0.4, 0.4], [90.0, 90.0, 90.0]).unwrap();
        assert_relative_eq!(shortest_self_image_distance(&p).unwrap(), 0.4, max_relative = 1e-12);
    }

    #[test]
    fn validation_rejects_out_of_range_coordinate() {
        let lattice = LatticeParams::new([4.0, 4.0, 4.0], [90.0, 90.0, 90.0]).unwrap();
        let err = Crystal::new(vec![11], vec![[1.0, 0.0, 0.0]], lattice).unwrap_err();
        assert!(err.to_string().contains("site 0"));
    }

    #[test]
    fn niggli_reduction_preserves_geometry() {
        // skewed supercell basis of a cubic lattice
        let lattice = LatticeParams::new([4.0, 4.0, 8.5], [75.0, 80.0, 90.0]).unwrap();
        let c = Crystal::new(
            vec![11, 17],
            vec![[0.1, 0.2, 0.3], [0.6, 0.7, 0.8]],
            lattice,
        )
        .unwrap();
        let r = niggli_reduce_crystal(&c).unwrap();
        r.validate().unwrap();
        assert_relative_eq!(r.volume(), c.volume(), max_relative = 1e-9);
        assert_relative_eq!(
            min_periodic_distance(&r).unwrap(),
            min_periodic_distance(&c).unwrap(),
            epsilon = 1e-9
        );
    }
}
