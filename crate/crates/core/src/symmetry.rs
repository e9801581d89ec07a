//! Orbit partitioning from supplied symmetry operations, canonical
//! composition- and symmetry-aware atom ordering, and hierarchical inter-
//! and intra-orbit permutation augmentation.
//!
//! Symmetry operations arrive with the dataset in the fractional basis; sites
//! are grouped into orbits (closures of the op action), orbits into Wyckoff
//! groups keyed by (element, Wyckoff letter), and groups ordered by Pauling
//! electronegativity ascending, atomic number, then letter. Augmentation
//! permutes orbit blocks within a group and sites within each orbit, then
//! applies one global modulo translation.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::crystal::Crystal;
use crate::elements::element_sort_key;
use crate::error::{Error, Result};
use crate::torus::wrap_unit;

/// Matching tolerance (fractional, component-wise) for the op action.
pub const DEFAULT_ORBIT_TOL: f64 = 1e-3;

/// A space-group operation stored directly in the fractional basis, acting as
/// f -> (R f + t) mod 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryOp {
    pub rotation: [[i32; 3]; 3],
    pub translation: [f64; 3],
}

impl SymmetryOp {
    pub fn identity() -> Self {
        Self {
            rotation: [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
            translation: [0.0; 3],
        }
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.rotation == [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
            && self.translation.iter().all(|&t| t.min(1.0 - t).abs() <= tol)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if det != 1 && det != -1 {
            return Err(Error::InconsistentSymmetry(format!(
                "rotation determinant {det} not in {{-1, +1}}"
            )));
        }
        for &t in &self.translation {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::InconsistentSymmetry(format!(
                    "translation component {t} outside [0,1)"
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, f: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            let mut v = self.translation[i];
            for j in 0..3 {
                v += self.rotation[i][j] as f64 * f[j];
            }
            out[i] = wrap_unit(v);
        }
        out
    }
}

/// One set of symmetry-equivalent sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Orbit {
    pub site_indices: Vec<usize>,
    pub element: u8,
    pub wyckoff_letter: char,
}

/// Orbits sharing the same element and Wyckoff letter.
#[derive(Debug, Clone, PartialEq)]
pub struct WyckoffGroup {
    pub element: u8,
    pub wyckoff_letter: char,
    pub orbits: Vec<Orbit>,
}

impl WyckoffGroup {
    pub fn n_sites(&self) -> usize {
        self.orbits.iter().map(|o| o.site_indices.len()).sum()
    }
}

/// Partition of all sites into Wyckoff groups, in canonical group order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitStructure {
    pub groups: Vec<WyckoffGroup>,
}

impl OrbitStructure {
    pub fn n_sites(&self) -> usize {
        self.groups.iter().map(|g| g.n_sites()).sum()
    }

    /// Checks that the orbits partition {0..n} exactly.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for g in &self.groups {
            for o in &g.orbits {
                if o.element != g.element || o.wyckoff_letter != g.wyckoff_letter {
                    return Err(Error::InconsistentSymmetry(
                        "orbit key differs from its group key".into(),
                    ));
                }
                for &i in &o.site_indices {
                    if i >= n || seen[i] {
                        return Err(Error::InconsistentSymmetry(format!(
                            "site {i} missing or repeated in orbit partition"
                        )));
                    }
                    seen[i] = true;
                }
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(Error::InconsistentSymmetry("orbits do not cover all sites".into()))
        }
    }
}

fn wrapped_component_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

fn sites_match(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    (0..3).all(|t| wrapped_component_dist(a[t], b[t]) <= tol)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let root = self.find(self.0[i]);
            self.0[i] = root;
        }
        self.0[i]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra] = rb;
        }
    }
}

/// Group key ordering: electronegativity ascending (untabulated last), atomic
/// number, then Wyckoff letter, keeping each element's groups contiguous.
fn group_key(element: u8, letter: char) -> Result<(f64, u8, char)> {
    let (en, z) = element_sort_key(element)?;
    Ok((en, z, letter))
}

fn coord_key(f: &[f64; 3]) -> [f64; 3] {
    *f
}

fn min_coord_key(crystal: &Crystal, orbit: &Orbit) -> [f64; 3] {
    let mut best = crystal.frac_coords[orbit.site_indices[0]];
    for &i in &orbit.site_indices[1..] {
        let c = crystal.frac_coords[i];
        if c < best {
            best = c;
        }
    }
    best
}

/// Partitions sites into symmetry orbits by closing the supplied op action.
///
/// Two sites join one orbit iff some op maps one onto the other within `tol`
/// (component-wise, mod 1) and they share element and Wyckoff letter. An op
/// image that matches no site of the same element, or that lands on a site
/// with a different letter, is an inconsistency.
pub fn partition_orbits(
    crystal: &Crystal,
    ops: &[SymmetryOp],
    wyckoff_letters: &[char],
    tol: f64,
) -> Result<OrbitStructure> {
    let n = crystal.n_sites();
    if ops.is_empty() {
        return Err(Error::InconsistentSymmetry("no symmetry operations".into()));
    }
    if wyckoff_letters.len() != n {
        return Err(Error::InconsistentSymmetry(format!(
            "{} wyckoff letters for {n} sites",
            wyckoff_letters.len()
        )));
    }
    for op in ops {
        op.validate()?;
    }

    let mut uf = UnionFind::new(n);
    for op in ops {
        for i in 0..n {
            let image = op.apply(crystal.frac_coords[i]);
            // nearest same-element site within tolerance
            let mut found: Option<(usize, f64)> = None;
            for j in 0..n {
                if crystal.atom_types[j] != crystal.atom_types[i] {
                    continue;
                }
                if sites_match(image, crystal.frac_coords[j], tol) {
                    let d: f64 = (0..3)
                        .map(|t| wrapped_component_dist(image[t], crystal.frac_coords[j][t]).powi(2))
                        .sum();
                    if found.map_or(true, |(_, fd)| d < fd) {
                        found = Some((j, d));
                    }
                }
            }
            let Some((j, _)) = found else {
                return Err(Error::InconsistentSymmetry(format!(
                    "op image of site {i} matches no site of element {}",
                    crystal.atom_types[i]
                )));
            };
            if wyckoff_letters[j] != wyckoff_letters[i] {
                return Err(Error::InconsistentSymmetry(format!(
                    "op maps site {i} (letter {}) onto site {j} (letter {})",
                    wyckoff_letters[i], wyckoff_letters[j]
                )));
            }
            uf.union(i, j);
        }
    }

    // collect equivalence classes
    let mut class_of = vec![usize::MAX; n];
    let mut orbits: Vec<Orbit> = Vec::new();
    for i in 0..n {
        let root = uf.find(i);
        if class_of[root] == usize::MAX {
            class_of[root] = orbits.len();
            orbits.push(Orbit {
                site_indices: Vec::new(),
                element: crystal.atom_types[i],
                wyckoff_letter: wyckoff_letters[i],
            });
        }
        orbits[class_of[root]].site_indices.push(i);
    }

    // group by (element, letter) and order canonically
    let mut groups: Vec<WyckoffGroup> = Vec::new();
    for orbit in orbits {
        match groups
            .iter_mut()
            .find(|g| g.element == orbit.element && g.wyckoff_letter == orbit.wyckoff_letter)
        {
            Some(g) => g.orbits.push(orbit),
            None => groups.push(WyckoffGroup {
                element: orbit.element,
                wyckoff_letter: orbit.wyckoff_letter,
                orbits: vec![orbit],
            }),
        }
    }
    let mut keyed = groups
        .into_iter()
        .map(|g| group_key(g.element, g.wyckoff_letter).map(|k| (k, g)))
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut groups: Vec<WyckoffGroup> = keyed.into_iter().map(|(_, g)| g).collect();
    for g in &mut groups {
        g.orbits
            .sort_by(|a, b| min_coord_key(crystal, a).partial_cmp(&min_coord_key(crystal, b)).unwrap());
    }

    let structure = OrbitStructure { groups };
    structure.validate(n)?;
    Ok(structure)
}

fn apply_site_permutation(crystal: &Crystal, perm: &[usize]) -> Crystal {
    Crystal {
        atom_types: perm.iter().map(|&i| crystal.atom_types[i]).collect(),
        frac_coords: perm.iter().map(|&i| crystal.frac_coords[i]).collect(),
        lattice: crystal.lattice,
    }
}

/// Reorders sites into the canonical sequence: groups by (electronegativity,
/// atomic number, letter), orbits within a group by their smallest coordinate
/// triple, sites within an orbit by coordinate triple. Deterministic and
/// idempotent.
pub fn canonical_order(crystal: &Crystal, structure: &OrbitStructure) -> Result<(Crystal, OrbitStructure)> {
    structure.validate(crystal.n_sites())?;
    let mut perm: Vec<usize> = Vec::with_capacity(crystal.n_sites());
    let mut new_groups: Vec<WyckoffGroup> = Vec::with_capacity(structure.groups.len());
    // verify keys are computable before committing (unsupported elements fail here)
    for g in &structure.groups {
        group_key(g.element, g.wyckoff_letter)?;
    }
    let mut next = 0usize;
    for g in &structure.groups {
        let mut orbits = g.orbits.clone();
        orbits.sort_by(|a, b| {
            min_coord_key(crystal, a)
                .partial_cmp(&min_coord_key(crystal, b))
                .unwrap()
        });
        let mut new_orbits = Vec::with_capacity(orbits.len());
        for o in &orbits {
            let mut sites = o.site_indices.clone();
            sites.sort_by(|&a, &b| {
                coord_key(&crystal.frac_coords[a])
                    .partial_cmp(&coord_key(&crystal.frac_coords[b]))
                    .unwrap()
            });
            let indices = (next..next + sites.len()).collect();
            next += sites.len();
            perm.extend_from_slice(&sites);
            new_orbits.push(Orbit {
                site_indices: indices,
                element: o.element,
                wyckoff_letter: o.wyckoff_letter,
            });
        }
        new_groups.push(WyckoffGroup {
            element: g.element,
            wyckoff_letter: g.wyckoff_letter,
            orbits: new_orbits,
        });
    }
    Ok((
        apply_site_permutation(crystal, &perm),
        OrbitStructure { groups: new_groups },
    ))
}

/// Draws one hierarchical permutation: orbit blocks shuffled within each
/// group, sites shuffled within each orbit; group order and block contiguity
/// preserved. `perm[new_position] = old_site_index`.
pub fn hierarchical_permutation<R: Rng>(structure: &OrbitStructure, rng: &mut R) -> Vec<usize> {
    let mut perm = Vec::with_capacity(structure.n_sites());
    for g in &structure.groups {
        let mut order: Vec<usize> = (0..g.orbits.len()).collect();
        order.shuffle(rng);
        for oi in order {
            let mut sites = g.orbits[oi].site_indices.clone();
            sites.shuffle(rng);
            perm.extend_from_slice(&sites);
        }
    }
    perm
}

/// Training augmentation: hierarchical permutation followed by one global
/// modulo translation drawn uniformly from [0,1)^3. Expects the crystal in
/// canonical order.
pub fn augment<R: Rng>(structure: &OrbitStructure, crystal: &Crystal, rng: &mut R) -> Crystal {
    let perm = hierarchical_permutation(structure, rng);
    let mut out = apply_site_permutation(crystal, &perm);
    let shift: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    for f in &mut out.frac_coords {
        for t in 0..3 {
            f[t] = wrap_unit(f[t] + shift[t]);
        }
    }
    out
}

/// log10 of the reduced permutation-space size: the product over groups of
/// (number of orbits)! times the product over orbits of (orbit size)!.
pub fn reduced_perm_space_log10(structure: &OrbitStructure) -> f64 {
    let mut ln_total = 0.0;
    for g in &structure.groups {
        ln_total += ln_factorial(g.orbits.len());
        for o in &g.orbits {
            ln_total += ln_factorial(o.site_indices.len());
        }
    }
    ln_total / std::f64::consts::LN_10
}

/// log10 of the full permutation space n!.
pub fn full_perm_space_log10(n: usize) -> f64 {
    ln_factorial(n) / std::f64::consts::LN_10
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeParams;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn cubic_crystal(types: Vec<u8>, coords: Vec<[f64; 3]>) -> Crystal {
        Crystal::new(
            types,
            coords,
            LatticeParams::new([4.0, 4.0, 4.0], [90.0, 90.0, 90.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_only_gives_singletons() {
        let c = cubic_crystal(vec![8, 8, 8], vec![[0.1, 0.1, 0.1], [0.3, 0.3, 0.3], [0.6, 0.6, 0.6]]);
        let s = partition_orbits(&c, &[SymmetryOp::identity()], &['a', 'a', 'a'], 1e-3).unwrap();
        assert_eq!(s.groups.len(), 1);
        assert_eq!(s.groups[0].orbits.len(), 3);
        assert!(s.groups[0].orbits.iter().all(|o| o.site_indices.len() == 1));
    }

    #[test]
    fn rocksalt_inversion_keeps_elements_apart() {
        let c = cubic_crystal(vec![11, 17], vec![[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]);
        let inversion = SymmetryOp {
            rotation: [[-1, 0, 0], [0, -1, 0], [0, 0, -1]],
            translation: [0.0; 3],
        };
        let s = partition_orbits(
            &c,
            &[SymmetryOp::identity(), inversion],
            &['a', 'b'],
            1e-3,
        )
        .unwrap();
        assert_eq!(s.groups.len(), 2);
        for g in &s.groups {
            assert_eq!(g.orbits.len(), 1);
            assert_eq!(g.orbits[0].site_indices.len(), 1);
        }
    }

    #[test]
    fn fourfold_rotation_builds_one_orbit() {
        let rot = SymmetryOp {
            rotation: [[0, -1, 0], [1, 0, 0], [0, 0, 1]],
            translation: [0.0; 3],
        };
        let rot2 = SymmetryOp {
            rotation: [[-1, 0, 0], [0, -1, 0], [0, 0, 1]],
            translation: [0.0; 3],
        };
        let rot3 = SymmetryOp {
            rotation: [[0, 1, 0], [-1, 0, 0], [0, 0, 1]],
            translation: [0.0; 3],
        };
        let c = cubic_crystal(
            vec![6; 4],
            vec![
                [0.2, 0.0, 0.0],
                [0.0, 0.2, 0.0],
                [0.8, 0.0, 0.0],
                [0.0, 0.8, 0.0],
            ],
        );
        let s = partition_orbits(
            &c,
            &[SymmetryOp::identity(), rot, rot2, rot3],
            &['h'; 4],
            1e-3,
        )
        .unwrap();
        assert_eq!(s.groups.len(), 1);
        assert_eq!(s.groups[0].orbits.len(), 1);
        assert_eq!(s.groups[0].orbits[0].site_indices.len(), 4);
    }

    #[test]
    fn inconsistent_op_is_rejected() {
        let c = cubic_crystal(vec![6, 6], vec![[0.2, 0.0, 0.0], [0.0, 0.2, 0.0]]);
        let bogus = SymmetryOp {
            rotation: [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
            translation: [0.25, 0.0, 0.0],
        };
        let err = partition_orbits(&c, &[bogus], &['a', 'a'], 1e-3).unwrap_err();
        assert!(matches!(err, Error::InconsistentSymmetry(_)));
    }

    #[test]
    fn canonical_order_electronegativity_ascending() {
        // Th (EN 1.3) must precede C (EN 2.55) despite the larger atomic number
        let c = cubic_crystal(
            vec![6, 90, 90],
            vec![[0.9, 0.9, 0.9], [0.1, 0.1, 0.1], [0.5, 0.5, 0.5]],
        );
        let s = partition_orbits(&c, &[SymmetryOp::identity()], &['a', 'a', 'a'], 1e-3).unwrap();
        let (ordered, os) = canonical_order(&c, &s).unwrap();
        assert_eq!(ordered.atom_types, vec![90, 90, 6]);
        assert_eq!(ordered.frac_coords[0], [0.1, 0.1, 0.1]);
        // idempotence
        let (again, _) = canonical_order(&ordered, &os).unwrap();
        assert_eq!(again, ordered);
    }

    #[test]
    fn equal_electronegativity_breaks_by_atomic_number() {
        // Eu (63) and Gd (64) share EN 1.20 in the table
        let c = cubic_crystal(vec![64, 63], vec![[0.2, 0.2, 0.2], [0.7, 0.7, 0.7]]);
        let s = partition_orbits(&c, &[SymmetryOp::identity()], &['a', 'a'], 1e-3).unwrap();
        let (ordered, _) = canonical_order(&c, &s).unwrap();
        assert_eq!(ordered.atom_types, vec![63, 64]);
    }

    #[test]
    fn single_element_reduces_to_coordinate_sort() {
        let c = cubic_crystal(
            vec![8, 8, 8],
            vec![[0.7, 0.1, 0.1], [0.2, 0.9, 0.0], [0.2, 0.3, 0.8]],
        );
        let s = partition_orbits(&c, &[SymmetryOp::identity()], &['a'; 3], 1e-3).unwrap();
        let (ordered, _) = canonical_order(&c, &s).unwrap();
        assert_eq!(
            ordered.frac_coords,
            vec![[0.2, 0.3, 0.8], [0.2, 0.9, 0.0], [0.7, 0.1, 0.1]]
        );
    }

    #[test]
    fn augment_translation_only_for_singletons() {
        let c = cubic_crystal(vec![11, 17], vec![[0.1, 0.2, 0.3], [0.6, 0.7, 0.8]]);
        let s = partition_orbits(&c, &[SymmetryOp::identity()], &['a', 'b'], 1e-3).unwrap();
        let (c, s) = canonical_order(&c, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = augment(&s, &c, &mut rng);
        assert_eq!(a.atom_types, c.atom_types);
        // the applied shift is the same for every site
        let d0: Vec<f64> = (0..3)
            .map(|t| (a.frac_coords[0][t] - c.frac_coords[0][t]).rem_euclid(1.0))
            .collect();
        for i in 0..2 {
            for t in 0..3 {
                let d = (a.frac_coords[i][t] - c.frac_coords[i][t]).rem_euclid(1.0);
                assert_relative_eq!(d, d0[t], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn augment_explores_the_reduced_space() {
        // one group, two orbits of two sites: 2! * 2! * 2! = 8 permutations
        let s = OrbitStructure {
            groups: vec![WyckoffGroup {
                element: 8,
                wyckoff_letter: 'c',
                orbits: vec![
                    Orbit {
                        site_indices: vec![0, 1],
                        element: 8,
                        wyckoff_letter: 'c',
                    },
                    Orbit {
                        site_indices: vec![2, 3],
                        element: 8,
                        wyckoff_letter: 'c',
                    },
                ],
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = BTreeSet::new();
        for _ in 0..2000 {
            seen.insert(hierarchical_permutation(&s, &mut rng));
        }
        assert_eq!(seen.len(), 8);
        let expected = 10f64.powf(reduced_perm_space_log10(&s));
        assert_relative_eq!(expected, 8.0, max_relative = 1e-9);
    }

    #[test]
    fn augment_preserves_key_sequence_and_distances() {
        let c = cubic_crystal(
            vec![8, 8, 11, 11],
            vec![
                [0.1, 0.1, 0.1],
                [0.3, 0.3, 0.3],
                [0.5, 0.5, 0.5],
                [0.8, 0.8, 0.8],
            ],
        );
        let s = partition_orbits(&c, &[SymmetryOp::identity()], &['a', 'a', 'b', 'b'], 1e-3).unwrap();
        let (c, s) = canonical_order(&c, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = augment(&s, &c, &mut rng);
        assert_eq!(a.atom_types, c.atom_types);
        assert_relative_eq!(
            crate::crystal::min_periodic_distance(&a).unwrap(),
            crate::crystal::min_periodic_distance(&c).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn perm_space_formula_values() {
        // groups {[3,3]}, {[1]} -> 2! * 3! * 3! * 1! * 1!
        let s = OrbitStructure {
            groups: vec![
                WyckoffGroup {
                    element: 8,
                    wyckoff_letter: 'a',
                    orbits: vec![
                        Orbit {
                            site_indices: (0..3).collect(),
                            element: 8,
                            wyckoff_letter: 'a',
                        },
                        Orbit {
                            site_indices: (3..6).collect(),
                            element: 8,
                            wyckoff_letter: 'a',
                        },
                    ],
                },
                WyckoffGroup {
                    element: 11,
                    wyckoff_letter: 'b',
                    orbits: vec![Orbit {
                        site_indices: vec![6],
                        element: 11,
                        wyckoff_letter: 'b',
                    }],
                },
            ],
        };
        assert_relative_eq!(reduced_perm_space_log10(&s), 72f64.log10(), max_relative = 1e-12);
        // singleton groups with singleton orbits leave no freedom at all
        let singles = OrbitStructure {
            groups: (0..3)
                .map(|i| WyckoffGroup {
                    element: 8 + i as u8,
                    wyckoff_letter: 'a',
                    orbits: vec![Orbit {
                        site_indices: vec![i],
                        element: 8 + i as u8,
                        wyckoff_letter: 'a',
                    }],
                })
                .collect(),
        };
        assert_eq!(reduced_perm_space_log10(&singles), 0.0);
        // singleton orbits in one shared group still permute as blocks: 3!
        let tied = OrbitStructure {
            groups: vec![WyckoffGroup {
                element: 8,
                wyckoff_letter: 'a',
                orbits: (0..3)
                    .map(|i| Orbit {
                        site_indices: vec![i],
                        element: 8,
                        wyckoff_letter: 'a',
                    })
                    .collect(),
            }],
        };
        assert_relative_eq!(reduced_perm_space_log10(&tied), 6f64.log10(), max_relative = 1e-12);
        assert_relative_eq!(full_perm_space_log10(20), 18.386, epsilon = 0.01);
    }
}
