//! Static element table for Z = 1..=94: symbols, Pauling electronegativities,
//! common oxidation states, and metal flags.
//!
//! Electronegativity drives the canonical atom ordering; oxidation states and
//! metal flags drive the charge-neutrality screen. Elements without a tabulated
//! electronegativity (He, Ne, Ar, Rn) sort after all tabulated elements, by
//! atomic number.

use crate::error::{Error, Result};

/// Largest atomic number the artifact supports.
pub const MAX_Z: u8 = 94;

#[derive(Debug, Clone, Copy)]
pub struct ElementInfo {
    pub z: u8,
    pub symbol: &'static str,
    /// Pauling electronegativity; `None` for elements without a tabulated value.
    pub electronegativity: Option<f64>,
    /// Common oxidation states (never includes 0).
    pub oxidation_states: &'static [i8],
    pub is_metal: bool,
}

macro_rules! el {
    ($z:expr, $sym:expr, $en:expr, $ox:expr, $metal:expr) => {
        ElementInfo {
            z: $z,
            symbol: $sym,
            electronegativity: $en,
            oxidation_states: &$ox,
            is_metal: $metal,
        }
    };
}

#[rustfmt::skip]
pub static ELEMENTS: [ElementInfo; MAX_Z as usize] = [
    el!( 1, "H",  Some(2.20), [-1, 1],          false),
    el!( 2, "He", None,       [],               false),
    el!( 3, "Li", Some(0.98), [1],              true),
    el!( 4, "Be", Some(1.57), [2],              true),
    el!( 5, "B",  Some(2.04), [3],              false),
    el!( 6, "C",  Some(2.55), [-4, -2, 2, 4],   false),
    el!( 7, "N",  Some(3.04), [-3, 3, 5],       false),
    el!( 8, "O",  Some(3.44), [-2],             false),
    el!( 9, "F",  Some(3.98), [-1],             false),
    el!(10, "Ne", None,       [],               false),
    el!(11, "Na", Some(0.93), [1],              true),
    el!(12, "Mg", Some(1.31), [2],              true),
    el!(13, "Al", Some(1.61), [3],              true),
    el!(14, "Si", Some(1.90), [-4, 4],          false),
    el!(15, "P",  Some(2.19), [-3, 3, 5],       false),
    el!(16, "S",  Some(2.58), [-2, 2, 4, 6],    false),
    el!(17, "Cl", Some(3.16), [-1, 1, 3, 5, 7], false),
    el!(18, "Ar", None,       [],               false),
    el!(19, "K",  Some(0.82), [1],              true),
    el!(20, "Ca", Some(1.00), [2],              true),
    el!(21, "Sc", Some(1.36), [3],              true),
    el!(22, "Ti", Some(1.54), [2, 3, 4],        true),
    el!(23, "V",  Some(1.63), [2, 3, 4, 5],     true),
    el!(24, "Cr", Some(1.66), [2, 3, 6],        true),
    el!(25, "Mn", Some(1.55), [2, 3, 4, 6, 7],  true),
    el!(26, "Fe", Some(1.83), [2, 3],           true),
    el!(27, "Co", Some(1.88), [2, 3],           true),
    el!(28, "Ni", Some(1.91), [2],              true),
    el!(29, "Cu", Some(1.90), [1, 2],           true),
    el!(30, "Zn", Some(1.65), [2],              true),
    el!(31, "Ga", Some(1.81), [3],              true),
    el!(32, "Ge", Some(2.01), [-4, 2, 4],       false),
    el!(33, "As", Some(2.18), [-3, 3, 5],       false),
    el!(34, "Se", Some(2.55), [-2, 2, 4, 6],    false),
    el!(35, "Br", Some(2.96), [-1, 1, 3, 5],    false),
    el!(36, "Kr", Some(3.00), [2],              false),
    el!(37, "Rb", Some(0.82), [1],              true),
    el!(38, "Sr", Some(0.95), [2],              true),
    el!(39, "Y",  Some(1.22), [3],              true),
    el!(40, "Zr", Some(1.33), [4],              true),
    el!(41, "Nb", Some(1.60), [3, 5],           true),
    el!(42, "Mo", Some(2.16), [4, 6],           true),
    el!(43, "Tc", Some(1.90), [4, 7],           true),
    el!(44, "Ru", Some(2.20), [3, 4],           true),
    el!(45, "Rh", Some(2.28), [3],              true),
    el!(46, "Pd", Some(2.20), [2, 4],           true),
    el!(47, "Ag", Some(1.93), [1],              true),
    el!(48, "Cd", Some(1.69), [2],              true),
    el!(49, "In", Some(1.78), [1, 3],           true),
    el!(50, "Sn", Some(1.96), [-4, 2, 4],       true),
    el!(51, "Sb", Some(2.05), [-3, 3, 5],       false),
    el!(52, "Te", Some(2.10), [-2, 2, 4, 6],    false),
    el!(53, "I",  Some(2.66), [-1, 1, 3, 5, 7], false),
    el!(54, "Xe", Some(2.60), [2, 4, 6],        false),
    el!(55, "Cs", Some(0.79), [1],              true),
    el!(56, "Ba", Some(0.89), [2],              true),
    el!(57, "La", Some(1.10), [3],              true),
    el!(58, "Ce", Some(1.12), [3, 4],           true),
    el!(59, "Pr", Some(1.13), [3],              true),
    el!(60, "Nd", Some(1.14), [3],              true),
    el!(61, "Pm", Some(1.13), [3],              true),
    el!(62, "Sm", Some(1.17), [2, 3],           true),
    el!(63, "Eu", Some(1.20), [2, 3],           true),
    el!(64, "Gd", Some(1.20), [3],              true),
    el!(65, "Tb", Some(1.10), [3, 4],           true),
    el!(66, "Dy", Some(1.22), [3],              true),
    el!(67, "Ho", Some(1.23), [3],              true),
    el!(68, "Er", Some(1.24), [3],              true),
    el!(69, "Tm", Some(1.25), [2, 3],           true),
    el!(70, "Yb", Some(1.10), [2, 3],           true),
    el!(71, "Lu", Some(1.27), [3],              true),
    el!(72, "Hf", Some(1.30), [4],              true),
    el!(73, "Ta", Some(1.50), [5],              true),
    el!(74, "W",  Some(2.36), [4, 6],           true),
    el!(75, "Re", Some(1.90), [4, 6, 7],        true),
    el!(76, "Os", Some(2.20), [3, 4],           true),
    el!(77, "Ir", Some(2.20), [3, 4],           true),
    el!(78, "Pt", Some(2.28), [2, 4],           true),
    el!(79, "Au", Some(2.54), [1, 3],           true),
    el!(80, "Hg", Some(2.00), [1, 2],           true),
    el!(81, "Tl", Some(1.62), [1, 3],           true),
    el!(82, "Pb", Some(2.33), [2, 4],           true),
    el!(83, "Bi", Some(2.02), [3, 5],           true),
    el!(84, "Po", Some(2.00), [-2, 2, 4],       true),
    el!(85, "At", Some(2.20), [-1, 1],          false),
    el!(86, "Rn", None,       [],               false),
    el!(87, "Fr", Some(0.70), [1],              true),
    el!(88, "Ra", Some(0.90), [2],              true),
    el!(89, "Ac", Some(1.10), [3],              true),
    el!(90, "Th", Some(1.30), [4],              true),
    el!(91, "Pa", Some(1.50), [4, 5],           true),
    el!(92, "U",  Some(1.38), [3, 4, 5, 6],     true),
    el!(93, "Np", Some(1.36), [4, 5, 6],        true),
    el!(94, "Pu", Some(1.28), [3, 4, 5, 6],     true),
];

/// Looks up an element, failing on atomic numbers outside 1..=94.
pub fn element(z: u8) -> Result<&'static ElementInfo> {
    if z == 0 || z > MAX_Z {
        return Err(Error::UnsupportedElement(z));
    }
    Ok(&ELEMENTS[z as usize - 1])
}

pub fn symbol(z: u8) -> Result<&'static str> {
    element(z).map(|e| e.symbol)
}

/// Sort key for the canonical ordering: electronegativity ascending with
/// untabulated elements last, ties broken by atomic number ascending.
pub fn element_sort_key(z: u8) -> Result<(f64, u8)> {
    let info = element(z)?;
    Ok((info.electronegativity.unwrap_or(f64::INFINITY), z))
}
