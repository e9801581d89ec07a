//! Inference: any-to-any generation along task trajectories in the joint
//! time plane, with CTMC steps for atom types, Euler steps for the structure,
//! forced terminal unmasking, and optional noisy guidance.
//!
//! De novo generation walks (t, s) = (lambda, lambda); structure prediction
//! holds t = 1 and walks s; atom type generation holds s = 1 and walks t.
//! Conditioned modalities are never mutated.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::crystal::Crystal;
use crate::elements::element_sort_key;
use crate::error::{Error, Result};
use crate::flow::{
    interpolate_discrete, interpolate_frac, interpolate_linear, param_rate, param_vel_frac,
    param_vel_linear, sample_base, AtomToken, AtomTypes, JointTime, LogNormalPrior, RateVectors,
    K_ELEM,
};
use crate::lattice::LatticeParams;
use crate::model::{forward, BatchInput, BatchItem, ModelConfig, ModelOutput, ModelParams};
use crate::torus::torus_exp;

/// What to generate and what to condition on.
#[derive(Debug, Clone)]
pub enum Task {
    /// Atom types and structure jointly.
    Dng,
    /// Structure given a composition (atomic numbers, any order).
    Csp { composition: Vec<u8> },
    /// Atom types given a full structure.
    Atg {
        frac: Vec<[f64; 3]>,
        lengths: [f64; 3],
        angles: [f64; 3],
    },
}

impl Task {
    /// Joint time at trajectory parameter `lambda`.
    pub fn joint_time(&self, lambda: f64) -> JointTime {
        match self {
            Task::Dng => JointTime { t: lambda, s: lambda },
            Task::Csp { .. } => JointTime { t: 1.0, s: lambda },
            Task::Atg { .. } => JointTime { t: lambda, s: 1.0 },
        }
    }
}

/// Noisy-guidance settings; scale and noise level default to 2.0 and 0.1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub enabled: bool,
    pub scale: f64,
    pub noise: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            scale: 2.0,
            noise: 0.1,
        }
    }
}

/// Everything sampling needs: backbone weights (EMA by convention), the
/// fitted length prior, and the empirical atom-count distribution.
#[derive(Debug, Clone)]
pub struct GenerativeModel {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub prior: LogNormalPrior,
    /// (number of atoms, frequency) from the training set.
    pub atom_counts: Vec<(usize, u64)>,
}

/// Draws a cell size proportionally to its training-set frequency.
pub fn sample_num_atoms<R: Rng>(counts: &[(usize, u64)], rng: &mut R) -> usize {
    debug_assert!(!counts.is_empty());
    let total: u64 = counts.iter().map(|&(_, f)| f).sum();
    let mut u = rng.gen::<f64>() * total as f64;
    for &(n, f) in counts {
        u -= f as f64;
        if u < 0.0 {
            return n;
        }
    }
    counts.last().unwrap().0
}

/// One CTMC transition: each still-masked site jumps with probability
/// min(1, dt * total rate), landing proportionally to the rate entries.
/// On the final step every still-masked site is forced to jump; a masked
/// site with an all-zero rate row then falls back to a uniform category.
/// Negative rate entries (guidance extrapolation) are floored at zero.
///
/// Returns the new state and the number of uniform fallbacks taken.
pub fn ctmc_step<R: Rng>(
    atoms: &AtomTypes,
    rates: &RateVectors,
    dt: f64,
    rng: &mut R,
    is_final: bool,
) -> (AtomTypes, usize) {
    debug_assert!(dt > 0.0 || is_final);
    let mut out = atoms.clone();
    let mut fallbacks = 0;
    for i in 0..atoms.len() {
        if !atoms.0[i].is_mask() {
            continue; // unmasked sites never change under the masked path
        }
        let row: Vec<f64> = (0..K_ELEM).map(|j| rates.0[(i, j)].max(0.0)).collect();
        let total: f64 = row.iter().sum();
        let jump = if is_final {
            true
        } else {
            rng.gen::<f64>() < (dt * total).min(1.0)
        };
        if !jump {
            continue;
        }
        if total <= 0.0 {
            out.0[i] = AtomToken::Z(rng.gen_range(0..K_ELEM) as u8 + 1);
            fallbacks += 1;
            continue;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut dest = K_ELEM - 1;
        for (j, &r) in row.iter().enumerate() {
            u -= r;
            if u < 0.0 {
                dest = j;
                break;
            }
        }
        out.0[i] = AtomToken::Z(dest as u8 + 1);
    }
    (out, fallbacks)
}

/// Per-modality velocities for one structure state.
#[derive(Debug, Clone)]
pub struct StructureVelocity {
    pub frac: Vec<[f64; 3]>,
    pub lengths: [f64; 3],
    pub angles: [f64; 3],
}

/// Euler step: coordinates move along the torus, lengths and angles move
/// additively with lengths floored at 1e-3 angstrom and angles clamped to
/// [60, 120] degrees.
pub fn ode_step(
    frac: &mut [[f64; 3]],
    lengths: &mut [f64; 3],
    angles: &mut [f64; 3],
    vel: &StructureVelocity,
    ds: f64,
) {
    for (f, v) in frac.iter_mut().zip(&vel.frac) {
        for t in 0..3 {
            f[t] = torus_exp(f[t], ds * v[t]);
        }
    }
    for t in 0..3 {
        lengths[t] = (lengths[t] + ds * vel.lengths[t]).max(1e-3);
        angles[t] = (angles[t] + ds * vel.angles[t]).clamp(60.0, 120.0);
    }
}

struct SampleState {
    atoms: AtomTypes,
    frac: Vec<[f64; 3]>,
    lengths: [f64; 3],
    angles: [f64; 3],
}

fn model_eval(
    model: &GenerativeModel,
    state_atoms: &AtomTypes,
    frac: &[[f64; 3]],
    lengths: [f64; 3],
    angles: [f64; 3],
    time: JointTime,
) -> Result<ModelOutput> {
    let item = BatchItem {
        codes: state_atoms.0.iter().map(|t| t.code()).collect(),
        frac: frac.to_vec(),
        lengths,
        angles,
        time,
    };
    let batch = BatchInput::assemble(std::slice::from_ref(&item))?;
    let (out, _) = forward(&model.cfg, &model.params, &batch)?;
    Ok(out)
}

fn logits_of(out: &ModelOutput, n: usize) -> ndarray::Array2<f64> {
    out.atom_logits
        .to_shape((n, K_ELEM))
        .expect("single-crystal batch")
        .to_owned()
}

fn coords_of(out: &ModelOutput, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| [out.coords[(0, i, 0)], out.coords[(0, i, 1)], out.coords[(0, i, 2)]])
        .collect()
}

fn lattice_of(out: &ModelOutput) -> ([f64; 3], [f64; 3]) {
    (
        [out.lengths[(0, 0)], out.lengths[(0, 1)], out.lengths[(0, 2)]],
        [out.angles[(0, 0)], out.angles[(0, 1)], out.angles[(0, 2)]],
    )
}

fn structure_velocity(out: &ModelOutput, state: &SampleState, s: f64) -> StructureVelocity {
    let n = state.frac.len();
    let (len_pred, ang_pred) = lattice_of(out);
    StructureVelocity {
        frac: param_vel_frac(&state.frac, &coords_of(out, n), s),
        lengths: param_vel_linear(state.lengths, len_pred, s),
        angles: param_vel_linear(state.angles, ang_pred, s),
    }
}

/// Composition in canonical order (electronegativity ascending, then atomic
/// number); the order the model was trained to see for element blocks.
pub fn canonical_composition(composition: &[u8]) -> Result<Vec<u8>> {
    let mut keyed = composition
        .iter()
        .map(|&z| element_sort_key(z).map(|k| (k, z)))
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(keyed.into_iter().map(|(_, z)| z).collect())
}

fn init_state(model: &GenerativeModel, task: &Task, rng: &mut ChaCha8Rng) -> Result<SampleState> {
    let state = match task {
        Task::Dng => {
            if model.atom_counts.is_empty() {
                return Err(Error::InvalidData("empty atom-count distribution".into()));
            }
            let n = sample_num_atoms(&model.atom_counts, rng);
            if n == 0 || n > model.cfg.max_sites {
                return Err(Error::SequenceTooLong {
                    n,
                    max: model.cfg.max_sites,
                });
            }
            let base = sample_base(n, &model.prior, rng);
            SampleState {
                atoms: base.atoms,
                frac: base.frac,
                lengths: base.lengths,
                angles: base.angles,
            }
        }
        Task::Csp { composition } => {
            if composition.is_empty() {
                return Err(Error::InvalidData("empty composition condition".into()));
            }
            let ordered = canonical_composition(composition)?;
            let base = sample_base(ordered.len(), &model.prior, rng);
            SampleState {
                atoms: AtomTypes::from_atomic_numbers(&ordered),
                frac: base.frac,
                lengths: base.lengths,
                angles: base.angles,
            }
        }
        Task::Atg { frac, lengths, angles } => {
            if frac.is_empty() {
                return Err(Error::InvalidData("empty structure condition".into()));
            }
            SampleState {
                atoms: AtomTypes::masked(frac.len()),
                frac: frac.clone(),
                lengths: *lengths,
                angles: *angles,
            }
        }
    };
    Ok(state)
}

fn finish(state: SampleState) -> Result<Crystal> {
    let zs = state
        .atoms
        .as_atomic_numbers()
        .ok_or_else(|| Error::NumericFailure {
            context: "sampler terminal state".into(),
            detail: "mask tokens survived the final step".into(),
        })?;
    let (lengths, angles) = repair_degenerate_cell(state.lengths, state.angles);
    Crystal::new(zs, state.frac, LatticeParams::new(lengths, angles)?)
}

// Angle triples on the [60,120] boundary can give a zero-volume metric
// (e.g. 60/60/120); contract the angles toward 90 degrees until the cell
// is three-dimensional again.
fn repair_degenerate_cell(lengths: [f64; 3], angles: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let mut a = angles;
    for _ in 0..64 {
        let p = LatticeParams {
            lengths,
            angles: a,
        };
        if p.volume() > 1e-9 * lengths[0] * lengths[1] * lengths[2] {
            return (lengths, a);
        }
        for t in 0..3 {
            a[t] = 90.0 + 0.99 * (a[t] - 90.0);
        }
    }
    (lengths, [90.0; 3])
}

/// Report of one sampling run.
#[derive(Debug, Clone)]
pub struct SampleReport {
    pub crystal: Crystal,
    /// Sites that needed the uniform terminal fallback.
    pub uniform_fallbacks: usize,
}

/// Unguided generation along the task trajectory with K uniform steps.
pub fn generate(
    model: &GenerativeModel,
    task: &Task,
    k_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleReport> {
    if k_steps == 0 {
        return Err(Error::InvalidData("need at least one integration step".into()));
    }
    let mut state = init_state(model, task, rng)?;
    let n = state.frac.len();
    let (gen_atoms, gen_structure) = match task {
        Task::Dng => (true, true),
        Task::Csp { .. } => (false, true),
        Task::Atg { .. } => (true, false),
    };
    let mut fallbacks = 0;
    for k in 0..k_steps {
        let lam = k as f64 / k_steps as f64;
        let lam_next = (k + 1) as f64 / k_steps as f64;
        let time = task.joint_time(lam);
        let time_next = task.joint_time(lam_next);
        let out = model_eval(model, &state.atoms, &state.frac, state.lengths, state.angles, time)
            .map_err(|e| Error::NumericFailure {
                context: format!("sampling step {k}"),
                detail: e.to_string(),
            })?;
        if gen_atoms {
            let rates = param_rate(&state.atoms, &logits_of(&out, n), time.t);
            let dt = time_next.t - time.t;
            let (atoms, fb) = ctmc_step(&state.atoms, &rates, dt, rng, k + 1 == k_steps);
            state.atoms = atoms;
            fallbacks += fb;
        }
        if gen_structure {
            let vel = structure_velocity(&out, &state, time.s);
            let ds = time_next.s - time.s;
            ode_step(&mut state.frac, &mut state.lengths, &mut state.angles, &vel, ds);
        }
    }
    Ok(SampleReport {
        crystal: finish(state)?,
        uniform_fallbacks: fallbacks,
    })
}

fn mix(a: &StructureVelocity, b: &StructureVelocity, wa: f64, wb: f64) -> StructureVelocity {
    StructureVelocity {
        frac: a
            .frac
            .iter()
            .zip(&b.frac)
            .map(|(x, y)| {
                let mut out = [0.0; 3];
                for t in 0..3 {
                    out[t] = wa * x[t] + wb * y[t];
                }
                out
            })
            .collect(),
        lengths: std::array::from_fn(|t| wa * a.lengths[t] + wb * b.lengths[t]),
        angles: std::array::from_fn(|t| wa * a.angles[t] + wb * b.angles[t]),
    }
}

/// Guided generation for the conditional tasks. Each step draws a fresh
/// corrupted condition at noise level sigma from `corr_rng`, evaluates the
/// model on both the clean and the corrupted condition, and mixes the fields
/// with weights (1 - omega, omega). Dynamics randomness comes from `dyn_rng`
/// only, so omega = 1 reproduces `generate` bit-for-bit on a shared stream.
pub fn guided_generate(
    model: &GenerativeModel,
    task: &Task,
    k_steps: usize,
    guidance: &GuidanceConfig,
    dyn_rng: &mut ChaCha8Rng,
    corr_rng: &mut ChaCha8Rng,
) -> Result<SampleReport> {
    if k_steps == 0 {
        return Err(Error::InvalidData("need at least one integration step".into()));
    }
    let omega = guidance.scale;
    let sigma = guidance.noise;
    let mut state = init_state(model, task, dyn_rng)?;
    let n = state.frac.len();
    let mut fallbacks = 0;
    match task {
        Task::Dng => {
            return Err(Error::InvalidData(
                "noisy guidance applies to the conditional tasks only".into(),
            ))
        }
        Task::Csp { .. } => {
            let a1 = state.atoms.clone();
            for k in 0..k_steps {
                let s = k as f64 / k_steps as f64;
                // step size computed exactly as in `generate` so the omega = 1
                // trajectory is bit-identical
                let ds = (k + 1) as f64 / k_steps as f64 - s;
                // fresh corrupted composition each step
                let a_sigma = interpolate_discrete(&a1, sigma, corr_rng);
                let cond = model_eval(
                    model,
                    &a1,
                    &state.frac,
                    state.lengths,
                    state.angles,
                    JointTime { t: 1.0, s },
                )?;
                let corr = model_eval(
                    model,
                    &a_sigma,
                    &state.frac,
                    state.lengths,
                    state.angles,
                    JointTime { t: sigma, s },
                )?;
                let v_cond = structure_velocity(&cond, &state, s);
                let v_corr = structure_velocity(&corr, &state, s);
                let v = mix(&v_corr, &v_cond, 1.0 - omega, omega);
                ode_step(&mut state.frac, &mut state.lengths, &mut state.angles, &v, ds);
            }
        }
        Task::Atg { frac, lengths, angles } => {
            let f1 = frac.clone();
            let (l1, a1) = (*lengths, *angles);
            for k in 0..k_steps {
                let t = k as f64 / k_steps as f64;
                let dt = (k + 1) as f64 / k_steps as f64 - t;
                // fresh corrupted structure interpolated to time sigma
                let base = sample_base(n, &model.prior, corr_rng);
                let f_sigma = interpolate_frac(&base.frac, &f1, sigma);
                let l_sigma = interpolate_linear(base.lengths, l1, sigma);
                let ang_sigma = interpolate_linear(base.angles, a1, sigma);
                let cond = model_eval(model, &state.atoms, &f1, l1, a1, JointTime { t, s: 1.0 })?;
                let corr = model_eval(
                    model,
                    &state.atoms,
                    &f_sigma,
                    l_sigma,
                    ang_sigma,
                    JointTime { t, s: sigma },
                )?;
                let r_cond = param_rate(&state.atoms, &logits_of(&cond, n), t);
                let r_corr = param_rate(&state.atoms, &logits_of(&corr, n), t);
                let mixed = RateVectors(
                    (1.0 - omega) * &r_corr.0 + omega * &r_cond.0,
                );
                let (atoms, fb) = ctmc_step(&state.atoms, &mixed, dt, dyn_rng, k + 1 == k_steps);
                state.atoms = atoms;
                fallbacks += fb;
            }
        }
    }
    Ok(SampleReport {
        crystal: finish(state)?,
        uniform_fallbacks: fallbacks,
    })
}
