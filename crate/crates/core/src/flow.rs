//! Conditional probability paths and flow-matching targets for all four
//! modalities: masked mixture paths for atom types (CTMC rate vectors),
//! torus geodesics for fractional coordinates, and straight lines for lattice
//! lengths and angles, plus the weighted multimodal training loss.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::elements::MAX_Z;
use crate::error::{Error, Result};
use crate::model::{BatchInput, ModelOutput};
use crate::rngutil::standard_normal;
use crate::torus::{torus_exp, torus_log, wrap_unit};

/// Number of real atom-type categories; logits index `j` is element `Z = j+1`.
pub const K_ELEM: usize = MAX_Z as usize;
/// Embedding code of the mask token.
pub const MASK_CODE: usize = K_ELEM;
/// Embedding code of the padding token.
pub const PAD_CODE: usize = K_ELEM + 1;

/// Floor for the (1-t) and (1-s) denominators near the terminal boundary.
pub const TIME_DENOM_FLOOR: f64 = 1e-4;
/// Floor inside the generalized-KL log when the predicted mass underflows.
pub const GKL_LOG_FLOOR: f64 = 1e-12;

#[inline]
pub fn time_denom(time: f64) -> f64 {
    (1.0 - time).max(TIME_DENOM_FLOOR)
}

/// Joint flow time: `t` drives atom types, `s` drives the structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTime {
    pub t: f64,
    pub s: f64,
}

/// Per-site categorical state over the real elements plus the mask token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtomToken {
    Mask,
    Z(u8),
}

impl AtomToken {
    #[inline]
    pub fn code(self) -> usize {
        match self {
            AtomToken::Mask => MASK_CODE,
            AtomToken::Z(z) => z as usize - 1,
        }
    }

    #[inline]
    pub fn is_mask(self) -> bool {
        matches!(self, AtomToken::Mask)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomTypes(pub Vec<AtomToken>);

impl AtomTypes {
    pub fn masked(n: usize) -> Self {
        Self(vec![AtomToken::Mask; n])
    }

    pub fn from_atomic_numbers(zs: &[u8]) -> Self {
        Self(zs.iter().map(|&z| AtomToken::Z(z)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn n_masked(&self) -> usize {
        self.0.iter().filter(|t| t.is_mask()).count()
    }

    /// Atomic numbers if every site is unmasked.
    pub fn as_atomic_numbers(&self) -> Option<Vec<u8>> {
        self.0
            .iter()
            .map(|t| match t {
                AtomToken::Z(z) => Some(*z),
                AtomToken::Mask => None,
            })
            .collect()
    }
}

/// Off-diagonal CTMC jump rates, one row of `K_ELEM` categories per site.
/// Rows of still-masked sites carry the escape rates; unmasked rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RateVectors(pub Array2<f64>);

/// Per-component LogNormal prior over lattice lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalPrior {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
}

impl LogNormalPrior {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        let mut out = [0.0; 3];
        for t in 0..3 {
            out[t] = (self.mu[t] + self.sigma[t] * standard_normal(rng)).exp();
        }
        out
    }
}

/// Draws independent uniform flow times, min-clipped at `clip`.
pub fn sample_time<R: Rng>(rng: &mut R, clip: f64) -> JointTime {
    JointTime {
        t: rng.gen::<f64>().min(clip),
        s: rng.gen::<f64>().min(clip),
    }
}

/// Maximum-likelihood LogNormal fit per length component, with the population
/// standard deviation floored at 1e-3.
pub fn fit_lognormal(lengths: &[[f64; 3]]) -> Result<LogNormalPrior> {
    if lengths.len() < 2 {
        return Err(Error::InvalidData(format!(
            "need at least 2 length samples, got {}",
            lengths.len()
        )));
    }
    let mut mu = [0.0; 3];
    let mut sigma = [0.0; 3];
    let n = lengths.len() as f64;
    for t in 0..3 {
        let mut logs = Vec::with_capacity(lengths.len());
        for l in lengths {
            if !(l[t].is_finite() && l[t] > 0.0) {
                return Err(Error::InvalidData(format!("nonpositive length {}", l[t])));
            }
            logs.push(l[t].ln());
        }
        let mean = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        mu[t] = mean;
        sigma[t] = var.sqrt().max(1e-3);
    }
    Ok(LogNormalPrior { mu, sigma })
}

/// A draw from the joint base distribution for `n` sites.
#[derive(Debug, Clone)]
pub struct BaseSample {
    pub atoms: AtomTypes,
    pub frac: Vec<[f64; 3]>,
    pub lengths: [f64; 3],
    pub angles: [f64; 3],
}

/// Base distributions: mask point mass, uniform torus coordinates, LogNormal
/// lengths, uniform angles on [60, 120] degrees.
pub fn sample_base<R: Rng>(n: usize, prior: &LogNormalPrior, rng: &mut R) -> BaseSample {
    let frac = (0..n)
        .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
        .collect();
    let lengths = prior.sample(rng);
    let mut angles = [0.0; 3];
    for a in &mut angles {
        *a = 60.0 + 60.0 * rng.gen::<f64>();
    }
    BaseSample {
        atoms: AtomTypes::masked(n),
        frac,
        lengths,
        angles,
    }
}

/// Mixture-path draw: each site independently shows its clean value with
/// probability `t`, otherwise the mask token.
pub fn interpolate_discrete<R: Rng>(a1: &AtomTypes, t: f64, rng: &mut R) -> AtomTypes {
    AtomTypes(
        a1.0.iter()
            .map(|&tok| {
                debug_assert!(!tok.is_mask(), "clean data must be fully unmasked");
                if rng.gen::<f64>() < t {
                    tok
                } else {
                    AtomToken::Mask
                }
            })
            .collect(),
    )
}

/// Geodesic interpolation on the torus, component-wise.
pub fn interpolate_frac(f0: &[[f64; 3]], f1: &[[f64; 3]], s: f64) -> Vec<[f64; 3]> {
    f0.iter()
        .zip(f1)
        .map(|(a, b)| {
            let mut out = [0.0; 3];
            for t in 0..3 {
                out[t] = torus_exp(a[t], s * torus_log(a[t], b[t]));
            }
            out
        })
        .collect()
}

/// Straight-line interpolation with exact endpoints.
pub fn interpolate_linear(y0: [f64; 3], y1: [f64; 3], s: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for t in 0..3 {
        out[t] = (1.0 - s) * y0[t] + s * y1[t];
    }
    out
}

/// Conditional target rate vector of the masked path: for each still-masked
/// site, mass 1/(1-t) on its clean category; zero rows for unmasked sites.
pub fn cond_rate_atoms(a_t: &AtomTypes, a1: &AtomTypes, t: f64) -> RateVectors {
    let n = a_t.len();
    let denom = time_denom(t);
    let mut rates = Array2::zeros((n, K_ELEM));
    for i in 0..n {
        if a_t.0[i].is_mask() {
            if let AtomToken::Z(z) = a1.0[i] {
                rates[(i, z as usize - 1)] = 1.0 / denom;
            }
        }
    }
    RateVectors(rates)
}

/// Conditional target velocity on the torus: log_{F_s}(F_1) / (1-s).
pub fn cond_vel_frac(f_s: &[[f64; 3]], f1: &[[f64; 3]], s: f64) -> Vec<[f64; 3]> {
    let denom = time_denom(s);
    f_s.iter()
        .zip(f1)
        .map(|(a, b)| {
            let mut out = [0.0; 3];
            for t in 0..3 {
                out[t] = torus_log(a[t], b[t]) / denom;
            }
            out
        })
        .collect()
}

/// Conditional target velocity for linear modalities: (Y_1 - Y_s) / (1-s).
pub fn cond_vel_linear(y_s: [f64; 3], y1: [f64; 3], s: f64) -> [f64; 3] {
    let denom = time_denom(s);
    let mut out = [0.0; 3];
    for t in 0..3 {
        out[t] = (y1[t] - y_s[t]) / denom;
    }
    out
}

/// Softmax over the real-element categories (the mask is never predicted).
pub fn softmax_logits(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Parameterized rate vector: Cat(softmax(logits)) / (1-t) on masked sites.
pub fn param_rate(a_t: &AtomTypes, logits: &Array2<f64>, t: f64) -> RateVectors {
    let n = a_t.len();
    debug_assert_eq!(logits.nrows(), n);
    let denom = time_denom(t);
    let mut rates = Array2::zeros((n, K_ELEM));
    for i in 0..n {
        if a_t.0[i].is_mask() {
            let p = softmax_logits(logits.row(i).as_slice().unwrap());
            for j in 0..K_ELEM {
                rates[(i, j)] = p[j] / denom;
            }
        }
    }
    RateVectors(rates)
}

/// Parameterized torus velocity from a clean-coordinate prediction, projected
/// onto [0,1) before the log map.
pub fn param_vel_frac(f_s: &[[f64; 3]], f_pred: &[[f64; 3]], s: f64) -> Vec<[f64; 3]> {
    let denom = time_denom(s);
    f_s.iter()
        .zip(f_pred)
        .map(|(a, b)| {
            let mut out = [0.0; 3];
            for t in 0..3 {
                out[t] = torus_log(a[t], wrap_unit(b[t])) / denom;
            }
            out
        })
        .collect()
}

/// Parameterized linear velocity from a clean prediction (no projection).
pub fn param_vel_linear(y_s: [f64; 3], y_pred: [f64; 3], s: f64) -> [f64; 3] {
    let denom = time_denom(s);
    let mut out = [0.0; 3];
    for t in 0..3 {
        out[t] = (y_pred[t] - y_s[t]) / denom;
    }
    out
}

/// Generalized KL divergence sum_j u_j ln(u_j / v_j) - sum_j u_j + sum_j v_j
/// with the conventions 0 ln 0 = 0 and a 1e-12 floor inside the logarithm.
pub fn generalized_kl(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut total = 0.0;
    for (&uj, &vj) in u.iter().zip(v) {
        if uj > 0.0 {
            total += uj * (uj / vj.max(GKL_LOG_FLOOR)).ln();
        }
        total += vj - uj;
    }
    total
}

/// Per-modality loss weights; defaults 0.5 / 2.0 / 1.0 / 1.0 for atom types,
/// fractional coordinates, lattice lengths, and lattice angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub atom: f64,
    pub frac: f64,
    pub length: f64,
    pub angle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            atom: 0.5,
            frac: 2.0,
            length: 1.0,
            angle: 1.0,
        }
    }
}

/// Unweighted per-modality terms plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub atom: f64,
    pub frac: f64,
    pub length: f64,
    pub angle: f64,
}

/// Conditional targets for one padded batch, aligned with `BatchInput`.
#[derive(Debug, Clone)]
pub struct CondTargets {
    pub rates: Array3<f64>,    // (B, N, K_ELEM), zero at padding
    pub vel_frac: Array3<f64>, // (B, N, 3), zero at padding
    pub vel_len: Array2<f64>,  // (B, 3)
    pub vel_ang: Array2<f64>,  // (B, 3)
}

/// Weighted multimodal flow-matching loss and its adjoints with respect to
/// the raw head outputs.
///
/// The divergence per modality is generalized KL between the conditional
/// target rate vector and the parameterized rate vector for atom types, and
/// squared distance between target and parameterized velocities elsewhere.
/// Per-site terms are averaged over non-padded sites and then over the batch;
/// lattice terms count once per crystal.
pub fn multimodal_loss(
    out: &ModelOutput,
    batch: &BatchInput,
    targets: &CondTargets,
    weights: &LossWeights,
) -> (LossReport, ModelOutput) {
    let (b_sz, n_max, _) = out.atom_logits.dim();
    let mut adj = ModelOutput::zeros(b_sz, n_max);
    let mut loss_atom = 0.0;
    let mut loss_frac = 0.0;
    let mut loss_len = 0.0;
    let mut loss_ang = 0.0;
    let inv_b = 1.0 / b_sz as f64;

    for b in 0..b_sz {
        let time = batch.times[b];
        let dt = time_denom(time.t);
        let ds = time_denom(time.s);
        let m_b = (0..n_max).filter(|&i| batch.mask[(b, i)]).count() as f64;
        let site_w = inv_b / m_b;

        for i in 0..n_max {
            if !batch.mask[(b, i)] {
                continue;
            }
            if batch.atom_codes[(b, i)] == MASK_CODE {
                let logits: Vec<f64> = (0..K_ELEM).map(|j| out.atom_logits[(b, i, j)]).collect();
                let p = softmax_logits(&logits);
                let tgt: Vec<f64> = (0..K_ELEM).map(|j| targets.rates[(b, i, j)]).collect();
                let rate: Vec<f64> = p.iter().map(|&pj| pj / dt).collect();
                loss_atom += site_w * generalized_kl(&tgt, &rate);
                // d gkl / d logit_k = p_k * sum_j(tgt_j) - tgt_k
                let tgt_sum: f64 = tgt.iter().sum();
                for k in 0..K_ELEM {
                    adj.atom_logits[(b, i, k)] =
                        weights.atom * site_w * (p[k] * tgt_sum - tgt[k]);
                }
            }
            // torus velocity regression
            for t in 0..3 {
                let v = torus_log(batch.frac[(b, i, t)], wrap_unit(out.coords[(b, i, t)])) / ds;
                let e = v - targets.vel_frac[(b, i, t)];
                loss_frac += site_w * e * e;
                adj.coords[(b, i, t)] = weights.frac * site_w * 2.0 * e / ds;
            }
        }

        for t in 0..3 {
            let vl = (out.lengths[(b, t)] - batch.lengths[(b, t)]) / ds;
            let el = vl - targets.vel_len[(b, t)];
            loss_len += inv_b * el * el;
            adj.lengths[(b, t)] = weights.length * inv_b * 2.0 * el / ds;

            let va = (out.angles[(b, t)] - batch.angles[(b, t)]) / ds;
            let ea = va - targets.vel_ang[(b, t)];
            loss_ang += inv_b * ea * ea;
            adj.angles[(b, t)] = weights.angle * inv_b * 2.0 * ea / ds;
        }
    }

    let report = LossReport {
        total: weights.atom * loss_atom
            + weights.frac * loss_frac
            + weights.length * loss_len
            + weights.angle * loss_ang,
        atom: loss_atom,
        frac: loss_frac,
        length: loss_len,
        angle: loss_ang,
    };
    (report, adj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn time_clipping() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut at_clip = 0usize;
        for _ in 0..n {
            let jt = sample_time(&mut rng, 0.9);
            assert!(jt.t <= 0.9 && jt.s <= 0.9);
            if jt.t == 0.9 {
                at_clip += 1;
            }
        }
        let frac = at_clip as f64 / n as f64;
        assert!((frac - 0.1).abs() < 0.01, "clip mass {frac}");
    }

    #[test]
    fn lognormal_fit_closed_forms() {
        let e = std::f64::consts::E;
        let p = fit_lognormal(&[[e, e, e], [e, e, e]]).unwrap();
        for t in 0..3 {
            assert_relative_eq!(p.mu[t], 1.0, max_relative = 1e-12);
            assert_eq!(p.sigma[t], 1e-3);
        }
        let p = fit_lognormal(&[[1.0, 1.0, 1.0], [e * e, e * e, e * e]]).unwrap();
        assert_relative_eq!(p.mu[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(p.sigma[0], 1.0, max_relative = 1e-12);
        assert!(fit_lognormal(&[[1.0, 1.0, 1.0]]).is_err());
        assert!(fit_lognormal(&[[1.0, 1.0, 1.0], [-1.0, 1.0, 1.0]]).is_err());
    }

    #[test]
    fn lognormal_fit_monte_carlo_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = LogNormalPrior {
            mu: [1.5, 1.5, 1.5],
            sigma: [0.3, 0.3, 0.3],
        };
        let samples: Vec<[f64; 3]> = (0..100_000).map(|_| truth.sample(&mut rng)).collect();
        let fit = fit_lognormal(&samples).unwrap();
        for t in 0..3 {
            assert_relative_eq!(fit.mu[t], 1.5, max_relative = 0.01);
            assert_relative_eq!(fit.sigma[t], 0.3, max_relative = 0.01);
        }
    }

    #[test]
    fn base_sample_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = LogNormalPrior {
            mu: [1.4; 3],
            sigma: [0.1; 3],
        };
        let mut coord_sum = 0.0;
        let n_draws = 2000;
        for _ in 0..n_draws {
            let b = sample_base(5, &prior, &mut rng);
            assert!(b.atoms.0.iter().all(|t| t.is_mask()));
            assert!(b.lengths.iter().all(|&l| l > 0.0));
            assert!(b.angles.iter().all(|&a| (60.0..=120.0).contains(&a)));
            for f in &b.frac {
                for t in 0..3 {
                    assert!((0.0..1.0).contains(&f[t]));
                    coord_sum += f[t];
                }
            }
        }
        let mean = coord_sum / (n_draws as f64 * 15.0);
        assert!((mean - 0.5).abs() < 0.01, "coordinate mean {mean}");
    }

    #[test]
    fn discrete_interpolation_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a1 = AtomTypes::from_atomic_numbers(&[8]);
        assert_eq!(interpolate_discrete(&a1, 0.0, &mut rng).n_masked(), 1);
        assert_eq!(interpolate_discrete(&a1, 1.0, &mut rng).n_masked(), 0);
        let n = 100_000;
        let mut unmasked = 0;
        for _ in 0..n {
            if interpolate_discrete(&a1, 0.3, &mut rng).n_masked() == 0 {
                unmasked += 1;
            }
        }
        let frac = unmasked as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.01, "unmask rate {frac}");
    }

    #[test]
    fn frac_interpolation_wraps_and_hits_endpoints() {
        let mid = interpolate_frac(&[[0.9; 3]], &[[0.1; 3]], 0.5);
        for t in 0..3 {
            assert_relative_eq!(mid[0][t], 0.0, epsilon = 1e-12);
        }
        let start = interpolate_frac(&[[0.37; 3]], &[[0.9; 3]], 0.0);
        assert_eq!(start[0], [0.37; 3]);
        // path length across an s-grid equals the log-map magnitude
        let (f0, f1) = (0.8, 0.2);
        let k = 1000;
        let mut length = 0.0;
        let mut prev = f0;
        for i in 1..=k {
            let s = i as f64 / k as f64;
            let cur = interpolate_frac(&[[f0; 3]], &[[f1; 3]], s)[0][0];
            length += torus_log(prev, cur).abs();
            prev = cur;
        }
        assert_relative_eq!(length, torus_log(f0, f1).abs(), epsilon = 1e-9);
    }

    #[test]
    fn linear_interpolation_and_slope() {
        assert_eq!(interpolate_linear([3.0; 3], [5.0; 3], 0.5), [4.0; 3]);
        assert_eq!(interpolate_linear([3.0; 3], [5.0; 3], 1.0), [5.0; 3]);
        let h = 1e-6;
        let d = (interpolate_linear([3.0; 3], [5.0; 3], 0.4 + h)[0]
            - interpolate_linear([3.0; 3], [5.0; 3], 0.4 - h)[0])
            / (2.0 * h);
        assert_relative_eq!(d, 2.0, max_relative = 1e-7);
    }

    #[test]
    fn conditional_rate_formula() {
        let a_t = AtomTypes(vec![AtomToken::Mask, AtomToken::Z(8)]);
        let a1 = AtomTypes::from_atomic_numbers(&[17, 8]);
        let r = cond_rate_atoms(&a_t, &a1, 0.5);
        assert_relative_eq!(r.0[(0, 16)], 2.0, max_relative = 1e-12);
        assert_eq!(r.0.row(0).iter().filter(|&&x| x != 0.0).count(), 1);
        assert!(r.0.row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn posterior_expectation_matches_marginal_rate() {
        // 3-category toy: base is the mask point mass, so conditioned on a
        // still-masked site the posterior over A1 is p1 itself and the
        // marginal rate is p1 / (1-t).
        let p1 = [0.5, 0.3, 0.2];
        let t = 0.35;
        let mut expected = vec![0.0; K_ELEM];
        for (cat, &w) in p1.iter().enumerate() {
            let a_t = AtomTypes(vec![AtomToken::Mask]);
            let a1 = AtomTypes(vec![AtomToken::Z(cat as u8 + 1)]);
            let r = cond_rate_atoms(&a_t, &a1, t);
            for j in 0..K_ELEM {
                expected[j] += w * r.0[(0, j)];
            }
        }
        for j in 0..3 {
            assert_relative_eq!(expected[j], p1[j] / (1.0 - t), epsilon = 1e-12);
        }
    }

    #[test]
    fn conditional_velocities() {
        let v = cond_vel_frac(&[[0.0; 3]], &[[0.1; 3]], 0.5);
        assert_relative_eq!(v[0][0], 0.2, max_relative = 1e-12);
        let v = cond_vel_frac(&[[0.4; 3]], &[[0.4; 3]], 0.3);
        assert_eq!(v[0], [0.0; 3]);
        let v = cond_vel_linear([3.0; 3], [5.0; 3], 0.5);
        assert_relative_eq!(v[0], 4.0, max_relative = 1e-12);
    }

    #[test]
    fn euler_integration_telescopes_to_the_endpoint() {
        // per-step identity: x + h (x1 - x) / (1 - s) lands on x1 at s = 1
        for k in [10usize, 100, 500] {
            let (x0, x1) = (3.0, 5.0);
            let mut x = x0;
            for i in 0..k {
                let s = i as f64 / k as f64;
                let v = cond_vel_linear([x; 3], [x1; 3], s)[0];
                x += v / k as f64;
            }
            assert!((x - x1).abs() < 1e-12, "K={k} endpoint error {}", (x - x1).abs());
        }
    }

    #[test]
    fn param_rate_uniform_and_concentrated() {
        let a_t = AtomTypes(vec![AtomToken::Mask]);
        let logits = Array2::zeros((1, K_ELEM));
        let r = param_rate(&a_t, &logits, 0.5);
        for j in 0..K_ELEM {
            assert_relative_eq!(r.0[(0, j)], 2.0 / K_ELEM as f64, max_relative = 1e-12);
        }
        let mut logits = Array2::zeros((1, K_ELEM));
        logits[(0, 7)] = 50.0;
        let r = param_rate(&a_t, &logits, 0.5);
        assert!(r.0[(0, 7)] > 1.999);
        // unmasked sites always carry zero rates
        let unmasked = AtomTypes(vec![AtomToken::Z(3)]);
        let r = param_rate(&unmasked, &logits, 0.5);
        assert!(r.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn param_vel_projection_and_agreement() {
        let v = param_vel_frac(&[[0.0; 3]], &[[1.3; 3]], 0.5);
        let vc = cond_vel_frac(&[[0.0; 3]], &[[0.3; 3]], 0.5);
        assert_relative_eq!(v[0][0], vc[0][0], max_relative = 1e-12);
        // range sweep: |v| bounded by 0.5 / (1-s)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5000 {
            let fs = [[rng.gen::<f64>(); 3]];
            let fp = [[rng.gen::<f64>() * 10.0 - 5.0; 3]];
            let s: f64 = rng.gen::<f64>() * 0.999;
            let v = param_vel_frac(&fs, &fp, s)[0][0];
            assert!(v.abs() <= 0.5 / time_denom(s) + 1e-12);
        }
    }

    #[test]
    fn gkl_formula_and_properties() {
        let val = generalized_kl(&[2.0, 0.0], &[1.0, 1.0]);
        assert_relative_eq!(val, 2.0 * 2f64.ln(), max_relative = 1e-12);
        assert_eq!(generalized_kl(&[0.7, 0.3], &[0.7, 0.3]), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..2000 {
            let u: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
            let v: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() + 1e-6).collect();
            assert!(generalized_kl(&u, &v) >= -1e-12);
        }
    }

    #[test]
    fn gkl_zero_iff_param_matches_conditional() {
        let a_t = AtomTypes(vec![AtomToken::Mask]);
        let a1 = AtomTypes::from_atomic_numbers(&[5]);
        let tgt = cond_rate_atoms(&a_t, &a1, 0.5);
        // near-one-hot logits drive the divergence toward zero
        let mut logits = Array2::zeros((1, K_ELEM));
        logits[(0, 4)] = 200.0;
        let pr = param_rate(&a_t, &logits, 0.5);
        let d = generalized_kl(
            tgt.0.row(0).as_slice().unwrap(),
            pr.0.row(0).as_slice().unwrap(),
        );
        assert!(d.abs() < 1e-9, "divergence {d}");
        let uniform = param_rate(&a_t, &Array2::zeros((1, K_ELEM)), 0.5);
        let d = generalized_kl(
            tgt.0.row(0).as_slice().unwrap(),
            uniform.0.row(0).as_slice().unwrap(),
        );
        assert!(d > 1.0);
    }
}
