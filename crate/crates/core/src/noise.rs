//! Systematic errors of the protocol: miscalibrated random unitaries
//! (`U → U·⊗_k exp(iη h_k)` with GUE `h_k`) and local depolarization, with
//! the leading-order predictions of their effect on estimated fidelities.

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XpvError};
use crate::measure::{
    born_probabilities, sample_counts, MeasurementDataset, OutcomeRecord, Outcomes, Shots,
};
use crate::qcore::{self, site_digit, DensityMatrix, QuantumState};
use crate::randsrc::{self, CMatrix, LocalUnitary, Unitary, UnitarySchedule};

/// Imperfections of one platform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseProfile {
    /// Unitary-error strength `η ≥ 0`.
    pub eta: f64,
    /// Single-qubit depolarization probability `p_D`.
    pub p_depol: f64,
    pub seed: u64,
}

impl NoiseProfile {
    pub fn clean() -> Self {
        Self::default()
    }

    pub fn validate(&self, num_sites: usize) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(XpvError::InvalidValue(format!(
                "eta must be finite and >= 0, got {}",
                self.eta
            )));
        }
        check_depol(self.p_depol, num_sites)
    }
}

fn check_depol(p: f64, num_sites: usize) -> Result<()> {
    if !(p >= 0.0) || 1.0 - 2.0 * p * num_sites as f64 <= 0.0 {
        return Err(XpvError::Channel(format!(
            "depolarization {p} invalid on {num_sites} sites: need 0 <= p and 1 - 2pN > 0"
        )));
    }
    Ok(())
}

/// `exp(iηh)` for Hermitian `h`.
pub fn expi_hermitian(h: &CMatrix, eta: f64) -> CMatrix {
    let eig = SymmetricEigen::new(h.clone());
    let v = &eig.eigenvectors;
    let phases =
        CMatrix::from_diagonal(&eig.eigenvalues.map(|l| Complex64::from_polar(1.0, eta * l)));
    v * phases * v.adjoint()
}

/// Right-multiplies every factor by `exp(iη h_k)`, `h_k` drawn from
/// `stream(derive_seed(seed, [platform]), unitary_index, k)`.
pub fn perturb_unitary(
    u: &LocalUnitary,
    profile: &NoiseProfile,
    platform: u64,
    unitary_index: u64,
) -> LocalUnitary {
    if profile.eta == 0.0 {
        return u.clone();
    }
    let master = randsrc::derive_seed(profile.seed, &[platform]);
    let factors = u
        .factors
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let mut rng = randsrc::stream(master, unitary_index, k as u64);
            let h = randsrc::sample_gue(f.nrows(), &mut rng);
            f * expi_hermitian(&h, profile.eta)
        })
        .collect();
    LocalUnitary { factors }
}

/// `(1 − 2pN) ρ + 2p Σ_k Tr_k(ρ) ⊗ 𝟙_k/2`, qubits only.
pub fn depolarize(rho: &DensityMatrix, p: f64) -> Result<DensityMatrix> {
    if rho.local_dim() != 2 {
        return Err(XpvError::Channel(
            "local depolarization is defined for qubits only".into(),
        ));
    }
    let n = rho.num_sites();
    check_depol(p, n)?;
    if p == 0.0 {
        return Ok(rho.clone());
    }
    let dim = rho.dim();
    let m = rho.matrix();
    let mut out = m.map(|z| z * (1.0 - 2.0 * p * n as f64));
    for k in 0..n {
        let bit = 1usize << (n - 1 - k);
        for i in 0..dim {
            for j in 0..dim {
                if site_digit(i, k, n, 2) != site_digit(j, k, n, 2) {
                    continue;
                }
                // (Tr_k ρ)(i\k, j\k) ⊗ δ/2, with the k-th digits summed out.
                let (i0, j0) = (i & !bit, j & !bit);
                let reduced = m[(i0, j0)] + m[(i0 | bit, j0 | bit)];
                out[(i, j)] += reduced * p;
            }
        }
    }
    Ok(DensityMatrix::from_parts_unchecked(out, n, 2))
}

/// Leading-order fidelity shifts for `ρ1 = ρ2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityShift {
    pub delta_f_max: f64,
    pub delta_f_gm: f64,
}

/// `Σ_k Tr[(Tr_k ρ)²] / Tr[ρ²]`, `Tr_k` tracing out site `k` only.
pub fn reduced_purity_ratio(rho: &DensityMatrix) -> Result<f64> {
    let n = rho.num_sites();
    let p = qcore::purity(rho);
    if n == 1 {
        return Ok(1.0 / p);
    }
    let mut acc = 0.0;
    for k in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&j| j != k).collect();
        acc += qcore::purity(&qcore::partial_trace(rho, &keep)?);
    }
    Ok(acc / p)
}

/// First-order shifts of `F_GM` and `F_max` when `ρ1 = ρ2`.
///
/// Unitary errors give `−(η1² + η2²)(2N − S)` to both, with
/// `S = Σ_k Tr[(Tr_k ρ)²]/Tr[ρ²]`. Depolarization cancels in `F_GM` and
/// shifts `F_max` by `−|p1 − p2|(2N − S)`: the larger purity belongs to the
/// less depolarized platform.
pub fn predict_fidelity_shift(
    rho1: &DensityMatrix,
    rho2: &DensityMatrix,
    profile_1: &NoiseProfile,
    profile_2: &NoiseProfile,
) -> Result<FidelityShift> {
    if rho1.dim() != rho2.dim() {
        return Err(XpvError::Shape("states have different dimensions".into()));
    }
    let diff = rho1
        .matrix()
        .iter()
        .zip(rho2.matrix().iter())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    if diff > 1e-10 {
        return Err(XpvError::Unsupported(
            "shift predictions cover rho1 = rho2 only".into(),
        ));
    }
    let n = rho1.num_sites() as f64;
    let s = reduced_purity_ratio(rho1)?;
    let unitary = -(profile_1.eta.powi(2) + profile_2.eta.powi(2)) * (2.0 * n - s);
    let depol = -(profile_1.p_depol - profile_2.p_depol).abs() * (2.0 * n - s);
    Ok(FidelityShift {
        delta_f_max: unitary + depol,
        delta_f_gm: unitary,
    })
}

/// Both platforms measure through their own imperfections: platform `i`
/// depolarizes its state, then rotates with `perturb_unitary(U, profile_i)`.
/// The datasets carry the clean schedule's reference.
pub fn simulate_imperfect_protocol(
    states: [&QuantumState; 2],
    schedule: &UnitarySchedule,
    profiles: [&NoiseProfile; 2],
    shots: Shots,
    shot_seeds: [u64; 2],
) -> Result<(MeasurementDataset, MeasurementDataset)> {
    let mut out = Vec::with_capacity(2);
    for p in 0..2 {
        let profile = profiles[p];
        profile.validate(schedule.num_sites())?;
        let state = states[p];
        if state.num_sites() != schedule.num_sites() || state.local_dim() != schedule.local_dim() {
            return Err(XpvError::Shape(
                "state does not match the schedule register".into(),
            ));
        }
        let noisy: QuantumState = if profile.p_depol > 0.0 {
            depolarize(&state.to_density(), profile.p_depol)?.into()
        } else {
            state.clone()
        };
        let records = schedule
            .unitaries()
            .par_iter()
            .enumerate()
            .map(|(u, unitary)| {
                let applied = match unitary {
                    Unitary::Local(l) => {
                        Unitary::Local(perturb_unitary(l, profile, p as u64, u as u64))
                    }
                    Unitary::Global(_) if profile.eta > 0.0 => {
                        return Err(XpvError::Unsupported(
                            "unitary errors are modeled for local schedules".into(),
                        ))
                    }
                    Unitary::Global(m) => Unitary::Global(m.clone()),
                };
                let dist = born_probabilities(&noisy, &applied)?;
                match shots {
                    Shots::Exact => Ok(OutcomeRecord {
                        u,
                        outcomes: Outcomes::Probs(dist.probs),
                    }),
                    Shots::Count(m) => sample_counts(
                        &dist,
                        m,
                        u,
                        &mut randsrc::stream(shot_seeds[p], u as u64, 0),
                    ),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(MeasurementDataset::new(
            format!("platform-{}", p + 1),
            schedule.schedule_ref(),
            schedule.num_sites(),
            schedule.local_dim(),
            matches!(shots, Shots::Exact),
            records,
        )?);
    }
    let second = out.pop().expect("two platforms");
    let first = out.pop().expect("two platforms");
    Ok((first, second))
}
