//! Exact dynamics of the long-range XY chain
//! `H = Σ_{i<j} J_ij (σ⁺_i σ⁻_j + h.c.) + B Σ_i σᶻ_i + Σ_j δ_j σᶻ_j`
//! with `J_ij = J_0 / |i − j|^α` and `ħ = 1`.
//!
//! Basis digit 0 is spin up (`σᶻ = +1`). The Hamiltonian is real in the
//! computational basis, so one real symmetric eigendecomposition serves every
//! evolution time.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XpvError};
use crate::qcore::{site_digit, PureState, MAX_SITES};
use crate::randsrc::{self, CVector};

/// Coupling scale of the trapped-ion experiments, in s⁻¹.
pub const DEFAULT_J0: f64 = 420.0;
pub const DEFAULT_ALPHA: f64 = 1.24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XYModel {
    pub n_sites: usize,
    pub j0: f64,
    pub alpha: f64,
    pub b_field: f64,
    /// On-site fields `δ_j`; `None` for the clean chain.
    pub disorder: Option<Vec<f64>>,
}

impl XYModel {
    pub fn new(n_sites: usize, j0: f64, alpha: f64) -> Self {
        Self {
            n_sites,
            j0,
            alpha,
            b_field: 0.0,
            disorder: None,
        }
    }

    /// Draws `δ_j` uniformly from `[−bound, bound]`, site `j` from `stream(seed, 0, j)`.
    pub fn with_disorder(mut self, bound: f64, seed: u64) -> Self {
        let fields = (0..self.n_sites)
            .map(|j| {
                let mut rng = randsrc::stream(seed, 0, j as u64);
                rng.random_range(-bound..=bound)
            })
            .collect();
        self.disorder = Some(fields);
        self
    }

    /// The model with `H → −H`.
    pub fn reversed(&self) -> Self {
        Self {
            n_sites: self.n_sites,
            j0: -self.j0,
            alpha: self.alpha,
            b_field: -self.b_field,
            disorder: self
                .disorder
                .as_ref()
                .map(|d| d.iter().map(|x| -x).collect()),
        }
    }

    /// `J_ij`; symmetric with zero diagonal.
    pub fn couplings(&self) -> DMatrix<f64> {
        let n = self.n_sites;
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                self.j0 / ((i as f64 - j as f64).abs()).powf(self.alpha)
            }
        })
    }

    fn validate(&self) -> Result<()> {
        if self.n_sites == 0 || self.n_sites > MAX_SITES {
            return Err(XpvError::Shape(format!(
                "n_sites must be in 1..={MAX_SITES}, got {}",
                self.n_sites
            )));
        }
        if let Some(d) = &self.disorder {
            if d.len() != self.n_sites {
                return Err(XpvError::Shape(format!(
                    "{} disorder fields for {} sites",
                    d.len(),
                    self.n_sites
                )));
            }
        }
        Ok(())
    }
}

fn sz(idx: usize, k: usize, n: usize) -> f64 {
    if site_digit(idx, k, n, 2) == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Dense real Hamiltonian in the computational basis.
pub fn build_hamiltonian(model: &XYModel) -> Result<DMatrix<f64>> {
    model.validate()?;
    let n = model.n_sites;
    let dim = 1usize << n;
    let j = model.couplings();
    let mut h = DMatrix::zeros(dim, dim);
    for idx in 0..dim {
        let mut diag = 0.0;
        for k in 0..n {
            let field = model.b_field + model.disorder.as_ref().map_or(0.0, |d| d[k]);
            diag += field * sz(idx, k, n);
        }
        h[(idx, idx)] = diag;
        // σ⁺σ⁻ + σ⁻σ⁺ swaps antiparallel neighbors with amplitude 1.
        for a in 0..n {
            for b in (a + 1)..n {
                let (ba, bb) = (n - 1 - a, n - 1 - b);
                let (da, db) = ((idx >> ba) & 1, (idx >> bb) & 1);
                if da != db {
                    let flipped = idx ^ (1 << ba) ^ (1 << bb);
                    h[(flipped, idx)] += j[(a, b)];
                }
            }
        }
    }
    Ok(h)
}

/// Total magnetization `Σ_k σᶻ_k` (diagonal).
pub fn magnetization_diag(n: usize) -> Vec<f64> {
    (0..1usize << n)
        .map(|idx| (0..n).map(|k| sz(idx, k, n)).sum())
        .collect()
}

/// `⟨ψ|Σ σᶻ|ψ⟩`.
pub fn magnetization(state: &PureState) -> f64 {
    let m = magnetization_diag(state.num_sites());
    state
        .amplitudes()
        .iter()
        .zip(&m)
        .map(|(a, z)| a.norm_sqr() * z)
        .sum()
}

/// `⟨ψ|H|ψ⟩` for a real symmetric `H`.
pub fn energy(h: &DMatrix<f64>, state: &PureState) -> f64 {
    let psi = state.amplitudes();
    let hc = h.map(|x| Complex64::new(x, 0.0));
    psi.dotc(&(&hc * psi)).re
}

/// Eigendecomposition of a model's Hamiltonian, reused across times.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub num_sites: usize,
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl Spectrum {
    pub fn new(model: &XYModel) -> Result<Self> {
        let h = build_hamiltonian(model)?;
        let eig = SymmetricEigen::new(h);
        Ok(Self {
            num_sites: model.n_sites,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    /// `exp(−iHt)|ψ⟩`.
    pub fn evolve(&self, initial: &PureState, t: f64) -> Result<PureState> {
        if initial.num_sites() != self.num_sites || initial.local_dim() != 2 {
            return Err(XpvError::Shape(
                "initial state does not match the model register".into(),
            ));
        }
        let v = &self.eigenvectors;
        let psi = initial.amplitudes();
        let dim = psi.len();
        let mut coeffs = vec![Complex64::new(0.0, 0.0); dim];
        for (e, c) in coeffs.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..dim {
                acc += psi[i] * v[(i, e)];
            }
            *c = acc * Complex64::from_polar(1.0, -self.eigenvalues[e] * t);
        }
        let mut out = CVector::zeros(dim);
        for i in 0..dim {
            let mut acc = Complex64::new(0.0, 0.0);
            for (e, c) in coeffs.iter().enumerate() {
                acc += v[(i, e)] * c;
            }
            out[i] = acc;
        }
        // Renormalize away the O(ε) drift of the eigenbasis round trip.
        let norm = out.norm();
        PureState::new(out / Complex64::new(norm, 0.0), self.num_sites, 2)
    }
}

/// `exp(−iHt)|ψ⟩` with a fresh eigendecomposition.
pub fn evolve(model: &XYModel, initial: &PureState, t: f64) -> Result<PureState> {
    if t < 0.0 {
        return Err(XpvError::InvalidValue(format!(
            "evolution time must be >= 0, got {t}"
        )));
    }
    Spectrum::new(model)?.evolve(initial, t)
}

/// `|0101…⟩`: site `k` holds digit `k mod 2`.
pub fn neel_state(n: usize) -> Result<PureState> {
    let idx = (0..n).fold(0usize, |acc, k| acc * 2 + (k % 2));
    PureState::basis(idx, n, 2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuenchResult {
    pub times: Vec<f64>,
    pub states: Vec<PureState>,
}

/// States at each time from one shared eigendecomposition.
pub fn quench_series(model: &XYModel, initial: &PureState, times: &[f64]) -> Result<QuenchResult> {
    if let Some(t) = times.iter().find(|t| **t < 0.0) {
        return Err(XpvError::InvalidValue(format!(
            "evolution time must be >= 0, got {t}"
        )));
    }
    let spectrum = Spectrum::new(model)?;
    let states = times
        .par_iter()
        .map(|&t| spectrum.evolve(initial, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuenchResult {
        times: times.to_vec(),
        states,
    })
}
