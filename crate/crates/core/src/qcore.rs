//! Dense state algebra: pure states, density matrices, partial traces,
//! purities and overlaps. These are the exact oracles every estimator is
//! checked against.
//!
//! Basis strings are indexed with site 0 as the most significant digit, so
//! `|0101⟩` on qubits is index `0b0101 = 5`.

use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XpvError};
use crate::randsrc::{self, default_local_dim, validate_sites, CMatrix, CVector};

/// Register size cap: a 12-qubit density matrix already holds 16M entries.
pub const MAX_SITES: usize = 12;

const CONSTRUCTION_TOL: f64 = 1e-9;

/// Digit of site `k` in basis index `idx` of an `n`-site, `d`-level register.
pub fn site_digit(idx: usize, k: usize, n: usize, d: usize) -> usize {
    (idx / d.pow((n - 1 - k) as u32)) % d
}

fn check_register(num_sites: usize, local_dim: usize) -> Result<usize> {
    if num_sites == 0 || num_sites > MAX_SITES {
        return Err(XpvError::Shape(format!(
            "num_sites must be in 1..={MAX_SITES}, got {num_sites}"
        )));
    }
    if local_dim < 2 {
        return Err(XpvError::Shape(format!(
            "local_dim must be >= 2, got {local_dim}"
        )));
    }
    Ok(local_dim.pow(num_sites as u32))
}

/// Normalized state vector over `(C^d)^{⊗N}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    amplitudes: CVector,
    num_sites: usize,
    local_dim: usize,
}

impl PureState {
    pub fn new(amplitudes: CVector, num_sites: usize, local_dim: usize) -> Result<Self> {
        let dim = check_register(num_sites, local_dim)?;
        if amplitudes.len() != dim {
            return Err(XpvError::Shape(format!(
                "expected {dim} amplitudes, got {}",
                amplitudes.len()
            )));
        }
        let norm_sqr = amplitudes.norm_squared();
        if (norm_sqr - 1.0).abs() > CONSTRUCTION_TOL {
            return Err(XpvError::InvalidValue(format!(
                "state not normalized: |ψ|² = {norm_sqr}"
            )));
        }
        Ok(Self {
            amplitudes,
            num_sites,
            local_dim,
        })
    }

    /// Computational basis state `|idx⟩`.
    pub fn basis(idx: usize, num_sites: usize, local_dim: usize) -> Result<Self> {
        let dim = check_register(num_sites, local_dim)?;
        if idx >= dim {
            return Err(XpvError::Shape(format!(
                "basis index {idx} out of range for dimension {dim}"
            )));
        }
        let mut amplitudes = CVector::zeros(dim);
        amplitudes[idx] = Complex64::new(1.0, 0.0);
        Ok(Self {
            amplitudes,
            num_sites,
            local_dim,
        })
    }

    /// Tensor product of single-site states, site 0 first.
    pub fn product(sites: &[CVector]) -> Result<Self> {
        let local_dim = sites.first().map(|s| s.len()).unwrap_or(0);
        let mut amplitudes = CVector::from_element(1, Complex64::new(1.0, 0.0));
        for s in sites {
            if s.len() != local_dim {
                return Err(XpvError::Shape(
                    "product factors must share a local dimension".into(),
                ));
            }
            amplitudes = amplitudes.kronecker(s);
        }
        Self::new(amplitudes, sites.len(), local_dim)
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn num_sites(&self) -> usize {
        self.num_sites
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn to_density(&self) -> DensityMatrix {
        let m = &self.amplitudes * self.amplitudes.adjoint();
        DensityMatrix {
            matrix: m,
            num_sites: self.num_sites,
            local_dim: self.local_dim,
        }
    }

    /// `|⟨self|other⟩|²`.
    pub fn fidelity(&self, other: &PureState) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(XpvError::Shape(
                "pure states have different dimensions".into(),
            ));
        }
        Ok(self.amplitudes.dotc(&other.amplitudes).norm_sqr())
    }

    /// Reduced density matrix on `keep`, computed without forming `|ψ⟩⟨ψ|`.
    pub fn reduced(&self, keep: &[usize]) -> Result<DensityMatrix> {
        let layout = SplitLayout::new(self.num_sites, self.local_dim, keep)?;
        let (dk, dt) = (layout.kept_dim, layout.traced_dim);
        let psi = &self.amplitudes;
        let mut out = CMatrix::zeros(dk, dk);
        for a in 0..dk {
            for b in a..dk {
                let mut acc = Complex64::new(0.0, 0.0);
                for t in 0..dt {
                    acc += psi[layout.full(a, t)] * psi[layout.full(b, t)].conj();
                }
                out[(a, b)] = acc;
                out[(b, a)] = acc.conj();
            }
        }
        Ok(DensityMatrix {
            matrix: out,
            num_sites: keep.len(),
            local_dim: self.local_dim,
        })
    }
}

/// Hermitian, unit-trace density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: CMatrix,
    num_sites: usize,
    local_dim: usize,
}

impl DensityMatrix {
    /// Validates Hermiticity and unit trace to 1e-9 (positivity is not checked).
    pub fn new(matrix: CMatrix, num_sites: usize, local_dim: usize) -> Result<Self> {
        let dim = check_register(num_sites, local_dim)?;
        if matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(XpvError::Shape(format!(
                "expected {dim}x{dim} matrix, got {:?}",
                matrix.shape()
            )));
        }
        let herm = hermiticity_defect(&matrix);
        if herm > CONSTRUCTION_TOL {
            return Err(XpvError::InvalidValue(format!(
                "matrix not Hermitian (defect {herm:e})"
            )));
        }
        let tr = matrix.trace();
        if (tr.re - 1.0).abs() > CONSTRUCTION_TOL || tr.im.abs() > CONSTRUCTION_TOL {
            return Err(XpvError::InvalidValue(format!("trace is {tr}, expected 1")));
        }
        Ok(Self {
            matrix,
            num_sites,
            local_dim,
        })
    }

    pub(crate) fn from_parts_unchecked(
        matrix: CMatrix,
        num_sites: usize,
        local_dim: usize,
    ) -> Self {
        Self {
            matrix,
            num_sites,
            local_dim,
        }
    }

    pub fn maximally_mixed(num_sites: usize, local_dim: usize) -> Result<Self> {
        let dim = check_register(num_sites, local_dim)?;
        let matrix = CMatrix::identity(dim, dim) / Complex64::new(dim as f64, 0.0);
        Ok(Self {
            matrix,
            num_sites,
            local_dim,
        })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn num_sites(&self) -> usize {
        self.num_sites
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Debug dump: magic `XPVRHO1`, `d` and `N` as little-endian `u32`, then
    /// row-major interleaved real/imaginary `f64` little-endian.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.local_dim as u32).to_le_bytes())?;
        w.write_all(&(self.num_sites as u32).to_le_bytes())?;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                let z = self.matrix[(i, j)];
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(XpvError::Format("bad density-matrix magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let local_dim = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let num_sites = u32::from_le_bytes(word) as usize;
        let dim = check_register(num_sites, local_dim)?;
        let mut matrix = CMatrix::zeros(dim, dim);
        let mut buf = [0u8; 8];
        for i in 0..dim {
            for j in 0..dim {
                r.read_exact(&mut buf)?;
                let re = f64::from_le_bytes(buf);
                r.read_exact(&mut buf)?;
                let im = f64::from_le_bytes(buf);
                matrix[(i, j)] = Complex64::new(re, im);
            }
        }
        Self::new(matrix, num_sites, local_dim)
    }
}

const DUMP_MAGIC: &[u8; 7] = b"XPVRHO1";

/// Largest `|ρ_ij - conj(ρ_ji)|`.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// A state as handed to the measurement simulator: pure states keep the
/// cheaper vector representation.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantumState {
    Pure(PureState),
    Mixed(DensityMatrix),
}

impl QuantumState {
    pub fn num_sites(&self) -> usize {
        match self {
            QuantumState::Pure(p) => p.num_sites(),
            QuantumState::Mixed(m) => m.num_sites(),
        }
    }

    pub fn local_dim(&self) -> usize {
        match self {
            QuantumState::Pure(p) => p.local_dim(),
            QuantumState::Mixed(m) => m.local_dim(),
        }
    }

    pub fn dim(&self) -> usize {
        self.local_dim().pow(self.num_sites() as u32)
    }

    pub fn to_density(&self) -> DensityMatrix {
        match self {
            QuantumState::Pure(p) => p.to_density(),
            QuantumState::Mixed(m) => m.clone(),
        }
    }

    pub fn reduced(&self, keep: &[usize]) -> Result<DensityMatrix> {
        match self {
            QuantumState::Pure(p) => p.reduced(keep),
            QuantumState::Mixed(m) => partial_trace(m, keep),
        }
    }
}

impl From<PureState> for QuantumState {
    fn from(p: PureState) -> Self {
        QuantumState::Pure(p)
    }
}

impl From<DensityMatrix> for QuantumState {
    fn from(m: DensityMatrix) -> Self {
        QuantumState::Mixed(m)
    }
}

/// Index bookkeeping for splitting a register into kept and traced sites.
struct SplitLayout {
    kept_dim: usize,
    traced_dim: usize,
    full: Vec<usize>,
}

impl SplitLayout {
    fn new(num_sites: usize, local_dim: usize, keep: &[usize]) -> Result<Self> {
        validate_sites(keep, num_sites)?;
        let traced: Vec<usize> = (0..num_sites).filter(|k| !keep.contains(k)).collect();
        let kept_dim = local_dim.pow(keep.len() as u32);
        let traced_dim = local_dim.pow(traced.len() as u32);
        let mut full = vec![0usize; kept_dim * traced_dim];
        for a in 0..kept_dim {
            for t in 0..traced_dim {
                let mut idx = 0usize;
                for k in 0..num_sites {
                    let digit = if let Some(pos) = keep.iter().position(|&x| x == k) {
                        site_digit(a, pos, keep.len(), local_dim)
                    } else {
                        let pos = traced.iter().position(|&x| x == k).unwrap();
                        site_digit(t, pos, traced.len(), local_dim)
                    };
                    idx = idx * local_dim + digit;
                }
                full[a * traced_dim + t] = idx;
            }
        }
        Ok(Self {
            kept_dim,
            traced_dim,
            full,
        })
    }

    #[inline]
    fn full(&self, kept: usize, traced: usize) -> usize {
        self.full[kept * self.traced_dim + traced]
    }
}

/// `Tr_{S∖keep}(ρ)`; `keep` must be strictly increasing and in range.
pub fn partial_trace(rho: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix> {
    let layout = SplitLayout::new(rho.num_sites, rho.local_dim, keep)?;
    let (dk, dt) = (layout.kept_dim, layout.traced_dim);
    let mut out = CMatrix::zeros(dk, dk);
    for a in 0..dk {
        for b in 0..dk {
            let mut acc = Complex64::new(0.0, 0.0);
            for t in 0..dt {
                acc += rho.matrix[(layout.full(a, t), layout.full(b, t))];
            }
            out[(a, b)] = acc;
        }
    }
    Ok(DensityMatrix {
        matrix: out,
        num_sites: keep.len(),
        local_dim: rho.local_dim,
    })
}

/// `Tr(ρ²)`.
pub fn purity(rho: &DensityMatrix) -> f64 {
    rho.matrix.iter().map(|z| z.norm_sqr()).sum()
}

/// `Tr(ρ1 ρ2)` for Hermitian arguments; bit-symmetric in its arguments.
pub fn overlap(rho1: &DensityMatrix, rho2: &DensityMatrix) -> Result<f64> {
    if rho1.matrix.shape() != rho2.matrix.shape() {
        return Err(XpvError::Shape(format!(
            "overlap of {:?} and {:?} matrices",
            rho1.matrix.shape(),
            rho2.matrix.shape()
        )));
    }
    Ok(rho1
        .matrix
        .iter()
        .zip(rho2.matrix.iter())
        .map(|(a, b)| a.re * b.re + a.im * b.im)
        .sum())
}

fn positive_purities(rho1: &DensityMatrix, rho2: &DensityMatrix) -> Result<(f64, f64, f64)> {
    let o = overlap(rho1, rho2)?;
    let (p1, p2) = (purity(rho1), purity(rho2));
    if p1 <= 0.0 || p2 <= 0.0 {
        return Err(XpvError::DegenerateInput(format!(
            "non-positive purity ({p1}, {p2})"
        )));
    }
    Ok((o, p1, p2))
}

/// `Tr(ρ1ρ2) / max(Tr ρ1², Tr ρ2²)`.
pub fn fidelity_max(rho1: &DensityMatrix, rho2: &DensityMatrix) -> Result<f64> {
    let (o, p1, p2) = positive_purities(rho1, rho2)?;
    Ok(o / p1.max(p2))
}

/// `Tr(ρ1ρ2) / sqrt(Tr ρ1² · Tr ρ2²)`.
pub fn fidelity_gm(rho1: &DensityMatrix, rho2: &DensityMatrix) -> Result<f64> {
    let (o, p1, p2) = positive_purities(rho1, rho2)?;
    Ok(o / (p1 * p2).sqrt())
}

/// Global dephasing `λρ + (1-λ) I/D`.
pub fn dephase(rho: &DensityMatrix, lambda: f64) -> Result<DensityMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(XpvError::InvalidValue(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    let dim = rho.dim();
    let mut m = rho.matrix.map(|z| z * lambda);
    for i in 0..dim {
        m[(i, i)] += Complex64::new((1.0 - lambda) / dim as f64, 0.0);
    }
    Ok(DensityMatrix {
        matrix: m,
        num_sites: rho.num_sites,
        local_dim: rho.local_dim,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    /// Product of independent Haar-random single-site states.
    PureProduct,
    /// Haar-random pure state on the whole register.
    PureHaarRandom,
    /// Marginal of a Haar-random state on `N + traced_sites` sites.
    MixedRandom {
        traced_sites: usize,
    },
    /// `|0101…⟩`.
    Neel,
    MaximallyMixed,
    /// `λ|ψ⟩⟨ψ| + (1-λ) I/D` with `|ψ⟩` a random pure product state.
    DephasedMixture {
        lambda: f64,
    },
}

/// Seeded description of a state family member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub kind: StateKind,
    pub num_sites: usize,
    #[serde(default = "default_local_dim")]
    pub local_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

impl StateSpec {
    pub fn new(kind: StateKind, num_sites: usize, seed: u64) -> Self {
        Self {
            kind,
            num_sites,
            local_dim: 2,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        check_register(self.num_sites, self.local_dim)?;
        match self.kind {
            StateKind::MixedRandom { traced_sites } => {
                if traced_sites == 0 {
                    return Err(XpvError::InvalidValue(
                        "MixedRandom needs traced_sites >= 1".into(),
                    ));
                }
                check_register(self.num_sites + traced_sites, self.local_dim)?;
            }
            StateKind::DephasedMixture { lambda } if !(0.0..=1.0).contains(&lambda) => {
                return Err(XpvError::InvalidValue(format!(
                    "lambda must be in [0, 1], got {lambda}"
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

fn random_product(num_sites: usize, local_dim: usize, seed: u64) -> Result<PureState> {
    let sites: Vec<CVector> = (0..num_sites)
        .map(|k| {
            let mut rng = randsrc::stream(seed, 0, k as u64);
            randsrc::sample_haar_vector(local_dim, &mut rng)
        })
        .collect();
    PureState::product(&sites)
}

fn random_pure(num_sites: usize, local_dim: usize, seed: u64) -> Result<PureState> {
    let dim = local_dim.pow(num_sites as u32);
    let mut rng = randsrc::stream(seed, 1, 0);
    PureState::new(
        randsrc::sample_haar_vector(dim, &mut rng),
        num_sites,
        local_dim,
    )
}

/// Builds a state, keeping pure states in vector form.
pub fn prepare_state(spec: &StateSpec) -> Result<QuantumState> {
    spec.validate()?;
    let (n, d) = (spec.num_sites, spec.local_dim);
    Ok(match spec.kind {
        StateKind::PureProduct => random_product(n, d, spec.seed)?.into(),
        StateKind::PureHaarRandom => random_pure(n, d, spec.seed)?.into(),
        StateKind::MixedRandom { traced_sites } => {
            let big = random_pure(n + traced_sites, d, spec.seed)?;
            let keep: Vec<usize> = (0..n).collect();
            big.reduced(&keep)?.into()
        }
        StateKind::Neel => {
            let idx = (0..n).fold(0usize, |acc, k| acc * d + (k % 2));
            PureState::basis(idx, n, d)?.into()
        }
        StateKind::MaximallyMixed => DensityMatrix::maximally_mixed(n, d)?.into(),
        StateKind::DephasedMixture { lambda } => {
            dephase(&random_product(n, d, spec.seed)?.to_density(), lambda)?.into()
        }
    })
}

/// Builds the density matrix described by `spec`; deterministic in the seed.
pub fn build_state(spec: &StateSpec) -> Result<DensityMatrix> {
    Ok(prepare_state(spec)?.to_density())
}
