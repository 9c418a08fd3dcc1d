//! Random objects: single-site Haar (CUE) unitaries, the single-qubit Clifford
//! group, global Haar unitaries, GUE generators, and counter-based seed
//! derivation.
//!
//! Every sampler takes an explicit [`RngStream`]. Streams are derived with
//! [`stream`] from `(master, u, k)` so that a schedule is a pure function of
//! its parameters and can be generated in any order, or in parallel.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, XpvError};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Deterministic random stream handed to every sampler.
pub type RngStream = ChaCha8Rng;

const UNITARITY_TOL: f64 = 1e-10;

/// Independent stream for unitary index `u` and site `k` under `master`.
pub fn stream(master: u64, u: u64, k: u64) -> RngStream {
    let mut hasher = Sha256::new();
    hasher.update(b"xpv/stream/v1");
    hasher.update(master.to_le_bytes());
    hasher.update(u.to_le_bytes());
    hasher.update(k.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Derives a child seed from a master seed and a label path.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"xpv/seed/v1");
    hasher.update(master.to_le_bytes());
    for l in labels {
        hasher.update(l.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

fn complex_normal(rng: &mut RngStream) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Haar-distributed `d x d` unitary.
///
/// QR of a complex Ginibre matrix, with the phases of `R`'s diagonal pushed
/// into `Q`. Without that correction the result is not Haar.
pub fn sample_cue(d: usize, rng: &mut RngStream) -> CMatrix {
    assert!(d >= 1, "dimension must be positive");
    let ginibre = CMatrix::from_fn(d, d, |_, _| complex_normal(rng));
    let qr = ginibre.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        let rjj = r[(j, j)];
        let norm = rjj.norm();
        let phase = if norm > 0.0 {
            rjj / norm
        } else {
            Complex64::new(1.0, 0.0)
        };
        for i in 0..d {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// A Haar-random unit vector of length `dim`: the first column of a CUE
/// sample, drawn directly as a normalized complex Gaussian vector.
pub fn sample_haar_vector(dim: usize, rng: &mut RngStream) -> CVector {
    let v = CVector::from_fn(dim, |_, _| complex_normal(rng));
    let norm = v.norm();
    v / Complex64::new(norm, 0.0)
}

/// GUE matrix normalized so that `E[h_ab h_cd] = δ_ad δ_bc`.
///
/// Diagonal entries are real `N(0, 1)`; off-diagonal real and imaginary parts
/// are i.i.d. `N(0, 1/2)`.
pub fn sample_gue(d: usize, rng: &mut RngStream) -> CMatrix {
    let mut h = CMatrix::zeros(d, d);
    for a in 0..d {
        let diag: f64 = rng.sample(StandardNormal);
        h[(a, a)] = Complex64::new(diag, 0.0);
        for b in (a + 1)..d {
            let z = complex_normal(rng);
            h[(a, b)] = z;
            h[(b, a)] = z.conj();
        }
    }
    h
}

/// Maximum absolute entry of `U†U - I`.
pub fn unitarity_defect(u: &CMatrix) -> f64 {
    let prod = u.adjoint() * u;
    let mut worst = 0.0f64;
    for i in 0..prod.nrows() {
        for j in 0..prod.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((prod[(i, j)] - Complex64::new(target, 0.0)).norm());
        }
    }
    worst
}

fn canonical_phase(m: &CMatrix) -> CMatrix {
    // First entry (row-major) with non-negligible modulus is made real positive.
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            if z.norm() > 1e-9 {
                let phase = z.conj() / z.norm();
                return m.map(|x| x * phase);
            }
        }
    }
    m.clone()
}

fn approx_eq(a: &CMatrix, b: &CMatrix, tol: f64) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).norm() < tol)
}

/// The 24 single-qubit Clifford unitaries, modulo global phase.
///
/// Generated by closing `{H, S}` under multiplication. The identity is
/// element 0. Each element is phase-normalized so that its first nonzero
/// entry is real and positive.
pub fn enumerate_clifford_1q() -> Vec<CMatrix> {
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    let c = |re: f64, im: f64| Complex64::new(re, im);
    let hadamard =
        CMatrix::from_row_slice(2, 2, &[c(s2, 0.0), c(s2, 0.0), c(s2, 0.0), c(-s2, 0.0)]);
    let phase =
        CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 1.0)]);
    let generators = [hadamard, phase];

    let mut group = vec![CMatrix::identity(2, 2)];
    let mut frontier = 0;
    while frontier < group.len() {
        let current = group[frontier].clone();
        frontier += 1;
        for g in &generators {
            let candidate = canonical_phase(&(g * &current));
            if !group.iter().any(|m| approx_eq(m, &candidate, 1e-9)) {
                group.push(candidate);
            }
        }
    }
    group
}

/// Tensor (Kronecker) product of a list of square factors, site 0 leftmost.
pub fn kron_all(factors: &[CMatrix]) -> CMatrix {
    let mut out = CMatrix::from_element(1, 1, Complex64::new(1.0, 0.0));
    for f in factors {
        out = out.kronecker(f);
    }
    out
}

/// Product unitary `U_1 ⊗ … ⊗ U_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUnitary {
    pub factors: Vec<CMatrix>,
}

impl LocalUnitary {
    pub fn num_sites(&self) -> usize {
        self.factors.len()
    }

    pub fn dense(&self) -> CMatrix {
        kron_all(&self.factors)
    }

    /// Keeps only the factors of `sites`, in the given order.
    pub fn restrict(&self, sites: &[usize]) -> LocalUnitary {
        LocalUnitary {
            factors: sites.iter().map(|&k| self.factors[k].clone()).collect(),
        }
    }
}

/// One entry of a schedule: either a product of local factors or a single
/// unitary over the whole register.
#[derive(Debug, Clone, PartialEq)]
pub enum Unitary {
    Local(LocalUnitary),
    Global(CMatrix),
}

impl Unitary {
    pub fn dense(&self) -> CMatrix {
        match self {
            Unitary::Local(l) => l.dense(),
            Unitary::Global(m) => m.clone(),
        }
    }

    pub fn mode(&self) -> ScheduleMode {
        match self {
            Unitary::Local(_) => ScheduleMode::Local,
            Unitary::Global(_) => ScheduleMode::Global,
        }
    }

    fn matrices(&self) -> Vec<&CMatrix> {
        match self {
            Unitary::Local(l) => l.factors.iter().collect(),
            Unitary::Global(m) => vec![m],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ensemble {
    HaarCue,
    CliffordSingleQubit,
}

/// Everything needed to regenerate a schedule bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub mode: ScheduleMode,
    pub ensemble: Ensemble,
    pub n_u: usize,
    pub num_sites: usize,
    #[serde(default = "default_local_dim")]
    pub local_dim: usize,
    pub master_seed: u64,
}

pub(crate) fn default_local_dim() -> usize {
    2
}

/// Ordered list of shared random unitaries.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitarySchedule {
    mode: ScheduleMode,
    num_sites: usize,
    local_dim: usize,
    unitaries: Vec<Unitary>,
    origin: Option<ScheduleParams>,
}

impl UnitarySchedule {
    /// Builds a schedule from explicit unitaries, checking shapes and unitarity.
    pub fn from_unitaries(
        mode: ScheduleMode,
        num_sites: usize,
        local_dim: usize,
        unitaries: Vec<Unitary>,
    ) -> Result<Self> {
        if num_sites == 0 || local_dim < 2 {
            return Err(XpvError::Shape(format!(
                "invalid register N={num_sites}, d={local_dim}"
            )));
        }
        let dim = local_dim.pow(num_sites as u32);
        for (u, unitary) in unitaries.iter().enumerate() {
            if unitary.mode() != mode {
                return Err(XpvError::Mode(format!(
                    "unitary {u} does not match schedule mode {mode:?}"
                )));
            }
            match unitary {
                Unitary::Local(l) => {
                    if l.factors.len() != num_sites {
                        return Err(XpvError::Shape(format!(
                            "unitary {u} has {} factors, expected {num_sites}",
                            l.factors.len()
                        )));
                    }
                    for f in &l.factors {
                        if f.nrows() != local_dim || f.ncols() != local_dim {
                            return Err(XpvError::Shape(format!(
                                "unitary {u} has a non {local_dim}x{local_dim} factor"
                            )));
                        }
                    }
                }
                Unitary::Global(m) => {
                    if m.nrows() != dim || m.ncols() != dim {
                        return Err(XpvError::Shape(format!("unitary {u} is not {dim}x{dim}")));
                    }
                }
            }
            for m in unitary.matrices() {
                let defect = unitarity_defect(m);
                if defect > UNITARITY_TOL {
                    return Err(XpvError::InvalidValue(format!(
                        "unitary {u} is not unitary (defect {defect:e})"
                    )));
                }
            }
        }
        Ok(Self {
            mode,
            num_sites,
            local_dim,
            unitaries,
            origin: None,
        })
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn num_sites(&self) -> usize {
        self.num_sites
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn dim(&self) -> usize {
        self.local_dim.pow(self.num_sites as u32)
    }

    pub fn len(&self) -> usize {
        self.unitaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unitaries.is_empty()
    }

    pub fn unitaries(&self) -> &[Unitary] {
        &self.unitaries
    }

    pub fn get(&self, u: usize) -> Option<&Unitary> {
        self.unitaries.get(u)
    }

    /// Parameters this schedule was sampled from, if it was sampled.
    pub fn origin(&self) -> Option<&ScheduleParams> {
        self.origin.as_ref()
    }

    /// Hex SHA-256 binding data to these exact matrices.
    ///
    /// Hashes mode, register shape and every matrix entry (row-major, real
    /// then imaginary, little-endian bits), so a schedule received as
    /// matrices hashes identically to the one it was generated from.
    pub fn schedule_ref(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"xpv/schedule/v1");
        hasher.update([match self.mode {
            ScheduleMode::Local => 0u8,
            ScheduleMode::Global => 1u8,
        }]);
        hasher.update((self.num_sites as u64).to_le_bytes());
        hasher.update((self.local_dim as u64).to_le_bytes());
        hasher.update((self.unitaries.len() as u64).to_le_bytes());
        for unitary in &self.unitaries {
            for m in unitary.matrices() {
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        hasher.update(m[(i, j)].re.to_bits().to_le_bytes());
                        hasher.update(m[(i, j)].im.to_bits().to_le_bytes());
                    }
                }
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Restricts a local schedule to a subset of sites (subsystem estimates).
    pub fn restrict(&self, sites: &[usize]) -> Result<UnitarySchedule> {
        if self.mode != ScheduleMode::Local {
            return Err(XpvError::Mode(
                "only local schedules can be restricted to subsystems".into(),
            ));
        }
        validate_sites(sites, self.num_sites)?;
        let unitaries = self
            .unitaries
            .iter()
            .map(|u| match u {
                Unitary::Local(l) => Unitary::Local(l.restrict(sites)),
                Unitary::Global(_) => unreachable!(),
            })
            .collect();
        Ok(UnitarySchedule {
            mode: ScheduleMode::Local,
            num_sites: sites.len(),
            local_dim: self.local_dim,
            unitaries,
            origin: None,
        })
    }

    /// First `n` unitaries.
    pub fn prefix(&self, n: usize) -> UnitarySchedule {
        let mut out = self.clone();
        out.unitaries.truncate(n);
        if let Some(o) = out.origin.as_mut() {
            o.n_u = out.unitaries.len();
        }
        out
    }

    /// Matrices-on-the-wire form.
    pub fn to_wire(&self) -> Vec<UnitaryWire> {
        self.unitaries
            .iter()
            .enumerate()
            .map(|(u, unitary)| UnitaryWire {
                u,
                factors: unitary.matrices().into_iter().map(matrix_to_wire).collect(),
            })
            .collect()
    }

    /// Rebuilds a schedule from wire entries, which must cover `0..len` in order.
    pub fn from_wire(
        mode: ScheduleMode,
        num_sites: usize,
        local_dim: usize,
        entries: &[UnitaryWire],
    ) -> Result<Self> {
        let dim = local_dim.pow(num_sites as u32);
        let mut unitaries = Vec::with_capacity(entries.len());
        for (expected, entry) in entries.iter().enumerate() {
            if entry.u != expected {
                return Err(XpvError::Format(format!(
                    "wire unitary {} out of order (expected {expected})",
                    entry.u
                )));
            }
            let unitary = match mode {
                ScheduleMode::Local => Unitary::Local(LocalUnitary {
                    factors: entry
                        .factors
                        .iter()
                        .map(|f| matrix_from_wire(f, local_dim))
                        .collect::<Result<_>>()?,
                }),
                ScheduleMode::Global => {
                    if entry.factors.len() != 1 {
                        return Err(XpvError::Format(
                            "global unitary must carry exactly one factor".into(),
                        ));
                    }
                    Unitary::Global(matrix_from_wire(&entry.factors[0], dim)?)
                }
            };
            unitaries.push(unitary);
        }
        Self::from_unitaries(mode, num_sites, local_dim, unitaries)
    }
}

fn matrix_to_wire(m: &CMatrix) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push([m[(i, j)].re, m[(i, j)].im]);
        }
    }
    out
}

fn matrix_from_wire(entries: &[[f64; 2]], dim: usize) -> Result<CMatrix> {
    if entries.len() != dim * dim {
        return Err(XpvError::Format(format!(
            "expected {} matrix entries, got {}",
            dim * dim,
            entries.len()
        )));
    }
    Ok(CMatrix::from_fn(dim, dim, |i, j| {
        let [re, im] = entries[i * dim + j];
        Complex64::new(re, im)
    }))
}

/// Interoperable wire form of one unitary: factors as row-major `[re, im]` lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitaryWire {
    pub u: usize,
    pub factors: Vec<Vec<[f64; 2]>>,
}

pub(crate) fn validate_sites(sites: &[usize], num_sites: usize) -> Result<()> {
    if sites.is_empty() {
        return Err(XpvError::InvalidSubsystem("site list is empty".into()));
    }
    for w in sites.windows(2) {
        if w[1] <= w[0] {
            return Err(XpvError::InvalidSubsystem(format!(
                "sites must be strictly increasing: {sites:?}"
            )));
        }
    }
    if let Some(&last) = sites.last() {
        if last >= num_sites {
            return Err(XpvError::InvalidSubsystem(format!(
                "site {last} out of range for N={num_sites}"
            )));
        }
    }
    Ok(())
}

fn sample_factor(
    ensemble: Ensemble,
    d: usize,
    rng: &mut RngStream,
    cliffords: &[CMatrix],
) -> CMatrix {
    match ensemble {
        Ensemble::HaarCue => sample_cue(d, rng),
        Ensemble::CliffordSingleQubit => cliffords[rng.random_range(0..cliffords.len())].clone(),
    }
}

/// Samples a schedule; unitary `u`, site `k` always uses `stream(master_seed, u, k)`.
///
/// Growing `n_u` therefore extends a schedule without changing its prefix.
pub fn sample_schedule(params: &ScheduleParams) -> Result<UnitarySchedule> {
    if params.n_u == 0 {
        return Err(XpvError::InvalidValue(
            "schedule needs at least one unitary".into(),
        ));
    }
    if params.num_sites == 0 || params.local_dim < 2 {
        return Err(XpvError::Shape(format!(
            "invalid register N={}, d={}",
            params.num_sites, params.local_dim
        )));
    }
    if params.ensemble == Ensemble::CliffordSingleQubit && params.local_dim != 2 {
        return Err(XpvError::Unsupported(
            "the Clifford ensemble is defined for qubits only".into(),
        ));
    }
    if params.mode == ScheduleMode::Global
        && params.ensemble == Ensemble::CliffordSingleQubit
        && params.num_sites != 1
    {
        return Err(XpvError::Unsupported(
            "single-qubit Cliffords are not a 2-design on a multi-qubit register".into(),
        ));
    }
    let cliffords = match params.ensemble {
        Ensemble::CliffordSingleQubit => enumerate_clifford_1q(),
        Ensemble::HaarCue => Vec::new(),
    };
    let dim = params.local_dim.pow(params.num_sites as u32);
    let unitaries: Vec<Unitary> = (0..params.n_u)
        .into_par_iter()
        .map(|u| match params.mode {
            ScheduleMode::Local => Unitary::Local(LocalUnitary {
                factors: (0..params.num_sites)
                    .map(|k| {
                        let mut rng = stream(params.master_seed, u as u64, k as u64);
                        sample_factor(params.ensemble, params.local_dim, &mut rng, &cliffords)
                    })
                    .collect(),
            }),
            ScheduleMode::Global => {
                let mut rng = stream(params.master_seed, u as u64, 0);
                Unitary::Global(sample_factor(params.ensemble, dim, &mut rng, &cliffords))
            }
        })
        .collect();
    Ok(UnitarySchedule {
        mode: params.mode,
        num_sites: params.num_sites,
        local_dim: params.local_dim,
        unitaries,
        origin: Some(*params),
    })
}

/// All `24^N` products of single-qubit Cliffords, site 0 varying slowest.
///
/// An exact local 2-design: averages over this schedule reproduce Haar
/// second moments with no sampling noise.
pub fn exhaustive_clifford_schedule(num_sites: usize) -> Result<UnitarySchedule> {
    if num_sites == 0 || num_sites > 3 {
        return Err(XpvError::Unsupported(format!(
            "exhaustive enumeration limited to 1..=3 sites, got {num_sites}"
        )));
    }
    let group = enumerate_clifford_1q();
    let total = group.len().pow(num_sites as u32);
    let unitaries = (0..total)
        .map(|mut idx| {
            let mut factors = vec![CMatrix::zeros(2, 2); num_sites];
            for k in (0..num_sites).rev() {
                factors[k] = group[idx % group.len()].clone();
                idx /= group.len();
            }
            Unitary::Local(LocalUnitary { factors })
        })
        .collect();
    UnitarySchedule::from_unitaries(ScheduleMode::Local, num_sites, 2, unitaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn swap_4() -> CMatrix {
        let mut s = CMatrix::zeros(4, 4);
        for a in 0..2 {
            for b in 0..2 {
                s[(a * 2 + b, b * 2 + a)] = Complex64::new(1.0, 0.0);
            }
        }
        s
    }

    /// O_k = d Σ_{s,s'} (-d)^{-D[s,s']} |s⟩⟨s| ⊗ |s'⟩⟨s'| for d = 2.
    fn hamming_operator() -> CMatrix {
        let mut o = CMatrix::zeros(4, 4);
        for s in 0..2 {
            for sp in 0..2 {
                let w = if s == sp { 2.0 } else { 2.0 * (-0.5) };
                o[(s * 2 + sp, s * 2 + sp)] = Complex64::new(w, 0.0);
            }
        }
        o
    }

    fn twirl(o: &CMatrix, unitaries: &[CMatrix]) -> CMatrix {
        let mut acc = CMatrix::zeros(4, 4);
        for u in unitaries {
            let uu = u.kronecker(u);
            acc += uu.adjoint() * o * &uu;
        }
        acc / Complex64::new(unitaries.len() as f64, 0.0)
    }

    #[test]
    fn cue_samples_are_unitary() {
        for seed in 0..1000u64 {
            let mut rng = stream(seed, 0, 0);
            let d = 2 + (seed % 3) as usize;
            assert!(unitarity_defect(&sample_cue(d, &mut rng)) < 1e-10);
        }
    }

    #[test]
    fn clifford_group_has_24_elements_with_identity() {
        let g = enumerate_clifford_1q();
        assert_eq!(g.len(), 24);
        assert!(approx_eq(&g[0], &CMatrix::identity(2, 2), 1e-15));
        for u in &g {
            assert!(unitarity_defect(u) < 1e-12);
        }
    }

    #[test]
    fn clifford_group_is_closed_modulo_phase() {
        let g = enumerate_clifford_1q();
        for a in &g {
            for b in &g {
                let prod = canonical_phase(&(a * b));
                assert!(g.iter().any(|m| approx_eq(m, &prod, 1e-9)));
            }
        }
    }

    #[test]
    fn clifford_twirl_of_swap_is_swap() {
        let s = swap_4();
        let avg = twirl(&s, &enumerate_clifford_1q());
        assert!(approx_eq(&avg, &s, 1e-12));
    }

    #[test]
    fn clifford_twirl_of_hamming_operator_is_swap() {
        let avg = twirl(&hamming_operator(), &enumerate_clifford_1q());
        assert!(approx_eq(&avg, &swap_4(), 1e-12));
    }

    #[test]
    fn clifford_first_and_second_moments_are_exact() {
        let g = enumerate_clifford_1q();
        let m1: f64 = g.iter().map(|u| u[(0, 0)].norm_sqr()).sum::<f64>() / 24.0;
        let m2: f64 = g.iter().map(|u| u[(0, 0)].norm_sqr().powi(2)).sum::<f64>() / 24.0;
        assert!((m1 - 0.5).abs() < 1e-14);
        assert!((m2 - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn cue_moments_match_haar() {
        // E|U00|^2 = 1/d, E|U00|^4 = 2/(d(d+1)); d = 2 cross-checked by the
        // exact Clifford averages above (1/2 and 1/3).
        let n = 100_000usize;
        for d in [2usize, 3] {
            let mut rng = stream(17, d as u64, 0);
            let (mut s1, mut s1sq, mut s2, mut s2sq) = (0.0, 0.0, 0.0, 0.0);
            for _ in 0..n {
                let x = sample_cue(d, &mut rng)[(0, 0)].norm_sqr();
                s1 += x;
                s1sq += x * x;
                s2 += x * x;
                s2sq += x.powi(4);
            }
            let nf = n as f64;
            let (m1, m2) = (s1 / nf, s2 / nf);
            let sd1 = ((s1sq / nf - m1 * m1) / nf).sqrt();
            let sd2 = ((s2sq / nf - m2 * m2) / nf).sqrt();
            let df = d as f64;
            assert!((m1 - 1.0 / df).abs() < 3.0 * sd1, "d={d} m1={m1}");
            assert!(
                (m2 - 2.0 / (df * (df + 1.0))).abs() < 3.0 * sd2,
                "d={d} m2={m2}"
            );
        }
    }

    #[test]
    fn cue_twirl_of_hamming_operator_converges_to_swap() {
        let n = 100_000;
        let mut rng = stream(5, 0, 0);
        let samples: Vec<CMatrix> = (0..n).map(|_| sample_cue(2, &mut rng)).collect();
        let avg = twirl(&hamming_operator(), &samples);
        let s = swap_4();
        // Entry magnitudes are O(1); 10^5 samples give ~3e-3 fluctuations.
        for (x, y) in avg.iter().zip(s.iter()) {
            assert!((x - y).norm() < 0.02, "{x} vs {y}");
        }
    }

    #[test]
    fn gue_second_moments_follow_kronecker_rule() {
        let n = 100_000usize;
        let mut rng = stream(99, 0, 0);
        let (mut a, mut a2, mut b, mut b2) = (0.0, 0.0, Complex64::new(0.0, 0.0), 0.0);
        for _ in 0..n {
            let h = sample_gue(2, &mut rng);
            let x = (h[(0, 1)] * h[(1, 0)]).re;
            a += x;
            a2 += x * x;
            let y = h[(0, 1)] * h[(0, 1)];
            b += y;
            b2 += y.norm_sqr();
            assert_eq!(h[(0, 1)], h[(1, 0)].conj());
            assert_eq!(h[(0, 0)].im, 0.0);
        }
        let nf = n as f64;
        let mean_a = a / nf;
        let sd_a = ((a2 / nf - mean_a * mean_a) / nf).sqrt();
        assert!((mean_a - 1.0).abs() < 3.0 * sd_a, "E[h01 h10] = {mean_a}");
        let mean_b = b / nf;
        let sd_b = (b2 / nf / nf).sqrt();
        assert!(mean_b.norm() < 3.0 * sd_b, "E[h01 h01] = {mean_b}");
    }

    #[test]
    fn schedules_are_deterministic_and_prefix_stable() {
        let params = ScheduleParams {
            mode: ScheduleMode::Local,
            ensemble: Ensemble::HaarCue,
            n_u: 20,
            num_sites: 3,
            local_dim: 2,
            master_seed: 42,
        };
        let a = sample_schedule(&params).unwrap();
        let b = sample_schedule(&params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.schedule_ref(), b.schedule_ref());
        let longer = sample_schedule(&ScheduleParams { n_u: 30, ..params }).unwrap();
        assert_eq!(&longer.unitaries()[..20], a.unitaries());
        assert_ne!(longer.schedule_ref(), a.schedule_ref());
    }

    #[test]
    fn factors_across_unitaries_are_uncorrelated() {
        let params = ScheduleParams {
            mode: ScheduleMode::Local,
            ensemble: Ensemble::HaarCue,
            n_u: 10_001,
            num_sites: 1,
            local_dim: 2,
            master_seed: 7,
        };
        let s = sample_schedule(&params).unwrap();
        let xs: Vec<f64> = s
            .unitaries()
            .iter()
            .map(|u| match u {
                Unitary::Local(l) => l.factors[0][(0, 0)].norm_sqr(),
                Unitary::Global(_) => unreachable!(),
            })
            .collect();
        let a = &xs[..10_000];
        let b = &xs[1..];
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(a), mean(b));
        let cov: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / 10_000.0;
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / 10_000.0;
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / 10_000.0;
        let corr = cov / (va * vb).sqrt();
        // Null standard deviation is 1/sqrt(10^4) = 0.01.
        assert!(corr.abs() < 0.04, "corr = {corr}");
    }

    #[test]
    fn global_schedule_shape() {
        let params = ScheduleParams {
            mode: ScheduleMode::Global,
            ensemble: Ensemble::HaarCue,
            n_u: 3,
            num_sites: 2,
            local_dim: 2,
            master_seed: 1,
        };
        let s = sample_schedule(&params).unwrap();
        for u in s.unitaries() {
            match u {
                Unitary::Global(m) => assert_eq!(m.shape(), (4, 4)),
                Unitary::Local(_) => panic!("expected global"),
            }
        }
    }

    #[test]
    fn wire_round_trip_preserves_schedule_ref() {
        let params = ScheduleParams {
            mode: ScheduleMode::Local,
            ensemble: Ensemble::HaarCue,
            n_u: 5,
            num_sites: 2,
            local_dim: 2,
            master_seed: 3,
        };
        let s = sample_schedule(&params).unwrap();
        let json = serde_json::to_string(&s.to_wire()).unwrap();
        let wire: Vec<UnitaryWire> = serde_json::from_str(&json).unwrap();
        let back = UnitarySchedule::from_wire(ScheduleMode::Local, 2, 2, &wire).unwrap();
        assert_eq!(back.schedule_ref(), s.schedule_ref());
    }

    #[test]
    fn exhaustive_two_site_schedule_has_576_entries() {
        assert_eq!(exhaustive_clifford_schedule(2).unwrap().len(), 576);
    }
}
