//! Experiment driver: scaling studies, noise sweeps and quench-fidelity
//! runs over simulated platform pairs, with log-scale fits and CSV output.
//!
//! Every random object in a run is seeded from `plan.seed` through
//! [`derive_seed`] with a label path naming its role and grid coordinates,
//! so each row is a pure function of the plan.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{neel_state, quench_series, XYModel, DEFAULT_ALPHA, DEFAULT_J0};
use crate::error::{Result, XpvError};
use crate::estimate::{estimate_fidelities, CorrelatorTable, EstimatorVariant, HammingKernel};
use crate::measure::{
    born_probabilities, sample_counts, MeasurementDataset, OutcomeRecord, Outcomes, Shots,
};
use crate::noise::{predict_fidelity_shift, simulate_imperfect_protocol, NoiseProfile};
use crate::qcore::{self, prepare_state, QuantumState, StateKind, StateSpec};
use crate::randsrc::{
    self, derive_seed, sample_schedule, Ensemble, ScheduleMode, ScheduleParams, UnitarySchedule,
};
use crate::resample::BootstrapConfig;

// Label roots for derive_seed.
const L_STATE_1: u64 = 1;
const L_STATE_2: u64 = 2;
const L_SCHEDULE: u64 = 3;
const L_SHOTS: u64 = 4;
const L_NOISE: u64 = 5;
const L_BOOT: u64 = 6;

/// Shots per unitary in a plan: a count, or `"exact"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NmSpec {
    Count(u64),
    Exact(ExactTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExactTag {
    Exact,
}

impl NmSpec {
    pub const EXACT: NmSpec = NmSpec::Exact(ExactTag::Exact);

    pub fn shots(self) -> Shots {
        match self {
            NmSpec::Count(m) => Shots::Count(m),
            NmSpec::Exact(_) => Shots::Exact,
        }
    }

    pub fn count(self) -> Option<u64> {
        match self {
            NmSpec::Count(m) => Some(m),
            NmSpec::Exact(_) => None,
        }
    }
}

impl std::str::FromStr for NmSpec {
    type Err = XpvError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("exact") || s.eq_ignore_ascii_case("inf") {
            return Ok(NmSpec::EXACT);
        }
        s.parse::<u64>().map(NmSpec::Count).map_err(|_| {
            XpvError::InvalidValue(format!("N_M must be an integer or 'exact', got {s:?}"))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    ErrorVsNm,
    BudgetExponent,
    TheoryExperiment,
    NoiseSweep,
    QuenchFidelity,
    GlobalVsLocal,
}

/// Chain parameters as written in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    #[serde(default = "default_j0")]
    pub j0: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub disorder_bound: f64,
    #[serde(default)]
    pub disorder_seed: u64,
    /// Disorder realizations averaged in quench studies; 1 uses `disorder_seed` itself.
    #[serde(default = "one")]
    pub disorder_realizations: usize,
}

fn one() -> usize {
    1
}

fn default_j0() -> f64 {
    DEFAULT_J0
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl ModelConfig {
    pub fn build(&self) -> XYModel {
        self.realization(0)
    }

    pub fn is_disordered(&self) -> bool {
        self.disorder_bound > 0.0
    }

    /// Realization `r` of the disordered chain; realization 0 of a single-realization
    /// config uses `disorder_seed` directly.
    pub fn realization(&self, r: usize) -> XYModel {
        let mut m = XYModel::new(self.n, self.j0, self.alpha);
        m.b_field = self.b;
        if self.is_disordered() {
            let seed = if self.disorder_realizations <= 1 {
                self.disorder_seed
            } else {
                derive_seed(self.disorder_seed, &[r as u64])
            };
            m = m.with_disorder(self.disorder_bound, seed);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuenchConfig {
    pub model: ModelConfig,
    /// Reference time of platform 1, seconds.
    pub t1: f64,
    pub n_u: usize,
    pub n_m: NmSpec,
    #[serde(default)]
    pub noise: NoiseConfig,
}

/// Imperfections of both platforms as written in configs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(default)]
    pub eta1: f64,
    #[serde(default)]
    pub eta2: f64,
    #[serde(default)]
    pub pd1: f64,
    #[serde(default)]
    pub pd2: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseConfig {
    pub fn profiles(&self) -> [NoiseProfile; 2] {
        [
            NoiseProfile {
                eta: self.eta1,
                p_depol: self.pd1,
                seed: self.seed,
            },
            NoiseProfile {
                eta: self.eta2,
                p_depol: self.pd2,
                seed: self.seed,
            },
        ]
    }
}

fn default_family() -> StateKind {
    StateKind::PureProduct
}

fn default_trials() -> usize {
    50
}

fn default_epsilon() -> f64 {
    0.05
}

fn default_resamples() -> usize {
    crate::resample::DEFAULT_RESAMPLES
}

fn default_mode() -> ScheduleMode {
    ScheduleMode::Local
}

/// Everything a study needs; unused grids may stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub study: Study,
    /// State family of platform 1.
    #[serde(default = "default_family")]
    pub family: StateKind,
    /// Independent state family for platform 2; `None` means `ρ2 = ρ1`.
    #[serde(default)]
    pub family_2: Option<StateKind>,
    #[serde(default = "default_mode")]
    pub mode: ScheduleMode,
    #[serde(default)]
    pub variant: EstimatorVariant,
    #[serde(default)]
    pub n_a: Vec<usize>,
    #[serde(default)]
    pub n_u: Vec<usize>,
    #[serde(default)]
    pub n_m: Vec<NmSpec>,
    #[serde(default)]
    pub eta2_sq: Vec<f64>,
    #[serde(default)]
    pub p_depol: Vec<f64>,
    /// Time offsets `t − t1` (quench) in seconds.
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default)]
    pub quench: Option<QuenchConfig>,
}

impl ExperimentPlan {
    pub fn new(study: Study) -> Self {
        Self {
            study,
            family: default_family(),
            family_2: None,
            mode: ScheduleMode::Local,
            variant: EstimatorVariant::UStatistic,
            n_a: Vec::new(),
            n_u: Vec::new(),
            n_m: Vec::new(),
            eta2_sq: Vec::new(),
            p_depol: Vec::new(),
            times: Vec::new(),
            trials: default_trials(),
            epsilon: default_epsilon(),
            seed: 0,
            bootstrap_resamples: default_resamples(),
            quench: None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn require(&self, what: &str, empty: bool) -> Result<()> {
        if empty {
            return Err(XpvError::InvalidValue(format!(
                "{:?} plan needs a nonempty {what} grid",
                self.study
            )));
        }
        Ok(())
    }

    fn require_trials(&self) -> Result<()> {
        if self.trials < 10 {
            return Err(XpvError::InvalidValue(format!(
                "statistical studies need trials >= 10, got {}",
                self.trials
            )));
        }
        Ok(())
    }

    fn bootstrap(&self, labels: &[u64]) -> BootstrapConfig {
        BootstrapConfig {
            n_resamples: self.bootstrap_resamples,
            seed: derive_seed(self.seed, labels),
        }
    }

    fn kernel(&self, n_a: usize) -> HammingKernel {
        HammingKernel {
            mode: self.mode,
            local_dim: 2,
            num_sites: n_a,
        }
    }

    /// States of trial `t` at size `n_a`.
    fn states(&self, n_a: usize, t: usize) -> Result<(QuantumState, QuantumState)> {
        let s1 = prepare_state(&spec_for(
            self.family,
            n_a,
            derive_seed(self.seed, &[L_STATE_1, n_a as u64, t as u64]),
        ))?;
        let s2 = match self.family_2 {
            None => s1.clone(),
            Some(k) => prepare_state(&spec_for(
                k,
                n_a,
                derive_seed(self.seed, &[L_STATE_2, n_a as u64, t as u64]),
            ))?,
        };
        Ok((s1, s2))
    }

    fn schedule(&self, n_a: usize, t: usize, n_u: usize) -> Result<UnitarySchedule> {
        sample_schedule(&ScheduleParams {
            mode: self.mode,
            ensemble: Ensemble::HaarCue,
            n_u,
            num_sites: n_a,
            local_dim: 2,
            master_seed: derive_seed(self.seed, &[L_SCHEDULE, n_a as u64, t as u64]),
        })
    }

    fn shot_seeds(&self, n_a: usize, t: usize) -> [u64; 2] {
        [
            derive_seed(self.seed, &[L_SHOTS, n_a as u64, t as u64, 1]),
            derive_seed(self.seed, &[L_SHOTS, n_a as u64, t as u64, 2]),
        ]
    }
}

fn spec_for(kind: StateKind, n: usize, seed: u64) -> StateSpec {
    StateSpec::new(kind, n, seed)
}

/// Born distributions of a state pair under one schedule, reusable across
/// shot budgets. Shots of unitary `u` come from `stream(seed_p, u, 0)`, so a
/// larger `N_M` extends a smaller one.
pub struct SimulatedPair {
    schedule: UnitarySchedule,
    dists: Vec<[Vec<f64>; 2]>,
    shot_seeds: [u64; 2],
    pub oracle_f_max: f64,
    pub oracle_f_gm: f64,
}

impl SimulatedPair {
    pub fn new(
        s1: &QuantumState,
        s2: &QuantumState,
        schedule: UnitarySchedule,
        shot_seeds: [u64; 2],
    ) -> Result<Self> {
        let dists = schedule
            .unitaries()
            .par_iter()
            .map(|u| {
                Ok([
                    born_probabilities(s1, u)?.probs,
                    born_probabilities(s2, u)?.probs,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let (r1, r2) = (s1.to_density(), s2.to_density());
        Ok(Self {
            schedule,
            dists,
            shot_seeds,
            oracle_f_max: qcore::fidelity_max(&r1, &r2)?,
            oracle_f_gm: qcore::fidelity_gm(&r1, &r2)?,
        })
    }

    pub fn n_u(&self) -> usize {
        self.dists.len()
    }

    /// Datasets over the first `n_u` unitaries.
    pub fn datasets(
        &self,
        n_u: usize,
        nm: [NmSpec; 2],
    ) -> Result<(MeasurementDataset, MeasurementDataset)> {
        if n_u > self.n_u() {
            return Err(XpvError::InvalidValue(format!(
                "requested {n_u} unitaries of {}",
                self.n_u()
            )));
        }
        let schedule_ref = self.schedule.prefix(n_u).schedule_ref();
        let (n, d) = (self.schedule.num_sites(), self.schedule.local_dim());
        let mut out = Vec::with_capacity(2);
        for p in 0..2 {
            let records = self.dists[..n_u]
                .iter()
                .enumerate()
                .map(|(u, dd)| match nm[p] {
                    NmSpec::Exact(_) => Ok(OutcomeRecord {
                        u,
                        outcomes: Outcomes::Probs(dd[p].clone()),
                    }),
                    NmSpec::Count(m) => sample_counts(
                        &crate::measure::OutcomeDistribution {
                            probs: dd[p].clone(),
                        },
                        m,
                        u,
                        &mut randsrc::stream(self.shot_seeds[p], u as u64, 0),
                    ),
                })
                .collect::<Result<Vec<_>>>()?;
            let exact = matches!(nm[p], NmSpec::Exact(_));
            out.push(MeasurementDataset::new(
                format!("sim-{}", p + 1),
                schedule_ref.clone(),
                n,
                d,
                exact,
                records,
            )?);
        }
        let b = out.pop().expect("two datasets");
        let a = out.pop().expect("two datasets");
        Ok((a, b))
    }

    /// Raw `(F_max, F_GM)` estimate; NaN when a purity estimate is not positive.
    pub fn estimate(
        &self,
        n_u: usize,
        nm: [NmSpec; 2],
        kernel: &HammingKernel,
        variant: EstimatorVariant,
    ) -> Result<(f64, f64)> {
        let (a, b) = self.datasets(n_u, nm)?;
        let table = CorrelatorTable::build(&a, &b, kernel, variant)?;
        let (o, p1, p2) = table.means();
        Ok(crate::estimate::fidelities_from(o, p1, p2).unwrap_or((f64::NAN, f64::NAN)))
    }
}

/// Straight-line fit `y = exponent·x + c`.
///
/// `prefactor` is `exp(c)` for log-log fits and `2^c` for the `log₂ N_M`
/// versus `N_A` budget fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub stderr_exponent: f64,
    pub r_squared: f64,
    pub points: usize,
}

fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(XpvError::DegenerateInput(format!(
            "line fit needs >= 3 paired points, got {n}"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(XpvError::DegenerateInput(
            "line fit input contains non-finite values".into(),
        ));
    }
    let nf = n as f64;
    let (mx, my) = (x.iter().sum::<f64>() / nf, y.iter().sum::<f64>() / nf);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(XpvError::DegenerateInput(
            "line fit needs distinct x values".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ssr / syy };
    let stderr = (ssr / (nf - 2.0) / sxx).sqrt();
    Ok((slope, intercept, stderr, r2))
}

impl ScalingFit {
    /// `ln y = exponent · ln x + ln prefactor`.
    pub fn log_log(x: &[f64], y: &[f64]) -> Result<Self> {
        let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
        let (s, c, e, r2) = linear_fit(&lx, &ly)?;
        Ok(Self {
            exponent: s,
            prefactor: c.exp(),
            stderr_exponent: e,
            r_squared: r2,
            points: x.len(),
        })
    }

    /// `log₂ y = exponent · x + log₂ prefactor`.
    pub fn semi_log2(x: &[f64], y: &[f64]) -> Result<Self> {
        let ly: Vec<f64> = y.iter().map(|v| v.log2()).collect();
        let (s, c, e, r2) = linear_fit(x, &ly)?;
        Ok(Self {
            exponent: s,
            prefactor: c.exp2(),
            stderr_exponent: e,
            r_squared: r2,
            points: x.len(),
        })
    }

    /// Fails unless `r² ≥ min_r2` and at least 4 points were fitted.
    pub fn require_quality(&self, min_r2: f64) -> Result<&Self> {
        if self.points < 4 {
            return Err(XpvError::DegenerateInput(format!(
                "fit over {} points; at least 4 required",
                self.points
            )));
        }
        if !(self.r_squared >= min_r2) {
            return Err(XpvError::DegenerateInput(format!(
                "fit quality r² = {:.4} below {min_r2}; refusing to report exponent {:.4}",
                self.r_squared, self.exponent
            )));
        }
        Ok(self)
    }
}

fn mean_and_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// One cell of an error-versus-budget sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub n_a: usize,
    pub n_u: usize,
    /// Empty for exact probabilities.
    pub n_m: Option<u64>,
    pub trials: usize,
    pub mean_abs_error: f64,
    pub sem_error: f64,
    pub oracle_f_max: f64,
    /// Trials discarded because a purity estimate was not positive.
    pub unreliable: usize,
}

fn sweep(
    plan: &ExperimentPlan,
    nm_of: impl Fn(NmSpec) -> [NmSpec; 2] + Sync,
) -> Result<Vec<ErrorRow>> {
    plan.require("n_a", plan.n_a.is_empty())?;
    plan.require("n_u", plan.n_u.is_empty())?;
    plan.require("n_m", plan.n_m.is_empty())?;
    plan.require_trials()?;
    let max_nu = *plan.n_u.iter().max().expect("nonempty");
    let mut rows = Vec::new();
    for &n_a in &plan.n_a {
        let kernel = plan.kernel(n_a);
        // errs[t][cell], cells ordered (n_u, n_m).
        let per_trial = (0..plan.trials)
            .into_par_iter()
            .map(|t| {
                let (s1, s2) = plan.states(n_a, t)?;
                let pair = SimulatedPair::new(
                    &s1,
                    &s2,
                    plan.schedule(n_a, t, max_nu)?,
                    plan.shot_seeds(n_a, t),
                )?;
                let mut cells = Vec::new();
                for &n_u in &plan.n_u {
                    for &nm in &plan.n_m {
                        let (f, _) = pair.estimate(n_u, nm_of(nm), &kernel, plan.variant)?;
                        cells.push(((f - pair.oracle_f_max).abs(), pair.oracle_f_max));
                    }
                }
                Ok(cells)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut c = 0;
        for &n_u in &plan.n_u {
            for &nm in &plan.n_m {
                let errs: Vec<f64> = per_trial
                    .iter()
                    .map(|cells| cells[c].0)
                    .filter(|e| e.is_finite())
                    .collect();
                let oracle =
                    per_trial.iter().map(|cells| cells[c].1).sum::<f64>() / plan.trials as f64;
                let (m, sem) = if errs.is_empty() {
                    (f64::NAN, f64::NAN)
                } else {
                    mean_and_sem(&errs)
                };
                rows.push(ErrorRow {
                    n_a,
                    n_u,
                    n_m: nm.count(),
                    trials: plan.trials,
                    mean_abs_error: m,
                    sem_error: sem,
                    oracle_f_max: oracle,
                    unreliable: plan.trials - errs.len(),
                });
                c += 1;
            }
        }
    }
    Ok(rows)
}

/// Mean `|F̂_max − F_max|` over trials, both platforms sampled.
pub fn run_error_vs_nm(plan: &ExperimentPlan) -> Result<Vec<ErrorRow>> {
    sweep(plan, |nm| [nm, nm])
}

/// As [`run_error_vs_nm`] with platform 1 replaced by exact theory
/// probabilities.
pub fn run_theory_experiment_mode(plan: &ExperimentPlan) -> Result<Vec<ErrorRow>> {
    sweep(plan, |nm| [NmSpec::EXACT, nm])
}

/// Log-log slope of mean error against `N_M` for one `(N_A, N_U)` slice.
pub fn fit_error_slope(rows: &[ErrorRow], n_a: usize, n_u: usize) -> Result<ScalingFit> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.n_a == n_a && r.n_u == n_u)
        .filter_map(|r| r.n_m.map(|m| (m as f64, r.mean_abs_error)))
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    ScalingFit::log_log(&x, &y)
}

/// Minimal `N_M` reaching the target error at one size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub n_a: usize,
    pub n_m_min: u64,
    pub mean_abs_error: f64,
    /// The search hit its cap without reaching the target.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetExponent {
    pub family: StateKind,
    pub points: Vec<BudgetPoint>,
    pub fit: ScalingFit,
}

/// Trials per bisection probe.
pub const BISECTION_TRIALS: usize = 20;
/// The bisection stops once the bracket is this narrow.
pub const BISECTION_BAND: u64 = 2;
const BISECTION_CAP: u64 = 1 << 16;

/// For each `N_A`, the smallest `N_M` whose 20-trial mean error is at most
/// `ε`, then a fit of `log₂ N_M` against `N_A`.
///
/// Trials reuse their states, unitaries and shot streams at every probed
/// `N_M` (common random numbers), which keeps the mean error monotone
/// enough to bisect.
pub fn run_budget_exponent(plan: &ExperimentPlan) -> Result<BudgetExponent> {
    plan.require("n_a", plan.n_a.len() < 4)?;
    plan.require("n_u", plan.n_u.is_empty())?;
    let n_u = plan.n_u[0];
    let trials = plan.trials.min(BISECTION_TRIALS).max(1);
    let mut points = Vec::new();
    for &n_a in &plan.n_a {
        let kernel = plan.kernel(n_a);
        let pairs = (0..trials)
            .into_par_iter()
            .map(|t| {
                let (s1, s2) = plan.states(n_a, t)?;
                SimulatedPair::new(
                    &s1,
                    &s2,
                    plan.schedule(n_a, t, n_u)?,
                    plan.shot_seeds(n_a, t),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_err = |m: u64| -> Result<f64> {
            let errs = pairs
                .par_iter()
                .map(|p| {
                    let (f, _) = p.estimate(n_u, [NmSpec::Count(m); 2], &kernel, plan.variant)?;
                    // An unreliable estimate counts as a unit error.
                    Ok(if f.is_finite() {
                        (f - p.oracle_f_max).abs()
                    } else {
                        1.0
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(errs.iter().sum::<f64>() / errs.len() as f64)
        };
        let mut lo = 2u64;
        let mut hi = 4u64;
        let mut hi_err = mean_err(hi)?;
        let mut flagged = false;
        while hi_err > plan.epsilon {
            lo = hi;
            if hi >= BISECTION_CAP {
                flagged = true;
                break;
            }
            hi *= 2;
            hi_err = mean_err(hi)?;
        }
        if !flagged {
            while hi - lo > BISECTION_BAND {
                let mid = lo + (hi - lo) / 2;
                let e = mean_err(mid)?;
                if e <= plan.epsilon {
                    hi = mid;
                    hi_err = e;
                } else {
                    lo = mid;
                }
            }
        }
        log::debug!("n_a={n_a}: N_M={hi} (error {hi_err:.4}, flagged={flagged})");
        points.push(BudgetPoint {
            n_a,
            n_m_min: hi,
            mean_abs_error: hi_err,
            flagged,
        });
    }
    let x: Vec<f64> = points.iter().map(|p| p.n_a as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.n_m_min as f64).collect();
    let fit = ScalingFit::semi_log2(&x, &y)?;
    Ok(BudgetExponent {
        family: plan.family,
        points,
        fit,
    })
}

/// Estimated versus predicted fidelities under platform-2 imperfections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub n_a: usize,
    pub eta2_sq: f64,
    pub p_depol: f64,
    pub trials: usize,
    pub mean_f_max: f64,
    pub sem_f_max: f64,
    pub mean_f_gm: f64,
    pub sem_f_gm: f64,
    pub predicted_f_max: f64,
    pub predicted_f_gm: f64,
    /// Trials with `F̂_max > 1 + 3·SE_boot`.
    pub false_positives: usize,
}

/// Unit-fidelity pairs measured with platform 2 miscalibrated (`η2²`) or
/// depolarized (`p_D`), over the grid `eta2_sq × p_depol`.
pub fn run_noise_sweep(plan: &ExperimentPlan) -> Result<Vec<NoiseRow>> {
    plan.require("n_a", plan.n_a.is_empty())?;
    plan.require("n_u", plan.n_u.is_empty())?;
    plan.require_trials()?;
    if plan.family_2.is_some() {
        return Err(XpvError::Unsupported(
            "noise sweeps compare a state with itself".into(),
        ));
    }
    let n_u = plan.n_u[0];
    let nm = plan.n_m.first().copied().unwrap_or(NmSpec::EXACT);
    let etas = if plan.eta2_sq.is_empty() {
        vec![0.0]
    } else {
        plan.eta2_sq.clone()
    };
    let pds = if plan.p_depol.is_empty() {
        vec![0.0]
    } else {
        plan.p_depol.clone()
    };
    let mut rows = Vec::new();
    for &n_a in &plan.n_a {
        let kernel = plan.kernel(n_a);
        for (ie, &eta2_sq) in etas.iter().enumerate() {
            for (ip, &p_depol) in pds.iter().enumerate() {
                let clean = NoiseProfile::clean();
                let results = (0..plan.trials)
                    .into_par_iter()
                    .map(|t| {
                        let (s1, _) = plan.states(n_a, t)?;
                        let schedule = plan.schedule(n_a, t, n_u)?;
                        let noisy = NoiseProfile {
                            eta: eta2_sq.sqrt(),
                            p_depol,
                            seed: derive_seed(plan.seed, &[L_NOISE, n_a as u64, t as u64]),
                        };
                        let (a, b) = simulate_imperfect_protocol(
                            [&s1, &s1],
                            &schedule,
                            [&clean, &noisy],
                            nm.shots(),
                            plan.shot_seeds(n_a, t),
                        )?;
                        let boot =
                            plan.bootstrap(&[L_BOOT, n_a as u64, t as u64, ie as u64, ip as u64]);
                        let r = estimate_fidelities(&a, &b, &kernel, plan.variant, Some(&boot))?;
                        let rho = s1.to_density();
                        let shift = predict_fidelity_shift(&rho, &rho, &clean, &noisy)?;
                        Ok((
                            r.f_max_raw,
                            r.f_gm_raw,
                            r.se_f_max.unwrap_or(f64::NAN),
                            shift,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fm: Vec<f64> = results
                    .iter()
                    .map(|r| r.0)
                    .filter(|v| v.is_finite())
                    .collect();
                let fg: Vec<f64> = results
                    .iter()
                    .map(|r| r.1)
                    .filter(|v| v.is_finite())
                    .collect();
                let (mean_f_max, sem_f_max) = mean_and_sem(&fm);
                let (mean_f_gm, sem_f_gm) = mean_and_sem(&fg);
                let n = results.len() as f64;
                let predicted_f_max =
                    1.0 + results.iter().map(|r| r.3.delta_f_max).sum::<f64>() / n;
                let predicted_f_gm = 1.0 + results.iter().map(|r| r.3.delta_f_gm).sum::<f64>() / n;
                let false_positives = results.iter().filter(|r| r.0 > 1.0 + 3.0 * r.2).count();
                rows.push(NoiseRow {
                    n_a,
                    eta2_sq,
                    p_depol,
                    trials: plan.trials,
                    mean_f_max,
                    sem_f_max,
                    mean_f_gm,
                    sem_f_gm,
                    predicted_f_max,
                    predicted_f_gm,
                    false_positives,
                });
            }
        }
    }
    Ok(rows)
}

/// Subsystem fidelity between platform 1 at `t1` and platform 2 at `t1 + dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuenchRow {
    pub dt: f64,
    pub n_a: usize,
    pub f_max: f64,
    pub se_f_max: Option<f64>,
    pub f_max_raw: f64,
    pub oracle_f_max: f64,
    pub disordered: bool,
    pub realizations: usize,
}

/// Two simulated platforms evolve the Néel state; each measures the full
/// chain under a shared local schedule, and subsystem `[0, N_A)` fidelities
/// come from marginal counts.
///
/// With several disorder realizations each row holds realization means, and
/// `se_f_max` is the standard error of that mean across realizations.
pub fn run_quench_fidelity(plan: &ExperimentPlan) -> Result<Vec<QuenchRow>> {
    let q = plan
        .quench
        .as_ref()
        .ok_or_else(|| XpvError::InvalidValue("quench study needs a quench config".into()))?;
    plan.require("n_a", plan.n_a.is_empty())?;
    plan.require("times", plan.times.is_empty())?;
    let n = q.model.n;
    if plan.n_a.iter().any(|&k| k == 0 || k > n) {
        return Err(XpvError::InvalidSubsystem(format!(
            "partition sizes must lie in 1..={n}"
        )));
    }
    let reps = if q.model.is_disordered() {
        q.model.disorder_realizations.max(1)
    } else {
        1
    };
    let per_rep = (0..reps)
        .into_par_iter()
        .map(|r| quench_realization(plan, q, r))
        .collect::<Result<Vec<_>>>()?;
    if reps == 1 {
        return Ok(per_rep.into_iter().next().expect("one realization"));
    }
    let k = reps as f64;
    Ok((0..per_rep[0].len())
        .map(|i| {
            let col = |f: fn(&QuenchRow) -> f64| {
                per_rep.iter().map(|rows| f(&rows[i])).collect::<Vec<_>>()
            };
            let vals = col(|r| r.f_max);
            let mean = vals.iter().sum::<f64>() / k;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            QuenchRow {
                f_max: mean,
                se_f_max: Some((var / k).sqrt()),
                f_max_raw: col(|r| r.f_max_raw).iter().sum::<f64>() / k,
                oracle_f_max: col(|r| r.oracle_f_max).iter().sum::<f64>() / k,
                realizations: reps,
                ..per_rep[0][i]
            }
        })
        .collect())
}

fn quench_realization(
    plan: &ExperimentPlan,
    q: &QuenchConfig,
    rep: usize,
) -> Result<Vec<QuenchRow>> {
    let n = q.model.n;
    let model = q.model.realization(rep);
    let r = rep as u64;
    let mut all_times = vec![q.t1];
    all_times.extend(plan.times.iter().map(|dt| q.t1 + dt));
    let series = quench_series(&model, &neel_state(n)?, &all_times)?;
    let reference: QuantumState = series.states[0].clone().into();
    let schedule = sample_schedule(&ScheduleParams {
        mode: ScheduleMode::Local,
        ensemble: Ensemble::HaarCue,
        n_u: q.n_u,
        num_sites: n,
        local_dim: 2,
        master_seed: derive_seed(plan.seed, &[L_SCHEDULE, n as u64, r]),
    })?;
    let mut rows = Vec::new();
    for (i, &dt) in plan.times.iter().enumerate() {
        let later: QuantumState = series.states[i + 1].clone().into();
        let seeds = [
            derive_seed(plan.seed, &[L_SHOTS, i as u64, 1, r]),
            derive_seed(plan.seed, &[L_SHOTS, i as u64, 2, r]),
        ];
        let [p1, p2] = q.noise.profiles();
        let (a, b) = simulate_imperfect_protocol(
            [&reference, &later],
            &schedule,
            [&p1, &p2],
            q.n_m.shots(),
            seeds,
        )?;
        for &n_a in &plan.n_a {
            let keep: Vec<usize> = (0..n_a).collect();
            let (ma, mb) = (a.marginal(&keep)?, b.marginal(&keep)?);
            let boot = plan.bootstrap(&[L_BOOT, i as u64, n_a as u64, r]);
            let est = estimate_fidelities(
                &ma,
                &mb,
                &HammingKernel::local(n_a, 2),
                plan.variant,
                Some(&boot),
            )?;
            let oracle = qcore::fidelity_max(&reference.reduced(&keep)?, &later.reduced(&keep)?)?;
            rows.push(QuenchRow {
                dt,
                n_a,
                f_max: est.f_max,
                se_f_max: est.se_f_max,
                f_max_raw: est.f_max_raw,
                oracle_f_max: oracle,
                disordered: model.disorder.is_some(),
                realizations: 1,
            });
        }
    }
    Ok(rows)
}

/// Global versus local schedules at exact probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalLocalRow {
    pub n_a: usize,
    pub n_u: usize,
    pub mode: ScheduleMode,
    pub trials: usize,
    pub oracle_f_gm: f64,
    pub mean_abs_error_f_gm: f64,
    pub mean_abs_error_f_max: f64,
    /// `(1 − F_GM²)/√(N_U D_A)`.
    pub predicted_error_f_gm: f64,
}

pub fn run_global_vs_local(plan: &ExperimentPlan) -> Result<Vec<GlobalLocalRow>> {
    plan.require("n_a", plan.n_a.is_empty())?;
    plan.require("n_u", plan.n_u.is_empty())?;
    plan.require_trials()?;
    let mut rows = Vec::new();
    for mode in [ScheduleMode::Global, ScheduleMode::Local] {
        let mut p = plan.clone();
        p.mode = mode;
        let max_nu = *p.n_u.iter().max().expect("nonempty");
        for &n_a in &p.n_a {
            let kernel = p.kernel(n_a);
            let per_trial = (0..p.trials)
                .into_par_iter()
                .map(|t| {
                    let (s1, s2) = p.states(n_a, t)?;
                    let pair = SimulatedPair::new(
                        &s1,
                        &s2,
                        p.schedule(n_a, t, max_nu)?,
                        p.shot_seeds(n_a, t),
                    )?;
                    p.n_u
                        .iter()
                        .map(|&n_u| {
                            let (fm, fg) =
                                pair.estimate(n_u, [NmSpec::EXACT; 2], &kernel, p.variant)?;
                            Ok((
                                (fg - pair.oracle_f_gm).abs(),
                                (fm - pair.oracle_f_max).abs(),
                                pair.oracle_f_gm,
                            ))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            for (c, &n_u) in p.n_u.iter().enumerate() {
                let nt = p.trials as f64;
                let eg = per_trial.iter().map(|v| v[c].0).sum::<f64>() / nt;
                let em = per_trial.iter().map(|v| v[c].1).sum::<f64>() / nt;
                let pred = per_trial
                    .iter()
                    .map(|v| (1.0 - v[c].2 * v[c].2) / ((n_u << n_a) as f64).sqrt())
                    .sum::<f64>()
                    / nt;
                let oracle = per_trial.iter().map(|v| v[c].2).sum::<f64>() / nt;
                rows.push(GlobalLocalRow {
                    n_a,
                    n_u,
                    mode,
                    trials: p.trials,
                    oracle_f_gm: oracle,
                    mean_abs_error_f_gm: eg,
                    mean_abs_error_f_max: em,
                    predicted_error_f_gm: pred,
                });
            }
        }
    }
    Ok(rows)
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Seeds, versions and parameters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub plan: ExperimentPlan,
    pub outputs: Vec<String>,
    pub fits: Vec<(String, ScalingFit)>,
}

/// Runs a plan and writes `<study>.csv` plus `manifest.json` into `out_dir`.
pub fn run_plan(plan: &ExperimentPlan, out_dir: &Path) -> Result<RunManifest> {
    fs::create_dir_all(out_dir)?;
    let name = serde_json::to_value(plan.study)?
        .as_str()
        .unwrap_or("study")
        .to_string();
    let csv_path: PathBuf = out_dir.join(format!("{name}.csv"));
    let mut fits = Vec::new();
    match plan.study {
        Study::ErrorVsNm | Study::TheoryExperiment => {
            let rows = if plan.study == Study::ErrorVsNm {
                run_error_vs_nm(plan)?
            } else {
                run_theory_experiment_mode(plan)?
            };
            write_csv(&csv_path, &rows)?;
            for &n_a in &plan.n_a {
                for &n_u in &plan.n_u {
                    if let Ok(fit) = fit_error_slope(&rows, n_a, n_u) {
                        fits.push((format!("n_a={n_a},n_u={n_u}"), fit));
                    }
                }
            }
        }
        Study::BudgetExponent => {
            let res = run_budget_exponent(plan)?;
            write_csv(&csv_path, &res.points)?;
            fits.push((format!("{:?}", res.family), res.fit));
        }
        Study::NoiseSweep => write_csv(&csv_path, &run_noise_sweep(plan)?)?,
        Study::QuenchFidelity => write_csv(&csv_path, &run_quench_fidelity(plan)?)?,
        Study::GlobalVsLocal => write_csv(&csv_path, &run_global_vs_local(plan)?)?,
    }
    let manifest = RunManifest {
        tool: "xpv".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        plan: plan.clone(),
        outputs: vec![csv_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()],
        fits,
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
