//! Bootstrap over unitaries: standard errors, first-order bias correction,
//! and the iterative split of a measurement budget between `N_U` and `N_M`.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XpvError};
use crate::estimate::{
    self, fidelities_from, CorrelatorTable, EstimateReport, EstimatorVariant, HammingKernel,
};
use crate::measure::{
    born_probabilities, sample_counts, MeasurementDataset, OutcomeDistribution, OutcomeRecord,
};
use crate::qcore::QuantumState;
use crate::randsrc::{self, sample_schedule, ScheduleParams};

pub const DEFAULT_RESAMPLES: usize = 400;
pub const MIN_RESAMPLES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            n_resamples: DEFAULT_RESAMPLES,
            seed,
        }
    }
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self::new(0)
    }
}

/// Spread and shift of the resampled statistics.
///
/// Fidelity fields are NaN when the point estimate or every replicate has a
/// non-positive purity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapSummary {
    pub se_overlap: f64,
    pub se_purity_1: f64,
    pub se_purity_2: f64,
    pub se_f_max: f64,
    pub se_f_gm: f64,
    pub mean_f_max: f64,
    pub mean_f_gm: f64,
    pub bias_f_max: f64,
    pub bias_f_gm: f64,
    /// Replicates with both purities positive.
    pub n_valid: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Bootstrap over the unitaries of a correlator table.
///
/// Replicate `r` draws its `N_U` indices from `stream(seed, r, 0)`, so the
/// result is independent of thread scheduling.
pub fn bootstrap_table(table: &CorrelatorTable, cfg: &BootstrapConfig) -> Result<BootstrapSummary> {
    if cfg.n_resamples < MIN_RESAMPLES {
        return Err(XpvError::InvalidValue(format!(
            "n_resamples must be >= {MIN_RESAMPLES}, got {}",
            cfg.n_resamples
        )));
    }
    let n_u = table.n_u();
    if n_u < 2 {
        return Err(XpvError::DegenerateInput(format!(
            "bootstrap needs N_U >= 2, got {n_u}"
        )));
    }
    let reps: Vec<(f64, f64, f64)> = (0..cfg.n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = randsrc::stream(cfg.seed, r as u64, 0);
            let idx: Vec<usize> = (0..n_u).map(|_| rng.random_range(0..n_u)).collect();
            table.means_over(&idx)
        })
        .collect();

    let col = |f: fn(&(f64, f64, f64)) -> f64| reps.iter().map(f).collect::<Vec<_>>();
    let (_, se_overlap) = mean_std(&col(|r| r.0));
    let (_, se_purity_1) = mean_std(&col(|r| r.1));
    let (_, se_purity_2) = mean_std(&col(|r| r.2));

    let fids: Vec<(f64, f64)> = reps
        .iter()
        .filter_map(|&(o, a, b)| fidelities_from(o, a, b))
        .collect();
    let (mean_f_max, se_f_max) = mean_std(&fids.iter().map(|f| f.0).collect::<Vec<_>>());
    let (mean_f_gm, se_f_gm) = mean_std(&fids.iter().map(|f| f.1).collect::<Vec<_>>());

    let (o, p1, p2) = table.means();
    let (bias_f_max, bias_f_gm) = match fidelities_from(o, p1, p2) {
        Some((fm, fg)) => (mean_f_max - fm, mean_f_gm - fg),
        None => (f64::NAN, f64::NAN),
    };
    Ok(BootstrapSummary {
        se_overlap,
        se_purity_1,
        se_purity_2,
        se_f_max,
        se_f_gm,
        mean_f_max,
        mean_f_gm,
        bias_f_max,
        bias_f_gm,
        n_valid: fids.len(),
    })
}

/// Bootstrap standard errors of overlap, purities and fidelities.
pub fn bootstrap_se(
    ds_1: &MeasurementDataset,
    ds_2: &MeasurementDataset,
    kernel: &HammingKernel,
    variant: EstimatorVariant,
    cfg: &BootstrapConfig,
) -> Result<BootstrapSummary> {
    bootstrap_table(&CorrelatorTable::build(ds_1, ds_2, kernel, variant)?, cfg)
}

/// First-order bias estimates and the corrected fidelities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasCorrection {
    pub bias_f_max: f64,
    pub bias_f_gm: f64,
    pub f_max: f64,
    pub f_gm: f64,
}

/// `bias = mean(replicates) − point`, `corrected = point − bias`.
pub fn bias_correct(
    ds_1: &MeasurementDataset,
    ds_2: &MeasurementDataset,
    kernel: &HammingKernel,
    variant: EstimatorVariant,
    cfg: &BootstrapConfig,
) -> Result<BiasCorrection> {
    let table = CorrelatorTable::build(ds_1, ds_2, kernel, variant)?;
    let s = bootstrap_table(&table, cfg)?;
    let (o, p1, p2) = table.means();
    let (fm, fg) = fidelities_from(o, p1, p2).unwrap_or((f64::NAN, f64::NAN));
    Ok(BiasCorrection {
        bias_f_max: s.bias_f_max,
        bias_f_gm: s.bias_f_gm,
        f_max: fm - s.bias_f_max,
        f_gm: fg - s.bias_f_gm,
    })
}

/// Something that can deliver a dataset pair at any allocation.
///
/// A larger request must extend a smaller one: the first `n_u` unitaries and,
/// within each, the first `n_m` shots are the same data.
pub trait DataSource {
    fn acquire(&mut self, n_u: usize, n_m: u64)
        -> Result<(MeasurementDataset, MeasurementDataset)>;
}

/// Two simulated platforms sharing one seeded schedule.
pub struct SimulatedSource {
    states: [QuantumState; 2],
    params: ScheduleParams,
    shot_seeds: [u64; 2],
    dists: Vec<[OutcomeDistribution; 2]>,
    schedule_len: usize,
}

impl SimulatedSource {
    pub fn new(
        state_1: QuantumState,
        state_2: QuantumState,
        params: ScheduleParams,
        shot_seeds: [u64; 2],
    ) -> Self {
        Self {
            states: [state_1, state_2],
            params,
            shot_seeds,
            dists: Vec::new(),
            schedule_len: 0,
        }
    }

    fn ensure(&mut self, n_u: usize) -> Result<String> {
        let mut params = self.params.clone();
        params.n_u = n_u.max(self.schedule_len);
        let schedule = sample_schedule(&params)?;
        let fresh: Vec<[OutcomeDistribution; 2]> = schedule.unitaries()[self.dists.len()..]
            .par_iter()
            .map(|u| {
                Ok([
                    born_probabilities(&self.states[0], u)?,
                    born_probabilities(&self.states[1], u)?,
                ])
            })
            .collect::<Result<_>>()?;
        self.dists.extend(fresh);
        self.schedule_len = params.n_u;
        Ok(schedule.prefix(n_u).schedule_ref())
    }
}

impl DataSource for SimulatedSource {
    fn acquire(
        &mut self,
        n_u: usize,
        n_m: u64,
    ) -> Result<(MeasurementDataset, MeasurementDataset)> {
        let schedule_ref = self.ensure(n_u)?;
        let (n, d) = (self.params.num_sites, self.params.local_dim);
        let mut out = Vec::with_capacity(2);
        for p in 0..2 {
            let seed = self.shot_seeds[p];
            let records = self.dists[..n_u]
                .par_iter()
                .enumerate()
                .map(|(u, dd)| {
                    sample_counts(&dd[p], n_m, u, &mut randsrc::stream(seed, u as u64, 0))
                })
                .collect::<Result<Vec<OutcomeRecord>>>()?;
            out.push(MeasurementDataset::new(
                format!("sim-{}", p + 1),
                schedule_ref.clone(),
                n,
                d,
                false,
                records,
            )?);
        }
        let second = out.pop().expect("two datasets");
        let first = out.pop().expect("two datasets");
        Ok((first, second))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Converged,
    GrowNu,
    GrowNm,
    /// Both removals raised the SE equally; `N_M` grows.
    GrowNmTie,
    BudgetCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetStep {
    pub step: usize,
    pub n_u: usize,
    pub n_m: u64,
    pub se: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetState {
    pub n_u: usize,
    pub n_m: u64,
    /// Unitaries or shots added (and removed in the comparison) per step.
    pub step: usize,
    pub target_se: f64,
    pub history: Vec<BudgetStep>,
}

impl BudgetState {
    pub fn new(n_u: usize, n_m: u64, target_se: f64) -> Self {
        Self {
            n_u,
            n_m,
            step: 10,
            target_se,
            history: Vec::new(),
        }
    }

    pub fn total_shots(&self) -> u64 {
        self.n_u as u64 * self.n_m
    }

    pub fn write_history_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for h in &self.history {
            wtr.serialize(h)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetConfig {
    pub kernel: HammingKernel,
    pub variant: EstimatorVariant,
    pub bootstrap: BootstrapConfig,
    /// Stop once `N_U · N_M` reaches this.
    pub max_total_shots: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetStatus {
    Converged,
    NotConverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetOutcome {
    pub state: BudgetState,
    pub status: BudgetStatus,
    pub report: EstimateReport,
}

fn se_of(
    ds_1: &MeasurementDataset,
    ds_2: &MeasurementDataset,
    cfg: &BudgetConfig,
) -> Result<(f64, EstimateReport)> {
    let report =
        estimate::estimate_fidelities(ds_1, ds_2, &cfg.kernel, cfg.variant, Some(&cfg.bootstrap))?;
    Ok((report.se_f_max.unwrap_or(f64::INFINITY), report))
}

fn thin(ds: &MeasurementDataset, remove: u64, seed: u64) -> Result<MeasurementDataset> {
    let records = ds
        .records
        .iter()
        .map(|r| r.thinned(remove, &mut randsrc::stream(seed, r.u as u64, 0)))
        .collect::<Result<Vec<_>>>()?;
    MeasurementDataset::new(
        ds.platform_id.clone(),
        ds.schedule_ref.clone(),
        ds.num_sites,
        ds.local_dim,
        ds.exact,
        records,
    )
}

/// Iterative allocation: at each allocation compare the bootstrap SE of
/// `F_max` with the SE after dropping `step` unitaries and after dropping
/// `step` shots per unitary, then grow the direction whose removal hurt
/// most. Ties grow `N_M`.
pub fn allocate_budget<S: DataSource>(
    source: &mut S,
    start: BudgetState,
    cfg: &BudgetConfig,
) -> Result<BudgetOutcome> {
    let mut state = start;
    let step = state.step.max(1);
    let min_nm = if cfg.variant == EstimatorVariant::UStatistic {
        2
    } else {
        1
    };
    loop {
        let (ds_1, ds_2) = source.acquire(state.n_u, state.n_m)?;
        let (se, report) = se_of(&ds_1, &ds_2, cfg)?;
        let index = state.history.len();
        let record = |decision| BudgetStep {
            step: index,
            n_u: state.n_u,
            n_m: state.n_m,
            se,
            decision,
        };
        if se <= state.target_se {
            state.history.push(record(Decision::Converged));
            return Ok(BudgetOutcome {
                state,
                status: BudgetStatus::Converged,
                report,
            });
        }
        if state.total_shots() >= cfg.max_total_shots {
            state.history.push(record(Decision::BudgetCap));
            return Ok(BudgetOutcome {
                state,
                status: BudgetStatus::NotConverged,
                report,
            });
        }

        let fewer_u = if state.n_u > step + 2 {
            se_of(
                &ds_1.prefix(state.n_u - step),
                &ds_2.prefix(state.n_u - step),
                cfg,
            )?
            .0
        } else {
            f64::INFINITY
        };
        let fewer_m = if state.n_m >= step as u64 + min_nm {
            let seed = randsrc::derive_seed(cfg.bootstrap.seed, &[index as u64]);
            let t1 = thin(&ds_1, step as u64, randsrc::derive_seed(seed, &[1]))?;
            let t2 = thin(&ds_2, step as u64, randsrc::derive_seed(seed, &[2]))?;
            se_of(&t1, &t2, cfg)?.0
        } else {
            f64::INFINITY
        };
        let decision = if fewer_u > fewer_m {
            Decision::GrowNu
        } else if fewer_u < fewer_m {
            Decision::GrowNm
        } else {
            Decision::GrowNmTie
        };
        state.history.push(record(decision));
        match decision {
            Decision::GrowNu => state.n_u += step,
            _ => state.n_m += step as u64,
        }
    }
}
