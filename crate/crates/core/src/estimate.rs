//! Overlap, purity and fidelity estimation from second-order correlations of
//! randomized-measurement outcomes.
//!
//! For one shared unitary `U` the correlator is
//! `X_ij(U) = Σ_{s,s'} w(s,s') P̂_i(s) P̂_j(s')`; its mean over the schedule
//! estimates `Tr(ρ_i ρ_j)`. Local schedules use the Hamming kernel
//! `w = d^N (−d)^{−D[s,s']}`, global schedules the 0/1 kernel
//! `w = D_A (−D_A)^{−D_G[s,s']}`.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XpvError};
use crate::measure::{MeasurementDataset, OutcomeRecord, Outcomes};
use crate::randsrc::ScheduleMode;
use crate::resample::{self, BootstrapConfig};

/// The `w(s, s')` weights of the overlap estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HammingKernel {
    pub mode: ScheduleMode,
    pub local_dim: usize,
    pub num_sites: usize,
}

impl HammingKernel {
    pub fn local(num_sites: usize, local_dim: usize) -> Self {
        Self {
            mode: ScheduleMode::Local,
            local_dim,
            num_sites,
        }
    }

    pub fn global(num_sites: usize, local_dim: usize) -> Self {
        Self {
            mode: ScheduleMode::Global,
            local_dim,
            num_sites,
        }
    }

    /// Kernel matching a dataset's register.
    pub fn for_dataset(mode: ScheduleMode, ds: &MeasurementDataset) -> Self {
        Self {
            mode,
            local_dim: ds.local_dim,
            num_sites: ds.num_sites,
        }
    }

    pub fn dim(&self) -> usize {
        self.local_dim.pow(self.num_sites as u32)
    }

    /// Site-wise Hamming distance between two basis indices.
    pub fn hamming(&self, mut s: usize, mut t: usize) -> usize {
        let d = self.local_dim;
        if d == 2 {
            return (s ^ t).count_ones() as usize;
        }
        let mut dist = 0;
        for _ in 0..self.num_sites {
            if s % d != t % d {
                dist += 1;
            }
            s /= d;
            t /= d;
        }
        dist
    }

    /// `w(s, s')`.
    pub fn weight(&self, s: usize, t: usize) -> f64 {
        match self.mode {
            ScheduleMode::Local => self.local_weights()[self.hamming(s, t)],
            ScheduleMode::Global => {
                if s == t {
                    self.dim() as f64
                } else {
                    -1.0
                }
            }
        }
    }

    /// Diagonal weight `w(s, s) = D_A` (both kernels).
    pub fn diagonal(&self) -> f64 {
        self.dim() as f64
    }

    /// `d^N (−d)^{−D} = (−1)^D d^{N−D}` for `D = 0..=N`.
    fn local_weights(&self) -> Vec<f64> {
        let (n, d) = (self.num_sites, self.local_dim as f64);
        (0..=n)
            .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 } * d.powi((n - k) as i32))
            .collect()
    }

    /// Dense `(K v)(s) = Σ_{s'} w(s, s') v(s')`.
    ///
    /// The local kernel factorizes over sites into `(d+1)·I − J` with `J` the
    /// all-ones matrix, so the transform costs `O(D_A·N·d)`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        assert_eq!(
            v.len(),
            dim,
            "vector length must equal the register dimension"
        );
        match self.mode {
            ScheduleMode::Global => {
                let total: f64 = v.iter().sum();
                v.iter().map(|x| (dim as f64 + 1.0) * x - total).collect()
            }
            ScheduleMode::Local => {
                let (n, d) = (self.num_sites, self.local_dim);
                let mut out = v.to_vec();
                for k in 0..n {
                    let stride = d.pow((n - 1 - k) as u32);
                    let block = stride * d;
                    for base in (0..dim).step_by(block) {
                        for off in 0..stride {
                            let mut fiber_sum = 0.0;
                            for a in 0..d {
                                fiber_sum += out[base + off + a * stride];
                            }
                            for a in 0..d {
                                let idx = base + off + a * stride;
                                out[idx] = (d as f64 + 1.0) * out[idx] - fiber_sum;
                            }
                        }
                    }
                }
                out
            }
        }
    }

    /// `Σ_{s,s'} w(s,s') a_s b_{s'}` over two sparse weight lists.
    fn sparse_pairs(&self, a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
        match self.mode {
            ScheduleMode::Global => {
                let dim = self.dim() as f64;
                let (mut diag, mut ta, mut tb) = (0.0, 0.0, 0.0);
                let mut j = 0;
                for &(s, x) in a {
                    ta += x;
                    while j < b.len() && b[j].0 < s {
                        j += 1;
                    }
                    if j < b.len() && b[j].0 == s {
                        diag += x * b[j].1;
                    }
                }
                for &(_, y) in b {
                    tb += y;
                }
                (dim + 1.0) * diag - ta * tb
            }
            ScheduleMode::Local => {
                let w = self.local_weights();
                let mut acc = 0.0;
                for &(s, x) in a {
                    let mut row = 0.0;
                    for &(t, y) in b {
                        row += w[self.hamming(s, t)] * y;
                    }
                    acc += x * row;
                }
                acc
            }
        }
    }

    fn dense_cost(&self) -> usize {
        self.dim() * (self.num_sites * self.local_dim + 1)
    }

    /// `Σ w a b` with the cheaper of the pairwise and transform paths.
    fn bilinear(&self, a: &Outcomes, b: &Outcomes) -> f64 {
        match (a, b) {
            (Outcomes::Probs(p), Outcomes::Probs(q)) => dot(p, &self.apply(q)),
            (Outcomes::Counts { counts, .. }, Outcomes::Probs(q))
            | (Outcomes::Probs(q), Outcomes::Counts { counts, .. }) => {
                let kq = self.apply(q);
                counts.iter().map(|(&s, &c)| c as f64 * kq[s]).sum()
            }
            (Outcomes::Counts { counts: ca, .. }, Outcomes::Counts { counts: cb, .. }) => {
                let pair_cost = ca.len() * cb.len() * self.num_sites.max(1);
                if self.mode == ScheduleMode::Local && pair_cost > self.dense_cost() {
                    let mut dense = vec![0.0; self.dim()];
                    for (&t, &c) in cb {
                        dense[t] = c as f64;
                    }
                    let kb = self.apply(&dense);
                    ca.iter().map(|(&s, &c)| c as f64 * kb[s]).sum()
                } else {
                    let a: Vec<(usize, f64)> = ca.iter().map(|(&s, &c)| (s, c as f64)).collect();
                    let b: Vec<(usize, f64)> = cb.iter().map(|(&s, &c)| (s, c as f64)).collect();
                    self.sparse_pairs(&a, &b)
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How auto-correlations (purities) treat repeated shots of one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorVariant {
    /// `P̂(s) P̂(s')` from the same shots.
    PlugIn,
    /// Pairs of distinct shots only: unbiased for every `N_M ≥ 2`.
    #[default]
    UStatistic,
}

impl fmt::Display for EstimatorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorVariant::PlugIn => "plugin",
            EstimatorVariant::UStatistic => "ustat",
        })
    }
}

fn check_record(rec: &OutcomeRecord, kernel: &HammingKernel) -> Result<()> {
    let dim = kernel.dim();
    match &rec.outcomes {
        Outcomes::Probs(p) if p.len() != dim => Err(XpvError::Shape(format!(
            "record {} has {} probabilities, kernel dimension {dim}",
            rec.u,
            p.len()
        ))),
        Outcomes::Counts { counts, .. } if counts.keys().next_back().is_some_and(|&s| s >= dim) => {
            Err(XpvError::Shape(format!(
                "record {} holds a basis index outside dimension {dim}",
                rec.u
            )))
        }
        _ => Ok(()),
    }
}

fn norm(o: &Outcomes) -> f64 {
    match o {
        Outcomes::Counts { shots, .. } => *shots as f64,
        Outcomes::Probs(_) => 1.0,
    }
}

/// Correlator between two independent records of the same unitary.
pub fn cross_correlator(
    rec_i: &OutcomeRecord,
    rec_j: &OutcomeRecord,
    kernel: &HammingKernel,
) -> Result<f64> {
    if rec_i.u != rec_j.u {
        return Err(XpvError::Protocol(format!(
            "records belong to unitaries {} and {}",
            rec_i.u, rec_j.u
        )));
    }
    check_record(rec_i, kernel)?;
    check_record(rec_j, kernel)?;
    let raw = kernel.bilinear(&rec_i.outcomes, &rec_j.outcomes);
    Ok(raw / (norm(&rec_i.outcomes) * norm(&rec_j.outcomes)))
}

/// Auto-correlation of one record with itself.
pub fn auto_correlator(
    rec: &OutcomeRecord,
    kernel: &HammingKernel,
    variant: EstimatorVariant,
) -> Result<f64> {
    check_record(rec, kernel)?;
    let raw = kernel.bilinear(&rec.outcomes, &rec.outcomes);
    match (&rec.outcomes, variant) {
        (Outcomes::Probs(_), _) => Ok(raw),
        (Outcomes::Counts { shots, .. }, EstimatorVariant::PlugIn) => {
            Ok(raw / (*shots as f64).powi(2))
        }
        (Outcomes::Counts { shots, .. }, EstimatorVariant::UStatistic) => {
            if *shots < 2 {
                return Err(XpvError::DegenerateInput(format!(
                    "record {}: the U-statistic needs at least 2 shots, got {shots}",
                    rec.u
                )));
            }
            let m = *shots as f64;
            Ok((raw - kernel.diagonal() * m) / (m * (m - 1.0)))
        }
    }
}

/// Per-unitary correlator. Passing the same record twice (by reference)
/// selects the auto-correlation; anything else is a cross-correlation.
pub fn pair_correlator(
    rec_i: &OutcomeRecord,
    rec_j: &OutcomeRecord,
    kernel: &HammingKernel,
    variant: EstimatorVariant,
) -> Result<f64> {
    if std::ptr::eq(rec_i, rec_j) {
        auto_correlator(rec_i, kernel, variant)
    } else {
        cross_correlator(rec_i, rec_j, kernel)
    }
}

fn check_pair(
    ds_i: &MeasurementDataset,
    ds_j: &MeasurementDataset,
    kernel: &HammingKernel,
) -> Result<usize> {
    if ds_i.schedule_ref != ds_j.schedule_ref {
        return Err(XpvError::Protocol(format!(
            "datasets were measured with different schedules ({} vs {})",
            ds_i.schedule_ref, ds_j.schedule_ref
        )));
    }
    for ds in [ds_i, ds_j] {
        if ds.num_sites != kernel.num_sites || ds.local_dim != kernel.local_dim {
            return Err(XpvError::Shape(format!(
                "dataset on {} sites (d={}) with a kernel for {} sites (d={})",
                ds.num_sites, ds.local_dim, kernel.num_sites, kernel.local_dim
            )));
        }
    }
    let n_u = ds_i.n_u().min(ds_j.n_u());
    if n_u == 0 {
        return Err(XpvError::DegenerateInput("no shared unitaries".into()));
    }
    Ok(n_u)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean of the per-unitary correlators. For `ds_i` and `ds_j` the same
/// object this is the purity estimate.
pub fn estimate_overlap(
    ds_i: &MeasurementDataset,
    ds_j: &MeasurementDataset,
    kernel: &HammingKernel,
    variant: EstimatorVariant,
) -> Result<f64> {
    let n_u = check_pair(ds_i, ds_j, kernel)?;
    let auto = std::ptr::eq(ds_i, ds_j);
    let xs = (0..n_u)
        .into_par_iter()
        .map(|u| {
            if auto {
                auto_correlator(&ds_i.records[u], kernel, variant)
            } else {
                cross_correlator(&ds_i.records[u], &ds_j.records[u], kernel)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&xs))
}

/// Per-unitary cross and auto correlators of a dataset pair, indexed by `u`.
///
/// Everything downstream (point estimates, bootstrap) works from this table.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatorTable {
    pub x12: Vec<f64>,
    pub x11: Vec<f64>,
    pub x22: Vec<f64>,
}

impl CorrelatorTable {
    pub fn build(
        ds_1: &MeasurementDataset,
        ds_2: &MeasurementDataset,
        kernel: &HammingKernel,
        variant: EstimatorVariant,
    ) -> Result<Self> {
        let n_u = check_pair(ds_1, ds_2, kernel)?;
        let rows = (0..n_u)
            .into_par_iter()
            .map(|u| {
                let (r1, r2) = (&ds_1.records[u], &ds_2.records[u]);
                Ok((
                    cross_correlator(r1, r2, kernel)?,
                    auto_correlator(r1, kernel, variant)?,
                    auto_correlator(r2, kernel, variant)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut table = CorrelatorTable {
            x12: Vec::with_capacity(n_u),
            x11: Vec::with_capacity(n_u),
            x22: Vec::with_capacity(n_u),
        };
        for (a, b, c) in rows {
            table.x12.push(a);
            table.x11.push(b);
            table.x22.push(c);
        }
        Ok(table)
    }

    pub fn n_u(&self) -> usize {
        self.x12.len()
    }

    /// `(overlap, purity_1, purity_2)` averaged over the given indices.
    pub fn means_over(&self, idx: &[usize]) -> (f64, f64, f64) {
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for &u in idx {
            a += self.x12[u];
            b += self.x11[u];
            c += self.x22[u];
        }
        let n = idx.len() as f64;
        (a / n, b / n, c / n)
    }

    pub fn means(&self) -> (f64, f64, f64) {
        (mean(&self.x12), mean(&self.x11), mean(&self.x22))
    }
}

/// `(F_max, F_GM)` from an overlap and two purities, or `None` when a purity
/// is not positive.
pub fn fidelities_from(overlap: f64, p1: f64, p2: f64) -> Option<(f64, f64)> {
    if p1 > 0.0 && p2 > 0.0 {
        Some((overlap / p1.max(p2), overlap / (p1 * p2).sqrt()))
    } else {
        None
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Result of a cross-platform comparison.
///
/// `f_max` and `f_gm` are bias-corrected when a bootstrap was run, raw
/// otherwise; the raw values are kept alongside. If either purity estimate is
/// not positive the report is flagged `unreliable` and the fidelities are
/// NaN (`null` in JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub overlap_12: f64,
    pub purity_1: f64,
    pub purity_2: f64,
    #[serde(with = "nan_as_null")]
    pub f_max: f64,
    #[serde(with = "nan_as_null")]
    pub f_gm: f64,
    #[serde(with = "nan_as_null")]
    pub f_max_raw: f64,
    #[serde(with = "nan_as_null")]
    pub f_gm_raw: f64,
    pub se_overlap: Option<f64>,
    pub se_purity_1: Option<f64>,
    pub se_purity_2: Option<f64>,
    pub se_f_max: Option<f64>,
    pub se_f_gm: Option<f64>,
    pub bias_f_max: Option<f64>,
    pub bias_f_gm: Option<f64>,
    pub n_u: usize,
    /// Shots per unitary; `None` for exact probabilities.
    pub n_m1: Option<u64>,
    pub n_m2: Option<u64>,
    pub estimator_variant: EstimatorVariant,
    pub kernel: ScheduleMode,
    pub unreliable: bool,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl EstimateReport {
    /// Fixed-width two-column table.
    pub fn to_table(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let nm = |x: Option<u64>| x.map_or_else(|| "exact".to_string(), |v| v.to_string());
        let rows: Vec<(&str, String)> = vec![
            ("overlap_12", format!("{:.6}", self.overlap_12)),
            ("purity_1", format!("{:.6}", self.purity_1)),
            ("purity_2", format!("{:.6}", self.purity_2)),
            ("f_max", opt(finite(self.f_max))),
            ("f_gm", opt(finite(self.f_gm))),
            ("f_max_raw", opt(finite(self.f_max_raw))),
            ("f_gm_raw", opt(finite(self.f_gm_raw))),
            ("se_overlap", opt(self.se_overlap)),
            ("se_purity_1", opt(self.se_purity_1)),
            ("se_purity_2", opt(self.se_purity_2)),
            ("se_f_max", opt(self.se_f_max)),
            ("se_f_gm", opt(self.se_f_gm)),
            ("bias_f_max", opt(self.bias_f_max)),
            ("bias_f_gm", opt(self.bias_f_gm)),
            ("n_u", self.n_u.to_string()),
            ("n_m1", nm(self.n_m1)),
            ("n_m2", nm(self.n_m2)),
            ("variant", self.estimator_variant.to_string()),
            ("kernel", format!("{:?}", self.kernel).to_lowercase()),
            ("unreliable", self.unreliable.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<14}{v:>16}\n"));
        }
        out
    }
}

/// Overlap, purities and both fidelities of a dataset pair, with bootstrap
/// errors and first-order bias correction when `bootstrap` is given.
pub fn estimate_fidelities(
    ds_1: &MeasurementDataset,
    ds_2: &MeasurementDataset,
    kernel: &HammingKernel,
    variant: EstimatorVariant,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<EstimateReport> {
    let table = CorrelatorTable::build(ds_1, ds_2, kernel, variant)?;
    let mut report = report_from_table(&table, kernel, variant, bootstrap)?;
    report.n_m1 = ds_1.shots_per_unitary();
    report.n_m2 = ds_2.shots_per_unitary();
    Ok(report)
}

/// Builds a report from precomputed correlators (shot counts left unset).
pub fn report_from_table(
    table: &CorrelatorTable,
    kernel: &HammingKernel,
    variant: EstimatorVariant,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<EstimateReport> {
    let (o, p1, p2) = table.means();
    let point = fidelities_from(o, p1, p2);
    let (f_max_raw, f_gm_raw) = point.unwrap_or((f64::NAN, f64::NAN));
    let mut report = EstimateReport {
        overlap_12: o,
        purity_1: p1,
        purity_2: p2,
        f_max: f_max_raw,
        f_gm: f_gm_raw,
        f_max_raw,
        f_gm_raw,
        se_overlap: None,
        se_purity_1: None,
        se_purity_2: None,
        se_f_max: None,
        se_f_gm: None,
        bias_f_max: None,
        bias_f_gm: None,
        n_u: table.n_u(),
        n_m1: None,
        n_m2: None,
        estimator_variant: variant,
        kernel: kernel.mode,
        unreliable: point.is_none(),
    };
    if let Some(cfg) = bootstrap {
        let s = resample::bootstrap_table(table, cfg)?;
        report.se_overlap = finite(s.se_overlap);
        report.se_purity_1 = finite(s.se_purity_1);
        report.se_purity_2 = finite(s.se_purity_2);
        report.se_f_max = finite(s.se_f_max);
        report.se_f_gm = finite(s.se_f_gm);
        report.bias_f_max = finite(s.bias_f_max);
        report.bias_f_gm = finite(s.bias_f_gm);
        if let (Some(bm), Some(bg)) = (report.bias_f_max, report.bias_f_gm) {
            report.f_max = f_max_raw - bm;
            report.f_gm = f_gm_raw - bg;
        }
    }
    Ok(report)
}

/// Correlation-coefficient fidelities of a global-mode dataset pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationForm {
    /// Pearson coefficient, approximates `F_GM`.
    pub f_gm_pearson: f64,
    /// Covariance over the larger variance, approximates `F_max`.
    pub f_max_maxnorm: f64,
}

fn prob_of(rec: &OutcomeRecord, s: usize) -> f64 {
    match &rec.outcomes {
        Outcomes::Probs(p) => p[s],
        Outcomes::Counts { counts, shots } => {
            counts.get(&s).copied().unwrap_or(0) as f64 / *shots as f64
        }
    }
}

/// Pearson and max-normalized correlation coefficients of `P_U^{(1)}(s)`
/// and `P_U^{(2)}(s)` across the schedule, for one reference string `s`.
pub fn global_correlation_form(
    ds_1: &MeasurementDataset,
    ds_2: &MeasurementDataset,
    kernel: &HammingKernel,
    reference: usize,
) -> Result<CorrelationForm> {
    if kernel.mode != ScheduleMode::Global {
        return Err(XpvError::Mode(
            "correlation-coefficient form requires a global schedule".into(),
        ));
    }
    let n_u = check_pair(ds_1, ds_2, kernel)?;
    if reference >= kernel.dim() {
        return Err(XpvError::InvalidValue(format!(
            "reference string {reference} outside dimension {}",
            kernel.dim()
        )));
    }
    if n_u < 2 {
        return Err(XpvError::DegenerateInput(
            "need at least two unitaries for a covariance".into(),
        ));
    }
    let a: Vec<f64> = ds_1.records[..n_u]
        .iter()
        .map(|r| prob_of(r, reference))
        .collect();
    let b: Vec<f64> = ds_2.records[..n_u]
        .iter()
        .map(|r| prob_of(r, reference))
        .collect();
    let (ma, mb) = (mean(&a), mean(&b));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(XpvError::DegenerateInput(
            "probabilities do not vary across the schedule".into(),
        ));
    }
    Ok(CorrelationForm {
        f_gm_pearson: cov / (va * vb).sqrt(),
        f_max_maxnorm: cov / va.max(vb),
    })
}
