//! Randomized-measurement simulation: rotate a state by a shared unitary,
//! compute Born probabilities, and either keep them exactly (theory side) or
//! draw a finite number of projective shots (experiment side).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, XpvError};
use crate::qcore::QuantumState;
use crate::randsrc::{
    self, validate_sites, CMatrix, LocalUnitary, RngStream, Unitary, UnitarySchedule,
};

/// Applies a `d x d` factor to site `k` of every length-`d^n` column stored
/// contiguously in `data`.
fn apply_site(data: &mut [Complex64], factor: &CMatrix, k: usize, n: usize, d: usize) {
    let stride = d.pow((n - 1 - k) as u32);
    let block = stride * d;
    let mut gathered = vec![Complex64::new(0.0, 0.0); d];
    for base in (0..data.len()).step_by(block) {
        for off in 0..stride {
            for (a, g) in gathered.iter_mut().enumerate() {
                *g = data[base + off + a * stride];
            }
            for a in 0..d {
                let mut acc = Complex64::new(0.0, 0.0);
                for (b, g) in gathered.iter().enumerate() {
                    acc += factor[(a, b)] * g;
                }
                data[base + off + a * stride] = acc;
            }
        }
    }
}

fn apply_local(data: &mut [Complex64], unitary: &LocalUnitary, d: usize) {
    let n = unitary.num_sites();
    for (k, f) in unitary.factors.iter().enumerate() {
        apply_site(data, f, k, n, d);
    }
}

/// `|s⟩`-basis probabilities after rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDistribution {
    pub probs: Vec<f64>,
}

/// `probs[s] = ⟨s|UρU†|s⟩`.
pub fn born_probabilities(state: &QuantumState, unitary: &Unitary) -> Result<OutcomeDistribution> {
    let (n, d) = (state.num_sites(), state.local_dim());
    let dim = state.dim();
    match unitary {
        Unitary::Local(l) => {
            if l.num_sites() != n || l.factors.iter().any(|f| f.nrows() != d) {
                return Err(XpvError::Shape(format!(
                    "local unitary with {} factors applied to {n} sites of dimension {d}",
                    l.num_sites()
                )));
            }
        }
        Unitary::Global(m) => {
            if m.nrows() != dim {
                return Err(XpvError::Shape(format!(
                    "{}x{} unitary applied to dimension {dim}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
    }
    let probs = match (state, unitary) {
        (QuantumState::Pure(p), Unitary::Local(l)) => {
            let mut v: Vec<Complex64> = p.amplitudes().iter().copied().collect();
            apply_local(&mut v, l, d);
            v.iter().map(|z| z.norm_sqr()).collect()
        }
        (QuantumState::Pure(p), Unitary::Global(m)) => {
            (m * p.amplitudes()).iter().map(|z| z.norm_sqr()).collect()
        }
        (QuantumState::Mixed(rho), Unitary::Local(l)) => {
            // R = U (Uρ)† = UρU† since ρ is Hermitian; columns are contiguous.
            let mut m = rho.matrix().clone();
            for mut col in m.column_iter_mut() {
                apply_local(col.as_mut_slice(), l, d);
            }
            let mut r = m.adjoint();
            for mut col in r.column_iter_mut() {
                apply_local(col.as_mut_slice(), l, d);
            }
            (0..dim).map(|s| r[(s, s)].re).collect()
        }
        (QuantumState::Mixed(rho), Unitary::Global(u)) => {
            let m = u * rho.matrix();
            (0..dim)
                .map(|s| (0..dim).map(|b| (m[(s, b)] * u[(s, b)].conj()).re).sum())
                .collect()
        }
    };
    Ok(OutcomeDistribution { probs })
}

/// Observed data for one unitary: shot counts, or exact probabilities.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcomes {
    /// Sparse histogram over basis-string indices.
    Counts {
        counts: BTreeMap<usize, u64>,
        shots: u64,
    },
    /// Dense exact probabilities.
    Probs(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeRecord {
    pub u: usize,
    pub outcomes: Outcomes,
}

impl OutcomeRecord {
    pub fn shots(&self) -> Option<u64> {
        match &self.outcomes {
            Outcomes::Counts { shots, .. } => Some(*shots),
            Outcomes::Probs(_) => None,
        }
    }

    /// Draws `extra` more shots from `dist` into an existing histogram.
    pub fn add_shots(
        &mut self,
        dist: &OutcomeDistribution,
        extra: u64,
        rng: &mut RngStream,
    ) -> Result<()> {
        match &mut self.outcomes {
            Outcomes::Counts { counts, shots } => {
                let cdf = cumulative(&dist.probs);
                for _ in 0..extra {
                    *counts.entry(draw(&cdf, rng)).or_insert(0) += 1;
                }
                *shots += extra;
                Ok(())
            }
            Outcomes::Probs(_) => Err(XpvError::Unsupported(
                "cannot add shots to an exact record".into(),
            )),
        }
    }

    /// Removes `remove` shots uniformly without replacement.
    pub fn thinned(&self, remove: u64, rng: &mut RngStream) -> Result<OutcomeRecord> {
        match &self.outcomes {
            Outcomes::Counts { counts, shots } => {
                if remove >= *shots {
                    return Err(XpvError::InvalidValue(format!(
                        "cannot remove {remove} of {shots} shots"
                    )));
                }
                let mut counts = counts.clone();
                let mut remaining = *shots;
                for _ in 0..remove {
                    let mut pick = rng.random_range(0..remaining);
                    let mut hit = None;
                    for (&s, &c) in counts.iter() {
                        if pick < c {
                            hit = Some(s);
                            break;
                        }
                        pick -= c;
                    }
                    let s = hit.expect("pick is below the remaining total");
                    let c = counts.get_mut(&s).unwrap();
                    *c -= 1;
                    if *c == 0 {
                        counts.remove(&s);
                    }
                    remaining -= 1;
                }
                Ok(OutcomeRecord {
                    u: self.u,
                    outcomes: Outcomes::Counts {
                        counts,
                        shots: remaining,
                    },
                })
            }
            Outcomes::Probs(_) => Err(XpvError::Unsupported("cannot thin an exact record".into())),
        }
    }
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|p| {
            acc += p.max(0.0);
            acc
        })
        .collect()
}

fn draw(cdf: &[f64], rng: &mut RngStream) -> usize {
    let total = *cdf.last().expect("non-empty distribution");
    let r = rng.random::<f64>() * total;
    cdf.partition_point(|&c| c <= r).min(cdf.len() - 1)
}

/// Multinomial draw of `shots` outcomes by inverse CDF, one uniform per shot.
pub fn sample_counts(
    dist: &OutcomeDistribution,
    shots: u64,
    u: usize,
    rng: &mut RngStream,
) -> Result<OutcomeRecord> {
    if shots == 0 {
        return Err(XpvError::InvalidValue("shots must be >= 1".into()));
    }
    let cdf = cumulative(&dist.probs);
    let mut counts = BTreeMap::new();
    for _ in 0..shots {
        *counts.entry(draw(&cdf, rng)).or_insert(0u64) += 1;
    }
    Ok(OutcomeRecord {
        u,
        outcomes: Outcomes::Counts { counts, shots },
    })
}

/// Finite shots per unitary, or exact probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shots {
    Exact,
    Count(u64),
}

/// All records one platform produced for a shared schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementDataset {
    pub platform_id: String,
    pub schedule_ref: String,
    pub num_sites: usize,
    pub local_dim: usize,
    pub exact: bool,
    pub records: Vec<OutcomeRecord>,
}

impl MeasurementDataset {
    /// Checks record indices (`0..N_U` in order) and record kinds.
    pub fn new(
        platform_id: impl Into<String>,
        schedule_ref: impl Into<String>,
        num_sites: usize,
        local_dim: usize,
        exact: bool,
        records: Vec<OutcomeRecord>,
    ) -> Result<Self> {
        let dim = local_dim.pow(num_sites as u32);
        for (i, r) in records.iter().enumerate() {
            if r.u != i {
                return Err(XpvError::Protocol(format!(
                    "record {i} carries unitary index {}",
                    r.u
                )));
            }
            match &r.outcomes {
                Outcomes::Probs(p) if exact && p.len() == dim => {}
                Outcomes::Counts { counts, shots } if !exact => {
                    if *shots == 0 || counts.values().sum::<u64>() != *shots {
                        return Err(XpvError::InvalidValue(format!(
                            "record {i}: counts do not sum to shots"
                        )));
                    }
                    if counts.keys().any(|&s| s >= dim) {
                        return Err(XpvError::InvalidValue(format!(
                            "record {i}: basis index out of range"
                        )));
                    }
                }
                _ => {
                    return Err(XpvError::Format(format!(
                        "record {i} does not match exact={exact} / dimension {dim}"
                    )))
                }
            }
        }
        Ok(Self {
            platform_id: platform_id.into(),
            schedule_ref: schedule_ref.into(),
            num_sites,
            local_dim,
            exact,
            records,
        })
    }

    pub fn n_u(&self) -> usize {
        self.records.len()
    }

    pub fn dim(&self) -> usize {
        self.local_dim.pow(self.num_sites as u32)
    }

    /// Shots per unitary when uniform across records.
    pub fn shots_per_unitary(&self) -> Option<u64> {
        let first = self.records.first()?.shots()?;
        self.records
            .iter()
            .all(|r| r.shots() == Some(first))
            .then_some(first)
    }

    /// First `n` unitaries.
    pub fn prefix(&self, n: usize) -> MeasurementDataset {
        let mut out = self.clone();
        out.records.truncate(n);
        out
    }

    /// Outcomes marginalized onto `keep` (a subsystem `[1 → N_A]` and the like).
    ///
    /// The restricted local schedule is still a product of 2-design factors,
    /// so no re-measurement is needed. The schedule reference is rebound to
    /// `(schedule_ref, keep)`.
    pub fn marginal(&self, keep: &[usize]) -> Result<MeasurementDataset> {
        validate_sites(keep, self.num_sites)?;
        let (n, d) = (self.num_sites, self.local_dim);
        let project = |s: usize| {
            keep.iter().fold(0usize, |acc, &k| {
                acc * d + crate::qcore::site_digit(s, k, n, d)
            })
        };
        let kept_dim = d.pow(keep.len() as u32);
        let records = self
            .records
            .iter()
            .map(|r| {
                let outcomes = match &r.outcomes {
                    Outcomes::Counts { counts, shots } => {
                        let mut out = BTreeMap::new();
                        for (&s, &c) in counts {
                            *out.entry(project(s)).or_insert(0) += c;
                        }
                        Outcomes::Counts {
                            counts: out,
                            shots: *shots,
                        }
                    }
                    Outcomes::Probs(p) => {
                        let mut out = vec![0.0; kept_dim];
                        for (s, &x) in p.iter().enumerate() {
                            out[project(s)] += x;
                        }
                        Outcomes::Probs(out)
                    }
                };
                OutcomeRecord { u: r.u, outcomes }
            })
            .collect();
        Ok(MeasurementDataset {
            platform_id: self.platform_id.clone(),
            schedule_ref: marginal_ref(&self.schedule_ref, keep),
            num_sites: keep.len(),
            local_dim: d,
            exact: self.exact,
            records,
        })
    }

    /// Writes the NDJSON payload: a header line, then one line per record.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DatasetHeader {
            platform_id: self.platform_id.clone(),
            schedule_ref: self.schedule_ref.clone(),
            n: self.num_sites,
            d: self.local_dim,
            n_u: self.records.len(),
            exact: self.exact,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, &RecordLine::from(r))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| XpvError::Format("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        let mut records = Vec::with_capacity(header.n_u);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine = serde_json::from_str(&line)?;
            records.push(rec.into_record()?);
        }
        if records.len() != header.n_u {
            return Err(XpvError::Format(format!(
                "header announces {} records, found {}",
                header.n_u,
                records.len()
            )));
        }
        Self::new(
            header.platform_id,
            header.schedule_ref,
            header.n,
            header.d,
            header.exact,
            records,
        )
    }
}

/// Schedule reference of a marginal dataset.
pub fn marginal_ref(schedule_ref: &str, keep: &[usize]) -> String {
    let mut h = Sha256::new();
    h.update(b"xpv/marginal/v1");
    h.update(schedule_ref.as_bytes());
    for &k in keep {
        h.update((k as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub platform_id: String,
    pub schedule_ref: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    #[serde(rename = "N_U")]
    pub n_u: usize,
    pub exact: bool,
}

/// One record line: `{"u", "counts", "shots"}` or `{"u", "probs"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub u: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<BTreeMap<usize, u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

impl From<&OutcomeRecord> for RecordLine {
    fn from(r: &OutcomeRecord) -> Self {
        match &r.outcomes {
            Outcomes::Counts { counts, shots } => RecordLine {
                u: r.u,
                counts: Some(counts.clone()),
                shots: Some(*shots),
                probs: None,
            },
            Outcomes::Probs(p) => RecordLine {
                u: r.u,
                counts: None,
                shots: None,
                probs: Some(p.clone()),
            },
        }
    }
}

impl RecordLine {
    pub fn into_record(self) -> Result<OutcomeRecord> {
        let outcomes = match (self.counts, self.shots, self.probs) {
            (Some(counts), Some(shots), None) => Outcomes::Counts { counts, shots },
            (None, None, Some(p)) => Outcomes::Probs(p),
            _ => {
                return Err(XpvError::Format(format!(
                    "record {} must carry counts+shots or probs",
                    self.u
                )))
            }
        };
        Ok(OutcomeRecord {
            u: self.u,
            outcomes,
        })
    }
}

/// Measures `state` under every unitary of `schedule`.
///
/// Unitary `u` draws its shots from `stream(seed, u, 0)`, so the dataset does
/// not depend on how the work is scheduled across threads.
pub fn acquire_dataset(
    state: &QuantumState,
    schedule: &UnitarySchedule,
    shots: Shots,
    seed: u64,
    platform_id: &str,
) -> Result<MeasurementDataset> {
    if state.num_sites() != schedule.num_sites() || state.local_dim() != schedule.local_dim() {
        return Err(XpvError::Shape(format!(
            "state on {} sites (d={}) measured with a schedule on {} sites (d={})",
            state.num_sites(),
            state.local_dim(),
            schedule.num_sites(),
            schedule.local_dim()
        )));
    }
    let records = schedule
        .unitaries()
        .par_iter()
        .enumerate()
        .map(|(u, unitary)| {
            let dist = born_probabilities(state, unitary)?;
            match shots {
                Shots::Exact => Ok(OutcomeRecord {
                    u,
                    outcomes: Outcomes::Probs(dist.probs),
                }),
                Shots::Count(m) => {
                    sample_counts(&dist, m, u, &mut randsrc::stream(seed, u as u64, 0))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementDataset {
        platform_id: platform_id.to_string(),
        schedule_ref: schedule.schedule_ref(),
        num_sites: schedule.num_sites(),
        local_dim: schedule.local_dim(),
        exact: matches!(shots, Shots::Exact),
        records,
    })
}
