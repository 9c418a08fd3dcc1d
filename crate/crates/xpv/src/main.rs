use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use xpv_core::estimate::{estimate_fidelities, EstimatorVariant, HammingKernel};
use xpv_core::harness::{self, ExperimentPlan, NmSpec, Study};
use xpv_core::measure::{acquire_dataset, MeasurementDataset};
use xpv_core::qcore::{prepare_state, StateKind, StateSpec};
use xpv_core::randsrc::{sample_schedule, Ensemble, ScheduleMode, ScheduleParams};
use xpv_core::resample::BootstrapConfig;
use xverify::{ClientSource, SessionConfig};

#[derive(Parser)]
#[command(
    name = "xpv",
    version,
    about = "Cross-platform fidelity estimation from randomized measurements"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Local,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Plugin,
    Ustat,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyArg {
    ErrorVsNm,
    BudgetExponent,
    TheoryExperiment,
    NoiseSweep,
    QuenchFidelity,
    GlobalVsLocal,
}

impl From<StudyArg> for Study {
    fn from(s: StudyArg) -> Self {
        match s {
            StudyArg::ErrorVsNm => Study::ErrorVsNm,
            StudyArg::BudgetExponent => Study::BudgetExponent,
            StudyArg::TheoryExperiment => Study::TheoryExperiment,
            StudyArg::NoiseSweep => Study::NoiseSweep,
            StudyArg::QuenchFidelity => Study::QuenchFidelity,
            StudyArg::GlobalVsLocal => Study::GlobalVsLocal,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scaling study from a JSON plan; writes <study>.csv and manifest.json.
    Scaling {
        #[arg(long, value_enum)]
        study: StudyArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate overlap, purities and fidelities of two dataset files.
    Estimate {
        #[arg(long)]
        ds1: PathBuf,
        #[arg(long)]
        ds2: PathBuf,
        #[arg(long, value_enum, default_value = "local")]
        kernel: KernelArg,
        #[arg(long, value_enum, default_value = "ustat")]
        variant: VariantArg,
        /// Bootstrap resamples; 0 disables error bars.
        #[arg(long, default_value_t = 400)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Quench-fidelity study from a JSON plan; CSV to stdout or --out.
    Quench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate one platform's dataset and write it as NDJSON.
    Simulate {
        /// `kind:N[:seed]` with kind in pp, pr, neel, mm, mr<k>, dephased<λ>, or a JSON state spec.
        #[arg(long)]
        state: String,
        #[arg(long)]
        schedule_seed: u64,
        #[arg(long)]
        nu: usize,
        /// Shots per unitary, or `exact`.
        #[arg(long)]
        nm: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        shot_seed: u64,
        #[arg(long, default_value = "sim")]
        platform: String,
        #[arg(long, value_enum, default_value = "local")]
        mode: KernelArg,
    },
    /// Run a verifier session until both platforms complete.
    Serve {
        #[arg(long)]
        bind: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Join a verifier session as one platform.
    Join {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        platform: String,
        /// A dataset file, or a state spec to simulate under the offered schedule.
        #[arg(long)]
        source: String,
        #[arg(long, default_value = "exact")]
        nm: String,
        #[arg(long, default_value_t = 0)]
        shot_seed: u64,
    },
}

fn parse_state(s: &str, default_seed: u64) -> Result<StateSpec> {
    if s.trim_start().starts_with('{') {
        return Ok(serde_json::from_str(s)?);
    }
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() < 2 || parts.len() > 3 {
        bail!("state spec must look like kind:N[:seed], got {s:?}");
    }
    let kind = match parts[0] {
        "pp" | "pure_product" => StateKind::PureProduct,
        "pr" | "pure_haar_random" => StateKind::PureHaarRandom,
        "neel" => StateKind::Neel,
        "mm" | "maximally_mixed" => StateKind::MaximallyMixed,
        k if k.starts_with("mr") => StateKind::MixedRandom {
            traced_sites: k[2..].parse().context("mr<k>: k traced sites")?,
        },
        k if k.starts_with("dephased") => StateKind::DephasedMixture {
            lambda: k[8..].parse().context("dephased<λ>")?,
        },
        other => bail!("unknown state kind {other:?}"),
    };
    let n = parts[1].parse().context("number of sites")?;
    let seed = match parts.get(2) {
        Some(v) => v.parse().context("state seed")?,
        None => default_seed,
    };
    Ok(StateSpec::new(kind, n, seed))
}

fn read_dataset(path: &Path) -> Result<MeasurementDataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(MeasurementDataset::read_ndjson(BufReader::new(f))?)
}

fn mode_of(k: KernelArg) -> ScheduleMode {
    match k {
        KernelArg::Local => ScheduleMode::Local,
        KernelArg::Global => ScheduleMode::Global,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Scaling { study, config, out } => {
            let mut plan = ExperimentPlan::from_json_file(&config)?;
            plan.study = study.into();
            let manifest = harness::run_plan(&plan, &out)?;
            for (label, fit) in &manifest.fits {
                println!(
                    "{label}: exponent {:.4} ± {:.4}, prefactor {:.4}, r² {:.4}",
                    fit.exponent, fit.stderr_exponent, fit.prefactor, fit.r_squared
                );
            }
            println!("wrote {}", out.display());
        }
        Cmd::Estimate {
            ds1,
            ds2,
            kernel,
            variant,
            resamples,
            seed,
            json,
        } => {
            let (a, b) = (read_dataset(&ds1)?, read_dataset(&ds2)?);
            let k = HammingKernel::for_dataset(mode_of(kernel), &a);
            let variant = match variant {
                VariantArg::Plugin => EstimatorVariant::PlugIn,
                VariantArg::Ustat => EstimatorVariant::UStatistic,
            };
            let boot = BootstrapConfig {
                n_resamples: resamples,
                seed,
            };
            let report =
                estimate_fidelities(&a, &b, &k, variant, (resamples > 0).then_some(&boot))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_table());
            }
        }
        Cmd::Quench { config, out } => {
            let mut plan = ExperimentPlan::from_json_file(&config)?;
            plan.study = Study::QuenchFidelity;
            let rows = harness::run_quench_fidelity(&plan)?;
            match out {
                Some(p) => harness::write_csv(&p, &rows)?,
                None => {
                    println!("dt,n_a,f_max,se_f_max,oracle_f_max");
                    for r in rows {
                        let se = r.se_f_max.map_or(String::new(), |v| v.to_string());
                        println!("{},{},{},{},{}", r.dt, r.n_a, r.f_max, se, r.oracle_f_max);
                    }
                }
            }
        }
        Cmd::Simulate {
            state,
            schedule_seed,
            nu,
            nm,
            out,
            shot_seed,
            platform,
            mode,
        } => {
            let spec = parse_state(&state, 0)?;
            let nm: NmSpec = nm.parse()?;
            let schedule = sample_schedule(&ScheduleParams {
                mode: mode_of(mode),
                ensemble: Ensemble::HaarCue,
                n_u: nu,
                num_sites: spec.num_sites,
                local_dim: spec.local_dim,
                master_seed: schedule_seed,
            })?;
            let ds = acquire_dataset(
                &prepare_state(&spec)?,
                &schedule,
                nm.shots(),
                shot_seed,
                &platform,
            )?;
            ds.write_ndjson(BufWriter::new(File::create(&out)?))?;
            println!("{} records, schedule {}", ds.n_u(), ds.schedule_ref);
        }
        Cmd::Serve { bind, config } => {
            let cfg: SessionConfig = serde_json::from_reader(BufReader::new(File::open(&config)?))?;
            let outcome = xverify::serve(bind.as_str(), cfg)?;
            println!("session {}", outcome.state.session_id);
            print!("{}", outcome.report.to_table());
        }
        Cmd::Join {
            connect,
            platform,
            source,
            nm,
            shot_seed,
        } => {
            let src = if Path::new(&source).is_file() {
                ClientSource::File(PathBuf::from(&source))
            } else {
                let nm: NmSpec = nm.parse()?;
                ClientSource::Simulate {
                    state: parse_state(&source, 0)?,
                    shots: nm.shots(),
                    seed: shot_seed,
                }
            };
            let report = xverify::client_run(connect.as_str(), &platform, src)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
