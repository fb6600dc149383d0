//! Command-line front end. Every command computes its artifacts in memory
//! and writes them at the end, so a failed run leaves no partial output.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::budget::{budget_table, render_table, ComponentErrors};
use crate::codes::{pauli_x, pauli_z, CodeKind};
use crate::config::{GrapeTarget, Preset, RunConfig, SweepKind};
use crate::error::{Error, Result};
use crate::evolver::{bus_shifts, rip_effective_phases};
use crate::fock::{CMatrix, CVector, HilbertSpaceLayout, Operator, C64};
use crate::formats::{write_pulse_csv, write_records, InputSummary, RecordLine, SimulationSummary, SUMMARY_SCHEMA_VERSION};
use crate::grape::{Gauge, GrapeOptions, GrapeProblem, TransferSpec};
use crate::hamiltonians::module_hamiltonian;
use crate::protocol::{logical_cnot, measurement_angle_sweep, Protocol, Readout};
use crate::tomography::qst::{pauli_labels, pauli_vector, pure_density};
use crate::tomography::wigner::write_wigner_csv;
use crate::tomography::{
    bootstrap_state_fidelity, build_tomography_matrix, concurrence, decode_tomography, process_fidelity,
    process_tomography, pure_state_fidelity, wigner_function, BootstrapSummary, PauliTransferMatrix, PovmCalibration,
    Reconstruction, TomographyDesign, WignerGrid,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const TOMOGRAPHY_SCHEMA_VERSION: u32 = 1;
pub const GRAPE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "telecnot", version, about = "Teleported CNOT between bosonic logical qubits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample protocol shots; writes records.jsonl and summary.json.
    Simulate,
    /// Decode the output and reconstruct it from simulated QST.
    Tomography,
    /// Optimize a control pulse; writes pulses.csv and grape.json.
    Grape,
    /// Print the error budget table; writes budget.json.
    Budget,
    /// RIP amplitude or measurement angle sweep as CSV.
    Sweep,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub shots: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub encoding: Option<String>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

/// Files produced by a command, relative to the output directory.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    /// Writes everything or nothing: on failure, files written so far (and
    /// the directory, if this call created it) are removed.
    pub fn commit(&self, dir: &Path) -> Result<()> {
        let created = !dir.exists();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Err(e) = std::fs::write(&path, bytes) {
                for p in &written {
                    let _ = std::fs::remove_file(p);
                }
                if created {
                    let _ = std::fs::remove_dir_all(dir);
                }
                return Err(e.into());
            }
            written.push(path);
        }
        Ok(())
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Messages go to `log`.
pub fn run<I, T>(args: I, log: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(log, "{e}");
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli, log) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(log, "error: {e}");
            if e.is_config_error() {
                EXIT_CONFIG
            } else {
                EXIT_NUMERICAL
            }
        }
    }
}

fn execute(cli: &Cli, log: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let artifacts = match cli.command {
        Command::Simulate => simulate(&cfg, log)?,
        Command::Tomography => tomography(&cfg, log)?,
        Command::Grape => grape(&cfg, log)?,
        Command::Budget => budget(&cfg, log)?,
        Command::Sweep => sweep(&cfg, log)?,
    };
    artifacts.commit(&cfg.output_dir)?;
    for (name, _) in &artifacts.files {
        writeln!(log, "wrote {}", cfg.output_dir.join(name).display())?;
    }
    Ok(())
}

/// Loads `--config` (or starts from paper defaults) and applies the flags.
pub fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&bytes)?
        }
        None => RunConfig::new(CodeKind::Binomial, Preset::Ideal),
    };
    if let Some(e) = &args.encoding {
        cfg.encoding = e.parse()?;
    }
    if let Some(p) = &args.preset {
        cfg.preset = p.parse()?;
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if args.shots.is_some() {
        cfg.shots = args.shots;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn basis_input(k: usize) -> CVector {
    let mut v = CVector::zeros(4);
    v[k] = C64::new(1.0, 0.0);
    v
}

/// Logical state expected after recorded outcome `r`: `CNOT |in>`, times the
/// uncorrected byproduct when feedforward is off.
pub fn expected_output(input: &CVector, r: u8, feedforward: bool) -> CVector {
    let mut out = logical_cnot() * input;
    if !feedforward {
        let id = CMatrix::identity(2, 2);
        if r & 2 == 0 {
            out = id.kronecker(&pauli_x()) * out;
        }
        if r & 1 != 0 {
            out = pauli_z().kronecker(&id) * out;
        }
    }
    out
}

fn wigner_csv(rho: &CMatrix, grid: &WignerGrid) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_wigner_csv(&wigner_function(rho, grid)?, &mut buf)?;
    Ok(buf)
}

pub fn simulate(cfg: &RunConfig, log: &mut dyn Write) -> Result<Artifacts> {
    let sp = cfg.system.resolve()?;
    let opts = cfg.protocol_options()?;
    let feedforward = opts.feedforward;
    let p = Protocol::new(&sp, opts)?;
    let (seed, shots) = (cfg.seed()?, cfg.shots()?);
    let inputs: Vec<(String, CVector)> = match cfg.preset {
        Preset::TruthTable => (0..4).map(|k| (format!("{}{}", k >> 1, k & 1), basis_input(k))).collect(),
        _ => vec![cfg.input_state()?],
    };
    let grid = WignerGrid::square(3.0, 41)?;
    let mut art = Artifacts::default();
    let mut lines = Vec::new();
    let mut summaries = Vec::new();
    for (i, (label, amps)) in inputs.iter().enumerate() {
        let state = p.encode_input(amps)?;
        let records = p.sample_records(&state, seed.wrapping_add(i as u64), shots)?;
        let mut counts = [0u64; 4];
        for r in &records {
            counts[r.outcome_index() as usize] += 1;
        }
        lines.extend(records.into_iter().map(|r| RecordLine::new(label, r)));

        let mut probabilities = [0.0; 4];
        let mut conditioned = [None; 4];
        for (r, item) in p.recorded_outputs(&state)?.into_iter().enumerate() {
            let Some((prob, s)) = item else { continue };
            probabilities[r] = prob;
            let want = expected_output(amps, r as u8, feedforward);
            conditioned[r] = Some(pure_state_fidelity(&p.logical_output(&s, Readout::Project)?, &want)?);
        }
        let out = p.channel_output(&state)?;
        let rho = p.logical_output(&out, Readout::Project)?;
        let summary = InputSummary {
            input: label.clone(),
            outcome_frequencies: counts.map(|c| c as f64 / shots as f64),
            outcome_probabilities: probabilities,
            conditioned_fidelities: conditioned,
            unconditioned_fidelity: pure_state_fidelity(&rho, &(logical_cnot() * amps))?,
            unconditioned_purity: (&rho * &rho).trace().re,
        };
        writeln!(
            log,
            "input {label}: frequencies {:?}, conditioned F {:?}, unconditioned F {:.4}, purity {:.4}",
            summary.outcome_frequencies,
            summary.conditioned_fidelities.map(|f| f.map(|x| (x * 1e4).round() / 1e4)),
            summary.unconditioned_fidelity,
            summary.unconditioned_purity
        )?;
        summaries.push(summary);

        if cfg.preset == Preset::TruthTable {
            for (stage, st) in [("input", &state), ("output", &out)] {
                for c in ["c1", "c2"] {
                    let rho_c = st.partial_trace(&[c])?.density();
                    art.add(format!("wigner_{label}_{stage}_{c}.csv"), wigner_csv(&rho_c, &grid)?);
                }
            }
        }
    }
    let mut buf = Vec::new();
    write_records(&lines, &mut buf)?;
    art.files.insert(0, ("records.jsonl".into(), buf));
    art.add_json(
        "summary.json",
        &SimulationSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            encoding: cfg.encoding.name().into(),
            preset: cfg.preset.name().into(),
            shots,
            seed,
            inputs: summaries,
        },
    )?;
    Ok(art)
}

#[derive(Serialize)]
struct PauliBars {
    labels: Vec<String>,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct TomographySummary {
    schema_version: u32,
    encoding: String,
    preset: String,
    input: String,
    seed: u64,
    shots_per_setting: usize,
    fidelity: BootstrapSummary,
    exact_fidelity: f64,
    concurrence: f64,
    pauli: PauliBars,
    rho_re: Vec<Vec<f64>>,
    rho_im: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    process_fidelity: Option<f64>,
}

pub fn tomography(cfg: &RunConfig, log: &mut dyn Write) -> Result<Artifacts> {
    let sp = cfg.system.resolve()?;
    let p = Protocol::new(&sp, cfg.protocol_options()?)?;
    let seed = cfg.seed()?;
    let settings = &cfg.tomography;
    let (label, amps) = cfg.input_state()?;
    let want = logical_cnot() * &amps;
    let target = pure_density(&want);
    let out = p.channel_output(&p.encode_input(&amps)?)?;
    let dec = p.code().decode_unitary(p.options().cavity_dim)?;
    let exact = decode_tomography(&out, &[("c1", "q1"), ("c2", "q2")], &dec, Reconstruction::Exact)?;

    let t = build_tomography_matrix(&TomographyDesign::standard(PovmCalibration::ideal(2)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freqs = t.sample_frequencies(&exact, settings.shots_per_setting, &mut rng);
    let mle = crate::tomography::mle_reconstruct(&freqs, &t, &Default::default())?;
    let boot = bootstrap_state_fidelity(&t, &freqs, settings.shots_per_setting, &target, settings.bootstrap, seed)?;
    writeln!(log, "state fidelity F = {:.3} ± {:.3}", boot.estimate, boot.std)?;

    let mut art = Artifacts::default();
    let process_f = if settings.process {
        let ptm = process_tomography(
            2,
            |rho| p.pipeline_output(rho, Readout::Decode),
            Reconstruction::Shots {
                shots: settings.shots_per_setting,
                seed,
            },
        )?;
        let f = process_fidelity(&ptm, &PauliTransferMatrix::from_unitary(&logical_cnot())?)?;
        writeln!(log, "process fidelity F_pro = {f:.3}")?;
        let mut bytes = ptm.to_json()?.into_bytes();
        bytes.push(b'\n');
        art.add("ptm.json", bytes);
        Some(f)
    } else {
        None
    };

    let rows = |f: fn(&C64) -> f64| -> Vec<Vec<f64>> {
        mle.rho.row_iter().map(|r| r.iter().map(f).collect()).collect()
    };
    art.add_json(
        "tomography.json",
        &TomographySummary {
            schema_version: TOMOGRAPHY_SCHEMA_VERSION,
            encoding: cfg.encoding.name().into(),
            preset: cfg.preset.name().into(),
            input: label,
            seed,
            shots_per_setting: settings.shots_per_setting,
            exact_fidelity: pure_state_fidelity(&exact, &want)?,
            concurrence: concurrence(&mle.rho)?,
            pauli: PauliBars {
                labels: pauli_labels(2),
                values: pauli_vector(&mle.rho, t.basis()).iter().copied().collect(),
            },
            rho_re: rows(|z| z.re),
            rho_im: rows(|z| z.im),
            fidelity: boot,
            process_fidelity: process_f,
        },
    )?;
    Ok(art)
}

#[derive(Serialize)]
struct GrapeSummary {
    schema_version: u32,
    target: GrapeTarget,
    encoding: String,
    duration_ns: f64,
    fidelity: f64,
    iterations: usize,
    trace: Vec<f64>,
}

pub fn grape(cfg: &RunConfig, log: &mut dyn Write) -> Result<Artifacts> {
    let sp = cfg.system.resolve()?;
    let g = &cfg.grape;
    let code = cfg.encoding.code();
    let (problem, duration) = match g.target {
        GrapeTarget::XGate => {
            let d = g.duration_ns.unwrap_or(40.0);
            let layout = HilbertSpaceLayout::new(&[("q2", 2)])?;
            let spec = TransferSpec::x_gate(Gauge::ZPhaseFree)?;
            (GrapeProblem::new(Operator::zeros(&layout), &["q2"], spec, d)?, d)
        }
        GrapeTarget::Encode | GrapeTarget::Decode => {
            let d = g.duration_ns.unwrap_or(1000.0);
            let layout = HilbertSpaceLayout::new(&[("c1", g.cavity_dim), ("q1", 2)])?;
            let h0 = module_hamiltonian(&sp, 1, &layout)?;
            let spec = match g.target {
                GrapeTarget::Encode => TransferSpec::encode(&code, g.cavity_dim, Gauge::Fixed)?,
                _ => TransferSpec::decode(&code, g.cavity_dim, Gauge::Fixed)?,
            };
            (GrapeProblem::new(h0, &["c1", "q1"], spec, d)?, d)
        }
    };
    let r = problem.optimize(
        None,
        &GrapeOptions {
            iterations: g.iterations,
            target_fidelity: g.target_fidelity,
            seed: cfg.seed()?,
            ..GrapeOptions::default()
        },
    )?;
    writeln!(log, "F = {:.6} after {} iterations", r.fidelity, r.iterations)?;
    let mut art = Artifacts::default();
    let mut buf = Vec::new();
    write_pulse_csv(&r.pulses, &mut buf)?;
    art.add("pulses.csv", buf);
    art.add_json(
        "grape.json",
        &GrapeSummary {
            schema_version: GRAPE_SCHEMA_VERSION,
            target: g.target,
            encoding: cfg.encoding.name().into(),
            duration_ns: duration,
            fidelity: r.fidelity,
            iterations: r.iterations,
            trace: r.trace,
        },
    )?;
    Ok(art)
}

pub fn budget(cfg: &RunConfig, log: &mut dyn Write) -> Result<Artifacts> {
    let table = budget_table(&ComponentErrors::paper_defaults(cfg.encoding))?;
    write!(log, "{}", render_table(&table))?;
    let mut art = Artifacts::default();
    art.add_json("budget.json", &table)?;
    Ok(art)
}

pub fn sweep(cfg: &RunConfig, log: &mut dyn Write) -> Result<Artifacts> {
    let sp = cfg.system.resolve()?;
    let opts = cfg.protocol_options()?;
    let s = &cfg.sweep;
    let mut wr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    let name = match s.kind {
        SweepKind::RipAmplitude => {
            let amps: Vec<f64> = (1..=s.points).map(|k| s.max_amplitude * k as f64 / s.points as f64).collect();
            let phis = amps
                .iter()
                .map(|&a| Ok(rip_effective_phases(&opts.rip.with_amplitude(a), &bus_shifts(&sp))?.entangling))
                .collect::<Result<Vec<f64>>>()?;
            let c = amps.iter().zip(&phis).map(|(a, p)| a * a * p).sum::<f64>()
                / amps.iter().map(|a| a.powi(4)).sum::<f64>();
            let resid = amps.iter().zip(&phis).map(|(a, p)| (p - c * a * a).abs()).fold(0.0, f64::max);
            writeln!(log, "phi_ent = {c:.4e} A^2, max residual {resid:.2e} rad")?;
            wr.write_record(["amplitude", "phi_ent", "quadratic_fit"]).map_err(csv_err)?;
            for (a, p) in amps.iter().zip(&phis) {
                wr.write_record(&[a.to_string(), p.to_string(), (c * a * a).to_string()])
                    .map_err(csv_err)?;
            }
            "sweep_rip_amplitude.csv"
        }
        SweepKind::MeasurementAngle => {
            let thetas: Vec<f64> = (0..s.points)
                .map(|k| std::f64::consts::PI * k as f64 / (s.points - 1) as f64)
                .collect();
            let (_, amps) = cfg.input_state()?;
            let pts = measurement_angle_sweep(&sp, &opts, &thetas, &amps)?;
            wr.write_record(["theta", "outcome", "probability", "zz", "xx", "xy", "yx", "yy"])
                .map_err(csv_err)?;
            for pt in &pts {
                for r in 0..4 {
                    let mut row = vec![
                        pt.theta.to_string(),
                        format!("{}{}", r >> 1, r & 1),
                        pt.probabilities[r].to_string(),
                    ];
                    row.extend(pt.correlators[r].iter().map(|x| x.to_string()));
                    wr.write_record(&row).map_err(csv_err)?;
                }
            }
            writeln!(log, "{} angles", pts.len())?;
            "sweep_measurement_angle.csv"
        }
    };
    let bytes = wr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut art = Artifacts::default();
    art.add(name, bytes);
    Ok(art)
}
