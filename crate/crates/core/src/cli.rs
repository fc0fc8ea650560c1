//! Command-line pipeline: load or build a problem, solve, simulate, verify,
//! and write CSV/JSON artifacts into an output directory.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::follower::{solve_follower_riccati, Certificates, FollowerSolution};
use crate::leader::{leader_value, solve_equilibrium_with, Equilibrium, LeaderCertificates};
use crate::model::{load_spec, validate_spec, GameSpec, TimeGrid};
use crate::numerics::MatrixPath;
use crate::presets;
use crate::simulate::{closed_loop_model, run_paths, write_trajectories, SimConfig, TrajectoryStore};
use crate::verify::{verify_equilibrium, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_UNSOLVABLE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Simulate,
    Verify,
    ExampleRd,
    ExampleOpenloop,
}

impl Command {
    fn simulates(self) -> bool {
        matches!(self, Command::Simulate | Command::Verify | Command::ExampleRd)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub grid: usize,
    pub paths: usize,
    pub substeps: usize,
    pub seed: u64,
    pub horizon: Option<f64>,
    pub out: PathBuf,
    /// Worker threads for the Monte Carlo; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Number of sample paths to write to `trajectories.csv`.
    pub dump: Option<usize>,
}

impl RunConfig {
    pub fn new(command: Command, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            command,
            input: None,
            grid: 2000,
            paths: 10_000,
            substeps: 1,
            seed: 2024,
            horizon: None,
            out: out.into(),
            threads: None,
            dump: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::Validation("grid must have at least 2 steps".into()));
        }
        if let Some(h) = self.horizon {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::Validation("horizon must be positive".into()));
            }
        }
        let needs_input = matches!(self.command, Command::Solve | Command::Simulate | Command::Verify);
        if needs_input && self.input.is_none() {
            return Err(Error::Validation("this command needs --input".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Validation("threads must be positive".into()));
        }
        Ok(())
    }
}

/// Run the pipeline and return the process exit code.
pub fn run(cfg: &RunConfig) -> i32 {
    let outcome = match cfg.threads {
        Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(|| run_inner(cfg)),
            Err(e) => Err(Error::Validation(format!("thread pool: {e}"))),
        },
        None => run_inner(cfg),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_unsolvable() {
                EXIT_UNSOLVABLE
            } else {
                EXIT_ERROR
            }
        }
    }
}

fn load_problem(cfg: &RunConfig) -> Result<GameSpec> {
    let mut spec = match cfg.command {
        Command::ExampleRd => {
            presets::rd_competition(&presets::RdParams { horizon: cfg.horizon.unwrap_or(1.0), ..Default::default() })
        }
        Command::ExampleOpenloop => presets::open_loop_only(),
        _ => load_spec(cfg.input.as_deref().expect("validated"))?,
    };
    if let Some(h) = cfg.horizon {
        spec.horizon = h;
    }
    validate_spec(&spec).into_result()?;
    Ok(spec)
}

#[derive(Serialize)]
struct SolveReport {
    status: &'static str,
    reason: Option<String>,
    grid: usize,
    horizon: f64,
    follower: Option<Certificates>,
    leader: Option<LeaderCertificates>,
    leader_value: Option<f64>,
    follower_value: Option<f64>,
}

fn run_inner(cfg: &RunConfig) -> Result<i32> {
    cfg.validate()?;
    let spec = load_problem(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let grid = TimeGrid::new(spec.horizon, cfg.grid)?;
    let mut report = SolveReport {
        status: "solved",
        reason: None,
        grid: cfg.grid,
        horizon: spec.horizon,
        follower: None,
        leader: None,
        leader_value: None,
        follower_value: None,
    };

    let fine = match solve_follower_riccati(&spec, &grid.refined(2)) {
        Ok(f) => f,
        Err(e) if e.is_unsolvable() => return unsolvable(cfg, report, e.to_string()),
        Err(e) => return Err(e),
    };
    let follower = fine.subsample(2)?;
    emit_csv(&follower.p1, "P1_", &cfg.out.join("follower_P1.csv"))?;
    report.follower = Some(fine.certificates.clone());

    let eq = match solve_equilibrium_with(&spec, &grid, fine) {
        Ok(eq) => eq,
        Err(e) if e.is_unsolvable() => {
            let reason = match &e {
                Error::Certificate(r) => r.clone(),
                e => e.to_string(),
            };
            return unsolvable(cfg, report, reason);
        }
        Err(e) => return Err(e),
    };
    report.leader = Some(eq.leader.certificates.clone());
    report.leader_value = leader_value(&spec, &eq.leader, spec.x0.as_slice()).ok();
    report.follower_value = Some(closed_loop_model(&eq, 1)?.expected()[2]);

    write_leader_outputs(&eq, &cfg.out)?;
    write_json(&cfg.out.join("solve_report.json"), &report)?;
    if cfg.command == Command::ExampleRd {
        write_rd_figure(&eq, &follower, &cfg.out.join("figure_rd.csv"))?;
    }

    if cfg.command.simulates() {
        simulate(cfg, &eq, &report)?;
    }
    if cfg.command == Command::Verify {
        let opts = VerifyOptions::new(SimConfig::new(cfg.paths, cfg.substeps, cfg.seed));
        let v = verify_equilibrium(&eq, &opts)?;
        write_json(&cfg.out.join("verification.json"), &v)?;
    }
    Ok(EXIT_OK)
}

fn unsolvable(cfg: &RunConfig, mut report: SolveReport, reason: String) -> Result<i32> {
    eprintln!("not closed-loop solvable: {reason}");
    report.status = "not closed-loop solvable";
    report.reason = Some(reason);
    write_json(&cfg.out.join("solve_report.json"), &report)?;
    Ok(EXIT_UNSOLVABLE)
}

fn simulate(cfg: &RunConfig, eq: &Equilibrium, report: &SolveReport) -> Result<()> {
    let mut sc = SimConfig::new(cfg.paths, cfg.substeps, cfg.seed);
    sc.richardson = (cfg.grid * cfg.substeps).is_multiple_of(2);
    if let Some(k) = cfg.dump {
        sc.store = Some(TrajectoryStore { paths: k.min(cfg.paths), stride: cfg.substeps });
    }
    sc.validate()?;
    let model = closed_loop_model(eq, cfg.substeps)?;
    let res = run_paths(&model, &sc)?;
    let summary = json!({
        "seed": cfg.seed,
        "estimates": res.summary(),
        "exact": { "leader_value": report.leader_value, "follower_value": report.follower_value },
    });
    write_json(&cfg.out.join("sim_summary.json"), &summary)?;
    if let Some(ens) = &res.trajectories {
        let mut w = BufWriter::new(fs::File::create(cfg.out.join("trajectories.csv"))?);
        write_trajectories(eq, ens, &mut w)?;
    }
    Ok(())
}

fn write_leader_outputs(eq: &Equilibrium, out: &Path) -> Result<()> {
    emit_csv(&eq.leader.p, "P", &out.join("leader_P.csv"))?;
    emit_csv(&eq.leader.eta, "eta", &out.join("eta.csv"))?;
    let pol = &eq.policy;
    emit_csv_multi(
        &[
            ("K1_", &pol.follower_gain),
            ("k1_", &pol.follower_offset),
            ("Theta2_", &pol.leader_gain),
            ("v2_", &pol.leader_offset),
        ],
        &out.join("gains.csv"),
    )
}

fn write_rd_figure(eq: &Equilibrium, follower: &FollowerSolution, path: &Path) -> Result<()> {
    let mut s = String::from("t,P1_follower,P1,P2,P4\n");
    for k in 0..eq.grid.len() {
        let cols = [
            eq.grid.t(k),
            follower.p1.node(k)[(0, 0)],
            eq.leader.block(k, 0, 0)[(0, 0)],
            eq.leader.block(k, 0, 1)[(0, 0)],
            eq.leader.block(k, 1, 1)[(0, 0)],
        ];
        push_row(&mut s, cols.iter().copied());
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Shortest decimal form that parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) || !a.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn push_row(s: &mut String, vals: impl Iterator<Item = f64>) {
    for (i, v) in vals.enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format_f64(v));
    }
    s.push('\n');
}

/// Column names of a `rows x cols` path, row-major: `P11, P12, ...`, with an
/// underscore between indices once either exceeds 9.
pub fn entry_names(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    let sep = if rows > 9 || cols > 9 { "_" } else { "" };
    let mut names = Vec::with_capacity(rows * cols);
    for r in 1..=rows {
        for c in 1..=cols {
            if cols == 1 {
                names.push(format!("{prefix}{r}"));
            } else {
                names.push(format!("{prefix}{r}{sep}{c}"));
            }
        }
    }
    names
}

/// Several paths on one grid side by side.
pub fn csv_multi(paths: &[(&str, &MatrixPath)]) -> Result<String> {
    let Some((_, first)) = paths.first() else {
        return Err(Error::Shape("no paths to write".into()));
    };
    let grid = *first.grid();
    let mut s = String::from("t");
    for (prefix, p) in paths {
        if *p.grid() != grid {
            return Err(Error::Shape("paths live on different grids".into()));
        }
        let (r, c) = p.shape();
        for name in entry_names(prefix, r, c) {
            write!(s, ",{name}").expect("string write");
        }
    }
    s.push('\n');
    for k in 0..grid.len() {
        let mut row = vec![grid.t(k)];
        for (_, p) in paths {
            let m = p.node(k);
            for i in 0..m.nrows() {
                row.extend(m.row(i).iter().copied());
            }
        }
        push_row(&mut s, row.into_iter());
    }
    Ok(s)
}

pub fn emit_csv(path: &MatrixPath, prefix: &str, file: &Path) -> Result<()> {
    emit_csv_multi(&[(prefix, path)], file)
}

pub fn emit_csv_multi(paths: &[(&str, &MatrixPath)], file: &Path) -> Result<()> {
    fs::write(file, csv_multi(paths)?)?;
    Ok(())
}

/// Read back a single `rows x cols` path written by [`emit_csv`]. The grid is
/// rebuilt from the last time stamp and the row count.
pub fn parse_csv(text: &str, rows: usize, cols: usize) -> Result<MatrixPath> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Csv("empty file".into()))?;
    if header.split(',').count() != 1 + rows * cols {
        return Err(Error::Csv(format!("expected {} columns, header has {}", 1 + rows * cols, header.split(',').count())));
    }
    let mut times = Vec::new();
    let mut nodes = Vec::new();
    for (i, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Csv(format!("line {}: {e}", i + 2))))
            .collect::<Result<_>>()?;
        if vals.len() != 1 + rows * cols {
            return Err(Error::Csv(format!("line {}: wrong field count", i + 2)));
        }
        times.push(vals[0]);
        nodes.push(DMatrix::from_row_slice(rows, cols, &vals[1..]));
    }
    if nodes.len() < 2 {
        return Err(Error::Csv("need at least two rows".into()));
    }
    let grid = TimeGrid::new(*times.last().expect("nonempty"), nodes.len() - 1)?;
    MatrixPath::from_nodes(grid, &nodes)
}

/// Problem JSON of a built-in example, for users who want a template.
pub fn example_json(command: Command) -> Option<Value> {
    match command {
        Command::ExampleRd => Some(crate::model::spec_to_json(&presets::rd_competition(&Default::default()))),
        Command::ExampleOpenloop => Some(crate::model::spec_to_json(&presets::open_loop_only())),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_path_layout() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let p = MatrixPath::zeros(g, 1, 1);
        let s = csv_multi(&[("P", &p)]).unwrap();
        assert_eq!(s, "t,P1\n0,0\n0.5,0\n1,0\n");
    }

    #[test]
    fn leader_header() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let p = MatrixPath::zeros(g, 2, 2);
        let s = csv_multi(&[("P", &p)]).unwrap();
        assert!(s.starts_with("t,P11,P12,P21,P22\n"));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let g = TimeGrid::new(1.0, 7).unwrap();
        let nodes: Vec<DMatrix<f64>> = (0..8)
            .map(|k| {
                let x = k as f64;
                DMatrix::from_row_slice(2, 3, &[x / 3.0, -1e-300 * x, 1e20 / (x + 1.0), 0.1 + 0.2, -0.0, (x + 0.5).ln()])
            })
            .collect();
        let p = MatrixPath::from_nodes(g, &nodes).unwrap();
        let back = parse_csv(&csv_multi(&[("M", &p)]).unwrap(), 2, 3).unwrap();
        for k in 0..8 {
            for (a, b) in p.node(k).iter().zip(back.node(k).iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn wide_names_are_separated() {
        assert_eq!(entry_names("P", 1, 10)[9], "P1_10");
        assert_eq!(entry_names("eta", 2, 1), vec!["eta1", "eta2"]);
    }

    #[test]
    fn missing_input_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::new(Command::Solve, dir.path());
        assert_eq!(run(&cfg), EXIT_ERROR);
    }
}
