//! Experiment runner behind the `lab` binary.
//!
//! A config file holds one experiment as flat `key = value` lines. `#` starts
//! a comment; blank lines are ignored; keys may appear once. Example:
//!
//! ```text
//! family  = broughton        # a built-in name, or polynomial text with `nvars`
//! command = acv
//! seed    = 7
//! c       = 0
//! radii   = 10, 30, 100, 300, 1000
//! ```
//!
//! Every value is validated before any computation starts. Results go to the
//! output directory as one CSV or JSON file per sub-result, plus
//! `manifest.json` with the config hash, seed and version. Only the manifest
//! carries a timestamp.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::asym::{limit_normal_cloud, malgrange_profile, sphericalness_report};
use crate::crofton::average_euler;
use crate::curv::{self, CurvatureConfig, Method};
use crate::error::Error;
use crate::flow::{self, FieldKind};
use crate::geom::Family;
use crate::poly::parse;
use crate::sample::newton_project;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A family shipped with the laboratory, with its known critical values.
#[derive(Clone, Copy, Debug)]
pub struct Builtin {
    pub name: &'static str,
    pub text: &'static str,
    pub nvars: usize,
    pub k0: &'static str,
    pub k_inf: &'static str,
    pub note: &'static str,
}

pub const BUILTINS: [Builtin; 5] = [
    Builtin {
        name: "sphere2",
        text: "x1^2 + x2^2 - t",
        nvars: 2,
        k0: "{0}",
        k_inf: "{}",
        note: "circles of radius sqrt(t); K = |K| = 2pi for t > 0",
    },
    Builtin {
        name: "sphere3",
        text: "x1^2 + x2^2 + x3^2 - t",
        nvars: 3,
        k0: "{0}",
        k_inf: "{}",
        note: "round spheres; K = |K| = 4pi for t > 0",
    },
    Builtin {
        name: "linear",
        text: "x1 - t",
        nvars: 2,
        k0: "{}",
        k_inf: "{}",
        note: "parallel lines; K = |K| = 0",
    },
    Builtin {
        name: "broughton",
        text: "x1 + x1^2*x2 - t",
        nvars: 2,
        k0: "{}",
        k_inf: "{0}",
        note: "asymptotic critical value at 0 where |K| jumps",
    },
    Builtin {
        name: "plane3",
        text: "x1 - t",
        nvars: 3,
        k0: "{}",
        k_inf: "{}",
        note: "parallel planes; K = |K| = 0",
    },
];

pub fn builtin(name: &str) -> Option<&'static Builtin> {
    BUILTINS.iter().find(|b| b.name == name)
}

/// Catalog printed by `lab list`.
pub fn list_builtin() -> String {
    let mut s = String::from("name       nvars  degree  K0    Kinf  F\n");
    for b in &BUILTINS {
        let degree = parse(b.text, b.nvars).map(|p| p.degree()).unwrap_or(0);
        let _ = writeln!(
            s,
            "{:<10} {:<6} {:<7} {:<5} {:<5} {}    # {}",
            b.name, b.nvars, degree, b.k0, b.k_inf, b.text, b.note
        );
    }
    s
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Profile,
    Acv,
    Spherical,
    Cloud,
    Flow,
    Crofton,
    All,
}

impl Command {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "profile" => Self::Profile,
            "acv" => Self::Acv,
            "spherical" => Self::Spherical,
            "cloud" => Self::Cloud,
            "flow" => Self::Flow,
            "crofton" => Self::Crofton,
            "all" => Self::All,
            _ => return None,
        })
    }

    fn parts(self) -> Vec<Command> {
        match self {
            Self::All => vec![
                Self::Profile,
                Self::Acv,
                Self::Spherical,
                Self::Cloud,
                Self::Flow,
                Self::Crofton,
            ],
            c => vec![c],
        }
    }
}

/// A validated experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub family_label: String,
    pub family: Family,
    pub command: Command,
    pub seed: u64,
    pub out: PathBuf,
    pub tmin: f64,
    pub tmax: f64,
    pub steps: usize,
    pub method: Method,
    pub budget: usize,
    pub ball_radius: f64,
    pub k_sigma: f64,
    pub c: f64,
    pub epsilon: f64,
    pub radii: Vec<f64>,
    pub restarts: usize,
    pub r_min: f64,
    pub cloud_budget: usize,
    pub grid_h: f64,
    pub start: Option<Vec<f64>>,
    pub s: f64,
    pub tol: f64,
    pub field: FieldKind,
    pub draws: usize,
    pub box_radius: f64,
    /// Canonical `key = value` text of the resolved settings.
    pub canonical: String,
}

impl ExperimentConfig {
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical.as_bytes())
            .iter()
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    fn curvature(&self) -> CurvatureConfig {
        CurvatureConfig {
            method: self.method,
            budget: self.budget,
            ball_radius: self.ball_radius,
            seed: self.seed,
        }
    }
}

/// Command-line settings that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

const KEYS: [&str; 27] = [
    "family",
    "nvars",
    "command",
    "seed",
    "out",
    "tmin",
    "tmax",
    "steps",
    "method",
    "budget",
    "ball_radius",
    "k_sigma",
    "c",
    "epsilon",
    "radii",
    "restarts",
    "r_min",
    "cloud_budget",
    "grid_h",
    "start",
    "s",
    "tol",
    "field",
    "draws",
    "box_radius",
    "workers",
    "name",
];

struct Raw {
    map: BTreeMap<String, (usize, String)>,
}

impl Raw {
    fn read(text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(CliError::Config(format!("line {lineno}: expected `key = value`")));
            };
            let key = k.trim().to_string();
            if !KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!("line {lineno}: unknown key `{key}`")));
            }
            if map.insert(key.clone(), (lineno, v.trim().to_string())).is_some() {
                return Err(CliError::Config(format!("line {lineno}: duplicate key `{key}`")));
            }
        }
        Ok(Self { map })
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.map.get(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|_| CliError::Config(format!("line {line}: cannot read `{key} = {v}`"))),
        }
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        let Some((line, v)) = self.map.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("line {line}: `{key}` must be a comma-separated list of numbers")))
    }

    fn line(&self, key: &str) -> usize {
        self.map.get(key).map_or(0, |e| e.0)
    }
}

fn bad(key: &str, why: &str) -> CliError {
    CliError::Config(format!("`{key}` {why}"))
}

/// Parses and validates a config file body.
pub fn parse_config(text: &str, ov: &Overrides) -> Result<ExperimentConfig, CliError> {
    let raw = Raw::read(text)?;
    let Some((fline, ftext)) = raw.map.get("family").cloned() else {
        return Err(bad("family", "is required"));
    };
    let (family_label, family) = match builtin(&ftext) {
        Some(b) => {
            if raw.map.contains_key("nvars") && raw.get("nvars", b.nvars)? != b.nvars {
                return Err(bad("nvars", "disagrees with the built-in family"));
            }
            (b.name.to_string(), Family::parse(b.text, b.nvars).expect("built-ins parse"))
        }
        None => {
            let Some(_) = raw.map.get("nvars") else {
                return Err(bad("nvars", "is required with a polynomial family"));
            };
            let nvars: usize = raw.get("nvars", 0)?;
            if nvars == 0 {
                return Err(bad("nvars", "must be at least 1"));
            }
            let fam = Family::parse(&ftext, nvars).map_err(|e| CliError::Config(format!("line {fline}: {e}")))?;
            (ftext.clone(), fam)
        }
    };
    let n = family.n();
    let cmd_text: String = raw.get("command", String::new())?;
    let command = Command::parse(&cmd_text).ok_or_else(|| {
        CliError::Config(format!(
            "line {}: command must be one of profile, acv, spherical, cloud, flow, crofton, all",
            raw.line("command")
        ))
    })?;
    let seed = match ov.seed {
        Some(s) => s,
        None => match raw.map.get("seed") {
            Some(_) => raw.get("seed", 0u64)?,
            None => return Err(bad("seed", "is required (in the file or with --seed)")),
        },
    };
    let out = ov
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(raw.get("out", "lab_out".to_string()).unwrap_or_default()));

    let default_method = if n == 2 { "tracer" } else { "thin_shell" };
    let method_text: String = raw.get("method", default_method.to_string())?;
    let method: Method = method_text.parse().map_err(|_| bad("method", "must be tracer or thin_shell"))?;
    if method == Method::Tracer && n != 2 {
        return Err(bad("method", "tracer needs nvars = 2"));
    }
    let default_budget = if method == Method::Tracer { 200 } else { 20_000 };
    let field_text: String = raw.get("field", "chi".to_string())?;
    let field = match field_text.as_str() {
        "chi" => FieldKind::Chi,
        "xi" => FieldKind::Xi,
        _ => return Err(bad("field", "must be chi or xi")),
    };

    let cfg = ExperimentConfig {
        family_label,
        command,
        seed,
        out,
        tmin: raw.get("tmin", 0.5)?,
        tmax: raw.get("tmax", 4.0)?,
        steps: raw.get("steps", 30)?,
        method,
        budget: raw.get("budget", default_budget)?,
        ball_radius: raw.get("ball_radius", 10.0)?,
        k_sigma: raw.get("k_sigma", curv::DEFAULT_K_SIGMA)?,
        c: raw.get("c", 1.0)?,
        epsilon: raw.get("epsilon", 0.1)?,
        radii: raw.list("radii")?.unwrap_or_else(|| vec![10.0, 30.0, 100.0, 300.0, 1000.0]),
        restarts: raw.get("restarts", 50)?,
        r_min: raw.get("r_min", 10.0)?,
        cloud_budget: raw.get("cloud_budget", 2000)?,
        grid_h: raw.get("grid_h", 0.1)?,
        start: raw.list("start")?,
        s: raw.get("s", 0.5)?,
        tol: raw.get("tol", flow::DEFAULT_TOL)?,
        field,
        draws: raw.get("draws", 1000)?,
        box_radius: raw.get("box_radius", 10.0)?,
        canonical: String::new(),
        family,
    };
    validate(&cfg)?;
    let mut cfg = cfg;
    cfg.canonical = canonical(&cfg);
    Ok(cfg)
}

fn validate(c: &ExperimentConfig) -> Result<(), CliError> {
    let n = c.family.n();
    let finite = |k: &str, v: f64| if v.is_finite() { Ok(()) } else { Err(bad(k, "must be finite")) };
    for (k, v) in [("tmin", c.tmin), ("tmax", c.tmax), ("c", c.c), ("s", c.s)] {
        finite(k, v)?;
    }
    let parts = c.command.parts();
    let uses = |cmd: Command| parts.contains(&cmd);
    if uses(Command::Profile) || uses(Command::Crofton) {
        if !(c.tmax > c.tmin) {
            return Err(bad("tmax", "must exceed tmin"));
        }
        if c.steps < 2 {
            return Err(bad("steps", "must be at least 2"));
        }
    }
    if uses(Command::Profile) {
        if c.budget == 0 {
            return Err(bad("budget", "must be positive"));
        }
        if !(c.ball_radius > 0.0) {
            return Err(bad("ball_radius", "must be positive"));
        }
        if !(c.k_sigma > 0.0) {
            return Err(bad("k_sigma", "must be positive"));
        }
    }
    if uses(Command::Acv) || uses(Command::Spherical) || uses(Command::Cloud) {
        if !(c.epsilon > 0.0) {
            return Err(bad("epsilon", "must be positive"));
        }
    }
    if uses(Command::Acv) || uses(Command::Spherical) {
        if c.radii.is_empty() || c.radii.iter().any(|r| !(*r > 0.0)) || c.radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("radii", "must be positive and increasing"));
        }
        if c.restarts == 0 {
            return Err(bad("restarts", "must be positive"));
        }
    }
    if uses(Command::Cloud) {
        if !(c.r_min > 0.0) || !(c.grid_h > 0.0) || c.cloud_budget == 0 {
            return Err(bad("r_min", "grid_h and cloud_budget must be positive"));
        }
    }
    if uses(Command::Flow) {
        if !(c.tol > 0.0) {
            return Err(bad("tol", "must be positive"));
        }
        if let Some(st) = &c.start {
            if st.len() != n + 1 {
                return Err(bad("start", &format!("needs {} numbers (x1..x{n}, t)", n + 1)));
            }
        }
    }
    if uses(Command::Crofton) {
        if !(2..=3).contains(&n) {
            return Err(bad("family", "crofton needs nvars 2 or 3"));
        }
        if c.family.function_part().is_none() {
            return Err(bad("family", "crofton needs the form F = f(x) - t"));
        }
        if c.draws == 0 || !(c.box_radius > 0.0) {
            return Err(bad("draws", "and box_radius must be positive"));
        }
    }
    Ok(())
}

fn canonical(c: &ExperimentConfig) -> String {
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    let mut s = String::new();
    let _ = writeln!(s, "family = {}", c.family.poly());
    let _ = writeln!(s, "nvars = {}", c.family.n());
    let _ = writeln!(s, "command = {}", json_name(&c.command));
    let _ = writeln!(s, "seed = {}", c.seed);
    let _ = writeln!(s, "tmin = {:?}\ntmax = {:?}\nsteps = {}", c.tmin, c.tmax, c.steps);
    let _ = writeln!(s, "method = {}", json_name(&c.method));
    let _ = writeln!(s, "budget = {}\nball_radius = {:?}\nk_sigma = {:?}", c.budget, c.ball_radius, c.k_sigma);
    let _ = writeln!(s, "c = {:?}\nepsilon = {:?}\nradii = {}", c.c, c.epsilon, list(&c.radii));
    let _ = writeln!(s, "restarts = {}\nr_min = {:?}\ncloud_budget = {}\ngrid_h = {:?}", c.restarts, c.r_min, c.cloud_budget, c.grid_h);
    let _ = writeln!(s, "start = {}", c.start.as_deref().map(list).unwrap_or_default());
    let _ = writeln!(s, "s = {:?}\ntol = {:?}\nfield = {}", c.s, c.tol, json_name(&c.field));
    let _ = writeln!(s, "draws = {}\nbox_radius = {:?}", c.draws, c.box_radius);
    s
}

fn json_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    config_hash: String,
    seed: u64,
    family: &'a str,
    command: Command,
    workers: usize,
    artifacts: Vec<String>,
    errors: Vec<String>,
    finished_unix: u64,
}

/// Result of a run: written artifacts and per-part errors.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub artifacts: Vec<PathBuf>,
    pub errors: Vec<String>,
}

fn write_artifact(dir: &Path, name: &str, body: &str, summary: &mut RunSummary) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, body)?;
    summary.artifacts.push(path);
    Ok(())
}

fn runtime(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn run_part(cfg: &ExperimentConfig, part: Command, dir: &Path, summary: &mut RunSummary) -> Result<(), CliError> {
    let fam = &cfg.family;
    let outcome: std::result::Result<(), String> = match part {
        Command::Profile => (|| {
            let cc = cfg.curvature();
            let mut prof = curv::profile(fam, cfg.tmin, cfg.tmax, cfg.steps, &cc).map_err(runtime)?;
            let rerun = curv::reevaluator(fam, cc);
            let intervals = curv::detect_discontinuities(&prof, cfg.k_sigma, &rerun);
            prof.mark_discontinuities(&intervals);
            write_artifact(dir, "profile.csv", &prof.to_csv(), summary).map_err(runtime)?;
            let body = serde_json::to_string_pretty(&serde_json::json!({
                "k0": prof.k0,
                "discontinuities": intervals,
            }))
            .map_err(runtime)?;
            write_artifact(dir, "profile_events.json", &body, summary).map_err(runtime)
        })(),
        Command::Acv => malgrange_profile(fam, cfg.c, cfg.epsilon, &cfg.radii, cfg.restarts, cfg.seed)
            .map_err(runtime)
            .and_then(|r| write_artifact(dir, "acv.json", &r.to_json(), summary).map_err(runtime)),
        Command::Spherical => sphericalness_report(fam, cfg.c, cfg.epsilon, &cfg.radii, cfg.restarts, cfg.seed)
            .map_err(runtime)
            .and_then(|r| write_artifact(dir, "spherical.json", &r.to_json(), summary).map_err(runtime)),
        Command::Cloud => limit_normal_cloud(fam, cfg.c, cfg.epsilon, cfg.r_min, cfg.cloud_budget, cfg.seed, cfg.grid_h)
            .map_err(runtime)
            .and_then(|cl| {
                write_artifact(dir, "cloud.csv", &cl.to_csv(), summary).map_err(runtime)?;
                let body = serde_json::to_string_pretty(&serde_json::json!({
                    "pairs": cl.pairs.len(),
                    "occupancy": cl.occupancy,
                    "grid_h": cl.grid_h,
                    "defect": cl.defect(),
                    "vacuous": cl.is_vacuous(),
                }))
                .map_err(runtime)?;
                write_artifact(dir, "cloud_summary.json", &body, summary).map_err(runtime)
            }),
        Command::Flow => (|| {
            let p = match &cfg.start {
                Some(z) => crate::poly::Point::from_full(z),
                None => {
                    let mut x0 = vec![0.0; fam.n()];
                    x0[0] = 1.0;
                    newton_project(fam, &x0, cfg.c).map_err(runtime)?
                }
            };
            let sp = flow::start_at(fam, p.x, p.t).map_err(runtime)?;
            let res = match cfg.field {
                FieldKind::Chi => flow::transport(fam, &sp, cfg.s, cfg.tol),
                FieldKind::Xi => flow::xi_transport(fam, &sp, cfg.s, cfg.tol),
            };
            match res {
                Ok(traj) => write_artifact(dir, "flow.csv", &traj.to_csv(), summary).map_err(runtime),
                Err(fail) => {
                    write_artifact(dir, "flow.csv", &fail.partial.to_csv(), summary).map_err(runtime)?;
                    Err(fail.to_string())
                }
            }
        })(),
        Command::Crofton => (|| {
            let f = fam.function_part().ok_or_else(|| "crofton needs F = f(x) - t".to_string())?;
            let tgrid = curv::linspace(cfg.tmin, cfg.tmax, cfg.steps);
            let r = average_euler(&f, &tgrid, cfg.draws, cfg.box_radius, cfg.seed).map_err(runtime)?;
            write_artifact(dir, "crofton.csv", &r.to_csv(), summary).map_err(runtime)
        })(),
        Command::All => unreachable!("expanded by the caller"),
    };
    if let Err(e) = outcome {
        summary.errors.push(format!("{}: {e}", json_name(&part)));
    }
    Ok(())
}

/// Runs an experiment on the current rayon pool and writes its artifacts.
pub fn run(cfg: &ExperimentConfig, workers: usize) -> Result<RunSummary, CliError> {
    std::fs::create_dir_all(&cfg.out)?;
    let mut summary = RunSummary::default();
    for part in cfg.command.parts() {
        run_part(cfg, part, &cfg.out, &mut summary)?;
    }
    let manifest = Manifest {
        version: VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        family: &cfg.family_label,
        command: cfg.command,
        workers,
        artifacts: summary
            .artifacts
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
        errors: summary.errors.clone(),
        finished_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_artifact(&cfg.out, "manifest.json", &body, &mut summary)?;
    Ok(summary)
}

/// Runs `cfg` on a pool of `workers` threads (`0` = rayon default).
pub fn run_with_workers(cfg: &ExperimentConfig, workers: usize) -> Result<RunSummary, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let used = pool.current_num_threads();
    pool.install(|| run(cfg, used))
}

/// Reads and validates a config file.
pub fn load_config(path: &Path, ov: &Overrides) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text, ov)
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
