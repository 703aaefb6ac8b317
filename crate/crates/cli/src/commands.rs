use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, ValueEnum};
use flowfield::{
    run_with, simulate, ConfigSummary, Domain, EngineConfig, Locations, RbfKernel, RhoMode, SimConfig, VectorField,
};
use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{
    bounding_box, load_frames, read_assignments, read_field, write_assignments, write_field, write_frames,
    write_matrix, AssignmentRow, FieldRow, Normalization,
};
use crate::score::{adjusted_rand_index, majority_mapping, rmse};

/// Grid resolution `NxM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("grid must look like 20x20, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
        match (parse(a), parse(b)) {
            (Some(nx), Some(ny)) => Ok(Grid { nx, ny }),
            _ => Err(format!("grid sizes must be positive integers, got `{s}`")),
        }
    }
}

/// `lo,hi` for a square or `x0,x1,y0,y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainArg(pub Domain);

impl FromStr for DomainArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let vals = s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("domain `{s}`: {e}"))?;
        let domain = match vals[..] {
            [lo, hi] => Domain::square(lo, hi),
            [x0, x1, y0, y1] => Domain {
                lo: [x0, y0],
                hi: [x1, y1],
            },
            _ => return Err(format!("domain must be `lo,hi` or `x0,x1,y0,y1`, got `{s}`")),
        };
        if !domain.is_valid() {
            return Err(format!("domain `{s}` is empty"));
        }
        Ok(DomainArg(domain))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RhoModeArg {
    Frozen,
    AppendixFaithful,
}

impl From<RhoModeArg> for RhoMode {
    fn from(m: RhoModeArg) -> Self {
        match m {
            RhoModeArg::Frozen => RhoMode::Frozen,
            RhoModeArg::AppendixFaithful => RhoMode::AppendixFaithful,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Output directory; receives frames.csv and truth.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub k_true: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Poisson rate of points per frame.
    #[arg(long, default_value_t = 100.0)]
    pub mean_points: f64,
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    #[arg(long, default_value = "-2,2")]
    pub domain: DomainArg,
    /// Symmetric Dirichlet concentration of the transition rows.
    #[arg(long, default_value_t = 1.0)]
    pub conc: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    /// 1-based, one per frame.
    pub states: Vec<usize>,
    pub frame_times: Vec<usize>,
    pub transition: Vec<Vec<f64>>,
    pub field_ids: Vec<String>,
    pub config: SimConfig,
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<TruthFile> {
    let cfg = SimConfig {
        k_true: args.k_true,
        steps: args.steps,
        mean_points: args.mean_points,
        noise_sd: args.noise_sd,
        domain: args.domain.0,
        dirichlet_conc: args.conc,
        seed: args.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let sim = simulate(&cfg)?;
    create_dir(&args.out)?;
    let frames_path = args.out.join("frames.csv");
    write_frames(BufWriter::new(create(&frames_path)?), &sim.frames).map_err(|e| CliError::io(&frames_path, e))?;
    let k = sim.true_transition.nrows();
    let truth = TruthFile {
        states: sim.true_states.iter().map(|s| s + 1).collect(),
        frame_times: sim.frames.iter().map(|f| f.t).collect(),
        transition: (0..k).map(|i| sim.true_transition.row(i).iter().copied().collect()).collect(),
        field_ids: sim.fields.iter().map(|f| f.name().to_string()).collect(),
        config: cfg,
    };
    write_json(&args.out.join("truth.json"), &truth)?;
    info!("wrote {} frames to {}", sim.frames.len(), frames_path.display());
    Ok(truth)
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Frame file with header `t,z1,...,zp,v1,...,vd`.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Observation noise standard deviation σ.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Kernel standard deviation σ0 (the kernel variance is σ0²).
    #[arg(long, default_value_t = 1.0)]
    pub sigma0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lengthscale: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub rho_init: f64,
    #[arg(long, value_enum, default_value = "frozen")]
    pub rho_mode: RhoModeArg,
    /// Field export grid over the data bounding box.
    #[arg(long, default_value = "20x20")]
    pub grid: Grid,
    /// Horizon of the second exported transition matrix.
    #[arg(long, default_value_t = 20)]
    pub kstep: usize,
    /// Maximum retained points per cluster; oldest frames are dropped beyond it.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Worker threads for cluster scoring (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Map spatial coordinates onto the unit box before fitting.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputSummary {
    pub path: String,
    pub sha256: String,
    pub frames: usize,
    pub points: usize,
    pub p: usize,
    pub d: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingSummary {
    pub steps: usize,
    pub total_seconds: f64,
    pub mean_seconds: f64,
    pub median_seconds: f64,
    pub max_seconds: f64,
}

impl TimingSummary {
    fn from_durations(mut d: Vec<f64>) -> Self {
        let total: f64 = d.iter().sum();
        d.sort_by(f64::total_cmp);
        let n = d.len();
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => d[n / 2],
            _ => 0.5 * (d[n / 2 - 1] + d[n / 2]),
        };
        Self {
            steps: n,
            total_seconds: total,
            mean_seconds: if n > 0 { total / n as f64 } else { 0.0 },
            median_seconds: median,
            max_seconds: d.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ConfigSummary,
    pub grid: Grid,
    pub kstep: usize,
    pub threads: Option<usize>,
    pub input: InputSummary,
    /// Affine map applied to the input coordinates, if any.
    pub normalization: Option<Normalization>,
    pub k_found: usize,
    pub total_loglik: f64,
    pub wall_time_seconds: f64,
    pub step_timing: TimingSummary,
    pub degenerate_evaluations: usize,
    /// 1-based states whose transition rows were set uniform for lack of data.
    pub uniform_rows: Vec<usize>,
    pub field_files: Vec<String>,
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<RunManifest> {
    let start = Instant::now();
    if args.kstep == 0 {
        return Err(CliError::Usage("--kstep must be ≥ 1".into()));
    }
    if args.threads == Some(0) {
        return Err(CliError::Usage("--threads must be ≥ 1".into()));
    }
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::Usage(format!("--{name} must be positive, got {v}")))
        }
    };
    let sigma = positive("sigma", args.sigma)?;
    let sigma0 = positive("sigma0", args.sigma0)?;
    let kernel = RbfKernel::new(sigma0 * sigma0, args.lengthscale).map_err(|e| CliError::Usage(e.to_string()))?;

    let mut ingested = load_frames(&args.input, None)?;
    let schema = ingested.schema;
    let normalization = if args.normalize {
        let norm = Normalization::fit(&ingested.frames).expect("ingest yields at least one frame");
        norm.apply(&mut ingested.frames);
        Some(norm)
    } else {
        None
    };
    let frames = ingested.frames;

    let config = EngineConfig {
        alpha: args.alpha,
        gamma: args.gamma,
        sigma_sq: sigma * sigma,
        kernel,
        rho_init: args.rho_init,
        rho_mode: args.rho_mode.into(),
        cluster_point_cap: args.cap,
        d: schema.d,
        p: schema.p,
        parallel: true,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let summary = ConfigSummary::from(&config);
    let mrgp = config.mrgp()?;

    let mut durations = Vec::with_capacity(frames.len());
    let mut last = Instant::now();
    let total = frames.len();
    let fit_run = || {
        run_with(config, &frames, |i, decision| {
            let now = Instant::now();
            durations.push((now - last).as_secs_f64());
            last = now;
            if let Some(d) = decision {
                if d.is_new {
                    info!("step {}/{total}: new state {}", i + 1, d.state + 1);
                }
            }
        })
    };
    let fit = match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?
            .install(fit_run),
        None => fit_run(),
    }?;

    create_dir(&args.out)?;
    let rows: Vec<AssignmentRow> = fit
        .assignments
        .iter()
        .map(|a| AssignmentRow {
            t: a.t,
            state: a.state + 1,
            oracle: u8::from(a.oracle),
            step_loglik: a.loglik,
        })
        .collect();
    let path = args.out.join("assignments.csv");
    write_assignments(BufWriter::new(create(&path)?), &rows)?;

    let one = &fit.transition;
    let k_step = fit.counts.empirical_transition(args.kstep);
    for (steps, tm) in [(1, one), (args.kstep, &k_step)] {
        let path = args.out.join(format!("transition_{steps}.csv"));
        write_matrix(BufWriter::new(create(&path)?), &tm.matrix).map_err(|e| CliError::io(&path, e))?;
    }

    let mut field_files = Vec::new();
    if schema.p == 2 {
        let (lo, hi) = bounding_box(&frames).expect("non-empty input");
        let domain = Domain {
            lo: [lo[0], lo[1]],
            hi: [hi[0], hi[1]],
        };
        let points = domain.grid(args.grid.nx, args.grid.ny);
        let query = Locations::from_points(2, &points)?;
        for (j, cluster) in fit.clusters.iter().enumerate().filter(|(_, c)| !c.is_empty()) {
            let est = mrgp.posterior_field(cluster, &query, false)?;
            let sd = est.marginal_sd();
            let rows: Vec<FieldRow> = points
                .iter()
                .enumerate()
                .map(|(i, z)| FieldRow {
                    z: z.to_vec(),
                    mean: est.mean.row(i).iter().copied().collect(),
                    sd: sd.row(i).iter().copied().collect(),
                })
                .collect();
            let name = format!("field_{}.csv", j + 1);
            let path = args.out.join(&name);
            write_field(BufWriter::new(create(&path)?), schema, &rows).map_err(|e| CliError::io(&path, e))?;
            field_files.push(name);
        }
    } else {
        warn!("field export needs two spatial dimensions, input has {}; skipped", schema.p);
    }

    let manifest = RunManifest {
        config: summary,
        grid: args.grid,
        kstep: args.kstep,
        threads: args.threads,
        input: InputSummary {
            path: args.input.display().to_string(),
            sha256: ingested.sha256,
            frames: frames.len(),
            points: frames.iter().map(|f| f.len()).sum(),
            p: schema.p,
            d: schema.d,
        },
        normalization,
        k_found: fit.k_found,
        total_loglik: fit.total_loglik,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        step_timing: TimingSummary::from_durations(durations),
        degenerate_evaluations: fit.degenerate_evaluations,
        uniform_rows: one.uniform_rows.iter().map(|s| s + 1).collect(),
        field_files,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    info!(
        "k_found {} total loglik {:.3} in {:.2}s",
        manifest.k_found, manifest.total_loglik, manifest.wall_time_seconds
    );
    Ok(manifest)
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Output directory of a previous `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// truth.json written by `simulate`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Report path (default: <fit>/eval.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldScore {
    pub cluster: usize,
    pub mapped_field: String,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub steps: usize,
    pub k_found: usize,
    pub k_true: usize,
    pub k_true_visited: usize,
    pub ari: f64,
    pub fields: Vec<FieldScore>,
    pub mean_field_rmse: Option<f64>,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let path = args.fit.join("assignments.csv");
    let rows = read_assignments(File::open(&path).map_err(|e| CliError::io(&path, e))?, &path.display().to_string())?;
    let truth: TruthFile = read_json(&args.truth)?;
    let manifest: RunManifest = read_json(&args.fit.join("manifest.json"))?;
    if rows.len() != truth.states.len() {
        return Err(CliError::Data(format!(
            "assignments have {} steps, truth has {}",
            rows.len(),
            truth.states.len()
        )));
    }
    let fitted: Vec<usize> = rows.iter().map(|r| r.state).collect();
    let ari = adjusted_rand_index(&fitted, &truth.states);
    let mapping = majority_mapping(&fitted, &truth.states);
    let mut visited = truth.states.clone();
    visited.sort_unstable();
    visited.dedup();

    let mut fields = Vec::new();
    for name in &manifest.field_files {
        let cluster: usize = name
            .trim_start_matches("field_")
            .trim_end_matches(".csv")
            .parse()
            .map_err(|_| CliError::Data(format!("unexpected field file name {name}")))?;
        let Some(&true_state) = mapping.get(&cluster) else {
            continue;
        };
        let field_name = &truth.field_ids[true_state - 1];
        let Some(field) = VectorField::from_name(field_name) else {
            warn!("unknown field id {field_name}; not scored");
            continue;
        };
        let path = args.fit.join(name);
        let (_, grid) = read_field(File::open(&path).map_err(|e| CliError::io(&path, e))?, &path.display().to_string())?;
        let want: Vec<Vec<f64>> = grid
            .iter()
            .map(|r| {
                let z = match &manifest.normalization {
                    Some(n) => n.invert(&r.z),
                    None => r.z.clone(),
                };
                field.eval(z[0], z[1]).to_vec()
            })
            .collect();
        let got: Vec<Vec<f64>> = grid.iter().map(|r| r.mean.clone()).collect();
        fields.push(FieldScore {
            cluster,
            mapped_field: field_name.clone(),
            rmse: rmse(&got, &want),
        });
    }
    let mean_field_rmse = (!fields.is_empty()).then(|| fields.iter().map(|f| f.rmse).sum::<f64>() / fields.len() as f64);
    let report = EvalReport {
        steps: rows.len(),
        k_found: manifest.k_found,
        k_true: truth.field_ids.len(),
        k_true_visited: visited.len(),
        ari,
        fields,
        mean_field_rmse,
    };
    let out = args.out.clone().unwrap_or_else(|| args.fit.join("eval.json"));
    write_json(&out, &report)?;
    Ok(report)
}

/// Reads `transition_<steps>.csv` from a fit directory.
pub fn load_transition(dir: &Path, steps: usize) -> CliResult<DMatrix<f64>> {
    let path = dir.join(format!("transition_{steps}.csv"));
    crate::io::read_matrix(File::open(&path).map_err(|e| CliError::io(&path, e))?, &path.display().to_string())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create(path: &Path) -> CliResult<File> {
    File::create(path).map_err(|e| CliError::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let file = create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)
        .map_err(|e| CliError::io(path, std::io::Error::other(e)))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<D> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
