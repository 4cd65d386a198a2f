//! `moesim`: run single layers, strategy comparisons, ablations, design-space
//! sweeps and array-size scaling, writing CSV artifacts to an output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chiplet_moe_sim::analysis::{
    hydra_history, run_end_to_end, run_work, simulate_layer, write_report_csv, E2eParams,
    ReportRow, RunOptions, SimReport,
};
use chiplet_moe_sim::baselines::{hydra_place, EpPlacement};
use chiplet_moe_sim::dse::{
    dse_sweep, scalability_run, write_dse_csv, write_scalability_csv, DseConstraints, DseGrid,
    SweepSpec,
};
use chiplet_moe_sim::engine::LayerResult;
use chiplet_moe_sim::scheduler::{schedule_dump, schedule_layer, LayerWork};
use chiplet_moe_sim::topology::Mesh;
use chiplet_moe_sim::workload::ingest_trace;
use chiplet_moe_sim::{
    generate_gating, validate_configs, ConfigError, EngineMode, HardwareConfig, ModelConfig,
    SimError, Strategy, TraceError, WorkloadParams,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "moesim",
    version,
    about = "Low-batch MoE inference simulator for multi-chiplet packages"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy and write report.csv, timeline.csv and schedule.txt.
    Simulate(SimulateArgs),
    /// Run several strategies on the same workload and write report.csv with ratio columns.
    Compare(CompareArgs),
    /// Run ablation levels a1..a5 end to end and write report.csv.
    Ablate(AblateArgs),
    /// Sweep buffer size, DDR bandwidth, D2D bandwidth and micro-slice count; write dse.csv.
    Sweep(SweepArgs),
    /// Run strategies on several mesh sizes and write scalability.csv.
    Scale(ScaleArgs),
    /// Generate a gating trace and write trace.csv.
    GenTrace(GenTraceArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Hardware config file (JSON). Defaults to the built-in 2x2 test chip.
    #[arg(long, value_name = "FILE")]
    hw: Option<PathBuf>,
    /// Model config file (JSON). Defaults to the built-in qwen3-a3b shapes.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Workload config file (JSON). Defaults to a long-tail workload (skew 1.2).
    #[arg(long, value_name = "FILE")]
    workload: Option<PathBuf>,
    /// Tokens per iteration, overriding the workload file.
    #[arg(long)]
    tokens: Option<usize>,
    /// Zipf skew of expert popularity, overriding the workload file.
    #[arg(long)]
    skew: Option<f64>,
    /// Requests per iteration, overriding the workload file.
    #[arg(long)]
    requests: Option<usize>,
    /// Micro-slices per expert, overriding the model file.
    #[arg(long, value_name = "M")]
    micro_slices: Option<usize>,
    /// Number of layers, overriding the model file.
    #[arg(long)]
    layers: Option<usize>,
    /// Seed of every random choice; multi-seed commands use seed, seed+1, ...
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, env = "MOESIM_OUT_DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads for multi-run commands (0 = all cores). Output does not depend on it.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args, Clone, Default)]
struct EngineFlags {
    /// Disable eager micro-slice usage.
    #[arg(long)]
    no_eager: bool,
    /// Disable DDR/D2D flow fusion.
    #[arg(long)]
    no_fusion: bool,
    /// Target DDR loads at the trajectory member with the most free buffer.
    #[arg(long)]
    rule5: bool,
    /// Dispatch an expert group only when its whole trajectory is idle.
    #[arg(long)]
    strict_dispatch: bool,
    /// Token-buffering slack in percent (0 disables buffering).
    #[arg(long, value_name = "PCT")]
    slack: Option<u32>,
    /// Window of the utilization variance column, in microseconds.
    #[arg(long, default_value_t = 100.0)]
    window_us: f64,
}

#[derive(Args, Clone)]
struct E2eFlags {
    /// Run multi-iteration inference with an attention stage instead of one MoE layer.
    #[arg(long)]
    e2e: bool,
    /// Forward iterations of an end-to-end run.
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    /// Context tokens held by every request before its first pass.
    #[arg(long, default_value_t = 128)]
    initial_context: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineFlags,
    #[command(flatten)]
    e2e: E2eFlags,
    /// fsedp-naive, fsedp, fsedp-paired, fsedp-rule5, fsedp-buffered, ep, hydra or a1..a5.
    #[arg(long, default_value = "fsedp-paired")]
    strategy: Strategy,
    /// MoE layer simulated in single-layer mode.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Replay a gating trace file instead of generating one.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineFlags,
    #[command(flatten)]
    e2e: E2eFlags,
    /// Comma-separated strategies; ratios are taken against the first.
    #[arg(long, value_delimiter = ',', default_value = "fsedp-paired,ep")]
    strategies: Vec<Strategy>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated ablation levels.
    #[arg(long, value_delimiter = ',', default_value = "a1,a2,a3,a4,a5")]
    levels: Vec<Strategy>,
    /// Token-buffering slack of level a5, in percent.
    #[arg(long, default_value_t = 20)]
    slack: u32,
    /// Window of the utilization variance column, in microseconds.
    #[arg(long, default_value_t = 100.0)]
    window_us: f64,
    /// Forward iterations per level.
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    /// Context tokens held by every request before its first pass.
    #[arg(long, default_value_t = 128)]
    initial_context: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineFlags,
    #[command(flatten)]
    e2e: E2eFlags,
    #[arg(long, default_value = "fsedp-paired")]
    strategy: Strategy,
    /// Seeds per grid point.
    #[arg(long, default_value_t = 16)]
    seeds: u64,
    /// Buffer sizes per chiplet, MiB.
    #[arg(long, value_delimiter = ',')]
    buffer_mib: Vec<f64>,
    /// DDR bandwidths per channel, GB/s.
    #[arg(long, value_delimiter = ',')]
    ddr_gbps: Vec<f64>,
    /// D2D link bandwidths, GB/s.
    #[arg(long, value_delimiter = ',')]
    d2d_gbps: Vec<f64>,
    /// Micro-slice counts.
    #[arg(long, value_delimiter = ',', value_name = "M")]
    m_values: Vec<usize>,
    /// Area/power coefficient file (JSON). Defaults to the built-in coefficients.
    #[arg(long, value_name = "FILE")]
    constraints: Option<PathBuf>,
}

#[derive(Args)]
struct ScaleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    e2e: E2eFlags,
    /// Comma-separated mesh sizes `RxC`; the drop column is relative to the first.
    #[arg(long, value_delimiter = ',', default_value = "2x2,3x3,4x4")]
    grids: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "fsedp-paired,ep")]
    strategies: Vec<Strategy>,
    /// Seeds per (grid, strategy).
    #[arg(long, default_value_t = 16)]
    seeds: u64,
}

#[derive(Args)]
struct GenTraceArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(String),
    Sim(SimError),
    Io(PathBuf, std::io::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Sim(_) => 4,
            CliError::Io(..) => 1,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Config(m) => ("config", m.clone()),
            CliError::Sim(e) => ("simulation", e.to_string()),
            CliError::Io(p, e) => ("io", format!("{}: {e}", p.display())),
        };
        let msg: Vec<&str> = msg.split_whitespace().collect();
        format!("moesim: error[{kind}]: {}", msg.join(" "))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Sim(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Setup {
    hw: HardwareConfig,
    model: ModelConfig,
    workload: WorkloadParams,
}

fn load_setup(c: &Common) -> Result<Setup> {
    let hw = match &c.hw {
        Some(p) => HardwareConfig::load(p)?,
        None => HardwareConfig::test_chip(),
    };
    let mut model = match &c.model {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::qwen3_a3b(),
    };
    if let Some(m) = c.micro_slices {
        model.micro_slices_per_expert = m;
    }
    if let Some(l) = c.layers {
        model.num_layers = l;
    }
    let (hw, model) = validate_configs(&hw, &model).map_err(|e| match (&c.hw, &c.model) {
        (None, None) => CliError::from(e),
        _ => CliError::Config(format!("{} ({})", e, config_files(c))),
    })?;
    let mut workload = match &c.workload {
        Some(p) => load_json::<WorkloadParams>(p)?,
        None => WorkloadParams::long_tail(c.tokens.unwrap_or(64), c.seed),
    };
    if let Some(t) = c.tokens {
        workload.tokens_per_iteration = t;
    }
    if let Some(s) = c.skew {
        workload.skew = s;
    }
    if let Some(r) = c.requests {
        workload.num_requests = r;
    } else if c.workload.is_none() {
        workload.num_requests = workload
            .num_requests
            .min(workload.tokens_per_iteration.max(1));
    }
    workload.seed = c.seed;
    workload.validate().map_err(|e| match &c.workload {
        Some(p) => CliError::Config(format!("{}: {e}", p.display())),
        None => CliError::Config(format!("workload: {e}")),
    })?;
    Ok(Setup {
        hw,
        model,
        workload,
    })
}

fn config_files(c: &Common) -> String {
    [&c.hw, &c.model]
        .into_iter()
        .flatten()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("cannot parse config {}: {e}", path.display())))
}

fn options(strategy: Strategy, f: &EngineFlags) -> Result<RunOptions> {
    let mut opts = RunOptions {
        slack_pct: f.slack,
        ..RunOptions::default()
    };
    if let Some(base) = strategy.engine_mode() {
        let mode = EngineMode {
            eager: base.eager && !f.no_eager,
            fusion: base.fusion && !f.no_fusion,
            rule5: base.rule5 || f.rule5,
            strict_dispatch: base.strict_dispatch || f.strict_dispatch,
            ..base
        };
        mode.validate()
            .map_err(|e| CliError::Usage(format!("{strategy}: {e}")))?;
        if mode != base {
            opts.mode = Some(mode);
        }
    }
    Ok(opts)
}

fn e2e_params(f: &E2eFlags) -> Option<E2eParams> {
    f.e2e.then_some(E2eParams {
        iterations: f.iterations,
        initial_context: f.initial_context,
    })
}

fn window_s(us: f64) -> Result<f64> {
    if us.is_finite() && us > 0.0 {
        Ok(us * 1e-6)
    } else {
        Err(CliError::Usage("--window-us must be positive".into()))
    }
}

fn seeds(first: u64, n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    Ok((first..first + n).collect())
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

fn write_file(
    dir: &Path,
    name: &str,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<PathBuf> {
    let path = dir.join(name);
    let io = |e| CliError::Io(path.clone(), e);
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    f(&mut w).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(path)
}

fn run_one(
    s: &Setup,
    strategy: Strategy,
    opts: &RunOptions,
    e2e: Option<&E2eParams>,
) -> Result<(SimReport, Option<LayerResult>)> {
    match e2e {
        Some(e) => Ok((
            run_end_to_end(&s.workload, strategy, &s.hw, &s.model, e, opts)?,
            None,
        )),
        None => {
            let (rep, res) = simulate_layer(&s.workload, 0, strategy, &s.hw, &s.model, opts)?;
            Ok((rep, Some(res)))
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<Vec<PathBuf>> {
    let mut s = load_setup(&a.common)?;
    let opts = options(a.strategy, &a.engine)?;
    let window = window_s(a.engine.window_us)?;
    out_dir(&a.common.out)?;
    let mut written = Vec::new();
    if a.e2e.e2e {
        if a.trace.is_some() {
            return Err(CliError::Usage(
                "--trace replays a single layer and cannot be combined with --e2e".into(),
            ));
        }
        let (rep, _) = run_one(&s, a.strategy, &opts, e2e_params(&a.e2e).as_ref())?;
        let rows = [ReportRow {
            label: a.strategy.name().into(),
            report: rep,
            window_s: window,
        }];
        written.push(write_file(&a.common.out, "report.csv", |w| {
            write_report_csv(w, &rows)
        })?);
        return Ok(written);
    }
    s.model.num_layers = s.model.num_layers.max(a.layer + 1);
    let (work, hydra) = match &a.trace {
        Some(p) => {
            let trace =
                ingest_trace(p, &s.model, s.hw.num_chiplets()).map_err(|e| trace_error(p, e))?;
            if a.layer >= trace.num_layers() {
                return Err(CliError::Config(format!(
                    "{}: trace has {} layers, --layer {} requested",
                    p.display(),
                    trace.num_layers(),
                    a.layer
                )));
            }
            s.workload.tokens_per_iteration = trace.layers[a.layer].len();
            (LayerWork::from_trace(&trace, a.layer), None)
        }
        None => {
            let trace =
                chiplet_moe_sim::workload::generate_iteration(&s.workload, &s.model, &s.hw, 0);
            let stats = (a.strategy == Strategy::Hydra)
                .then(|| hydra_history(&s.workload, a.layer, &s.hw, &s.model, &opts));
            (LayerWork::from_trace(&trace, a.layer), stats)
        }
    };
    let res = run_work(
        &work,
        a.layer,
        a.strategy,
        &s.hw,
        &s.model,
        &opts,
        hydra.as_ref(),
    )?;
    let mut rep = SimReport::from_layer(a.strategy, &s.model, &s.workload, &res);
    rep.seed = a.common.seed;
    let rows = [ReportRow {
        label: a.strategy.name().into(),
        report: rep,
        window_s: window,
    }];
    written.push(write_file(&a.common.out, "report.csv", |w| {
        write_report_csv(w, &rows)
    })?);
    written.push(write_file(&a.common.out, "timeline.csv", |w| {
        res.write_timeline(w)
    })?);
    let c = s.hw.num_chiplets();
    let dump = match a.strategy {
        Strategy::Ep => EpPlacement::round_robin(s.model.num_experts, c).dump(c),
        Strategy::Hydra => match &hydra {
            Some(st) if st.observations > 0 => hydra_place(st, &s.hw, &s.model).dump(c),
            _ => EpPlacement::round_robin(s.model.num_experts, c).dump(c),
        },
        st => {
            let sched = schedule_layer(&work, a.layer, st.order_policy(), &[]);
            schedule_dump(
                &sched,
                &res.dispatch_log,
                &Mesh::new(s.hw.grid_rows, s.hw.grid_cols),
            )
        }
    };
    written.push(write_file(&a.common.out, "schedule.txt", |w| {
        w.write_all(dump.as_bytes())
    })?);
    Ok(written)
}

fn trace_error(p: &Path, e: TraceError) -> CliError {
    CliError::Config(format!("{}: {e}", p.display()))
}

fn compare(a: CompareArgs) -> Result<Vec<PathBuf>> {
    if a.strategies.len() < 2 {
        return Err(CliError::Usage(
            "compare needs at least two strategies".into(),
        ));
    }
    let s = load_setup(&a.common)?;
    let window = window_s(a.engine.window_us)?;
    let e2e = e2e_params(&a.e2e);
    let mut rows = Vec::new();
    for &st in &a.strategies {
        let opts = options(st, &a.engine)?;
        let (report, _) = run_one(&s, st, &opts, e2e.as_ref())?;
        rows.push(ReportRow {
            label: st.name().into(),
            report,
            window_s: window,
        });
    }
    out_dir(&a.common.out)?;
    Ok(vec![write_file(&a.common.out, "report.csv", |w| {
        write_report_csv(w, &rows)
    })?])
}

fn ablate(a: AblateArgs) -> Result<Vec<PathBuf>> {
    if let Some(bad) = a.levels.iter().find(|l| !l.is_fsedp()) {
        return Err(CliError::Usage(format!("`{bad}` is not an ablation level")));
    }
    let s = load_setup(&a.common)?;
    let window = window_s(a.window_us)?;
    let e2e = E2eParams {
        iterations: a.iterations,
        initial_context: a.initial_context,
    };
    let mut rows = Vec::new();
    for &lvl in &a.levels {
        let opts = RunOptions {
            slack_pct: Some(if lvl == Strategy::FsedpBuffered {
                a.slack
            } else {
                0
            }),
            ..RunOptions::default()
        };
        let report = run_end_to_end(&s.workload, lvl, &s.hw, &s.model, &e2e, &opts)?;
        rows.push(ReportRow {
            label: lvl.level().unwrap_or_default().into(),
            report,
            window_s: window,
        });
    }
    out_dir(&a.common.out)?;
    Ok(vec![write_file(&a.common.out, "report.csv", |w| {
        write_report_csv(w, &rows)
    })?])
}

fn sweep_spec(
    s: &Setup,
    strategy: Strategy,
    f: &EngineFlags,
    e: &E2eFlags,
    seeds: Vec<u64>,
) -> Result<SweepSpec> {
    Ok(SweepSpec {
        strategy,
        tokens_per_iteration: s.workload.tokens_per_iteration,
        skew: s.workload.skew,
        num_requests: s.workload.num_requests,
        seeds,
        e2e: e2e_params(e),
        options: options(strategy, f)?,
    })
}

fn axis<T: Copy>(given: &[T], default: T) -> Vec<T> {
    if given.is_empty() {
        vec![default]
    } else {
        given.to_vec()
    }
}

fn sweep(a: SweepArgs) -> Result<Vec<PathBuf>> {
    let s = load_setup(&a.common)?;
    let constraints = match &a.constraints {
        Some(p) => {
            let c: DseConstraints = load_json(p)?;
            c.validate()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            c
        }
        None => DseConstraints::default(),
    };
    let bad = |xs: &[f64]| xs.iter().any(|x| !(x.is_finite() && *x > 0.0));
    if bad(&a.buffer_mib) || bad(&a.ddr_gbps) || bad(&a.d2d_gbps) || a.m_values.contains(&0) {
        return Err(CliError::Usage("sweep axis values must be positive".into()));
    }
    let base = DseGrid::point(&s.hw, &s.model);
    let grid = DseGrid {
        buffer_bytes: if a.buffer_mib.is_empty() {
            base.buffer_bytes
        } else {
            a.buffer_mib
                .iter()
                .map(|m| (m * 1048576.0).round() as u64)
                .collect()
        },
        ddr_bw: if a.ddr_gbps.is_empty() {
            base.ddr_bw
        } else {
            a.ddr_gbps.iter().map(|g| g * 1e9).collect()
        },
        d2d_bw: if a.d2d_gbps.is_empty() {
            base.d2d_bw
        } else {
            a.d2d_gbps.iter().map(|g| g * 1e9).collect()
        },
        micro_slices: axis(&a.m_values, s.model.micro_slices_per_expert),
    };
    let spec = sweep_spec(
        &s,
        a.strategy,
        &a.engine,
        &a.e2e,
        seeds(a.common.seed, a.seeds)?,
    )?;
    let rows = dse_sweep(&grid, &s.hw, &s.model, &spec, &constraints, a.common.jobs);
    out_dir(&a.common.out)?;
    Ok(vec![write_file(&a.common.out, "dse.csv", |w| {
        write_dse_csv(w, &rows)
    })?])
}

fn parse_grid(g: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Usage(format!("bad grid `{g}` (expected RxC, e.g. 2x2)"));
    let (r, c) = g.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    let r: usize = r.parse().map_err(|_| bad())?;
    let c: usize = c.parse().map_err(|_| bad())?;
    if r == 0 || c == 0 || r * c > 64 {
        return Err(bad());
    }
    Ok((r, c))
}

fn scale(a: ScaleArgs) -> Result<Vec<PathBuf>> {
    let s = load_setup(&a.common)?;
    let grids = a
        .grids
        .iter()
        .map(|g| parse_grid(g))
        .collect::<Result<Vec<_>>>()?;
    if a.strategies.is_empty() {
        return Err(CliError::Usage("scale needs at least one strategy".into()));
    }
    for &(r, c) in &grids {
        validate_configs(&s.hw.with_grid(r, c), &s.model)?;
    }
    let spec = sweep_spec(
        &s,
        a.strategies[0],
        &EngineFlags::default(),
        &a.e2e,
        seeds(a.common.seed, a.seeds)?,
    )?;
    let rows = scalability_run(&grids, &a.strategies, &s.hw, &s.model, &spec, a.common.jobs)?;
    out_dir(&a.common.out)?;
    Ok(vec![write_file(&a.common.out, "scalability.csv", |w| {
        write_scalability_csv(w, &rows)
    })?])
}

fn gen_trace(a: GenTraceArgs) -> Result<Vec<PathBuf>> {
    let s = load_setup(&a.common)?;
    let trace = generate_gating(&s.workload, &s.model, &s.hw);
    out_dir(&a.common.out)?;
    Ok(vec![write_file(&a.common.out, "trace.csv", |w| {
        trace.export(w)
    })?])
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => compare(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep(a),
        Command::Scale(a) => scale(a),
        Command::GenTrace(a) => gen_trace(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail
                .lines()
                .next()
                .unwrap_or(&msg)
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}
