use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use btb_recon::gadget::{DEFAULT_ALIGNMENT_EXPONENT, DEFAULT_SIM_BASE};
use btb_recon::report::{self, MatrixFormat, DEFAULT_BUCKETS};
use btb_recon::sweep::{ingest_csv_path, run_sweeps, MatrixMetadata, Preset, CSV_BACKEND};
use btb_recon::{
    infer_all, Backend, BtbGeometry, GadgetSpec, InferenceConfig, MeasurementRecord, MissMatrix,
    NoiseModel, Replacement, Rounds, SweepGrid,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "btbrecon", version, about = "Branch target buffer geometry recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fill a miss-rate matrix from the simulator or a measured CSV.
    Sweep(SweepArgs),
    /// Infer BTB geometry from a matrix.
    Infer(InferArgs),
    /// Write aarch64 gadget assembly.
    Emit(EmitArgs),
    /// Print a matrix as an ASCII heatmap, CSV or gnuplot table.
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Sim,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Capacity,
    SetIndex,
    Both,
    /// sim: grid sized from the geometry; csv: every cell in the input.
    Auto,
}

impl PresetArg {
    fn preset(self) -> Option<Preset> {
        match self {
            PresetArg::Capacity => Some(Preset::Capacity),
            PresetArg::SetIndex => Some(Preset::SetIndex),
            PresetArg::Both => Some(Preset::Both),
            PresetArg::Auto => None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReplArg {
    Lru,
    Fifo,
    Random,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendKind,
    /// Measured `B,N,C` file (csv backend).
    #[arg(long = "in", value_name = "FILE")]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 2048)]
    sets: u64,
    #[arg(long, default_value_t = 2)]
    ways: u32,
    /// Lowest index bit, 0-based.
    #[arg(long, default_value_t = 4)]
    index_lo: u8,
    /// Highest tag bit, 0-based.
    #[arg(long)]
    tag_hi: Option<u8>,
    #[arg(long, value_enum, default_value = "lru")]
    repl: ReplArg,
    #[arg(long, value_enum, default_value = "both")]
    preset: PresetArg,
    #[arg(long, default_value_t = 0.0)]
    noise_lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    warmup: u32,
    #[arg(long, default_value_t = 1)]
    measure: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// Matrix in JSON (or CSV, by extension).
    #[arg(long)]
    matrix: PathBuf,
    /// Report JSON destination; the text report always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// InferenceConfig JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    theta_low: Option<f64>,
    #[arg(long)]
    delta_jump: Option<f64>,
    #[arg(long)]
    epsilon_similar: Option<f64>,
    #[arg(long)]
    theta_zero: Option<f64>,
    #[arg(long)]
    capacity_band: Option<f64>,
    #[arg(long)]
    min_significant_misses: Option<f64>,
}

#[derive(Args)]
struct EmitArgs {
    #[arg(long, requires = "n", conflicts_with = "preset")]
    b: Option<u64>,
    #[arg(long, requires = "b")]
    n: Option<u64>,
    /// Single-gadget destination; stdout when absent.
    #[arg(long, conflicts_with = "out_dir")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, requires = "out_dir")]
    preset: Option<PresetArg>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_u64, default_value_t = DEFAULT_SIM_BASE)]
    base: u64,
    #[arg(long, default_value_t = DEFAULT_ALIGNMENT_EXPONENT)]
    align: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum RenderFormat {
    Ascii,
    Csv,
    Plot,
    Json,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, value_enum, default_value = "ascii")]
    format: RenderFormat,
    /// Ascending bucket boundaries for the ASCII heatmap.
    #[arg(long, value_delimiter = ',')]
    buckets: Option<Vec<f64>>,
}

fn parse_u64(s: &str) -> std::result::Result<u64, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    r.map_err(|e| e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_matrix(path: &Path) -> Result<MissMatrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        report::import_matrix_csv(&text, MatrixMetadata::new(CSV_BACKEND, 10, 1))
    } else {
        MissMatrix::from_json(&text)
    };
    m.with_context(|| format!("parsing matrix {}", path.display()))
}

fn geometry(a: &SweepArgs) -> Result<BtbGeometry> {
    let mut g = BtbGeometry::with_sets(a.sets, a.ways, a.index_lo)?;
    if let Some(t) = a.tag_hi {
        g = g.with_tag_hi(t)?;
    }
    let repl = match a.repl {
        ReplArg::Lru => Replacement::Lru,
        ReplArg::Fifo => Replacement::Fifo,
        ReplArg::Random => Replacement::Random { seed: a.seed },
    };
    Ok(g.with_replacement(repl))
}

/// Every measured cell, averaged; cells never measured stay absent.
fn dataset_matrix(records: &[MeasurementRecord], rounds: Rounds) -> Result<MissMatrix> {
    let mut by_cell: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    for r in records {
        by_cell.entry((r.branch_count, r.stride)).or_default().push(r.miss_rate());
    }
    let mut bs: Vec<u64> = by_cell.keys().map(|k| k.0).collect();
    let mut ns: Vec<u64> = by_cell.keys().map(|k| k.1).collect();
    bs.sort_unstable();
    bs.dedup();
    ns.sort_unstable();
    ns.dedup();
    let meta = MatrixMetadata::new(CSV_BACKEND, rounds.warmup, rounds.measure);
    let mut m = MissMatrix::empty(meta, bs, ns)?;
    for ((b, n), v) in by_cell {
        m.set(b, n, Some(v.iter().sum::<f64>() / v.len() as f64))?;
    }
    Ok(m)
}

fn cmd_sweep(a: SweepArgs) -> Result<u8> {
    let rounds = Rounds { warmup: a.warmup, measure: a.measure };
    rounds.validate()?;
    let (backend, grids) = match a.backend {
        BackendKind::Sim => {
            if a.input.is_some() {
                bail!("--in applies only to --backend csv");
            }
            let g = geometry(&a)?;
            let noise = if a.noise_lambda == 0.0 {
                NoiseModel::Off
            } else {
                NoiseModel::Poisson { lambda: a.noise_lambda, seed: a.seed }
            };
            noise.validate()?;
            let grids = match a.preset.preset() {
                Some(p) => p.grids(),
                None => vec![SweepGrid::for_hypothesis(&g)?],
            };
            (Backend::Simulator { geometry: g, noise }, grids)
        }
        BackendKind::Csv => {
            let path = a.input.as_deref().context("--backend csv needs --in FILE")?;
            let ingest = ingest_csv_path(path).with_context(|| format!("reading {}", path.display()))?;
            for w in &ingest.warnings {
                eprintln!("warning: {w}");
            }
            match a.preset.preset() {
                Some(p) => (Backend::Dataset { records: ingest.records }, p.grids()),
                None => {
                    let m = dataset_matrix(&ingest.records, rounds)?;
                    write_file(&a.out, m.to_json()?.as_bytes())?;
                    return Ok(0);
                }
            }
        }
    };
    let grids = grids
        .into_iter()
        .map(|g| g.with_rounds(rounds))
        .collect::<btb_recon::Result<Vec<_>>>()?;
    let m = run_sweeps(&backend, &grids)?;
    write_file(&a.out, m.to_json()?.as_bytes())?;
    Ok(0)
}

fn inference_config(a: &InferArgs) -> Result<InferenceConfig> {
    let mut cfg: InferenceConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => InferenceConfig::default(),
    };
    let overrides = [
        (a.theta_low, &mut cfg.theta_low),
        (a.delta_jump, &mut cfg.delta_jump),
        (a.epsilon_similar, &mut cfg.epsilon_similar),
        (a.theta_zero, &mut cfg.theta_zero),
        (a.capacity_band, &mut cfg.capacity_band),
        (a.min_significant_misses, &mut cfg.min_significant_misses),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_infer(a: InferArgs) -> Result<u8> {
    let cfg = inference_config(&a)?;
    let m = load_matrix(&a.matrix)?;
    let r = infer_all(&m, &cfg)?;
    if let Some(out) = &a.out {
        write_file(out, r.to_json()?.as_bytes())?;
    }
    print!("{}", report::report_text(&r));
    Ok(if r.is_complete() { 0 } else { 2 })
}

fn gadget_text(spec: &GadgetSpec) -> Result<String> {
    if let Some(v) = spec.validate().first() {
        bail!("invalid gadget (B={}, N={}): {v}", spec.branch_count, spec.stride);
    }
    Ok(spec.emit_asm()?)
}

fn cmd_emit(a: EmitArgs) -> Result<u8> {
    let with_placement =
        |b, n| GadgetSpec::new(b, n).with_base(a.base).with_alignment_exponent(a.align);
    if let (Some(b), Some(n)) = (a.b, a.n) {
        let text = gadget_text(&with_placement(b, n))?;
        match &a.out {
            Some(p) => write_file(p, text.as_bytes())?,
            None => print!("{text}"),
        }
        return Ok(0);
    }
    let (Some(preset), Some(dir)) = (a.preset, &a.out_dir) else {
        bail!("emit needs either --b and --n, or --preset and --out-dir");
    };
    let Some(preset) = preset.preset() else {
        bail!("emit --preset must name a fixed grid (capacity, set-index or both)");
    };
    let mut cells = Vec::new();
    for g in preset.grids() {
        cells.extend(g.cells());
    }
    cells.sort_unstable();
    cells.dedup();
    // Validate everything before touching the filesystem.
    let texts = cells
        .iter()
        .map(|&(b, n)| gadget_text(&with_placement(b, n)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = String::from("file,B,N\n");
    for (&(b, n), text) in cells.iter().zip(texts) {
        let name = format!("gadget_b{b}_n{n}.S");
        write_file(&dir.join(&name), text.as_bytes())?;
        manifest.push_str(&format!("{name},{b},{n}\n"));
    }
    write_file(&dir.join("manifest.csv"), manifest.as_bytes())?;
    Ok(0)
}

fn cmd_render(a: RenderArgs) -> Result<u8> {
    let m = load_matrix(&a.matrix)?;
    let text = match a.format {
        RenderFormat::Ascii => {
            let buckets = a.buckets.as_deref().unwrap_or(&DEFAULT_BUCKETS);
            report::render_ascii(&m, buckets)?
        }
        RenderFormat::Csv => report::matrix_csv(&m),
        RenderFormat::Plot => report::plot_table(&m),
        RenderFormat::Json => String::from_utf8(report::export_matrix(&m, MatrixFormat::Json)?)?,
    };
    print!("{text}");
    if !text.ends_with('\n') {
        println!();
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Sweep(a) => cmd_sweep(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Emit(a) => cmd_emit(a),
        Command::Render(a) => cmd_render(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
