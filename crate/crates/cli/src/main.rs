//! `segreg`: region-wise registration from the command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or configuration,
//! 3 solver divergence. Failures print one JSON object on stderr.

mod slices;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use segreg::config::{Preset, RunConfig};
use segreg::field::{warp_labelmap, warp_volume};
use segreg::metrics::{evaluate, MetricsReport};
use segreg::optim::write_trace_csv;
use segreg::phantom::{make_phantom, write_bundle, PhantomSpec};
use segreg::pipeline::{mode_sweep, nested_merges, run_segreg, segmentation_sweep, spearman};
use segreg::{nrrd, DisplacementField, Error, LabelMap, Result, Volume};

use slices::{io_err, write_slices};

#[derive(Debug, Parser)]
#[command(name = "segreg", version, about = "Segmentation-driven region-wise deformable registration")]
struct Cli {
    /// Worker threads for the region solves (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a moving image pair region by region and write all artifacts.
    Register(RegisterArgs),
    /// Score a displacement field against a pair of label maps.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic phantom with ground-truth fields.
    Phantom(PhantomArgs),
    /// Registration quality against segmentation quality or region count.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct Inputs {
    #[arg(long)]
    moving: Option<PathBuf>,
    #[arg(long)]
    fixed: Option<PathBuf>,
    #[arg(long)]
    moving_seg: Option<PathBuf>,
    #[arg(long)]
    fixed_seg: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss preset applied over the config file.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Override one key, e.g. `--set optimizer.iterations=50`; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Displacement field NRRD; identity when omitted.
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long)]
    moving_seg: Option<PathBuf>,
    #[arg(long)]
    fixed_seg: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Phantom spec TOML; the bundled two-region phantom when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec's texture seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    /// Degrade both segmentations to each target Dice.
    Segmentation,
    /// Merge labels into 1..=n foreground regions.
    Mode,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value = "segmentation")]
    kind: SweepKind,
    /// Target segmentation Dice values.
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.8,0.9,1.0")]
    targets: Vec<f64>,
    /// Seed of the segmentation degradation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::MissingInput(format!("--{flag} is required")))
}

struct LoadedInputs {
    moving: Volume,
    fixed: Volume,
    moving_seg: LabelMap,
    fixed_seg: LabelMap,
}

fn load_inputs(i: &Inputs) -> Result<LoadedInputs> {
    let paths = [
        required(&i.moving, "moving")?,
        required(&i.fixed, "fixed")?,
        required(&i.moving_seg, "moving-seg")?,
        required(&i.fixed_seg, "fixed-seg")?,
    ];
    Ok(LoadedInputs {
        moving: nrrd::read_volume(paths[0])?,
        fixed: nrrd::read_volume(paths[1])?,
        moving_seg: nrrd::read_labelmap(paths[2])?,
        fixed_seg: nrrd::read_labelmap(paths[3])?,
    })
}

fn load_config(c: &ConfigArgs) -> Result<RunConfig> {
    let text = match &c.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| io_err(p, e))?),
        None => None,
    };
    RunConfig::layered(text.as_deref(), c.preset, &c.overrides)
}

fn prepare_out_dir(p: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = required(p, "out-dir")?.to_path_buf();
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_file(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

fn print_report(report: &MetricsReport) {
    println!("{:>6}  {:>9}  {:>10}", "label", "dice", "hd95_mm");
    for (l, m) in &report.per_label {
        let hd = m.hd95_mm.map_or_else(|| "n/a".to_string(), |h| format!("{h:.3}"));
        println!("{l:>6}  {:>9.4}  {hd:>10}", m.dice);
    }
    println!("mean dice      {:.4}", report.mean_dice());
    println!("sdlogj         {:.4}", report.sdlogj);
    println!(
        "folding        {} voxels ({:.4}%)",
        report.folding_count,
        100.0 * report.folding_fraction
    );
}

fn cmd_register(a: &RegisterArgs, threads: usize) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let inputs = load_inputs(&a.inputs)?;
    let pipeline = cfg.to_pipeline()?;
    let out = prepare_out_dir(&a.out_dir)?;
    write_file(out.join("config.toml"), cfg.to_toml())?;

    let start = Instant::now();
    let res = run_segreg(
        &inputs.moving,
        &inputs.fixed,
        &inputs.moving_seg,
        &inputs.fixed_seg,
        &pipeline,
    )?;
    let runtime = start.elapsed().as_secs_f64();

    nrrd::write_displacement(&res.field, out.join("field.nrrd"))?;
    nrrd::write_volume(&res.warped, nrrd::ScalarType::Float32, out.join("warped.nrrd"))?;
    nrrd::write_labelmap(&res.warped_seg, out.join("warped_seg.nrrd"))?;
    write_file(out.join("metrics.json"), res.report.to_json())?;
    for r in &res.regions {
        let mut buf = Vec::new();
        write_trace_csv(&r.loss_trace, &mut buf).expect("writing to memory");
        write_file(out.join(format!("trace_label{}.csv", r.label)), buf)?;
    }
    write_slices(&res.warped, &res.warped_seg, &out, "warped")?;
    let run = serde_json::json!({
        "runtime_seconds": runtime,
        "threads": threads,
        "preset": a.config.preset.map(|p| p.name()),
        "regions": res.regions.len(),
    });
    write_file(out.join("run.json"), format!("{run:#}\n"))?;

    print_report(&res.report);
    println!("regions        {}", res.regions.len());
    println!("runtime        {runtime:.1} s on {threads} thread(s)");
    println!("outputs        {}", out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let sm = nrrd::read_labelmap(required(&a.moving_seg, "moving-seg")?)?;
    let sf = nrrd::read_labelmap(required(&a.fixed_seg, "fixed-seg")?)?;
    let u = match &a.field {
        Some(p) => nrrd::read_displacement(p)?,
        None => DisplacementField::zeros(*sf.grid()),
    };
    let pipeline = cfg.to_pipeline()?;
    let out = prepare_out_dir(&a.out_dir)?;
    let warped = warp_labelmap(&sm, &u)?;
    let report = evaluate(&warped, &sf, &u, pipeline.smoothness)?;
    write_file(out.join("metrics.json"), report.to_json())?;
    print_report(&report);
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => PhantomSpec::from_toml(&std::fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => PhantomSpec::two_region_translation(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let out = required(&a.out_dir, "out-dir")?;
    let ph = make_phantom(&spec)?;
    write_bundle(&ph, &spec, out)?;
    let warped = warp_volume(&ph.moving, &ph.gt_composed)?;
    write_slices(&ph.fixed, &ph.fixed_seg, out, "fixed")?;
    write_slices(&warped, &ph.fixed_seg, out, "moving_gt_warped")?;
    println!("dims           {:?}", spec.dims);
    println!("regions        {}", spec.n_regions());
    println!("seed           {}", spec.seed);
    println!("outputs        {}", out.display());
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let inputs = load_inputs(&a.inputs)?;
    let pipeline = cfg.to_pipeline()?;
    let out = prepare_out_dir(&a.out_dir)?;
    write_file(out.join("config.toml"), cfg.to_toml())?;
    let (csv, dat) = match a.kind {
        SweepKind::Segmentation => {
            let mut targets = a.targets.clone();
            targets.sort_by(f64::total_cmp);
            let rows = segmentation_sweep(
                &inputs.moving,
                &inputs.fixed,
                &inputs.moving_seg,
                &inputs.fixed_seg,
                &targets,
                &pipeline,
                a.seed,
            )?;
            let mut csv = String::from("target,seg_dice,reg_dice\n");
            let mut dat = String::from("# seg_dice reg_dice target\n");
            println!("{:>8}  {:>9}  {:>9}", "target", "seg_dice", "reg_dice");
            for r in &rows {
                csv += &format!("{:.6},{:.6},{:.6}\n", r.target, r.seg_dice, r.reg_dice);
                dat += &format!("{:.6} {:.6} {:.6}\n", r.seg_dice, r.reg_dice, r.target);
                println!("{:>8.3}  {:>9.4}  {:>9.4}", r.target, r.seg_dice, r.reg_dice);
            }
            let seg: Vec<f64> = rows.iter().map(|r| r.seg_dice).collect();
            let reg: Vec<f64> = rows.iter().map(|r| r.reg_dice).collect();
            println!("spearman       {:.4}", spearman(&seg, &reg));
            (csv, dat)
        }
        SweepKind::Mode => {
            let merges = nested_merges(&inputs.fixed_seg);
            let rows = mode_sweep(
                &inputs.moving,
                &inputs.fixed,
                &inputs.moving_seg,
                &inputs.fixed_seg,
                &merges,
                &pipeline,
            )?;
            let mut csv = String::from("n_regions,reg_dice\n");
            let mut dat = String::from("# n_regions reg_dice\n");
            println!("{:>9}  {:>9}", "n_regions", "reg_dice");
            for r in &rows {
                csv += &format!("{},{:.6}\n", r.n_regions, r.reg_dice);
                dat += &format!("{} {:.6}\n", r.n_regions, r.reg_dice);
                println!("{:>9}  {:>9.4}", r.n_regions, r.reg_dice);
            }
            (csv, dat)
        }
    };
    write_file(out.join("sweep.csv"), csv)?;
    write_file(out.join("sweep.dat"), dat)?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Io { .. } => 1,
        Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut v = serde_json::json!({
        "error": e.code(),
        "message": e.to_string(),
    });
    if let Error::Region { label, .. } = e {
        v["label"] = (*label).into();
    }
    if let Error::LabelSetMismatch(labels) = e.root() {
        v["labels"] = labels.clone().into();
    }
    v
}

fn run(cli: &Cli) -> Result<()> {
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    if threads == 0 {
        return Err(Error::InvalidConfig("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Register(a) => cmd_register(a, threads),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Sweep(a) => cmd_sweep(a),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "{}", error_json(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
