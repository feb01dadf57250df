//! Command line front end. Every subcommand is a thin shell around the
//! library: it parses arguments, calls one entry point, and prints a few
//! factual lines. Exit codes: 0 success, 1 execution failure, 2 bad
//! configuration or usage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use treeseg_core::gradcheck::{
    check_composite, check_processor, check_unet, GradCheckConfig, GradCheckReport,
};
use treeseg_core::io::load_checkpoint;
use treeseg_core::metrics::export_report;
use treeseg_core::models::{Model, ModelSpec, ProcessorSpec, TinyUNetSpec};
use treeseg_core::synth::{
    default_signatures, default_time_tags, filter_rare_classes, generate_dataset,
    taxonomy_from_signatures, Dataset, SceneSpec, SplitId,
};
use treeseg_core::train::{
    compare_losses, compare_modes, evaluate_checkpoint, model_input, train, TrainConfig,
};
use treeseg_core::viz::{colorize_mask, frame_to_rgb, training_curves_svg, write_ppm};
use treeseg_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "treeseg", version, about = "Multi-temporal tree-crown segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-date dataset
    GenData(GenDataArgs),
    /// Assign spatial train/val/test splits to an existing dataset
    Split(SplitArgs),
    /// Train a model
    Train(TrainArgs),
    /// Score a checkpoint on one split
    Eval(EvalArgs),
    /// Compare gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Run one sample through a checkpoint and write image panels
    Predict(PredictArgs),
    /// Render training curves from a run's CSV log
    Plot(PlotArgs),
    /// Train both input modes under identical settings and compare
    CompareModes(CompareArgs),
    /// Train both objectives under identical settings and compare
    CompareLosses(CompareArgs),
}

fn parse_ratios(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("want three comma-separated fractions, e.g. 0.63,0.16,0.21".to_string());
    }
    let mut v = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        v[i] = p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok((v[0], v[1], v[2]))
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset directory to create
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    tiles: usize,
    /// Tile height and width in pixels
    #[arg(long, default_value_t = 32)]
    tile_size: usize,
    /// Crowns placed per tile
    #[arg(long, default_value_t = 6)]
    crowns: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip split assignment
    #[arg(long)]
    no_split: bool,
    /// Train,val,test fractions
    #[arg(long, value_parser = parse_ratios, default_value = "0.63,0.16,0.21")]
    ratios: (f64, f64, f64),
    /// Discarded columns between split bands
    #[arg(long, default_value_t = 1)]
    buffer: usize,
    /// Drop species with fewer crowns than this (0 keeps everything)
    #[arg(long, default_value_t = 50)]
    min_count: usize,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_ratios, default_value = "0.63,0.16,0.21")]
    ratios: (f64, f64, f64),
    #[arg(long, default_value_t = 1)]
    buffer: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with a training configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides the config file)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory (overrides the config file)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config field, e.g. --set lr=0.001 or
    /// --set weights.lambda2=0.5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Copy, Clone, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

impl From<SplitName> for SplitId {
    fn from(s: SplitName) -> SplitId {
        match s {
            SplitName::Train => SplitId::Train,
            SplitName::Val => SplitId::Val,
            SplitName::Test => SplitId::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    /// Where to write metrics.json and metrics.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum Target {
    Processor,
    Unet,
    Composite,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Target::Composite)]
    target: Target,
    /// Input height and width
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Max allowed relative error (defaults: 1e-4, composite 1e-3)
    #[arg(long)]
    tolerance: Option<f64>,
    /// Coordinates probed per parameter tensor
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample id from the dataset manifest, e.g. tile_00_01
    #[arg(long)]
    id: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// training_log.csv from a run directory
    #[arg(long)]
    log: PathBuf,
    /// SVG file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// JSON file with the shared training configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Parent directory; each run gets a subdirectory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Split(a) => split(a),
        Command::Train(a) => {
            let cfg = resolve_config(a.config.as_deref(), a.data, a.out, &a.sets)?;
            let summary = train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary is plain data"));
            Ok(())
        }
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Plot(a) => plot(a),
        Command::CompareModes(a) => {
            let cfg = resolve_config(a.config.as_deref(), a.data, a.out, &a.sets)?;
            report_comparison(compare_modes(&cfg)?, &cfg.out_dir)
        }
        Command::CompareLosses(a) => {
            let cfg = resolve_config(a.config.as_deref(), a.data, a.out, &a.sets)?;
            report_comparison(compare_losses(&cfg)?, &cfg.out_dir)
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let scene = SceneSpec {
        height: a.tile_size,
        width: a.tile_size,
        crowns_per_tile: a.crowns,
        ..SceneSpec::default()
    };
    let sigs = default_signatures();
    let tags = default_time_tags();
    let mut ds = generate_dataset(&a.out, &scene, &sigs, &tags, a.tiles, a.seed)?;
    println!("wrote {} tiles under {}", ds.len(), a.out.display());
    if a.min_count > 0 {
        let removed = filter_rare_classes(&mut ds, a.min_count)?;
        if removed.is_empty() {
            println!("no species below {} crowns", a.min_count);
        } else {
            println!("removed rare species: {}", removed.join(", "));
        }
    }
    if !a.no_split {
        ds.assign_splits(a.ratios, a.buffer)?;
        print_split_sizes(&ds);
    }
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let mut ds = Dataset::open(&a.data)?;
    ds.assign_splits(a.ratios, a.buffer)?;
    print_split_sizes(&ds);
    Ok(())
}

fn print_split_sizes(ds: &Dataset) {
    for split in [SplitId::Train, SplitId::Val, SplitId::Test, SplitId::Buffer] {
        println!("{}: {} tiles", split.name(), ds.indices_of(split).len());
    }
}

/// Layers a config together: file (or nothing), then --set overrides, then
/// the --data/--out flags. The result must deserialize cleanly, so typos in
/// keys are rejected rather than ignored.
fn resolve_config(
    file: Option<&Path>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    sets: &[String],
) -> Result<TrainConfig> {
    let mut root: serde_json::Value = match file {
        Some(p) => treeseg_core::io::read_json(p)?,
        None => serde_json::json!({}),
    };
    if !root.is_object() {
        return Err(Error::Config(vec!["config file must hold a JSON object".to_string()]));
    }
    for s in sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| {
            Error::Config(vec![format!("--set {s:?} is not KEY=VALUE")])
        })?;
        // bare words become strings, anything JSON-shaped stays typed
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .as_object_mut()
                .expect("object by construction")
                .entry(part.to_string())
                .or_insert_with(|| serde_json::json!({}));
            if !node.is_object() {
                *node = serde_json::json!({});
            }
        }
        node.as_object_mut().expect("object by construction").insert(
            parts[parts.len() - 1].to_string(),
            value,
        );
    }
    let obj = root.as_object_mut().expect("checked above");
    if let Some(d) = data {
        obj.insert("data_dir".to_string(), serde_json::json!(d));
    }
    if let Some(o) = out {
        obj.insert("out_dir".to_string(), serde_json::json!(o));
    }
    if !obj.contains_key("data_dir") || !obj.contains_key("out_dir") {
        return Err(Error::Config(vec![
            "a dataset and run directory are required (--data/--out or config file)".to_string(),
        ]));
    }
    let cfg: TrainConfig = serde_json::from_value(root)
        .map_err(|e| Error::Config(vec![format!("bad training config: {e}")]))?;
    cfg.validate()?;
    Ok(cfg)
}

fn eval(a: EvalArgs) -> Result<()> {
    let (report, meta) = evaluate_checkpoint(&a.ckpt, &a.data, a.split.into())?;
    println!(
        "checkpoint: epoch {} seed {} mode {:?}",
        meta.epoch, meta.seed, meta.model.mode
    );
    for (i, name) in report.class_names.iter().enumerate() {
        match report.per_class_iou[i] {
            Some(v) => println!("  {name}: IoU {v:.4}"),
            None => println!("  {name}: absent"),
        }
    }
    println!("mIoU: {:.4}", report.miou);
    println!(
        "accuracy: species {:.4} genus {:.4} taxon {:.4}",
        report.species_accuracy, report.genus_accuracy, report.taxon_accuracy
    );
    if let Some(out) = a.out {
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        export_report(&report, &out.join("metrics.json"), &out.join("metrics.csv"))?;
        println!("wrote {}", out.join("metrics.json").display());
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let (label, report): (&str, GradCheckReport) = match a.target {
        Target::Processor => {
            let cfg = GradCheckConfig {
                tolerance: a.tolerance.unwrap_or(1e-4),
                samples: a.samples,
                seed: a.seed,
                ..Default::default()
            };
            ("processor", check_processor(&cfg, &ProcessorSpec::default(), a.size, a.size, a.seed)?)
        }
        Target::Unet => {
            let cfg = GradCheckConfig {
                tolerance: a.tolerance.unwrap_or(1e-4),
                samples: a.samples,
                seed: a.seed,
                ..Default::default()
            };
            let mut spec = TinyUNetSpec::new(3, 6);
            spec.base_channels = a.base_channels;
            spec.depth = a.depth;
            ("unet", check_unet(&cfg, &spec, a.size, a.size, a.seed)?)
        }
        Target::Composite => {
            let cfg = GradCheckConfig {
                tolerance: a.tolerance.unwrap_or(1e-3),
                samples: a.samples,
                seed: a.seed,
                ..Default::default()
            };
            let taxonomy = taxonomy_from_signatures(&default_signatures())?;
            let processor = ProcessorSpec::default();
            let mut unet = TinyUNetSpec::new(processor.out_channels, taxonomy.num_species());
            unet.base_channels = a.base_channels;
            unet.depth = a.depth;
            let spec = ModelSpec::time_series(processor, unet);
            ("composite", check_composite(&cfg, &spec, &taxonomy, a.size, a.size, a.seed)?)
        }
    };
    println!(
        "{label}: max rel err {:.3e} over {} coordinates (tolerance {:.0e})",
        report.max_rel_err, report.checked, report.tolerance
    );
    if let Some(w) = &report.worst {
        println!(
            "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{} coordinates exceeded the tolerance",
            report.failures.len()
        )))
    }
}

fn predict(a: PredictArgs) -> Result<()> {
    let loaded = load_checkpoint::<f32>(&a.ckpt)?;
    let model = Model {
        spec: loaded.meta.model,
        params: loaded.params,
    };
    let ds = Dataset::open(&a.data)?;
    let idx = ds
        .manifest
        .samples
        .iter()
        .position(|s| s.id == a.id)
        .ok_or_else(|| Error::invalid(format!("no sample named {} in the manifest", a.id)))?;
    let (image, truth) = ds.load_sample(idx)?;
    let reference = ds.manifest.reference_time_index;
    let input = model_input(model.spec.mode, &image, reference)?;
    let pred_batch = model.predict_mask(input)?;
    let pred = treeseg_core::mask::Mask::new(pred_batch.h, pred_batch.w, pred_batch.data)?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let s = image.shape().to_vec();
    let plane = s[1] * s[2] * s[3];
    let frame = Tensor::new(
        vec![s[1], s[2], s[3]],
        image.data()[reference * plane..(reference + 1) * plane].to_vec(),
    )?;
    let (h, w, rgb) = frame_to_rgb(&frame)?;
    write_ppm(&a.out.join(format!("{}_input.ppm", a.id)), h, w, &rgb)?;
    let rgb = colorize_mask(&truth, &ds.taxonomy)?;
    write_ppm(&a.out.join(format!("{}_truth.ppm", a.id)), truth.h, truth.w, &rgb)?;
    let rgb = colorize_mask(&pred, &ds.taxonomy)?;
    write_ppm(&a.out.join(format!("{}_pred.ppm", a.id)), pred.h, pred.w, &rgb)?;
    println!("wrote 3 panels for {} under {}", a.id, a.out.display());

    let mut acc = treeseg_core::metrics::MetricsAccumulator::new(ds.taxonomy.num_species());
    acc.add(&pred, &truth)?;
    let report = acc.finish(&ds.taxonomy)?;
    println!("sample mIoU: {:.4}", report.miou);
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.log).map_err(|e| Error::io(&a.log, e))?;
    let svg = training_curves_svg(&text)?;
    treeseg_core::io::write_atomic(&a.out, svg.as_bytes())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn report_comparison(cmp: treeseg_core::train::ModeComparison, out_dir: &Path) -> Result<()> {
    let csv = cmp.to_csv();
    let path = out_dir.join("comparison.csv");
    treeseg_core::io::write_atomic(&path, csv.as_bytes())?;
    print!("{csv}");
    if let Some(pair) = &cmp.pair {
        println!(
            "confusable pair {}+{}: {} {:.4} vs {} {:.4} (delta {:.4})",
            pair.names[0],
            pair.names[1],
            cmp.label_a,
            pair.mean_iou_a,
            cmp.label_b,
            pair.mean_iou_b,
            pair.delta
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
