use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use layergauge::measure::ReportRecord;
use layergauge::metrics::{evaluate, ThicknessPairs};
use layergauge::nnet::gradcheck::{self, TOLERANCE};
use layergauge::nnet::{predict_mask_padded, train_rcnn, train_segmenter, RcnnModel, SegModel, TrainConfig};
use layergauge::overlay::render_overlay;
use layergauge::pgm::{mask_to_gray8, mask_to_pgm, pgm_to_mask, read_pgm, write_ppm};
use layergauge::postprocess::{label_components, largest_component, Connectivity};
use layergauge::synth::{generate_batch, load_dataset, write_dataset, BatchRanges, LoadedSample};
use layergauge::{normalize, orthogonal_report, three_line_report, BinaryMask, GrayImage, RgbImage, ThicknessReport};

const EXIT_USAGE: u8 = 1;
const EXIT_BAD_INPUT: u8 = 2;
const EXIT_FAILURE: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "layergauge",
    version,
    about = "Segment and measure thin layers in grayscale micrographs"
)]
struct Cli {
    /// Seed for every random choice (data, initialisation, shuffling, dropout).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Physical units per pixel, e.g. nm/px.
    #[arg(long, global = true, default_value_t = 1.0, value_parser = positive_f64)]
    scale: f64,
    /// Write the command's JSON result to this path.
    #[arg(long, global = true)]
    json: Option<PathBuf>,
    /// Suppress the summary line on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (images, masks, manifest.json).
    Synth(SynthArgs),
    /// Train the encoder-decoder segmenter on a synthetic dataset.
    TrainSeg(TrainArgs),
    /// Train the thickness regressor on a synthetic dataset's masks.
    TrainRcnn(TrainArgs),
    /// Predict a layer mask for one image.
    Segment(SegmentArgs),
    /// Measure layer thickness on a mask.
    Measure(MeasureArgs),
    /// Predict mean thickness of a mask with a trained regressor.
    PredictThickness(PredictArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Check every layer's backward pass against finite differences.
    Gradcheck,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Thickness range in px, `lo:hi`.
    #[arg(long, allow_hyphen_values = true, value_parser = range, default_value = "6:12")]
    thickness: (f64, f64),
    /// Tilt range in degrees, `lo:hi`.
    #[arg(long, allow_hyphen_values = true, value_parser = range, default_value = "-20:20")]
    tilt: (f64, f64),
    /// Bow amplitude range in px, `lo:hi`.
    #[arg(long, allow_hyphen_values = true, value_parser = range, default_value = "0:0")]
    curvature: (f64, f64),
    /// Noise standard deviation range, `lo:hi`.
    #[arg(long, allow_hyphen_values = true, value_parser = range, default_value = "0:0.05")]
    noise: (f64, f64),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, value_parser = non_negative_f64)]
    lr: Option<f64>,
    /// Weight file to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write the raw argmax mask instead of keeping only the largest region.
    #[arg(long)]
    no_postprocess: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Orthogonal,
    ThreeLine,
}

#[derive(Args, Debug)]
struct MeasureArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Orthogonal)]
    method: MethodArg,
    /// Overlay image; `.png` writes PNG, anything else binary PPM.
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Grayscale image drawn under the overlay (default: the mask itself).
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    truth_dir: PathBuf,
    /// Also compare orthogonal thickness of predicted and true masks.
    #[arg(long)]
    thickness: bool,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("expected a non-negative number, got `{s}`")),
    }
}

fn range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected `lo:hi`, got `{s}`"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("`{v}` is not a number"))
    };
    Ok((parse(a)?, parse(b)?))
}

/// Input the user supplied is unusable (exit 2).
#[derive(Debug)]
struct BadInput(String);

impl std::fmt::Display for BadInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<BadInput>().is_some() || err.downcast_ref::<std::io::Error>().is_some() {
        return EXIT_BAD_INPUT;
    }
    match err.downcast_ref::<layergauge::Error>() {
        Some(e) if e.is_bad_input() => EXIT_BAD_INPUT,
        _ => EXIT_FAILURE,
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(BadInput(format!("{}: no such file", path.display())).into());
    }
    Ok(())
}

fn require_dir(path: &Path) -> anyhow::Result<()> {
    if !path.is_dir() {
        return Err(BadInput(format!("{}: no such directory", path.display())).into());
    }
    Ok(())
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_image(path: &Path) -> anyhow::Result<GrayImage> {
    let bytes = read(path)?;
    let raw = read_pgm(&bytes).with_context(|| format!("{}", path.display()))?;
    Ok(normalize(&raw)?)
}

fn read_mask(path: &Path) -> anyhow::Result<BinaryMask> {
    let bytes = read(path)?;
    pgm_to_mask(&bytes).with_context(|| format!("{}", path.display()))
}

struct Ctx {
    seed: u64,
    scale: f64,
    json: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn say(&self, line: &str) {
        if !self.quiet {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{line}");
        }
    }

    fn emit_json(&self, value: &impl serde::Serialize) -> anyhow::Result<()> {
        if let Some(path) = &self.json {
            let mut bytes = serde_json::to_vec_pretty(value)?;
            bytes.push(b'\n');
            write(path, &bytes)?;
        }
        Ok(())
    }
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> anyhow::Result<()> {
    let ranges = BatchRanges {
        width: a.width,
        height: a.height,
        thickness: a.thickness,
        tilt_deg: a.tilt,
        curvature: a.curvature,
        noise: a.noise,
        ..BatchRanges::default()
    };
    ranges.validate()?;
    let samples = generate_batch(a.n as usize, &ranges, ctx.seed)?;
    let manifest = write_dataset(&a.out, &samples)?;
    ctx.emit_json(&manifest)?;
    ctx.say(&format!("wrote {} samples to {}", manifest.len(), a.out.display()));
    Ok(())
}

fn load_training_set(dir: &Path) -> anyhow::Result<Vec<LoadedSample>> {
    require_dir(dir)?;
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn write_curve(ctx: &Ctx, a: &TrainArgs, curve: &[f64]) -> anyhow::Result<PathBuf> {
    let path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write(&path, csv.as_bytes())?;
    ctx.emit_json(&json!({
        "model": a.out.display().to_string(),
        "epochs": curve.len(),
        "losses": curve,
        "final_loss": curve.last(),
    }))?;
    Ok(path)
}

fn train_config(ctx: &Ctx, a: &TrainArgs, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        batch_size: a.batch as usize,
        epochs: a.epochs.unwrap_or(epochs),
        learning_rate: a.lr.unwrap_or(lr),
        seed: ctx.seed,
        ..TrainConfig::default()
    }
}

fn cmd_train_seg(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<()> {
    let data: Vec<(GrayImage, BinaryMask)> = load_training_set(&a.data)?
        .into_iter()
        .map(|s| (s.image, s.mask))
        .collect();
    let cfg = train_config(ctx, a, 20, 0.01);
    let (model, curve) = train_segmenter(&data, &cfg)?;
    write(&a.out, &model.save())?;
    let csv = write_curve(ctx, a, &curve)?;
    ctx.say(&format!(
        "trained segmenter on {} samples for {} epochs, final loss {}; wrote {} and {}",
        data.len(),
        curve.len(),
        curve.last().map_or("n/a".into(), |l| format!("{l:.6}")),
        a.out.display(),
        csv.display()
    ));
    Ok(())
}

fn cmd_train_rcnn(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<()> {
    let samples = load_training_set(&a.data)?;
    let mut data = Vec::with_capacity(samples.len());
    for s in samples {
        let report = orthogonal_report(&s.mask, 1.0)
            .with_context(|| format!("labelling sample {} with the orthogonal method", s.entry.index))?;
        data.push((s.mask, report.mean));
    }
    let cfg = train_config(ctx, a, 15, 0.0003);
    let (model, curve) = train_rcnn(&data, &cfg)?;
    write(&a.out, &model.save())?;
    let csv = write_curve(ctx, a, &curve)?;
    ctx.say(&format!(
        "trained regressor on {} samples for {} epochs, final loss {}; wrote {} and {}",
        data.len(),
        curve.len(),
        curve.last().map_or("n/a".into(), |l| format!("{l:.6}")),
        a.out.display(),
        csv.display()
    ));
    Ok(())
}

fn cmd_segment(ctx: &Ctx, a: &SegmentArgs) -> anyhow::Result<()> {
    require_file(&a.model)?;
    require_file(&a.image)?;
    let model = SegModel::load(&read(&a.model)?).with_context(|| format!("{}", a.model.display()))?;
    let image = read_image(&a.image)?;
    let raw = predict_mask_padded(&model, &image)?;
    let regions = label_components(&raw, Connectivity::Eight).len();
    let mask = if a.no_postprocess {
        raw
    } else {
        largest_component(&label_components(&raw, Connectivity::Eight))
            .map_err(|e| anyhow!(e).context("segmentation failure: nothing predicted as layer"))?
    };
    write(&a.out, &mask_to_pgm(&mask))?;
    ctx.emit_json(&json!({
        "image": a.image.display().to_string(),
        "mask": a.out.display().to_string(),
        "postprocessed": !a.no_postprocess,
        "regions_before": regions,
        "area": mask.area(),
    }))?;
    ctx.say(&format!(
        "area={} regions_before={} -> {}",
        mask.area(),
        regions,
        a.out.display()
    ));
    Ok(())
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn summary(report: &ThicknessReport) -> String {
    format!("MT={:.2} SD={:.2} n={}", report.mean_scaled, report.sd_scaled, report.n)
}

fn encode_png(img: &RgbImage) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        let data: Vec<u8> = img.data().iter().flatten().copied().collect();
        w.write_image_data(&data)?;
    }
    Ok(buf)
}

fn cmd_measure(ctx: &Ctx, a: &MeasureArgs) -> anyhow::Result<()> {
    require_file(&a.mask)?;
    if let Some(img) = &a.image {
        require_file(img)?;
    }
    let mask = read_mask(&a.mask)?;
    let report = match a.method {
        MethodArg::Orthogonal => orthogonal_report(&mask, ctx.scale),
        MethodArg::ThreeLine => three_line_report(&mask, ctx.scale),
    }
    .with_context(|| format!("measuring {}", a.mask.display()))?;
    let name = file_label(&a.mask);
    let record: ReportRecord = report.to_record(&name);
    ctx.emit_json(&record)?;
    if let Some(path) = &a.overlay {
        let background = match &a.image {
            Some(p) => read_image(p)?,
            None => normalize(&mask_to_gray8(&mask))?,
        };
        let caption = format!("{} {}", name, summary(&report));
        let rgb = render_overlay(&background, &mask, &report, &caption)?;
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let bytes = if is_png { encode_png(&rgb)? } else { write_ppm(&rgb) };
        write(path, &bytes)?;
    }
    ctx.say(&summary(&report));
    Ok(())
}

fn cmd_predict(ctx: &Ctx, a: &PredictArgs) -> anyhow::Result<()> {
    require_file(&a.model)?;
    require_file(&a.mask)?;
    let model = RcnnModel::load(&read(&a.model)?).with_context(|| format!("{}", a.model.display()))?;
    let mask = read_mask(&a.mask)?;
    let t = model.predict_thickness(&mask, ctx.scale)?;
    ctx.emit_json(&json!({ "file": file_label(&a.mask), "mean": t, "scale_nm_per_px": ctx.scale }))?;
    ctx.say(&format!("MT={t:.2}"));
    Ok(())
}

/// Index from the trailing digits of a file stem, e.g. `mask_0012.pgm` -> 12.
fn trailing_index(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
    if digits.is_empty() {
        return None;
    }
    digits.chars().rev().collect::<String>().parse().ok()
}

/// `.pgm` files in `dir` keyed by trailing index. When the directory holds
/// `mask_*` files (a `synth` dataset), `img_*` files are skipped.
fn indexed_masks(dir: &Path) -> anyhow::Result<BTreeMap<usize, PathBuf>> {
    require_dir(dir)?;
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    let skip_images = entries.iter().any(|p| file_label(p).starts_with("mask_"));
    let mut out = BTreeMap::new();
    let mut problems = Vec::new();
    for path in entries {
        if !path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            continue;
        }
        let name = file_label(&path);
        if skip_images && name.starts_with("img_") {
            continue;
        }
        match trailing_index(&path) {
            None => problems.push(format!("{name}: no trailing index")),
            Some(i) => {
                if let Some(prev) = out.insert(i, path) {
                    problems.push(format!("{name}: index {i} also used by {}", file_label(&prev)));
                }
            }
        }
    }
    if !problems.is_empty() {
        bail!(BadInput(format!("{}: {}", dir.display(), problems.join("; "))));
    }
    Ok(out)
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> anyhow::Result<()> {
    let preds = indexed_masks(&a.pred_dir)?;
    let truths = indexed_masks(&a.truth_dir)?;
    let mut unmatched: Vec<String> = preds
        .iter()
        .filter(|(i, _)| !truths.contains_key(i))
        .map(|(_, p)| p.display().to_string())
        .collect();
    unmatched.extend(
        truths
            .iter()
            .filter(|(i, _)| !preds.contains_key(i))
            .map(|(_, p)| p.display().to_string()),
    );
    if !unmatched.is_empty() {
        bail!(BadInput(format!("unmatched files: {}", unmatched.join(", "))));
    }
    if preds.is_empty() {
        bail!(BadInput(format!("no .pgm masks in {}", a.pred_dir.display())));
    }
    let mut pairs = Vec::with_capacity(preds.len());
    for (i, p) in &preds {
        let truth = read_mask(&truths[i])?;
        let pred = read_mask(p)?;
        pairs.push((file_label(p), truth, pred));
    }
    let (mut predicted, mut reference) = (Vec::new(), Vec::new());
    if a.thickness {
        for (id, truth, pred) in &pairs {
            predicted.push(
                orthogonal_report(pred, ctx.scale)
                    .with_context(|| format!("measuring {id}"))?
                    .mean_scaled,
            );
            reference.push(
                orthogonal_report(truth, ctx.scale)
                    .with_context(|| format!("measuring truth for {id}"))?
                    .mean_scaled,
            );
        }
    }
    let thickness = a.thickness.then_some(ThicknessPairs {
        predicted: &predicted,
        reference: &reference,
    });
    let report = evaluate(pairs.iter().map(|(id, t, p)| (id.as_str(), t, p)), thickness)?;
    ctx.emit_json(&report)?;
    let mut line = format!(
        "dice={:.4} iou={:.4} n={}",
        report.mean_dice,
        report.mean_iou,
        report.per_image.len()
    );
    if let (Some(mse), Some(fit)) = (report.mse, &report.fit) {
        line.push_str(&format!(" mse={mse:.4} slope={:.4} r2={:.4}", fit.slope, fit.r2));
    }
    ctx.say(&line);
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx) -> anyhow::Result<()> {
    let perturb = if cfg!(feature = "corrupt-gradient") { 1e-2 } else { 0.0 };
    let checks = gradcheck::run_suite(ctx.seed, perturb)?;
    for c in &checks {
        ctx.say(&format!(
            "{:<16} max_rel_err={:.3e} checked={} {}",
            c.layer,
            c.max_rel_error,
            c.checked,
            if c.passed() { "ok" } else { "FAIL" }
        ));
    }
    ctx.emit_json(&json!({ "tolerance": TOLERANCE, "layers": checks }))?;
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.layer.as_str())
        .collect();
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        scale: cli.scale,
        json: cli.json,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::TrainSeg(a) => cmd_train_seg(&ctx, a),
        Command::TrainRcnn(a) => cmd_train_rcnn(&ctx, a),
        Command::Segment(a) => cmd_segment(&ctx, a),
        Command::Measure(a) => cmd_measure(&ctx, a),
        Command::PredictThickness(a) => cmd_predict(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Gradcheck => cmd_gradcheck(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
