use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adasample::event::{parse_text_stream, read_binary_stream, stream_stats, write_binary_stream, write_text_stream};
use adasample::grad::FdConfig;
use adasample::harness::model::sampler_weights;
use adasample::harness::{
    detector_gradcheck, energy_estimate, energy_mj, evaluate_params, prepare_samples, tm_robustness_probe, total_ops,
    OpCounter, REFERENCE_BREAKDOWN,
};
use adasample::repr::{
    early_aggregate, event_count, events_in, fixed_window_sample, time_surface, voxel_cube, voxel_grid, write_frame,
};
use adasample::run::{load_checkpoint, train_run, write_atomic, CHECKPOINT_FILE};
use adasample::sampler::{aggregate_windows, extract_windows, sample_events, sampler_forward, write_embedding};
use adasample::{EventStream, FrameTensor, MetricRecord, RunConfig, SamplerWeights, SensorSize, TimeWindow};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::{plot, Failure, Overrides};

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Reads an `EVS1` file, or a text stream when the extension is `.txt` or
/// `.csv` (sensor size from the scene configuration).
fn read_stream(path: &Path, run: &RunConfig) -> Result<EventStream, Failure> {
    let bytes = fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let text = matches!(path.extension().and_then(|e| e.to_str()), Some("txt" | "csv"));
    let stream = if text {
        parse_text_stream(&bytes, run.scene.sensor())
    } else {
        read_binary_stream(&bytes)
    };
    stream.map_err(|e| invalid(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "train")]
    split: Split,
    /// Number of streams; defaults to the configured split size.
    #[arg(long)]
    count: Option<usize>,
    /// Also write each stream in the text format.
    #[arg(long)]
    text: bool,
}

#[derive(Serialize)]
struct AnnotationLine<'a> {
    index: usize,
    file: &'a str,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    label: u32,
    t: u64,
}

pub fn gen(run: &RunConfig, a: &GenArgs) -> Result<(), Failure> {
    let mut run = run.clone();
    match (a.split, a.count) {
        (Split::Train, Some(n)) => run.data.train = n,
        (Split::Test, Some(n)) => run.data.test = n,
        _ => {}
    }
    run.validate()?;
    let samples = match a.split {
        Split::Train => run.train_set()?,
        Split::Test => run.test_set()?,
    };
    let split = match a.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let dir = run.output.join(split);
    let mut ann = String::new();
    for (i, s) in samples.iter().enumerate() {
        let file = format!("stream_{i:05}.evs");
        write_file(&dir.join(&file), &write_binary_stream(&s.stream))?;
        if a.text {
            write_file(&dir.join(format!("stream_{i:05}.txt")), write_text_stream(&s.stream).as_bytes())?;
        }
        let b = s.annotation;
        let line = AnnotationLine {
            index: i,
            file: &file,
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            label: b.label,
            t: b.t,
        };
        writeln!(ann, "{}", serde_json::to_string(&line).map_err(runtime)?).expect("string write");
    }
    write_file(&dir.join("annotations.jsonl"), ann.as_bytes())?;
    write_file(&run.output.join("config.toml"), run.to_toml().as_bytes())?;
    println!("wrote {} {split} streams to {}", samples.len(), dir.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Repr {
    /// K count frames over equal fixed windows of `[t - T, t)`.
    EventCount,
    /// T_m count frames over `[t - T, t]`.
    Early,
    VoxelGrid,
    TimeSurface,
    VoxelCube,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Input stream (`.evs`, or text with `.txt`/`.csv`).
    input: PathBuf,
    #[arg(long, value_enum, default_value = "early")]
    repr: Repr,
    /// Window end time in microseconds; defaults to the scene duration.
    #[arg(long)]
    t: Option<u64>,
    /// Temporal bins; defaults to T_m (K for event counts).
    #[arg(long)]
    bins: Option<usize>,
}

pub fn aggregate(run: &RunConfig, a: &AggregateArgs) -> Result<(), Failure> {
    let stream = read_stream(&a.input, run)?;
    let t = a.t.unwrap_or(run.scene.duration_us());
    let span = run.model.window_us;
    let sensor = stream.sensor();
    let frames: Vec<FrameTensor> = match a.repr {
        Repr::EventCount => {
            let k = a.bins.unwrap_or(run.model.sampler.slots);
            if k == 0 || !span.is_multiple_of(k as u64) {
                return Err(invalid(format!("{k} windows must divide the window {span} us")));
            }
            let dt = span / k as u64;
            let slices = fixed_window_sample(&stream, t, span, dt).map_err(invalid)?;
            slices
                .iter()
                .enumerate()
                .rev()
                .map(|(j, idx)| {
                    let end = t - j as u64 * dt;
                    let mut f = event_count(idx.iter().map(|&i| &stream.events()[i]), sensor, TimeWindow::new(end - dt, end));
                    f.slice_index = k - 1 - j;
                    f
                })
                .collect()
        }
        Repr::Early => early_aggregate(&stream, t, span, a.bins.unwrap_or(run.model.steps)).map_err(invalid)?.frames,
        Repr::VoxelGrid | Repr::TimeSurface | Repr::VoxelCube => {
            let window = TimeWindow::ending_at(t, span).map_err(invalid)?;
            let events = events_in(&stream, window);
            let bins = a.bins.unwrap_or(run.model.steps);
            let f = match a.repr {
                Repr::VoxelGrid => voxel_grid(events, sensor, window, bins),
                Repr::TimeSurface => time_surface(events, sensor, window, None),
                _ => voxel_cube(events, sensor, window, bins),
            };
            vec![f.map_err(invalid)?]
        }
    };
    for (j, f) in frames.iter().enumerate() {
        write_file(&run.output.join(format!("frame_{j:03}.frm")), &write_frame(f))?;
    }
    println!("wrote {} frame(s) to {}", frames.len(), run.output.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    input: PathBuf,
    /// Sampler weights from a training checkpoint; freshly initialized
    /// weights otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    t: Option<u64>,
}

#[derive(Serialize)]
struct WindowLine {
    x: u16,
    y: u16,
    p: u8,
    k: usize,
    open: usize,
    close: usize,
    events: Vec<usize>,
}

pub fn sample(run: &RunConfig, a: &SampleArgs) -> Result<(), Failure> {
    let cfg = &run.model.sampler;
    if !cfg.mode.is_adaptive() {
        return Err(invalid("spike-triggered windows need the arsnn sampler"));
    }
    let weights = match &a.checkpoint {
        Some(path) => {
            let (_, state) = load_checkpoint(path)?;
            sampler_weights(&state.params).ok_or_else(|| invalid("checkpoint has no sampler weights"))?
        }
        None => SamplerWeights::init(cfg.kernel, &mut run.init_rng()),
    };
    let stream = read_stream(&a.input, run)?;
    let t = a.t.unwrap_or(run.scene.duration_us());
    let frames = early_aggregate(&stream, t, run.model.window_us, run.model.steps).map_err(invalid)?;
    let trace = sampler_forward(&frames, &weights, cfg).map_err(runtime)?;
    let windows = extract_windows(&trace);
    let emb = aggregate_windows(&trace, &windows, cfg.rpd, cfg.sat, cfg.slots).map_err(runtime)?;
    write_embedding(&run.output, &emb).map_err(runtime)?;
    let members = sample_events(&stream, frames.window, frames.steps(), &windows);
    let mut dump = String::new();
    for (ws, evs) in windows.iter().zip(&members) {
        for (w, e) in ws.iter().zip(evs) {
            let (x, y, p) = w.coords(stream.sensor());
            let line = WindowLine {
                x,
                y,
                p,
                k: w.k,
                open: w.open,
                close: w.close,
                events: e.clone(),
            };
            writeln!(dump, "{}", serde_json::to_string(&line).map_err(runtime)?).expect("string write");
        }
    }
    write_file(&run.output.join("windows.jsonl"), dump.as_bytes())?;
    println!(
        "{} spikes, {} windows; embedding written to {}",
        trace.spike_count(),
        windows.iter().map(Vec::len).sum::<usize>(),
        run.output.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from the output directory's checkpoint.
    #[arg(long)]
    resume: bool,
}

pub fn train(run: &RunConfig, a: &TrainArgs) -> Result<(), Failure> {
    let mut records: Vec<MetricRecord> = Vec::new();
    let state = train_run(run, a.resume, |r| {
        match (r.accuracy, r.mean_iou) {
            (Some(acc), Some(iou)) => {
                eprintln!("epoch {:>3}  eval  loss {:.4}  acc {:.3}  iou {:.3}", r.epoch, r.loss, acc, iou)
            }
            _ => eprintln!("epoch {:>3}  train loss {:.4}", r.epoch, r.loss),
        }
        records.push(r.clone());
    })?;
    let log = fs::read_to_string(run.output.join(adasample::run::METRICS_FILE)).map_err(runtime)?;
    let all: Vec<MetricRecord> = log.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
    write_summary(&run.output, &all)?;
    plot::write_curves(&run.output, &all).map_err(runtime)?;
    println!("trained {} epochs ({} steps); artifacts in {}", state.epoch, state.step, run.output.display());
    Ok(())
}

fn write_summary(dir: &Path, records: &[MetricRecord]) -> Result<(), Failure> {
    let mut out = String::from("epoch\tstep\ttrain_loss\tgrad_norm\teval_loss\taccuracy\tmean_iou\n");
    for r in records.iter().filter(|r| r.kind == "train") {
        let e = records.iter().find(|x| x.kind == "eval" && x.epoch == r.epoch);
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        writeln!(
            out,
            "{}\t{}\t{:.6}\t{}\t{}\t{}\t{}",
            r.epoch,
            r.step,
            r.loss,
            opt(r.grad_norm),
            opt(e.map(|e| e.loss)),
            opt(e.and_then(|e| e.accuracy)),
            opt(e.and_then(|e| e.mean_iou)),
        )
        .expect("string write");
    }
    write_atomic(&dir.join("summary.tsv"), out.as_bytes()).map_err(runtime)
}

/// The checkpoint's own configuration with flag overrides applied, or the
/// given configuration file when one was passed.
fn checkpoint_run(
    path: &Path,
    run: &RunConfig,
    ov: &Overrides,
    explicit_config: bool,
) -> Result<(RunConfig, adasample::harness::TrainState), Failure> {
    let (stored, state) = load_checkpoint(path)?;
    let mut cfg = if explicit_config { run.clone() } else { stored };
    ov.apply(&mut cfg);
    cfg.validate()?;
    Ok((cfg, state))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Defaults to the checkpoint in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate the raw weights instead of their moving average.
    #[arg(long)]
    raw: bool,
    /// Also evaluate under these early-aggregation step counts.
    #[arg(long, value_delimiter = ',')]
    probe: Vec<usize>,
    /// IoU needed for a hit.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

pub fn eval(run: &RunConfig, ov: &Overrides, a: &EvalArgs) -> Result<(), Failure> {
    let path = a.checkpoint.clone().unwrap_or_else(|| run.output.join(CHECKPOINT_FILE));
    let (cfg, state) = checkpoint_run(&path, run, ov, false)?;
    let params = if a.raw { &state.params } else { &state.ema.shadow };
    let test = cfg.test_set()?;
    let data = prepare_samples(&cfg.model, &test)?;
    let r = evaluate_params(&cfg.model, params, &data, a.iou)?;
    println!("{:<10} {:>6} {:>9} {:>9} {:>9}", "T_m", "count", "accuracy", "mean_iou", "loss");
    println!(
        "{:<10} {:>6} {:>9.4} {:>9.4} {:>9.4}",
        cfg.model.steps, r.report.count, r.report.accuracy, r.report.mean_iou, r.mean_loss
    );
    if !a.probe.is_empty() {
        for c in tm_robustness_probe(&cfg.model, params, &test, &a.probe)? {
            println!("{:<10} {:>6} {:>9.4} {:>9.4} {:>9}", c.steps, test.len(), c.accuracy, c.mean_iou, "-");
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Coordinates to test.
    #[arg(long, default_value_t = 64)]
    trials: usize,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

pub fn gradcheck(run: &RunConfig, a: &GradcheckArgs) -> Result<(), Failure> {
    if !(a.eps > 0.0 && a.tol > 0.0) || a.trials == 0 {
        return Err(invalid("eps, tol and trials must be positive"));
    }
    let fd = FdConfig {
        eps: a.eps,
        trials: a.trials,
        ..Default::default()
    };
    let r = detector_gradcheck(&run.model, &run.scene, run.seed, &fd)?;
    println!("tested {}  skipped {}  max relative error {:.3e}", r.tested, r.skipped, r.max_rel_error);
    if let Some(w) = &r.worst {
        println!(
            "worst: {}[{}]  analytic {:.9e}  numeric {:.9e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    if r.max_rel_error >= a.tol {
        return Err(runtime(format!("relative error {:.3e} exceeds {:.1e}", r.max_rel_error, a.tol)));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    /// Multiply-accumulate count.
    #[arg(long)]
    mac: Option<f64>,
    /// Accumulate count.
    #[arg(long)]
    ac: Option<f64>,
    /// Print the reference breakdown reproduced from its printed counts.
    #[arg(long)]
    reference: bool,
    /// Per-module breakdown of a trained detector, averaged over the test set.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

pub fn energy(run: &RunConfig, ov: &Overrides, a: &EnergyArgs) -> Result<(), Failure> {
    let mut did = false;
    if a.mac.is_some() || a.ac.is_some() {
        let (mac, ac) = (a.mac.unwrap_or(0.0), a.ac.unwrap_or(0.0));
        if !(mac >= 0.0 && ac >= 0.0) {
            return Err(invalid("operation counts must be non-negative"));
        }
        println!("{:.2} mJ", energy_mj(ac, mac));
        did = true;
    }
    if a.reference {
        println!("{:<18} {:<10} {:>8} {:>8} {:>10} {:>10}", "model", "module", "AC (G)", "MAC (G)", "E (mJ)", "printed");
        for r in REFERENCE_BREAKDOWN {
            println!(
                "{:<18} {:<10} {:>8.2} {:>8.2} {:>10.3} {:>10.2}",
                r.model,
                r.module,
                r.ac_g,
                r.mac_g,
                energy_mj(r.ac_g * 1e9, r.mac_g * 1e9),
                r.energy_mj
            );
        }
        did = true;
    }
    if let Some(path) = &a.checkpoint {
        let (cfg, state) = checkpoint_run(path, run, ov, false)?;
        let test = cfg.test_set()?;
        let data = prepare_samples(&cfg.model, &test)?;
        let inputs: Vec<_> = data.iter().map(|d| &d.input).collect();
        let total = total_ops(&cfg.model, &state.ema.shadow, &inputs)?;
        print_breakdown(&total, inputs.len());
        did = true;
    }
    if !did {
        return Err(invalid("give --mac/--ac, --reference or --checkpoint"));
    }
    Ok(())
}

fn print_breakdown(total: &OpCounter, n: usize) {
    let per = |v: u64| v as f64 / n as f64;
    println!("{:<12} {:>14} {:>14} {:>14}", "module", "AC", "MAC", "E (nJ)");
    for m in &total.modules {
        println!(
            "{:<12} {:>14.1} {:>14.1} {:>14.4}",
            m.name,
            per(m.ac),
            per(m.mac),
            energy_mj(per(m.ac), per(m.mac)) * 1e6
        );
    }
    let without = total.without("sampler");
    println!(
        "{:<12} {:>14.1} {:>14.1} {:>14.4}",
        "total",
        per(total.ac_count),
        per(total.mac_count),
        energy_estimate(total) * 1e6 / n as f64
    );
    println!(
        "{:<12} {:>14.1} {:>14.1} {:>14.4}",
        "w/o sampler",
        per(without.ac_count),
        per(without.mac_count),
        energy_estimate(&without) * 1e6 / n as f64
    );
    println!("(mean over {n} test streams)");
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    input: PathBuf,
}

pub fn stats(run: &RunConfig, a: &StatsArgs) -> Result<(), Failure> {
    let s = read_stream(&a.input, run)?;
    let r = stream_stats(&s);
    let SensorSize { width, height } = s.sensor();
    println!("sensor          {width}x{height}");
    println!("events          {}", r.event_count);
    println!("duration_us     {}", r.duration);
    println!("on              {}", r.on_count);
    println!("off             {}", r.off_count);
    println!("zero_bin_frac   {:.6}", r.zero_bin_fraction);
    println!("silent_px_frac  {:.6}", r.silent_pixel_fraction);
    Ok(())
}
