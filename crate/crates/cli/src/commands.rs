use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use emf_core::backbone::{init_model, Form, LstmStateSet, Model, Parameters};
use emf_core::detection::{postprocess, Detection, GtBox};
use emf_core::encoder::{encode_stacked_histogram, encode_windows, flatten_volume, EncoderConfig};
use emf_core::evaluation::{map_50_95, EvalProtocol, EvalResult, Framed};
use emf_core::event_io::{
    label_window, read_events, read_labels, window_events_aligned, EventFormat, EventStream,
    LabelAlignment, LabeledBox,
};
use emf_core::fsutil::write_atomic;
use emf_core::reparam::{fuse_model, verify_fusion, FusionReport};
use emf_core::tensor_file::write_tensor_file;
use emf_core::weights::{load_weights, save_weights, WeightsMeta};
use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchReport};
use crate::config::{ConfigArgs, RunConfig};

/// Fusion verification exceeded its tolerance. Mapped to exit code 2.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "fusion verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

/// One line of a detections file. Coordinates are sensor pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRow {
    pub window_t0: u64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: u32,
    pub score: f64,
}

impl DetectionRow {
    pub fn new(window_t0: u64, d: &Detection) -> Self {
        DetectionRow {
            window_t0,
            cx: d.bbox.cx,
            cy: d.bbox.cy,
            w: d.bbox.w,
            h: d.bbox.h,
            class_id: d.class_id,
            score: d.score,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: emf_core::detection::BBox::new(self.cx, self.cy, self.w, self.h),
            class_id: self.class_id,
            score: self.score,
        }
    }
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRow>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn load_events(path: &Path, geometry: Option<(u16, u16)>) -> Result<EventStream> {
    let format = EventFormat::from_path(path, geometry)?;
    Ok(read_events(path, format)?)
}

#[derive(Debug, Clone)]
pub struct InitArgs {
    pub config: ConfigArgs,
    pub out: PathBuf,
    pub sensor: Option<(u16, u16)>,
}

/// Writes seeded training-form weights. Returns the parameter count.
pub fn run_init(args: &InitArgs) -> Result<usize> {
    let cfg = args.config.resolve()?;
    let model = init_model(&cfg.model, cfg.seed)?;
    let meta = WeightsMeta {
        encoder: Some(cfg.encoder),
        sensor: args.sensor.map(|(w, h)| [w, h]),
        seed: Some(cfg.seed),
    };
    save_weights(&args.out, &model, &meta)?;
    Ok(model.param_count())
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowEntry {
    pub file: String,
    pub t0: u64,
    pub events: usize,
    pub labels: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EncodeIndex {
    pub encoder: EncoderConfig,
    pub sensor: [u16; 2],
    pub tensor_shape: [usize; 3],
    pub windows: Vec<WindowEntry>,
}

#[derive(Debug, Clone)]
pub struct EncodeArgs {
    pub config: ConfigArgs,
    pub events: PathBuf,
    pub sensor: Option<(u16, u16)>,
    pub labels: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// One tensor file per window plus `index.json`.
pub fn run_encode(args: &EncodeArgs) -> Result<EncodeIndex> {
    let cfg = args.config.resolve()?;
    let stream = load_events(&args.events, args.sensor)?;
    let labels = match &args.labels {
        Some(p) => read_labels(p)?,
        None => Vec::new(),
    };
    let windows = window_events_aligned(
        &stream,
        cfg.encoder.dt_us,
        &labels,
        LabelAlignment::WindowEnd,
    )?;
    if windows.is_empty() {
        eprintln!(
            "warning: {} holds no events; no tensors written",
            args.events.display()
        );
    }
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let volumes = encode_windows(&windows, &cfg.encoder)?;
    let (h, w) = cfg.encoder.output_size(stream.width, stream.height);
    let mut entries = Vec::with_capacity(windows.len());
    for (i, (win, vol)) in windows.iter().zip(&volumes).enumerate() {
        let file = format!("window_{i:06}.emft");
        write_tensor_file(&args.out_dir.join(&file), &flatten_volume(vol))?;
        entries.push(WindowEntry {
            file,
            t0: win.t0,
            events: win.events.len(),
            labels: win.labels.len(),
        });
    }
    let index = EncodeIndex {
        encoder: cfg.encoder,
        sensor: [stream.width, stream.height],
        tensor_shape: [cfg.encoder.channels(), h, w],
        windows: entries,
    };
    write_json(&args.out_dir.join("index.json"), &index)?;
    Ok(index)
}

#[derive(Debug, Clone)]
pub struct InferArgs {
    pub config: ConfigArgs,
    pub weights: PathBuf,
    pub events: PathBuf,
    pub sensor: Option<(u16, u16)>,
    pub out: PathBuf,
    pub fused: bool,
    pub score_thr: Option<f64>,
    pub iou_thr: Option<f64>,
    pub max_dets: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferSummary {
    pub form: Form,
    pub windows: usize,
    pub detections: usize,
    pub encoder: EncoderConfig,
    pub postprocess: emf_core::detection::PostProcess,
}

fn encoder_overridden(c: &ConfigArgs) -> bool {
    c.bins.is_some()
        || c.dt_ms.is_some()
        || c.divisor.is_some()
        || c.protocol.is_some()
        || c.config.is_some()
}

/// Model in the requested form: train-form weights are fused on the fly
/// for `--fused`; fused weights cannot run as a training-form model.
fn model_in_form(model: Model, fused: bool) -> Result<Model> {
    match (model.form, fused) {
        (Form::Train, true) => Ok(fuse_model(&model)?),
        (Form::Fused, false) => bail!("weights are in fused form; pass --fused to run them"),
        _ => Ok(model),
    }
}

pub fn run_infer(args: &InferArgs) -> Result<InferSummary> {
    let mut cfg = args.config.resolve()?;
    let (model, meta) = load_weights(&args.weights)?;
    if let Some(enc) = meta.encoder {
        if encoder_overridden(&args.config) && enc != cfg.encoder {
            bail!(
                "encoder settings {:?} differ from those stored with the weights {:?}",
                cfg.encoder,
                enc
            );
        }
        cfg.encoder = enc;
    }
    if model.config.input_channels != cfg.encoder.channels() {
        bail!(
            "weights expect {} input channels, encoder produces {}",
            model.config.input_channels,
            cfg.encoder.channels()
        );
    }
    if let Some(t) = args.score_thr {
        cfg.postprocess.score_thr = t;
    }
    if let Some(t) = args.iou_thr {
        cfg.postprocess.iou_thr = t;
    }
    if let Some(n) = args.max_dets {
        cfg.postprocess.max_detections = n;
    }
    let pp = &cfg.postprocess;
    if !(0.0..=1.0).contains(&pp.score_thr) || !(0.0..=1.0).contains(&pp.iou_thr) {
        bail!("score and IoU thresholds must lie in [0, 1], got {pp:?}");
    }
    let stream = load_events(&args.events, args.sensor)?;
    if let Some([w, h]) = meta.sensor {
        if (w, h) != (stream.width, stream.height) {
            bail!(
                "weights were set up for a {w}x{h} sensor but {} is {}x{}",
                args.events.display(),
                stream.width,
                stream.height
            );
        }
    }
    let model = model_in_form(model, args.fused)?;
    let windows =
        window_events_aligned(&stream, cfg.encoder.dt_us, &[], LabelAlignment::WindowEnd)?;
    let scale = cfg.encoder.spatial_divisor as f64;
    let mut out = Vec::new();
    let mut state = LstmStateSet::new();
    let mut count = 0;
    for win in &windows {
        let x = flatten_volume(&encode_stacked_histogram(win, &cfg.encoder)?);
        let (raw, next) = model.forward(&x, &state)?;
        state = next;
        for d in postprocess(&raw, &cfg.postprocess)? {
            let d = Detection {
                bbox: d.bbox.scaled(scale),
                ..d
            };
            serde_json::to_writer(&mut out, &DetectionRow::new(win.t0, &d))?;
            out.write_all(b"\n")?;
            count += 1;
        }
    }
    write_atomic(&args.out, &out)?;
    Ok(InferSummary {
        form: model.form,
        windows: windows.len(),
        detections: count,
        encoder: cfg.encoder,
        postprocess: cfg.postprocess,
    })
}

#[derive(Debug, Clone)]
pub struct FuseArgs {
    pub weights: PathBuf,
    pub out: PathBuf,
    pub verify: bool,
    pub tol: f64,
    pub inputs: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    pub report: Option<PathBuf>,
}

/// Fuses train-form weights. With `verify`, nothing is written unless the
/// check passes (the report, if requested, is written either way).
pub fn run_fuse(args: &FuseArgs) -> Result<Option<FusionReport>> {
    let (model, meta) = load_weights(&args.weights)?;
    let fused = fuse_model(&model)?;
    let report = if args.verify {
        let r = verify_fusion(&model, &fused, args.inputs, args.tol, args.shape, args.seed)?;
        if let Some(p) = &args.report {
            write_json(p, &r)?;
        }
        if !r.pass {
            return Err(VerificationFailed(format!(
                "max deviation {:.3e} > {:.1e}, first at {}",
                r.global,
                r.tolerance,
                r.first_failure.as_deref().unwrap_or("?")
            ))
            .into());
        }
        Some(r)
    } else {
        None
    };
    save_weights(&args.out, &fused, &meta)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub detections: PathBuf,
    pub labels: PathBuf,
    pub protocol: EvalProtocol,
    pub dt_us: u64,
    pub alignment: LabelAlignment,
    pub num_classes: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub dt_us: u64,
    pub alignment: LabelAlignment,
    pub result: EvalResult,
}

/// Ground truth keyed by the start time of the window each label falls in.
pub fn frame_labels(
    labels: &[LabeledBox],
    dt_us: u64,
    alignment: LabelAlignment,
) -> Vec<Framed<GtBox>> {
    labels
        .iter()
        .filter_map(|l| {
            let k = label_window(l.t, dt_us, alignment)?;
            Some(Framed {
                frame: k * dt_us,
                item: GtBox::from_label(l, 1.0),
            })
        })
        .collect()
}

pub fn run_eval(args: &EvalArgs) -> Result<EvalReport> {
    if args.dt_us == 0 {
        bail!("window length must be positive");
    }
    let rows = read_detections(&args.detections)?;
    let labels = read_labels(&args.labels)?;
    let gts = frame_labels(&labels, args.dt_us, args.alignment);
    if gts.len() < labels.len() {
        eprintln!(
            "warning: {} labels at t=0 precede every window and were skipped",
            labels.len() - gts.len()
        );
    }
    let det_classes: BTreeSet<u32> = rows.iter().map(|r| r.class_id).collect();
    let gt_classes: BTreeSet<u32> = gts.iter().map(|g| g.item.class_id).collect();
    let outside: Vec<u32> = det_classes
        .symmetric_difference(&gt_classes)
        .copied()
        .filter(|&c| c as usize >= args.num_classes)
        .collect();
    if !outside.is_empty() {
        eprintln!(
            "warning: class ids {outside:?} lie outside 0..{}; evaluating the union",
            args.num_classes
        );
    }
    let dets: Vec<Framed<Detection>> = rows
        .iter()
        .map(|r| Framed {
            frame: r.window_t0,
            item: r.detection(),
        })
        .collect();
    let result = map_50_95(&dets, &gts, &args.protocol, args.num_classes);
    let report = EvalReport {
        dt_us: args.dt_us,
        alignment: args.alignment,
        result,
    };
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub config: ConfigArgs,
    pub weights: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub iters: usize,
    pub warmup: usize,
    pub fused: bool,
    pub end_to_end: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchOutput {
    pub config: RunConfig,
    pub report: BenchReport,
}

pub fn run_bench(args: &BenchArgs) -> Result<BenchOutput> {
    if args.iters == 0 {
        bail!("--iters must be at least 1");
    }
    let mut cfg = args.config.resolve()?;
    let model = match &args.weights {
        Some(p) => {
            let (m, meta) = load_weights(p)?;
            if let Some(enc) = meta.encoder {
                cfg.encoder = enc;
            }
            cfg.model = m.config.clone();
            m
        }
        None => init_model(&cfg.model, cfg.seed)?,
    };
    let model = if args.fused && model.form == Form::Train {
        fuse_model(&model)?
    } else {
        model
    };
    let shape = [model.config.input_channels, args.height, args.width];
    let samples = if args.end_to_end {
        let d = cfg.encoder.spatial_divisor as usize;
        let sensor = (
            u16::try_from(args.width * d).context("sensor width too large")?,
            u16::try_from(args.height * d).context("sensor height too large")?,
        );
        bench::time_end_to_end(
            &model,
            &cfg.encoder,
            sensor,
            &cfg.postprocess,
            args.warmup,
            args.iters,
        )?
    } else {
        let x = bench::bench_input(shape[0], shape[1], shape[2], cfg.seed);
        bench::time_forward(&model, &x, args.warmup, args.iters)?
    };
    let out = BenchOutput {
        config: cfg,
        report: bench::report(&model, shape, args.warmup, args.end_to_end, &samples),
    };
    if let Some(p) = &args.out {
        write_json(p, &out)?;
    }
    Ok(out)
}
