//! `mvfc` — multi-view keypoint face video codec and evaluation harness.
//!
//! Subcommands: select-views, encode, decode, evaluate, rd-curve,
//! h264-baseline. See the repository README for a worked end-to-end example.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mvfc_core::aggregation::{Aggregator, PoolMode, PoolParams, SaParams};
use mvfc_core::bitstream::{read_session, write_session, SessionHeader, SourceViewRecord};
use mvfc_core::config::{load_config, PipelineConfig};
use mvfc_core::h264::{crf_sweep, H264Encoder};
use mvfc_core::io::{format_swap_record, read_keypoint_records, read_landmark_track, FrameSet};
use mvfc_core::metrics::{evaluate, ChannelMode, MetricOptions};
use mvfc_core::motion::KeypointSet;
use mvfc_core::pipeline::{precompute_views, reconstruct, Backbone};
use mvfc_core::rd::{parse_rd_csv, rd_curve, write_rd_csv, MetricDirection, RdPoint};
use mvfc_core::selection::{fps_select, random_select, SelectionState};
use mvfc_core::tensor::Tensor;
use mvfc_core::weights::WeightMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "mvfc",
    version,
    about = "Multi-view keypoint face video codec and rate-distortion harness"
)]
struct Cli {
    /// Seed for randomized components (view sampling, demo weights).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// key=value config file; keys: sigma, eps_bg, d, tau, swap_budget, fps.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Random,
    Fps,
    Reservoir,
    StreamingFps,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregatorKind {
    Mean,
    Max,
    Sa,
}

#[derive(Subcommand)]
enum Command {
    /// Choose K source views from a landmark track.
    SelectViews {
        #[arg(long, value_enum)]
        strategy: Strategy,
        #[arg(long, short)]
        k: usize,
        /// Landmark file: `L=<count>` header, then `frame, x0, y0, ...` lines.
        #[arg(long)]
        landmarks: PathBuf,
        /// Standardize landmark features before FPS.
        #[arg(long)]
        normalize: bool,
        /// Append streaming admit/swap records to this file.
        #[arg(long)]
        swap_log: Option<PathBuf>,
    },
    /// Encode keypoints and source views into a .mvfc session.
    Encode {
        /// Keypoint file: `frame, x0, y0, ..., x9, y9` per line.
        #[arg(long)]
        keypoints: PathBuf,
        /// View manifest: `frame_index, image_path` per line; the image
        /// bytes are carried opaquely and their size sets the view bits.
        #[arg(long)]
        views: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Decode a .mvfc session into reconstructed frames.
    Decode {
        #[arg(long, short)]
        input: PathBuf,
        /// Keypoint file covering the source-view frame indices.
        #[arg(long)]
        keypoints: PathBuf,
        /// Output frame-set stem (writes `<stem>.rgb` + `<stem>.desc`).
        #[arg(long, short)]
        output: PathBuf,
        /// Also write per-frame PNGs into this directory.
        #[arg(long)]
        png: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mean")]
        aggregator: AggregatorKind,
        /// Weight container for backbone/aggregator parameters; without it
        /// the analytic reference backbone runs (sa uses seeded weights).
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Compare two frame sequences (frame-set stems or PNG directories).
    Evaluate {
        reference: PathBuf,
        candidate: PathBuf,
        /// Compute on BT.601 luma instead of averaged RGB.
        #[arg(long)]
        luma: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Sort rate-distortion points and extract the Pareto front.
    RdCurve {
        /// CSV with columns rate_kbps,bits_per_frame,metric,label.
        #[arg(long, short)]
        input: PathBuf,
        /// Whether lower or higher metric values are better.
        #[arg(long, default_value = "lower")]
        direction: String,
        /// Output CSV path; the front goes to `<output>.pareto.csv`.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Encode a video (or frame set) at several CRFs and measure the rates.
    H264Baseline {
        /// Input video file, or a frame-set stem to be losslessly muxed.
        #[arg(long, short)]
        input: PathBuf,
        /// Comma-separated CRF list, e.g. 40,35,30,25.
        #[arg(long, default_value = "40,35,30,25")]
        crf: String,
        /// Frame width/height; required for video-file input.
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        /// Working directory for encoded outputs (kept).
        #[arg(long)]
        workdir: PathBuf,
        /// Write measured points as CSV here instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Also save decoded frames as `<workdir>/crf<N>` frame sets.
        #[arg(long)]
        dump_frames: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => load_config(path).with_context(|| format!("config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::SelectViews {
            strategy,
            k,
            landmarks,
            normalize,
            swap_log,
        } => select_views(strategy, k, &landmarks, normalize, swap_log, cli.seed, &cfg),
        Command::Encode {
            keypoints,
            views,
            output,
        } => encode(&keypoints, &views, &output, &cfg),
        Command::Decode {
            input,
            keypoints,
            output,
            png,
            aggregator,
            weights,
        } => decode(
            &input, &keypoints, &output, png, aggregator, weights, cli.seed, &cfg,
        ),
        Command::Evaluate {
            reference,
            candidate,
            luma,
            output,
        } => run_evaluate(&reference, &candidate, luma, output),
        Command::RdCurve {
            input,
            direction,
            output,
        } => run_rd_curve(&input, &direction, &output),
        Command::H264Baseline {
            input,
            crf,
            width,
            height,
            workdir,
            output,
            dump_frames,
        } => h264_baseline_cmd(
            &input,
            &crf,
            width,
            height,
            &workdir,
            output,
            dump_frames,
            &cfg,
        ),
    }
}

fn select_views(
    strategy: Strategy,
    k: usize,
    landmarks: &Path,
    normalize: bool,
    swap_log: Option<PathBuf>,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<()> {
    let track = read_landmark_track(landmarks)
        .with_context(|| format!("landmarks {}", landmarks.display()))?;
    let track = if normalize {
        track.standardized()
    } else {
        track
    };
    let mut log_lines = Vec::new();
    let chosen: Vec<u32> = match strategy {
        Strategy::Random => random_select(track.len(), k, seed)?
            .into_iter()
            .map(|i| track.frame_ids()[i])
            .collect(),
        Strategy::Fps => fps_select(&track, k)?
            .into_iter()
            .map(|i| track.frame_ids()[i])
            .collect(),
        Strategy::Reservoir => {
            let mut state = SelectionState::new(k, seed)?;
            for i in 0..track.len() {
                let d = state.reservoir_update(track.frame_ids()[i], track.feature(i).to_vec())?;
                log_lines.extend(format_swap_record(&d));
            }
            state.chosen_indices()
        }
        Strategy::StreamingFps => {
            let mut state = SelectionState::new(k, seed)?.with_margin(cfg.tau);
            if let Some(budget) = cfg.swap_budget {
                state = state.with_swap_budget(budget);
            }
            for i in 0..track.len() {
                let d =
                    state.streaming_fps_update(track.frame_ids()[i], track.feature(i).to_vec())?;
                log_lines.extend(format_swap_record(&d));
            }
            state.chosen_indices()
        }
    };
    if let Some(path) = swap_log {
        use std::io::Write;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("swap log {}", path.display()))?;
        for line in &log_lines {
            writeln!(file, "{line}")?;
        }
    }
    for idx in chosen {
        println!("{idx}");
    }
    Ok(())
}

fn read_view_manifest(path: &Path) -> Result<Vec<(u32, Vec<u8>)>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("manifest {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (idx, img_path) = line
            .split_once(',')
            .ok_or_else(|| anyhow!("manifest line {}: expected `frame, path`", lineno + 1))?;
        let frame_index: u32 = idx
            .trim()
            .parse()
            .map_err(|_| anyhow!("manifest line {}: bad frame index `{}`", lineno + 1, idx))?;
        let img_path = base.join(img_path.trim());
        let bytes = std::fs::read(&img_path)
            .with_context(|| format!("view image {}", img_path.display()))?;
        views.push((frame_index, bytes));
    }
    if views.is_empty() {
        bail!("manifest {} lists no views", path.display());
    }
    Ok(views)
}

fn encode(keypoints: &Path, views: &Path, output: &Path, cfg: &PipelineConfig) -> Result<()> {
    let records = read_keypoint_records(keypoints)
        .with_context(|| format!("keypoints {}", keypoints.display()))?;
    let view_payloads = read_view_manifest(views)?;
    let header = SessionHeader::new(
        view_payloads
            .into_iter()
            .map(|(idx, bytes)| SourceViewRecord::from_bytes(idx, bytes))
            .collect(),
    )?;
    let file =
        std::fs::File::create(output).with_context(|| format!("output {}", output.display()))?;
    let ledger = write_session(std::io::BufWriter::new(file), &header, &records)?;
    let (bits_per_frame, kbps) =
        mvfc_core::bitstream::amortized_rate(&ledger, ledger.frames_sent.max(1), cfg.fps)?;
    println!(
        "encoded {} frames, {} views ({} view bits, {} coordinate bits, {} overhead bits)",
        ledger.frames_sent,
        header.view_count(),
        ledger.source_view_bits,
        ledger.coordinate_bits(),
        ledger.container_overhead_bits
    );
    println!(
        "amortized over {} frames at {} fps: {bits_per_frame:.2} bits/frame = {kbps:.3} kbps",
        ledger.frames_sent.max(1),
        cfg.fps
    );
    Ok(())
}

fn image_bytes_to_tensor(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)
        .context("view payload is not a decodable image")?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, pixel) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * w * h + p] = pixel.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

fn tensor_to_png(t: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (t.at(&[c, y, x]).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn build_aggregator(
    kind: AggregatorKind,
    channels: usize,
    weights: Option<&WeightMap>,
    seed: u64,
) -> Result<Aggregator> {
    Ok(match kind {
        AggregatorKind::Mean | AggregatorKind::Max => {
            let mode = if matches!(kind, AggregatorKind::Mean) {
                PoolMode::Mean
            } else {
                PoolMode::Max
            };
            match weights {
                Some(w) if w.get("pool.res0.conv1.kernel").is_some() => {
                    Aggregator::Pool(PoolParams::from_weights(w, mode)?)
                }
                _ => Aggregator::Pool(PoolParams::passthrough(channels, mode)),
            }
        }
        AggregatorKind::Sa => match weights {
            Some(w) if w.get("sa.block0.wq").is_some() => {
                Aggregator::SelfAttention(SaParams::from_weights(w)?)
            }
            _ => {
                // Demo-mode attention: small seeded weights.
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Aggregator::SelfAttention(SaParams::random(channels, channels, &mut rng, 0.2))
            }
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn decode(
    input: &Path,
    keypoints: &Path,
    output: &Path,
    png: Option<PathBuf>,
    aggregator_kind: AggregatorKind,
    weights_path: Option<PathBuf>,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<()> {
    let stream = std::fs::read(input).with_context(|| format!("input {}", input.display()))?;
    let (header, payloads) = read_session(&stream)?;
    let kp_records: BTreeMap<u32, KeypointSet> = read_keypoint_records(keypoints)
        .with_context(|| format!("keypoints {}", keypoints.display()))?
        .into_iter()
        .collect();

    let weights = match &weights_path {
        Some(p) => Some(WeightMap::load(p).with_context(|| format!("weights {}", p.display()))?),
        None => None,
    };
    let backbone = match &weights {
        Some(w) if w.get("enc.conv.kernel").is_some() => Backbone::from_weights(w)?,
        _ => Backbone::reference(),
    };

    let mut images = Vec::new();
    let mut view_kps = Vec::new();
    for view in &header.views {
        let tensor = image_bytes_to_tensor(&view.payload)
            .with_context(|| format!("source view {}", view.frame_index))?;
        let kp = kp_records
            .get(&view.frame_index)
            .ok_or_else(|| {
                anyhow!(
                    "keypoint file has no record for source view frame {}",
                    view.frame_index
                )
            })?
            .clone();
        images.push((view.frame_index, tensor));
        view_kps.push(kp);
    }
    let bank = precompute_views(&images, &view_kps, &backbone)?;
    let aggregator = build_aggregator(
        aggregator_kind,
        bank.feature_channels(),
        weights.as_ref(),
        seed,
    )?;

    let (fh, fw) = (images[0].1.shape()[1], images[0].1.shape()[2]);
    let mut out_frames = FrameSet::empty(fw, fh)?;
    if let Some(dir) = &png {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for payload in &payloads {
        let kp = payload.keypoints()?;
        let frame = reconstruct(&bank, &kp, &aggregator, &backbone, cfg)?;
        if let Some(dir) = &png {
            tensor_to_png(
                &frame,
                &dir.join(format!("frame_{:05}.png", payload.frame_index)),
            )?;
        }
        out_frames.push_tensor(&frame)?;
    }
    out_frames.save(output)?;
    println!(
        "decoded {} frames from {} source views into {}.rgb",
        out_frames.frame_count(),
        header.view_count(),
        output.display()
    );
    Ok(())
}

/// Load frames from a frame-set stem or a directory of PNG/JPEG files.
fn load_frames(path: &Path) -> Result<FrameSet> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        entries.sort();
        if entries.is_empty() {
            bail!("{} contains no image files", path.display());
        }
        let mut set: Option<FrameSet> = None;
        for entry in entries {
            let bytes =
                std::fs::read(&entry).with_context(|| format!("reading {}", entry.display()))?;
            let tensor = image_bytes_to_tensor(&bytes)
                .with_context(|| format!("decoding {}", entry.display()))?;
            let (h, w) = (tensor.shape()[1], tensor.shape()[2]);
            let target = set.get_or_insert(FrameSet::empty(w, h)?);
            target.push_tensor(&tensor)?;
        }
        Ok(set.expect("at least one image"))
    } else {
        Ok(FrameSet::load(path)?)
    }
}

fn run_evaluate(
    reference: &Path,
    candidate: &Path,
    luma: bool,
    output: Option<PathBuf>,
) -> Result<()> {
    let a = load_frames(reference)?;
    let b = load_frames(candidate)?;
    let opts = MetricOptions {
        channel_mode: if luma {
            ChannelMode::Luma
        } else {
            ChannelMode::Rgb
        },
    };
    let report = evaluate(&a, &b, &opts)?;
    let json = serde_json::to_string_pretty(&report)?;
    match output {
        Some(path) => {
            std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn run_rd_curve(input: &Path, direction: &str, output: &Path) -> Result<()> {
    let text =
        std::fs::read_to_string(input).with_context(|| format!("input {}", input.display()))?;
    let points = parse_rd_csv(&text)?;
    let direction: MetricDirection = direction.parse()?;
    let curve = rd_curve(&points, direction)?;

    let mut sorted_csv = Vec::new();
    write_rd_csv(&mut sorted_csv, &curve.sorted)?;
    std::fs::write(output, sorted_csv).with_context(|| format!("writing {}", output.display()))?;

    let pareto_path = {
        let mut name = output.as_os_str().to_owned();
        name.push(".pareto.csv");
        PathBuf::from(name)
    };
    let mut pareto_csv = Vec::new();
    write_rd_csv(&mut pareto_csv, &curve.pareto)?;
    std::fs::write(&pareto_path, pareto_csv)
        .with_context(|| format!("writing {}", pareto_path.display()))?;

    println!(
        "pareto front ({} of {} points):",
        curve.pareto.len(),
        curve.sorted.len()
    );
    for p in &curve.pareto {
        println!(
            "  {:>10.3} kbps  metric {:>10.4}  {}",
            p.rate_kbps, p.metric, p.label
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn h264_baseline_cmd(
    input: &Path,
    crf_list: &str,
    width: Option<usize>,
    height: Option<usize>,
    workdir: &Path,
    output: Option<PathBuf>,
    dump_frames: bool,
    cfg: &PipelineConfig,
) -> Result<()> {
    let crfs: Vec<u8> = crf_list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u8>()
                .map_err(|_| anyhow!("invalid CRF `{}`", s.trim()))
        })
        .collect::<Result<_>>()?;
    if crfs.is_empty() {
        bail!("need at least one CRF value");
    }
    std::fs::create_dir_all(workdir).with_context(|| format!("creating {}", workdir.display()))?;

    let encoder = H264Encoder::new();
    if !encoder.available() {
        bail!("external encoder `{}` is not available", encoder.binary());
    }

    // A frame-set stem is muxed into a lossless intermediate first.
    let desc = {
        let mut p = input.as_os_str().to_owned();
        p.push(".desc");
        PathBuf::from(p)
    };
    let (video, w, h) = if desc.exists() {
        let frames = FrameSet::load(input)?;
        let video = workdir.join("input_lossless.mp4");
        encoder.frames_to_video(&frames, cfg.fps, &video)?;
        (video, frames.width(), frames.height())
    } else {
        let (w, h) = match (width, height) {
            (Some(w), Some(h)) => (w, h),
            _ => bail!("--width and --height are required for video-file input"),
        };
        (input.to_path_buf(), w, h)
    };

    let points = crf_sweep(&encoder, &video, &crfs, w, h, cfg.fps, workdir)?;
    let mut rd_points = Vec::new();
    let mut table = String::new();
    for p in &points {
        if dump_frames {
            p.frames.save(workdir.join(format!("crf{}", p.crf)))?;
        }
        writeln!(
            table,
            "crf {:>2}: {:>10} bytes, {:>9.3} kbps, {:>10.1} bits/frame, {} frames",
            p.crf,
            p.encoded_bytes,
            p.kbps,
            p.bits_per_frame,
            p.frames.frame_count()
        )?;
        rd_points.push(
            RdPoint::new(
                format!("h264-crf{}", p.crf),
                p.kbps,
                p.bits_per_frame,
                f64::NAN,
            )?
            .with_frames(p.frames.frame_count() as u64),
        );
    }
    print!("{table}");
    if let Some(path) = output {
        let mut csv = Vec::new();
        write_rd_csv(&mut csv, &rd_points)?;
        std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
