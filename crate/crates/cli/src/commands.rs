use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rwgcn_core::engine::{compute_apd, compute_aps, measure_throughput, split_windows};
use rwgcn_core::io::{
    from_tensor, load_checkpoint, parse_clip_file, read_clips_jsonl, save_checkpoint, serialize_clip, to_tensor,
    ClipRecord, FileConfig,
};
use rwgcn_core::net::count_parameters;
use rwgcn_core::noise::{inject_spatial_noise, inject_temporal_noise, repeat_pad, NoiseConfig};
use rwgcn_core::train::{
    make_toy_dataset, run_gradcheck, toy_network_config, train, GrowPlan, OptimizerConfig, TrainConfig,
};
use rwgcn_core::{Error, Network, NetworkConfig, StreamSession, Variant, WindowConfig};

use crate::{BenchArgs, ClassifyArgs, Failure, GradcheckArgs, NoiseArgs, ParamsArgs, TrainToyArgs};

const DEFAULT_WINDOW: usize = 30;
const DEFAULT_CLIP: usize = 300;
const DEFAULT_FPS: f64 = 30.0;
const DEFAULT_TOY_WINDOW: usize = 8;

/// Reads a single document, a `.jsonl` stream, or a stream on stdin (`-`).
fn read_records(input: &Path) -> Result<Vec<ClipRecord>, Error> {
    if input == Path::new("-") {
        return read_clips_jsonl(io::stdin().lock(), "stdin");
    }
    if input.extension().is_some_and(|e| e == "jsonl") {
        let reader = BufReader::new(File::open(input).map_err(|e| with_path(input, e))?);
        return read_clips_jsonl(reader, &input.display().to_string());
    }
    parse_clip_file(input).map(|r| vec![r])
}

fn checkpoint_path(flag: &Option<PathBuf>, file: &FileConfig, command: &str) -> Result<PathBuf, Error> {
    flag.clone().or_else(|| file.checkpoint.clone()).ok_or_else(|| {
        Error::Config(format!(
            "{command} needs --checkpoint or `checkpoint` in the config file"
        ))
    })
}

/// Loads `checkpoint` if given, otherwise builds a fresh standard network
/// grown to `variant`.
fn network_for(checkpoint: Option<PathBuf>, classes: usize, variant: Option<Variant>) -> Result<Network, Error> {
    match checkpoint {
        Some(path) => load_checkpoint(&path),
        None => {
            let mut net = Network::new(NetworkConfig::standard(classes))?;
            if let Some(v) = variant.filter(|v| v.uses_feedback()) {
                net.grow(v)?;
            }
            Ok(net)
        }
    }
}

fn with_path(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| with_path(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn classify(args: &ClassifyArgs, file: &FileConfig) -> Result<(), Failure> {
    let net = load_checkpoint(&checkpoint_path(&args.checkpoint, file, "classify")?)?;
    let mode = args.variant.or(file.variant).unwrap_or(net.variant());
    let window_len = args
        .window
        .window_len
        .or(file.window.window_len)
        .unwrap_or(DEFAULT_WINDOW);
    let records = read_records(&args.input)?;
    let mut out = output(&None)?;
    for (i, record) in records.iter().enumerate() {
        let clip = to_tensor(record, args.people)?;
        if clip.frames() == 0 {
            return Err(Error::Data(format!("clip {i} has no frames")).into());
        }
        let clip_len = args
            .window
            .clip_len
            .or(file.window.clip_len)
            .unwrap_or_else(|| clip.frames().div_ceil(window_len.max(1)) * window_len);
        let fps = args.window.fps_in.or(file.window.fps_in).unwrap_or(record.fps);
        let config = WindowConfig::new(clip_len, window_len, fps, mode)?;
        let clip = repeat_pad(&clip, clip_len)?;
        let mut session = StreamSession::new(config)?;
        for window in split_windows(&clip, &config)? {
            writeln!(out, "{}", session.step(&net, &window)?.to_json_line())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn bench(args: &BenchArgs, file: &FileConfig) -> Result<(), Failure> {
    let variant = args.variant.or(file.variant);
    let net = network_for(
        args.checkpoint.clone().or(file.checkpoint.clone()),
        args.classes,
        variant,
    )?;
    let mode = variant.unwrap_or(net.variant());
    let clip_len = args.window.clip_len.or(file.window.clip_len).unwrap_or(DEFAULT_CLIP);
    let window_len = args
        .window
        .window_len
        .or(file.window.window_len)
        .unwrap_or(DEFAULT_WINDOW);
    let fps = args.window.fps_in.or(file.window.fps_in).unwrap_or(DEFAULT_FPS);
    let config = WindowConfig::new(clip_len, window_len, fps, mode)?;

    let run = measure_throughput(&net, &config, args.people, args.duration)?;
    let cps = run.clips_per_second();
    let aps_formula = compute_aps(clip_len, window_len, cps)?;
    let apd = compute_apd(fps, window_len)?;
    println!("T,W,fps_in,cps_in,aps_formula,aps_measured,apd_seconds");
    println!(
        "{clip_len},{window_len},{fps},{cps},{aps_formula},{},{apd}",
        run.events_per_second()
    );
    Ok(())
}

pub fn noise(args: &NoiseArgs, file: &FileConfig) -> Result<(), Failure> {
    let base = file.noise.resolve(NoiseConfig::default());
    let config = NoiseConfig {
        spatial_drop_p: args.noise.spatial_drop_p.unwrap_or(base.spatial_drop_p),
        frame_drop_p: args.noise.frame_drop_p.unwrap_or(base.frame_drop_p),
        id_confusion_p: args.noise.id_confusion_p.unwrap_or(base.id_confusion_p),
        seed: args.noise.seed.unwrap_or(base.seed),
    };
    config.validate()?;
    let records = read_records(&args.input)?;
    let mut out = output(&args.output)?;
    for (i, record) in records.iter().enumerate() {
        // each clip gets its own stream so repeated clips are corrupted differently
        let cfg = NoiseConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config
        };
        let clip = to_tensor(record, args.people)?;
        let noisy = inject_temporal_noise(&inject_spatial_noise(&clip, &cfg)?, &cfg)?;
        writeln!(out, "{}", serialize_clip(&from_tensor(&noisy, record.label)?))?;
    }
    out.flush()?;
    Ok(())
}

pub fn train_toy(args: &TrainToyArgs, file: &FileConfig) -> Result<(), Failure> {
    let checkpoint = checkpoint_path(&args.checkpoint, file, "train-toy")?;
    let variant = args.variant.or(file.variant);
    let grow = match (args.grow_epoch, variant) {
        (Some(attach_epoch), v) => Some(GrowPlan {
            attach_epoch,
            variant: v.unwrap_or(Variant::Semantic),
        }),
        (None, Some(v)) if v.uses_feedback() => {
            return Err(Error::Config(format!("variant {v} needs --grow-epoch")).into());
        }
        (None, _) => None,
    };
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        window_len: args.window_len.or(file.window.window_len).unwrap_or(DEFAULT_TOY_WINDOW),
        detach_feedback: args.detach_feedback,
        grow,
        seed: args.seed,
        ..Default::default()
    };
    let opt = OptimizerConfig {
        lr: args.lr,
        ..Default::default()
    };
    let data = make_toy_dataset(args.samples, args.frames, args.seed)?;
    let mut net = Network::new(toy_network_config(args.seed))?;
    let report = train(&mut net, &data, &opt, &config)?;

    let mut out = output(&args.metrics)?;
    writeln!(out, "epoch,lr,loss,acc")?;
    for m in &report.metrics {
        writeln!(out, "{},{},{},{}", m.epoch, m.lr, m.loss, m.acc)?;
    }
    out.flush()?;
    if let Some(g) = report.grow {
        eprintln!(
            "attached at epoch {}: loss {} -> {}",
            g.epoch, g.loss_before, g.loss_after
        );
    }
    save_checkpoint(&net, &checkpoint)?;
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let mut failed = 0;
    println!("seed,check,max_rel_err,tolerance,checked,skipped,status");
    for seed in args.first_seed..args.first_seed + args.seeds {
        for r in run_gradcheck(seed)? {
            let status = if r.passed() { "pass" } else { "fail" };
            failed += usize::from(!r.passed());
            println!(
                "{seed},{},{:e},{:e},{},{},{status}",
                r.name, r.max_rel_err, r.tolerance, r.checked, r.skipped
            );
        }
    }
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

pub fn params(args: &ParamsArgs, file: &FileConfig) -> Result<(), Failure> {
    let net = network_for(
        args.checkpoint.clone().or(file.checkpoint.clone()),
        args.classes,
        args.variant.or(file.variant),
    )?;
    let mut out = io::stdout().lock();
    for (layer, n) in net.parameter_breakdown() {
        writeln!(out, "{layer}\t{n}")?;
    }
    writeln!(out, "total\t{}", count_parameters(&net))?;
    Ok(())
}
