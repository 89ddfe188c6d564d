use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dancegen_core::checkpoint::{file_hash, load_model, save_model, Checkpoint};
use dancegen_core::codec::encode_frames;
use dancegen_core::conditioning::tokenize;
use dancegen_core::dataset::{load_dataset, load_manifest, MANIFEST_FILE};
use dancegen_core::frame::{load_frame_dir, save_gif};
use dancegen_core::metrics::{evaluate_clip, MetricReport};
use dancegen_core::train::{default_codec, StepLog};
use dancegen_core::{
    build_dataset, extract_beats, generate_video, train_stage1, train_stage2, BeatVector, DType, DanceModel, GenerateConfig,
    Image, PoseMask, TrainConfig, Waveform,
};

#[derive(Parser, Debug)]
#[command(name = "dancegen", version, about = "Music-driven sprite animation with a two-stage latent diffusion model")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic (video, music, caption) dataset.
    GenData {
        #[arg(long)]
        clips: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-frame beat vector of a WAV file as JSON.
    ExtractBeats {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        fps: f64,
        #[arg(long)]
        frames: usize,
    },
    /// Train stage 1 (appearance) or stage 2 (temporal, needs --init).
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Animate a reference image to music.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Compare generated frames with reference frames.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 or stage-2 checkpoint whose encoder supplies Fréchet features.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<dancegen_core::Error> for Failure {
    fn from(e: dancegen_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

const SIDECAR: &str = "sample.json";

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData { clips, seed, out } => {
            if clips == 0 {
                return Err(Failure::Usage("--clips must be at least 1".into()));
            }
            let m = build_dataset(clips, seed, &out)?;
            println!("wrote {} clips to {}", m.entries.len(), out.display());
            Ok(())
        }
        Command::ExtractBeats { audio, fps, frames } => {
            let w = Waveform::read_wav(&audio)?;
            println!("{}", extract_beats(&w, fps, frames)?.to_json());
            Ok(())
        }
        Command::Train {
            stage,
            config,
            data,
            out,
            init,
        } => train(stage, &config, &data, &out, init.as_deref()),
        Command::Sample {
            ckpt,
            reference,
            mask,
            audio,
            caption,
            frames,
            seed,
            out,
            guidance,
        } => {
            let mut cfg = GenerateConfig {
                seed,
                ..Default::default()
            };
            if let Some(g) = guidance {
                cfg.guidance = g;
            }
            sample(&ckpt, &reference, &mask, &audio, &caption, frames, &cfg, &out)
        }
        Command::Eval { pred, truth, out, ckpt } => eval(&pred, &truth, &out, ckpt.as_deref()),
    }
}

fn train(stage: u8, config: &Path, data: &Path, out: &Path, init: Option<&Path>) -> Outcome {
    if !(1..=2).contains(&stage) {
        return Err(Failure::Usage(format!("--stage must be 1 or 2, got {stage}")));
    }
    if stage == 2 && init.is_none() {
        return Err(Failure::Usage("stage 2 needs --init <stage-1 checkpoint>".into()));
    }
    let mut cfg = TrainConfig::load(config)?;
    cfg.stage = stage;
    let clips = load_dataset(data)?;

    let log_path = out.with_extension("log");
    let mut lines = String::new();
    let every = cfg.checkpoint_every;
    let mut hook = |l: &StepLog, m: &DanceModel| -> dancegen_core::Result<()> {
        println!("{}", l.line());
        lines.push_str(&l.line());
        lines.push('\n');
        if every > 0 && (l.step + 1) % every == 0 {
            save_model(m, &out.with_extension(format!("step{}", l.step + 1)))?;
        }
        Ok(())
    };
    let outcome = if stage == 1 {
        train_stage1(&clips, &cfg, &mut hook)?
    } else {
        let ck = Checkpoint::load(init.expect("checked above"))?;
        train_stage2(&clips, &cfg, &ck, &mut hook)?
    };
    std::fs::write(&log_path, lines).map_err(|e| Failure::Runtime(format!("{}: {e}", log_path.display())))?;
    save_model(&outcome.model, out)?;
    eprintln!("saved {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    ckpt: &Path,
    reference: &Path,
    mask: &Path,
    audio: &Path,
    caption: &str,
    frames: usize,
    cfg: &GenerateConfig,
    out: &Path,
) -> Outcome {
    if frames == 0 {
        return Err(Failure::Usage("--frames must be at least 1".into()));
    }
    let model = load_model(ckpt, DType::F32)?;
    let codec = default_codec()?;
    let r = Image::load_png(reference)?;
    let m = PoseMask::load_png(mask)?;
    let w = Waveform::read_wav(audio)?;
    let gen = generate_video(&model, &codec, &r, &m, &w, &tokenize(caption), frames, cfg)?;

    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    for (i, f) in gen.frames.iter().enumerate() {
        f.save_png(&out.join(format!("frame_{i:05}.png")))?;
    }
    save_gif(&gen.frames, cfg.fps, &out.join("preview.gif"))?;
    let sidecar = serde_json::json!({
        "seed": cfg.seed,
        "checkpoint": ckpt.display().to_string(),
        "checkpoint_sha256": file_hash(ckpt)?,
        "caption": caption,
        "frames": frames,
        "config": {
            "clip_frames": cfg.clip_frames,
            "ddim_steps": cfg.ddim_steps,
            "guidance": cfg.guidance,
            "fps": cfg.fps,
        },
        "beats": gen.beats.bits(),
    });
    write_json(&out.join(SIDECAR), &sidecar)?;
    println!("wrote {frames} frames to {}", out.display());
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Outcome {
    let text = serde_json::to_string_pretty(v).expect("json value serialises");
    std::fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Clip directories under `root`: `root` itself when it holds frames,
/// otherwise its subdirectories that do.
fn clip_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    if root.join("frame_00000.png").exists() {
        let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, root.to_path_buf())]);
    }
    let rd = std::fs::read_dir(root).map_err(|e| Failure::Runtime(format!("{}: {e}", root.display())))?;
    let mut out: Vec<(String, PathBuf)> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("frame_00000.png").exists())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Failure::Runtime(format!("{}: no frame directories", root.display())));
    }
    Ok(out)
}

/// Beats for a predicted clip: the sample sidecar if present, else the audio
/// of the matching dataset clip.
fn clip_beats(pred: &Path, truth: &Path, frames: usize) -> Result<BeatVector, Failure> {
    let sidecar = pred.join(SIDECAR);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Failure::Runtime(format!("{}: {e}", sidecar.display())))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", sidecar.display())))?;
        let bits: Vec<u8> = serde_json::from_value(v["beats"].clone())
            .map_err(|e| Failure::Runtime(format!("{}: beats: {e}", sidecar.display())))?;
        return Ok(BeatVector::new(bits)?.window(0, frames));
    }
    let root = truth.parent().unwrap_or(Path::new("."));
    if root.join(MANIFEST_FILE).exists() {
        let m = load_manifest(root)?;
        let name = truth.file_name().map(|n| n.to_string_lossy().into_owned());
        if let Some(e) = m.entries.iter().find(|e| Some(&e.frame_dir) == name.as_ref()) {
            let w = Waveform::read_wav(&root.join(&e.audio_path))?;
            return Ok(extract_beats(&w, e.fps, frames)?);
        }
    }
    Err(Failure::Runtime(format!(
        "no beats for {}: expected {SIDECAR} or a dataset clip as --truth",
        pred.display()
    )))
}

/// 4×4 average-pooled RGB, the checkpoint-free feature for the Fréchet term.
fn pooled_features(frames: &[Image]) -> Vec<Vec<f64>> {
    const G: usize = 4;
    frames
        .iter()
        .map(|f| {
            let mut acc = vec![0.0; G * G * 3];
            let mut cnt = vec![0usize; G * G];
            for y in 0..f.height() {
                for x in 0..f.width() {
                    let cell = (y * G / f.height()) * G + x * G / f.width();
                    for (c, v) in f.get(y, x).into_iter().enumerate() {
                        acc[cell * 3 + c] += v as f64;
                    }
                    cnt[cell] += 1;
                }
            }
            acc.iter().enumerate().map(|(i, v)| v / cnt[i / 3].max(1) as f64).collect()
        })
        .collect()
}

fn eval(pred: &Path, truth: &Path, out: &Path, ckpt: Option<&Path>) -> Outcome {
    let model = ckpt.map(|p| load_model(p, DType::F32)).transpose()?;
    let codec = default_codec()?;
    let features = |frames: &[Image]| -> Result<Vec<Vec<f64>>, Failure> {
        match &model {
            Some(m) => Ok(m.frame_features(&encode_frames(frames, &codec)?)?),
            None => Ok(pooled_features(frames)),
        }
    };
    let preds = clip_dirs(pred)?;
    let single = preds.len() == 1 && pred.join("frame_00000.png").exists();
    let mut reports = Vec::new();
    for (name, pdir) in &preds {
        let tdir = if single { truth.to_path_buf() } else { truth.join(name) };
        let p = load_frame_dir(pdir)?;
        let t = load_frame_dir(&tdir)?;
        if p.len() > t.len() {
            return Err(Failure::Runtime(format!("{name}: {} predicted frames but only {} reference frames", p.len(), t.len())));
        }
        let t = &t[..p.len()];
        let beats = clip_beats(pdir, &tdir, p.len())?;
        let r = evaluate_clip(&p, t, &beats, &features(&p)?, &features(t)?)?;
        reports.push((name.clone(), r));
    }
    let n = reports.len() as f64;
    let mean = MetricReport {
        psnr_db: reports.iter().map(|(_, r)| r.psnr_db).sum::<f64>() / n,
        ssim: reports.iter().map(|(_, r)| r.ssim).sum::<f64>() / n,
        frechet: reports.iter().map(|(_, r)| r.frechet).sum::<f64>() / n,
        beat_alignment: reports.iter().map(|(_, r)| r.beat_alignment).sum::<f64>() / n,
        n_frames: reports.iter().map(|(_, r)| r.n_frames).sum(),
    };
    let clips: Vec<serde_json::Value> = reports
        .iter()
        .map(|(name, r)| {
            let mut v = serde_json::to_value(r).expect("report serialises");
            v["clip"] = serde_json::Value::String(name.clone());
            v
        })
        .collect();
    let json = serde_json::json!({
        "features": if ckpt.is_some() { "checkpoint" } else { "pooled_rgb" },
        "clips": clips,
        "mean": serde_json::to_value(&mean).expect("report serialises"),
    });
    write_json(out, &json)?;
    println!("{}", serde_json::to_string(&json["mean"]).expect("json"));
    Ok(())
}
