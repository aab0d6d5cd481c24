use std::fs;
use std::path::{Path, PathBuf};

use lmft_core::adapt::{
    evaluate, filter_pseudolabels, format_pseudolabels, inference_throughput, label_targets, parse_pseudolabels, DropMode, EvalOptions, Sample, TrainConfig, TrainedModel, Trainer,
};
use lmft_core::bench::{environment, estimate_flops, EfficiencyReport};
use lmft_core::config::KvConfig;
use lmft_core::data::{generate_domain_pair, load_truth, load_video, oracle_probabilities, write_domain_pair, DatasetManifest, SyntheticSpec, SOURCE_MANIFEST, TARGET_MANIFEST, TARGET_TRUTH, VAL_MANIFEST};
use lmft_core::tokenizer::{Tokenizer, VideoTensor};
use lmft_core::{Sample32, TrainedModel32};

use crate::viz::render_frame;
use crate::{BenchArgs, ClipSource, CliError, Command, EvalArgs, OracleArgs, SynthArgs, TrainArgs, VizArgs};

/// Written next to the checkpoint so a run can be repeated.
pub const RUN_CONFIG_FILE: &str = "run.cfg";

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::LabelOracle(a) => label_oracle(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Viz(a) => viz(a),
    }
}

fn user_io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::User(format!("{}: {e}", path.display()))
}

fn read_config(path: Option<&Path>) -> Result<KvConfig, CliError> {
    match path {
        None => Ok(KvConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(user_io(p))?;
            KvConfig::parse(&text).map_err(|e| CliError::User(format!("{}: {e}", p.display())))
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut c = read_config(a.spec.as_deref())?;
    if let Some(s) = a.seed {
        c.set("seed", s);
    }
    let spec = SyntheticSpec::from_config(c)?;
    let pair = generate_domain_pair(&spec);
    write_domain_pair(&pair, &a.out)?;
    println!(
        "wrote {} source, {} target and {} validation clips to {}",
        pair.source_train.len(),
        pair.target_train.len(),
        pair.target_val.len(),
        a.out.display()
    );
    Ok(())
}

fn label_oracle(a: OracleArgs) -> Result<(), CliError> {
    if !(a.temp > 0.0) || !(a.noise_std >= 0.0) {
        return Err(CliError::User("--temp must be positive and --noise-std nonnegative".into()));
    }
    let truth = load_truth(&a.data.join(TARGET_TRUTH))?;
    let largest = truth.iter().map(|(_, l)| *l).max().ok_or_else(|| CliError::User("no target clips to label".into()))?;
    let classes = a.classes.unwrap_or(largest + 1);
    if classes <= largest {
        return Err(CliError::User(format!("--classes {classes} but labels go up to {largest}")));
    }
    let records = oracle_probabilities(&truth, classes, a.temp, a.noise_std, a.seed);
    fs::write(&a.out, format_pseudolabels(&records)).map_err(user_io(&a.out))?;
    println!("wrote {} pseudo-labels to {}", records.len(), a.out.display());
    Ok(())
}

fn load_samples(manifest: &Path, tok: &Tokenizer) -> Result<Vec<Sample32>, CliError> {
    let m = DatasetManifest::load(manifest)?;
    m.entries
        .iter()
        .map(|e| {
            let path = m.root.join(&e.path);
            let v = load_video(&path)?;
            Sample::new(e.video_id(), e.label, &v, tok).map_err(|err| CliError::User(format!("{}: {err}", path.display())))
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut c = read_config(a.config.as_deref())?;
    let o = &a.overrides;
    let set = |c: &mut KvConfig, k: &str, v: Option<String>| {
        if let Some(v) = v {
            c.set(k, v);
        }
    };
    set(&mut c, "seed", a.seed.map(|v| v.to_string()));
    set(&mut c, "epochs", a.epochs.map(|v| v.to_string()));
    set(&mut c, "tau_override", o.tau_override.map(|v| v.to_string()));
    set(&mut c, "drop_mode", o.drop_mode.map(|v| v.to_string()));
    set(&mut c, "gamma_c", o.gamma_c.map(|v| v.to_string()));
    set(&mut c, "lambda_t", o.lambda_t.map(|v| v.to_string()));
    set(&mut c, "lambda_L", o.lambda_l.map(|v| v.to_string()));
    let cfg = TrainConfig::take_from(&mut c)?;
    let data = match a.data {
        Some(d) => Some(d),
        None => c.take::<PathBuf>("data")?,
    };
    let labels = match a.pseudo_labels {
        Some(p) => Some(p),
        None => c.take::<PathBuf>("pseudo_labels")?,
    };
    c.finish()?;
    let data = data.ok_or_else(|| CliError::User("no dataset: pass --data or set `data=` in the config".into()))?;

    let tok = cfg.tokenizer();
    let source = load_samples(&data.join(SOURCE_MANIFEST), &tok)?;
    let target = if cfg.disable_target {
        Vec::new()
    } else {
        let path = labels.as_deref().ok_or_else(|| CliError::User("no pseudo-labels: pass --pseudo-labels or set `disable_target=true`".into()))?;
        let text = fs::read_to_string(path).map_err(user_io(path))?;
        let records = parse_pseudolabels(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        let kept = filter_pseudolabels(&records, cfg.gamma_c)?;
        label_targets(load_samples(&data.join(TARGET_MANIFEST), &tok)?, &kept)
    };
    eprintln!("training on {} source and {} pseudo-labelled target clips", source.len(), target.len());

    let epochs = cfg.epochs;
    let trained = Trainer::new(cfg.clone(), source, target)?.train(|e, t| {
        if let Some(m) = t.metrics.last() {
            eprintln!("epoch {}/{epochs}: loss {:.4}, tau {:.3}", e + 1, m.loss_da, m.tau);
        }
    })?;
    trained.save(&a.out)?;

    let mut run_cfg: String = cfg.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    run_cfg.push_str(&format!("data={}\n", data.display()));
    if let Some(p) = &labels {
        run_cfg.push_str(&format!("pseudo_labels={}\n", p.display()));
    }
    let cfg_path = a.out.join(RUN_CONFIG_FILE);
    fs::write(&cfg_path, run_cfg).map_err(user_io(&cfg_path))?;

    let tau = trained.tau_hat.map_or_else(|| "none".to_string(), |t| format!("{t:.4}"));
    println!("tau_hat={tau}\ntrain_seconds={:.2}\ncheckpoint={}", trained.train_seconds, a.out.display());
    Ok(())
}

fn manifest_path(src: &ClipSource) -> PathBuf {
    match (&src.manifest, &src.data) {
        (Some(m), _) => m.clone(),
        (None, Some(d)) => d.join(VAL_MANIFEST),
        (None, None) => unreachable!("clap requires one of --data or --manifest"),
    }
}

fn load_checkpoint(dir: &Path) -> Result<TrainedModel32, CliError> {
    TrainedModel::load(dir).map_err(CliError::from)
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, text).map_err(user_io(p))?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let trained = load_checkpoint(&a.ckpt)?;
    let samples = load_samples(&manifest_path(&a.clips), &trained.tokenizer)?;
    let opts = EvalOptions {
        tau_override: a.tau_override,
        drop_mode: a.drop_mode,
        random_ratio: a.random_ratio,
        seed: a.seed,
        batch_size: a.batch_size,
    };
    let r = evaluate(&trained, &samples, &opts)?;
    let text = if a.json {
        serde_json::to_string(&r).map_err(|e| CliError::Internal(e.to_string()))? + "\n"
    } else {
        r.to_text()
    };
    emit(&text, a.out.as_deref())
}

fn bench(a: BenchArgs) -> Result<(), CliError> {
    let trained = load_checkpoint(&a.ckpt)?;
    let manifest = DatasetManifest::load(&manifest_path(&a.clips))?;
    let clips = manifest.load_videos()?;
    let videos: Vec<VideoTensor<f32>> = clips.iter().map(|(_, v)| v.clone()).collect();
    let samples = manifest
        .entries
        .iter()
        .zip(&clips)
        .map(|(e, (id, v))| Sample::new(id.clone(), e.label, v, &trained.tokenizer).map_err(|err| CliError::User(format!("{id}: {err}"))))
        .collect::<Result<Vec<Sample32>, _>>()?;

    let cfg = &trained.model.config;
    let full_flops = estimate_flops(cfg, cfg.grid.len());
    let opts = |mode, ratio| EvalOptions {
        tau_override: a.tau_override,
        drop_mode: Some(mode),
        random_ratio: ratio,
        seed: a.seed,
        batch_size: a.batch_size,
    };
    let lmft_ratio = evaluate(&trained, &samples, &opts(DropMode::Lmft, None))?.mean_drop_ratio;
    let mut report = EfficiencyReport {
        environment: environment(),
        ..Default::default()
    };
    for (name, mode) in [("full", DropMode::None), ("lmft", DropMode::Lmft), ("random", DropMode::Random)] {
        let o = opts(mode, Some(lmft_ratio));
        let r = evaluate(&trained, &samples, &o)?;
        let plan = trained.selection(&o)?;
        let mut flops = 0.0;
        for (i, s) in samples.iter().enumerate() {
            flops += estimate_flops(cfg, plan.for_clip(i).mask(s)?.retained());
        }
        let t = inference_throughput(&trained, &videos, &o, a.warmup, a.repeats)?;
        let train_seconds = (mode == DropMode::Lmft).then_some(trained.train_seconds);
        report.push(name, r.accuracy, r.mean_tokens, flops / samples.len() as f64, full_flops, t.clips_per_sec, train_seconds);
    }
    print!("{}", if a.json { report.to_json_lines() } else { report.to_text() });
    if let Some(p) = &a.out {
        fs::write(p, report.to_csv()).map_err(user_io(p))?;
    }
    Ok(())
}

fn viz(a: VizArgs) -> Result<(), CliError> {
    let trained = load_checkpoint(&a.ckpt)?;
    let video = load_video(&a.video)?;
    let tok = trained.tokenizer;
    let sample = Sample::new("viz", None, &video, &tok).map_err(|e| CliError::User(format!("{}: {e}", a.video.display())))?;
    let opts = EvalOptions {
        tau_override: a.tau_override,
        drop_mode: a.drop_mode,
        random_ratio: a.random_ratio,
        seed: a.seed,
        ..Default::default()
    };
    let plan = trained.selection(&opts)?;
    let mask = plan.for_clip(0).mask(&sample)?;
    fs::create_dir_all(&a.out).map_err(user_io(&a.out))?;
    for t in 0..video.t {
        let img = render_frame(&video, t, &mask, &sample.energy, tok.patch, tok.tubelet);
        let path = a.out.join(format!("frame_{t:03}.ppm"));
        fs::write(&path, img.to_ppm()).map_err(user_io(&path))?;
    }
    let tau = plan.tau().map_or_else(|| "none".to_string(), |t| format!("{t:.4}"));
    println!("wrote {} frames to {}; tau={tau}, kept {} of {} tokens", video.t, a.out.display(), mask.retained(), mask.bits().len());
    Ok(())
}
