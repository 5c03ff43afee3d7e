//! Subcommand implementations. Each returns the paths it wrote.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use latentwire::dsp::{self, SpectrogramSet};
use latentwire::edgewire::{self, DeviceProfile, Handler, LatentFrame, Status};
use latentwire::eval::{self, SplitBy};
use latentwire::gbdt::{self, FeatureMatrix, GbdtModel};
use latentwire::ingest::{self, Recording, TimeOfDay};
use latentwire::quant::{self, ModelKind, Precision, QuantizedModel};
use latentwire::vae::{self, compression_ratio};
use serde_json::json;

use crate::artifacts::{
    encode_latent_file, read_latents, read_meta, split_latent_file, write_artifact, write_meta, LatentExtra, Meta,
};
use crate::config::{one_line, read_file, Resolved, Stage};
use crate::UsageError;

pub type Written = Vec<PathBuf>;

const RECORDING: &str = "recording.lwrc";
const ANNOTATIONS: &str = "annotations.txt";
const SPECTROGRAMS: &str = "spectrograms.lwsp";
const LATENTS: &str = "latents.lwlf";
const VAE: &str = "vae.lwm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Features {
    Latent,
    Raw,
}

impl Features {
    fn name(self) -> &'static str {
        match self {
            Features::Latent => "latent",
            Features::Raw => "raw",
        }
    }
}

fn meta(r: &Resolved, kind: &str, inputs: &[&Path], extra: serde_json::Value) -> Meta {
    Meta {
        kind: kind.into(),
        config_hash: r.hash.clone(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        extra,
    }
}

fn save_with_meta(path: &Path, bytes: &[u8], m: &Meta, written: &mut Written) -> anyhow::Result<()> {
    write_artifact(path, bytes)?;
    written.push(path.to_path_buf());
    written.push(write_meta(path, m)?);
    Ok(())
}

fn start_of_day() -> TimeOfDay {
    TimeOfDay::from_hms(0, 0, 0).expect("midnight")
}

pub fn synth(r: &Resolved) -> anyhow::Result<Written> {
    let cfg = &r.config.synth;
    let (rec, events) = ingest::synth_dataset(cfg, r.config.seed_for(Stage::Synth))?;
    let mut bytes = Vec::new();
    rec.write_to(&mut bytes)?;
    let mut written = Vec::new();
    let rec_path = r.data(RECORDING);
    let m = meta(r, "recording", &[], json!({ "seizures": events.len(), "duration_s": rec.duration_s() }));
    save_with_meta(&rec_path, &bytes, &m, &mut written)?;
    let ann = ingest::format_annotations(rec.patient_id(), &events, start_of_day());
    let ann_path = r.data(ANNOTATIONS);
    save_with_meta(&ann_path, ann.as_bytes(), &meta(r, "annotations", &[], serde_json::Value::Null), &mut written)?;
    eprintln!(
        "synthesized {} channels x {:.0} s at {} Hz with {} seizures",
        rec.channel_count(),
        rec.duration_s(),
        rec.sample_rate_hz(),
        events.len()
    );
    Ok(written)
}

pub struct IngestArgs {
    pub recording: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub patient: Option<String>,
    pub start: String,
}

fn parse_hms(s: &str) -> anyhow::Result<TimeOfDay> {
    let parts: Vec<u32> = s
        .split(':')
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| UsageError::new(format!("bad start time {s:?}, want HH:MM:SS")))?;
    match parts[..] {
        [h, m, sec] => TimeOfDay::from_hms(h, m, sec),
        _ => None,
    }
    .ok_or_else(|| UsageError::new(format!("bad start time {s:?}, want HH:MM:SS")).into())
}

pub fn ingest(r: &Resolved, args: &IngestArgs) -> anyhow::Result<Written> {
    let c = &r.config;
    let rec_path = args.recording.clone().unwrap_or_else(|| r.data(RECORDING));
    let ann_path = args.annotations.clone().unwrap_or_else(|| r.data(ANNOTATIONS));
    let rec_bytes = read_file(&rec_path, "recording (run `latentwire synth` or pass --recording)")?;
    let rec = if rec_path.extension().is_some_and(|e| e == "csv") {
        let pid = args
            .patient
            .clone()
            .or_else(|| rec_path.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_default();
        Recording::from_csv(BufReader::new(&rec_bytes[..]), &pid, c.synth.sample_rate_hz)?
    } else {
        Recording::read_from(&rec_bytes[..])?
    };
    let ann_text = String::from_utf8(read_file(&ann_path, "seizure annotations")?).context("annotations are not UTF-8")?;
    let ann = ingest::parse_annotations(&ann_text, parse_hms(&args.start)?)?;
    for rej in &ann.rejected {
        log::warn!("annotation rejected: {rej:?}");
    }
    let events = ann.events_for(rec.patient_id());
    if rec.channel_count() != c.vae.in_channels {
        bail!(
            "recording has {} channels, model expects {} (set vae.in_channels)",
            rec.channel_count(),
            c.vae.in_channels
        );
    }
    let windows = ingest::segment_and_label(&rec, &c.window, &events)?;
    let groups = ingest::event_groups(&windows, &events);
    let items = windows
        .iter()
        .map(|w| dsp::resize_to_model(&dsp::to_spectrogram(w, &c.stft)?, c.vae.freq_bins, c.vae.time_frames))
        .collect::<latentwire::Result<Vec<_>>>()?;
    let positives = items.iter().filter(|s| s.label == Some(ingest::Label::Seizure)).count();
    let set = SpectrogramSet {
        patient_id: rec.patient_id().to_string(),
        config_hash: r.hash.clone(),
        dims: [c.vae.in_channels, c.vae.freq_bins, c.vae.time_frames],
        window_index: windows.iter().map(|w| w.index as u64).collect(),
        groups,
        items,
    };
    let out = r.data(SPECTROGRAMS);
    let m = meta(
        r,
        "spectrograms",
        &[&rec_path, &ann_path],
        json!({ "windows": set.items.len(), "seizure_windows": positives, "events": events.len() }),
    );
    let mut written = Vec::new();
    save_with_meta(&out, &set.to_bytes()?, &m, &mut written)?;
    eprintln!("{} windows, {} labeled seizure, {} events", set.items.len(), positives, events.len());
    Ok(written)
}

fn load_spectrograms(r: &Resolved) -> anyhow::Result<(SpectrogramSet, PathBuf)> {
    let path = r.data(SPECTROGRAMS);
    let bytes = read_file(&path, "run `latentwire ingest` first")?;
    Ok((SpectrogramSet::from_bytes(&bytes).with_context(|| format!("reading {}", path.display()))?, path))
}

pub fn train_vae(r: &Resolved) -> anyhow::Result<Written> {
    let (set, input) = load_spectrograms(r)?;
    let c = &r.config;
    let outcome = vae::train(&set.items, &c.train, &c.vae)?;
    let q = quant::quantize(&outcome.model, Precision::F32)?.with_config_hash(r.hash.clone());
    let path = r.model(VAE);
    let mut written = Vec::new();
    let m = meta(
        r,
        "vae",
        &[&input],
        json!({
            "best_epoch": outcome.best_epoch,
            "epochs_run": outcome.history.len(),
            "stopped_early": outcome.stopped_early,
            "initial_val_total": outcome.initial_val.total,
            "best_val_total": outcome.best().val.total,
        }),
    );
    save_with_meta(&path, &q.to_file()?.to_bytes(), &m, &mut written)?;
    let mut csv = String::from("epoch,train_total,train_kl,train_recon,val_total,val_kl,val_recon\n");
    for h in &outcome.history {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            h.epoch, h.train.total, h.train.kl, h.train.recon, h.val.total, h.val.kl, h.val.recon
        ));
    }
    let hist = r.report("train_vae.csv");
    save_with_meta(&hist, csv.as_bytes(), &meta(r, "training-history", &[&input], serde_json::Value::Null), &mut written)?;
    eprintln!(
        "best epoch {} of {}: validation total {:.4} (untrained {:.4})",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.best().val.total,
        outcome.initial_val.total
    );
    Ok(written)
}

fn model_name(kind: &str, p: Precision) -> String {
    format!("{kind}_{p}.lwm")
}

pub fn quantize(r: &Resolved) -> anyhow::Result<Written> {
    let src = r.model(VAE);
    read_file(&src, "run `latentwire train-vae` first")?;
    let model = QuantizedModel::load(&src)?.into_model();
    let p = r.config.quant.precision;
    let full = quant::quantize(&model, p)?.with_config_hash(r.hash.clone());
    let enc = quant::quantize(&quant::extract_encoder(&model), p)?.with_config_hash(r.hash.clone());
    let (full_bytes, enc_bytes) = (full.to_file()?.to_bytes(), enc.to_file()?.to_bytes());
    let before = std::fs::metadata(&src)?.len();
    let reduction = quant::size_report(before, full_bytes.len() as u64);
    let mut written = Vec::new();
    let extra = json!({
        "precision": p.to_string(),
        "source_bytes": before,
        "bytes": full_bytes.len(),
        "size_reduction_pct": reduction,
        "saturated": full.saturated(),
    });
    save_with_meta(&r.model(&model_name("vae", p)), &full_bytes, &meta(r, "vae", &[&src], extra), &mut written)?;
    let extra = json!({ "precision": p.to_string(), "bytes": enc_bytes.len(), "saturated": enc.saturated() });
    save_with_meta(
        &r.model(&model_name("encoder", p)),
        &enc_bytes,
        &meta(r, "vae-encoder", &[&src], extra),
        &mut written,
    )?;
    eprintln!(
        "{before} -> {} bytes ({reduction:.2}% smaller), encoder only {} bytes, {} values saturated",
        full_bytes.len(),
        enc_bytes.len(),
        full.saturated()
    );
    Ok(written)
}

pub fn compress(r: &Resolved, model: Option<PathBuf>) -> anyhow::Result<Written> {
    let c = &r.config;
    let model_path = model.unwrap_or_else(|| r.model(&model_name("encoder", c.quant.precision)));
    read_file(&model_path, "run `latentwire quantize` first or pass --model")?;
    let q = QuantizedModel::load(&model_path)?;
    let (set, input) = load_spectrograms(r)?;
    let latents = q.model().compress_batch(&set.items)?;
    let wire = c.quant.wire_precision;
    let frames = latents
        .iter()
        .zip(&set.window_index)
        .map(|(z, w)| LatentFrame::new(set.patient_id.clone(), *w, wire, z))
        .collect::<latentwire::Result<Vec<_>>>()?;
    let labels = set
        .labels()
        .ok_or_else(|| anyhow!("spectrogram set has unlabeled windows"))?;
    let extra = LatentExtra {
        patient_id: set.patient_id.clone(),
        latent_dim: q.config().latent_dim,
        precision: wire.to_string(),
        labels,
        groups: set.groups.clone(),
    };
    let bytes = encode_latent_file(&frames);
    let path = r.data(LATENTS);
    let mut written = Vec::new();
    save_with_meta(&path, &bytes, &meta(r, "latents", &[&input, &model_path], serde_json::to_value(&extra)?), &mut written)?;
    let ratio = compression_ratio(q.config())?;
    eprintln!("{} frames, {} bytes, compression ratio {ratio}", frames.len(), bytes.len());
    Ok(written)
}

fn features(r: &Resolved, which: Features) -> anyhow::Result<(FeatureMatrix, Vec<u8>, Vec<u32>, PathBuf)> {
    match which {
        Features::Latent => {
            let path = r.data(LATENTS);
            let (frames, extra) = read_latents(&path)?;
            let rows: Vec<&[f32]> = frames.iter().map(LatentFrame::values).collect();
            Ok((FeatureMatrix::from_rows(&rows)?, extra.labels, extra.groups, path))
        }
        Features::Raw => {
            let (set, path) = load_spectrograms(r)?;
            let labels = set.labels().ok_or_else(|| anyhow!("spectrogram set has unlabeled windows"))?;
            let rows: Vec<&[f32]> = set.items.iter().map(|s| &s.values[..]).collect();
            Ok((FeatureMatrix::from_rows(&rows)?, labels, set.groups, path))
        }
    }
}

fn classifier_path(r: &Resolved, which: Features) -> PathBuf {
    r.model(&format!("clf_{}.lwm", which.name()))
}

pub fn train_clf(r: &Resolved, which: Features) -> anyhow::Result<Written> {
    let (x, y, _, input) = features(r, which)?;
    let (fit_rows, val_rows) = vae::train_val_split(y.len(), eval::INNER_VAL_FRACTION, r.config.seed_for(Stage::Classifier));
    let pick = |rows: &[usize]| rows.iter().map(|i| y[*i]).collect::<Vec<u8>>();
    let (vx, vy) = (x.select(&val_rows), pick(&val_rows));
    let valid = (!val_rows.is_empty()).then_some((&vx, &vy[..]));
    let mut model = gbdt::fit(&x.select(&fit_rows), &pick(&fit_rows), &r.config.gbdt, valid)?;
    model.config_hash = r.hash.clone();
    let path = classifier_path(r, which);
    let mut written = Vec::new();
    let extra = json!({ "features": which.name(), "rounds": model.best_round, "n_features": model.n_features });
    save_with_meta(&path, &model.to_file()?.to_bytes(), &meta(r, "classifier", &[&input], extra), &mut written)?;
    eprintln!("{} trees over {} features", model.trees.len(), model.n_features);
    Ok(written)
}

fn load_classifier(path: &Path) -> anyhow::Result<GbdtModel> {
    read_file(path, "no trained classifier, run `latentwire train-clf` first")?;
    Ok(GbdtModel::from_file(&quant::load_model(path, &[ModelKind::Gbdt])?)?)
}

pub fn eval(r: &Resolved, which: Features) -> anyhow::Result<Written> {
    let c = &r.config;
    let clf_path = classifier_path(r, which);
    let clf = load_classifier(&clf_path)?;
    let (x, y, groups, input) = features(r, which)?;
    if clf.n_features != x.cols() {
        bail!("classifier expects {} features, data has {}", clf.n_features, x.cols());
    }
    let seed = c.seed_for(Stage::Folds);
    let folds = match c.eval.split_by {
        SplitBy::Window => eval::kfold(&y, c.eval.folds, seed, true)?,
        SplitBy::Event => eval::group_kfold(&groups, c.eval.folds, seed)?,
    };
    let report = eval::evaluate_pipeline(&x, &y, &folds, &c.gbdt, seed)?;
    let header: Vec<(String, String)> = [
        ("config_hash", r.hash.clone()),
        ("features", which.name().to_string()),
        ("split_by", c.eval.split_by.to_string()),
        ("seed", c.seed.to_string()),
        ("latent_dim", c.vae.latent_dim.to_string()),
        ("compression_ratio", compression_ratio(&c.vae)?.to_string()),
        ("windows", y.len().to_string()),
        ("classifier", clf_path.display().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let mut text = Vec::new();
    report.write(&mut text, &header)?;
    text.extend_from_slice(format!("\n[config]\n{}", c.to_toml()).as_bytes());
    let stem = format!("eval_{}", which.name());
    let mut written = Vec::new();
    let m = meta(r, "eval-report", &[&input, &clf_path], serde_json::Value::Null);
    save_with_meta(&r.report(&format!("{stem}.txt")), &text, &m, &mut written)?;
    for curve in [&report.pr, &report.roc] {
        let mut csv = Vec::new();
        curve.write_csv(&mut csv)?;
        let name = match curve.kind {
            eval::CurveKind::Pr => format!("{stem}_pr.csv"),
            eval::CurveKind::Roc => format!("{stem}_roc.csv"),
        };
        save_with_meta(&r.report(&name), &csv, &meta(r, "curve", &[&input], serde_json::Value::Null), &mut written)?;
    }
    eprintln!(
        "{} features, {} folds by {}: accuracy {:.4} +/- {:.4}, PR AUC {:.4}, ROC AUC {:.4}",
        which.name(),
        folds.len(),
        c.eval.split_by,
        report.mean_accuracy,
        report.std_accuracy,
        report.pr.area,
        report.roc.area
    );
    Ok(written)
}

pub fn serve(r: &Resolved, listen: Option<&str>) -> anyhow::Result<()> {
    let clf = Arc::new(load_classifier(&classifier_path(r, Features::Latent))?);
    let handler: Arc<Handler> = Arc::new(move |f: &LatentFrame| {
        if f.latent_dim() != clf.n_features {
            return Err(latentwire::Error::Protocol(format!(
                "frame has {} latent values, classifier expects {}",
                f.latent_dim(),
                clf.n_features
            )));
        }
        clf.predict_proba(f.values()).map(Some)
    });
    let addr = edgewire::listen_addr(listen);
    let server = edgewire::serve(&addr, handler)?;
    println!("listening on {}", server.local_addr());
    use std::io::Write;
    std::io::stdout().flush()?;
    server.join();
    Ok(())
}

pub fn send(r: &Resolved, addr: Option<&str>, input: Option<PathBuf>) -> anyhow::Result<Written> {
    let path = input.unwrap_or_else(|| r.data(LATENTS));
    let bytes = read_file(&path, "run `latentwire compress` first or pass --input")?;
    let encoded: Vec<Vec<u8>> = split_latent_file(&bytes)?.into_iter().map(|(_, b)| b).collect();
    let addr = edgewire::listen_addr(addr);
    let stats = edgewire::send_encoded(&addr, &encoded)?;
    let ok = stats.responses.iter().filter(|x| x.status == Status::Ok).count();
    let probabilities: Vec<Option<f64>> = stats
        .responses
        .iter()
        .map(|x| x.probability.filter(|p| p.is_finite()))
        .collect();
    let out = json!({
        "address": addr,
        "frames": stats.frames,
        "bytes_sent": stats.bytes_sent,
        "wall_s": stats.wall_s,
        "responses": stats.responses.len(),
        "ok": ok,
        "probabilities": probabilities,
    });
    let report = r.report("send.json");
    let mut written = Vec::new();
    let text = serde_json::to_string_pretty(&out)? + "\n";
    save_with_meta(&report, text.as_bytes(), &meta(r, "transfer", &[&path], serde_json::Value::Null), &mut written)?;
    eprintln!("{} frames, {} bytes in {:.4} s, {ok} ok", stats.frames, stats.bytes_sent, stats.wall_s);
    if stats.responses.len() != stats.frames || ok != stats.frames {
        bail!(
            "{} of {} frames were not acknowledged ok",
            stats.frames - ok.min(stats.frames),
            stats.frames
        );
    }
    Ok(written)
}

pub fn bench(r: &Resolved, repetitions: Option<usize>) -> anyhow::Result<Written> {
    let c = &r.config;
    let reps = repetitions.unwrap_or(c.device.bench_repetitions);
    let profile: DeviceProfile = r.profile()?;
    let model_path = r.model(&model_name("encoder", c.quant.precision));
    read_file(&model_path, "run `latentwire quantize` first")?;
    let q = QuantizedModel::load(&model_path)?;
    let (set, set_path) = load_spectrograms(r)?;
    let latents_path = r.data(LATENTS);
    let latent_bytes = read_file(&latents_path, "run `latentwire compress` first")?;
    let rec_path = r.data(RECORDING);
    let rec = Recording::read_from(&read_file(&rec_path, "run `latentwire synth` first")?[..])?;
    let window = ingest::segment(&rec, &c.window)?
        .into_iter()
        .next()
        .ok_or_else(|| anyhow!("recording is shorter than one window"))?;
    let spec = set.items.first().ok_or_else(|| anyhow!("no spectrograms"))?.clone();
    let wire = c.quant.wire_precision;
    let z = q.model().compress(&spec)?;
    let frame = LatentFrame::new(set.patient_id.clone(), 0, wire, &z)?;
    let frame_len = frame.encoded_len() as u64;

    let stft = edgewire::bench("stft", reps, None, || {
        dsp::to_spectrogram(&window, &c.stft).map(drop)
    })?;
    let encode = edgewire::bench("encode", reps, None, || q.model().compress(&spec).map(drop))?;
    let framing = edgewire::bench("frame", reps, Some(frame_len), || {
        std::hint::black_box(edgewire::encode_frame(&frame));
        Ok(())
    })?;
    let encoded: Vec<Vec<u8>> = split_latent_file(&latent_bytes)?.into_iter().map(|(_, b)| b).collect();
    let echo: Arc<Handler> = Arc::new(|_: &LatentFrame| Ok(None));
    let server = edgewire::serve("127.0.0.1:0", echo)?;
    let addr = server.local_addr().to_string();
    let transfer = edgewire::bench("transfer", reps, Some(latent_bytes.len() as u64), || {
        edgewire::send_encoded(&addr, &encoded).map(drop)
    });
    server.shutdown();
    let transfer = transfer?;

    let n = set.items.len() as u64;
    let raw_bytes = n * spec.len() as u64 * wire.bytes_per_value() as u64;
    let compute_s = (stft.median_s + encode.median_s) * n as f64;
    let energy = edgewire::estimate_energy(&profile, latent_bytes.len() as u64, raw_bytes, compute_s);
    let wh = edgewire::battery_wh(c.device.battery_mah, c.device.battery_volts);
    let life = |p: Option<f64>| p.and_then(|p| edgewire::battery_life(p, wh, c.device.duty));
    let (raw_h, comp_h) = (life(energy.raw_power_w), life(energy.compressed_power_w));
    let out = json!({
        "profile": profile,
        "stages": [stft, encode, framing, transfer],
        "windows": n,
        "compressed_bytes": latent_bytes.len(),
        "raw_bytes": raw_bytes,
        "compute_s": compute_s,
        "energy": energy,
        "power_savings_pct": energy.power_savings_pct(),
        "battery": {
            "battery_wh": wh,
            "duty": c.device.duty,
            "raw_hours": raw_h,
            "compressed_hours": comp_h,
            "raw": edgewire::format_hours(raw_h),
            "compressed": edgewire::format_hours(comp_h),
        },
    });
    let path = r.report("bench.json");
    let mut written = Vec::new();
    let text = serde_json::to_string_pretty(&out)? + "\n";
    let m = meta(r, "bench", &[&model_path, &set_path, &latents_path, &rec_path], serde_json::Value::Null);
    save_with_meta(&path, text.as_bytes(), &m, &mut written)?;
    eprintln!(
        "{}: compressed {:.2} J vs raw {:.2} J ({:.1}% saved); battery {} -> {}",
        profile.name,
        energy.total_j,
        energy.raw_tx_j,
        energy.savings_pct,
        edgewire::format_hours(raw_h),
        edgewire::format_hours(comp_h)
    );
    Ok(written)
}

fn collect_meta(dir: &Path, found: &mut Vec<(PathBuf, String)>) -> anyhow::Result<()> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(());
    };
    for e in entries {
        let p = e?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(artifact) = name.strip_suffix(".meta.json") {
            let artifact = p.with_file_name(artifact);
            if artifact.file_name().is_some_and(|n| n == "summary.md") {
                continue;
            }
            found.push((artifact.clone(), read_meta(&artifact)?.config_hash));
        }
    }
    Ok(())
}

pub fn report(r: &Resolved, force: bool) -> anyhow::Result<Written> {
    let mut found = Vec::new();
    for dir in [
        r.base.join(&r.config.paths.data),
        r.base.join(&r.config.paths.models),
        r.reports_dir(),
    ] {
        collect_meta(&dir, &mut found)?;
    }
    found.sort();
    let hashes: BTreeSet<&str> = found.iter().map(|(_, h)| h.as_str()).collect();
    if hashes.len() > 1 && !force {
        let detail: Vec<String> = found.iter().map(|(p, h)| format!("{}={h}", p.display())).collect();
        bail!(
            "artifacts come from {} different configurations ({}); rerun the pipeline or pass --force",
            hashes.len(),
            one_line(&detail.join(" "))
        );
    }
    let mut md = String::from("# latentwire summary\n\n");
    md.push_str(&format!("config hash: `{}`\n\n", r.hash));
    md.push_str("| features | accuracy (mean +/- std) | pooled accuracy | PR AUC | ROC AUC | config hash |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    let mut inputs = Vec::new();
    for which in [Features::Latent, Features::Raw] {
        let p = r.report(&format!("eval_{}.txt", which.name()));
        let Ok(text) = std::fs::read_to_string(&p) else {
            continue;
        };
        let h: BTreeMap<String, String> = eval::parse_report_header(&text);
        let get = |k: &str| h.get(k).cloned().unwrap_or_else(|| "?".into());
        let num = |k: &str| h.get(k).and_then(|v| v.parse::<f64>().ok()).map_or("?".into(), |v| format!("{v:.4}"));
        md.push_str(&format!(
            "| {} | {} +/- {} | {} | {} | {} | {} |\n",
            which.name(),
            num("accuracy_mean"),
            num("accuracy_std"),
            num("pooled_accuracy"),
            num("pr_auc"),
            num("roc_auc"),
            get("config_hash")
        ));
        inputs.push(p);
    }
    let bench_path = r.report("bench.json");
    if let Ok(text) = std::fs::read_to_string(&bench_path) {
        let b: serde_json::Value = serde_json::from_str(&text).context("parsing bench report")?;
        md.push_str(&format!(
            "\n## energy ({})\n\ncompressed {} J, raw {} J, savings {} %\n\nbattery: raw {}, compressed {}\n",
            b["profile"]["name"].as_str().unwrap_or("?"),
            b["energy"]["total_j"],
            b["energy"]["raw_tx_j"],
            b["energy"]["savings_pct"],
            b["battery"]["raw"].as_str().unwrap_or("?"),
            b["battery"]["compressed"].as_str().unwrap_or("?"),
        ));
        inputs.push(bench_path);
    }
    md.push_str("\n## artifacts\n\n");
    for (p, h) in &found {
        md.push_str(&format!("- `{}` {h}\n", p.display()));
    }
    let path = r.report("summary.md");
    let mut written = Vec::new();
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    save_with_meta(&path, md.as_bytes(), &meta(r, "summary", &refs, json!({ "forced": force && hashes.len() > 1 })), &mut written)?;
    Ok(written)
}
