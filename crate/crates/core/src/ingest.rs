//! Recordings, seizure annotation logs, sliding windows and window labels.
//!
//! A [`Recording`] is a channel-major matrix of samples. It is cut into
//! overlapping [`LabeledWindow`]s by [`segment`], and each window is labeled
//! [`Label::Seizure`] only when it lies entirely inside an annotated
//! [`SeizureEvent`] (closed interval on both ends).

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shortest event that counts as a seizure, in seconds.
pub const MIN_EVENT_S: f64 = 10.0;

pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 256;

const RECORDING_MAGIC: &[u8; 4] = b"LWRC";
const RECORDING_VERSION: u8 = 0x01;
const DAY_S: u32 = 24 * 3600;

/// A multichannel recording, immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    patient_id: String,
    sample_rate_hz: u32,
    samples: Vec<Vec<f32>>,
}

impl Recording {
    pub fn new(patient_id: impl Into<String>, sample_rate_hz: u32, samples: Vec<Vec<f32>>) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Invalid("recording needs at least one channel".into()));
        }
        let len = samples[0].len();
        if let Some((ch, bad)) = samples.iter().enumerate().find(|(_, c)| c.len() != len) {
            return Err(Error::Invalid(format!(
                "channel {ch} has {} samples, channel 0 has {len}",
                bad.len()
            )));
        }
        Ok(Recording {
            patient_id: patient_id.into(),
            sample_rate_hz,
            samples,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn channel_count(&self) -> usize {
        self.samples.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples[0].len()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz as f64
    }

    pub fn channel(&self, index: usize) -> &[f32] {
        &self.samples[index]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.samples
    }

    /// Writes the binary container: magic, version, patient id, rate,
    /// channel count, per-channel length, then channel-major `f32` samples.
    /// All integers and floats are little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let id = self.patient_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| Error::Invalid("patient id longer than 65535 bytes".into()))?;
        w.write_all(RECORDING_MAGIC)?;
        w.write_all(&[RECORDING_VERSION])?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&self.sample_rate_hz.to_le_bytes())?;
        w.write_all(&(self.channel_count() as u32).to_le_bytes())?;
        w.write_all(&(self.n_samples() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.n_samples() * 4);
        for channel in &self.samples {
            buf.clear();
            for v in channel {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RECORDING_MAGIC {
            return Err(Error::Protocol(format!("not a recording container (magic {magic:02x?})")));
        }
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        if byte[0] != RECORDING_VERSION {
            return Err(Error::Version {
                found: byte[0],
                supported: vec![RECORDING_VERSION],
            });
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut id)?;
        let patient_id = String::from_utf8(id).map_err(|_| Error::Invalid("patient id is not UTF-8".into()))?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rate = u32::from_le_bytes(b4);
        r.read_exact(&mut b4)?;
        let channels = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut raw = vec![0u8; len * 4];
        let mut samples = Vec::with_capacity(channels);
        for _ in 0..channels {
            r.read_exact(&mut raw)?;
            samples.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        Recording::new(patient_id, rate, samples)
    }

    /// Imports a CSV with one row per time step and one column per channel.
    /// A header row is skipped when its first field is not numeric.
    pub fn from_csv<R: BufRead>(reader: R, patient_id: &str, sample_rate_hz: u32) -> Result<Self> {
        let mut samples: Vec<Vec<f32>> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if i == 0 && fields[0].parse::<f32>().is_err() {
                continue;
            }
            if samples.is_empty() {
                samples = vec![Vec::new(); fields.len()];
            }
            if fields.len() != samples.len() {
                return Err(Error::Parse {
                    row: i + 1,
                    msg: format!("expected {} columns, found {}", samples.len(), fields.len()),
                });
            }
            for (ch, f) in fields.iter().enumerate() {
                let v = f.parse::<f32>().map_err(|e| Error::Parse {
                    row: i + 1,
                    msg: format!("column {ch}: {e}"),
                })?;
                samples[ch].push(v);
            }
        }
        Recording::new(patient_id, sample_rate_hz, samples)
    }
}

/// A wall-clock time of day with one-second resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeOfDay(u32);

impl TimeOfDay {
    pub fn from_hms(h: u32, m: u32, s: u32) -> Option<Self> {
        (h < 24 && m < 60 && s < 60).then_some(TimeOfDay(h * 3600 + m * 60 + s))
    }

    pub fn seconds(self) -> u32 {
        self.0
    }

    /// Seconds from `self` forward to `later`, wrapping past midnight.
    pub fn seconds_until(self, later: TimeOfDay) -> u32 {
        (later.0 + DAY_S - self.0) % DAY_S
    }
}

impl FromStr for TimeOfDay {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        if parts.len() != 3 {
            return Err(format!("`{s}` is not HH:MM:SS"));
        }
        let mut hms = [0u32; 3];
        for (slot, p) in hms.iter_mut().zip(&parts) {
            if p.is_empty() || p.len() > 2 || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(format!("`{s}` is not HH:MM:SS"));
            }
            *slot = p.parse().map_err(|_| format!("`{s}` is not HH:MM:SS"))?;
        }
        TimeOfDay::from_hms(hms[0], hms[1], hms[2]).ok_or_else(|| format!("`{s}` is out of range"))
    }
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}:{:02}", self.0 / 3600, (self.0 / 60) % 60, self.0 % 60)
    }
}

/// An annotated seizure, in seconds from the start of the recording.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeizureEvent {
    pub onset_s: f64,
    pub offset_s: f64,
}

impl SeizureEvent {
    pub fn new(onset_s: f64, offset_s: f64) -> Result<Self> {
        if !(onset_s >= 0.0 && onset_s < offset_s) {
            return Err(Error::Invalid(format!("event [{onset_s}, {offset_s}] is not a forward interval")));
        }
        if offset_s - onset_s < MIN_EVENT_S {
            return Err(Error::Invalid(format!(
                "event lasts {} s, shorter than {MIN_EVENT_S} s",
                offset_s - onset_s
            )));
        }
        Ok(SeizureEvent { onset_s, offset_s })
    }

    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }

    pub fn contains(&self, start_s: f64, end_s: f64) -> bool {
        self.onset_s <= start_s && end_s <= self.offset_s
    }
}

/// One accepted row of an annotation log.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRow {
    pub row: usize,
    pub patient_id: String,
    pub event: SeizureEvent,
}

/// A row that parsed but was not admissible as a seizure.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    pub rows: Vec<AnnotationRow>,
    pub rejected: Vec<Rejection>,
}

impl Annotations {
    pub fn events(&self) -> Vec<SeizureEvent> {
        self.rows.iter().map(|r| r.event).collect()
    }

    pub fn events_for(&self, patient_id: &str) -> Vec<SeizureEvent> {
        self.rows
            .iter()
            .filter(|r| r.patient_id == patient_id)
            .map(|r| r.event)
            .collect()
    }
}

/// Parses `patient_id, HH:MM:SS, HH:MM:SS` rows into events relative to
/// `recording_start`.
///
/// An end time earlier than its start time is taken to be on the next day,
/// as is any onset earlier than `recording_start`. Rows shorter than
/// [`MIN_EVENT_S`] are collected in [`Annotations::rejected`]. A header row is
/// recognised by a second field with no digits in it.
pub fn parse_annotations(text: &str, recording_start: TimeOfDay) -> Result<Annotations> {
    let mut out = Annotations::default();
    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if first && fields.len() >= 2 && !fields[1].bytes().any(|b| b.is_ascii_digit()) {
            first = false;
            continue;
        }
        first = false;
        if fields.len() != 3 {
            return Err(Error::Parse {
                row,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let start: TimeOfDay = fields[1].parse().map_err(|msg| Error::Parse { row, msg })?;
        let end: TimeOfDay = fields[2].parse().map_err(|msg| Error::Parse { row, msg })?;
        let onset = recording_start.seconds_until(start);
        let duration = start.seconds_until(end);
        if duration == 0 {
            return Err(Error::Invalid(format!("row {row}: offset equals onset")));
        }
        if (duration as f64) < MIN_EVENT_S {
            out.rejected.push(Rejection {
                row,
                reason: format!("duration {duration} s is below the {MIN_EVENT_S} s minimum"),
            });
            continue;
        }
        out.rows.push(AnnotationRow {
            row,
            patient_id: fields[0].to_string(),
            event: SeizureEvent {
                onset_s: onset as f64,
                offset_s: (onset + duration) as f64,
            },
        });
    }
    Ok(out)
}

/// Inverse of [`parse_annotations`] for events on whole seconds.
pub fn format_annotations(patient_id: &str, events: &[SeizureEvent], recording_start: TimeOfDay) -> String {
    let mut out = String::from("patient_id,onset,offset\n");
    for e in events {
        let on = TimeOfDay((recording_start.0 + e.onset_s.round() as u32) % DAY_S);
        let off = TimeOfDay((recording_start.0 + e.offset_s.round() as u32) % DAY_S);
        out.push_str(&format!("{patient_id},{on},{off}\n"));
    }
    out
}

/// Sliding-window geometry in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_s: f64,
    pub stride_s: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            window_s: 10.0,
            stride_s: 1.0,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.stride_s > 0.0 && self.stride_s <= self.window_s) {
            return Err(Error::Invalid(format!(
                "window spec needs 0 < stride ({}) <= window ({})",
                self.stride_s, self.window_s
            )));
        }
        Ok(())
    }

    /// Window and stride lengths in samples; both must be whole.
    pub fn in_samples(&self, sample_rate_hz: u32) -> Result<(usize, usize)> {
        self.validate()?;
        let to_samples = |s: f64, what: &str| {
            let n = s * sample_rate_hz as f64;
            if (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
                Err(Error::Invalid(format!("{what} of {s} s is not a whole number of samples")))
            } else {
                Ok(n.round() as usize)
            }
        };
        Ok((to_samples(self.window_s, "window")?, to_samples(self.stride_s, "stride")?))
    }

    /// Number of windows that fit in `n_samples`.
    pub fn window_count(&self, n_samples: usize, sample_rate_hz: u32) -> Result<usize> {
        let (win, stride) = self.in_samples(sample_rate_hz)?;
        Ok(if n_samples < win { 0 } else { (n_samples - win) / stride + 1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Seizure,
    NonSeizure,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Seizure => 1,
            Label::NonSeizure => 0,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Label::Seizure),
            0 => Some(Label::NonSeizure),
            _ => None,
        }
    }
}

/// A copy of `window_s` seconds of every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub index: usize,
    pub start_s: f64,
    pub duration_s: f64,
    pub samples: Vec<Vec<f32>>,
    pub label: Option<Label>,
}

impl LabeledWindow {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

/// Cuts `recording` into overlapping windows, ordered by start time.
/// Recordings shorter than one window yield no windows.
pub fn segment(recording: &Recording, spec: &WindowSpec) -> Result<Vec<LabeledWindow>> {
    let rate = recording.sample_rate_hz();
    let (win, stride) = spec.in_samples(rate)?;
    let count = spec.window_count(recording.n_samples(), rate)?;
    if count == 0 {
        warn!(
            "recording {} lasts {:.2} s, shorter than one {} s window",
            recording.patient_id(),
            recording.duration_s(),
            spec.window_s
        );
    }
    Ok((0..count)
        .map(|i| {
            let from = i * stride;
            LabeledWindow {
                index: i,
                start_s: from as f64 / rate as f64,
                duration_s: spec.window_s,
                samples: recording.channels().iter().map(|c| c[from..from + win].to_vec()).collect(),
                label: None,
            }
        })
        .collect())
}

/// `Seizure` iff the window lies entirely inside some event.
pub fn label(window: &LabeledWindow, events: &[SeizureEvent]) -> Label {
    label_interval(window.start_s, window.end_s(), events)
}

pub fn label_interval(start_s: f64, end_s: f64, events: &[SeizureEvent]) -> Label {
    if events.iter().any(|e| e.contains(start_s, end_s)) {
        Label::Seizure
    } else {
        Label::NonSeizure
    }
}

/// Segments and labels in one pass.
pub fn segment_and_label(recording: &Recording, spec: &WindowSpec, events: &[SeizureEvent]) -> Result<Vec<LabeledWindow>> {
    let mut windows = segment(recording, spec)?;
    for w in &mut windows {
        w.label = Some(label(w, events));
    }
    Ok(windows)
}

/// Assigns every window to the event whose interval is nearest its centre,
/// so that each seizure together with its surrounding background forms one
/// group. With no events every window is in group 0.
pub fn event_groups(windows: &[LabeledWindow], events: &[SeizureEvent]) -> Vec<u32> {
    windows
        .iter()
        .map(|w| {
            let centre = w.start_s + w.duration_s / 2.0;
            let distance = |e: &SeizureEvent| {
                if centre < e.onset_s {
                    e.onset_s - centre
                } else if centre > e.offset_s {
                    centre - e.offset_s
                } else {
                    0.0
                }
            };
            events
                .iter()
                .enumerate()
                .min_by(|a, b| distance(a.1).total_cmp(&distance(b.1)))
                .map_or(0, |(i, _)| i as u32)
        })
        .collect()
}

/// Settings for the synthetic recording generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub patient_id: String,
    pub duration_s: u32,
    pub channel_count: usize,
    pub sample_rate_hz: u32,
    pub seizure_count: usize,
    pub seizure_duration_s: u32,
    /// Spike-wave frequency in Hz.
    pub spike_wave_hz: f64,
    /// Seizure amplitude as a multiple of the background RMS.
    pub seizure_gain: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patient_id: "SYN1".into(),
            duration_s: 300,
            channel_count: 26,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            seizure_count: 2,
            seizure_duration_s: 30,
            spike_wave_hz: 3.0,
            seizure_gain: 3.0,
        }
    }
}

/// Minimum background gap around every synthetic seizure, in seconds.
pub const SYNTH_GAP_S: u32 = 10;

/// Generates pink-noise background with spike-wave seizures laid on top.
/// Seizure onsets fall on whole seconds; the same seed reproduces the same
/// output bit for bit.
pub fn synth_dataset(config: &SynthConfig, seed: u64) -> Result<(Recording, Vec<SeizureEvent>)> {
    if config.channel_count == 0 || config.sample_rate_hz == 0 {
        return Err(Error::Invalid("synthetic recording needs channels and a sample rate".into()));
    }
    if config.seizure_count > 0 && (config.seizure_duration_s as f64) < MIN_EVENT_S {
        return Err(Error::Invalid(format!("seizures must last at least {MIN_EVENT_S} s")));
    }
    let n = config.seizure_count as u32;
    let needed = n * config.seizure_duration_s + (n + 1) * SYNTH_GAP_S;
    if n > 0 && needed > config.duration_s {
        return Err(Error::Invalid(format!(
            "{n} seizures of {} s with {SYNTH_GAP_S} s gaps need {needed} s, recording lasts {} s",
            config.seizure_duration_s, config.duration_s
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut events = Vec::with_capacity(config.seizure_count);
    if n > 0 {
        let slack = config.duration_s - needed;
        let weights: Vec<f64> = (0..=n).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut t = 0u32;
        for w in weights.iter().take(n as usize) {
            t += SYNTH_GAP_S + (slack as f64 * w / total).floor() as u32;
            events.push(SeizureEvent {
                onset_s: t as f64,
                offset_s: (t + config.seizure_duration_s) as f64,
            });
            t += config.seizure_duration_s;
        }
    }

    let rate = config.sample_rate_hz as f64;
    let len = config.duration_s as usize * config.sample_rate_hz as usize;
    let mut samples = Vec::with_capacity(config.channel_count);
    let seizure_phase: Vec<f64> = events.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
    for _ in 0..config.channel_count {
        let mut channel = pink_noise(&mut rng, len);
        let rms = (channel.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / len.max(1) as f64).sqrt();
        let jitter = rng.gen_range(-0.05..0.05);
        for (e, phase0) in events.iter().zip(&seizure_phase) {
            let from = (e.onset_s * rate) as usize;
            let to = ((e.offset_s * rate) as usize).min(len);
            for (k, v) in channel[from..to].iter_mut().enumerate() {
                let cycle = (k as f64 / rate) * config.spike_wave_hz + phase0 + jitter;
                *v += (config.seizure_gain * rms * spike_wave(cycle.fract())) as f32;
            }
        }
        samples.push(channel);
    }
    let recording = Recording::new(config.patient_id.clone(), config.sample_rate_hz, samples)?;
    Ok((recording, events))
}

/// One spike-wave cycle over phase in [0, 1): a sharp spike followed by a
/// slow negative wave. Peak magnitude is about 1.
fn spike_wave(phase: f64) -> f64 {
    let spike = (-((phase - 0.1) / 0.03).powi(2)).exp();
    let wave = if phase > 0.3 {
        -0.6 * (std::f64::consts::PI * (phase - 0.3) / 0.7).sin()
    } else {
        0.0
    };
    spike + wave
}

/// Kellett's filtered white noise, roughly -3 dB/octave.
fn pink_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    let mut b = [0f64; 7];
    (0..len)
        .map(|_| {
            let white: f64 = rng.sample(StandardNormal);
            b[0] = 0.99886 * b[0] + white * 0.0555179;
            b[1] = 0.99332 * b[1] + white * 0.0750759;
            b[2] = 0.96900 * b[2] + white * 0.1538520;
            b[3] = 0.86650 * b[3] + white * 0.3104856;
            b[4] = 0.55000 * b[4] + white * 0.5329522;
            b[5] = -0.7616 * b[5] - white * 0.0168980;
            let pink = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + white * 0.5362;
            b[6] = white * 0.115926;
            (pink * 0.11) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tod(s: &str) -> TimeOfDay {
        s.parse().unwrap()
    }

    fn constant_recording(seconds: usize, rate: u32) -> Recording {
        Recording::new("P", rate, vec![vec![0.0; seconds * rate as usize]; 2]).unwrap()
    }

    #[test]
    fn table_row_converts_to_relative_seconds() {
        let a = parse_annotations("P1, 21:42:56, 21:43:21", tod("21:00:00")).unwrap();
        assert_eq!(a.events(), vec![SeizureEvent { onset_s: 2576.0, offset_s: 2601.0 }]);
        assert_eq!(a.events()[0].duration_s(), 25.0);
    }

    #[test]
    fn end_before_start_wraps_past_midnight() {
        let a = parse_annotations("P2, 23:59:50, 00:00:10", tod("23:00:00")).unwrap();
        let e = a.events()[0];
        assert_eq!(e.onset_s, 3590.0);
        assert_eq!(e.offset_s, 3610.0);
    }

    #[test]
    fn short_rows_are_rejected_with_row_number() {
        let a = parse_annotations("patient,onset,offset\nP9, 10:00:00, 10:00:05\nP1, 10:01:00, 10:01:10", tod("10:00:00")).unwrap();
        assert_eq!(a.rejected.len(), 1);
        assert_eq!(a.rejected[0].row, 2);
        assert_eq!(a.events().len(), 1);
    }

    #[test]
    fn malformed_time_names_the_row() {
        let err = parse_annotations("P1, 10:00:00, 10:00:30\nP1, 10:61:00, 10:62:00", tod("10:00:00")).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
        let err = parse_annotations("P1, 10h, 10:00:30", tod("10:00:00")).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }));
    }

    #[test]
    fn equal_onset_and_offset_is_a_validation_error() {
        let err = parse_annotations("P1, 10:00:00, 10:00:00", tod("10:00:00")).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn segment_counts() {
        let spec = WindowSpec::default();
        let one = segment(&constant_recording(10, 16), &spec).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].start_s, 0.0);
        let ten = segment(&constant_recording(19, 16), &spec).unwrap();
        let starts: Vec<f64> = ten.iter().map(|w| w.start_s).collect();
        assert_eq!(starts, (0..10).map(f64::from).collect::<Vec<_>>());
        assert!(segment(&constant_recording(9, 16), &spec).unwrap().is_empty());
        assert!(ten.iter().all(|w| w.samples.iter().all(|c| c.len() == 160)));
    }

    #[test]
    fn containment_rule() {
        let ev = [SeizureEvent { onset_s: 95.0, offset_s: 120.0 }];
        assert_eq!(label_interval(100.0, 110.0, &ev), Label::Seizure);
        assert_eq!(label_interval(90.0, 100.0, &ev), Label::NonSeizure);
        assert_eq!(label_interval(95.0, 105.0, &ev), Label::Seizure);
        assert_eq!(label_interval(111.0, 121.0, &ev), Label::NonSeizure);
        assert_eq!(label_interval(0.0, 10.0, &[]), Label::NonSeizure);
    }

    #[test]
    fn invalid_window_specs() {
        assert!(WindowSpec { window_s: 10.0, stride_s: 0.0 }.validate().is_err());
        assert!(WindowSpec { window_s: 1.0, stride_s: 2.0 }.validate().is_err());
        assert!(WindowSpec { window_s: 1.0, stride_s: 0.35 }.in_samples(10).is_err());
    }

    #[test]
    fn recording_rejects_ragged_channels() {
        assert!(Recording::new("P", 10, vec![vec![0.0; 3], vec![0.0; 4]]).is_err());
        assert!(Recording::new("P", 0, vec![vec![0.0; 3]]).is_err());
        assert!(Recording::new("P", 10, vec![]).is_err());
    }

    #[test]
    fn container_round_trip() {
        let rec = Recording::new("µ-7", 4, vec![vec![1.0, -2.5, 3.25], vec![0.0, f32::MIN_POSITIVE, 7.0]]).unwrap();
        let mut buf = Vec::new();
        rec.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"LWRC\x01");
        assert_eq!(Recording::read_from(&buf[..]).unwrap(), rec);
        buf[4] = 9;
        assert!(matches!(Recording::read_from(&buf[..]), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn csv_import() {
        let csv = "c0,c1\n1.0,2.0\n3.0,4.0\n";
        let rec = Recording::from_csv(csv.as_bytes(), "P", 2).unwrap();
        assert_eq!(rec.channel(0), &[1.0, 3.0]);
        assert_eq!(rec.channel(1), &[2.0, 4.0]);
        assert!(Recording::from_csv("1,2\n3".as_bytes(), "P", 2).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig {
            duration_s: 60,
            channel_count: 3,
            sample_rate_hz: 32,
            seizure_count: 1,
            seizure_duration_s: 20,
            ..SynthConfig::default()
        };
        assert_eq!(synth_dataset(&cfg, 7).unwrap(), synth_dataset(&cfg, 7).unwrap());
        assert_ne!(synth_dataset(&cfg, 7).unwrap().0, synth_dataset(&cfg, 8).unwrap().0);
    }

    #[test]
    fn synth_events_match_request() {
        let cfg = SynthConfig {
            duration_s: 300,
            channel_count: 2,
            sample_rate_hz: 32,
            seizure_count: 2,
            seizure_duration_s: 30,
            ..SynthConfig::default()
        };
        let (rec, events) = synth_dataset(&cfg, 1).unwrap();
        assert_eq!(events.len(), 2);
        assert!(events.iter().all(|e| e.duration_s() == 30.0));
        assert!(events[0].onset_s >= 10.0);
        assert!(events[1].onset_s - events[0].offset_s >= 10.0);
        assert!(rec.duration_s() - events[1].offset_s >= 10.0);
    }

    #[test]
    fn synth_without_seizures_labels_all_background() {
        let cfg = SynthConfig {
            duration_s: 40,
            channel_count: 1,
            sample_rate_hz: 16,
            seizure_count: 0,
            ..SynthConfig::default()
        };
        let (rec, events) = synth_dataset(&cfg, 3).unwrap();
        let windows = segment_and_label(&rec, &WindowSpec::default(), &events).unwrap();
        assert_eq!(windows.len(), 31);
        assert!(windows.iter().all(|w| w.label == Some(Label::NonSeizure)));
    }

    #[test]
    fn synth_rejects_overfull_schedule() {
        let cfg = SynthConfig {
            duration_s: 60,
            seizure_count: 2,
            seizure_duration_s: 20,
            ..SynthConfig::default()
        };
        assert!(synth_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn groups_follow_nearest_event() {
        let rec = constant_recording(100, 4);
        let events = [
            SeizureEvent { onset_s: 20.0, offset_s: 30.0 },
            SeizureEvent { onset_s: 70.0, offset_s: 80.0 },
        ];
        let windows = segment(&rec, &WindowSpec::default()).unwrap();
        let groups = event_groups(&windows, &events);
        assert_eq!(groups[0], 0);
        assert_eq!(groups[90], 1);
        assert_eq!(groups[40], 0);
        assert_eq!(groups[45], 0);
        assert_eq!(groups[46], 1);
    }
}
