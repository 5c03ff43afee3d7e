//! Short-time Fourier transform and the normalized multichannel spectrogram
//! the encoder consumes.

use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::bytes::{crc32, put_short_str, Reader};
use crate::error::{Error, Result};
use crate::ingest::{Label, LabeledWindow};

pub const SPECTROGRAM_SET_MAGIC: &[u8; 4] = b"LWSP";
pub const SPECTROGRAM_SET_VERSION: u8 = 1;

/// Ranges narrower than this are treated as constant during min-max scaling.
pub const NORM_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowFn {
    Hann,
    Rect,
}

impl WindowFn {
    /// Periodic window coefficients.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowFn::Rect => vec![1.0; n],
            WindowFn::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window_fn: WindowFn,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 256,
            hop: 128,
            window_fn: WindowFn::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() {
            return Err(Error::Invalid(format!("fft size {} is not a power of two", self.fft_size)));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Invalid(format!("hop {} must be in 1..={}", self.hop, self.fft_size)));
        }
        Ok(())
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn time_frames(&self, signal_len: usize) -> usize {
        if signal_len < self.fft_size {
            0
        } else {
            (signal_len - self.fft_size) / self.hop + 1
        }
    }
}

/// One-sided complex STFT, stored frequency-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Stft {
    pub freq_bins: usize,
    pub time_frames: usize,
    pub values: Vec<Complex<f64>>,
}

impl Stft {
    pub fn at(&self, bin: usize, frame: usize) -> Complex<f64> {
        self.values[bin * self.time_frames + frame]
    }
}

/// Windowed, unnormalized forward DFT of every frame
/// `[t * hop, t * hop + fft_size)`.
pub fn stft(signal: &[f32], cfg: &StftConfig) -> Result<Stft> {
    cfg.validate()?;
    if signal.len() < cfg.fft_size {
        return Err(Error::Invalid(format!(
            "signal of {} samples is shorter than the fft size {}",
            signal.len(),
            cfg.fft_size
        )));
    }
    let n = cfg.fft_size;
    let bins = cfg.freq_bins();
    let frames = cfg.time_frames(signal.len());
    let window = cfg.window_fn.coefficients(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut values = vec![Complex::new(0.0, 0.0); bins * frames];
    for t in 0..frames {
        let frame = &signal[t * cfg.hop..t * cfg.hop + n];
        for ((b, x), w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(*x as f64 * w, 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            values[f * frames + t] = buf[f];
        }
    }
    Ok(Stft {
        freq_bins: bins,
        time_frames: frames,
        values,
    })
}

/// Channel-stacked spectrogram with values in `[0, 1]`, laid out
/// `[channel][freq][time]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub channels: usize,
    pub freq_bins: usize,
    pub time_frames: usize,
    pub values: Vec<f32>,
    pub label: Option<Label>,
}

impl Spectrogram {
    pub fn zeros(channels: usize, freq_bins: usize, time_frames: usize) -> Self {
        Spectrogram {
            channels,
            freq_bins,
            time_frames,
            values: vec![0.0; channels * freq_bins * time_frames],
            label: None,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.freq_bins, self.time_frames]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, channel: usize, bin: usize, frame: usize) -> f32 {
        self.values[(channel * self.freq_bins + bin) * self.time_frames + frame]
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let plane = self.freq_bins * self.time_frames;
        &self.values[channel * plane..(channel + 1) * plane]
    }

    /// Writes one channel as a binary 8-bit PGM image, low frequencies at
    /// the bottom.
    pub fn write_pgm<W: Write>(&self, channel: usize, mut w: W) -> Result<()> {
        if channel >= self.channels {
            return Err(Error::Invalid(format!("channel {channel} of {}", self.channels)));
        }
        write!(w, "P5\n{} {}\n255\n", self.time_frames, self.freq_bins)?;
        let mut pixels = Vec::with_capacity(self.freq_bins * self.time_frames);
        for f in (0..self.freq_bins).rev() {
            for t in 0..self.time_frames {
                pixels.push((self.at(channel, f, t).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&pixels)?;
        Ok(())
    }
}

/// Magnitude STFT per channel, `log1p`, then per-channel min-max scaling.
/// A channel whose range is below [`NORM_EPS`] maps to all zeros.
pub fn to_spectrogram(window: &LabeledWindow, cfg: &StftConfig) -> Result<Spectrogram> {
    let channels = window.samples.len();
    let len = window.samples.first().map_or(0, Vec::len);
    let bins = cfg.freq_bins();
    let frames = cfg.time_frames(len);
    let mut values = Vec::with_capacity(channels * bins * frames);
    for signal in &window.samples {
        let s = stft(signal, cfg)?;
        let start = values.len();
        values.extend(s.values.iter().map(|c| c.norm().ln_1p() as f32));
        min_max_in_place(&mut values[start..]);
    }
    Ok(Spectrogram {
        channels,
        freq_bins: bins,
        time_frames: frames,
        values,
        label: window.label,
    })
}

fn min_max_in_place(plane: &mut [f32]) {
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = hi - lo;
    if !(range > NORM_EPS) {
        plane.iter_mut().for_each(|v| *v = 0.0);
    } else {
        plane.iter_mut().for_each(|v| *v = ((*v - lo) / range).clamp(0.0, 1.0));
    }
}

/// Keeps the lowest `f_model` bins and zero-pads or centre-crops time to
/// `t_model` frames. Padding puts the extra frame, if any, on the right.
pub fn resize_to_model(spec: &Spectrogram, f_model: usize, t_model: usize) -> Result<Spectrogram> {
    if f_model > spec.freq_bins {
        return Err(Error::Invalid(format!(
            "cannot resize {} frequency bins up to {f_model}",
            spec.freq_bins
        )));
    }
    if f_model == spec.freq_bins && t_model == spec.time_frames {
        return Ok(spec.clone());
    }
    let mut out = Spectrogram::zeros(spec.channels, f_model, t_model);
    out.label = spec.label;
    // source frame range and destination offset
    let (src_from, dst_from, count) = if t_model >= spec.time_frames {
        (0, (t_model - spec.time_frames) / 2, spec.time_frames)
    } else {
        ((spec.time_frames - t_model) / 2, 0, t_model)
    };
    for c in 0..spec.channels {
        for f in 0..f_model {
            let src = (c * spec.freq_bins + f) * spec.time_frames + src_from;
            let dst = (c * f_model + f) * t_model + dst_from;
            out.values[dst..dst + count].copy_from_slice(&spec.values[src..src + count]);
        }
    }
    Ok(out)
}

/// Spectrograms of one recording with their window indices and event
/// groups, as written by the ingest stage.
///
/// Layout: magic `LWSP`, version, config hash and patient id (u16 length +
/// UTF-8 each), item count u32, channels/bins/frames u32 each, then per
/// item: window index u64, label u8 (0 non-seizure, 1 seizure, 255 none),
/// group u32 and the `f32` values; a CRC-32 of everything before it ends
/// the file.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramSet {
    pub patient_id: String,
    pub config_hash: String,
    pub dims: [usize; 3],
    pub window_index: Vec<u64>,
    pub groups: Vec<u32>,
    pub items: Vec<Spectrogram>,
}

impl SpectrogramSet {
    pub fn labels(&self) -> Option<Vec<u8>> {
        self.items.iter().map(|s| s.label.map(Label::as_u8)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.items.len();
        if self.window_index.len() != n || self.groups.len() != n {
            return Err(Error::shape("spectrogram set", &[self.window_index.len(), self.groups.len()], &[n, n]));
        }
        let per = self.dims.iter().product::<usize>();
        let mut out = Vec::with_capacity(64 + n * (13 + per * 4));
        out.extend_from_slice(SPECTROGRAM_SET_MAGIC);
        out.push(SPECTROGRAM_SET_VERSION);
        put_short_str(&mut out, &self.config_hash)?;
        put_short_str(&mut out, &self.patient_id)?;
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for ((s, w), g) in self.items.iter().zip(&self.window_index).zip(&self.groups) {
            if s.dims() != self.dims {
                return Err(Error::shape("spectrogram set", &s.dims(), &self.dims));
            }
            out.extend_from_slice(&w.to_le_bytes());
            out.push(s.label.map_or(255, Label::as_u8));
            out.extend_from_slice(&g.to_le_bytes());
            for v in &s.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if &r.array::<4>()? != SPECTROGRAM_SET_MAGIC {
            return Err(Error::Protocol("not a spectrogram set".into()));
        }
        let version = r.u8()?;
        if version != SPECTROGRAM_SET_VERSION {
            return Err(Error::Version {
                found: version,
                supported: vec![SPECTROGRAM_SET_VERSION],
            });
        }
        if bytes.len() < 4 || crc32(&bytes[..bytes.len() - 4]) != u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap()) {
            return Err(Error::Integrity("spectrogram set checksum mismatch".into()));
        }
        let config_hash = r.short_str()?;
        let patient_id = r.short_str()?;
        let n = r.u32()? as usize;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let per: usize = dims.iter().product();
        if r.remaining() != n * (13 + per * 4) + 4 {
            return Err(Error::Invalid("spectrogram set length does not match its header".into()));
        }
        let (mut window_index, mut groups, mut items) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            window_index.push(r.u64()?);
            let tag = r.u8()?;
            let label = match tag {
                255 => None,
                t => Some(Label::from_u8(t).ok_or_else(|| Error::Invalid(format!("unknown label {t}")))?),
            };
            groups.push(r.u32()?);
            let mut s = Spectrogram::zeros(dims[0], dims[1], dims[2]);
            for v in &mut s.values {
                *v = r.f32()?;
            }
            s.label = label;
            items.push(s);
        }
        Ok(SpectrogramSet {
            patient_id,
            config_hash,
            dims,
            window_index,
            groups,
            items,
        })
    }
}
