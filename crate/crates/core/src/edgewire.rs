//! Latent telemetry: the frame format, a TCP server and client, and the
//! energy and battery arithmetic for edge devices.
//!
//! Frame layout, little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `LWLF` |
//! | 1 | version (`0x01`) |
//! | 1 | precision: 0 f32, 1 f16 |
//! | 2 | patient id length `p` |
//! | p | patient id, UTF-8 |
//! | 8 | window index |
//! | 2 | latent dimension `n` |
//! | n * 2 or n * 4 | latent values |
//! | 4 | CRC-32 of every preceding byte of the frame |
//!
//! A 64-dimensional f16 frame with patient id `P01` is
//! `4 + 1 + 1 + 2 + 3 + 8 + 2 + 128 + 4 = 153` bytes.
//!
//! Every frame the server reads gets one response: a status byte (0 ok,
//! 1 protocol, 2 integrity, 3 internal). An ok status is followed by an
//! 8-byte `f64` probability, NaN when the handler produced none. After a
//! malformed frame the server skips ahead to the next magic.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::bytes::{crc32, Reader};
use crate::error::{Error, Result};
use crate::quant::{to_f16_saturating, Precision};

pub const FRAME_MAGIC: &[u8; 4] = b"LWLF";
pub const FRAME_VERSION: u8 = 1;
pub const SUPPORTED_FRAME_VERSIONS: &[u8] = &[FRAME_VERSION];
/// Largest latent dimension a decoder accepts.
pub const MAX_LATENT_DIM: usize = 4096;
/// Longest patient id a decoder accepts, in bytes.
pub const MAX_PATIENT_ID: usize = 1024;

pub const LISTEN_ENV: &str = "LATENTWIRE_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:7878";

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

/// One latent vector on the wire. Values are held at the frame's precision
/// so encoding and decoding round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    patient_id: String,
    window_index: u64,
    precision: Precision,
    values: Vec<f32>,
}

impl LatentFrame {
    /// Rounds `values` to `precision` (f16 saturates at its largest finite
    /// value).
    pub fn new(patient_id: impl Into<String>, window_index: u64, precision: Precision, values: &[f32]) -> Result<Self> {
        let patient_id = patient_id.into();
        if patient_id.len() > MAX_PATIENT_ID {
            return Err(Error::Invalid(format!("patient id longer than {MAX_PATIENT_ID} bytes")));
        }
        if values.len() > MAX_LATENT_DIM {
            return Err(Error::Invalid(format!("latent dimension {} exceeds {MAX_LATENT_DIM}", values.len())));
        }
        let values = match precision {
            Precision::F32 => {
                if values.iter().any(|v| v.is_nan()) {
                    return Err(Error::Invalid("NaN in latent".into()));
                }
                values.to_vec()
            }
            Precision::F16 => values
                .iter()
                .map(|v| Ok(to_f16_saturating(*v)?.0.to_f32()))
                .collect::<Result<_>>()?,
            Precision::F64 => return Err(Error::Invalid("frames carry f32 or f16 latents".into())),
        };
        Ok(LatentFrame {
            patient_id,
            window_index,
            precision,
            values,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn window_index(&self) -> u64 {
        self.window_index
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn latent_dim(&self) -> usize {
        self.values.len()
    }

    pub fn encoded_len(&self) -> usize {
        frame_len(self.patient_id.len(), self.values.len(), self.precision)
    }
}

/// Encoded size of a frame.
pub fn frame_len(patient_id_len: usize, latent_dim: usize, precision: Precision) -> usize {
    4 + 1 + 1 + 2 + patient_id_len + 8 + 2 + latent_dim * precision.bytes_per_value() + 4
}

pub fn encode_frame(frame: &LatentFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(frame.precision.tag());
    out.extend_from_slice(&(frame.patient_id.len() as u16).to_le_bytes());
    out.extend_from_slice(frame.patient_id.as_bytes());
    out.extend_from_slice(&frame.window_index.to_le_bytes());
    out.extend_from_slice(&(frame.values.len() as u16).to_le_bytes());
    for v in &frame.values {
        match frame.precision {
            Precision::F16 => out.extend_from_slice(&f16::from_f32(*v).to_le_bytes()),
            _ => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decodes the frame at the start of `bytes`, returning it with the number
/// of bytes consumed. A short buffer yields [`Error::Incomplete`].
pub fn decode_frame(bytes: &[u8]) -> Result<(LatentFrame, usize)> {
    let mut r = Reader::new(bytes);
    let magic = r.array::<4>()?;
    if &magic != FRAME_MAGIC {
        return Err(Error::Protocol(format!("bad frame magic {magic:02x?}")));
    }
    let version = r.u8()?;
    if !SUPPORTED_FRAME_VERSIONS.contains(&version) {
        return Err(Error::Version {
            found: version,
            supported: SUPPORTED_FRAME_VERSIONS.to_vec(),
        });
    }
    let precision = match r.u8()? {
        0 => Precision::F32,
        1 => Precision::F16,
        t => return Err(Error::Protocol(format!("unknown frame precision tag {t}"))),
    };
    let id_len = r.u16()? as usize;
    if id_len > MAX_PATIENT_ID {
        return Err(Error::Protocol(format!("patient id length {id_len} exceeds {MAX_PATIENT_ID}")));
    }
    let id_raw = r.take(id_len)?;
    let window_index = r.u64()?;
    let dim = r.u16()? as usize;
    if dim > MAX_LATENT_DIM {
        return Err(Error::Protocol(format!("latent dimension {dim} exceeds {MAX_LATENT_DIM}")));
    }
    let payload = r.take(dim * precision.bytes_per_value())?;
    let body_len = r.position();
    let stored = r.u32()?;
    if crc32(&bytes[..body_len]) != stored {
        return Err(Error::Integrity("frame checksum mismatch".into()));
    }
    let patient_id = String::from_utf8(id_raw.to_vec()).map_err(|_| Error::Protocol("patient id is not UTF-8".into()))?;
    let values = match precision {
        Precision::F16 => payload.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    Ok((
        LatentFrame {
            patient_id,
            window_index,
            precision,
            values,
        },
        r.position(),
    ))
}

/// Incremental decoder over a byte stream. After a malformed frame it
/// discards bytes up to the next occurrence of the magic.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes received but not yet consumed.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// The next frame or decoding error, or `None` when more bytes are
    /// needed.
    pub fn next_frame(&mut self) -> Option<Result<LatentFrame>> {
        if self.buf.is_empty() {
            return None;
        }
        match decode_frame(&self.buf) {
            Ok((frame, used)) => {
                self.buf.drain(..used);
                Some(Ok(frame))
            }
            Err(Error::Incomplete { .. }) => {
                // A partial magic that can never match is garbage already.
                let n = self.buf.len().min(4);
                if self.buf[..n] != FRAME_MAGIC[..n] {
                    let e = Error::Protocol("bad frame magic".into());
                    self.resync();
                    return Some(Err(e));
                }
                None
            }
            Err(e) => {
                self.resync();
                Some(Err(e))
            }
        }
    }

    fn resync(&mut self) {
        let next = self.buf[1..]
            .windows(4)
            .position(|w| w == FRAME_MAGIC)
            .map(|p| p + 1)
            .unwrap_or_else(|| {
                // Keep a tail that could be the start of a magic.
                let keep = (1..=3.min(self.buf.len() - 1))
                    .rev()
                    .find(|k| self.buf[self.buf.len() - k..] == FRAME_MAGIC[..*k])
                    .unwrap_or(0);
                self.buf.len() - keep
            });
        self.buf.drain(..next);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Protocol = 1,
    Integrity = 2,
    Internal = 3,
}

impl Status {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Status::Ok),
            1 => Ok(Status::Protocol),
            2 => Ok(Status::Integrity),
            3 => Ok(Status::Internal),
            other => Err(Error::Protocol(format!("unknown status byte {other}"))),
        }
    }

    fn for_error(e: &Error) -> Self {
        match e {
            Error::Integrity(_) => Status::Integrity,
            Error::Protocol(_) | Error::Version { .. } => Status::Protocol,
            _ => Status::Internal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Response {
    pub status: Status,
    /// Present on ok responses; NaN when the handler had nothing to report.
    pub probability: Option<f64>,
}

impl Response {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.status as u8];
        if self.status == Status::Ok {
            out.extend_from_slice(&self.probability.unwrap_or(f64::NAN).to_le_bytes());
        }
        out
    }
}

/// Reads one response, or `None` at a clean end of stream.
fn read_response<R: Read>(r: &mut R) -> Result<Option<Response>> {
    let mut b = [0u8; 1];
    match r.read_exact(&mut b) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::io("reading response", e)),
    }
    let status = Status::from_byte(b[0])?;
    let probability = if status == Status::Ok {
        let mut p = [0u8; 8];
        r.read_exact(&mut p).map_err(|e| Error::io("reading response probability", e))?;
        Some(f64::from_le_bytes(p))
    } else {
        None
    };
    Ok(Some(Response { status, probability }))
}

/// Per-frame work done by the server: typically a classifier probability.
pub type Handler = dyn Fn(&LatentFrame) -> Result<Option<f64>> + Send + Sync;

/// Listen address: the explicit value, else `LATENTWIRE_LISTEN`, else
/// [`DEFAULT_LISTEN`].
pub fn listen_addr(flag: Option<&str>) -> String {
    flag.map(str::to_string)
        .or_else(|| std::env::var(LISTEN_ENV).ok().filter(|v| !v.is_empty()))
        .unwrap_or_else(|| DEFAULT_LISTEN.to_string())
}

fn serve_connection(mut stream: TcpStream, handler: &Handler) -> Result<()> {
    let mut decoder = FrameDecoder::new();
    let mut chunk = vec![0u8; 16 * 1024];
    let mut out = Vec::new();
    loop {
        let n = stream.read(&mut chunk).map_err(|e| Error::io("reading frames", e))?;
        if n == 0 {
            return Ok(());
        }
        decoder.push(&chunk[..n]);
        out.clear();
        while let Some(item) = decoder.next_frame() {
            let response = match item.and_then(|f| handler(&f)) {
                Ok(p) => Response {
                    status: Status::Ok,
                    probability: p,
                },
                Err(e) => {
                    log::debug!("frame rejected: {e}");
                    Response {
                        status: Status::for_error(&e),
                        probability: None,
                    }
                }
            };
            out.extend_from_slice(&response.to_bytes());
        }
        if !out.is_empty() {
            stream.write_all(&out).map_err(|e| Error::io("writing responses", e))?;
        }
    }
}

/// A running server; dropping the handle leaves it running.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for the accept loop to end.
    /// Open connections finish on their own threads.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` and serves every connection on its own thread.
pub fn serve(addr: &str, handler: Arc<Handler>) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::io(format!("binding {addr}"), e))?;
    let local = listener.local_addr().map_err(|e| Error::io("reading bound address", e))?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let handler = handler.clone();
                    std::thread::spawn(move || {
                        let peer = stream.peer_addr().ok();
                        if let Err(e) = serve_connection(stream, handler.as_ref()) {
                            log::warn!("connection {peer:?}: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });
    Ok(ServerHandle {
        addr: local,
        stop,
        thread: Some(thread),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferStats {
    pub frames: usize,
    pub bytes_sent: u64,
    pub wall_s: f64,
    pub responses: Vec<Response>,
}

fn connect(addr: &str) -> Result<TcpStream> {
    let targets: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|e| Error::io(format!("resolving {addr}"), e))?
        .collect();
    let mut last = None;
    for t in &targets {
        match TcpStream::connect_timeout(t, CONNECT_TIMEOUT) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::io(
        format!("connecting to {addr}"),
        last.unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address")),
    ))
}

/// Streams already-encoded frames back to back and collects every response
/// until the server closes the connection.
pub fn send_encoded(addr: &str, encoded: &[Vec<u8>]) -> Result<TransferStats> {
    let start = Instant::now();
    let stream = connect(addr)?;
    let _ = stream.set_nodelay(true);
    let mut reader = stream.try_clone().map_err(|e| Error::io("cloning socket", e))?;
    let collector = std::thread::spawn(move || -> Result<Vec<Response>> {
        let mut out = Vec::new();
        let mut buffered = std::io::BufReader::new(&mut reader);
        while let Some(r) = read_response(&mut buffered)? {
            out.push(r);
        }
        Ok(out)
    });
    let mut writer = std::io::BufWriter::new(&stream);
    let mut bytes_sent = 0u64;
    for f in encoded {
        writer.write_all(f).map_err(|e| Error::io(format!("sending to {addr}"), e))?;
        bytes_sent += f.len() as u64;
    }
    writer.flush().map_err(|e| Error::io(format!("sending to {addr}"), e))?;
    drop(writer);
    stream
        .shutdown(Shutdown::Write)
        .map_err(|e| Error::io(format!("closing stream to {addr}"), e))?;
    let responses = collector
        .join()
        .map_err(|_| Error::Invalid("response reader panicked".into()))??;
    Ok(TransferStats {
        frames: encoded.len(),
        bytes_sent,
        wall_s: start.elapsed().as_secs_f64(),
        responses,
    })
}

pub fn send(addr: &str, frames: &[LatentFrame]) -> Result<TransferStats> {
    let encoded: Vec<Vec<u8>> = frames.iter().map(encode_frame).collect();
    send_encoded(addr, &encoded)
}

/// How a device's energy is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum EnergyModel {
    /// Linear model: power times time, with transfer time from bytes.
    Parametric {
        compute_power_w: f64,
        tx_power_w: f64,
        tx_rate_bytes_per_s: f64,
    },
    /// Fixed totals measured on hardware, plus the average power of each
    /// pipeline.
    Measured {
        compute_j: f64,
        tx_j: f64,
        raw_tx_j: f64,
        compressed_power_w: f64,
        raw_power_w: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    #[serde(flatten)]
    pub model: EnergyModel,
}

impl DeviceProfile {
    /// Jetson Nano measurements.
    pub fn jetson() -> Self {
        DeviceProfile {
            name: "jetson".into(),
            model: EnergyModel::Measured {
                compute_j: 9.67,
                tx_j: 282.56,
                raw_tx_j: 399.48,
                compressed_power_w: 2.64,
                raw_power_w: 3.95,
            },
        }
    }

    /// Raspberry Pi 4 Model B measurements.
    pub fn raspi() -> Self {
        DeviceProfile {
            name: "raspi".into(),
            model: EnergyModel::Measured {
                compute_j: 68.89,
                tx_j: 140.71,
                raw_tx_j: 243.92,
                compressed_power_w: 3.66,
                raw_power_w: 4.00,
            },
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "jetson" => Some(Self::jetson()),
            "raspi" => Some(Self::raspi()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let values: Vec<f64> = match self.model {
            EnergyModel::Parametric {
                compute_power_w,
                tx_power_w,
                tx_rate_bytes_per_s,
            } => vec![compute_power_w, tx_power_w, tx_rate_bytes_per_s],
            EnergyModel::Measured {
                compute_j,
                tx_j,
                raw_tx_j,
                compressed_power_w,
                raw_power_w,
            } => vec![compute_j, tx_j, raw_tx_j, compressed_power_w, raw_power_w],
        };
        if values.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("device profile {} needs positive, finite values", self.name)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub compute_j: f64,
    pub tx_j: f64,
    pub total_j: f64,
    pub raw_tx_j: f64,
    pub savings_pct: f64,
    pub compressed_power_w: Option<f64>,
    pub raw_power_w: Option<f64>,
}

impl EnergyReport {
    fn new(compute_j: f64, tx_j: f64, raw_tx_j: f64, compressed_power_w: Option<f64>, raw_power_w: Option<f64>) -> Self {
        let total_j = compute_j + tx_j;
        let savings_pct = if raw_tx_j > 0.0 {
            (raw_tx_j - total_j) / raw_tx_j * 100.0
        } else if total_j == 0.0 {
            100.0
        } else {
            f64::NEG_INFINITY
        };
        EnergyReport {
            compute_j,
            tx_j,
            total_j,
            raw_tx_j,
            savings_pct,
            compressed_power_w,
            raw_power_w,
        }
    }

    /// Reduction in average power, when both powers are known.
    pub fn power_savings_pct(&self) -> Option<f64> {
        match (self.compressed_power_w, self.raw_power_w) {
            (Some(c), Some(r)) if r > 0.0 => Some((r - c) / r * 100.0),
            _ => None,
        }
    }
}

/// Energy of sending compressed latents (plus on-device compute) against
/// sending the raw signal. Measured profiles ignore the byte and time
/// arguments.
pub fn estimate_energy(profile: &DeviceProfile, compressed_bytes: u64, raw_bytes: u64, compute_s: f64) -> EnergyReport {
    match profile.model {
        EnergyModel::Parametric {
            compute_power_w,
            tx_power_w,
            tx_rate_bytes_per_s,
        } => {
            let tx_s = compressed_bytes as f64 / tx_rate_bytes_per_s;
            let compute_j = compute_power_w * compute_s;
            let tx_j = tx_power_w * tx_s;
            let raw_tx_j = tx_power_w * raw_bytes as f64 / tx_rate_bytes_per_s;
            let busy = compute_s + tx_s;
            let compressed_power = (busy > 0.0).then(|| (compute_j + tx_j) / busy);
            EnergyReport::new(compute_j, tx_j, raw_tx_j, compressed_power, Some(tx_power_w))
        }
        EnergyModel::Measured {
            compute_j,
            tx_j,
            raw_tx_j,
            compressed_power_w,
            raw_power_w,
        } => EnergyReport::new(compute_j, tx_j, raw_tx_j, Some(compressed_power_w), Some(raw_power_w)),
    }
}

/// `mAh * V / 1000`.
pub fn battery_wh(capacity_mah: f64, volts: f64) -> f64 {
    capacity_mah * volts / 1000.0
}

/// Hours until `battery_wh` is drained at `power_w` drawn for a fraction
/// `duty` of the time; `None` when nothing is drawn.
pub fn battery_life(power_w: f64, battery_wh: f64, duty: f64) -> Option<f64> {
    let avg = power_w * duty;
    (avg > 0.0).then(|| battery_wh / avg)
}

/// `"34 h 10 min"`, or `"n/a"`.
pub fn format_hours(hours: Option<f64>) -> String {
    match hours {
        Some(h) if h.is_finite() => {
            let total_min = (h * 60.0).round() as u64;
            format!("{} h {} min", total_min / 60, total_min % 60)
        }
        _ => "n/a".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub stage: String,
    pub repetitions: usize,
    pub min_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
    /// `bytes / median_s` for transfer stages.
    pub bytes_per_s: Option<f64>,
}

pub const BENCH_WARMUPS: usize = 2;

/// Times `f` over `repetitions` runs after [`BENCH_WARMUPS`] untimed runs.
pub fn bench<F: FnMut() -> Result<()>>(stage: &str, repetitions: usize, bytes: Option<u64>, mut f: F) -> Result<BenchStats> {
    if repetitions < 3 {
        return Err(Error::Invalid(format!("bench needs at least 3 repetitions, got {repetitions}")));
    }
    for _ in 0..BENCH_WARMUPS {
        f()?;
    }
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2.0
    };
    let p95 = times[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    Ok(BenchStats {
        stage: stage.into(),
        repetitions,
        min_s: times[0],
        median_s: median,
        p95_s: p95,
        bytes_per_s: bytes.filter(|_| median > 0.0).map(|b| b as f64 / median),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(dim: usize, precision: Precision) -> LatentFrame {
        let values: Vec<f32> = (0..dim).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        LatentFrame::new("P01", 42, precision, &values).unwrap()
    }

    #[test]
    fn round_trip_and_length() {
        for p in [Precision::F16, Precision::F32] {
            let f = frame(64, p);
            let bytes = encode_frame(&f);
            assert_eq!(bytes.len(), frame_len(3, 64, p));
            let (back, used) = decode_frame(&bytes).unwrap();
            assert_eq!(back, f);
            assert_eq!(used, bytes.len());
        }
        assert_eq!(frame_len(3, 64, Precision::F16), 153);
        let empty_id = LatentFrame::new("", 0, Precision::F16, &[1.0]).unwrap();
        assert_eq!(decode_frame(&encode_frame(&empty_id)).unwrap().0, empty_id);
    }

    #[test]
    fn header_errors() {
        let bytes = encode_frame(&frame(4, Precision::F16));
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(decode_frame(&b), Err(Error::Protocol(_))));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(decode_frame(&b), Err(Error::Version { found: 9, .. })));
        assert!(matches!(decode_frame(&bytes[..10]), Err(Error::Incomplete { .. })));
        let mut b = bytes.clone();
        let last = b.len() - 5;
        b[last] ^= 1;
        assert!(matches!(decode_frame(&b), Err(Error::Integrity(_))));
    }

    #[test]
    fn decoder_resyncs_after_garbage() {
        let a = encode_frame(&frame(8, Precision::F16));
        let mut stream = b"garbage!".to_vec();
        stream.extend_from_slice(&a);
        stream.extend_from_slice(b"LW");
        stream.extend_from_slice(&a);
        let mut d = FrameDecoder::new();
        let mut got = Vec::new();
        // Feed one byte at a time to exercise partial frames.
        for b in &stream {
            d.push(&[*b]);
            while let Some(item) = d.next_frame() {
                got.push(item.is_ok());
            }
        }
        assert_eq!(got.iter().filter(|ok| **ok).count(), 2);
        assert!(got.iter().any(|ok| !ok));
        assert_eq!(d.buffered(), 0);
    }

    #[test]
    fn energy_replication() {
        let j = estimate_energy(&DeviceProfile::jetson(), 0, 0, 0.0);
        assert!((j.total_j - 292.23).abs() < 1e-9);
        assert!((j.savings_pct - 26.8).abs() <= 0.05);
        assert!((j.power_savings_pct().unwrap() - 33.2).abs() <= 0.05);
        let r = estimate_energy(&DeviceProfile::raspi(), 0, 0, 0.0);
        assert!((r.total_j - 209.60).abs() < 1e-9);
        assert!((r.savings_pct - 14.1).abs() <= 0.05);
        assert!((r.power_savings_pct().unwrap() - 8.5).abs() <= 0.05);
    }

    #[test]
    fn parametric_energy() {
        let p = DeviceProfile {
            name: "custom".into(),
            model: EnergyModel::Parametric {
                compute_power_w: 5.0,
                tx_power_w: 2.0,
                tx_rate_bytes_per_s: 1000.0,
            },
        };
        let r = estimate_energy(&p, 500, 2000, 0.1);
        assert!((r.compute_j - 0.5).abs() < 1e-12);
        assert!((r.tx_j - 1.0).abs() < 1e-12);
        assert!((r.raw_tx_j - 4.0).abs() < 1e-12);
        assert_eq!(r.total_j, r.compute_j + r.tx_j);
        assert!((r.savings_pct - 62.5).abs() < 1e-9);
        let zero = estimate_energy(&p, 0, 0, 0.0);
        assert_eq!((zero.total_j, zero.savings_pct), (0.0, 100.0));
    }

    #[test]
    fn battery_arithmetic() {
        let wh = battery_wh(27_000.0, 5.0);
        assert_eq!(wh, 135.0);
        assert_eq!(format_hours(battery_life(3.95, wh, 1.0)), "34 h 11 min");
        assert_eq!(format_hours(battery_life(2.64, wh, 1.0)), "51 h 8 min");
        assert_eq!(format_hours(battery_life(4.00, wh, 1.0)), "33 h 45 min");
        assert_eq!(format_hours(battery_life(3.66, wh, 1.0)), "36 h 53 min");
        assert_eq!(battery_life(2.0, 100.0, 0.0), None);
        assert_eq!(format_hours(None), "n/a");
        assert_eq!(battery_life(2.0, 200.0, 0.5).unwrap(), 2.0 * battery_life(2.0, 100.0, 0.5).unwrap());
    }

    #[test]
    fn bench_order_statistics() {
        let s = bench("noop", 20, Some(1000), || Ok(())).unwrap();
        assert!(s.min_s <= s.median_s && s.median_s <= s.p95_s);
        assert!(bench("noop", 2, None, || Ok(())).is_err());
    }

    #[test]
    fn listen_address_precedence() {
        assert_eq!(listen_addr(Some("0.0.0.0:1")), "0.0.0.0:1");
    }

    #[test]
    fn loopback_in_order() {
        let handler: Arc<Handler> = Arc::new(|f: &LatentFrame| Ok(Some(f.window_index() as f64)));
        let server = serve("127.0.0.1:0", handler).unwrap();
        let addr = server.local_addr().to_string();
        let frames: Vec<_> = (0..10)
            .map(|i| LatentFrame::new("P", i, Precision::F16, &[0.5; 16]).unwrap())
            .collect();
        let stats = send(&addr, &frames).unwrap();
        assert_eq!(stats.responses.len(), 10);
        for (i, r) in stats.responses.iter().enumerate() {
            assert_eq!(r.status, Status::Ok);
            assert_eq!(r.probability, Some(i as f64));
        }
        assert_eq!(stats.bytes_sent, 10 * frame_len(1, 16, Precision::F16) as u64);
        let empty = send(&addr, &[]).unwrap();
        assert_eq!((empty.bytes_sent, empty.responses.len()), (0, 0));
        server.shutdown();
    }

    #[test]
    fn unreachable_address_fails() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);
        let err = send(&addr, &[frame(4, Precision::F16)]).unwrap_err();
        assert!(err.to_string().contains(&addr), "{err}");
    }
}
