//! Residual convolutional variational autoencoder over channel-stacked
//! spectrograms.
//!
//! The encoder maps one `[channels, freq, time]` spectrogram to the mean and
//! log-variance of a diagonal Gaussian over an `n`-dimensional latent. Each
//! stage halves both spatial axes with a strided residual block. The decoder
//! mirrors it with transposed convolutions and ends in a sigmoid, matching
//! the `[0, 1]` range of normalized spectrograms.
//!
//! The minimized objective per sample is `lambda * KL(q(z|x) || N(0, I)) +
//! SSE(x, x_hat)`, averaged over the batch, with one reparameterized sample
//! of `z` per datum.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::adam::{AdamConfig, AdamState};
use crate::autodiff::gradcheck::{rel_err, GradCheckReport};
use crate::autodiff::{BatchNormMode, BatchStats, ParamStore, Real, Tape, Tensor, Var};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

/// Latent sizes swept in the original study.
pub const LATENT_DIMS: [usize; 5] = [16, 32, 64, 128, 256];

/// `logvar` is clamped to `[-LOGVAR_LIMIT, LOGVAR_LIMIT]`.
pub const LOGVAR_LIMIT: f64 = 10.0;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub in_channels: usize,
    pub freq_bins: usize,
    pub time_frames: usize,
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub stages: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 64,
            in_channels: 26,
            freq_bins: 128,
            time_frames: 32,
            base_channels: 16,
            blocks_per_stage: 1,
            stages: 4,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("in_channels", self.in_channels),
            ("freq_bins", self.freq_bins),
            ("time_frames", self.time_frames),
            ("base_channels", self.base_channels),
            ("blocks_per_stage", self.blocks_per_stage),
            ("stages", self.stages),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("vae {name} must be at least 1")));
        }
        if self.stages >= usize::BITS as usize - 1 {
            return Err(Error::Invalid(format!("{} stages is too deep", self.stages)));
        }
        let step = 1usize << self.stages;
        if self.freq_bins % step != 0 || self.time_frames % step != 0 {
            return Err(Error::Invalid(format!(
                "input {}x{} is not divisible by 2^{} = {step}",
                self.freq_bins, self.time_frames, self.stages
            )));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.freq_bins * self.time_frames
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Channels and spatial size at the bottleneck.
    fn bottleneck(&self) -> (usize, usize, usize) {
        (
            self.stage_channels(self.stages - 1),
            self.freq_bins >> self.stages,
            self.time_frames >> self.stages,
        )
    }
}

/// Input elements over latent elements, kept as a reduced fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionRatio {
    pub numerator: u64,
    pub denominator: u64,
}

impl CompressionRatio {
    pub fn new(input_elements: u64, latent_elements: u64) -> Result<Self> {
        if latent_elements == 0 {
            return Err(Error::Invalid("latent size must be positive".into()));
        }
        let g = gcd(input_elements, latent_elements).max(1);
        Ok(CompressionRatio {
            numerator: input_elements / g,
            denominator: latent_elements / g,
        })
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// The ratio as a whole number when it is one.
    pub fn as_integer(&self) -> Option<u64> {
        (self.denominator == 1).then_some(self.numerator)
    }
}

impl std::fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.as_integer() {
            Some(v) => write!(f, "1:{v}"),
            None => write!(f, "{}:{}", self.denominator, self.numerator),
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `(in_channels * freq_bins * time_frames) / latent_dim`.
pub fn compression_ratio(config: &VaeConfig) -> Result<CompressionRatio> {
    CompressionRatio::new(config.input_len() as u64, config.latent_dim as u64)
}

/// Parameters of the approximate posterior for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderOutput {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
}

/// Batch-mean loss terms. `total` is always `lambda * kl + recon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub recon: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(kl: f64, recon: f64, lambda: f64) -> Self {
        LossBreakdown {
            kl,
            recon,
            total: lambda * kl + recon,
        }
    }
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize(out: &EncoderOutput, noise: &[f32]) -> Result<Vec<f32>> {
    if noise.len() != out.mu.len() || out.logvar.len() != out.mu.len() {
        return Err(Error::shape("reparameterize", &[out.mu.len()], &[noise.len()]));
    }
    Ok(out
        .mu
        .iter()
        .zip(&out.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (lv * 0.5).exp() * e)
        .collect())
}

/// Closed-form `KL(N(mu, diag(exp(logvar))) || N(0, I))`, evaluated in
/// double precision.
pub fn kl_divergence(out: &EncoderOutput) -> f64 {
    0.5 * out
        .mu
        .iter()
        .zip(&out.logvar)
        .map(|(m, lv)| {
            let (m, lv) = (*m as f64, *lv as f64);
            m * m + lv.exp() - 1.0 - lv
        })
        .sum::<f64>()
}

/// Sum of squared differences over every element.
pub fn recon_loss(x: &Spectrogram, x_hat: &Spectrogram) -> Result<f64> {
    if x.dims() != x_hat.dims() {
        return Err(Error::shape("recon_loss", &x.dims(), &x_hat.dims()));
    }
    Ok(x
        .values
        .iter()
        .zip(&x_hat.values)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum())
}

struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t, true);
    }

    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) {
        self.normal(format!("{name}.w"), &[out_c, in_c, k, k], (2.0 / (in_c * k * k) as f64).sqrt());
    }

    fn conv_t(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize) {
        let fan_in = (in_c * k * k / (stride * stride)).max(1);
        self.normal(format!("{name}.w"), &[in_c, out_c, k, k], (2.0 / fan_in as f64).sqrt());
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0), true);
        self.store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true);
        self.store.add(format!("{name}.mean"), Tensor::zeros(&[c]), false);
        self.store.add(format!("{name}.var"), Tensor::full(&[c], 1.0), false);
    }

    fn linear(&mut self, name: &str, out_f: usize, in_f: usize, std: f64) {
        self.normal(format!("{name}.w"), &[out_f, in_f], std);
        self.store.add(format!("{name}.b"), Tensor::zeros(&[out_f]), true);
    }

    fn down_block(&mut self, name: &str, in_c: usize, out_c: usize, downsample: bool) {
        self.conv(&format!("{name}.conv1"), out_c, in_c, 3);
        self.bn(&format!("{name}.bn1"), out_c);
        self.conv(&format!("{name}.conv2"), out_c, out_c, 3);
        self.bn(&format!("{name}.bn2"), out_c);
        if downsample {
            self.conv(&format!("{name}.skip"), out_c, in_c, 1);
            self.bn(&format!("{name}.skip_bn"), out_c);
        }
    }

    fn up_block(&mut self, name: &str, in_c: usize, out_c: usize, upsample: bool) {
        if upsample {
            self.conv_t(&format!("{name}.conv1"), in_c, out_c, 4, 2);
        } else {
            self.conv(&format!("{name}.conv1"), out_c, in_c, 3);
        }
        self.bn(&format!("{name}.bn1"), out_c);
        self.conv(&format!("{name}.conv2"), out_c, out_c, 3);
        self.bn(&format!("{name}.bn2"), out_c);
        if upsample {
            self.conv_t(&format!("{name}.skip"), in_c, out_c, 2, 2);
            self.bn(&format!("{name}.skip_bn"), out_c);
        }
    }
}

fn init_params(config: &VaeConfig, seed: u64) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let base = config.base_channels;
    init.conv("enc.stem", base, config.in_channels, 3);
    init.bn("enc.stem_bn", base);
    let mut c = base;
    for s in 0..config.stages {
        let out_c = config.stage_channels(s);
        for b in 0..config.blocks_per_stage {
            init.down_block(&format!("enc.s{s}.b{b}"), c, out_c, b == 0);
            c = out_c;
        }
    }
    let (bc, bh, bw) = config.bottleneck();
    let flat = bc * bh * bw;
    let std = (1.0 / flat as f64).sqrt();
    init.linear("enc.mu", config.latent_dim, flat, std);
    init.linear("enc.logvar", config.latent_dim, flat, 0.1 * std);

    init.linear("dec.fc", flat, config.latent_dim, (2.0 / config.latent_dim as f64).sqrt());
    let mut c = bc;
    for s in (0..config.stages).rev() {
        let out_c = if s == 0 { base } else { config.stage_channels(s - 1) };
        for b in 0..config.blocks_per_stage {
            init.up_block(&format!("dec.s{s}.b{b}"), c, out_c, b == 0);
            c = out_c;
        }
    }
    init.conv("dec.head", config.in_channels, base, 3);
    init.store.add("dec.head.b", Tensor::zeros(&[config.in_channels]), true);
    store
}

/// Forward-pass context: records onto `tape`, reads weights from `store`.
struct Net<'a, 't, T> {
    tape: &'t Tape<T>,
    store: &'a ParamStore<T>,
    config: &'a VaeConfig,
    train: bool,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, 't, T: Real> Net<'a, 't, T> {
    fn p(&self, name: &str) -> Result<Var<'t, T>> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| Error::Invalid(format!("model has no parameter {name}")))?;
        Ok(self.tape.param(self.store, id))
    }

    fn buffer(&self, name: &str) -> Result<&'a [T]> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| Error::Invalid(format!("model has no buffer {name}")))?;
        Ok(self.store.get(id).data())
    }

    fn bn(&mut self, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let eps = T::lit(BN_EPS);
        if self.train {
            let (y, stats) = self.tape.batch_norm(x, gamma, beta, BatchNormMode::Train, eps)?;
            if let Some(stats) = stats {
                self.stats.push((name.to_string(), stats));
            }
            Ok(y)
        } else {
            let mode = BatchNormMode::Eval {
                running_mean: self.buffer(&format!("{name}.mean"))?,
                running_var: self.buffer(&format!("{name}.var"))?,
            };
            Ok(self.tape.batch_norm(x, gamma, beta, mode, eps)?.0)
        }
    }

    fn conv(&self, name: &str, x: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let w = self.p(&format!("{name}.w"))?;
        self.tape.conv2d(x, w, None, stride, pad)
    }

    fn conv_t(&self, name: &str, x: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let w = self.p(&format!("{name}.w"))?;
        self.tape.conv2d_transpose(x, w, None, stride, pad)
    }

    fn linear(&self, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.tape.linear(x, w, Some(b))
    }

    fn down_block(&mut self, name: &str, x: Var<'t, T>, downsample: bool) -> Result<Var<'t, T>> {
        let stride = if downsample { 2 } else { 1 };
        let h = self.conv(&format!("{name}.conv1"), x, stride, 1)?;
        let h = self.bn(&format!("{name}.bn1"), h)?;
        let h = self.tape.relu(h);
        let h = self.conv(&format!("{name}.conv2"), h, 1, 1)?;
        let h = self.bn(&format!("{name}.bn2"), h)?;
        let skip = if downsample {
            let s = self.conv(&format!("{name}.skip"), x, 2, 0)?;
            self.bn(&format!("{name}.skip_bn"), s)?
        } else {
            x
        };
        Ok(self.tape.relu(self.tape.add(h, skip)?))
    }

    fn up_block(&mut self, name: &str, x: Var<'t, T>, upsample: bool) -> Result<Var<'t, T>> {
        let h = if upsample {
            self.conv_t(&format!("{name}.conv1"), x, 2, 1)?
        } else {
            self.conv(&format!("{name}.conv1"), x, 1, 1)?
        };
        let h = self.bn(&format!("{name}.bn1"), h)?;
        let h = self.tape.relu(h);
        let h = self.conv(&format!("{name}.conv2"), h, 1, 1)?;
        let h = self.bn(&format!("{name}.bn2"), h)?;
        let skip = if upsample {
            let s = self.conv_t(&format!("{name}.skip"), x, 2, 0)?;
            self.bn(&format!("{name}.skip_bn"), s)?
        } else {
            x
        };
        Ok(self.tape.relu(self.tape.add(h, skip)?))
    }

    /// `x [n, c, f, t]` to clamped `(mu, logvar)`, each `[n, latent]`.
    fn encoder(&mut self, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let cfg = self.config;
        let h = self.conv("enc.stem", x, 1, 1)?;
        let h = self.bn("enc.stem_bn", h)?;
        let mut h = self.tape.relu(h);
        for s in 0..cfg.stages {
            for b in 0..cfg.blocks_per_stage {
                h = self.down_block(&format!("enc.s{s}.b{b}"), h, b == 0)?;
            }
        }
        let (bc, bh, bw) = cfg.bottleneck();
        let n = x.shape()[0];
        let flat = self.tape.reshape(h, &[n, bc * bh * bw])?;
        let mu = self.linear("enc.mu", flat)?;
        let logvar = self.linear("enc.logvar", flat)?;
        let limit = T::lit(LOGVAR_LIMIT);
        Ok((mu, self.tape.clamp(logvar, -limit, limit)))
    }

    /// `z [n, latent]` to a reconstruction in `(0, 1)`.
    fn decoder(&mut self, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let cfg = self.config;
        let (bc, bh, bw) = cfg.bottleneck();
        let n = z.shape()[0];
        let h = self.linear("dec.fc", z)?;
        let h = self.tape.relu(h);
        let mut h = self.tape.reshape(h, &[n, bc, bh, bw])?;
        for s in (0..cfg.stages).rev() {
            for b in 0..cfg.blocks_per_stage {
                h = self.up_block(&format!("dec.s{s}.b{b}"), h, b == 0)?;
            }
        }
        let w = self.p("dec.head.w")?;
        let b = self.p("dec.head.b")?;
        let out = self.tape.conv2d(h, w, Some(b), 1, 1)?;
        Ok(self.tape.sigmoid(out))
    }
}

/// Scalar loss nodes of one recorded forward pass.
pub struct LossGraph<'t, T> {
    pub mu: Var<'t, T>,
    pub logvar: Var<'t, T>,
    pub x_hat: Var<'t, T>,
    pub kl: Var<'t, T>,
    pub recon: Var<'t, T>,
    pub total: Var<'t, T>,
}

/// Records the full objective for a batch `x [n, c, f, t]` with fixed
/// standard-normal `noise [n, latent]`. In training mode batch norm uses
/// batch statistics, which are returned for the running averages.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn loss_graph<'t, T: Real>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    config: &VaeConfig,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    lambda: f64,
    train: bool,
) -> Result<(LossGraph<'t, T>, Vec<(String, BatchStats<T>)>)> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Invalid("loss over an empty batch".into()));
    }
    if noise.shape() != [n, config.latent_dim] {
        return Err(Error::shape("loss_graph", noise.shape(), &[n, config.latent_dim]));
    }
    let mut net = Net {
        tape,
        store,
        config,
        train,
        stats: Vec::new(),
    };
    let xv = tape.constant(x.clone());
    let (mu, logvar) = net.encoder(xv)?;
    let inv_n = T::lit(1.0 / n as f64);

    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let terms = tape.add_scalar(tape.sub(tape.add(mu2, var)?, logvar)?, -T::one());
    let kl = tape.mul_scalar(tape.sum(terms), T::lit(0.5) * inv_n);

    let sigma = tape.exp(tape.mul_scalar(logvar, T::lit(0.5)));
    let eps = tape.constant(noise.clone());
    let z = tape.add(mu, tape.mul(sigma, eps)?)?;
    let x_hat = net.decoder(z)?;
    let diff = tape.sub(x_hat, xv)?;
    let recon = tape.mul_scalar(tape.sum(tape.mul(diff, diff)?), inv_n);
    let total = tape.add(tape.mul_scalar(kl, T::lit(lambda)), recon)?;
    Ok((
        LossGraph {
            mu,
            logvar,
            x_hat,
            kl,
            recon,
            total,
        },
        net.stats,
    ))
}

fn batch_tensor<T: Real>(config: &VaeConfig, batch: &[&Spectrogram]) -> Result<Tensor<T>> {
    let want = [config.in_channels, config.freq_bins, config.time_frames];
    let mut data = Vec::with_capacity(batch.len() * config.input_len());
    for s in batch {
        if s.dims() != want || s.values.len() != config.input_len() {
            return Err(Error::shape("vae input", &s.dims(), &want));
        }
        data.extend(s.values.iter().map(|v| T::lit(*v as f64)));
    }
    Tensor::new(&[batch.len(), want[0], want[1], want[2]], data)
}

fn noise_tensor<T: Real, R: Rng>(n: usize, latent: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[n, latent], 1.0, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    config: VaeConfig,
    params: ParamStore<f32>,
    encoder_only: bool,
}

impl VaeModel {
    /// Freshly initialized model.
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(VaeModel {
            config,
            params,
            encoder_only: false,
        })
    }

    /// Rebuilds a model from stored parameters, checking every name and
    /// shape against the layout `config` implies.
    pub fn from_parts(config: VaeConfig, params: ParamStore<f32>, encoder_only: bool) -> Result<Self> {
        config.validate()?;
        let layout = init_params(&config, 0);
        let expected: Vec<_> = layout
            .iter()
            .filter(|(_, p)| !encoder_only || p.name.starts_with("enc."))
            .collect();
        if expected.len() != params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((_, want), (_, got)) in expected.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() || want.trainable != got.trainable {
                return Err(Error::Invalid(format!(
                    "parameter {} {:?} does not match layout entry {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(VaeModel {
            config,
            params,
            encoder_only,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn is_encoder_only(&self) -> bool {
        self.encoder_only
    }

    /// Trainable scalars, optionally restricted to a name prefix.
    pub fn parameter_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable && p.name.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// A copy holding only the encoder's parameters and buffers.
    pub fn extract_encoder(&self) -> VaeModel {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter().filter(|(_, p)| p.name.starts_with("enc.")) {
            params.add(p.name.clone(), p.value.clone(), p.trainable);
        }
        VaeModel {
            config: self.config.clone(),
            params,
            encoder_only: true,
        }
    }

    /// Inference-mode encoding of one spectrogram.
    pub fn encode(&self, x: &Spectrogram) -> Result<EncoderOutput> {
        Ok(self.encode_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn encode_batch(&self, xs: &[Spectrogram]) -> Result<Vec<EncoderOutput>> {
        let n = self.config.latent_dim;
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(ENCODE_CHUNK) {
            let refs: Vec<&Spectrogram> = chunk.iter().collect();
            let x = batch_tensor::<f32>(&self.config, &refs)?;
            let tape = Tape::new();
            let mut net = Net {
                tape: &tape,
                store: &self.params,
                config: &self.config,
                train: false,
                stats: Vec::new(),
            };
            let (mu, logvar) = net.encoder(tape.constant(x))?;
            let (mu, logvar) = (mu.value(), logvar.value());
            for i in 0..chunk.len() {
                out.push(EncoderOutput {
                    mu: mu.data()[i * n..(i + 1) * n].to_vec(),
                    logvar: logvar.data()[i * n..(i + 1) * n].to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// The latent sent downstream: the posterior mean.
    pub fn compress(&self, x: &Spectrogram) -> Result<Vec<f32>> {
        Ok(self.encode(x)?.mu)
    }

    pub fn compress_batch(&self, xs: &[Spectrogram]) -> Result<Vec<Vec<f32>>> {
        Ok(self.encode_batch(xs)?.into_iter().map(|o| o.mu).collect())
    }

    /// Decodes one latent vector.
    pub fn decode(&self, z: &[f32]) -> Result<Spectrogram> {
        if self.encoder_only {
            return Err(Error::Kind {
                expected: "vae-full".into(),
                found: "vae-encoder".into(),
            });
        }
        if z.len() != self.config.latent_dim {
            return Err(Error::shape("decode", &[z.len()], &[self.config.latent_dim]));
        }
        let tape = Tape::new();
        let mut net = Net {
            tape: &tape,
            store: &self.params,
            config: &self.config,
            train: false,
            stats: Vec::new(),
        };
        let zv = tape.constant(Tensor::new(&[1, z.len()], z.to_vec())?);
        let x_hat = net.decoder(zv)?;
        let values = x_hat.value().data().to_vec();
        Ok(Spectrogram {
            channels: self.config.in_channels,
            freq_bins: self.config.freq_bins,
            time_frames: self.config.time_frames,
            values,
            label: None,
        })
    }

    /// Decodes the posterior mean of `x`.
    pub fn reconstruct(&self, x: &Spectrogram) -> Result<Spectrogram> {
        let mut out = self.decode(&self.compress(x)?)?;
        out.label = x.label;
        Ok(out)
    }

    /// Inference-mode batch-mean loss with one noise sample per datum.
    pub fn total_loss<R: Rng>(&self, batch: &[Spectrogram], lambda: f64, rng: &mut R) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Invalid("loss over an empty batch".into()));
        }
        let refs: Vec<&Spectrogram> = batch.iter().collect();
        let noise = noise_tensor(batch.len(), self.config.latent_dim, rng);
        self.loss_with_noise(&refs, &noise, lambda)
    }

    fn loss_with_noise(&self, batch: &[&Spectrogram], noise: &Tensor<f32>, lambda: f64) -> Result<LossBreakdown> {
        if self.encoder_only {
            return Err(Error::Kind {
                expected: "vae-full".into(),
                found: "vae-encoder".into(),
            });
        }
        let x = batch_tensor::<f32>(&self.config, batch)?;
        let tape = Tape::new();
        let (g, _) = loss_graph(&tape, &self.params, &self.config, &x, noise, lambda, false)?;
        Ok(LossBreakdown::new(g.kl.item() as f64, g.recon.item() as f64, lambda))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 128,
            lambda: 0.1,
            patience: 10,
            max_epochs: 100,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("patience, max_epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Invalid(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's training batches, batch statistics in effect.
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot from the epoch with the lowest validation total.
    pub model: VaeModel,
    /// Validation loss of the untrained model.
    pub initial_val: LossBreakdown,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}


/// Splits `0..n` into shuffled (train, validation) index lists.
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if val_fraction > 0.0 && n > 1 {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn fold_running_stats(store: &mut ParamStore<f32>, stats: &[(String, BatchStats<f32>)]) -> Result<()> {
    for (name, st) in stats {
        let find = |suffix: &str| {
            store
                .find(&format!("{name}.{suffix}"))
                .ok_or_else(|| Error::Invalid(format!("model has no buffer {name}.{suffix}")))
        };
        let (mid, vid) = (find("mean")?, find("var")?);
        let mut mean = store.get(mid).data().to_vec();
        let mut var = store.get(vid).data().to_vec();
        st.update_running(&mut mean, &mut var, BN_MOMENTUM as f32);
        store.get_mut(mid).data_mut().copy_from_slice(&mean);
        store.get_mut(vid).data_mut().copy_from_slice(&var);
    }
    Ok(())
}

/// Trains a fresh model with Adam and early stopping on the validation
/// total loss.
///
/// Each epoch visits the training split in a new shuffled order in batches
/// of `batch_size`; a trailing partial batch is dropped. Validation runs in
/// inference mode with one fixed noise draw per validation item, so epochs
/// are compared on the same sample of `z`. With `val_fraction = 0` the
/// training split doubles as the validation set.
pub fn train(data: &[Spectrogram], cfg: &TrainConfig, vcfg: &VaeConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    vcfg.validate()?;
    let want = [vcfg.in_channels, vcfg.freq_bins, vcfg.time_frames];
    if let Some(bad) = data.iter().find(|s| s.dims() != want) {
        return Err(Error::shape("train", &bad.dims(), &want));
    }
    let (train_idx, val_idx) = train_val_split(data.len(), cfg.val_fraction, cfg.seed);
    if train_idx.len() < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "{} training spectrograms do not fill one batch of {}",
            train_idx.len(),
            cfg.batch_size
        )));
    }
    let val_set = if val_idx.is_empty() { &train_idx } else { &val_idx };
    let latent = vcfg.latent_dim;
    let mut model = VaeModel::new(vcfg.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let val_noise: Tensor<f32> = noise_tensor(val_set.len(), latent, &mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)));

    let validate = |model: &VaeModel| -> Result<LossBreakdown> {
        let (mut kl, mut recon) = (0.0, 0.0);
        for start in (0..val_set.len()).step_by(ENCODE_CHUNK) {
            let end = (start + ENCODE_CHUNK).min(val_set.len());
            let refs: Vec<&Spectrogram> = val_set[start..end].iter().map(|i| &data[*i]).collect();
            let noise = Tensor::new(&[end - start, latent], val_noise.data()[start * latent..end * latent].to_vec())?;
            let l = model.loss_with_noise(&refs, &noise, cfg.lambda)?;
            kl += l.kl * (end - start) as f64;
            recon += l.recon * (end - start) as f64;
        }
        let n = val_set.len() as f64;
        Ok(LossBreakdown::new(kl / n, recon / n, cfg.lambda))
    };

    let initial_val = validate(&model)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut stopped_early = false;
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut kl_sum, mut recon_sum, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let refs: Vec<&Spectrogram> = chunk.iter().map(|i| &data[*i]).collect();
            let x = batch_tensor::<f32>(vcfg, &refs)?;
            let noise = noise_tensor(chunk.len(), latent, &mut rng);
            let tape = Tape::new();
            let (g, stats) = loss_graph(&tape, &model.params, vcfg, &x, &noise, cfg.lambda, true)?;
            let (kl, recon) = (g.kl.item() as f64, g.recon.item() as f64);
            if !(kl + recon).is_finite() {
                return Err(Error::Invalid(format!("training diverged at epoch {epoch}")));
            }
            let grads = tape.backward(g.total)?;
            adam.step_store(&mut model.params, &grads)?;
            fold_running_stats(&mut model.params, &stats)?;
            kl_sum += kl * chunk.len() as f64;
            recon_sum += recon * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = LossBreakdown::new(kl_sum / seen as f64, recon_sum / seen as f64, cfg.lambda);
        let val = validate(&model)?;
        if !val.total.is_finite() {
            return Err(Error::Invalid(format!("validation loss is not finite at epoch {epoch}")));
        }
        log::info!(
            "epoch {epoch}: train {:.4} (kl {:.4}, recon {:.4}), val {:.4}",
            train_loss.total,
            train_loss.kl,
            train_loss.recon,
            val.total
        );
        history.push(EpochRecord {
            epoch,
            train: train_loss,
            val,
        });
        match &best {
            Some((_, best_total, _)) if val.total >= *best_total => {}
            _ => best = Some((epoch, val.total, model.params.clone())),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let (best_epoch, _, params) = best.expect("at least one epoch runs");
    model.params = params;
    Ok(TrainOutcome {
        model,
        initial_val,
        history,
        best_epoch,
        stopped_early,
    })
}

/// Central finite-difference check of every parameter gradient of the full
/// objective, in double precision with batch statistics in effect and a
/// fixed noise draw. Inputs are uniform in `[0, 1)`.
pub fn check_loss_gradient(config: &VaeConfig, batch: usize, lambda: f64, seed: u64) -> Result<GradCheckReport> {
    let model = VaeModel::new(config.clone(), seed)?;
    let store: ParamStore<f64> = model.params.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = [batch, config.in_channels, config.freq_bins, config.time_frames];
    let x = Tensor::from_fn(&shape, |_| rng.gen::<f64>());
    let noise = noise_tensor::<f64, _>(batch, config.latent_dim, &mut rng);

    let loss_at = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let (g, _) = loss_graph(&tape, store, config, &x, &noise, lambda, true)?;
        Ok(g.total.item())
    };
    let analytic = {
        let tape = Tape::new();
        let (g, _) = loss_graph(&tape, &store, config, &x, &noise, lambda, true)?;
        tape.backward(g.total)?
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = store.clone();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let grad = analytic
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for j in 0..grad.len() {
            let v = store.get(id).data()[j];
            let h = 1e-4 * (1.0 + v.abs());
            probe.get_mut(id).data_mut()[j] = v + h;
            let up = loss_at(&probe)?;
            probe.get_mut(id).data_mut()[j] = v - h;
            let down = loss_at(&probe)?;
            probe.get_mut(id).data_mut()[j] = v;
            let e = rel_err(grad.data()[j], (up - down) / (2.0 * h));
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (id.0, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand_distr::StandardNormal;

    fn tiny() -> VaeConfig {
        VaeConfig {
            latent_dim: 4,
            in_channels: 2,
            freq_bins: 8,
            time_frames: 4,
            base_channels: 2,
            blocks_per_stage: 1,
            stages: 2,
        }
    }

    fn random_spec(cfg: &VaeConfig, rng: &mut ChaCha8Rng) -> Spectrogram {
        let mut s = Spectrogram::zeros(cfg.in_channels, cfg.freq_bins, cfg.time_frames);
        s.values.iter_mut().for_each(|v| *v = rng.gen());
        s
    }

    fn out(mu: &[f32], logvar: &[f32]) -> EncoderOutput {
        EncoderOutput {
            mu: mu.to_vec(),
            logvar: logvar.to_vec(),
        }
    }

    #[test]
    fn kl_unit_values() {
        assert_eq!(kl_divergence(&out(&[0.0; 5], &[0.0; 5])), 0.0);
        assert!((kl_divergence(&out(&[1.0], &[0.0])) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_identities() {
        let o = out(&[0.5, -1.0, 2.0], &[0.3, 0.0, -2.0]);
        assert_eq!(reparameterize(&o, &[0.0; 3]).unwrap(), o.mu);
        let unit = out(&[0.5, -1.0, 2.0], &[0.0; 3]);
        assert_eq!(reparameterize(&unit, &[0.0, 1.0, 0.0]).unwrap(), vec![0.5, 0.0, 2.0]);
        assert!(reparameterize(&o, &[0.0; 2]).is_err());
    }

    #[test]
    fn reparameterized_sample_is_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::randn(&[6], 1.0, &mut rng)).collect();
        let eps = Tensor::randn(&[6], 1.0, &mut rng);
        let r = gradcheck::check(&inputs, |t, v| {
            let sigma = t.exp(t.mul_scalar(v[1], 0.5));
            let z = t.add(v[0], t.mul(sigma, t.constant(eps.clone()))?)?;
            Ok(t.sum(t.mul(z, z)?))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn recon_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny();
        let x = random_spec(&cfg, &mut rng);
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        let zeros = Spectrogram::zeros(1, 10, 1);
        let mut ones = zeros.clone();
        ones.values.fill(1.0);
        assert_eq!(recon_loss(&zeros, &ones).unwrap(), 10.0);
        let y = random_spec(&cfg, &mut rng);
        let mut naive = 0.0f64;
        for i in 0..x.values.len() {
            let d = x.values[i] as f64 - y.values[i] as f64;
            naive += d * d;
        }
        assert!((recon_loss(&x, &y).unwrap() - naive).abs() <= 1e-6 * naive);
        assert!(recon_loss(&x, &Spectrogram::zeros(1, 2, 2)).is_err());
    }

    #[test]
    fn compression_ratios() {
        let cfg = VaeConfig::default();
        assert_eq!(compression_ratio(&cfg).unwrap().as_integer(), Some(1664));
        let one = VaeConfig {
            in_channels: 1,
            freq_bins: 8,
            time_frames: 8,
            stages: 3,
            ..VaeConfig::default()
        };
        assert_eq!(compression_ratio(&one).unwrap().as_integer(), Some(1));
        let r = CompressionRatio::new(100, 64).unwrap();
        assert_eq!((r.numerator, r.denominator), (25, 16));
        assert_eq!(r.to_string(), "16:25");
    }

    #[test]
    fn config_validation() {
        assert!(VaeConfig::default().validate().is_ok());
        let odd = VaeConfig {
            time_frames: 20,
            ..VaeConfig::default()
        };
        assert!(odd.validate().is_err());
        let zero = VaeConfig {
            latent_dim: 0,
            ..VaeConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn encode_contract() {
        let cfg = VaeConfig {
            in_channels: 3,
            freq_bins: 16,
            time_frames: 16,
            base_channels: 4,
            stages: 2,
            ..VaeConfig::default()
        };
        let model = VaeModel::new(cfg.clone(), 1).unwrap();
        let x = Spectrogram::zeros(3, 16, 16);
        let a = model.encode(&x).unwrap();
        assert_eq!(a.mu.len(), 64);
        assert_eq!(a.logvar.len(), 64);
        assert!(a.mu.iter().chain(&a.logvar).all(|v| v.is_finite()));
        assert!(a.logvar.iter().all(|v| v.abs() <= LOGVAR_LIMIT as f32));
        assert_eq!(model.encode(&x).unwrap(), a);
        assert_eq!(model.compress(&x).unwrap(), a.mu);
        assert!(model.encode(&Spectrogram::zeros(3, 16, 8)).is_err());
    }

    #[test]
    fn batch_encoding_matches_single() {
        let cfg = tiny();
        let model = VaeModel::new(cfg.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<_> = (0..5).map(|_| random_spec(&cfg, &mut rng)).collect();
        let batch = model.encode_batch(&xs).unwrap();
        for (x, b) in xs.iter().zip(&batch) {
            assert_eq!(&model.encode(x).unwrap(), b);
        }
    }

    #[test]
    fn decoder_mirrors_encoder_input() {
        for stages in 1..=3 {
            for blocks in 1..=2 {
                let cfg = VaeConfig {
                    latent_dim: 3,
                    in_channels: 2,
                    freq_bins: 8 << (stages - 1),
                    time_frames: 1 << stages,
                    base_channels: 2,
                    blocks_per_stage: blocks,
                    stages,
                };
                let model = VaeModel::new(cfg.clone(), 0).unwrap();
                let y = model.decode(&[0.1, -0.2, 0.3]).unwrap();
                assert_eq!(y.dims(), [cfg.in_channels, cfg.freq_bins, cfg.time_frames]);
                assert!(y.values.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn total_loss_contract() {
        let cfg = tiny();
        let model = VaeModel::new(cfg.clone(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<_> = (0..3).map(|_| random_spec(&cfg, &mut rng)).collect();
        let l = model.total_loss(&xs, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(l.total, l.recon);
        let l = model.total_loss(&xs, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(l.total, 0.1 * l.kl + l.recon);
        assert!(l.kl >= 0.0);
        assert!(model.total_loss(&[], 0.1, &mut rng).is_err());

        // A single-sample batch equals the per-sample value.
        let one = model.total_loss(&xs[..1], 0.1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(7);
        let eps: Vec<f32> = (0..cfg.latent_dim).map(|_| noise_rng.sample::<f64, _>(StandardNormal) as f32).collect();
        let enc = model.encode(&xs[0]).unwrap();
        let z = reparameterize(&enc, &eps).unwrap();
        let recon = recon_loss(&xs[0], &model.decode(&z).unwrap()).unwrap();
        assert!((one.kl - kl_divergence(&enc)).abs() < 1e-4 * (1.0 + one.kl));
        assert!((one.recon - recon).abs() < 1e-4 * (1.0 + recon));
    }

    #[test]
    fn encoder_extraction() {
        let cfg = tiny();
        let model = VaeModel::new(cfg.clone(), 8).unwrap();
        let enc = model.extract_encoder();
        assert!(enc.is_encoder_only());
        assert!(enc.params().iter().all(|(_, p)| p.name.starts_with("enc.")));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = random_spec(&cfg, &mut rng);
            assert_eq!(enc.encode(&x).unwrap(), model.encode(&x).unwrap());
        }
        assert!(enc.decode(&[0.0; 4]).is_err());
        let rebuilt = VaeModel::from_parts(cfg.clone(), enc.params().clone(), true).unwrap();
        assert_eq!(rebuilt, enc);
        assert!(VaeModel::from_parts(cfg, enc.params().clone(), false).is_err());
    }

    #[test]
    fn encoder_is_about_half_of_the_model() {
        let model = VaeModel::new(VaeConfig::default(), 0).unwrap();
        let share = model.parameter_count("enc.") as f64 / model.parameter_count("") as f64;
        assert!((0.35..=0.65).contains(&share), "{share}");
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let r = check_loss_gradient(&tiny(), 3, 0.1, 11).unwrap();
        assert!(r.checked > 100);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    fn toy_data(cfg: &VaeConfig, n: usize, seed: u64) -> Vec<Spectrogram> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut s = Spectrogram::zeros(cfg.in_channels, cfg.freq_bins, cfg.time_frames);
                let level = if i % 2 == 0 { 0.2 } else { 0.7 };
                s.values.iter_mut().for_each(|v| *v = level + 0.1 * rng.gen::<f32>());
                s
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_keeps_the_best_snapshot() {
        let cfg = tiny();
        let data = toy_data(&cfg, 40, 1);
        let tc = TrainConfig {
            lr: 1e-2,
            batch_size: 8,
            max_epochs: 8,
            patience: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(&data, &tc, &cfg).unwrap();
        let b = train(&data, &tc, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        let last = a.history.last().unwrap();
        assert!(a.best().val.total <= last.val.total);
        assert!(a.history.iter().all(|h| a.best().val.total <= h.val.total));
        assert!(last.epoch - a.best_epoch <= tc.patience);
        let (_, val_idx) = train_val_split(data.len(), tc.val_fraction, tc.seed);
        let val: Vec<_> = val_idx.iter().map(|i| data[*i].clone()).collect();
        assert!(a.model.encode_batch(&val).is_ok());
    }

    #[test]
    fn training_needs_one_full_batch() {
        let cfg = tiny();
        let data = toy_data(&cfg, 10, 1);
        let tc = TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        };
        assert!(train(&data, &tc, &cfg).is_err());
    }

    #[test]
    fn single_item_autoencoding_drives_reconstruction_down() {
        let cfg = tiny();
        let data = toy_data(&cfg, 1, 3);
        let tc = TrainConfig {
            lr: 1e-2,
            batch_size: 1,
            lambda: 0.0,
            patience: 500,
            max_epochs: 500,
            val_fraction: 0.0,
            seed: 1,
        };
        let out = train(&data, &tc, &cfg).unwrap();
        let first = out.history[0].train.recon;
        let last = out.history.last().unwrap().train.recon;
        assert!(last < 0.01 * first, "{first} -> {last}");
    }
}
