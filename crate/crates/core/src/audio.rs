//! Audio ingestion and the log-Mel front end.
//!
//! Everything here is a pure function of its inputs. The pipeline works on
//! whole utterances: a clip is decoded from a PCM16 mono WAV, resampled to
//! the front-end rate, framed with centre (reflect) padding, windowed with a
//! periodic Hann window, and reduced to log energies in mel-spaced bands.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use realfft::{RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AudioError {
    #[error("malformed WAV container: {0}")]
    MalformedContainer(String),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("invalid DSP configuration: {0}")]
    ConfigInvalid(String),
    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    RateMismatch { expected: u32, actual: u32 },
}

impl AudioError {
    /// Stable machine-readable name used in API error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            AudioError::MalformedContainer(_) => "MalformedContainer",
            AudioError::UnsupportedFormat(_) => "UnsupportedFormat",
            AudioError::EmptyAudio => "EmptyAudio",
            AudioError::InvalidAudio(_) => "InvalidAudio",
            AudioError::ConfigInvalid(_) => "ConfigInvalid",
            AudioError::RateMismatch { .. } => "RateMismatch",
        }
    }
}

/// Mono PCM audio with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidAudio("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidAudio(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    /// All-zero clip of `len` samples.
    pub fn silence(len: usize, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(vec![0.0; len], sample_rate)
    }

    /// A sine tone; handy for fixtures and tests.
    pub fn tone(freq_hz: f64, amplitude: f64, duration_s: f64, sample_rate: u32) -> Result<Self, AudioError> {
        let n = (duration_s * sample_rate as f64).round() as usize;
        let sr = sample_rate as f64;
        let samples = (0..n)
            .map(|i| (amplitude * (2.0 * PI * freq_hz * i as f64 / sr).sin()) as f32)
            .collect();
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Multiplies every sample by `gain` (no clipping).
    pub fn scaled(&self, gain: f32) -> Result<Self, AudioError> {
        Self::new(self.samples.iter().map(|s| s * gain).collect(), self.sample_rate)
    }

    /// The clip as it decodes after a PCM16 WAV round trip.
    pub fn pcm16(&self) -> Self {
        let samples = self.samples.iter().map(|&s| quantize(s) as f32 / 32768.0).collect();
        Self { samples, sample_rate: self.sample_rate }
    }

    /// SHA-256 over the rate and the PCM16 quantised samples, hex encoded.
    ///
    /// Two clips that encode to the same WAV bytes share a hash.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.sample_rate.to_le_bytes());
        for &s in &self.samples {
            hasher.update(quantize(s).to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn quantize(sample: f32) -> i16 {
    (sample as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

const WAV_HEADER_LEN: usize = 44;

/// Decodes a RIFF/WAVE PCM16 little-endian mono file.
pub fn load_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 {
        return Err(AudioError::MalformedContainer(format!(
            "{} bytes is too short for a RIFF header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedContainer("missing RIFF/WAVE magic".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                AudioError::MalformedContainer(format!(
                    "chunk {:?} overruns the file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(AudioError::MalformedContainer("fmt chunk shorter than 16 bytes".into()));
                }
                let tag = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_end + (size & 1);
    }

    let (tag, channels, rate, bits) =
        fmt.ok_or_else(|| AudioError::MalformedContainer("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::MalformedContainer("no data chunk".into()))?;
    if tag != 1 {
        return Err(AudioError::UnsupportedFormat(format!("format tag {tag}, only PCM (1) is accepted")));
    }
    if channels != 1 {
        return Err(AudioError::UnsupportedFormat(format!("{channels} channels, only mono is accepted")));
    }
    if bits != 16 {
        return Err(AudioError::UnsupportedFormat(format!("{bits}-bit samples, only 16-bit is accepted")));
    }
    if rate == 0 {
        return Err(AudioError::MalformedContainer("sample rate of 0".into()));
    }
    if data.len() % 2 != 0 {
        return Err(AudioError::MalformedContainer("data chunk has an odd byte count".into()));
    }
    if data.is_empty() {
        return Err(AudioError::EmptyAudio);
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect();
    AudioClip::new(samples, rate)
}

/// Encodes a clip as a canonical 44-byte-header PCM16 mono WAV.
pub fn write_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.len() * 2;
    let mut out = Vec::with_capacity(WAV_HEADER_LEN + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

const RESAMPLE_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;

/// Band-limited resampling with a 64-tap Kaiser-windowed sinc kernel.
///
/// Output length is `round(len * target / source)`. Same-rate input is
/// returned unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if clip.is_empty() {
        return Err(AudioError::EmptyAudio);
    }
    if target_rate == 0 {
        return Err(AudioError::InvalidAudio("target rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = clip.sample_rate as f64;
    let dst = target_rate as f64;
    let out_len = (clip.len() as f64 * dst / src).round() as usize;
    let step = src / dst;
    // Cutoff relative to the input Nyquist; lowered when decimating.
    let cutoff = (dst / src).min(1.0);
    let half = (RESAMPLE_TAPS / 2) as isize;
    let i0_beta = bessel_i0(KAISER_BETA);
    let x = clip.samples();
    let n = x.len() as isize;

    let samples = (0..out_len)
        .map(|j| {
            let t = j as f64 * step;
            let base = t.floor() as isize;
            let mut acc = 0.0;
            for k in (base - half + 1)..=(base + half) {
                if k < 0 || k >= n {
                    continue;
                }
                let dt = t - k as f64;
                let ratio = dt / half as f64;
                if ratio.abs() > 1.0 {
                    continue;
                }
                let window = bessel_i0(KAISER_BETA * (1.0 - ratio * ratio).sqrt()) / i0_beta;
                acc += x[k as usize] as f64 * cutoff * sinc(cutoff * dt) * window;
            }
            acc as f32
        })
        .collect();
    AudioClip::new(samples, target_rate)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Front-end parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub target_rate: u32,
    pub win_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            target_rate: 16_000,
            win_size: 1024,
            hop_size: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<(), AudioError> {
        let bad = |msg: String| Err(AudioError::ConfigInvalid(msg));
        if self.target_rate == 0 {
            return bad("target_rate must be positive".into());
        }
        if self.win_size == 0 || self.hop_size == 0 {
            return bad("win_size and hop_size must be positive".into());
        }
        if self.hop_size > self.win_size {
            return bad(format!("hop_size {} exceeds win_size {}", self.hop_size, self.win_size));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.target_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= fmin < fmax <= target_rate/2, got fmin={} fmax={} rate={}",
                self.fmin, self.fmax, self.target_rate
            ));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad(format!("log_floor must be positive, got {}", self.log_floor));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form. Stored in trained models.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("DspConfig serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Frames produced for `len` samples under centre padding.
    pub fn frame_count(&self, len: usize) -> usize {
        1 + len / self.hop_size
    }

    pub fn frame_rate(&self) -> f64 {
        self.target_rate as f64 / self.hop_size as f64
    }
}

/// Log-Mel energies, `n_mels` rows by `n_frames` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Array2<f64>,
    frame_rate: f64,
    source_duration_s: f64,
}

impl MelSpectrogram {
    /// Wraps an existing matrix. Used for synthetic fixtures.
    pub fn from_values(values: Array2<f64>, frame_rate: f64, source_duration_s: f64) -> Result<Self, AudioError> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(AudioError::InvalidAudio("spectrogram must have at least one bin and frame".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AudioError::InvalidAudio("spectrogram contains non-finite values".into()));
        }
        Ok(Self { values, frame_rate, source_duration_s })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn source_duration_s(&self) -> f64 {
        self.source_duration_s
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangle edge frequencies: `n_mels + 2` points equally spaced in mel.
fn mel_edges(cfg: &DspConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let n = cfg.n_mels + 1;
    (0..=n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64)).collect()
}

/// Centre frequency (Hz) of each mel filter, ascending.
pub fn mel_center_frequencies(cfg: &DspConfig) -> Vec<f64> {
    let edges = mel_edges(cfg);
    edges[1..edges.len() - 1].to_vec()
}

/// Triangular filterbank with peak weight 1, shape `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &DspConfig, n_fft: usize) -> Result<Array2<f64>, AudioError> {
    cfg.validate()?;
    if n_fft != cfg.win_size {
        return Err(AudioError::ConfigInvalid(format!(
            "n_fft {n_fft} must equal win_size {}",
            cfg.win_size
        )));
    }
    let n_bins = n_fft / 2 + 1;
    let edges = mel_edges(cfg);
    let bin_hz = cfg.target_rate as f64 / n_fft as f64;
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            fb[[m, k]] = rising.min(falling).max(0.0);
        }
        if fb.row(m).iter().all(|&w| w <= 0.0) {
            return Err(AudioError::ConfigInvalid(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; lower n_mels or raise win_size"
            )));
        }
    }
    Ok(fb)
}

/// Reusable log-Mel extractor holding the FFT plan, window and filterbank.
#[derive(Clone)]
pub struct MelFrontEnd {
    cfg: DspConfig,
    fft: Arc<dyn RealToComplex<f64>>,
    window: Vec<f64>,
    /// Each band's first non-zero bin and the weights from there on.
    bands: Vec<(usize, Vec<f64>)>,
}

impl std::fmt::Debug for MelFrontEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontEnd").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl MelFrontEnd {
    pub fn new(cfg: &DspConfig) -> Result<Self, AudioError> {
        let filterbank = mel_filterbank(cfg, cfg.win_size)?;
        let fft = RealFftPlanner::new().plan_fft_forward(cfg.win_size);
        // Periodic Hann.
        let n = cfg.win_size as f64;
        let window = (0..cfg.win_size)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect();
        let bands = filterbank
            .rows()
            .into_iter()
            .map(|row| {
                let first = row.iter().position(|&w| w != 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w != 0.0).map_or(first, |i| i + 1);
                (first, row.iter().skip(first).take(last - first).copied().collect())
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), fft, window, bands })
    }

    pub fn config(&self) -> &DspConfig {
        &self.cfg
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram, AudioError> {
        if clip.sample_rate() != self.cfg.target_rate {
            return Err(AudioError::RateMismatch {
                expected: self.cfg.target_rate,
                actual: clip.sample_rate(),
            });
        }
        if clip.is_empty() {
            return Err(AudioError::EmptyAudio);
        }
        let x = clip.samples();
        let len = x.len();
        let win = self.cfg.win_size;
        let pad = (win / 2) as isize;
        let n_frames = self.cfg.frame_count(len);
        let n_bins = win / 2 + 1;
        let log_min = self.cfg.log_floor.ln();

        let mut flat = vec![log_min; self.cfg.n_mels * n_frames];
        let mut buf = self.fft.make_input_vec();
        let mut spectrum = self.fft.make_output_vec();
        let mut scratch = self.fft.make_scratch_vec();
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            let start = (t * self.cfg.hop_size) as isize - pad;
            if start >= 0 && start as usize + win <= len {
                let frame = &x[start as usize..start as usize + win];
                for ((slot, &s), w) in buf.iter_mut().zip(frame).zip(&self.window) {
                    *slot = s as f64 * w;
                }
            } else {
                for (i, slot) in buf.iter_mut().enumerate() {
                    let idx = reflect_index(start + i as isize, len);
                    *slot = x[idx] as f64 * self.window[i];
                }
            }
            self.fft
                .process_with_scratch(&mut buf, &mut spectrum, &mut scratch)
                .expect("buffers sized by the plan");
            for (p, c) in power.iter_mut().zip(&spectrum) {
                *p = c.norm_sqr();
            }
            for (m, (first, weights)) in self.bands.iter().enumerate() {
                let energy: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
                flat[m * n_frames + t] = energy.max(self.cfg.log_floor).ln();
            }
        }
        let values = Array2::from_shape_vec((self.cfg.n_mels, n_frames), flat).expect("shape matches buffer");
        Ok(MelSpectrogram {
            values,
            frame_rate: self.cfg.frame_rate(),
            source_duration_s: clip.duration_s(),
        })
    }
}

/// Mirror an out-of-range index back into `0..len` without repeating the
/// edge sample (numpy "reflect"), folding as many times as needed.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// One-shot log-Mel spectrogram. The clip must already be at `cfg.target_rate`.
pub fn log_mel(clip: &AudioClip, cfg: &DspConfig) -> Result<MelSpectrogram, AudioError> {
    MelFrontEnd::new(cfg)?.compute(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wav_with_fmt(tag: u16, channels: u16, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + data.len()) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&(16000u32 * 2).to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn zero_wav_decodes() {
        let clip = load_wav(&wav_with_fmt(1, 1, 16, &[0u8; 32])).unwrap();
        assert_eq!(clip.len(), 16);
        assert_eq!(clip.sample_rate(), 16000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn max_sample_scales_by_32768() {
        let clip = load_wav(&wav_with_fmt(1, 1, 16, &32767i16.to_le_bytes())).unwrap();
        assert_eq!(clip.samples()[0], 32767.0 / 32768.0);
    }

    #[test]
    fn rejects_bad_containers() {
        assert!(matches!(load_wav(b"abc"), Err(AudioError::MalformedContainer(_))));
        let mut bad_magic = wav_with_fmt(1, 1, 16, &[0; 4]);
        bad_magic[0] = b'X';
        assert!(matches!(load_wav(&bad_magic), Err(AudioError::MalformedContainer(_))));
        let mut truncated = wav_with_fmt(1, 1, 16, &[0; 8]);
        truncated.truncate(48);
        assert!(matches!(load_wav(&truncated), Err(AudioError::MalformedContainer(_))));
        assert!(matches!(
            load_wav(&wav_with_fmt(3, 1, 16, &[0; 4])),
            Err(AudioError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            load_wav(&wav_with_fmt(1, 2, 16, &[0; 4])),
            Err(AudioError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            load_wav(&wav_with_fmt(1, 1, 8, &[0; 4])),
            Err(AudioError::UnsupportedFormat(_))
        ));
        assert_eq!(load_wav(&wav_with_fmt(1, 1, 16, &[])), Err(AudioError::EmptyAudio));
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = wav_with_fmt(1, 1, 16, &[1, 0, 2, 0]);
        let mut with_list = plain[..36].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[9, 9, 9, 0]);
        with_list.extend_from_slice(&plain[36..]);
        assert_eq!(load_wav(&with_list).unwrap(), load_wav(&plain).unwrap());
    }

    #[test]
    fn writer_emits_canonical_header() {
        let clip = AudioClip::new(vec![0.0, 0.5, -0.5], 16000).unwrap();
        let bytes = write_wav(&clip);
        assert_eq!(bytes.len(), 44 + 6);
        assert_eq!(&bytes[0..4], b"RIFF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 42);
        assert_eq!(&bytes[36..40], b"data");
        assert_eq!(&bytes[44..46], &0i16.to_le_bytes());
        assert_eq!(&bytes[46..48], &16384i16.to_le_bytes());
    }

    #[test]
    fn sine_round_trip_within_one_lsb() {
        let clip = AudioClip::tone(440.0, 0.9, 1.0, 16000).unwrap();
        let back = load_wav(&write_wav(&clip)).unwrap();
        let worst = clip
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 32768.0, "worst error {worst}");
    }

    #[test]
    fn resample_identity_and_length() {
        let clip = AudioClip::tone(300.0, 0.5, 0.25, 16000).unwrap();
        assert_eq!(resample(&clip, 16000).unwrap(), clip);
        let one_sec = AudioClip::tone(300.0, 0.5, 1.0, 8000).unwrap();
        let up = resample(&one_sec, 16000).unwrap();
        assert_eq!(up.len(), 16000);
        assert_eq!(up.sample_rate(), 16000);
        let odd = AudioClip::silence(1001, 44100).unwrap();
        assert_eq!(resample(&odd, 16000).unwrap().len(), (1001.0f64 * 16000.0 / 44100.0).round() as usize);
    }

    #[test]
    fn frame_rate_matches_sixty_three_per_second() {
        let cfg = DspConfig::default();
        let mel = log_mel(&AudioClip::silence(16000, 16000).unwrap(), &cfg).unwrap();
        assert_eq!(mel.n_frames(), 63);
        assert_eq!(mel.n_mels(), 80);
    }

    #[test]
    fn silence_sits_at_the_floor() {
        let cfg = DspConfig::default();
        let mel = log_mel(&AudioClip::silence(4000, 16000).unwrap(), &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(mel.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn rate_mismatch_and_bad_config() {
        let cfg = DspConfig::default();
        let clip = AudioClip::silence(100, 8000).unwrap();
        assert_eq!(
            log_mel(&clip, &cfg).unwrap_err(),
            AudioError::RateMismatch { expected: 16000, actual: 8000 }
        );
        let bad = DspConfig { hop_size: 2048, ..DspConfig::default() };
        assert!(matches!(log_mel(&AudioClip::silence(100, 16000).unwrap(), &bad), Err(AudioError::ConfigInvalid(_))));
        let bad = DspConfig { fmax: 9000.0, ..DspConfig::default() };
        assert!(matches!(bad.validate(), Err(AudioError::ConfigInvalid(_))));
        let bad = DspConfig { log_floor: 0.0, ..DspConfig::default() };
        assert!(matches!(bad.validate(), Err(AudioError::ConfigInvalid(_))));
    }

    #[test]
    fn tiny_clips_still_frame() {
        let cfg = DspConfig::default();
        for len in [1usize, 2, 3, 255, 256, 513] {
            let clip = AudioClip::tone(500.0, 0.3, len as f64 / 16000.0, 16000).unwrap();
            let clip = AudioClip::new(clip.samples()[..len.min(clip.len())].to_vec(), 16000).unwrap();
            let mel = log_mel(&clip, &cfg).unwrap();
            assert_eq!(mel.n_frames(), 1 + clip.len() / 256);
        }
    }

    #[test]
    fn filterbank_rows_nonempty_and_ordered() {
        let cfg = DspConfig::default();
        let fb = mel_filterbank(&cfg, 1024).unwrap();
        assert_eq!(fb.dim(), (80, 513));
        for row in fb.rows() {
            assert!(row.iter().any(|&w| w > 0.0));
            assert!(row.iter().all(|&w| w >= 0.0));
        }
        let centers = mel_center_frequencies(&cfg);
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
        // Supports overlap only with neighbours.
        for m in 0..cfg.n_mels {
            for other in (m + 2)..cfg.n_mels {
                let overlap = fb.row(m).iter().zip(fb.row(other).iter()).any(|(a, b)| *a > 0.0 && *b > 0.0);
                assert!(!overlap, "filters {m} and {other} overlap");
            }
        }
    }

    #[test]
    fn degenerate_filterbank_is_rejected() {
        let cfg = DspConfig { n_mels: 400, win_size: 256, hop_size: 128, ..DspConfig::default() };
        assert!(matches!(mel_filterbank(&cfg, 256), Err(AudioError::ConfigInvalid(_))));
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-7, 3), 1);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn frame_count_law(len in 1usize..6000, hop in 16usize..512) {
            let cfg = DspConfig { hop_size: hop, win_size: 512.max(hop), ..DspConfig::default() };
            let cfg = DspConfig { n_mels: 40, ..cfg };
            let clip = AudioClip::silence(len, 16000).unwrap();
            let mel = log_mel(&clip, &cfg).unwrap();
            prop_assert_eq!(mel.n_frames(), 1 + len / hop);
        }

        #[test]
        fn louder_never_lowers_a_cell(freq in 100.0f64..7000.0, gain in 1.01f32..10.0) {
            let cfg = DspConfig::default();
            let clip = AudioClip::tone(freq, 0.05, 0.1, 16000).unwrap();
            let quiet = log_mel(&clip, &cfg).unwrap();
            let loud = log_mel(&clip.scaled(gain).unwrap(), &cfg).unwrap();
            for (q, l) in quiet.values().iter().zip(loud.values()) {
                prop_assert!(l >= q, "{} < {}", l, q);
            }
        }
    }

    #[test]
    fn log_mel_is_bitwise_deterministic() {
        let cfg = DspConfig::default();
        let clip = AudioClip::tone(1234.5, 0.4, 0.7, 16000).unwrap();
        let a = log_mel(&clip, &cfg).unwrap();
        let b = log_mel(&clip, &cfg).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
