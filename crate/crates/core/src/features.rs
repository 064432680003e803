//! WAV ingestion, log-magnitude spectrograms and per-utterance feature files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;
const STD_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    /// Samples in `[-1, 1]`.
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }
}

/// Reads 16-bit PCM mono RIFF/WAVE, scaling by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedFormat {
            field: "sample_format",
            value: "float".into(),
        });
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat {
            field: "bits_per_sample",
            value: spec.bits_per_sample.to_string(),
        });
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat {
            field: "channels",
            value: spec.channels.to_string(),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| (v as f64 / 32768.0).clamp(-1.0, 1.0)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Ok(Waveform {
        sample_rate: spec.sample_rate,
        samples,
    })
}

/// Writes 16-bit PCM mono. Samples are clipped to `[-1, 1]` and quantized as
/// `round(x * 32768)`, so anything read by [`read_wav`] round-trips exactly.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &wave.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedFormat {
            field: "container",
            value: format!("{}: {other}", path.display()),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            sample_rate: 16_000,
            frame_length_ms: 20.0,
            frame_shift_ms: 10.0,
            fft_size: 512,
        }
    }
}

impl FeatureParams {
    pub fn frame_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    /// Spectrogram rows, `fft_size / 2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate", "must be positive"));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(Error::config("fft_size", format!("{} is not a power of two", self.fft_size)));
        }
        if self.frame_samples() == 0 || self.shift_samples() == 0 {
            return Err(Error::config("frame_length_ms", "frame and shift must span at least one sample"));
        }
        if self.fft_size < self.frame_samples() {
            return Err(Error::config(
                "fft_size",
                format!("{} is smaller than a {}-sample frame", self.fft_size, self.frame_samples()),
            ));
        }
        Ok(())
    }

    pub fn num_frames(&self, samples: usize) -> Option<usize> {
        let frame = self.frame_samples();
        (samples >= frame).then(|| 1 + (samples - frame) / self.shift_samples())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// `[F, T]` log-magnitude spectrogram.
    pub features: Tensor,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// DFT magnitudes `|X_k|`, `k = 0..=fft_size/2`, of each Hann-windowed frame.
/// Returned frame-major: `out[t][k]`.
pub fn magnitude_frames(w: &Waveform, params: &FeatureParams) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    if w.sample_rate != params.sample_rate {
        return Err(Error::config(
            "sample_rate",
            format!("audio is {} Hz, features expect {} Hz", w.sample_rate, params.sample_rate),
        ));
    }
    let frame = params.frame_samples();
    let frames = params.num_frames(w.samples.len()).ok_or_else(|| {
        Error::Invalid(format!(
            "utterance of {} samples is shorter than one {frame}-sample frame",
            w.samples.len()
        ))
    })?;
    let shift = params.shift_samples();
    let n = params.fft_size;
    let window = hann_window(frame);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let start = t * shift;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for i in 0..frame {
            buf[i].re = w.samples[start + i] * window[i];
        }
        fft.process(&mut buf);
        out.push(buf[..params.num_bins()].iter().map(|c| c.norm()).collect());
    }
    Ok(out)
}

/// `log(max(|DFT|, 1e-10))` of Hann-windowed frames, as `[fft_size/2 + 1, T]`.
pub fn spectrogram(w: &Waveform, params: &FeatureParams) -> Result<FeatureMatrix> {
    let mags = magnitude_frames(w, params)?;
    let (bins, frames) = (params.num_bins(), mags.len());
    let mut data = vec![0.0; bins * frames];
    for (t, frame) in mags.iter().enumerate() {
        for (k, m) in frame.iter().enumerate() {
            data[k * frames + t] = m.max(LOG_FLOOR).ln();
        }
    }
    Ok(FeatureMatrix {
        features: Tensor::new(vec![bins, frames], data)?,
        frame_length_ms: params.frame_length_ms,
        frame_shift_ms: params.frame_shift_ms,
    })
}

/// Per-feature standardization over the utterance.
pub fn normalize(f: &FeatureMatrix) -> Result<FeatureMatrix> {
    let (bins, frames) = f.features.dims2()?;
    if frames < 2 {
        return Err(Error::contract("normalize", "need at least two frames"));
    }
    let mut data = f.features.data().to_vec();
    for row in data.chunks_mut(frames) {
        let m = row.iter().sum::<f64>() / frames as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / frames as f64;
        let scale = 1.0 / var.sqrt().max(STD_FLOOR);
        row.iter_mut().for_each(|v| *v = (*v - m) * scale);
    }
    Ok(FeatureMatrix {
        features: Tensor::new(vec![bins, frames], data)?,
        ..f.clone()
    })
}

const FEATURE_MAGIC: &[u8; 8] = b"SKFTv001";

/// Feature cache layout (all little-endian): magic `SKFTv001`, `u64` F, `u64` T,
/// `f64` frame length ms, `f64` frame shift ms, then `F*T` row-major `f64`.
pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let (bins, frames) = f.features.dims2()?;
    let mut buf = Vec::with_capacity(40 + 8 * bins * frames);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(bins as u64).to_le_bytes());
    buf.extend_from_slice(&(frames as u64).to_le_bytes());
    buf.extend_from_slice(&f.frame_length_ms.to_le_bytes());
    buf.extend_from_slice(&f.frame_shift_ms.to_le_bytes());
    for v in f.features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Invalid(format!("{}: bad feature file: {msg}", path.display()));
    if bytes.len() < 40 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("missing header"));
    }
    let word = |i: usize| -> [u8; 8] { bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap() };
    let bins = u64::from_le_bytes(word(0)) as usize;
    let frames = u64::from_le_bytes(word(1)) as usize;
    let frame_length_ms = f64::from_le_bytes(word(2));
    let frame_shift_ms = f64::from_le_bytes(word(3));
    let n = bins.checked_mul(frames).ok_or_else(|| bad("size overflow"))?;
    if bytes.len() != 40 + 8 * n {
        return Err(bad("length does not match header"));
    }
    let data = bytes[40..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMatrix {
        features: Tensor::new(vec![bins, frames], data)?,
        frame_length_ms,
        frame_shift_ms,
    })
}

/// One manifest line: `utterance-id<TAB>path<TAB>transcript`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub transcript: String,
}

/// Relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(p), Some(transcript)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected three tab-separated fields".into(),
            });
        };
        let p = Path::new(p);
        out.push(ManifestEntry {
            id: id.to_string(),
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            transcript: transcript.to_string(),
        });
    }
    Ok(out)
}

/// Paths are written relative to the manifest's directory when possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        writeln!(f, "{}\t{}\t{}", e.id, p.display(), e.transcript).map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}
