//! Synthetic tone corpus: every character is a fixed-frequency tone burst
//! followed by a short gap, over background noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctc::Alphabet;
use crate::error::{Error, Result};
use crate::features::{write_manifest, write_wav, ManifestEntry, Waveform};

pub const SYNTH_SYMBOLS: &str = "abcde ";
const TONES_HZ: [f64; 6] = [440.0, 760.0, 1100.0, 1500.0, 2000.0, 2700.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_utterances: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub segment_ms: f64,
    pub tone_ms: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    pub max_words: usize,
    pub max_word_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_utterances: 20,
            seed: 7,
            sample_rate: 16000,
            segment_ms: 120.0,
            tone_ms: 90.0,
            amplitude: 0.3,
            noise_std: 0.01,
            max_words: 3,
            max_word_len: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_utterances == 0 {
            return Err(Error::config("synth.num_utterances", "must be at least 1"));
        }
        if !(self.tone_ms > 0.0 && self.tone_ms < self.segment_ms) {
            return Err(Error::config("synth.tone_ms", "must be positive and shorter than segment_ms"));
        }
        if self.max_words == 0 || self.max_word_len == 0 {
            return Err(Error::config("synth.max_words", "word counts and lengths must be at least 1"));
        }
        if !(self.noise_std >= 0.0 && self.amplitude > 0.0 && self.amplitude + 4.0 * self.noise_std < 1.0) {
            return Err(Error::config("synth.amplitude", "signal must stay within [-1, 1]"));
        }
        Ok(())
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }
}

pub fn synth_alphabet() -> Alphabet {
    Alphabet::new(SYNTH_SYMBOLS.chars()).expect("valid alphabet")
}

/// Random words over the letters, joined by single spaces.
pub fn random_transcript<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> String {
    let letters: Vec<char> = SYNTH_SYMBOLS.chars().filter(|c| *c != ' ').collect();
    let words = rng.random_range(1..=cfg.max_words);
    (0..words)
        .map(|_| {
            let len = rng.random_range(1..=cfg.max_word_len);
            (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Render `text` as audio. The waveform lasts exactly `len(text) * segment_ms`.
pub fn render<R: Rng>(text: &str, cfg: &SynthConfig, rng: &mut R) -> Result<Waveform> {
    let alphabet = synth_alphabet();
    let seg = cfg.segment_samples();
    let tone = (cfg.tone_ms * cfg.sample_rate as f64 / 1000.0).round() as usize;
    let ramp = (tone / 10).max(1);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config("synth.noise_std", e.to_string()))?;
    let sr = cfg.sample_rate as f64;
    let mut samples = Vec::with_capacity(seg * text.chars().count());
    for c in text.chars() {
        let label = alphabet
            .index_of(c)
            .ok_or_else(|| Error::Invalid(format!("character {c:?} cannot be synthesized")))?;
        let f = TONES_HZ[label - 1];
        for i in 0..seg {
            let env = if i < tone {
                let edge = i.min(tone - 1 - i);
                if edge < ramp {
                    0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
                } else {
                    1.0
                }
            } else {
                0.0
            };
            let s = cfg.amplitude * env * (2.0 * PI * f * i as f64 / sr).sin();
            samples.push(s + noise.sample(rng));
        }
    }
    Ok(Waveform {
        sample_rate: cfg.sample_rate,
        samples,
    })
}

/// Write `wav/<id>.wav` files and `manifest.tsv` under `out_dir`.
pub fn synth_data(out_dir: &Path, cfg: &SynthConfig) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(cfg.num_utterances);
    for i in 0..cfg.num_utterances {
        let id = format!("utt{i:04}");
        let text = random_transcript(cfg, &mut rng);
        let wave = render(&text, cfg, &mut rng)?;
        let path = wav_dir.join(format!("{id}.wav"));
        write_wav(&path, &wave)?;
        entries.push(ManifestEntry {
            id,
            path,
            transcript: text,
        });
    }
    write_manifest(&out_dir.join("manifest.tsv"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::read_manifest;

    #[test]
    fn duration_is_exact() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for text in ["a", "ab cd", "eeee e"] {
            let w = render(text, &cfg, &mut rng).unwrap();
            assert_eq!(w.samples.len(), text.len() * 1920);
            assert_eq!(w.duration_ms(), text.len() as f64 * cfg.segment_ms);
        }
    }

    #[test]
    fn transcripts_are_well_formed() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let t = random_transcript(&cfg, &mut rng);
            assert!(!t.starts_with(' ') && !t.ends_with(' ') && !t.contains("  "));
            assert!(synth_alphabet().encode(&t).is_ok());
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_utterances: 3,
            ..Default::default()
        };
        synth_data(a.path(), &cfg).unwrap();
        synth_data(b.path(), &cfg).unwrap();
        let entries = read_manifest(&a.path().join("manifest.tsv")).unwrap();
        assert_eq!(entries.len(), 3);
        for e in &entries {
            let rel = e.path.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&e.path).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
        assert_eq!(
            fs::read(a.path().join("manifest.tsv")).unwrap(),
            fs::read(b.path().join("manifest.tsv")).unwrap()
        );
    }
}
