//! RIFF/WAVE reading and writing, PCM16 mono only.

use crate::error::{Error, Result};
use crate::features::Waveform;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a PCM16 mono WAV file; samples are scaled by 1/32768.
pub fn read_wav_pcm16(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if len < 16 || body + 16 > bytes.len() {
                return Err(Error::Wav("fmt chunk length".into()));
            }
            format = Some((
                u16_at(bytes, body),
                u16_at(bytes, body + 2),
                u32_at(bytes, body + 4),
                u16_at(bytes, body + 14),
            ));
        } else if id == b"data" {
            let (code, channels, rate, bits) =
                format.ok_or_else(|| Error::Wav("data chunk before fmt chunk".into()))?;
            if code != 1 {
                return Err(Error::Wav(format!("format code {code} (only PCM = 1)")));
            }
            if channels != 1 {
                return Err(Error::Wav(format!("channels = {channels} (only mono)")));
            }
            if bits != 16 {
                return Err(Error::Wav(format!("bits per sample = {bits} (only 16)")));
            }
            if rate == 0 {
                return Err(Error::Wav("sample rate = 0".into()));
            }
            if body + len > bytes.len() || !len.is_multiple_of(2) {
                return Err(Error::Wav(format!(
                    "data chunk length {len} exceeds the {} bytes present",
                    bytes.len().saturating_sub(body)
                )));
            }
            let samples = bytes[body..body + len]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                .collect();
            return Waveform::new(samples, rate);
        }
        pos = body + len + (len & 1);
    }
    Err(Error::Wav("no data chunk".into()))
}

/// Encodes PCM16 mono samples.
pub fn write_wav_pcm16(samples: &[i16], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Quantizes `[-1, 1]` samples to PCM16 with rounding and clipping.
pub fn quantize_pcm16(samples: &[f64]) -> Vec<i16> {
    samples
        .iter()
        .map(|&s| (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scales_samples() {
        let w = read_wav_pcm16(&write_wav_pcm16(&[0, 16384, -32768], 16000)).unwrap();
        assert_eq!(w.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(w.sample_rate, 16000);
    }

    #[test]
    fn truncated_data_chunk() {
        let mut b = write_wav_pcm16(&[1, 2, 3, 4], 16000);
        b.truncate(b.len() - 3);
        let msg = read_wav_pcm16(&b).unwrap_err().to_string();
        assert!(msg.contains("data chunk length"), "{msg}");
    }

    #[test]
    fn stereo_rejected() {
        let mut b = write_wav_pcm16(&[1, 2], 16000);
        b[22] = 2;
        let msg = read_wav_pcm16(&b).unwrap_err().to_string();
        assert!(msg.contains("channels"), "{msg}");
    }

    #[test]
    fn non_pcm_and_bit_depth_rejected() {
        let mut b = write_wav_pcm16(&[1, 2], 16000);
        b[20] = 3;
        assert!(read_wav_pcm16(&b).unwrap_err().to_string().contains("format code"));
        let mut b = write_wav_pcm16(&[1, 2], 16000);
        b[34] = 24;
        assert!(read_wav_pcm16(&b).unwrap_err().to_string().contains("bits per sample"));
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = write_wav_pcm16(&[7, -7], 8000);
        let mut b = plain[..12].to_vec();
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]);
        b.extend_from_slice(&plain[12..]);
        let w = read_wav_pcm16(&b).unwrap();
        assert_eq!(w.samples.len(), 2);
    }

    proptest! {
        #[test]
        fn pcm_round_trip(samples in proptest::collection::vec(any::<i16>(), 1..200)) {
            let w = read_wav_pcm16(&write_wav_pcm16(&samples, 16000)).unwrap();
            prop_assert_eq!(quantize_pcm16(&w.samples), samples);
        }
    }
}
