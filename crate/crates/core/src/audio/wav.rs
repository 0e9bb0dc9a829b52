//! Minimal RIFF/WAVE reader and writer.
//!
//! Reads 16-bit integer PCM and 32-bit IEEE float data (including the
//! `WAVE_FORMAT_EXTENSIBLE` wrapper around either). Multi-channel input is
//! downmixed to mono by averaging channels.

use std::path::Path;

use super::AudioBuffer;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 0x0001;
const FORMAT_IEEE_FLOAT: u16 = 0x0003;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Sample encoding used when writing a WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

#[derive(Debug, Clone, Copy)]
struct FmtChunk {
    format_tag: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::UnsupportedFormat(
            "input is not a RIFF/WAVE file".into(),
        ));
    }

    let mut fmt: Option<FmtChunk> = None;
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
                Error::UnsupportedFormat(format!(
                    "chunk {:?} overruns the file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => fmt = Some(parse_fmt(body)?),
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are padded to an even length
        pos = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| Error::UnsupportedFormat("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::UnsupportedFormat("missing data chunk".into()))?;
    if fmt.channels == 0 {
        return Err(Error::UnsupportedFormat("zero channels".into()));
    }
    if fmt.sample_rate == 0 {
        return Err(Error::UnsupportedFormat("zero sample rate".into()));
    }

    let channels = fmt.channels as usize;
    let frames: Vec<f64> = match (fmt.format_tag, fmt.bits_per_sample) {
        (FORMAT_PCM, 16) => downmix(
            data.chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0),
            channels,
        ),
        (FORMAT_IEEE_FLOAT, 32) => downmix(
            data.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
            channels,
        ),
        (FORMAT_PCM, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit integer PCM (only 16-bit PCM and 32-bit float are read)"
            )))
        }
        (FORMAT_IEEE_FLOAT, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit float (only 16-bit PCM and 32-bit float are read)"
            )))
        }
        (tag, _) => {
            return Err(Error::UnsupportedFormat(format!(
                "compressed or unknown codec (format tag 0x{tag:04x})"
            )))
        }
    };

    if frames.iter().any(|s| !s.is_finite()) {
        return Err(Error::UnsupportedFormat("non-finite sample values".into()));
    }
    Ok(AudioBuffer::new(frames, fmt.sample_rate))
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk> {
    if body.len() < 16 {
        return Err(Error::UnsupportedFormat("fmt chunk too short".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([body[i], body[i + 1]]);
    let mut format_tag = u16_at(0);
    let channels = u16_at(2);
    let sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
    let bits_per_sample = u16_at(14);
    if format_tag == FORMAT_EXTENSIBLE {
        // cbSize(2) validBits(2) channelMask(4) then the sub-format GUID,
        // whose first two bytes carry the actual format tag.
        if body.len() < 26 {
            return Err(Error::UnsupportedFormat(
                "extensible fmt chunk too short".into(),
            ));
        }
        format_tag = u16_at(24);
    }
    Ok(FmtChunk {
        format_tag,
        channels,
        sample_rate,
        bits_per_sample,
    })
}

fn downmix(samples: impl Iterator<Item = f64>, channels: usize) -> Vec<f64> {
    if channels == 1 {
        return samples.collect();
    }
    let interleaved: Vec<f64> = samples.collect();
    interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect()
}

/// Encodes a mono buffer as a canonical 44-byte-header WAV file.
pub fn encode_wav(audio: &AudioBuffer, format: SampleFormat) -> Vec<u8> {
    let (tag, bits) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 16u16),
        SampleFormat::Float32 => (FORMAT_IEEE_FLOAT, 32u16),
    };
    let block_align = bits / 8;
    let data_len = audio.samples.len() * block_align as usize;

    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate_hz * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    match format {
        SampleFormat::Pcm16 => {
            for &s in &audio.samples {
                let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
        SampleFormat::Float32 => {
            for &s in &audio.samples {
                out.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
    }
    if data_len % 2 == 1 {
        out.push(0);
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav(audio, format))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let samples: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.01).sin() * 0.9).collect();
        let audio = AudioBuffer::new(samples.clone(), 44100);
        let back = decode_wav(&encode_wav(&audio, SampleFormat::Pcm16)).unwrap();
        assert_eq!(back.sample_rate_hz, 44100);
        assert_eq!(back.samples.len(), samples.len());
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }

    #[test]
    fn float32_round_trip_is_exact_for_f32_values() {
        let samples: Vec<f64> = vec![0.0, 0.5, -0.25, 1.0, -1.0];
        let audio = AudioBuffer::new(samples.clone(), 48000);
        let back = decode_wav(&encode_wav(&audio, SampleFormat::Float32)).unwrap();
        assert_eq!(back.samples, samples);
    }

    #[test]
    fn stereo_is_averaged() {
        let mut bytes = encode_wav(
            &AudioBuffer::new(vec![0.5, -0.5, 1.0, 0.0], 8000),
            SampleFormat::Float32,
        );
        // patch the header to claim two channels
        bytes[22..24].copy_from_slice(&2u16.to_le_bytes());
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.samples, vec![0.0, 0.5]);
    }

    #[test]
    fn rejects_non_wav() {
        let err = decode_wav(b"this is plainly not audio").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)));
        assert!(err.to_string().contains("unsupported format"));
    }

    #[test]
    fn rejects_compressed_codec() {
        let mut bytes = encode_wav(&AudioBuffer::new(vec![0.0; 4], 8000), SampleFormat::Pcm16);
        // MP3 format tag
        bytes[20..22].copy_from_slice(&0x0055u16.to_le_bytes());
        let err = decode_wav(&bytes).unwrap_err();
        assert!(err.to_string().contains("compressed"), "{err}");
    }

    #[test]
    fn rejects_truncated_data_chunk() {
        let bytes = encode_wav(&AudioBuffer::new(vec![0.1; 100], 8000), SampleFormat::Pcm16);
        assert!(decode_wav(&bytes[..100]).is_err());
    }
}
