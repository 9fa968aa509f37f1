use std::io::Cursor;
use std::path::Path;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

fn spec() -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

pub fn to_wav_bytes(w: &Waveform) -> Result<Vec<u8>> {
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer =
            hound::WavWriter::new(&mut cursor, spec()).map_err(|e| Error::Wav(e.to_string()))?;
        for &s in &w.samples {
            writer.write_sample(s).map_err(|e| Error::Wav(e.to_string()))?;
        }
        writer.finalize().map_err(|e| Error::Wav(e.to_string()))?;
    }
    Ok(cursor.into_inner())
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    write_atomic(path, &to_wav_bytes(w)?)
}

/// Reads mono PCM16 audio at 16 kHz; anything else is rejected.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let s = reader.spec();
    if s.channels != 1
        || s.sample_rate != SAMPLE_RATE
        || s.bits_per_sample != 16
        || s.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Wav(format!(
            "{}: expected mono PCM16 at {SAMPLE_RATE} Hz, got {s:?}",
            path.display()
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    Waveform::new(samples)
}
