//! Binary audio and frame-stream files, JSON helpers and content hashes.
//!
//! ```text
//! audio   b"CSAU", sample_rate u32 LE, length u64 LE, length x f32 LE
//! frames  b"CSLM", frames u32 LE, points u32 LE, dims u32 LE, frames*points*dims x f32 LE
//! ```
//! Landmark trajectories use `dims = 2`; coefficient and mel streams use
//! `dims = 1` with one point per column.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mat::Mat;

pub const AUDIO_MAGIC: &[u8; 4] = b"CSAU";
pub const FRAMES_MAGIC: &[u8; 4] = b"CSLM";

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

fn f32s(path: &Path, bytes: &[u8], count: usize) -> Result<Vec<f32>> {
    if bytes.len() != count * 4 {
        return Err(format_err(path, format!("payload has {} bytes, header implies {}", bytes.len(), count * 4)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_audio(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(AUDIO_MAGIC)?;
    w.write_all(&sample_rate.to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        w.write_all(&s.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Returns `(samples, sample_rate)`.
pub fn read_audio(path: &Path) -> Result<(Vec<f32>, u32)> {
    let b = read_all(path)?;
    if b.len() < 16 || &b[..4] != AUDIO_MAGIC {
        return Err(format_err(path, "not an audio file (bad magic)"));
    }
    let rate = u32::from_le_bytes(b[4..8].try_into().unwrap());
    let len = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    Ok((f32s(path, &b[16..], len)?, rate))
}

/// Writes a `T x (points * dims)` matrix.
pub fn write_frames(path: &Path, m: &Mat, dims: usize) -> Result<()> {
    if dims == 0 || m.cols % dims != 0 {
        return Err(Error::DimensionMismatch(format!("{} columns do not split into {dims}-d points", m.cols)));
    }
    let mut w = create(path)?;
    w.write_all(FRAMES_MAGIC)?;
    for v in [m.rows, m.cols / dims, dims] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for s in &m.data {
        w.write_all(&s.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the `T x (points * dims)` matrix and `dims`.
pub fn read_frames(path: &Path) -> Result<(Mat, usize)> {
    let b = read_all(path)?;
    if b.len() < 16 || &b[..4] != FRAMES_MAGIC {
        return Err(format_err(path, "not a frame-stream file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap()) as usize;
    let (frames, points, dims) = (word(4), word(8), word(12));
    let data = f32s(path, &b[16..], frames * points * dims)?;
    Ok((Mat::new(frames, points * dims, data)?, dims))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let b = read_all(path)?;
    serde_json::from_slice(&b).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let b = read_all(path)?;
    let text = std::str::from_utf8(&b).map_err(|e| format_err(path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| format_err(path, e.to_string())))
        .collect()
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    let mut f = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingArtifact(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audio_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/x.f32");
        let s = vec![0.0, -1.5, 3.25, f32::MIN_POSITIVE];
        write_audio(&p, &s, 22050).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 16);
        assert_eq!(read_audio(&p).unwrap(), (s, 22050));
    }

    #[test]
    fn frames_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.lmk");
        let m = Mat::from_fn(3, 42, |r, c| (r * 42 + c) as f32 * 0.01);
        write_frames(&p, &m, 2).unwrap();
        let (back, dims) = read_frames(&p).unwrap();
        assert_eq!((back, dims), (m.clone(), 2));
        assert!(matches!(write_frames(&p, &Mat::zeros(2, 3), 2), Err(Error::DimensionMismatch(_))));
        assert!(matches!(read_audio(&p), Err(Error::Format { .. })));
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_frames(&p), Err(Error::Format { .. })));
        assert!(matches!(read_frames(&dir.path().join("none")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn hashes() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(file_hash(&p).unwrap(), sha256_hex(b"abc"));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let rows = vec![vec![1, 2], vec![3]];
        write_jsonl(&p, &rows).unwrap();
        assert_eq!(read_jsonl::<Vec<i32>>(&p).unwrap(), rows);
    }
}
