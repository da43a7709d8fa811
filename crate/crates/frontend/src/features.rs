//! Feature matrices and their binary cache: `"MQFT"`, `u32 T`, `u32 F`, then
//! `T*F` little-endian `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mqnet_core::Tensor;

use crate::error::{FrontendError, Result};

const MAGIC: &[u8; 4] = b"MQFT";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// `T x F`, one row per frame.
    pub frames: Tensor,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
    pub utt_id: String,
}

impl FeatureMatrix {
    pub fn new(frames: Tensor, utt_id: impl Into<String>) -> Self {
        Self {
            frames,
            frame_shift_ms: 10.0,
            frame_length_ms: 20.0,
            utt_id: utt_id.into(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

pub fn write_features<W: Write>(mut w: W, frames: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(frames.rows() as u32).to_le_bytes())?;
    w.write_all(&(frames.cols() as u32).to_le_bytes())?;
    for v in frames.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_features<R: Read>(mut r: R) -> Result<Tensor> {
    let short = |e: std::io::Error| FrontendError::FeatureFormat(format!("truncated: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != MAGIC {
        return Err(FrontendError::FeatureFormat(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(short)?;
    let t = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(short)?;
    let f = u32::from_le_bytes(word) as usize;
    let mut data = vec![0.0; t * f];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf).map_err(short)?;
        *v = f64::from_le_bytes(buf);
    }
    if r.read(&mut buf).map_err(short)? != 0 {
        return Err(FrontendError::FeatureFormat("trailing bytes".into()));
    }
    Ok(Tensor::matrix(t, f, data)?)
}

pub fn save_features(path: impl AsRef<Path>, frames: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| FrontendError::io(path, e))?;
    write_features(BufWriter::new(file), frames).map_err(|e| FrontendError::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| FrontendError::io(path, e))?;
    let frames = read_features(BufReader::new(file))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(FeatureMatrix::new(frames, id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let m = Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-300, -7.0]).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"MQFT");
        assert_eq!(buf.len(), 12 + 6 * 8);
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(read_features(&buf[..]).unwrap(), m);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(read_features(&b"MQLP\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_features(&mut buf, &Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(read_features(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_features(&buf[..]).is_err());
    }
}
