//! Little-endian binary containers for volumes (`.tctv`) and label maps
//! (`.tctl`).
//!
//! ```text
//! .tctv  "TCTV" | u32 version=1 | u32 dz dy dx | f32 sz sy sx | f32 × dz·dy·dx
//! .tctl  "TCTL" | u32 version=1 | u32 dz dy dx | u8  × dz·dy·dx
//! ```

use std::path::{Path, PathBuf};

use super::{LabelMap, Volume};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"TCTV";
pub const LABEL_MAGIC: &[u8; 4] = b"TCTL";
pub const FORMAT_VERSION: u32 = 1;

/// Bounds-checked little-endian cursor that reports failures with the byte
/// offset at which they occur.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub(crate) fn error(&self, msg: impl Into<String>) -> Error {
        Error::format(&self.path, self.pos as u64, msg)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error(format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4)?;
        if got != want {
            self.pos = at;
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, want: u32) -> Result<()> {
        let at = self.pos;
        let v = self.u32()?;
        if v != want {
            self.pos = at;
            return Err(self.error(format!("unsupported version {v}, expected {want}")));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.error("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn dims(&mut self) -> Result<[usize; 3]> {
        let at = self.pos;
        let dims = [self.u32()? as usize, self.u32()? as usize, self.u32()? as usize];
        if dims.iter().any(|&d| d == 0) {
            self.pos = at;
            return Err(self.error(format!("zero dimension in {dims:?}")));
        }
        Ok(dims)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn voxel_count(dims: [usize; 3], r: &Reader) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.error(format!("dims {dims:?} overflow")))
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * v.data.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let mut r = Reader::new(bytes, path);
    r.magic(VOLUME_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let dims = r.dims()?;
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let n = voxel_count(dims, &r)?;
    let data = r.f32s(n)?;
    r.finish()?;
    Volume::new(dims, spacing, data).map_err(|e| r.error(e.to_string()))
}

pub fn encode_labels(l: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + l.data.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in l.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&l.data);
    out
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let mut r = Reader::new(bytes, path);
    r.magic(LABEL_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let dims = r.dims()?;
    let n = voxel_count(dims, &r)?;
    let data = r.take(n)?.to_vec();
    r.finish()?;
    LabelMap::new(dims, data).map_err(|e| r.error(e.to_string()))
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    std::fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

pub fn save_labels(path: &Path, l: &LabelMap) -> Result<()> {
    std::fs::write(path, encode_labels(l)).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Volume {
        Volume::new([2, 2, 2], [3.0, 1.0, 1.0], (0..8).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap()
    }

    #[test]
    fn two_cubed_volume_is_64_bytes() {
        let bytes = encode_volume(&sample_volume());
        assert_eq!(bytes.len(), 4 + 4 + 12 + 12 + 32);
        assert_eq!(&bytes[..4], b"TCTV");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn roundtrips_are_exact() {
        let p = Path::new("mem");
        let v = sample_volume();
        let bytes = encode_volume(&v);
        let back = decode_volume(&bytes, p).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_volume(&back), bytes);

        let l = LabelMap::new([1, 2, 3], vec![0, 1, 2, 3, 4, 5]).unwrap();
        let bytes = encode_labels(&l);
        assert_eq!(bytes.len(), 20 + 6);
        let back = decode_labels(&bytes, p).unwrap();
        assert_eq!(back, l);
        assert_eq!(encode_labels(&back), bytes);
    }

    #[test]
    fn corrupted_headers_report_offsets() {
        let p = Path::new("mem");
        let mut bytes = encode_volume(&sample_volume());
        bytes[0] = b'X';
        match decode_volume(&bytes, p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let mut bytes = encode_volume(&sample_volume());
        bytes[4] = 2;
        assert!(matches!(decode_volume(&bytes, p), Err(Error::Format { offset: 4, .. })));
        let bytes = encode_volume(&sample_volume());
        assert!(matches!(
            decode_volume(&bytes[..40], p),
            Err(Error::Format { offset: 32, .. })
        ));
        let mut bytes = encode_labels(&LabelMap::new([1, 1, 2], vec![0, 1]).unwrap());
        bytes.push(0);
        assert!(matches!(decode_labels(&bytes, p), Err(Error::Format { offset: 22, .. })));
        assert!(matches!(
            decode_labels(&encode_volume(&sample_volume()), p),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
