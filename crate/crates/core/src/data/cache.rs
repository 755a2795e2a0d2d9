//! Binary sample cache: `MIXSEGDS`, a u32 version, a u64 count, then per
//! sample a length-prefixed id, `h w c` as u32, pixels as little-endian f32
//! and mask bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MIXSEGDS";
const VERSION: u32 = 1;

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        let id = s.source_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        for d in [s.height(), s.width(), s.channels()] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in s.image.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        let mask: Vec<u8> = s.mask.data().iter().map(|&v| v as u8).collect();
        w.write_all(&mask)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    path: String,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::data(format!("{} is truncated", self.path)),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let mut r = Cursor {
        inner: BufReader::new(File::open(path)?),
        path: path.display().to_string(),
    };
    if r.bytes(8)? != MAGIC {
        return Err(Error::data(format!("{} is not a sample cache", r.path)));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!(
            "{} has cache version {version}, expected {VERSION}",
            r.path
        )));
    }
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let id = String::from_utf8(r.bytes(n)?)
            .map_err(|_| Error::data(format!("{}: source id is not UTF-8", r.path)))?;
        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let image: Vec<f32> = r
            .bytes(h * w * c * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mask: Vec<f32> = r.bytes(h * w)?.into_iter().map(f32::from).collect();
        out.push(Sample::new(
            Tensor::new(vec![h, w, c], image)?,
            Tensor::new(vec![h, w, 1], mask)?,
            id,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let samples = vec![
            Sample::new(
                Tensor::from_fn(&[2, 3, 3], |i| i as f32 / 17.0),
                Tensor::from_fn(&[2, 3, 1], |i| (i % 2) as f32),
                "a",
            )
            .unwrap(),
            Sample::new(Tensor::full(&[1, 1, 1], 0.25), Tensor::full(&[1, 1, 1], 1.0), "β").unwrap(),
        ];
        write_samples(&path, &samples).unwrap();
        assert_eq!(read_samples(&path).unwrap(), samples);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_samples(&path).unwrap_err().to_string().contains("truncated"));
    }
}
