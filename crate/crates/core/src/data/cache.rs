//! Little-endian binary dataset cache.
//!
//! Layout: the magic and field count come first. Each field follows as its
//! name (u32 length plus UTF-8 bytes) and vocabulary size. Then come the
//! domain and task counts and a u64 sample count. Each sample is stored as
//! `domain: u16`, one `u32` per field and one `u8` per task.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Dataset, FeatureSpace, FieldSpec, Result, Sample, Split};

pub const CACHE_MAGIC: &[u8; 7] = b"MDMTDS1";

pub fn write_cache<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let space = ds.space();
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(space.fields.len() as u32).to_le_bytes())?;
    for f in &space.fields {
        w.write_all(&(f.name.len() as u32).to_le_bytes())?;
        w.write_all(f.name.as_bytes())?;
        w.write_all(&f.vocab_size.to_le_bytes())?;
    }
    w.write_all(&(space.domains as u32).to_le_bytes())?;
    w.write_all(&(space.tasks as u32).to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    for s in ds.samples() {
        w.write_all(&s.domain.to_le_bytes())?;
        for id in &s.features {
            w.write_all(&id.to_le_bytes())?;
        }
        w.write_all(&s.labels)?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DataError::Cache("truncated file".into()),
        _ => DataError::Io(e),
    })?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

/// Reads a cache; the result has split [`Split::Full`].
pub fn read_cache<R: Read>(mut r: R) -> Result<Dataset> {
    if &read_array::<7>(&mut r)? != CACHE_MAGIC {
        return Err(DataError::Cache("bad magic".into()));
    }
    let n_fields = read_u32(&mut r)? as usize;
    let mut fields = Vec::with_capacity(n_fields.min(1024));
    for _ in 0..n_fields {
        let len = read_u32(&mut r)? as usize;
        if len > 1 << 16 {
            return Err(DataError::Cache(format!("field name length {len} is implausible")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| DataError::Cache("truncated file".into()))?;
        let name = String::from_utf8(name).map_err(|_| DataError::Cache("field name is not UTF-8".into()))?;
        fields.push(FieldSpec::new(name, read_u32(&mut r)?));
    }
    let domains = read_u32(&mut r)? as usize;
    let tasks = read_u32(&mut r)? as usize;
    let space = FeatureSpace::new(fields, domains, tasks)?;
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let domain = u16::from_le_bytes(read_array(&mut r)?);
        let features = (0..n_fields).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut labels = vec![0u8; tasks];
        r.read_exact(&mut labels)
            .map_err(|_| DataError::Cache("truncated file".into()))?;
        samples.push(Sample {
            domain,
            features,
            labels,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(DataError::Cache("trailing bytes after last sample".into()));
    }
    Dataset::new(space, samples, Split::Full)
}

pub fn write_cache_file(ds: &Dataset, path: &Path) -> Result<()> {
    write_cache(ds, BufWriter::new(File::create(path)?))
}

pub fn read_cache_file(path: &Path) -> Result<Dataset> {
    read_cache(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::test_support::toy;

    #[test]
    fn roundtrip_is_lossless() {
        let ds = toy(&[4, 6], 3);
        let mut buf = Vec::new();
        write_cache(&ds, &mut buf).unwrap();
        assert_eq!(read_cache(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let ds = toy(&[4], 1);
        let mut buf = Vec::new();
        write_cache(&ds, &mut buf).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_cache(bad_magic.as_slice()), Err(DataError::Cache(_))));
        assert!(matches!(read_cache(&buf[..buf.len() - 1]), Err(DataError::Cache(_))));
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(read_cache(trailing.as_slice()), Err(DataError::Cache(_))));
    }
}
