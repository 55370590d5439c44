use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Result, SugarError};
use crate::skeleton::SkeletonSequence;

const MAGIC: &[u8; 4] = b"SUGR";
const VERSION: u32 = 1;

/// Byte layout: magic "SUGR", version u32 LE, count u32 LE, then per
/// sequence: T, V, C u32 LE, label i32 LE (-1 = none), subject i32 LE
/// (-1 = none), T*V*C f32 LE values in frame-joint-channel order.
///
/// Coordinates are serialized at f32 precision; sequences whose values are
/// f32-representable (everything the synthetic generator emits) round-trip
/// bit-exactly.
pub fn write_skeleton_file<P: AsRef<Path>>(seqs: &[SkeletonSequence], path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(seqs.len() as u32).to_le_bytes())?;
    for seq in seqs {
        let shape = seq.frames().shape();
        w.write_all(&(shape[0] as u32).to_le_bytes())?;
        w.write_all(&(shape[1] as u32).to_le_bytes())?;
        w.write_all(&(shape[2] as u32).to_le_bytes())?;
        w.write_all(&seq.label().unwrap_or(-1).to_le_bytes())?;
        w.write_all(&seq.subject_id().unwrap_or(-1).to_le_bytes())?;
        for v in seq.frames().iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let offset = self.offset;
        self.inner.read_exact(buf).map_err(|_| SugarError::Format {
            offset,
            msg: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.take(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        let mut buf = [0u8; 4];
        self.take(&mut buf, what)?;
        Ok(i32::from_le_bytes(buf))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let mut buf = [0u8; 4];
        self.take(&mut buf, what)?;
        Ok(f32::from_le_bytes(buf))
    }
}

pub fn read_skeleton_file<P: AsRef<Path>>(path: P) -> Result<Vec<SkeletonSequence>> {
    let mut r = Cursor {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(SugarError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SugarError::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("sequence count")?;
    let mut seqs = Vec::with_capacity(count as usize);
    for i in 0..count {
        let header_offset = r.offset;
        let t = r.u32("frame count")? as usize;
        let v = r.u32("joint count")? as usize;
        let c = r.u32("channel count")? as usize;
        if t == 0 || v == 0 || c == 0 {
            return Err(SugarError::Format {
                offset: header_offset,
                msg: format!("sequence {i} has degenerate shape {t}x{v}x{c}"),
            });
        }
        let label = r.i32("label")?;
        let subject = r.i32("subject")?;
        let mut frames = Array3::<f64>::zeros((t, v, c));
        for value in frames.iter_mut() {
            *value = r.f32("coordinates")? as f64;
        }
        seqs.push(SkeletonSequence::new(
            frames,
            (label >= 0).then_some(label),
            (subject >= 0).then_some(subject),
        )?);
    }
    Ok(seqs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_read(seqs: &[SkeletonSequence]) -> Vec<SkeletonSequence> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.skel");
        write_skeleton_file(seqs, &path).unwrap();
        read_skeleton_file(&path).unwrap()
    }

    #[test]
    fn empty_file_round_trips() {
        assert_eq!(write_read(&[]), Vec::new());
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.skel");
        write_skeleton_file(&[], &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        match read_skeleton_file(&path) {
            Err(SugarError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.skel");
        let frames = Array3::<f64>::from_elem((2, 3, 3), 0.5);
        let seq = SkeletonSequence::new(frames, Some(1), Some(2)).unwrap();
        write_skeleton_file(&[seq], &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_skeleton_file(&path) {
            Err(SugarError::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_identity(
            t in 1usize..5,
            v in 1usize..6,
            label in proptest::option::of(0i32..100),
            subject in proptest::option::of(0i32..100),
            seed in 0u64..1000,
        ) {
            // f32-representable coordinates round-trip exactly.
            let mut state = seed;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((state >> 33) as f32 / u32::MAX as f32 * 20.0 - 10.0) as f64
            };
            let frames = Array3::<f64>::from_shape_fn((t, v, 3), |_| next());
            let seq = SkeletonSequence::new(frames, label, subject).unwrap();
            let back = write_read(std::slice::from_ref(&seq));
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0], &seq);
        }
    }
}
