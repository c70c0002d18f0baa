//! Little-endian, length-prefixed batch framing:
//!
//! ```text
//! u32 frame_len                      (bytes that follow)
//! u32 origin_user | u64 seq | u32 entry_count
//! entry_count x { u16 i | u16 j | u16 k | f64 delta | f64 capture_time }
//! ```

use super::{SyncBatch, SyncEntry, SyncError};
use crate::voxel::VoxelIndex;

/// Header bytes after the length prefix.
pub const HEADER_LEN: usize = 4 + 8 + 4;
pub const ENTRY_LEN: usize = 3 * 2 + 2 * 8;

pub fn encode_batch(batch: &SyncBatch) -> Vec<u8> {
    let body = HEADER_LEN + ENTRY_LEN * batch.entries.len();
    let mut out = Vec::with_capacity(4 + body);
    out.extend_from_slice(&(body as u32).to_le_bytes());
    out.extend_from_slice(&batch.origin.to_le_bytes());
    out.extend_from_slice(&batch.seq.to_le_bytes());
    out.extend_from_slice(&(batch.entries.len() as u32).to_le_bytes());
    for e in &batch.entries {
        out.extend_from_slice(&e.voxel.i.to_le_bytes());
        out.extend_from_slice(&e.voxel.j.to_le_bytes());
        out.extend_from_slice(&e.voxel.k.to_le_bytes());
        out.extend_from_slice(&e.delta.to_le_bytes());
        out.extend_from_slice(&e.capture_time.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], SyncError> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| SyncError::Codec(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length checked"))
    }

    fn u16(&mut self) -> Result<u16, SyncError> {
        self.take::<2>().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, SyncError> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, SyncError> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, SyncError> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

/// Decodes one frame from the front of `buf`, returning the batch and the
/// number of bytes consumed.
pub fn decode_batch(buf: &[u8]) -> Result<(SyncBatch, usize), SyncError> {
    let mut r = Reader { buf, pos: 0 };
    let body = r.u32()? as usize;
    if body < HEADER_LEN || (body - HEADER_LEN) % ENTRY_LEN != 0 {
        return Err(SyncError::Codec(format!("bad frame length {body}")));
    }
    if buf.len() < 4 + body {
        return Err(SyncError::Codec(format!(
            "frame needs {} bytes, have {}",
            4 + body,
            buf.len()
        )));
    }
    let origin = r.u32()?;
    let seq = r.u64()?;
    let count = r.u32()? as usize;
    if count != (body - HEADER_LEN) / ENTRY_LEN {
        return Err(SyncError::Codec(format!(
            "entry count {count} disagrees with frame length {body}"
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let voxel = VoxelIndex::new(r.u16()?, r.u16()?, r.u16()?);
        let delta = r.f64()?;
        let capture_time = r.f64()?;
        entries.push(SyncEntry {
            voxel,
            delta,
            capture_time,
        });
    }
    Ok((SyncBatch { origin, seq, entries }, r.pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> SyncBatch {
        SyncBatch {
            origin: 7,
            seq: 3,
            entries: vec![SyncEntry {
                voxel: VoxelIndex::new(1, 2, 3),
                delta: 0.5,
                capture_time: 1.25,
            }],
        }
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = encode_batch(&sample());
        assert_eq!(bytes.len(), 4 + HEADER_LEN + ENTRY_LEN);
        assert_eq!(&bytes[0..4], &(38u32).to_le_bytes());
        assert_eq!(&bytes[4..8], &[7, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &[3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[1, 0, 0, 0]);
        assert_eq!(&bytes[20..26], &[1, 0, 2, 0, 3, 0]);
        assert_eq!(&bytes[26..34], &0.5f64.to_le_bytes());
    }

    #[test]
    fn truncation_and_bad_counts() {
        let bytes = encode_batch(&sample());
        assert!(decode_batch(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[16] = 2;
        assert!(decode_batch(&bad).is_err());
        let mut short = bytes;
        short[0] = 5;
        assert!(decode_batch(&short).is_err());
    }

    #[test]
    fn frames_concatenate() {
        let a = encode_batch(&sample());
        let mut both = a.clone();
        both.extend_from_slice(&encode_batch(&SyncBatch { origin: 1, seq: 9, entries: vec![] }));
        let (first, used) = decode_batch(&both).unwrap();
        assert_eq!(first, sample());
        let (second, _) = decode_batch(&both[used..]).unwrap();
        assert!(second.is_heartbeat());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            origin in any::<u32>(),
            seq in any::<u64>(),
            raw in proptest::collection::vec((any::<u16>(), any::<u16>(), any::<u16>(), any::<u64>(), any::<u64>()), 0..20),
        ) {
            let entries = raw.iter().map(|&(i, j, k, d, t)| SyncEntry {
                voxel: VoxelIndex::new(i, j, k),
                delta: f64::from_bits(d),
                capture_time: f64::from_bits(t),
            }).collect();
            let batch = SyncBatch { origin, seq, entries };
            let bytes = encode_batch(&batch);
            let (back, used) = decode_batch(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(encode_batch(&back), bytes);
        }
    }
}
