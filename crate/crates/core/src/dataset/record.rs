//! Length-prefixed record files with masked CRC32C checksums.
//!
//! Each record is `u64 len | u32 masked_crc(len) | payload | u32 masked_crc(payload)`,
//! all little-endian.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

const CASTAGNOLI: u32 = 0x82F6_3B78;
const MASK_DELTA: u32 = 0xa282_ead8;

const fn crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { (c >> 1) ^ CASTAGNOLI } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static TABLE: [u32; 256] = crc_table();

pub fn crc32c(data: &[u8]) -> u32 {
    let mut c = !0u32;
    for &b in data {
        c = TABLE[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    !c
}

pub fn masked_crc32c(data: &[u8]) -> u32 {
    let c = crc32c(data);
    c.rotate_right(15).wrapping_add(MASK_DELTA)
}

pub fn frame_record(payload: &[u8], out: &mut Vec<u8>) {
    let len = (payload.len() as u64).to_le_bytes();
    out.extend_from_slice(&len);
    out.extend_from_slice(&masked_crc32c(&len).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&masked_crc32c(payload).to_le_bytes());
}

/// Writes all records to `path` atomically.
pub fn write_records<P: AsRef<[u8]>>(path: &Path, records: &[P]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        frame_record(r.as_ref(), &mut buf);
    }
    write_atomic(path, &buf)
}

/// Streaming reader; yields payloads until clean end of file.
pub struct RecordReader<R: Read> {
    inner: R,
    index: usize,
    failed: bool,
}

impl RecordReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(RecordReader::new(BufReader::new(File::open(path)?)))
    }
}

impl<R: Read> RecordReader<R> {
    pub fn new(inner: R) -> Self {
        RecordReader {
            inner,
            index: 0,
            failed: false,
        }
    }

    /// Fills `buf`; returns the number of bytes read before EOF.
    fn fill(&mut self, buf: &mut [u8]) -> Result<usize> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(got)
    }

    fn read_exact_or_truncated(&mut self, buf: &mut [u8]) -> Result<()> {
        if self.fill(buf)? < buf.len() {
            return Err(Error::TruncatedFile { index: self.index });
        }
        Ok(())
    }

    fn next_record(&mut self) -> Result<Option<Vec<u8>>> {
        let mut header = [0u8; 12];
        let got = self.fill(&mut header)?;
        if got == 0 {
            return Ok(None);
        }
        if got < header.len() {
            return Err(Error::TruncatedFile { index: self.index });
        }
        let len_bytes: [u8; 8] = header[..8].try_into().unwrap();
        let len_crc = u32::from_le_bytes(header[8..].try_into().unwrap());
        if masked_crc32c(&len_bytes) != len_crc {
            return Err(Error::CorruptRecord {
                index: self.index,
                reason: "length checksum mismatch".into(),
            });
        }
        let len = u64::from_le_bytes(len_bytes);
        let len = usize::try_from(len).map_err(|_| Error::CorruptRecord {
            index: self.index,
            reason: format!("length {len} does not fit in memory"),
        })?;
        // Grow incrementally so a bogus length cannot force a huge allocation.
        let mut payload = Vec::new();
        let mut remaining = len;
        let mut chunk = [0u8; 64 * 1024];
        while remaining > 0 {
            let want = remaining.min(chunk.len());
            self.read_exact_or_truncated(&mut chunk[..want])?;
            payload.extend_from_slice(&chunk[..want]);
            remaining -= want;
        }
        let mut crc = [0u8; 4];
        self.read_exact_or_truncated(&mut crc)?;
        if masked_crc32c(&payload) != u32::from_le_bytes(crc) {
            return Err(Error::CorruptRecord {
                index: self.index,
                reason: "payload checksum mismatch".into(),
            });
        }
        self.index += 1;
        Ok(Some(payload))
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<Vec<u8>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.next_record() {
            Ok(Some(p)) => Some(Ok(p)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Vec<u8>>> {
    RecordReader::open(path)?.collect()
}

pub fn read_records_from_bytes(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    RecordReader::new(bytes).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_check_value() {
        assert_eq!(crc32c(b"123456789"), 0xE306_9283);
        assert_eq!(crc32c(b""), 0);
    }

    #[test]
    fn round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.record");
        let recs: Vec<Vec<u8>> = vec![b"one".to_vec(), vec![], vec![7u8; 100_000]];
        write_records(&path, &recs).unwrap();
        assert_eq!(read_records(&path).unwrap(), recs);
    }

    #[test]
    fn empty_file_has_no_records() {
        assert!(read_records_from_bytes(&[]).unwrap().is_empty());
    }

    #[test]
    fn truncation_reports_index() {
        let mut buf = Vec::new();
        frame_record(b"first", &mut buf);
        frame_record(b"second", &mut buf);
        for cut in 1..buf.len() {
            let r = read_records_from_bytes(&buf[..cut]);
            let first_len = 12 + 5 + 4;
            match r {
                Err(Error::TruncatedFile { index }) => {
                    assert_eq!(index, usize::from(cut >= first_len), "cut {cut}")
                }
                Ok(v) => assert_eq!((cut, v.len()), (first_len, 1)),
                Err(e) => panic!("cut {cut}: {e}"),
            }
        }
    }

    #[test]
    fn bit_flip_detected() {
        let mut buf = Vec::new();
        frame_record(b"payload", &mut buf);
        frame_record(b"payload2", &mut buf);
        let second = 12 + 7 + 4;
        for pos in [0, 9, 14, second + 3, second + 14] {
            let mut bad = buf.clone();
            bad[pos] ^= 0x10;
            match read_records_from_bytes(&bad) {
                Err(Error::CorruptRecord { index, .. }) => assert_eq!(index, usize::from(pos >= second)),
                other => panic!("flip at {pos}: {other:?}"),
            }
        }
    }
}
