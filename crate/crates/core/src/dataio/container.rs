//! The `DADF` clip container.
//!
//! Header: magic `44 41 44 46`, `u32` version = 1, `u32` C, `u64` record
//! count. Each record: `u32` clip_id, `u32` movie_id, `u64` start_ms,
//! `u64` end_ms, `u32` n, `u32` text_len, `text_len` UTF-8 bytes, then `n·C`
//! `f32` values. Everything little-endian.

use std::path::Path;

use super::corpus::{ClipRecord, Corpus};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = [0x44, 0x41, 0x44, 0x46];
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
/// Fixed part of a record, before the text and frame payload.
pub const RECORD_FIXED_LEN: usize = 32;

pub fn encode_container(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(corpus.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    for r in corpus.records() {
        out.extend_from_slice(&r.clip_id.to_le_bytes());
        out.extend_from_slice(&r.movie_id.to_le_bytes());
        out.extend_from_slice(&r.start_ms.to_le_bytes());
        out.extend_from_slice(&r.end_ms.to_le_bytes());
        out.extend_from_slice(&(r.frames.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(r.ad_text.len() as u32).to_le_bytes());
        out.extend_from_slice(r.ad_text.as_bytes());
        for &v in r.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Corpus> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected DADF".into(),
        });
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let channels = rd.u32("channel count")? as usize;
    let count = rd.u64("record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let clip_id = rd.u32("clip_id")?;
        let movie_id = rd.u32("movie_id")?;
        let start_ms = rd.u64("start_ms")?;
        let end_ms = rd.u64("end_ms")?;
        let n = rd.u32("frame count")? as usize;
        let text_len = rd.u32("text length")? as usize;
        let text_at = rd.pos as u64;
        let ad_text = std::str::from_utf8(rd.take(text_len, "AD text")?)
            .map_err(|e| Error::Format {
                offset: text_at,
                detail: format!("AD text is not UTF-8: {e}"),
            })?
            .to_string();
        let payload_len = n
            .checked_mul(channels)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: rd.pos as u64,
                detail: "frame payload size overflows".into(),
            })?;
        let payload = rd.take(payload_len, "frame payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(ClipRecord {
            clip_id,
            movie_id,
            start_ms,
            end_ms,
            frames: Tensor::new(vec![n, channels], data)?,
            ad_text,
        });
    }
    if rd.pos != bytes.len() {
        return Err(Error::Format {
            offset: rd.pos as u64,
            detail: "trailing bytes after last record".into(),
        });
    }
    Corpus::new(channels, records).map_err(|e| Error::Format {
        offset: HEADER_LEN as u64,
        detail: e.to_string(),
    })
}

/// Writes the container and returns the byte count.
pub fn write_container(corpus: &Corpus, path: &Path) -> Result<u64> {
    let bytes = encode_container(corpus);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_container(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_record() -> Corpus {
        let frames = Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-40, -7.25])
            .unwrap();
        Corpus::new(
            3,
            vec![ClipRecord {
                clip_id: 7,
                movie_id: 2,
                start_ms: 1000,
                end_ms: 2500,
                frames,
                ad_text: "Jack opens the door.".into(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn empty_corpus_is_header_only() {
        let c = Corpus::new(4, vec![]).unwrap();
        let bytes = encode_container(&c);
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(decode_container(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn single_record_layout_and_bitwise_round_trip() {
        let c = one_record();
        let bytes = encode_container(&c);
        assert_eq!(bytes.len(), 20 + 32 + 20 + 2 * 3 * 4);
        assert_eq!(&bytes[..4], b"DADF");
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        let back = decode_container(&bytes).unwrap();
        let bits = |c: &Corpus| -> Vec<u32> {
            c.records()[0].frames.data().iter().map(|x| x.to_bits()).collect()
        };
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back.records()[0].ad_text, c.records()[0].ad_text);
        assert_eq!(encode_container(&back), bytes);
    }

    #[test]
    fn corrupted_input_reports_offsets() {
        let mut bytes = encode_container(&one_record());
        let len = bytes.len();
        assert!(matches!(
            decode_container(&bytes[..len - 1]),
            Err(Error::Format { offset: 72, .. })
        ));
        bytes[4] = 9;
        assert!(matches!(decode_container(&bytes), Err(Error::Format { offset: 4, .. })));
        bytes[0] = 0;
        assert!(matches!(decode_container(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
