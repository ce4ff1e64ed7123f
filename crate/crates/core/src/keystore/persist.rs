//! Append-only block files: one record per block, laid out as an 8-byte
//! big-endian block id, a 4-byte big-endian bit length, the packed bits and
//! a 16-byte integrity tag over the preceding fields.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::bits::BitString;
use crate::crypto::{self, TAG_LEN};
use crate::{Error, Result};

fn record_tag(key: &[u8], block_id: u64, bits: &BitString, packed: &[u8]) -> [u8; TAG_LEN] {
    crypto::tag128(
        key,
        &[&block_id.to_be_bytes(), &(bits.len() as u32).to_be_bytes(), packed],
    )
}

pub fn write_block_record<W: Write>(w: &mut W, key: &[u8], block_id: u64, bits: &BitString) -> Result<()> {
    let len = u32::try_from(bits.len())
        .map_err(|_| Error::InvalidParameter("block too long for a 32-bit length".into()))?;
    let packed = bits.to_packed();
    w.write_all(&block_id.to_be_bytes())?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&packed)?;
    w.write_all(&record_tag(key, block_id, bits, &packed))?;
    Ok(())
}

/// Reads and verifies every record of a block file.
pub fn read_block_file(path: &Path, key: &[u8]) -> Result<Vec<(u64, BitString)>> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    let mut out = Vec::new();
    let mut rest = data.as_slice();
    while !rest.is_empty() {
        if rest.len() < 12 {
            return Err(Error::Protocol("truncated block record header".into()));
        }
        let block_id = u64::from_be_bytes(rest[..8].try_into().unwrap());
        let len = u32::from_be_bytes(rest[8..12].try_into().unwrap()) as usize;
        let packed_len = len.div_ceil(8);
        if rest.len() < 12 + packed_len + TAG_LEN {
            return Err(Error::Protocol(format!("truncated block record {block_id}")));
        }
        let packed = &rest[12..12 + packed_len];
        let tag = &rest[12 + packed_len..12 + packed_len + TAG_LEN];
        let bits = BitString::from_packed(packed, len).expect("length checked");
        if !crypto::tags_equal(tag, &record_tag(key, block_id, &bits, packed)) {
            return Err(Error::Protocol(format!("integrity tag mismatch on block {block_id}")));
        }
        out.push((block_id, bits));
        rest = &rest[12 + packed_len + TAG_LEN..];
    }
    Ok(out)
}

pub struct BlockFileWriter {
    out: BufWriter<File>,
    key: Vec<u8>,
}

impl BlockFileWriter {
    pub fn open(path: &Path, key: &[u8]) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
            key: key.to_vec(),
        })
    }

    pub fn append(&mut self, block_id: u64, bits: &BitString) -> Result<()> {
        write_block_record(&mut self.out, &self.key, block_id, bits)?;
        self.out.flush()?;
        Ok(())
    }
}
