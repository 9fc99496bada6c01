//! `EPDS` dataset files.
//!
//! ```text
//! "EPDS"  u32 version=1  u32 count
//! per record: u32 class_id  u16 h  u16 w  u8 channels
//!             f32 × (channels·h·w)   image, channel-major
//!             u8 × (h·w)             mask, 0 or 1
//! ```
//!
//! All integers and floats are little-endian with no padding.

use std::path::Path;

use sdrc_core::episodes::{Dataset, Sample};
use sdrc_core::Tensor;

use crate::binary::{put_f32s, Reader};
use crate::error::{FormatError, Result, SdrcError};

pub const MAGIC: [u8; 4] = *b"EPDS";
pub const VERSION: u32 = 1;

/// Encodes a dataset. Fails on shapes that do not fit the header fields or
/// masks holding anything other than 0 and 1.
pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    let count = u32::try_from(dataset.samples.len()).map_err(|_| SdrcError::Data("too many records".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (i, s) in dataset.samples.iter().enumerate() {
        let bad = |msg: String| SdrcError::Data(format!("record {i}: {msg}"));
        let [c, h, w] = *s.image.dims() else {
            return Err(bad(format!("image must be C×h×w, got {:?}", s.image.dims())));
        };
        if s.mask.dims() != [h, w] {
            return Err(bad(format!("mask {:?} for a {h}×{w} image", s.mask.dims())));
        }
        let (c8, h16, w16) = match (u8::try_from(c), u16::try_from(h), u16::try_from(w)) {
            (Ok(c), Ok(h), Ok(w)) => (c, h, w),
            _ => return Err(bad(format!("dimensions {c}×{h}×{w} exceed the header fields"))),
        };
        out.extend_from_slice(&s.class_id.to_le_bytes());
        out.extend_from_slice(&h16.to_le_bytes());
        out.extend_from_slice(&w16.to_le_bytes());
        out.push(c8);
        put_f32s(&mut out, s.image.data());
        for &m in s.mask.data() {
            if m == 0.0 || m == 1.0 {
                out.push(m as u8);
            } else {
                return Err(bad(format!("mask value {m} is not 0 or 1")));
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.u32("record count")?;
    let mut samples = Vec::with_capacity((count as usize).min(1 << 16));
    for _ in 0..count {
        let class_id = r.u32("record header")?;
        let h = r.u16("record header")? as usize;
        let w = r.u16("record header")? as usize;
        let c = r.u8("record header")? as usize;
        if h == 0 || w == 0 || c == 0 {
            return Err(r.invalid("record header", format!("zero dimension {c}×{h}×{w}")));
        }
        let image = r.f32s(c * h * w, "image")?;
        let mask_offset = r.offset();
        let raw = r.take(h * w, "mask")?;
        let mut mask = Vec::with_capacity(h * w);
        for (k, &m) in raw.iter().enumerate() {
            match m {
                0 | 1 => mask.push(m as f32),
                other => {
                    return Err(FormatError::Invalid {
                        offset: mask_offset + k as u64,
                        what: "mask",
                        detail: format!("value {other} is not 0 or 1"),
                    })
                }
            }
        }
        samples.push(Sample {
            class_id,
            image: Tensor::new([c, h, w], image).expect("sized from header"),
            mask: Tensor::new([h, w], mask).expect("sized from header"),
        });
    }
    r.finish()?;
    Ok(Dataset { samples })
}

pub fn write(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode(dataset)?;
    crate::binary::write_file(path, &bytes)
}

pub fn read(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| SdrcError::io(path, e))?;
    decode(&bytes).map_err(|e| SdrcError::format(path, e))
}
