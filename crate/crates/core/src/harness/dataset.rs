//! `GTAD` dataset files.
//!
//! ```text
//! "GTAD" | version u16 | classes u16 | height u32 | width u32
//! then three sections (labeled, unlabeled, held-out), each:
//!   sample count u32, then per sample:
//!     id u32 | hidden-mask flag u8 | image f32 × 3·H·W | mask u8 × H·W
//! ```
//! The hidden flag is set on unlabeled samples: the mask is stored for
//! analysis but must not be used for training.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::synthdata::{DatasetSplit, SegSample};

use super::bytes::{put_f32s, Reader};

pub const DATASET_MAGIC: &[u8; 4] = b"GTAD";
pub const DATASET_VERSION: u16 = 1;

fn dims(split: &DatasetSplit) -> Result<(usize, usize)> {
    let first = split
        .labeled
        .iter()
        .chain(&split.unlabeled)
        .chain(&split.heldout)
        .next()
        .ok_or_else(|| Error::Data("dataset has no samples".into()))?;
    Ok((first.height(), first.width()))
}

pub fn encode_dataset(split: &DatasetSplit) -> Result<Vec<u8>> {
    let (h, w) = dims(split)?;
    if split.classes > u8::MAX as usize + 1 {
        return Err(Error::Data(format!("{} classes do not fit a byte mask", split.classes)));
    }
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(split.classes as u16).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for (section, hidden) in [(&split.labeled, false), (&split.unlabeled, true), (&split.heldout, false)] {
        out.extend_from_slice(&(section.len() as u32).to_le_bytes());
        for s in section {
            if s.image.shape() != [3, h, w] || s.mask.len() != h * w {
                return Err(Error::Data(format!("sample {} does not match {h}x{w}", s.id)));
            }
            out.extend_from_slice(&s.id.to_le_bytes());
            out.push(u8::from(hidden));
            put_f32s(&mut out, s.image.data());
            out.extend(s.mask.iter().map(|&c| c as u8));
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetSplit> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let classes = r.u16("class count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if h == 0 || w == 0 {
        return r.fail("zero image size");
    }
    let mut sections: Vec<Vec<SegSample>> = Vec::with_capacity(3);
    for expect_hidden in [false, true, false] {
        let n = r.u32("sample count")? as usize;
        let mut section = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let id = r.u32("sample id")?;
            let flag_at = r.offset();
            let hidden = r.u8("hidden flag")?;
            if hidden > 1 || (hidden == 1) != expect_hidden {
                return Err(Error::Format {
                    offset: flag_at,
                    message: format!("sample {id} has hidden flag {hidden} in the wrong section"),
                });
            }
            let image = r.f32s(3 * h * w, "image")?;
            let mask_at = r.offset();
            let mask: Vec<u16> = r.take(h * w, "mask")?.iter().map(|&c| c as u16).collect();
            if let Some(bad) = mask.iter().find(|&&c| c as usize >= classes) {
                return Err(Error::Format {
                    offset: mask_at,
                    message: format!("sample {id} has class {bad} but only {classes} classes"),
                });
            }
            section.push(SegSample {
                id,
                image: Tensor::new(vec![3, h, w], image)?,
                mask,
            });
        }
        sections.push(section);
    }
    r.finish()?;
    let heldout = sections.pop().expect("three sections");
    let unlabeled = sections.pop().expect("three sections");
    let labeled = sections.pop().expect("three sections");
    Ok(DatasetSplit {
        classes,
        labeled,
        unlabeled,
        heldout,
    })
}

pub fn save_dataset(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_dataset(split)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
