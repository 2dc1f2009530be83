//! IDX digit files, plain or gzip-compressed.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use protogrid_core::data::DigitPool;

use crate::error::{Error, Result};

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(Error::io(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(Error::io(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], magic: u32, rank: usize) -> Result<Vec<usize>> {
    if bytes.len() < 4 + 4 * rank {
        return Err(Error::format(0, "IDX header truncated"));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != magic {
        return Err(Error::format(0, format!("IDX magic {:#x}, expected {magic:#x}", word(0))));
    }
    let dims: Vec<usize> = (1..=rank).map(|i| word(i) as usize).collect();
    let n: usize = dims.iter().product();
    let start = 4 + 4 * rank;
    if bytes.len() != start + n {
        return Err(Error::format(start, format!("IDX payload holds {} bytes, header says {n}", bytes.len() - start)));
    }
    Ok(dims)
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Usage(format!("no {stem}[.gz] under {}", dir.display())))
}

/// Reads `train-images-idx3-ubyte` and `train-labels-idx1-ubyte` (optionally
/// `.gz`) from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<DigitPool> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Usage(format!("MNIST directory {} does not exist", dir.display())));
    }
    let images = read_maybe_gz(&find(dir, "train-images-idx3-ubyte")?)?;
    let labels = read_maybe_gz(&find(dir, "train-labels-idx1-ubyte")?)?;
    let idims = header(&images, 0x803, 3)?;
    let ldims = header(&labels, 0x801, 1)?;
    if idims[1..] != [28, 28] {
        return Err(Error::format(8, format!("digit images are {}x{}, expected 28x28", idims[1], idims[2])));
    }
    if idims[0] != ldims[0] {
        return Err(Error::format(4, format!("{} images but {} labels", idims[0], ldims[0])));
    }
    Ok(DigitPool::from_flat(&images[16..], &labels[8..])?)
}
