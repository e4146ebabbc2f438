//! Readers for the canonical on-disk archives (IDX for MNIST, the binary
//! record format for CIFAR-10/100).

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array2;

use crate::error::{Error, Result};

/// Images flattened to rows of `channels * height * width` values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImagePool {
    pub inputs: Array2<f32>,
    pub labels: Vec<usize>,
}

impl ImagePool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    let mut buf = Vec::new();
    if gz.exists() {
        GzDecoder::new(BufReader::new(File::open(&gz)?)).read_to_end(&mut buf)?;
    } else if path.exists() {
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    } else {
        return Err(Error::Format(format!("missing archive {} (or .gz)", path.display())));
    }
    Ok(buf)
}

/// Parses an unsigned-byte IDX payload, returning its dimensions and data.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("bad IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!("unsupported IDX element type {:#x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let expected: usize = dims.iter().product();
    let data = &bytes[header..];
    if data.len() != expected {
        return Err(Error::Format(format!("IDX payload has {} bytes, header says {expected}", data.len())));
    }
    Ok((dims, data))
}

fn read_idx_pool(images: &Path, labels: &Path) -> Result<ImagePool> {
    let img_bytes = open_maybe_gz(images)?;
    let (dims, pixels) = parse_idx(&img_bytes)?;
    if dims.len() != 3 {
        return Err(Error::Format(format!("expected 3-d image archive, got {dims:?}")));
    }
    let lab_bytes = open_maybe_gz(labels)?;
    let (ldims, labs) = parse_idx(&lab_bytes)?;
    if ldims.len() != 1 || ldims[0] != dims[0] {
        return Err(Error::Format("label archive does not match image count".into()));
    }
    let row = dims[1] * dims[2];
    let inputs = Array2::from_shape_vec((dims[0], row), pixels.iter().map(|&p| p as f32 / 255.0).collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(ImagePool {
        inputs,
        labels: labs.iter().map(|&l| l as usize).collect(),
    })
}

/// Reads `train-*` and `t10k-*` IDX archives (optionally gzipped) from `dir`.
pub fn read_mnist(dir: &Path) -> Result<(ImagePool, ImagePool)> {
    let train = read_idx_pool(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = read_idx_pool(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Decodes concatenated CIFAR records. `label_bytes` is 1 for CIFAR-10 and 2
/// for CIFAR-100 (coarse, fine). Returns the pool labelled with the last label
/// byte plus the first label byte of every record.
pub fn parse_cifar(bytes: &[u8], label_bytes: usize) -> Result<(ImagePool, Vec<usize>)> {
    let record = label_bytes + CIFAR_PIXELS;
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::Format(format!("CIFAR archive length {} is not a multiple of {record}", bytes.len())));
    }
    let n = bytes.len() / record;
    let mut inputs = Array2::<f32>::zeros((n, CIFAR_PIXELS));
    let mut labels = Vec::with_capacity(n);
    let mut first = Vec::with_capacity(n);
    for (i, chunk) in bytes.chunks_exact(record).enumerate() {
        first.push(chunk[0] as usize);
        labels.push(chunk[label_bytes - 1] as usize);
        for (dst, &src) in inputs.row_mut(i).iter_mut().zip(&chunk[label_bytes..]) {
            *dst = src as f32 / 255.0;
        }
    }
    Ok((ImagePool { inputs, labels }, first))
}

fn concat(pools: Vec<ImagePool>) -> ImagePool {
    let views: Vec<_> = pools.iter().map(|p| p.inputs.view()).collect();
    let inputs = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal row widths");
    let labels = pools.iter().flat_map(|p| p.labels.iter().copied()).collect();
    ImagePool { inputs, labels }
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn read_cifar10(dir: &Path) -> Result<(ImagePool, ImagePool)> {
    let mut train = Vec::new();
    for b in 1..=5 {
        train.push(parse_cifar(&open_maybe_gz(&dir.join(format!("data_batch_{b}.bin")))?, 1)?.0);
    }
    let test = parse_cifar(&open_maybe_gz(&dir.join("test_batch.bin"))?, 1)?.0;
    Ok((concat(train), test))
}

/// Reads `train.bin` and `test.bin` from `dir`; also returns the fine→coarse class table.
pub fn read_cifar100(dir: &Path) -> Result<(ImagePool, ImagePool, Vec<usize>)> {
    let (train, coarse) = parse_cifar(&open_maybe_gz(&dir.join("train.bin"))?, 2)?;
    let (test, _) = parse_cifar(&open_maybe_gz(&dir.join("test.bin"))?, 2)?;
    let mut table = vec![usize::MAX; 100];
    for (&fine, &c) in train.labels.iter().zip(&coarse) {
        if fine >= 100 || c >= 20 {
            return Err(Error::Format(format!("CIFAR-100 label out of range: fine {fine}, coarse {c}")));
        }
        table[fine] = c;
    }
    if table.contains(&usize::MAX) {
        return Err(Error::Format("CIFAR-100 training archive is missing classes".into()));
    }
    Ok((train, test, table))
}
