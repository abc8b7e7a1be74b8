//! MNIST ingestion in IDX format and the padded encoding the network consumes.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use thiserror::Error;

use crate::engine::Arithmetic;
use crate::fixedpoint::{FixedFormat, FixedValue};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;
/// Samples per epoch in the reference training protocol.
pub const DEFAULT_EPOCH_SIZE: usize = 12544;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset not found: {0}")]
    NotFound(PathBuf),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an IDX file: expected magic {expected:#010x}, found {found:#010x}")]
    NotIdx { expected: u32, found: u32 },
    #[error("truncated IDX data: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at sample {index} is not a digit class")]
    BadLabel { index: usize, label: u8 },
    #[error("epoch of {wanted} samples requested but dataset has {have}")]
    TooFewSamples { wanted: usize, have: usize },
    #[error("network with {inputs} inputs and {outputs} outputs cannot hold {pixels} pixels and {classes} classes")]
    Shape {
        inputs: usize,
        outputs: usize,
        pixels: usize,
        classes: usize,
    },
}

/// 8-bit grayscale images with digit labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    rows: usize,
    cols: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample<'a> {
    pub index: usize,
    pub pixels: &'a [u8],
    pub label: u8,
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    if !path.exists() {
        return Err(DataError::NotFound(path.to_path_buf()));
    }
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            needed: at + 4,
            have: bytes.len(),
        })
}

/// Parse an image container; returns `(rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::NotIdx {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok((rows, cols, bytes[16..needed].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::NotIdx {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Load an image/label IDX pair. Gzip-compressed files are detected by
/// their header and decompressed transparently.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (rows, cols, pixels) = parse_idx_images(&read_file(images.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(labels.as_ref())?)?;
    Dataset::new(rows, cols, pixels, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(DataError::NotFound(plain))
}

/// Load a split from a directory holding the standard MNIST file names,
/// plain or with a `.gz` suffix.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    let p = split.prefix();
    load_idx(
        locate(dir, &format!("{p}-images-idx3-ubyte"))?,
        locate(dir, &format!("{p}-labels-idx1-ubyte"))?,
    )
}

impl Dataset {
    pub fn new(rows: usize, cols: usize, images: Vec<u8>, labels: Vec<u8>) -> Result<Self, DataError> {
        let per = rows * cols;
        let count = images.len().checked_div(per).unwrap_or(0);
        if per * count != images.len() {
            return Err(DataError::Truncated {
                needed: per * (count + 1),
                have: images.len(),
            });
        }
        if count != labels.len() {
            return Err(DataError::CountMismatch {
                images: count,
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
            return Err(DataError::BadLabel { index, label });
        }
        Ok(Self {
            rows,
            cols,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn sample(&self, index: usize) -> Sample<'_> {
        let per = self.pixels_per_image();
        Sample {
            index,
            pixels: &self.images[index * per..(index + 1) * per],
            label: self.labels[index],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Sample<'_>> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }

    /// The first `n` samples as a new dataset.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            rows: self.rows,
            cols: self.cols,
            images: self.images[..n * self.pixels_per_image()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// The first `epoch_size` samples in natural order, identical every epoch.
pub fn epoch_stream(dataset: &Dataset, epoch_size: usize) -> Result<impl Iterator<Item = Sample<'_>> + '_, DataError> {
    if epoch_size > dataset.len() {
        return Err(DataError::TooFewSamples {
            wanted: epoch_size,
            have: dataset.len(),
        });
    }
    Ok((0..epoch_size).map(move |i| dataset.sample(i)))
}

/// Zero-padded input activations and one-hot ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample<S> {
    pub a0: Vec<S>,
    pub y: Vec<S>,
}

/// Converts pixels to activations `pixel / 256` through a 256-entry table.
#[derive(Debug, Clone)]
pub struct Encoder<S> {
    pixel: Vec<S>,
    zero: S,
    one: S,
    inputs: usize,
    outputs: usize,
}

impl<S: Copy> Encoder<S> {
    pub fn new<A: Arithmetic<Scalar = S>>(
        arith: &A,
        inputs: usize,
        outputs: usize,
        pixels: usize,
    ) -> Result<Self, DataError> {
        if inputs < pixels || outputs < NUM_CLASSES {
            return Err(DataError::Shape {
                inputs,
                outputs,
                pixels,
                classes: NUM_CLASSES,
            });
        }
        Ok(Self {
            pixel: (0..256).map(|p| arith.from_f64(p as f64 / 256.0)).collect(),
            zero: arith.zero(),
            one: arith.from_f64(1.0),
            inputs,
            outputs,
        })
    }

    pub fn encode_into(&self, sample: &Sample<'_>, a0: &mut [S], y: &mut [S]) {
        let n = sample.pixels.len();
        for (dst, &p) in a0[..n].iter_mut().zip(sample.pixels) {
            *dst = self.pixel[p as usize];
        }
        a0[n..].fill(self.zero);
        y.fill(self.zero);
        y[sample.label as usize] = self.one;
    }

    pub fn encode(&self, sample: &Sample<'_>) -> EncodedSample<S> {
        let mut out = EncodedSample {
            a0: vec![self.zero; self.inputs],
            y: vec![self.zero; self.outputs],
        };
        self.encode_into(sample, &mut out.a0, &mut out.y);
        out
    }
}

/// Encode one sample into the 1024-input, 32-output padded layout.
pub fn encode(sample: &Sample<'_>, fmt: FixedFormat) -> EncodedSample<FixedValue> {
    let arith = crate::engine::FixedArith::new(fmt);
    let enc = Encoder::new(&arith, 1024, 32, sample.pixels.len()).expect("MNIST fits the padded layout");
    let raw = enc.encode(sample);
    let wrap = |v: Vec<i32>| v.into_iter().map(|r| fmt.value(r).expect("in range")).collect();
    EncodedSample {
        a0: wrap(raw.a0),
        y: wrap(raw.y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGE_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    pub(crate) fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [LABEL_MAGIC, labels.len() as u32] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parses_headers() {
        let img = idx_images(2, 2, 2, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let (r, c, px) = parse_idx_images(&img).unwrap();
        assert_eq!((r, c, px.len()), (2, 2, 8));
        assert_eq!(parse_idx_labels(&idx_labels(&[3, 9])).unwrap(), vec![3, 9]);
    }

    #[test]
    fn wrong_magic() {
        let err = parse_idx_images(&idx_labels(&[1, 2])).unwrap_err();
        assert!(err.to_string().starts_with("not an IDX file"), "{err}");
    }

    #[test]
    fn truncated() {
        let img = idx_images(2, 2, 2, &[0, 1, 2]);
        assert!(matches!(parse_idx_images(&img), Err(DataError::Truncated { .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn empty_is_fine() {
        let (r, c, px) = parse_idx_images(&idx_images(0, 28, 28, &[])).unwrap();
        let ds = Dataset::new(r, c, px, parse_idx_labels(&idx_labels(&[])).unwrap()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn count_mismatch_and_bad_label() {
        assert!(matches!(
            Dataset::new(1, 1, vec![0, 0], vec![1]),
            Err(DataError::CountMismatch { .. })
        ));
        assert!(matches!(
            Dataset::new(1, 1, vec![0], vec![10]),
            Err(DataError::BadLabel { .. })
        ));
    }

    #[test]
    fn encode_layout() {
        let fmt = FixedFormat::reference_default();
        let mut px = vec![0u8; 784];
        px[0] = 255;
        px[1] = 1;
        let s = Sample {
            index: 0,
            pixels: &px,
            label: 9,
        };
        let e = encode(&s, fmt);
        assert_eq!(e.a0.len(), 1024);
        assert_eq!(e.y.len(), 32);
        assert_eq!(e.a0[0].to_f64(), 0.99609375);
        assert_eq!(e.a0[1].raw(), 1);
        assert!(e.a0[784..].iter().all(|v| v.raw() == 0));
        assert_eq!(e.y[9].to_f64(), 1.0);
        assert_eq!(e.y.iter().filter(|v| v.raw() != 0).count(), 1);

        let zero = vec![0u8; 784];
        let e = encode(
            &Sample {
                index: 0,
                pixels: &zero,
                label: 0,
            },
            fmt,
        );
        assert!(e.a0.iter().all(|v| v.raw() == 0));
        assert_eq!(e.y[0].to_f64(), 1.0);
    }

    #[test]
    fn stream_bounds() {
        let ds = Dataset::new(1, 2, vec![0; 10], vec![0, 1, 2, 3, 4]).unwrap();
        assert_eq!(epoch_stream(&ds, 3).unwrap().count(), 3);
        assert!(epoch_stream(&ds, 6).is_err());
        let a: Vec<_> = epoch_stream(&ds, 5).unwrap().map(|s| s.label).collect();
        let b: Vec<_> = epoch_stream(&ds, 5).unwrap().map(|s| s.label).collect();
        assert_eq!(a, b);
    }
}
