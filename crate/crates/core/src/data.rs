//! IDX dataset files (MNIST / Fashion-MNIST), raw or gzipped.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::DataError;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxDataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, DataError> {
    let needed = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    let found = word(0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = (0..dims).map(|d| word(4 + 4 * d) as usize).collect();
    let total = needed + shape.iter().product::<usize>();
    if bytes.len() < total {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            needed: total,
            found: bytes.len(),
        });
    }
    Ok(shape)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxDataset, DataError> {
    let img = read_file(images_path)?;
    let shape = header(images_path, &img, IMAGES_MAGIC, 3)?;
    let lab = read_file(labels_path)?;
    let lshape = header(labels_path, &lab, LABELS_MAGIC, 1)?;
    if shape[0] != lshape[0] {
        return Err(DataError::CountMismatch {
            images: shape[0],
            labels: lshape[0],
        });
    }
    let n_img = shape.iter().product::<usize>();
    Ok(IdxDataset {
        images: img[16..16 + n_img].to_vec(),
        labels: lab[8..8 + lshape[0]].to_vec(),
        rows: shape[1],
        cols: shape[2],
    })
}

fn locate(dir: &Path, stem: &str) -> PathBuf {
    let raw = dir.join(stem);
    let gz = dir.join(format!("{stem}.gz"));
    if !raw.exists() && gz.exists() {
        gz
    } else {
        raw
    }
}

/// Loads a split from a directory holding the standard file names
/// (`train-images-idx3-ubyte[.gz]`, `t10k-labels-idx1-ubyte[.gz]`, ...).
pub fn load_split(dir: &Path, split: Split) -> Result<IdxDataset, DataError> {
    let p = split.prefix();
    load_idx(
        &locate(dir, &format!("{p}-images-idx3-ubyte")),
        &locate(dir, &format!("{p}-labels-idx1-ubyte")),
    )
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.pixels_per_image();
        &self.images[i * n..(i + 1) * n]
    }

    /// Pixels of image `i` scaled to `[0, 1]`.
    pub fn normalized(&self, i: usize) -> Vec<f64> {
        crate::encoding::normalize_pixels(self.image(i))
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> IdxDataset {
        let n = n.min(self.len());
        IdxDataset {
            images: self.images[..n * self.pixels_per_image()].to_vec(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn images_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.images.len());
        for w in [IMAGES_MAGIC, self.len() as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out.extend_from_slice(&self.images);
        out
    }

    pub fn labels_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.labels.len());
        for w in [LABELS_MAGIC, self.len() as u32] {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    /// Writes uncompressed IDX files.
    pub fn write(&self, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
        for (path, bytes) in [
            (images_path, self.images_bytes()),
            (labels_path, self.labels_bytes()),
        ] {
            std::fs::write(path, bytes).map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn tiny() -> IdxDataset {
        IdxDataset {
            images: (0..3 * 4).map(|i| (i * 20) as u8).collect(),
            labels: vec![7, 0, 3],
            rows: 2,
            cols: 2,
        }
    }

    #[test]
    fn round_trip_reproduces_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("i"), dir.path().join("l"));
        let d = tiny();
        d.write(&i, &l).unwrap();
        let back = load_idx(&i, &l).unwrap();
        assert_eq!(back, d);
        let (i2, l2) = (dir.path().join("i2"), dir.path().join("l2"));
        back.write(&i2, &l2).unwrap();
        assert_eq!(std::fs::read(&i).unwrap(), std::fs::read(&i2).unwrap());
        assert_eq!(std::fs::read(&l).unwrap(), std::fs::read(&l2).unwrap());
        assert_eq!(back.normalized(0)[1], 20.0 / 255.0);
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny();
        let gz = |bytes: &[u8]| {
            let mut e = GzEncoder::new(Vec::new(), Compression::default());
            e.write_all(bytes).unwrap();
            e.finish().unwrap()
        };
        std::fs::write(dir.path().join("train-images-idx3-ubyte.gz"), gz(&d.images_bytes())).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte.gz"), gz(&d.labels_bytes())).unwrap();
        assert_eq!(load_split(dir.path(), Split::Train).unwrap(), d);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("i"), dir.path().join("l"));
        let d = tiny();
        d.write(&i, &l).unwrap();

        // count mismatch
        let mut fewer = d.clone();
        fewer.labels.pop();
        std::fs::write(&l, fewer.labels_bytes()).unwrap();
        assert!(matches!(
            load_idx(&i, &l),
            Err(DataError::CountMismatch { images: 3, labels: 2 })
        ));

        // bad magic: labels file given as images
        assert!(matches!(load_idx(&l, &l), Err(DataError::BadMagic { .. })));

        // truncation
        let bytes = d.images_bytes();
        std::fs::write(&i, &bytes[..bytes.len() - 1]).unwrap();
        std::fs::write(&l, d.labels_bytes()).unwrap();
        assert!(matches!(load_idx(&i, &l), Err(DataError::Truncated { .. })));
        std::fs::write(&i, &bytes[..2]).unwrap();
        assert!(matches!(load_idx(&i, &l), Err(DataError::Truncated { .. })));

        assert!(matches!(
            load_idx(&dir.path().join("missing"), &l),
            Err(DataError::Io { .. })
        ));
    }
}
