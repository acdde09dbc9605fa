//! MNIST IDX reader: big-endian magic word, big-endian dimension sizes,
//! then raw unsigned bytes.

use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::format(self.path, self.pos as u64, "truncated header"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
    }

    fn expect_magic(&mut self, magic: u32) -> Result<()> {
        let at = self.pos;
        let found = self.u32()?;
        if found != magic {
            return Err(Error::format(
                self.path,
                at as u64,
                format!("bad magic {found:#010x}, expected {magic:#010x}"),
            ));
        }
        Ok(())
    }

    fn body(&self, len: usize) -> Result<&'a [u8]> {
        self.bytes.get(self.pos..self.pos + len).ok_or_else(|| {
            Error::format(
                self.path,
                self.bytes.len() as u64,
                format!("truncated body: need {len} bytes from offset {}", self.pos),
            )
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads at most `limit` samples (file order) from an image/label IDX pair.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;

    let mut images = Reader { path: images_path, bytes: &image_bytes, pos: 0 };
    images.expect_magic(IMAGES_MAGIC)?;
    let n_images = images.u32()? as usize;
    let rows = images.u32()? as usize;
    let cols = images.u32()? as usize;

    let mut labels = Reader { path: labels_path, bytes: &label_bytes, pos: 0 };
    labels.expect_magic(LABELS_MAGIC)?;
    let n_labels = labels.u32()? as usize;

    if n_images != n_labels {
        return Err(Error::format(
            labels_path,
            4,
            format!("label count {n_labels} does not match image count {n_images}"),
        ));
    }

    let n = limit.map_or(n_images, |l| l.min(n_images));
    let dim = rows * cols;
    let pixels = images.body(n * dim)?;
    let label_body = labels.body(n)?;

    let mut samples = Vec::with_capacity(n);
    for (i, &label) in label_body.iter().enumerate() {
        if label > 9 {
            return Err(Error::format(
                labels_path,
                (labels.pos + i) as u64,
                format!("label {label} outside 0..=9"),
            ));
        }
        let features = pixels[i * dim..(i + 1) * dim]
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect();
        samples.push(Sample {
            features,
            label: usize::from(label),
        });
    }
    Ok(Dataset {
        samples,
        dim,
        num_classes: 10,
    })
}
