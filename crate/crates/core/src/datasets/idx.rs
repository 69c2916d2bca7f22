use std::path::Path;

use super::{DatasetError, ImageShape, LabeledDataset};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset, DatasetError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| DatasetError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let images_path = images_path.as_ref();
    let images = read(images_path)?;
    let labels = read(labels_path.as_ref())?;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    parse_idx(&name, &images, &labels)
}

struct Cursor<'a> {
    file: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(DatasetError::Truncated {
                file: self.file.into(),
                needed: self.pos.saturating_add(n),
                found: self.bytes.len(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn be_u32(&mut self) -> Result<u32, DatasetError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<(), DatasetError> {
        let found = self.be_u32()?;
        if found != expected {
            return Err(DatasetError::WrongMagic {
                file: self.file.into(),
                expected,
                found,
            });
        }
        Ok(())
    }
}

/// Decode an IDX image/label file pair. Pixels are scaled to `[0, 1]`; labels
/// are re-indexed densely in ascending order of their byte value.
pub fn parse_idx(name: &str, images: &[u8], labels: &[u8]) -> Result<LabeledDataset, DatasetError> {
    let mut img = Cursor {
        file: "images",
        bytes: images,
        pos: 0,
    };
    img.magic(IDX_IMAGES_MAGIC)?;
    let count = img.be_u32()? as usize;
    let rows = img.be_u32()? as usize;
    let cols = img.be_u32()? as usize;

    let mut lab = Cursor {
        file: "labels",
        bytes: labels,
        pos: 0,
    };
    lab.magic(IDX_LABELS_MAGIC)?;
    let label_count = lab.be_u32()? as usize;
    if label_count != count {
        return Err(DatasetError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(DatasetError::Invalid("IDX file holds no pixels".into()));
    }

    let pixels = img.take(count * rows * cols)?;
    let raw_labels = lab.take(count)?;

    let mut present = [false; 256];
    raw_labels.iter().for_each(|&l| present[l as usize] = true);
    let mut dense = [0usize; 256];
    let mut k = 0;
    for (byte, &p) in present.iter().enumerate() {
        if p {
            dense[byte] = k;
            k += 1;
        }
    }

    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = raw_labels.iter().map(|&l| dense[l as usize]).collect();
    LabeledDataset::new(name, rows * cols, k, features, labels)?.with_image_shape(ImageShape {
        channels: 1,
        height: rows,
        width: cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(count: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        b.extend(count.to_be_bytes());
        b.extend(2u32.to_be_bytes());
        b.extend(2u32.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn labels(values: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend((values.len() as u32).to_be_bytes());
        b.extend_from_slice(values);
        b
    }

    #[test]
    fn two_handcrafted_images() {
        // Bytes written out from the format definition.
        let img = [
            0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, //
            0, 255, 51, 102, //
            255, 0, 0, 204,
        ];
        let lab = [0x00, 0x00, 0x08, 0x01, 0, 0, 0, 2, 0, 1];
        let ds = parse_idx("hand", &img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.labels(), &[0, 1]);
        assert_eq!(ds.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.row(1), &[1.0, 0.0, 0.0, 0.8]);
        assert_eq!(
            ds.image_shape(),
            Some(ImageShape {
                channels: 1,
                height: 2,
                width: 2
            })
        );
    }

    #[test]
    fn empty_file_is_truncated() {
        assert!(matches!(
            parse_idx("e", &[], &labels(&[0])),
            Err(DatasetError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx("e", &images(1, &[0; 4]), &[]),
            Err(DatasetError::Truncated { .. })
        ));
    }

    #[test]
    fn short_pixel_block_is_truncated() {
        assert!(matches!(
            parse_idx("e", &images(2, &[0; 5]), &labels(&[0, 1])),
            Err(DatasetError::Truncated { .. })
        ));
    }

    #[test]
    fn count_mismatch() {
        assert!(matches!(
            parse_idx("m", &images(2, &[0; 8]), &labels(&[0, 1, 1])),
            Err(DatasetError::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn wrong_magic() {
        let mut img = images(1, &[0; 4]);
        img[3] = 0x01;
        assert!(matches!(
            parse_idx("w", &img, &labels(&[0])),
            Err(DatasetError::WrongMagic { found: 0x801, .. })
        ));
        assert!(matches!(
            parse_idx("w", &images(1, &[0; 4]), &images(1, &[0; 4])),
            Err(DatasetError::WrongMagic { .. })
        ));
    }

    #[test]
    fn sparse_labels_are_reindexed() {
        let ds = parse_idx("s", &images(3, &[0; 12]), &labels(&[7, 3, 7])).unwrap();
        assert_eq!(ds.labels(), &[1, 0, 1]);
        assert_eq!(ds.num_classes(), 2);
    }
}
