//! Bit-exact IDX file I/O. Images use the big-endian magic 0x00000803 with
//! (count, height, width) headers and unsigned bytes scaled to [0, 1];
//! labels use 0x00000801. RGB sets are stored with the natural 4-D
//! extension 0x00000804 and (count, channels, height, width) headers.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use thiserror::Error;

use super::LabeledImageSet;

pub const MAGIC_IMAGES: u32 = 0x0000_0803;
pub const MAGIC_IMAGES_4D: u32 = 0x0000_0804;
pub const MAGIC_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("truncated {path}: payload for header field `{field}` missing")]
    Truncated { path: String, field: &'static str },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: channel count {channels} unsupported (expected 1 or 3)")]
    BadChannels { path: String, channels: usize },
}

type Result<T> = std::result::Result<T, IdxError>;

fn io_err(path: &Path, source: io::Error) -> IdxError {
    IdxError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    cur: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn u32be(&mut self, field: &'static str) -> Result<u32> {
        if self.cur + 4 > self.bytes.len() {
            return Err(IdxError::Truncated {
                path: self.path.clone(),
                field,
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.cur..self.cur + 4].try_into().unwrap());
        self.cur += 4;
        Ok(v)
    }

    fn payload(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.cur + n > self.bytes.len() {
            return Err(IdxError::Truncated {
                path: self.path.clone(),
                field,
            });
        }
        let s = &self.bytes[self.cur..self.cur + n];
        self.cur += n;
        Ok(s)
    }
}

/// Parse an IDX image/label pair into a dataset; the two counts must agree.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let img_bytes = read_all(images_path)?;
    let mut r = Reader {
        bytes: &img_bytes,
        cur: 0,
        path: images_path.display().to_string(),
    };
    let magic = r.u32be("magic")?;
    let (count, channels, height, width) = match magic {
        MAGIC_IMAGES => {
            let n = r.u32be("count")? as usize;
            let h = r.u32be("height")? as usize;
            let w = r.u32be("width")? as usize;
            (n, 1usize, h, w)
        }
        MAGIC_IMAGES_4D => {
            let n = r.u32be("count")? as usize;
            let c = r.u32be("channels")? as usize;
            let h = r.u32be("height")? as usize;
            let w = r.u32be("width")? as usize;
            if c != 1 && c != 3 {
                return Err(IdxError::BadChannels {
                    path: images_path.display().to_string(),
                    channels: c,
                });
            }
            (n, c, h, w)
        }
        found => {
            return Err(IdxError::BadMagic {
                path: images_path.display().to_string(),
                expected: MAGIC_IMAGES,
                found,
            })
        }
    };
    let payload = r.payload(count * channels * height * width, "pixels")?;
    let images: Vec<f64> = payload.iter().map(|b| *b as f64 / 255.0).collect();

    let lbl_bytes = read_all(labels_path)?;
    let mut r = Reader {
        bytes: &lbl_bytes,
        cur: 0,
        path: labels_path.display().to_string(),
    };
    let magic = r.u32be("magic")?;
    if magic != MAGIC_LABELS {
        return Err(IdxError::BadMagic {
            path: labels_path.display().to_string(),
            expected: MAGIC_LABELS,
            found: magic,
        });
    }
    let label_count = r.u32be("count")? as usize;
    if label_count != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let labels: Vec<usize> = r
        .payload(label_count, "labels")?
        .iter()
        .map(|b| *b as usize)
        .collect();

    Ok(LabeledImageSet {
        channels,
        height,
        width,
        images,
        labels,
        gt_params: None,
        source_indices: None,
    })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    Ok(bytes)
}

/// Serialize the image payload; pixel values are rounded onto the 8-bit grid.
pub fn images_to_idx_bytes(set: &LabeledImageSet) -> Vec<u8> {
    let mut out = Vec::new();
    if set.channels == 1 {
        out.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        out.extend_from_slice(&(set.len() as u32).to_be_bytes());
        out.extend_from_slice(&(set.height as u32).to_be_bytes());
        out.extend_from_slice(&(set.width as u32).to_be_bytes());
    } else {
        out.extend_from_slice(&MAGIC_IMAGES_4D.to_be_bytes());
        out.extend_from_slice(&(set.len() as u32).to_be_bytes());
        out.extend_from_slice(&(set.channels as u32).to_be_bytes());
        out.extend_from_slice(&(set.height as u32).to_be_bytes());
        out.extend_from_slice(&(set.width as u32).to_be_bytes());
    }
    out.extend(set.images.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn labels_to_idx_bytes(set: &LabeledImageSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend(set.labels.iter().map(|l| *l as u8));
    out
}

pub fn write_idx(set: &LabeledImageSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::write(images_path, images_to_idx_bytes(set)).map_err(|e| io_err(images_path, e))?;
    fs::write(labels_path, labels_to_idx_bytes(set)).map_err(|e| io_err(labels_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-built two-image 4x4 fixture: image 0 all zeros except one 255
    /// pixel, image 1 all 255.
    pub fn tiny_fixture_bytes() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&4u32.to_be_bytes());
        images.extend_from_slice(&4u32.to_be_bytes());
        let mut img0 = [0u8; 16];
        img0[5] = 255;
        images.extend_from_slice(&img0);
        images.extend_from_slice(&[255u8; 16]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[7u8, 1u8]);
        (images, labels)
    }

    #[test]
    fn parses_hand_built_fixture_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, lb) = tiny_fixture_bytes();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        std::fs::write(&ip, &ib).unwrap();
        std::fs::write(&lp, &lb).unwrap();
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!((set.len(), set.height, set.width, set.channels), (2, 4, 4, 1));
        assert_eq!(set.labels, vec![7, 1]);
        assert_eq!(set.image(0)[5], 1.0);
        assert_eq!(set.image(0)[0], 0.0);
        assert!(set.image(1).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn label_magic_on_image_path_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, lb) = tiny_fixture_bytes();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        std::fs::write(&ip, &lb).unwrap();
        std::fs::write(&lp, &ib).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        match err {
            IdxError::BadMagic { expected, found, .. } => {
                assert_eq!(expected, MAGIC_IMAGES);
                assert_eq!(found, MAGIC_LABELS);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_payload_with_zero_count_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        let mut images = Vec::new();
        images.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        images.extend_from_slice(&0u32.to_be_bytes());
        images.extend_from_slice(&4u32.to_be_bytes());
        images.extend_from_slice(&4u32.to_be_bytes());
        let mut labels = Vec::new();
        labels.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
        labels.extend_from_slice(&0u32.to_be_bytes());
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        let set = load_idx(&ip, &lp).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, mut lb) = tiny_fixture_bytes();
        lb[7] = 3; // count 3 vs 2 images
        lb.push(0);
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        std::fs::write(&ip, &ib).unwrap();
        std::fs::write(&lp, &lb).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp).unwrap_err(),
            IdxError::CountMismatch { images: 2, labels: 3 }
        ));
    }

    #[test]
    fn truncation_names_the_missing_field() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, lb) = tiny_fixture_bytes();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        std::fs::write(&ip, &ib[..ib.len() - 4]).unwrap();
        std::fs::write(&lp, &lb).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp).unwrap_err(),
            IdxError::Truncated { field: "pixels", .. }
        ));
    }

    #[test]
    fn write_then_load_roundtrips_pixel_bytes() {
        let spec = crate::data::SyntheticSpec {
            classes: 2,
            image_size: 8,
            samples: 6,
            seed: 1,
            color: false,
            params: vec![],
        };
        let set = crate::data::generate_synthetic_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        write_idx(&set, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels, set.labels);
        // Pixels already sit on the 8-bit grid, so the roundtrip is exact.
        assert_eq!(back.images, set.images);
        let again = images_to_idx_bytes(&back);
        assert_eq!(again, images_to_idx_bytes(&set));
    }
}
