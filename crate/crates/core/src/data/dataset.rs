use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale images in `[0, 1]` with integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    /// `images` must be `N x H x W`.
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "images must be N x H x W, got {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label,
                classes: num_classes,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    /// Flattened pixels per sample.
    pub fn input_dim(&self) -> usize {
        self.height() * self.width()
    }

    /// New dataset holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Images (`B x H x W`) and labels for a list of sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            message: format!("truncated header, needed 4 bytes at offset {offset}"),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic 0x{magic:08x}, expected 0x{want:08x}"),
        });
    }
    Ok(())
}

/// Reads an IDX image/label file pair (MNIST layout). Pixels are scaled by
/// 1/255; the class count is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_file(ip)?;
    let lab = read_file(lp)?;

    check_magic(&img, IDX_IMAGES_MAGIC, ip)?;
    let n = read_u32(&img, 4, ip)? as usize;
    let h = read_u32(&img, 8, ip)? as usize;
    let w = read_u32(&img, 12, ip)? as usize;
    let need = 16 + n * h * w;
    if img.len() < need {
        return Err(Error::Format {
            path: ip.to_path_buf(),
            offset: img.len() as u64,
            message: format!("truncated pixel data, expected {need} bytes"),
        });
    }

    check_magic(&lab, IDX_LABELS_MAGIC, lp)?;
    let n_labels = read_u32(&lab, 4, lp)? as usize;
    if n_labels != n {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            offset: 4,
            message: format!("{n_labels} labels for {n} images"),
        });
    }
    if lab.len() < 8 + n {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            offset: lab.len() as u64,
            message: format!("truncated label data, expected {} bytes", 8 + n),
        });
    }

    let pixels = img[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(Tensor::new(vec![n, h, w], pixels)?, labels, num_classes)
}

/// Writes a dataset as an IDX pair, quantising pixels to `round(255 v)`.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), ds.height(), ds.width()] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))?;
    Ok(())
}

/// Gaussian blobs around deterministic non-negative unit-norm class
/// centres, shaped `N x 1 x dim` and clamped to `[0, 1]`. Samples are
/// ordered class by class.
pub fn synthesize_blobs(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    synthesize_blobs_split(n_classes, n_per_class, dim, spread, seed, 0)
}

/// Like [`synthesize_blobs`] but draws the noise from split `split`; the
/// class centres depend on `seed` only, so splits share one distribution.
/// Split 0 is identical to `synthesize_blobs`.
pub fn synthesize_blobs_split(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    split: u64,
) -> Result<Dataset> {
    if n_classes == 0 || n_per_class == 0 || dim == 0 {
        return Err(Error::config("blobs", "class count, class size and dimension must be positive"));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::config("blobs.spread", format!("must be >= 0, got {spread}")));
    }
    let root = RngStream::new(seed).for_purpose(Purpose::Blobs);
    let mut data = Vec::with_capacity(n_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for c in 0..n_classes {
        let mut crng = root.derive_all(&[0, c as u64]);
        let raw: Vec<f64> = (0..dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut crng);
                v.abs()
            })
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let center: Vec<f64> = raw.iter().map(|v| v / norm).collect();

        let mut srng = root.derive_all(&[1, split, c as u64]);
        for _ in 0..n_per_class {
            for &m in &center {
                let noise: f64 = StandardNormal.sample(&mut srng);
                data.push((m + spread * noise).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 1, dim], data)?, labels, n_classes)
}

/// Uniform sample without replacement of `round(frac * N)` items, kept in
/// their original order.
pub fn subsample_fraction(ds: &Dataset, frac: f64, seed: u64) -> Result<Dataset> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::config("subsample_frac", format!("must be in (0, 1], got {frac}")));
    }
    let k = (frac * ds.len() as f64).round() as usize;
    if k == 0 {
        return Err(Error::config(
            "subsample_frac",
            format!("fraction {frac} of {} samples is empty", ds.len()),
        ));
    }
    let mut rng = RngStream::new(seed).for_purpose(Purpose::Subsample);
    let mut picked = rng.choose_indices(ds.len(), k);
    picked.sort_unstable();
    Ok(ds.subset(&picked))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, img: &[u8], lab: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn reads_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IDX_IMAGES_MAGIC, &[3, 1, 1]);
        img.extend_from_slice(&[0, 128, 255]);
        let mut lab = header(IDX_LABELS_MAGIC, &[3]);
        lab.extend_from_slice(&[0, 1, 2]);
        let (ip, lp) = fixture(dir.path(), &img, &lab);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images().data(), &[0.0, 128.0 / 255.0, 1.0]);
        assert_eq!(ds.labels(), &[0, 1, 2]);
        assert_eq!(ds.num_classes(), 3);
    }

    #[test]
    fn wrong_label_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IDX_IMAGES_MAGIC, &[1, 1, 1]);
        img.push(5);
        let mut lab = header(IDX_IMAGES_MAGIC, &[1]);
        lab.push(0);
        let (ip, lp) = fixture(dir.path(), &img, &lab);
        match load_idx(&ip, &lp) {
            Err(Error::Format { offset, path, .. }) => {
                assert_eq!(offset, 0);
                assert_eq!(path, lp);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IDX_IMAGES_MAGIC, &[2, 2, 2]);
        img.extend_from_slice(&[1, 2, 3]);
        let mut lab = header(IDX_LABELS_MAGIC, &[2]);
        lab.extend_from_slice(&[0, 1]);
        let (ip, lp) = fixture(dir.path(), &img, &lab);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 19, .. })));

        let mut img = header(IDX_IMAGES_MAGIC, &[2, 1, 1]);
        img.extend_from_slice(&[1, 2]);
        let mut lab = header(IDX_LABELS_MAGIC, &[3]);
        lab.extend_from_slice(&[0, 1, 1]);
        let (ip, lp) = fixture(dir.path(), &img, &lab);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn idx_write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthesize_blobs(3, 4, 5, 0.1, 9).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert!(back.images().max_abs_diff(ds.images()) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn blobs_are_deterministic_and_spread_zero_collapses() {
        assert_eq!(
            synthesize_blobs(3, 5, 4, 0.2, 1).unwrap(),
            synthesize_blobs(3, 5, 4, 0.2, 1).unwrap()
        );
        let ds = synthesize_blobs(2, 6, 8, 0.0, 3).unwrap();
        for c in 0..2 {
            let first = ds.images().row(c * 6).to_vec();
            for i in 0..6 {
                assert_eq!(ds.images().row(c * 6 + i), first.as_slice());
            }
            let norm: f64 = first.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blob_splits_share_centres() {
        let a = synthesize_blobs_split(2, 200, 6, 0.05, 4, 0).unwrap();
        let b = synthesize_blobs_split(2, 200, 6, 0.05, 4, 1).unwrap();
        assert_ne!(a, b);
        let mean = |ds: &Dataset, c: usize| -> Vec<f64> {
            let mut m = vec![0.0; 6];
            for i in 0..200 {
                for (acc, v) in m.iter_mut().zip(ds.images().row(c * 200 + i)) {
                    *acc += v / 200.0;
                }
            }
            m
        };
        for c in 0..2 {
            for (x, y) in mean(&a, c).iter().zip(mean(&b, c)) {
                assert!((x - y).abs() < 0.02);
            }
        }
    }

    #[test]
    fn subsample_sizes() {
        let ds = synthesize_blobs(4, 25, 3, 0.1, 2).unwrap();
        assert_eq!(subsample_fraction(&ds, 0.1, 1).unwrap().len(), 10);
        let full = subsample_fraction(&ds, 1.0, 1).unwrap();
        let mut a = full.labels().to_vec();
        let mut b = ds.labels().to_vec();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert!(subsample_fraction(&ds, 0.0, 1).unwrap_err().is_config());
        assert!(subsample_fraction(&ds, 0.001, 1).unwrap_err().is_config());
        assert_eq!(subsample_fraction(&ds, 0.3, 5).unwrap(), subsample_fraction(&ds, 0.3, 5).unwrap());
    }

    #[test]
    fn dataset_rejects_out_of_range() {
        let imgs = Tensor::new(vec![1, 1, 2], vec![0.5, 1.5]).unwrap();
        assert!(Dataset::new(imgs, vec![0], 1).is_err());
        let imgs = Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(Dataset::new(imgs, vec![2], 2), Err(Error::Label { .. })));
    }
}
