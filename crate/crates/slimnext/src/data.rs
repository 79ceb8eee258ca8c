//! CIFAR-10 binary ingestion, normalization, deterministic batching, and
//! synthetic datasets for tests.

use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// One record: a label byte followed by the R, G, B planes.
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
/// 3 channels x 32 x 32 pixels.
pub const IMAGE_BYTES: usize = 3 * 32 * 32;

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// An in-memory image classification dataset. Images are stored as raw
/// bytes in channel-planar order, one `IMAGE_BYTES` stretch per record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_BYTES {
            return Err(Error::Data(format!(
                "{} labels but {} image bytes (expected {})",
                labels.len(),
                images.len(),
                labels.len() * IMAGE_BYTES
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {bad} out of range 0..{NUM_CLASSES}")));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }
}

/// Parse one CIFAR-10 binary batch file into (image bytes, labels).
pub fn read_batch_file(path: impl AsRef<Path>) -> Result<(Vec<u8>, Vec<u8>)> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Data(format!(
            "{}: {} bytes is not a whole number of {RECORD_BYTES}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut images = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(RECORD_BYTES) {
        let label = record[0];
        if label as usize >= NUM_CLASSES {
            return Err(Error::Data(format!(
                "{}: label {label} out of range 0..{NUM_CLASSES}",
                path.display()
            )));
        }
        labels.push(label);
        images.extend_from_slice(&record[1..]);
    }
    Ok((images, labels))
}

/// Load the six standard binary batches from `dir`: data_batch_1..5.bin
/// for training and test_batch.bin for test.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let (images, labels) = read_batch_file(dir.join(format!("data_batch_{i}.bin")))?;
        train_images.extend_from_slice(&images);
        train_labels.extend_from_slice(&labels);
    }
    if train_labels.len() != 50_000 {
        return Err(Error::Data(format!(
            "{}: training batches hold {} records, expected 50000",
            dir.display(),
            train_labels.len()
        )));
    }
    let (test_images, test_labels) = read_batch_file(dir.join("test_batch.bin"))?;
    if test_labels.len() != 10_000 {
        return Err(Error::Data(format!(
            "{}: test batch holds {} records, expected 10000",
            dir.display(),
            test_labels.len()
        )));
    }
    Ok((
        Dataset::new(train_images, train_labels, Split::Train)?,
        Dataset::new(test_images, test_labels, Split::Test)?,
    ))
}

/// Per-channel standardization constants applied after scaling into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormalizeStats {
    /// The widely used CIFAR-10 training-set statistics.
    pub const fn cifar10() -> Self {
        NormalizeStats { mean: [0.4914, 0.4822, 0.4465], std: [0.2470, 0.2435, 0.2616] }
    }
}

impl Default for NormalizeStats {
    fn default() -> Self {
        Self::cifar10()
    }
}

/// Scale raw image bytes into [0, 1] and standardize each channel. The map
/// is affine per channel, so it is invertible on the representable range.
pub fn normalize(images: &[u8], stats: &NormalizeStats) -> Result<Tensor> {
    if images.len() % IMAGE_BYTES != 0 {
        return Err(Error::Shape(format!(
            "{} bytes is not a whole number of {IMAGE_BYTES}-byte images",
            images.len()
        )));
    }
    let n = images.len() / IMAGE_BYTES;
    let mut data = Vec::with_capacity(images.len());
    for image in images.chunks_exact(IMAGE_BYTES) {
        for c in 0..3 {
            let (mean, std) = (stats.mean[c], stats.std[c]);
            for &px in &image[c * 1024..(c + 1) * 1024] {
                data.push((px as f32 / 255.0 - mean) / std);
            }
        }
    }
    Tensor::from_vec(&[n, 3, 32, 32], data)
}

/// The index order `batches` visits for a given seed.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    order
}

pub struct Batch {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let mut images = Vec::with_capacity((end - self.pos) * IMAGE_BYTES);
        let mut labels = Vec::with_capacity(end - self.pos);
        for &i in &self.order[self.pos..end] {
            images.extend_from_slice(self.ds.image(i));
            labels.push(self.ds.labels[i]);
        }
        self.pos = end;
        Some(Batch { images, labels })
    }
}

/// Iterate the dataset in a seed-determined order; the last batch may be
/// smaller than `batch_size`.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch_size must be at least 1".into()));
    }
    Ok(Batches { ds, order: permutation(ds.len(), shuffle_seed), batch_size, pos: 0 })
}

fn hflip(image: &mut [u8]) {
    for plane in image.chunks_exact_mut(1024) {
        for row in plane.chunks_exact_mut(32) {
            row.reverse();
        }
    }
}

/// Zero-pad by `PAD` pixels on every side and cut a 32x32 window at
/// (dy, dx); (PAD, PAD) reproduces the input.
fn pad_crop(image: &[u8], dy: usize, dx: usize) -> Vec<u8> {
    const PAD: usize = 4;
    let mut out = vec![0u8; IMAGE_BYTES];
    for c in 0..3 {
        for y in 0..32 {
            let src_y = y + dy;
            if !(PAD..32 + PAD).contains(&src_y) {
                continue;
            }
            for x in 0..32 {
                let src_x = x + dx;
                if (PAD..32 + PAD).contains(&src_x) {
                    out[c * 1024 + y * 32 + x] = image[c * 1024 + (src_y - PAD) * 32 + (src_x - PAD)];
                }
            }
        }
    }
    out
}

/// Random 4-pixel pad-and-crop followed by a coin-flip horizontal mirror,
/// applied independently per image.
pub fn augment(images: &[u8], rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    if images.len() % IMAGE_BYTES != 0 {
        return Err(Error::Shape(format!(
            "{} bytes is not a whole number of {IMAGE_BYTES}-byte images",
            images.len()
        )));
    }
    let mut out = Vec::with_capacity(images.len());
    for image in images.chunks_exact(IMAGE_BYTES) {
        let dy = rng.gen_range(0..9);
        let dx = rng.gen_range(0..9);
        let flip = rng.gen_bool(0.5);
        let mut cropped = pad_crop(image, dy, dx);
        if flip {
            hflip(&mut cropped);
        }
        out.extend_from_slice(&cropped);
    }
    Ok(out)
}

fn class_color(label: u8) -> [i32; 3] {
    let c = label as i32;
    [(40 + 53 * c) % 200 + 28, (60 + 97 * c) % 200 + 28, (90 + 31 * c) % 200 + 28]
}

/// Deterministic test fixture: each record is a colored blob on a noise
/// background, with the blob color fixed by the class. Labels cycle
/// through the classes, so the dataset is balanced up to remainder.
pub fn synthetic(n: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || num_classes > NUM_CLASSES {
        return Err(Error::Usage(format!(
            "num_classes must be in 1..={NUM_CLASSES}, got {num_classes}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut images = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    let mut image = vec![0u8; IMAGE_BYTES];
    for i in 0..n {
        let label = (i % num_classes) as u8;
        let base = class_color(label);
        let cy: i32 = rng.gen_range(10..22);
        let cx: i32 = rng.gen_range(10..22);
        let r2 = {
            let r: i32 = rng.gen_range(6..12);
            r * r
        };
        for y in 0..32i32 {
            for x in 0..32i32 {
                let inside = (y - cy).pow(2) + (x - cx).pow(2) <= r2;
                for c in 0..3 {
                    let px = if inside {
                        (base[c] + rng.gen_range(-25..=25)).clamp(0, 255) as u8
                    } else {
                        rng.gen_range(0..=255u8)
                    };
                    image[c * 1024 + (y * 32 + x) as usize] = px;
                }
            }
        }
        images.extend_from_slice(&image);
        labels.push(label);
    }
    Dataset::new(images, labels, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn ramp_record(label: u8) -> Vec<u8> {
        let mut record = vec![label];
        record.extend((0..IMAGE_BYTES).map(|i| (i % 256) as u8));
        record
    }

    #[test]
    fn record_parsing_is_byte_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let record = ramp_record(7);
        std::fs::write(&path, &record).unwrap();
        let (images, labels) = read_batch_file(&path).unwrap();
        assert_eq!(labels, vec![7]);
        assert_eq!(images[0], 0);
        assert_eq!(images[1], 1);
        assert_eq!(images, record[1..]);
    }

    #[test]
    fn truncated_and_missing_files_name_the_path() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = ramp_record(3);
        bytes.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&path, &bytes).unwrap();
        match read_batch_file(&path) {
            Err(Error::Data(msg)) => assert!(msg.contains("bad.bin")),
            other => panic!("expected a data error, got {other:?}"),
        }
        match read_batch_file(dir.path().join("absent.bin")) {
            Err(Error::Io(p, _)) => assert!(p.contains("absent.bin")),
            other => panic!("expected an io error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("label.bin");
        std::fs::write(&path, ramp_record(12)).unwrap();
        assert!(matches!(read_batch_file(&path), Err(Error::Data(_))));
    }

    fn write_standard_layout(dir: &Path) {
        let mut record = ramp_record(0);
        for i in 1..=5 {
            let mut bytes = Vec::with_capacity(10_000 * RECORD_BYTES);
            for j in 0..10_000u32 {
                record[0] = (j % 10) as u8;
                record[1] = i as u8;
                bytes.extend_from_slice(&record);
            }
            std::fs::write(dir.join(format!("data_batch_{i}.bin")), &bytes).unwrap();
        }
        let mut bytes = Vec::with_capacity(10_000 * RECORD_BYTES);
        for j in 0..10_000u32 {
            record[0] = (j % 10) as u8;
            record[1] = 99;
            bytes.extend_from_slice(&record);
        }
        std::fs::write(dir.join("test_batch.bin"), &bytes).unwrap();
    }

    #[test]
    fn standard_layout_loads_the_documented_split_sizes() {
        let dir = tempdir().unwrap();
        write_standard_layout(dir.path());
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(test.len(), 10_000);
        assert_eq!(train.split, Split::Train);
        assert_eq!(test.split, Split::Test);
        assert_eq!(train.image(0)[0], 1);
        assert_eq!(train.image(49_999)[0], 5);
        assert_eq!(test.image(123)[0], 99);
        assert_eq!(train.labels[3], 3);
    }

    #[test]
    fn a_wrong_record_total_is_rejected() {
        let dir = tempdir().unwrap();
        write_standard_layout(dir.path());
        let short: Vec<u8> = ramp_record(1).repeat(9_999);
        std::fs::write(dir.path().join("data_batch_2.bin"), &short).unwrap();
        match load_cifar10(dir.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("50000")),
            other => panic!("expected a data error, got {other:?}"),
        }
    }

    #[test]
    fn normalization_maps_the_endpoints_as_documented() {
        let stats = NormalizeStats::cifar10();
        let zeros = vec![0u8; IMAGE_BYTES];
        let t = normalize(&zeros, &stats).unwrap();
        assert_eq!(t.shape(), [1, 3, 32, 32]);
        let data = t.f32s().unwrap();
        for c in 0..3 {
            let expect = (0.0 - stats.mean[c]) / stats.std[c];
            assert_eq!(data[c * 1024], expect);
        }
        let maxed = vec![255u8; IMAGE_BYTES];
        let t = normalize(&maxed, &stats).unwrap();
        let data = t.f32s().unwrap();
        for c in 0..3 {
            let expect = (1.0 - stats.mean[c]) / stats.std[c];
            assert_eq!(data[c * 1024 + 37], expect);
        }
    }

    #[test]
    fn normalization_is_invertible_on_the_byte_range() {
        let mut rng = seeded_rng(80);
        let images: Vec<u8> = (0..2 * IMAGE_BYTES).map(|_| rng.gen()).collect();
        let stats = NormalizeStats::cifar10();
        let t = normalize(&images, &stats).unwrap();
        let data = t.f32s().unwrap();
        for (i, &px) in images.iter().enumerate() {
            let c = (i % IMAGE_BYTES) / 1024;
            let back = (data[i] * stats.std[c] + stats.mean[c]) * 255.0;
            assert_eq!(back.round() as u8, px);
        }
    }

    #[test]
    fn batches_visit_the_seeded_permutation_exactly_once() {
        let ds = synthetic(10, 3, 81).unwrap();
        let order = permutation(10, 7);
        let collected: Vec<Batch> = batches(&ds, 4, 7).unwrap().collect();
        assert_eq!(collected.iter().map(|b| b.labels.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut seen_images = Vec::new();
        let mut seen_labels = Vec::new();
        for b in &collected {
            seen_images.extend_from_slice(&b.images);
            seen_labels.extend_from_slice(&b.labels);
        }
        let mut expect_images = Vec::new();
        let mut expect_labels = Vec::new();
        for &i in &order {
            expect_images.extend_from_slice(ds.image(i));
            expect_labels.push(ds.labels[i]);
        }
        assert_eq!(seen_images, expect_images);
        assert_eq!(seen_labels, expect_labels);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn seeds_pin_and_distinguish_batch_orders() {
        let ds = synthetic(1000, 10, 82).unwrap();
        let a: Vec<u8> = batches(&ds, 64, 5).unwrap().flat_map(|b| b.labels).collect();
        let b: Vec<u8> = batches(&ds, 64, 5).unwrap().flat_map(|b| b.labels).collect();
        assert_eq!(a, b);
        let c: Vec<u8> = batches(&ds, 64, 6).unwrap().flat_map(|b| b.labels).collect();
        assert_ne!(a, c);
        assert!(matches!(batches(&ds, 0, 5), Err(Error::Usage(_))));
    }

    #[test]
    fn synthetic_is_sized_balanced_and_reproducible() {
        let a = synthetic(100, 4, 83).unwrap();
        assert_eq!(a.len(), 100);
        for class in 0..4u8 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 25);
        }
        let b = synthetic(100, 4, 83).unwrap();
        assert_eq!(a, b);
        let c = synthetic(100, 4, 84).unwrap();
        assert_ne!(a.images, c.images);
        assert!(matches!(synthetic(10, 0, 0), Err(Error::Usage(_))));
        assert!(matches!(synthetic(10, 11, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn pad_crop_center_is_the_identity() {
        let image: Vec<u8> = (0..IMAGE_BYTES).map(|i| (i % 251) as u8).collect();
        assert_eq!(pad_crop(&image, 4, 4), image);
        let shifted = pad_crop(&image, 0, 0);
        assert_eq!(&shifted[0..32 * 4], &[0u8; 128][..]);
        assert_eq!(shifted[4 * 32 + 4], image[0]);
    }

    #[test]
    fn hflip_reverses_rows_in_place() {
        let mut image: Vec<u8> = (0..IMAGE_BYTES).map(|i| (i % 251) as u8).collect();
        let original = image.clone();
        hflip(&mut image);
        for c in 0..3 {
            for y in 0..32 {
                let row = c * 1024 + y * 32;
                for x in 0..32 {
                    assert_eq!(image[row + x], original[row + 31 - x]);
                }
            }
        }
        hflip(&mut image);
        assert_eq!(image, original);
    }

    #[test]
    fn augment_is_seed_deterministic_and_shape_preserving() {
        let ds = synthetic(20, 5, 85).unwrap();
        let a = augment(&ds.images, &mut seeded_rng(1)).unwrap();
        let b = augment(&ds.images, &mut seeded_rng(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), ds.images.len());
        let c = augment(&ds.images, &mut seeded_rng(2)).unwrap();
        assert_ne!(a, c);
        assert_ne!(a, ds.images);
    }
}
