//! Datasets: IDX (MNIST/FMNIST) ingestion, synthetic Gaussian blobs, and
//! class-stratified minibatching.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_UBYTE: u8 = 0x08;

/// Raw IDX array with an unsigned-byte payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        (u32::from(IDX_UBYTE) << 8) | self.dims.len() as u32
    }

    /// Parses an uncompressed IDX buffer (big-endian header).
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, message: String| Error::Parse { offset, message };
        if bytes.len() < 4 {
            return Err(err(0, "truncated IDX magic".into()));
        }
        if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_UBYTE || bytes[3] == 0 {
            return Err(err(
                0,
                format!(
                    "bad IDX magic 0x{:08x} (expected unsigned-byte data)",
                    u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"))
                ),
            ));
        }
        let ndim = usize::from(bytes[3]);
        let header_end = 4 + 4 * ndim;
        if bytes.len() < header_end {
            return Err(err(bytes.len(), format!("truncated IDX header ({ndim} dimensions)")));
        }
        let dims: Vec<u32> = (0..ndim)
            .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")))
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| err(4, "IDX dimensions overflow".into()))?;
        let payload = &bytes[header_end..];
        if payload.len() < count {
            return Err(err(
                bytes.len(),
                format!("truncated IDX payload: expected {count} bytes, found {}", payload.len()),
            ));
        }
        if payload.len() > count {
            return Err(err(header_end + count, "trailing bytes after IDX payload".into()));
        }
        Ok(Self {
            dims,
            data: payload.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse {
                offset: 0,
                message: format!("invalid gzip stream in {}: {e}", path.display()),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Provenance {
    Idx {
        images_sha256: String,
        labels_sha256: String,
    },
    Blobs {
        seed: u64,
    },
    Memory,
}

/// Images (`count × n`, values in `[0,1]`) with labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let d = Self {
            images,
            labels,
            classes,
            split,
            provenance: Provenance::Memory,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.rank() != 2 || self.images.rows() != self.labels.len() {
            return Err(Error::Data(format!(
                "image count {} does not match label count {}",
                self.images.rows(),
                self.labels.len()
            )));
        }
        if let Some(v) = self.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Data(format!("label {y} outside 0..{}", self.classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.cols()
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    /// Samples whose label is in `classes` (all samples when empty).
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        if classes.is_empty() {
            return self.clone();
        }
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.select(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Loads an IDX image/label pair (gzip accepted); pixels scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img_bytes = read_maybe_gzip(images_path)?;
    let lbl_bytes = read_maybe_gzip(labels_path)?;
    dataset_from_idx(&img_bytes, &lbl_bytes, split)
}

pub fn dataset_from_idx(img_bytes: &[u8], lbl_bytes: &[u8], split: Split) -> Result<Dataset> {
    let expect_magic = |bytes: &[u8], magic: u32, what: &str| -> Result<()> {
        let found = bytes
            .get(..4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")));
        if found != Some(magic) {
            return Err(Error::Parse {
                offset: 0,
                message: format!(
                    "{what}: bad magic {} (expected 0x{magic:08x})",
                    found.map_or("<truncated>".to_string(), |m| format!("0x{m:08x}"))
                ),
            });
        }
        Ok(())
    };
    expect_magic(img_bytes, IDX_IMAGES_MAGIC, "images")?;
    expect_magic(lbl_bytes, IDX_LABELS_MAGIC, "labels")?;
    let images = IdxArray::parse(img_bytes)?;
    let labels = IdxArray::parse(lbl_bytes)?;
    let count = images.dims[0] as usize;
    if labels.dims[0] as usize != count {
        return Err(Error::Parse {
            offset: 4,
            message: format!(
                "image count {count} does not match label count {}",
                labels.dims[0]
            ),
        });
    }
    let pixels = (images.dims[1] * images.dims[2]) as usize;
    let data = images.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels_vec: Vec<usize> = labels.data.iter().map(|&b| usize::from(b)).collect();
    let classes = labels_vec.iter().max().map_or(0, |&m| m + 1).max(2);
    Ok(Dataset {
        images: Tensor::matrix(count, pixels, data)?,
        labels: labels_vec,
        classes,
        split,
        provenance: Provenance::Idx {
            images_sha256: hex::encode(Sha256::digest(img_bytes)),
            labels_sha256: hex::encode(Sha256::digest(lbl_bytes)),
        },
    })
}

/// Synthetic Gaussian blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    /// One center per class, each of length `dim`.
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl BlobSpec {
    /// Centers on hypercube corners inside `[0,1]`: coordinate `j` of class
    /// `i` is 0.8 when bit `j` of `i + 1` is set and 0.2 otherwise.
    pub fn separated(classes: usize, dim: usize, std: f64, samples_per_class: usize, seed: u64) -> Self {
        let centers = (0..classes)
            .map(|i| {
                (0..dim)
                    .map(|j| if j < 64 && ((i + 1) >> j) & 1 == 1 { 0.8 } else { 0.2 })
                    .collect()
            })
            .collect();
        Self {
            classes,
            dim,
            centers,
            std,
            samples_per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.centers.len() != self.classes {
            return Err(Error::config(format!(
                "blob spec needs >= 2 classes and one center per class ({} centers for {} classes)",
                self.centers.len(),
                self.classes
            )));
        }
        if self.centers.iter().any(|c| c.len() != self.dim) {
            return Err(Error::config("every blob center must have length dim"));
        }
        for a in 0..self.classes {
            for b in a + 1..self.classes {
                if self.centers[a] == self.centers[b] {
                    return Err(Error::config(format!("blob centers {a} and {b} coincide")));
                }
            }
        }
        if !(self.std >= 0.0) {
            return Err(Error::config("blob std must be >= 0"));
        }
        Ok(())
    }
}

/// Samples `center + std·N(0, I)` per class, clipped to `[0,1]`, classes
/// interleaved in a seed-determined order.
pub fn gen_blobs(spec: &BlobSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.classes * spec.samples_per_class;
    let mut order: Vec<usize> = (0..total).map(|k| k % spec.classes).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(total * spec.dim);
    for &class in &order {
        for &c in &spec.centers[class] {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push((c + spec.std * e).clamp(0.0, 1.0));
        }
    }
    Ok(Dataset {
        images: Tensor::matrix(total, spec.dim, data)?,
        labels: order,
        classes: spec.classes,
        split,
        provenance: Provenance::Blobs { seed: spec.seed },
    })
}

/// Index sequence for one epoch: every batch holds at least two samples of
/// every class present in the dataset.
///
/// Each class's indices are shuffled and dealt round-robin over
/// `max(1, N / batch_size)` batches, so an epoch covers the dataset exactly
/// once. Classes too small to give every batch two samples are topped up by
/// resampling within the class.
pub fn stratified_batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    let counts = dataset.class_counts();
    let present = counts.iter().filter(|&&c| c > 0).count();
    if batch_size < 2 * present {
        return Err(Error::config(format!(
            "batch size {batch_size} is too small for stratified batches: need at least {} (2 × {present} classes)",
            2 * present
        )));
    }
    if counts.iter().any(|&c| c == 1) {
        return Err(Error::Data("a class with a single sample cannot be stratified".into()));
    }
    let mut rng = epoch_rng(seed, epoch);
    let n_batches = (dataset.len() / batch_size).max(1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut batches: Vec<Vec<usize>> = vec![Vec::with_capacity(batch_size + present); n_batches];
    // Rotate the starting batch per class so remainders spread evenly.
    let mut next = 0usize;
    for members in by_class.iter_mut().filter(|m| !m.is_empty()) {
        members.shuffle(&mut rng);
        for (k, &idx) in members.iter().enumerate() {
            batches[(next + k) % n_batches].push(idx);
        }
        next = (next + members.len()) % n_batches;
        for batch in batches.iter_mut() {
            let mut have = batch.iter().filter(|&&i| dataset.labels[i] == dataset.labels[members[0]]).count();
            let mut k = 0;
            while have < 2 {
                batch.push(members[k % members.len()]);
                have += 1;
                k += 1;
            }
        }
    }
    for batch in &mut batches {
        batch.shuffle(&mut rng);
    }
    Ok(batches)
}

/// Plain shuffled batches of `batch_size` (last batch may be smaller).
pub fn shuffled_batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut rng = epoch_rng(seed, epoch);
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images = IdxArray {
            dims: vec![2, 2, 3],
            data: vec![0, 255, 51, 102, 0, 0, 255, 255, 255, 1, 2, 3],
        };
        let labels = IdxArray {
            dims: vec![2],
            data: vec![7, 3],
        };
        (images.to_bytes(), labels.to_bytes())
    }

    #[test]
    fn fixture_pixels_are_exact() {
        let (img, lbl) = fixture();
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        let d = dataset_from_idx(&img, &lbl, Split::Test).unwrap();
        assert_eq!(d.images.shape(), &[2, 6]);
        assert_eq!(d.labels, vec![7, 3]);
        assert_eq!(d.images.row(0), &[0.0, 1.0, 0.2, 0.4, 0.0, 0.0]);
        assert_eq!(d.images.at(1, 3), 1.0 / 255.0);
        assert_eq!(d.classes, 8);
    }

    #[test]
    fn wrong_magic_names_offset_zero() {
        let (mut img, lbl) = fixture();
        img[3] = 1;
        match dataset_from_idx(&img, &lbl, Split::Train) {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let (img, _) = fixture();
        assert!(matches!(
            dataset_from_idx(&img, &img, Split::Train),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_and_mismatched_files_fail() {
        let (img, lbl) = fixture();
        let err = dataset_from_idx(&img[..img.len() - 1], &lbl, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        let bad_lbl = IdxArray {
            dims: vec![3],
            data: vec![0, 1, 2],
        }
        .to_bytes();
        assert!(matches!(dataset_from_idx(&img, &bad_lbl, Split::Train), Err(Error::Parse { .. })));
        assert!(matches!(IdxArray::parse(&[0, 0]), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn gzip_files_are_accepted() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let (img, lbl) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.gz");
        let lp = dir.path().join("lbl");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&img).unwrap();
        fs::write(&ip, enc.finish().unwrap()).unwrap();
        fs::write(&lp, &lbl).unwrap();
        let d = load_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(d, dataset_from_idx(&img, &lbl, Split::Train).unwrap());
    }

    proptest! {
        #[test]
        fn idx_round_trip_is_byte_identical(
            dims in prop::collection::vec(1u32..5, 1..4),
            seed in any::<u8>(),
        ) {
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let data: Vec<u8> = (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let bytes = IdxArray { dims, data }.to_bytes();
            prop_assert_eq!(IdxArray::parse(&bytes).unwrap().to_bytes(), bytes);
        }
    }

    #[test]
    fn blobs_are_deterministic_and_clipped() {
        let spec = BlobSpec::separated(3, 4, 0.3, 50, 8);
        let a = gen_blobs(&spec, Split::Train).unwrap();
        let b = gen_blobs(&spec, Split::Train).unwrap();
        assert_eq!(a, b);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.class_counts(), vec![50, 50, 50]);
    }

    #[test]
    fn zero_std_blobs_sit_on_centers() {
        let spec = BlobSpec::separated(3, 4, 0.0, 5, 1);
        let d = gen_blobs(&spec, Split::Train).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.images.row(i), spec.centers[d.labels[i]].as_slice());
        }
    }

    #[test]
    fn separated_blobs_are_nearest_center_classifiable() {
        let spec = BlobSpec::separated(3, 8, 0.05, 200, 2);
        let d = gen_blobs(&spec, Split::Test).unwrap();
        let correct = (0..d.len())
            .filter(|&i| {
                let x = d.images.row(i);
                let best = (0..3)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&spec.centers[a]).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(&spec.centers[b]).map(|(p, q)| (p - q).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == d.labels[i]
            })
            .count();
        assert_eq!(correct, d.len());
    }

    #[test]
    fn duplicate_centers_rejected() {
        let mut spec = BlobSpec::separated(3, 4, 0.1, 5, 1);
        spec.centers[2] = spec.centers[0].clone();
        assert!(gen_blobs(&spec, Split::Train).is_err());
    }

    fn balanced(classes: usize, per_class: usize) -> Dataset {
        let n = classes * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        Dataset::new(Tensor::zeros(&[n, 1]), labels, classes, Split::Train).unwrap()
    }

    #[test]
    fn stratified_batches_cover_each_class() {
        let d = balanced(10, 100);
        let batches = stratified_batches(&d, 100, 3, 0).unwrap();
        assert_eq!(batches.len(), 10);
        for b in &batches {
            let mut counts = [0; 10];
            for &i in b {
                counts[d.labels[i]] += 1;
            }
            assert!(counts.iter().all(|&c| c >= 2));
        }
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_batches_are_seeded() {
        let d = balanced(4, 30);
        assert_eq!(
            stratified_batches(&d, 16, 5, 2).unwrap(),
            stratified_batches(&d, 16, 5, 2).unwrap()
        );
        assert_ne!(
            stratified_batches(&d, 16, 5, 2).unwrap(),
            stratified_batches(&d, 16, 5, 3).unwrap()
        );
    }

    #[test]
    fn stratified_batch_size_floor() {
        let d = balanced(10, 20);
        let err = stratified_batches(&d, 19, 0, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("20"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn stratified_floor_holds_over_many_epochs(
            classes in 2usize..6,
            extra in prop::collection::vec(0usize..40, 6),
            batch in 12usize..40,
            seed in any::<u64>(),
        ) {
            let mut labels = Vec::new();
            for c in 0..classes {
                labels.extend(std::iter::repeat(c).take(2 + extra[c]));
            }
            let n = labels.len();
            let d = Dataset::new(Tensor::zeros(&[n, 1]), labels, classes, Split::Train).unwrap();
            for epoch in 0..100 {
                for b in stratified_batches(&d, batch, seed, epoch).unwrap() {
                    let mut counts = vec![0; classes];
                    for &i in &b {
                        counts[d.labels[i]] += 1;
                    }
                    prop_assert!(counts.iter().all(|&c| c >= 2));
                }
            }
        }
    }
}
