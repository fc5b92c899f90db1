use std::fs;
use std::path::PathBuf;

use gccs::data::{load_idx, IdxArray, Provenance, Split};

fn dir() -> Option<PathBuf> {
    let d = std::env::var_os("GCCS_MNIST_DIR").map_or_else(|| PathBuf::from("/root/data/mnist"), PathBuf::from);
    if d.join("train-images-idx3-ubyte").is_file() {
        Some(d)
    } else {
        eprintln!("MNIST not found in {}; skipping", d.display());
        None
    }
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

#[test]
fn canonical_train_files_match_reference_header_reader() {
    let Some(d) = dir() else { return };
    let img_path = d.join("train-images-idx3-ubyte");
    let lbl_path = d.join("train-labels-idx1-ubyte");
    let img = fs::read(&img_path).unwrap();
    let lbl = fs::read(&lbl_path).unwrap();
    assert_eq!((be_u32(&img, 0), be_u32(&img, 4), be_u32(&img, 8), be_u32(&img, 12)), (2051, 60_000, 28, 28));
    assert_eq!((be_u32(&lbl, 0), be_u32(&lbl, 4)), (2049, 60_000));

    let ds = load_idx(&img_path, &lbl_path, Split::Train).unwrap();
    assert_eq!(ds.images.shape(), &[60_000, 784]);
    assert_eq!(ds.labels[0], 5);
    assert_eq!(ds.labels[0], usize::from(lbl[8]));
    assert_eq!(ds.images.at(0, 200), f64::from(img[16 + 200]) / 255.0);
    assert_eq!(ds.classes, 10);
    assert_eq!(
        ds.provenance,
        Provenance::Idx {
            images_sha256: "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db".into(),
            labels_sha256: "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5".into(),
        }
    );
}

#[test]
fn real_label_file_round_trips() {
    let Some(d) = dir() else { return };
    let bytes = fs::read(d.join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!(IdxArray::parse(&bytes).unwrap().to_bytes(), bytes);
}
