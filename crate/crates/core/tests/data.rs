use cdhn_core::data::{self, generate_synthetic, SyntheticSpec};
use cdhn_core::{Dataset, Error};

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 3];
    for v in [n, rows, cols] {
        out.extend(v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 1];
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Sum of the raw bytes of image `i`, read straight from the file layout.
fn image_byte_sum(file: &[u8], i: usize) -> u64 {
    let rows = u32::from_be_bytes([file[8], file[9], file[10], file[11]]) as usize;
    let cols = u32::from_be_bytes([file[12], file[13], file[14], file[15]]) as usize;
    let start = 16 + i * rows * cols;
    file[start..start + rows * cols].iter().map(|&b| b as u64).sum()
}

#[test]
fn parses_hand_built_files() {
    let pixels: Vec<u8> = (0..12).map(|i| (i * 23) as u8).collect();
    let x = data::parse_idx_images(&idx_images(2, 3, 2, &pixels)).unwrap();
    assert_eq!(x.shape(), &[2, 1, 3, 2]);
    for (v, b) in x.data().iter().zip(&pixels) {
        assert_eq!(*v, *b as f32 / 127.5 - 1.0);
    }
    assert_eq!(x.data()[0], -1.0);
    assert_eq!(data::parse_idx_images(&idx_images(1, 1, 1, &[255])).unwrap().data(), &[1.0]);
    assert_eq!(data::parse_idx_labels(&idx_labels(&[3, 0, 9])).unwrap(), vec![3, 0, 9]);
}

#[test]
fn first_image_checksum_matches_independent_reader() {
    let spec = SyntheticSpec { size: 10, ..SyntheticSpec::default() };
    let ds = generate_synthetic(&spec, 3, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    data::write_idx(&ds, &img, &lab).unwrap();
    let loaded = data::load_idx(&img, &lab).unwrap();
    let file = std::fs::read(&img).unwrap();
    let mine: u64 = loaded.images.data()[..100].iter().map(|v| ((v + 1.0) * 127.5).round() as u64).sum();
    assert_eq!(mine, image_byte_sum(&file, 0));
    assert_eq!(loaded.labels, ds.labels);
    assert_eq!(loaded.num_classes, 10);
    for (a, b) in loaded.images.data().iter().zip(ds.images.data()) {
        assert!((a - b.clamp(-1.0, 1.0)).abs() <= 0.5 / 127.5 + 1e-6);
    }
}

#[test]
fn malformed_files_are_format_errors() {
    let good = idx_images(2, 2, 2, &[0; 8]);
    assert!(matches!(data::parse_idx_images(&good[..good.len() - 1]), Err(Error::Format(_))));
    assert!(matches!(data::parse_idx_images(&good[..10]), Err(Error::Format(_))));
    let mut bad_magic = good.clone();
    bad_magic[3] = 1;
    assert!(matches!(data::parse_idx_images(&bad_magic), Err(Error::Format(_))));
    let labels = idx_labels(&[1, 2, 3]);
    assert!(matches!(data::parse_idx_labels(&labels[..9]), Err(Error::Format(_))));
    assert!(matches!(data::parse_idx_labels(&good), Err(Error::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    std::fs::write(&img, &good).unwrap();
    std::fs::write(&lab, &labels).unwrap();
    assert!(matches!(data::load_idx(&img, &lab), Err(Error::Format(_))));
    assert!(matches!(data::load_idx(dir.path().join("missing"), &lab), Err(Error::Io(_))));
}

#[test]
fn synthetic_sets_are_balanced_and_reproducible() {
    let spec = SyntheticSpec { size: 8, classes: 5, ..SyntheticSpec::default() };
    let a = generate_synthetic(&spec, 7, 0).unwrap();
    let b = generate_synthetic(&spec, 7, 0).unwrap();
    let c = generate_synthetic(&spec, 7, 1).unwrap();
    assert_eq!(a.images.data(), b.images.data());
    assert_eq!(a.labels, b.labels);
    assert_ne!(a.images.data(), c.images.data());
    for k in 0..5 {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 7);
    }
    assert_eq!(a.sample_shape(), [1, 8, 8]);
    assert!(generate_synthetic(&SyntheticSpec { classes: 1, ..spec.clone() }, 3, 0).is_err());
    assert!(generate_synthetic(&SyntheticSpec { noise_min: 2.0, noise_max: 1.0, ..spec }, 3, 0).is_err());
}

/// Multiclass perceptron on raw pixels; returns training accuracy.
fn perceptron_accuracy(ds: &Dataset, epochs: usize) -> f64 {
    let d = ds.images.numel() / ds.len();
    let c = ds.num_classes;
    let mut w = vec![0f64; c * (d + 1)];
    let x = |i: usize| &ds.images.data()[i * d..(i + 1) * d];
    let score = |w: &[f64], i: usize, k: usize| {
        let row = &w[k * (d + 1)..(k + 1) * (d + 1)];
        row[d] + x(i).iter().zip(row).map(|(a, b)| *a as f64 * b).sum::<f64>()
    };
    let predict = |w: &[f64], i: usize| (0..c).max_by(|&a, &b| score(w, i, a).total_cmp(&score(w, i, b))).unwrap();
    for _ in 0..epochs {
        let mut mistakes = 0;
        for i in 0..ds.len() {
            let (p, y) = (predict(&w, i), ds.labels[i]);
            if p != y {
                mistakes += 1;
                for (j, v) in x(i).iter().enumerate() {
                    w[y * (d + 1) + j] += *v as f64;
                    w[p * (d + 1) + j] -= *v as f64;
                }
                w[y * (d + 1) + d] += 1.0;
                w[p * (d + 1) + d] -= 1.0;
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    (0..ds.len()).filter(|&i| predict(&w, i) == ds.labels[i]).count() as f64 / ds.len() as f64
}

#[test]
fn noise_free_data_is_linearly_separable() {
    let spec = SyntheticSpec {
        noise_min: 0.0,
        noise_max: 0.0,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec, 50, 0).unwrap();
    assert_eq!(perceptron_accuracy(&ds, 500), 1.0);
}
