//! Shared helpers for the integration suites: synthetic PGM datasets.

use std::path::Path;

use camforge_core::postproc::netpbm::write_image;
use camforge_core::postproc::{Image, Provenance};
use camforge_core::rng::SplitMix64;

/// Writes `count` random 8-bit grayscale images of `size`x`size` plus an
/// `index.csv` with labels cycling through `classes`. Returns the image ids.
pub fn write_synthetic_dataset(
    dir: &Path,
    seed: u64,
    count: usize,
    size: usize,
    classes: usize,
) -> Vec<String> {
    let mut rng = SplitMix64::new(seed);
    let mut index = String::from("filename,label\n");
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let data: Vec<f64> =
            (0..size * size).map(|_| (rng.next_u64() >> 56) as f64 / 255.0).collect();
        let img = Image::new(1, size, size, data, Provenance::Synthetic(seed)).unwrap();
        let name = format!("img_{i:03}.pgm");
        write_image(&img, &dir.join(&name)).unwrap();
        index.push_str(&format!("{name},{}\n", i % classes));
        names.push(name);
    }
    std::fs::write(dir.join("index.csv"), index).unwrap();
    names
}

/// Same dataset but with no label column in the index.
#[allow(dead_code)]
pub fn write_unlabeled_dataset(dir: &Path, seed: u64, count: usize, size: usize) -> Vec<String> {
    let mut rng = SplitMix64::new(seed);
    let mut index = String::new();
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let data: Vec<f64> =
            (0..size * size).map(|_| (rng.next_u64() >> 56) as f64 / 255.0).collect();
        let img = Image::new(1, size, size, data, Provenance::Synthetic(seed)).unwrap();
        let name = format!("img_{i:03}.pgm");
        write_image(&img, &dir.join(&name)).unwrap();
        index.push_str(&format!("{name}\n"));
        names.push(name);
    }
    std::fs::write(dir.join("index.csv"), index).unwrap();
    names
}
