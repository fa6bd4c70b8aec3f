//! Synthetic training images normalized to unit maximum.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_image, write_image, ImageData};
use crate::phantom::{random_ellipses, smooth_noise};
use crate::prior::RealImage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Nested ellipses with intensity ramps and mild texture.
    #[default]
    Ellipses,
    /// Gaussian-filtered white noise at random correlation lengths.
    FilteredNoise,
    /// Even indices ellipses, odd indices filtered noise.
    Mixed,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ellipses" => Ok(Self::Ellipses),
            "filtered_noise" | "noise" => Ok(Self::FilteredNoise),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::InvalidParameter(format!("unknown dataset kind {s:?}"))),
        }
    }
}

fn filtered_noise(shape: (usize, usize), rng: &mut ChaCha8Rng) -> RealImage {
    let sigma = rng.gen_range(1.0..6.0);
    let mut img = smooth_noise(shape, sigma, rng);
    let min = img.iter().cloned().fold(f64::INFINITY, f64::min);
    img.mapv_inplace(|v| v - min);
    img
}

fn normalize(mut img: RealImage) -> RealImage {
    let max = img.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if max > 0.0 {
        img /= max;
    }
    img
}

/// Image `index` of the dataset; each index owns an independent stream.
pub fn make_image(kind: DatasetKind, shape: (usize, usize), seed: u64, index: usize) -> RealImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let img = match kind {
        DatasetKind::Ellipses => random_ellipses(shape, &mut rng),
        DatasetKind::FilteredNoise => filtered_noise(shape, &mut rng),
        DatasetKind::Mixed if index % 2 == 0 => random_ellipses(shape, &mut rng),
        DatasetKind::Mixed => filtered_noise(shape, &mut rng),
    };
    normalize(img)
}

pub fn make_dataset(kind: DatasetKind, count: usize, shape: (usize, usize), seed: u64) -> Vec<RealImage> {
    (0..count).into_par_iter().map(|i| make_image(kind, shape, seed, i)).collect()
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("img_{i:05}.bin"))
}

/// Writes `img_00000.bin, ...` into `dir`, creating it if needed.
pub fn write_dataset(dir: impl AsRef<Path>, images: &[RealImage]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, img) in images.iter().enumerate() {
        write_image(image_path(dir, i), &ImageData::Real(img.clone()))?;
    }
    Ok(())
}

/// Loads every `*.bin` image in `dir` in file-name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<RealImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(read_image(p)?.magnitude())).collect()
}
