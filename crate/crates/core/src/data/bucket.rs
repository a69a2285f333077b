use std::fmt;

use super::bitmap::Bitmap;
use crate::error::{Error, Result};

/// Padded image extents shared by every sample in a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bucket {
    pub width: usize,
    pub height: usize,
}

impl Bucket {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        width <= self.width && height <= self.height
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Desk-scale groups, all multiples of the encoder's 8x downsampling.
pub const DEFAULT_BUCKETS: [Bucket; 6] = [
    Bucket::new(128, 32),
    Bucket::new(160, 32),
    Bucket::new(192, 32),
    Bucket::new(256, 32),
    Bucket::new(160, 64),
    Bucket::new(256, 64),
];

/// Fifteen groups sized for full-page-width formulas.
pub const LARGE_BUCKETS: [Bucket; 15] = [
    Bucket::new(160, 32),
    Bucket::new(192, 32),
    Bucket::new(192, 64),
    Bucket::new(256, 64),
    Bucket::new(160, 64),
    Bucket::new(128, 32),
    Bucket::new(384, 32),
    Bucket::new(384, 64),
    Bucket::new(320, 32),
    Bucket::new(320, 64),
    Bucket::new(384, 96),
    Bucket::new(128, 64),
    Bucket::new(224, 64),
    Bucket::new(256, 32),
    Bucket::new(224, 32),
];

/// Smallest bucket (by area, then height, then width) that holds a
/// `width x height` image.
pub fn select_bucket(buckets: &[Bucket], width: usize, height: usize) -> Option<Bucket> {
    buckets.iter().filter(|b| b.fits(width, height)).min_by_key(|b| (b.area(), b.height, b.width)).copied()
}

/// Centers `image` on a background canvas of the smallest fitting bucket.
pub fn bucket_and_pad(image: &Bitmap, buckets: &[Bucket]) -> Result<(Bitmap, Bucket)> {
    let bucket = select_bucket(buckets, image.width, image.height).ok_or_else(|| {
        let max_width = buckets.iter().map(|b| b.width).max().unwrap_or(0);
        let max_height = buckets.iter().map(|b| b.height).max().unwrap_or(0);
        Error::TooLarge { width: image.width, height: image.height, max_width, max_height }
    })?;
    let left = (bucket.width - image.width) / 2;
    let top = (bucket.height - image.height) / 2;
    Ok((image.embed(bucket.width, bucket.height, left, top), bucket))
}
