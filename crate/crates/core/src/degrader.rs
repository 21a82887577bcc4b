use crate::error::Result;
use crate::image::ImageBatch;

/// Anything that maps HR images to LR samples: the oracle, a trained
/// generator, or a frozen generator checkpoint.
pub trait Degrader: Send + Sync {
    fn scale(&self) -> usize;

    /// One seeded sample from the degradation distribution for each image.
    fn degrade(&self, hr: &ImageBatch, seed: u64) -> Result<ImageBatch>;

    fn label(&self) -> String;

    /// Fingerprint of the parameters; equal before and after any use that
    /// must not mutate the degrader.
    fn checksum(&self) -> u64;
}
