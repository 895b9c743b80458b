use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::image::{quantize, Image};

pub const PATCH: usize = 72;

/// `m` RGB patches `[m, 72, 72, 3]` with camera-model labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub patches: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// 8-bit RGB image with its camera-model label, kept compact for sampling.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub label: usize,
}

impl LabeledImage {
    pub fn new(image: &Image, label: usize) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::Input("training images must be RGB".into()));
        }
        if image.width() < PATCH || image.height() < PATCH {
            return Err(Error::Input(format!(
                "image {}x{} is smaller than a {PATCH}x{PATCH} patch",
                image.width(),
                image.height()
            )));
        }
        Ok(LabeledImage {
            width: image.width(),
            height: image.height(),
            pixels: image.data().iter().map(|&v| quantize(v)).collect(),
            label,
        })
    }

    /// Appends the patch at `(x, y)` as `[0, 1]` floats.
    pub fn extract(&self, x: usize, y: usize, out: &mut Vec<f32>) {
        for row in y..y + PATCH {
            let start = (row * self.width + x) * 3;
            out.extend(
                self.pixels[start..start + PATCH * 3]
                    .iter()
                    .map(|&b| b as f32 / 255.0),
            );
        }
    }
}

/// Draws `count` patches: a uniformly random image, then a uniformly random
/// position inside it (with replacement).
pub fn sample_patches(images: &[LabeledImage], count: usize, seed: u64) -> Result<PatchBatch> {
    if images.is_empty() {
        return Err(Error::Input(
            "cannot sample patches from an empty corpus".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(count * PATCH * PATCH * 3);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let img = &images[rng.gen_range(0..images.len())];
        let x = rng.gen_range(0..=img.width - PATCH);
        let y = rng.gen_range(0..=img.height - PATCH);
        img.extract(x, y, &mut data);
        labels.push(img.label);
    }
    Ok(PatchBatch {
        patches: Tensor::new(vec![count, PATCH, PATCH, 3], data)?,
        labels,
    })
}

/// Centre and four corner patches of every image, in order.
pub fn fixed_patches(images: &[LabeledImage]) -> Result<PatchBatch> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for img in images {
        let (mx, my) = (img.width - PATCH, img.height - PATCH);
        for (x, y) in [(mx / 2, my / 2), (0, 0), (mx, 0), (0, my), (mx, my)] {
            img.extract(x, y, &mut data);
            labels.push(img.label);
        }
    }
    Ok(PatchBatch {
        patches: Tensor::new(vec![labels.len(), PATCH, PATCH, 3], data)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(models: usize, per_model: usize) -> Vec<LabeledImage> {
        (0..models * per_model)
            .map(|i| {
                let img = Image::filled(80, 76, 3, (i % 7) as f32 / 7.0).unwrap();
                LabeledImage::new(&img, i / per_model).unwrap()
            })
            .collect()
    }

    #[test]
    fn batch_shape_and_determinism() {
        let c = corpus(2, 3);
        let b = sample_patches(&c, 50, 7).unwrap();
        assert_eq!(b.len(), 50);
        assert_eq!(b.patches.shape(), &[50, 72, 72, 3]);
        assert_eq!(b, sample_patches(&c, 50, 7).unwrap());
        assert_ne!(b, sample_patches(&c, 50, 8).unwrap());
    }

    #[test]
    fn balanced_corpus_gives_balanced_labels() {
        let c = corpus(4, 2);
        let b = sample_patches(&c, 10_000, 11).unwrap();
        let mut counts = [0usize; 4];
        for &l in &b.labels {
            counts[l] += 1;
        }
        for n in counts {
            assert!((2375..=2625).contains(&n), "{counts:?}");
        }
    }

    #[test]
    fn undersized_images_rejected() {
        let small = Image::filled(71, 100, 3, 0.5).unwrap();
        assert!(LabeledImage::new(&small, 0).is_err());
    }

    #[test]
    fn fixed_patches_cover_centre_and_corners() {
        let c = corpus(1, 2);
        let b = fixed_patches(&c).unwrap();
        assert_eq!(b.len(), 10);
    }
}
