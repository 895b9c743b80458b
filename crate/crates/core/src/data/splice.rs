use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::camera::{simulate_camera_model, CameraModelSpec};
use super::image::{save_image, Image};
use super::synth::procedural_image;

/// Pastes `donor` into `host` where `mask` is set. Returns the composite and
/// the binarised mask.
pub fn make_splice(host: &Image, donor: &Image, mask: &Image) -> Result<(Image, Image)> {
    if !host.same_size(donor) || !host.same_size(mask) || host.channels() != donor.channels() {
        return Err(Error::Dimension(format!(
            "splice inputs differ: host {}x{}x{}, donor {}x{}x{}, mask {}x{}",
            host.width(),
            host.height(),
            host.channels(),
            donor.width(),
            donor.height(),
            donor.channels(),
            mask.width(),
            mask.height()
        )));
    }
    let c = host.channels();
    let bits: Vec<f32> = (0..host.width() * host.height())
        .map(|i| {
            if mask.data()[i * mask.channels()] >= 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let data = host
        .data()
        .iter()
        .zip(donor.data())
        .enumerate()
        .map(|(i, (&h, &d))| h * (1.0 - bits[i / c]) + d * bits[i / c])
        .collect();
    Ok((
        Image::new(host.width(), host.height(), c, data)?,
        Image::new(host.width(), host.height(), 1, bits)?,
    ))
}

/// Filled ellipse covering between `min_area` and `max_area` of the frame.
pub fn random_ellipse_mask(
    width: usize,
    height: usize,
    min_area: f64,
    max_area: f64,
    rng: &mut impl Rng,
) -> Result<Image> {
    let total = (width * height) as f64;
    for _ in 0..1000 {
        let target = rng.gen_range(min_area..=max_area);
        let aspect = rng.gen_range(0.6..1.6);
        let a = (target * total / (PI * aspect)).sqrt();
        let b = a * aspect;
        if 2.0 * a + 2.0 > width as f64 || 2.0 * b + 2.0 > height as f64 {
            continue;
        }
        let cx = rng.gen_range(a + 1.0..=width as f64 - a - 1.0);
        let cy = rng.gen_range(b + 1.0..=height as f64 - b - 1.0);
        let bits: Vec<f32> = (0..width * height)
            .map(|i| {
                let dx = ((i % width) as f64 + 0.5 - cx) / a;
                let dy = ((i / width) as f64 + 0.5 - cy) / b;
                if dx * dx + dy * dy <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let area = bits.iter().filter(|&&v| v > 0.0).count() as f64 / total;
        if (min_area..=max_area).contains(&area) {
            return Image::new(width, height, 1, bits);
        }
    }
    Err(Error::Parameter(format!(
        "could not place a mask with area in [{min_area}, {max_area}] on {width}x{height}"
    )))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpliceRecord {
    pub name: String,
    pub host_model: usize,
    pub donor_model: usize,
    pub mask_area: f64,
}

/// Writes `count` splices between different camera models to
/// `<out>/images/*.png` and `<out>/masks/*.png`, plus `splices.json`.
pub fn write_splice_set(
    out: &Path,
    models: &[CameraModelSpec],
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<SpliceRecord>> {
    if models.len() < 2 {
        return Err(Error::Parameter(
            "splices need at least 2 camera models".into(),
        ));
    }
    let (images, masks) = (out.join("images"), out.join("masks"));
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let records = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64));
            let host_model = rng.gen_range(0..models.len());
            let donor_model = (host_model + rng.gen_range(1..models.len())) % models.len();
            let host_clean = procedural_image(size, size, rng.gen())?;
            let donor_clean = procedural_image(size, size, rng.gen())?;
            let host = simulate_camera_model(&host_clean, &models[host_model], rng.gen())?;
            let donor = simulate_camera_model(&donor_clean, &models[donor_model], rng.gen())?;
            let mask = random_ellipse_mask(size, size, 0.10, 0.30, &mut rng)?;
            let (composite, gt) = make_splice(&host, &donor, &mask)?;
            let name = format!("splice_{i:03}");
            save_image(&composite, &images.join(format!("{name}.png")))?;
            save_image(&gt, &masks.join(format!("{name}.png")))?;
            let mask_area =
                gt.data().iter().filter(|&&v| v > 0.5).count() as f64 / (size * size) as f64;
            Ok(SpliceRecord {
                name,
                host_model,
                donor_model,
                mask_area,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out.join("splices.json");
    let json = serde_json::to_string_pretty(&records).expect("serialisable");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}
