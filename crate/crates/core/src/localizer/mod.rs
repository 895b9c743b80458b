//! Blind splice localisation. The image is cut into overlapping patches, each
//! patch is mapped to its penultimate-layer feature vector, and a
//! two-component Gaussian mixture splits the patches. The lighter component
//! is taken to be the foreign region; its posterior becomes a heat map that is
//! cleaned by a morphological opening and upsampled to the image.

mod gmm;
mod map;

use rand::rngs::mock::StepRng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::network::{forward, ModelParams, FEATURES};
use crate::tensor::{Mode, Tensor};

pub use gmm::{
    e_step, em_from, gmm_em_fit, gmm_em_fit_traced, random_init, tampered_component, EmConfig,
    Features, GmmModel, VARIANCE_FLOOR,
};
pub use map::{
    axis_positions, clean_map, dilate, encode_raw_map, erode, read_raw_map, upsample_at,
    upsample_map, write_raw_map, GridMap, Morphology, PatchGrid, ProbabilityMap, PATCH, RAW_MAGIC,
};

pub const DEFAULT_STEP: usize = 48;
pub const MORPHOLOGY_RADIUS: usize = 2;

/// Grid plus the `[n, 72, 72, 3]` patches in row-major grid order.
pub fn tile_image(image: &Image, step: usize) -> Result<(PatchGrid, Tensor<f32>)> {
    if image.channels() != 3 {
        return Err(Error::Input(format!(
            "localisation needs an RGB image, got {} channel(s)",
            image.channels()
        )));
    }
    let grid = PatchGrid::new(image.width(), image.height(), step)?;
    let mut data = Vec::with_capacity(grid.len() * PATCH * PATCH * 3);
    let w = image.width();
    for (x, y) in grid.positions() {
        for row in y..y + PATCH {
            let start = (row * w + x) * 3;
            data.extend_from_slice(&image.data()[start..start + PATCH * 3]);
        }
    }
    let n = grid.len();
    Ok((grid, Tensor::new(vec![n, PATCH, PATCH, 3], data)?))
}

/// Inference-mode feature vectors, `batch` patches at a time.
pub fn extract_features(
    patches: &Tensor<f32>,
    params: &ModelParams<f32>,
    batch: usize,
) -> Result<Features> {
    let n = patches.shape()[0];
    let per = patches.len() / n.max(1);
    let mut out = Vec::with_capacity(n * FEATURES);
    let mut rng = StepRng::new(0, 0);
    for chunk in patches.data().chunks(per * batch.max(1)) {
        let m = chunk.len() / per;
        let t = Tensor::new(vec![m, PATCH, PATCH, 3], chunk.to_vec())?;
        let o = forward(t, params, Mode::Infer, &mut rng)?;
        out.extend(o.features.data().iter().map(|&v| v as f64));
    }
    Features::new(n, FEATURES, out)
}

/// Posterior of the tampered component at each grid cell.
pub fn responsibilities_to_map(
    model: &GmmModel,
    features: &Features,
    grid: &PatchGrid,
) -> Result<GridMap> {
    if features.rows() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows for a grid of {} cells",
            features.rows(),
            grid.len()
        )));
    }
    let (resp, _) = e_step(model, features);
    let k = tampered_component(model, &resp);
    GridMap::new(
        grid.rows(),
        grid.cols(),
        resp.iter().map(|r| r[k]).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizeConfig {
    pub step: usize,
    pub em: EmConfig,
    pub standardize: bool,
    pub morphology: Morphology,
    pub batch: usize,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            step: DEFAULT_STEP,
            em: EmConfig::default(),
            standardize: true,
            morphology: Morphology::Opening,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Localization {
    pub grid: PatchGrid,
    pub model: GmmModel,
    /// Grid map before cleaning.
    pub raw: GridMap,
    pub map: ProbabilityMap,
}

/// Segmentation stage on precomputed features.
pub fn localize_features(
    features: &Features,
    grid: &PatchGrid,
    width: usize,
    height: usize,
    config: &LocalizeConfig,
) -> Result<Localization> {
    let x = if config.standardize {
        features.standardized()
    } else {
        features.clone()
    };
    let model = gmm_em_fit(&x, &config.em)?;
    let raw = responsibilities_to_map(&model, &x, grid)?;
    let cleaned = clean_map(&raw, MORPHOLOGY_RADIUS, config.morphology);
    let pixels = upsample_at(
        &cleaned,
        &grid.centers_y(),
        &grid.centers_x(),
        height,
        width,
    );
    Ok(Localization {
        grid: grid.clone(),
        model,
        raw,
        map: ProbabilityMap {
            grid: cleaned,
            width,
            height,
            pixels,
        },
    })
}

/// Tile, extract, fit, map, clean and upsample.
pub fn localize(
    image: &Image,
    params: &ModelParams<f32>,
    config: &LocalizeConfig,
) -> Result<Localization> {
    let (grid, patches) = tile_image(image, config.step)?;
    let features = extract_features(&patches, params, config.batch)?;
    localize_features(&features, &grid, image.width(), image.height(), config)
}
