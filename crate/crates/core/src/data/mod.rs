//! Images, the synthetic camera-model corpus, splices and patch sampling.

mod camera;
mod corpus;
mod image;
mod patches;
mod splice;
mod synth;

pub use camera::{
    dct8, dct_quantize_plane, default_model_specs, demosaic, idct8, mosaic, prnu_field,
    quant_table, sensor_response, simulate_camera_model, CameraModelSpec, CfaPattern, Demosaic,
    QUALITIES,
};
pub use corpus::{
    holdout_count, write_corpus, Corpus, CorpusImage, CorpusManifest, Split, Splits, SynthConfig,
    MANIFEST,
};
pub use image::{load_image, quantize, save_image, Image};
pub use patches::{fixed_patches, sample_patches, LabeledImage, PatchBatch, PATCH};
pub use splice::{make_splice, random_ellipse_mask, write_splice_set, SpliceRecord};
pub use synth::procedural_image;
