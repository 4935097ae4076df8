//! Image ingestion, letterboxing, synthetic shape data and the toy trainer.

mod image;
mod letterbox;
mod toy;
mod train;

pub use image::{encode_ppm, load_image, parse_ppm, save_ppm, RawImage};
pub use letterbox::{letterbox, LetterboxedImage, PAD_VALUE};
pub use toy::{
    gen_sample, gen_toy_dataset, load_toy_dataset, write_toy_dataset, ToyObject, ToySample, CLASS_NAMES, MAX_OBJECTS,
    NUM_CLASSES,
};
pub use train::{assign_level, build_targets, detection_loss, train_toy, LevelTargets, TrainConfig, ANCHOR_SCALE};
