#![allow(dead_code)]

use std::path::Path;

use cafegan::checkpoint::{save_checkpoint, Checkpoint};
use cafegan::evaluation::{ClassifierConfig, EvalClassifier};
use cafegan::training::{TrainConfig, TrainState};

pub fn tiny_config(no_cab: bool) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 4,
        synthetic_n: 8,
        holdout: 8,
        g_base_width: 8,
        g_max_width: 16,
        d_base_width: 8,
        d_max_width: 16,
        d_classifier_width: 8,
        no_cab,
        ..TrainConfig::desk()
    }
}

pub fn tiny_classifier(cfg: &TrainConfig) -> EvalClassifier {
    EvalClassifier::new(ClassifierConfig {
        resolution: cfg.resolution,
        attributes: cfg.attributes.clone(),
        base_width: 8,
        ..ClassifierConfig::default()
    })
    .unwrap()
}

pub fn tiny_checkpoint(no_cab: bool) -> Checkpoint {
    let cfg = tiny_config(no_cab);
    let classifier = Some(tiny_classifier(&cfg));
    Checkpoint { state: TrainState::new(cfg).unwrap(), classifier }
}

pub fn write_tiny_checkpoint(path: &Path, no_cab: bool) {
    let ck = tiny_checkpoint(no_cab);
    save_checkpoint(&ck.state, ck.classifier.as_ref(), path).unwrap();
}

pub fn png_bytes(w: u32, h: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7) as u8, (y * 5) as u8, 128]));
    let mut buf = std::io::Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb8(img).write_to(&mut buf, image::ImageFormat::Png).unwrap();
    buf.into_inner()
}
