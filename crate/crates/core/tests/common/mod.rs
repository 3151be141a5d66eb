#![allow(dead_code)]

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use rand::Rng;
use zsldb::io::{BLUR_FILE, DEPTH_FILE, KERNEL_FILE, META_FILE, SHARP_FILE};

/// Number of distinct corruption kinds produced by [`corrupt_scene`].
pub const CORRUPTION_KINDS: usize = 12;

/// Damages a saved scene directory in one of several ways and returns the file name the loader
/// is expected to blame.
pub fn corrupt_scene<R: Rng>(dir: &Path, kind: usize, rng: &mut R) -> &'static str {
    let images = [BLUR_FILE, SHARP_FILE, DEPTH_FILE];
    match kind % CORRUPTION_KINDS {
        0 => {
            let f = images[rng.random_range(0..3)];
            fs::remove_file(dir.join(f)).unwrap();
            f
        }
        1 => {
            // Truncate inside the pixel data.
            let f = images[rng.random_range(0..3)];
            let bytes = fs::read(dir.join(f)).unwrap();
            let keep = rng.random_range(8..bytes.len() / 2);
            fs::write(dir.join(f), &bytes[..keep]).unwrap();
            f
        }
        2 => {
            // Clobber the PNG signature.
            let f = images[rng.random_range(0..3)];
            let mut bytes = fs::read(dir.join(f)).unwrap();
            for b in bytes.iter_mut().take(8) {
                *b = rng.random();
            }
            bytes[0] = 0;
            fs::write(dir.join(f), bytes).unwrap();
            f
        }
        3 => {
            let f = [BLUR_FILE, SHARP_FILE][rng.random_range(0..2)];
            let size = rng.random_range(8..40u32);
            ImageBuffer::<Rgb<u8>, _>::from_pixel(size, size + 1, Rgb([10, 20, 30]))
                .save_with_format(dir.join(f), image::ImageFormat::Png)
                .unwrap();
            f
        }
        4 => {
            let size = rng.random_range(8..40u32);
            ImageBuffer::<Luma<u16>, _>::from_pixel(size + 2, size, Luma([1500]))
                .save_with_format(dir.join(DEPTH_FILE), image::ImageFormat::Png)
                .unwrap();
            DEPTH_FILE
        }
        5 => {
            // 8-bit depth loses the millimetre convention.
            let img = image::open(dir.join(DEPTH_FILE)).unwrap().to_luma8();
            img.save_with_format(dir.join(DEPTH_FILE), image::ImageFormat::Png).unwrap();
            DEPTH_FILE
        }
        6 => {
            let img = image::open(dir.join(DEPTH_FILE)).unwrap().to_luma16();
            ImageBuffer::<Luma<u16>, _>::from_pixel(img.width(), img.height(), Luma([0]))
                .save_with_format(dir.join(DEPTH_FILE), image::ImageFormat::Png)
                .unwrap();
            DEPTH_FILE
        }
        7 => {
            let bytes = fs::read(dir.join(KERNEL_FILE)).unwrap();
            let keep = rng.random_range(0..bytes.len() - 4);
            fs::write(dir.join(KERNEL_FILE), &bytes[..keep]).unwrap();
            KERNEL_FILE
        }
        8 => {
            let n = rng.random_range(2..6usize);
            let w: Vec<f32> = (0..n * n).map(|i| if i == 0 { -0.5 } else { 1.5 / (n * n - 1) as f32 }).collect();
            candle_core::Tensor::from_vec(w, (n, n), &candle_core::Device::Cpu)
                .unwrap()
                .write_npy(dir.join(KERNEL_FILE))
                .unwrap();
            KERNEL_FILE
        }
        9 => {
            let n = rng.random_range(2..6usize);
            candle_core::Tensor::from_vec(vec![0.5f32; n * n], (n, n), &candle_core::Device::Cpu)
                .unwrap()
                .write_npy(dir.join(KERNEL_FILE))
                .unwrap();
            KERNEL_FILE
        }
        10 => {
            let text = fs::read_to_string(dir.join(META_FILE)).unwrap();
            let cut = rng.random_range(1..text.len() - 1);
            fs::write(dir.join(META_FILE), &text[..cut]).unwrap();
            META_FILE
        }
        _ => {
            let mut value: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE)).unwrap()).unwrap();
            value["format_version"] = serde_json::json!(rng.random_range(2..100u32));
            fs::write(dir.join(META_FILE), value.to_string()).unwrap();
            META_FILE
        }
    }
}

/// Whether `err` is a data error whose path ends in `file`.
pub fn names_file(err: &zsldb::Error, file: &str) -> bool {
    matches!(err, zsldb::Error::Data { path, .. } if path.file_name().is_some_and(|n| n == file))
}

/// Tiny architecture for fast tests on 16x16 images.
pub fn tiny_model() -> zsldb::checkpoint::ModelConfig {
    use zsldb::autoencoder::AutoencoderConfig;
    use zsldb::denoiser::UNetConfig;
    use zsldb::perceptual::ExtractorConfig;
    zsldb::checkpoint::ModelConfig {
        autoencoder: AutoencoderConfig {
            widths: vec![8, 8],
            groups: 4,
            ..AutoencoderConfig::default()
        },
        unet: UNetConfig {
            widths: vec![8, 16],
            groups: 4,
            time_features: 8,
            time_dim: 16,
            ..UNetConfig::default()
        },
        adapter: zsldb::control::AdapterConfig {
            stem_width: 8,
            time_features: 8,
        },
        extractor: ExtractorConfig {
            widths: vec![4, 8],
            ..ExtractorConfig::default()
        },
        timesteps: 100,
        ..zsldb::checkpoint::ModelConfig::default()
    }
}

/// Checkpoint with seeded random weights for every stage. Every tensor is jittered so that
/// zero-initialized output layers do not make the networks trivial.
pub fn random_checkpoint(model: zsldb::checkpoint::ModelConfig, seed: u64) -> zsldb::checkpoint::Checkpoint {
    use candle_core::{DType, Device, Tensor};
    use rand::SeedableRng;
    use std::collections::HashMap;
    use zsldb::autoencoder::Autoencoder;
    use zsldb::checkpoint::{Checkpoint, Stage};
    use zsldb::control::Adapter;
    use zsldb::denoiser::UNet;
    use zsldb::nn::Params;
    use zsldb::perceptual::FeatureExtractor;

    let dev = Device::Cpu;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |p: &Params| -> HashMap<String, Tensor> {
        p.snapshot()
            .into_iter()
            .map(|(k, v)| {
                let noise: Vec<f32> = (0..v.elem_count()).map(|_| rng.random_range(-0.05..0.05)).collect();
                let noise = Tensor::from_vec(noise, v.shape(), &dev).unwrap();
                (k, (v + noise).unwrap())
            })
            .collect()
    };
    let mut ck = Checkpoint::new(model.clone()).unwrap();
    let p = Params::trainable(seed, DType::F32, &dev);
    Autoencoder::new(&p, &model.autoencoder).unwrap();
    ck.set_weights("vae", &jitter(&p)).unwrap();
    let p = Params::trainable(seed + 1, DType::F32, &dev);
    UNet::new(&p, &model.unet).unwrap();
    ck.set_weights("unet", &jitter(&p)).unwrap();
    for (i, prefix) in ["adapter.depth", "adapter.edge"].into_iter().enumerate() {
        let p = Params::trainable(seed + 2 + i as u64, DType::F32, &dev);
        Adapter::new(&p, &model.adapter, &model.unet, model.autoencoder.factor()).unwrap();
        ck.set_weights(prefix, &jitter(&p)).unwrap();
    }
    let p = Params::trainable(seed + 4, DType::F32, &dev);
    FeatureExtractor::new(&p, &model.extractor).unwrap();
    ck.set_weights("extractor", &jitter(&p)).unwrap();
    for stage in Stage::ALL {
        ck.mark_complete(stage, 0);
    }
    ck
}

/// A random 16x16 scene for tiny-model tests.
pub fn tiny_scene(index: usize) -> zsldb::synth::SynthScene {
    let cfg = zsldb::synth::SynthConfig {
        image_size: 16,
        kernel_size: 5,
        blur_length: (2, 4),
        shapes: (1, 2),
        ..zsldb::synth::SynthConfig::default()
    };
    zsldb::synth::generate_scene(&cfg, index).unwrap()
}
