//! On-disk dataset layout and corpus manifests.
//!
//! ```text
//! <root>/scene_<id>/blur.png     8-bit RGB observation
//! <root>/scene_<id>/sharp.png    8-bit RGB ground truth
//! <root>/scene_<id>/depth.png    16-bit grayscale, millimetres, 0 = no return
//! <root>/scene_<id>/kernel.npy   optional float32 k x k blur kernel
//! <root>/scene_<id>/meta.json    optional capture / synthesis parameters
//! <root>/manifest.json           scene directories per split
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blur::Kernel;
use crate::image::{DepthMap, Image};
use crate::synth::{generate_scene, SceneMeta, SceneTriple, SynthConfig, SCENE_FORMAT_VERSION};
use crate::{Error, Result};

pub const BLUR_FILE: &str = "blur.png";
pub const SHARP_FILE: &str = "sharp.png";
pub const DEPTH_FILE: &str = "depth.png";
pub const KERNEL_FILE: &str = "kernel.npy";
pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Decorrelates the split shuffle from scene generation, which uses the same corpus seed.
const SPLIT_SALT: u64 = 0x5eed_0f_5b11_7000;

pub fn scene_dir_name(id: &str) -> String {
    format!("scene_{id}")
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let rgb: Vec<u8> = match img.channels {
        3 => img.data.iter().map(|v| to_u8(*v)).collect(),
        1 => img.data.iter().flat_map(|v| [to_u8(*v); 3]).collect(),
        c => return Err(Error::Shape(format!("cannot store a {c}-channel image as PNG"))),
    };
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(img.width as u32, img.height as u32, rgb)
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(path, e.to_string()))
}

pub fn read_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::data(path, "file is missing"));
    }
    let dynimg = image::open(path).map_err(|e| Error::data(path, format!("cannot decode: {e}")))?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, 3, data)
}

pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let mm: Vec<u16> = depth
        .meters
        .iter()
        .zip(&depth.valid)
        .map(|(m, v)| if *v { (m * 1000.0).round().clamp(1.0, 65535.0) as u16 } else { 0 })
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(depth.width as u32, depth.height as u32, mm)
        .ok_or_else(|| Error::Shape("depth buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(path, e.to_string()))
}

/// Reads a 16-bit millimetre depth PNG; zeros become invalid pixels.
pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    if !path.exists() {
        return Err(Error::data(path, "file is missing"));
    }
    let dynimg = image::open(path).map_err(|e| Error::data(path, format!("cannot decode: {e}")))?;
    let luma = match dynimg {
        image::DynamicImage::ImageLuma16(l) => l,
        other => {
            return Err(Error::data(
                path,
                format!("expected a 16-bit grayscale depth image, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = luma.dimensions();
    let raw = luma.as_raw();
    let meters = raw.iter().map(|v| *v as f32 / 1000.0).collect();
    let valid = raw.iter().map(|v| *v != 0).collect();
    DepthMap::new(h as usize, w as usize, meters, valid)
}

pub fn write_kernel(path: &Path, kernel: &Kernel) -> Result<()> {
    kernel.to_tensor(&Device::Cpu, candle_core::DType::F32)?.write_npy(path)?;
    Ok(())
}

pub fn read_kernel(path: &Path) -> Result<Kernel> {
    let t = Tensor::read_npy(path).map_err(|e| Error::data(path, format!("cannot read kernel: {e}")))?;
    let kernel = Kernel::from_tensor(&t).map_err(|e| Error::data(path, e.to_string()))?;
    kernel.validate().map_err(|e| Error::data(path, e.to_string()))?;
    Ok(kernel)
}

/// Writes a scene directory; `meta` is written when given.
pub fn save_scene(dir: &Path, scene: &SceneTriple, meta: Option<&SceneMeta>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_png(&dir.join(BLUR_FILE), &scene.blurred)?;
    write_png(&dir.join(SHARP_FILE), &scene.sharp)?;
    write_depth_png(&dir.join(DEPTH_FILE), &scene.depth)?;
    if let Some(k) = &scene.true_kernel {
        write_kernel(&dir.join(KERNEL_FILE), k)?;
    }
    if let Some(meta) = meta {
        fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    }
    Ok(())
}

fn scene_id(dir: &Path) -> String {
    let name = dir.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    name.strip_prefix("scene_").unwrap_or(&name).to_string()
}

/// Loads a scene directory (synthetic or captured). Every failure names the offending file.
pub fn load_scene(dir: &Path) -> Result<SceneTriple> {
    if !dir.is_dir() {
        return Err(Error::data(dir, "scene directory does not exist"));
    }
    let blurred = read_png(&dir.join(BLUR_FILE))?;
    let sharp = read_png(&dir.join(SHARP_FILE))?;
    let depth_path = dir.join(DEPTH_FILE);
    let depth = read_depth_png(&depth_path)?;
    // Blame the file whose size disagrees with the other two.
    let sizes = [
        (BLUR_FILE, (blurred.height, blurred.width)),
        (SHARP_FILE, (sharp.height, sharp.width)),
        (DEPTH_FILE, (depth.height, depth.width)),
    ];
    for i in 0..3 {
        let (name, size) = sizes[i];
        let (_, a) = sizes[(i + 1) % 3];
        let (_, b) = sizes[(i + 2) % 3];
        if size != a && a == b {
            return Err(Error::data(
                dir.join(name),
                format!("size {}x{} differs from the other scene files ({}x{})", size.0, size.1, a.0, a.1),
            ));
        }
    }
    if sizes[0].1 != sizes[1].1 || sizes[1].1 != sizes[2].1 {
        return Err(Error::data(dir, "blur.png, sharp.png and depth.png have three different sizes"));
    }
    if depth.valid_count() == 0 {
        return Err(Error::data(&depth_path, "depth map has no valid pixels"));
    }
    let kernel_path = dir.join(KERNEL_FILE);
    let true_kernel = if kernel_path.exists() { Some(read_kernel(&kernel_path)?) } else { None };
    let meta_path = dir.join(META_FILE);
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::data(&meta_path, e.to_string()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::data(&meta_path, format!("invalid JSON: {e}")))?;
        if let Some(v) = value.get("format_version").and_then(|v| v.as_u64()) {
            if v > SCENE_FORMAT_VERSION as u64 {
                return Err(Error::data(&meta_path, format!("unsupported format version {v}")));
            }
        }
    }
    Ok(SceneTriple {
        id: scene_id(dir),
        blurred,
        depth,
        sharp,
        true_kernel,
    })
}

/// Parsed synthesis metadata of a generated scene.
pub fn load_meta(dir: &Path) -> Result<SceneMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::data(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::data(&path, format!("invalid metadata: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    /// Scene directories relative to the manifest's directory.
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, format!("invalid manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, val, test)"))),
        }
    }

    /// Absolute scene directories of a split, given the manifest file location.
    pub fn resolve(&self, manifest_path: &Path, split: &str) -> Result<Vec<PathBuf>> {
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        Ok(self.split(split)?.iter().map(|s| root.join(s)).collect())
    }
}

/// Seeded partition of scene indices `0..n` into train/val/test.
pub fn split_indices(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be in [0, 1] and sum to 1, got {a}/{b}/{c}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_train = (n as f64 * a).round() as usize;
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok((idx, val, test))
}

/// Generates `n_scenes` scenes under `root` and writes the manifest. Scene generation is
/// delegated to `for_each`, which lets callers parallelize; it receives every scene index.
pub fn make_corpus(
    cfg: &SynthConfig,
    n_scenes: usize,
    ratios: (f64, f64, f64),
    root: &Path,
    for_each: impl Fn(&(dyn Fn(usize) -> Result<()> + Sync), usize) -> Result<()>,
) -> Result<Manifest> {
    cfg.validate()?;
    if n_scenes < 10 {
        return Err(Error::Config(format!("a corpus needs at least 10 scenes, got {n_scenes}")));
    }
    let (train, val, test) = split_indices(n_scenes, ratios, cfg.seed)?;
    fs::create_dir_all(root)?;
    let write_one = |i: usize| -> Result<()> {
        let scene = generate_scene(cfg, i)?;
        save_scene(&root.join(scene_dir_name(&scene.triple.id)), &scene.triple, Some(&scene.meta))
    };
    for_each(&write_one, n_scenes)?;
    let names = |v: Vec<usize>| v.into_iter().map(|i| scene_dir_name(&format!("{i:04}"))).collect();
    let manifest = Manifest {
        format_version: SCENE_FORMAT_VERSION,
        seed: cfg.seed,
        train: names(train),
        val: names(val),
        test: names(test),
    };
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Sequential driver for [`make_corpus`].
pub fn sequential(f: &(dyn Fn(usize) -> Result<()> + Sync), n: usize) -> Result<()> {
    (0..n).try_for_each(f)
}
