//! Synthetic debris scenes, the polygon annotation format and dataset
//! directories.
//!
//! A dataset directory holds `images/NNNNN.png` (8-bit RGB), `labels/NNNNN.txt`
//! (one `class x1 y1 ... xn yn` line per instance, normalised coordinates) and
//! `manifest.json` with the train/test split.

mod annotation;
mod raster;
mod render;

pub use annotation::{
    format_annotations, load_annotations, parse_annotations, save_annotations, InstanceAnnotation,
};
pub use raster::{polygon_area, polygon_perimeter, rasterize_polygon};
pub use render::render_sample;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Mask;
use crate::rng::{stream_id, Pcg32};
use crate::tensor::Tensor;

pub const BANDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::Config(format!(
                "unknown difficulty `{s}` (easy|hard)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Size of the training split; `None` takes 79% of `count`, rounded.
    pub train_count: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            count: 100,
            seed: 0,
            difficulty: Difficulty::Easy,
            min_blobs: 0,
            max_blobs: 4,
            train_count: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be >= 1".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image size {} is below 8",
                self.image_size
            )));
        }
        if self.min_blobs > self.max_blobs {
            return Err(Error::Config(format!(
                "min_blobs {} exceeds max_blobs {}",
                self.min_blobs, self.max_blobs
            )));
        }
        if self.train_count.is_some_and(|t| t > self.count) {
            return Err(Error::Config("train_count exceeds count".into()));
        }
        Ok(())
    }

    pub fn train_size(&self) -> usize {
        self.train_count.unwrap_or((self.count * 79 + 50) / 100)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub size: usize,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }
}

/// Renders image `index` of the dataset described by `cfg`. Each index draws
/// from its own PCG32 stream, so images are independent of generation order.
pub fn render_index(cfg: &GenConfig, index: usize) -> Result<(Tensor, Vec<InstanceAnnotation>)> {
    let mut rng = Pcg32::new(cfg.seed, index as u64);
    render_sample(&mut rng, cfg)
}

pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("images").join(format!("{id:05}.png"))
}

pub fn label_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("labels").join(format!("{id:05}.txt"))
}

fn split(cfg: &GenConfig) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..cfg.count).collect();
    Pcg32::new(cfg.seed, stream_id("split")).shuffle(&mut ids);
    let mut train = ids[..cfg.train_size()].to_vec();
    let mut test = ids[cfg.train_size()..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn generate_dataset(cfg: &GenConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for id in 0..cfg.count {
        let (image, annotations) = render_index(cfg, id)?;
        write_png(&image_path(dir, id), &image)?;
        save_annotations(label_path(dir, id), &annotations)?;
    }
    let (train, test) = split(cfg);
    let manifest = Manifest {
        train,
        test,
        seed: cfg.seed,
        size: cfg.image_size,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Writes a `(1, 3, H, W)` tensor with values in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let [n, c, h, w] = image.shape();
    if n != 1 || c != BANDS {
        return Err(Error::shape(
            "write_png",
            format!("expected (1,3,H,W), got {:?}", image.shape()),
        ));
    }
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for b in 0..BANDS {
            rgb.push((image.data()[b * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(e) => Error::io(path, e),
        other => Error::Invalid(format!("{}: {other}", path.display())),
    };
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(&rgb).map_err(io_err)?;
    writer.finish().map_err(io_err)
}

/// Reads an 8-bit RGB PNG into a `(1, 3, H, W)` tensor with values `k / 255`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Invalid(format!("{}: {msg}", path.display()));
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| bad("image too large".into()))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!(
            "expected 8-bit RGB, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = w * h;
    let mut data = vec![0.0; BANDS * plane];
    for p in 0..plane {
        for b in 0..BANDS {
            data[b * plane + p] = buf[p * BANDS + b] as f64 / 255.0;
        }
    }
    Tensor::new([1, BANDS, h, w], data)
}

/// One loaded image with its instances.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub image: Tensor,
    pub annotations: Vec<InstanceAnnotation>,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.image.shape()[3]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[2]
    }

    /// Union of the instance masks.
    pub fn union_mask(&self) -> Mask {
        let mut m = Mask::new(self.width(), self.height());
        for a in &self.annotations {
            m.merge(&a.mask)
                .expect("annotations are rasterised at the image size");
        }
        m
    }

    /// Union mask as a `(1, 1, H, W)` 0/1 target.
    pub fn target(&self) -> Tensor {
        let data = self
            .union_mask()
            .bits()
            .iter()
            .map(|&b| b as u8 as f64)
            .collect();
        Tensor::new([1, 1, self.height(), self.width()], data).expect("finite")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A dataset directory opened through its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let manifest = Manifest::load(root.join("manifest.json"))?;
        Ok(Dataset { root, manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.manifest.train,
            Split::Test => &self.manifest.test,
        }
    }

    pub fn load_sample(&self, id: usize) -> Result<Sample> {
        let image = read_png(&image_path(&self.root, id))?;
        let [_, _, h, w] = image.shape();
        let annotations = load_annotations(label_path(&self.root, id), w, h)?;
        Ok(Sample {
            id,
            image,
            annotations,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.ids(split)
            .iter()
            .map(|&id| self.load_sample(id))
            .collect()
    }
}
