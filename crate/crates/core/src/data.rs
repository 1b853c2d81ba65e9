//! Dataset loading in the MVTec directory layout and a procedural benchmark.
//!
//! Layout: `<root>/<category>/train/good/*`, `<root>/<category>/test/<defect>/*`
//! and `<root>/<category>/ground_truth/<defect>/<stem>_mask.*`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::{Error, ImageTensor, MaskImage, Result, Rng, ValueRange};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];
pub const GOOD: &str = "good";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub category: String,
    pub split: Split,
    pub resize: usize,
    #[serde(default)]
    pub center_crop: Option<usize>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resize == 0 {
            return Err(Error::InvalidArgument("resize must be positive".into()));
        }
        match self.center_crop {
            Some(c) if c == 0 || c > self.resize => Err(Error::InvalidArgument(format!(
                "center crop {c} must lie in 1..={}",
                self.resize
            ))),
            _ => Ok(()),
        }
    }

    pub fn output_size(&self) -> usize {
        self.center_crop.unwrap_or(self.resize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// RGB image in `[0, 1]`.
    pub image: ImageTensor,
    pub label: Label,
    /// Present exactly for anomalous samples.
    pub gt_mask: Option<MaskImage>,
    /// Path relative to the category, without extension, e.g. `test/crack/003`.
    pub image_id: String,
    pub defect: String,
}

impl LabeledSample {
    /// Ground-truth pixel labels; all zeros for normal samples.
    pub fn pixel_labels(&self) -> MaskImage {
        self.gt_mask
            .clone()
            .unwrap_or_else(|| MaskImage::zeros(self.image.height(), self.image.width()))
    }

    pub fn is_anomalous(&self) -> bool {
        self.label == Label::Anomalous
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn crop_offsets(size: usize, crop: Option<usize>) -> (usize, usize) {
    match crop {
        Some(c) => ((size - c) / 2, c),
        None => (0, size),
    }
}

/// Bilinear resize to `resize x resize`, then an optional centre crop.
pub fn preprocess_image(img: &image::DynamicImage, resize: usize, crop: Option<usize>) -> Result<ImageTensor> {
    let rgb = img.to_rgb32f();
    let size = resize as u32;
    let resized = if rgb.dimensions() == (size, size) {
        rgb
    } else {
        imageops::resize(&rgb, size, size, FilterType::Triangle)
    };
    let (off, side) = crop_offsets(resize, crop);
    let mut data = vec![0f32; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let p = resized.get_pixel((x + off) as u32, (y + off) as u32);
            for c in 0..3 {
                data[(c * side + y) * side + x] = p[c].clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(3, side, side, data, ValueRange::Unit)
}

/// Nearest-neighbour resize, centre crop and binarisation at `> 127`.
pub fn preprocess_mask(img: &image::DynamicImage, resize: usize, crop: Option<usize>) -> Result<MaskImage> {
    let gray = img.to_luma8();
    let size = resize as u32;
    let resized = if gray.dimensions() == (size, size) {
        gray
    } else {
        imageops::resize(&gray, size, size, FilterType::Nearest)
    };
    let (off, side) = crop_offsets(resize, crop);
    Ok(MaskImage::from_fn(side, side, |y, x| {
        resized.get_pixel((x + off) as u32, (y + off) as u32)[0] > 127
    }))
}

fn find_mask(gt_dir: &Path, stem: &str) -> Option<PathBuf> {
    let candidates = [format!("{stem}_mask"), stem.to_string()];
    let entries = sorted_entries(gt_dir).ok()?;
    candidates.iter().find_map(|want| {
        entries
            .iter()
            .find(|p| is_image(p) && p.file_stem().and_then(|s| s.to_str()) == Some(want.as_str()))
            .cloned()
    })
}

/// Loads one split of one category in lexicographic path order.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let category_dir = spec.root.join(&spec.category);
    let split_dir = category_dir.join(spec.split.dir());
    if !split_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing directory {}",
            split_dir.display()
        )));
    }
    let defect_dirs: Vec<PathBuf> = match spec.split {
        Split::Train => vec![split_dir.join(GOOD)],
        Split::Test => sorted_entries(&split_dir)?.into_iter().filter(|p| p.is_dir()).collect(),
    };
    let mut samples = Vec::new();
    for dir in defect_dirs {
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", dir.display())));
        }
        let defect = dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let anomalous = defect != GOOD;
        for path in sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)) {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let image = preprocess_image(&open_image(&path)?, spec.resize, spec.center_crop)?;
            let gt_mask = if anomalous {
                let gt_dir = category_dir.join("ground_truth").join(&defect);
                let mask_path = find_mask(&gt_dir, &stem).ok_or_else(|| {
                    Error::Dataset(format!(
                        "no ground-truth mask for {} under {}",
                        path.display(),
                        gt_dir.display()
                    ))
                })?;
                Some(preprocess_mask(&open_image(&mask_path)?, spec.resize, spec.center_crop)?)
            } else {
                None
            };
            samples.push(LabeledSample {
                image,
                label: if anomalous { Label::Anomalous } else { Label::Normal },
                gt_mask,
                image_id: format!("{}/{defect}/{stem}", spec.split.dir()),
                defect: defect.clone(),
            });
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 100,
            n_test_normal: 20,
            n_test_anomalous: 20,
            size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

pub const SYNTHETIC_DEFECTS: [&str; 3] = ["rectangle", "scribble", "color"];

/// Seeded procedural texture: tilted stripes over a smooth colour field.
fn normal_texture(size: usize, rng: &mut Rng) -> Vec<[f32; 3]> {
    let base = [0.55, 0.45, 0.35].map(|c: f32| c + rng.range_f32(-0.03, 0.03));
    let angle = (30.0f32 + rng.range_f32(-5.0, 5.0)).to_radians();
    let period = 8.0 + rng.range_f32(-0.5, 0.5);
    let phase = rng.range_f32(0.0, std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let cell = 16usize;
    let grid = size / cell + 2;
    let field: Vec<f32> = (0..grid * grid).map(|_| rng.range_f32(-1.0, 1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 * ca + y as f32 * sa) * std::f32::consts::TAU / period + phase;
            let stripe = 0.12 * u.sin();
            let (gx, gy) = (x as f32 / cell as f32, y as f32 / cell as f32);
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - ix as f32, gy - iy as f32);
            let at = |i: usize, j: usize| field[j * grid + i];
            let smooth = at(ix, iy) * (1.0 - fx) * (1.0 - fy)
                + at(ix + 1, iy) * fx * (1.0 - fy)
                + at(ix, iy + 1) * (1.0 - fx) * fy
                + at(ix + 1, iy + 1) * fx * fy;
            let jitter = 0.01 * rng.normal();
            out.push(base.map(|b| b + stripe + 0.04 * smooth + jitter));
        }
    }
    out
}

fn quantise(pixels: &[[f32; 3]], size: usize) -> Result<ImageTensor> {
    let mut data = vec![0f32; 3 * size * size];
    for (i, p) in pixels.iter().enumerate() {
        for c in 0..3 {
            data[c * size * size + i] = (p[c].clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    ImageTensor::new(3, size, size, data, ValueRange::Unit)
}

/// Paints one defect; returns the affected pixels.
fn inject_defect(pixels: &mut [[f32; 3]], size: usize, kind: usize, rng: &mut Rng) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    let s = size as f32 / 64.0;
    match kind {
        0 => {
            let w = ((rng.range_f32(5.0, 14.0) * s) as usize).max(2);
            let h = ((rng.range_f32(5.0, 14.0) * s) as usize).max(2);
            let x0 = rng.int_in(0, size - w);
            let y0 = rng.int_in(0, size - h);
            let color = [rng.range_f32(0.0, 1.0), rng.range_f32(0.0, 0.3), rng.range_f32(0.5, 1.0)];
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    pixels[y * size + x] = color;
                    mask[y * size + x] = true;
                }
            }
        }
        1 => {
            let (mut x, mut y) = (
                rng.range_f32(0.25, 0.75) * size as f32,
                rng.range_f32(0.25, 0.75) * size as f32,
            );
            let mut dir = rng.range_f32(0.0, std::f32::consts::TAU);
            let steps = (rng.int_in(20, 40) as f32 * s) as usize;
            let shade = rng.range_f32(0.05, 0.2);
            for _ in 0..steps {
                dir += rng.range_f32(-0.5, 0.5);
                x = (x + dir.cos()).clamp(0.0, size as f32 - 2.0);
                y = (y + dir.sin()).clamp(0.0, size as f32 - 2.0);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (y as usize + dy) * size + x as usize + dx;
                        pixels[i] = [shade; 3];
                        mask[i] = true;
                    }
                }
            }
        }
        _ => {
            let r = rng.range_f32(5.0, 10.0) * s;
            let cx = rng.range_f32(r, size as f32 - r);
            let cy = rng.range_f32(r, size as f32 - r);
            let shift = [0.3, -0.2, -0.25].map(|v: f32| v * if rng.uniform() < 0.5 { 1.0 } else { -1.0 });
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        let p = &mut pixels[y * size + x];
                        for c in 0..3 {
                            p[c] += shift[c];
                        }
                        mask[y * size + x] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Deterministic train and test sets of procedural textures with injected defects.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticBenchmark> {
    let SyntheticSpec {
        seed,
        n_train,
        n_test_normal,
        n_test_anomalous,
        size,
    } = *spec;
    if size < 32 {
        return Err(Error::InvalidArgument(format!("synthetic size must be at least 32, got {size}")));
    }
    if n_train == 0 {
        return Err(Error::InvalidArgument("n_train must be at least 1".into()));
    }
    let master = Rng::new(seed);
    let normal = |stream: u64, split: &str, index: usize| -> Result<LabeledSample> {
        let mut rng = master.split(stream);
        Ok(LabeledSample {
            image: quantise(&normal_texture(size, &mut rng), size)?,
            label: Label::Normal,
            gt_mask: None,
            image_id: format!("{split}/{GOOD}/{index:03}"),
            defect: GOOD.into(),
        })
    };
    let train = (0..n_train)
        .map(|i| normal(i as u64, "train", i))
        .collect::<Result<Vec<_>>>()?;
    let mut test = (0..n_test_normal)
        .map(|i| normal((1 << 32) + i as u64, "test", i))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..n_test_anomalous {
        let mut rng = master.split((2 << 32) + i as u64);
        let kind = i % SYNTHETIC_DEFECTS.len();
        let mut pixels = normal_texture(size, &mut rng);
        let mask = inject_defect(&mut pixels, size, kind, &mut rng);
        let mask = MaskImage::new(size, size, mask.into_iter().map(u8::from).collect())?;
        let defect = SYNTHETIC_DEFECTS[kind];
        test.push(LabeledSample {
            image: quantise(&pixels, size)?,
            label: Label::Anomalous,
            gt_mask: Some(mask),
            image_id: format!("test/{defect}/{i:03}"),
            defect: defect.into(),
        });
    }
    Ok(SyntheticBenchmark { train, test })
}

fn to_rgb8(img: &ImageTensor) -> Result<RgbImage> {
    let img = img.to_unit();
    let [c, h, w] = img.shape();
    if c != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (img.get(ch, y as usize, x as usize) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a benchmark as `<root>/<category>/...` in the MVTec layout.
pub fn write_mvtec_layout(bench: &SyntheticBenchmark, root: &Path, category: &str) -> Result<PathBuf> {
    let base = root.join(category);
    for sample in bench.train.iter().chain(&bench.test) {
        let path = base.join(format!("{}.png", sample.image_id));
        let rgb = to_rgb8(&sample.image)?;
        save(|p| rgb.save(p), &path)?;
        if let Some(mask) = &sample.gt_mask {
            let stem = sample.image_id.rsplit('/').next().unwrap_or_default();
            let path = base
                .join("ground_truth")
                .join(&sample.defect)
                .join(format!("{stem}_mask.png"));
            let gray: GrayImage = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
                Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
            });
            save(|p| gray.save(p), &path)?;
        }
    }
    Ok(base)
}
