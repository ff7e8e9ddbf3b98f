//! Point-annotation datasets: a deterministic synthetic scene generator,
//! JSON/PNG file ingestion, and crop/flip augmentation with
//! coordinate-consistent point transforms.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

/// RGB image, channel-major `[3, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; 3 * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }
}

/// One annotated image: sub-pixel point coordinates `(x, y)` with
/// `0 <= x < W`, `0 <= y < H`; the point count is the object count.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub points: Vec<(f64, f64)>,
    pub source_id: String,
}

/// One object category with disjoint train/test splits.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub class_name: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl ShapeClass {
    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Ring => "ring",
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            ShapeClass::Disk => [0.90, 0.35, 0.30],
            ShapeClass::Square => [0.30, 0.90, 0.35],
            ShapeClass::Triangle => [0.35, 0.40, 0.90],
            ShapeClass::Ring => [0.90, 0.85, 0.30],
        }
    }

    /// Is the offset (dx, dy) from the recorded center inside the shape?
    /// Shapes are laid out so the recorded center is the pixel-mass centroid.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeClass::Disk => dx * dx + dy * dy <= r * r,
            // half-side sqrt(pi)/2 * r: same area as the disk
            ShapeClass::Square => dx.abs() <= 0.886 * r && dy.abs() <= 0.886 * r,
            ShapeClass::Triangle => {
                // upward isoceles triangle, apex at dy = -r, base at dy = r/2
                if dy < -r || dy > 0.5 * r {
                    return false;
                }
                let half_width = 0.9 * r * (dy + r) / (1.5 * r);
                dx.abs() <= half_width
            }
            ShapeClass::Ring => {
                let d2 = dx * dx + dy * dy;
                (0.55 * r) * (0.55 * r) <= d2 && d2 <= r * r
            }
        }
    }
}

/// Deterministic synthetic task description; a fixed seed yields a
/// bitwise-identical dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub shape: ShapeClass,
    pub count_range: (usize, usize),
    pub radius_range: (f64, f64),
    pub noise: f64,
    pub extent: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.count_range.0 > self.count_range.1 {
            return Err(CoreError::InvalidSpec(format!(
                "count range {:?} is inverted",
                self.count_range
            )));
        }
        if self.radius_range.0 > self.radius_range.1 || self.radius_range.0 <= 0.0 {
            return Err(CoreError::InvalidSpec(format!(
                "radius range {:?} is invalid",
                self.radius_range
            )));
        }
        if self.extent == 0 {
            return Err(CoreError::InvalidSpec("extent must be positive".into()));
        }
        // Shape bodies are kept disjoint by a center separation of
        // 2.2 * r_max inside the margins; a square grid at that separation
        // bounds what sequential placement can fit.
        let sep = 2.2 * self.radius_range.1;
        let usable = (self.extent as f64 - 2.0 * (self.radius_range.1 + 1.5)).max(0.0);
        let grid = (usable / sep + 1.0).floor();
        if self.count_range.1 as f64 > (grid * grid).max(1.0) {
            return Err(CoreError::ImpossiblePacking {
                requested: self.count_range.1,
                radius: self.radius_range.1,
                extent: self.extent,
            });
        }
        Ok(())
    }
}

fn render_sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, source_id: String) -> Result<Sample> {
    let extent = spec.extent;
    let mut image = Image::filled(extent, extent, 0.1);
    if spec.noise > 0.0 {
        for p in image.pixels.iter_mut() {
            *p += rng.gen_range(-spec.noise..spec.noise);
        }
    }
    let k = rng.gen_range(spec.count_range.0..=spec.count_range.1);
    let min_sep2 = (2.2 * spec.radius_range.1).powi(2);
    let mut placed: Vec<(f64, f64, f64)> = Vec::with_capacity(k);
    let mut tries = 0usize;
    while placed.len() < k {
        tries += 1;
        if tries > 5000 {
            return Err(CoreError::ImpossiblePacking {
                requested: k,
                radius: spec.radius_range.1,
                extent,
            });
        }
        let r = rng.gen_range(spec.radius_range.0..=spec.radius_range.1);
        let margin = r + 1.5;
        if 2.0 * margin >= extent as f64 {
            return Err(CoreError::ImpossiblePacking {
                requested: k,
                radius: spec.radius_range.1,
                extent,
            });
        }
        let cx = rng.gen_range(margin..extent as f64 - margin);
        let cy = rng.gen_range(margin..extent as f64 - margin);
        if placed
            .iter()
            .all(|&(px, py, _)| (cx - px).powi(2) + (cy - py).powi(2) >= min_sep2)
        {
            placed.push((cx, cy, r));
        }
    }
    let color = spec.shape.color();
    for &(cx, cy, r) in &placed {
        let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + r + 2.0).ceil() as usize).min(extent);
        let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + r + 2.0).ceil() as usize).min(extent);
        for y in y0..y1 {
            for x in x0..x1 {
                if spec.shape.contains(x as f64 - cx, y as f64 - cy, r) {
                    for c in 0..3 {
                        image.set(c, y, x, color[c]);
                    }
                }
            }
        }
    }
    for p in image.pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(Sample {
        image,
        points: placed.iter().map(|&(cx, cy, _)| (cx, cy)).collect(),
        source_id,
    })
}

/// Generate a synthetic task: every sample renders K disjoint shapes
/// (K uniform in the count range) and records their centers as points.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::with_capacity(spec.train_samples);
    for i in 0..spec.train_samples {
        train.push(render_sample(
            spec,
            &mut rng,
            format!("{}/train/{i:04}", spec.shape.name()),
        )?);
    }
    let mut test = Vec::with_capacity(spec.test_samples);
    for i in 0..spec.test_samples {
        test.push(render_sample(
            spec,
            &mut rng,
            format!("{}/test/{i:04}", spec.shape.name()),
        )?);
    }
    Ok(TaskDataset {
        class_name: spec.shape.name().to_string(),
        train,
        test,
    })
}

/// Random crop plus optional horizontal flip. Points inside the half-open
/// crop window are kept and re-expressed in crop coordinates; a flip maps
/// x to (W_crop - 1) - x. Draw order: x0, y0, flip.
pub fn augment(sample: &Sample, crop: usize, flip_prob: f64, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (sample.image.height, sample.image.width);
    if crop > w || crop > h {
        return Err(CoreError::InvalidSpec(format!(
            "crop {crop} exceeds image extent {w}x{h}"
        )));
    }
    let x0 = rng.gen_range(0..=(w - crop));
    let y0 = rng.gen_range(0..=(h - crop));
    let flip = flip_prob > 0.0 && rng.gen_bool(flip_prob);

    let mut image = Image::filled(crop, crop, 0.0);
    for c in 0..3 {
        for y in 0..crop {
            for x in 0..crop {
                let sx = if flip { x0 + (crop - 1 - x) } else { x0 + x };
                image.set(c, y, x, sample.image.get(c, y0 + y, sx));
            }
        }
    }
    let points = sample
        .points
        .iter()
        .filter(|&&(x, y)| {
            x >= x0 as f64 && x < (x0 + crop) as f64 && y >= y0 as f64 && y < (y0 + crop) as f64
        })
        .map(|&(x, y)| {
            let cx = x - x0 as f64;
            let cy = y - y0 as f64;
            if flip {
                // sub-pixel coordinates in (crop-1, crop) would map below
                // zero under the pixel-center reflection; clamp them onto
                // the first pixel so the sample invariant holds
                (((crop - 1) as f64 - cx).max(0.0), cy)
            } else {
                (cx, cy)
            }
        })
        .collect();
    Ok(Sample {
        image,
        points,
        source_id: sample.source_id.clone(),
    })
}

// --- annotation files ---
//
// One JSON document per split:
//   { "class": "<name>", "samples": [ { "image": "<relative path>",
//     "points": [[x, y], ...] }, ... ] }
// Images are 8-bit RGB rasters relative to the dataset directory.

#[derive(Serialize, Deserialize)]
struct SplitFile {
    class: String,
    samples: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    image: String,
    points: Vec<(f64, f64)>,
}

fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| CoreError::Schema {
            file: path.to_path_buf(),
            detail: format!("cannot read image: {e}"),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.set(c, y, x, px.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}

fn save_image(image: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(image.width as u32, image.height as u32);
    for y in 0..image.height {
        for x in 0..image.width {
            let px = [
                (image.get(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (image.get(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (image.get(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| CoreError::Schema {
        file: path.to_path_buf(),
        detail: format!("cannot write image: {e}"),
    })
}

fn load_split(dir: &Path, split: &str) -> Result<(String, Vec<Sample>)> {
    let file = dir.join(format!("{split}.json"));
    let text = fs::read_to_string(&file).map_err(|e| CoreError::io(&file, e))?;
    let parsed: SplitFile = serde_json::from_str(&text).map_err(|e| CoreError::Schema {
        file: file.clone(),
        detail: e.to_string(),
    })?;
    let mut samples = Vec::with_capacity(parsed.samples.len());
    for entry in parsed.samples {
        let img_path = dir.join(&entry.image);
        if !img_path.exists() {
            return Err(CoreError::Schema {
                file: file.clone(),
                detail: format!("missing image file '{}'", entry.image),
            });
        }
        let image = load_image(&img_path)?;
        let source_id = format!("{split}/{}", entry.image);
        for (index, &(x, y)) in entry.points.iter().enumerate() {
            if !(0.0..image.width as f64).contains(&x) || !(0.0..image.height as f64).contains(&y) {
                return Err(CoreError::PointOutOfBounds {
                    sample: source_id.clone(),
                    index,
                    x,
                    y,
                    width: image.width,
                    height: image.height,
                });
            }
        }
        samples.push(Sample {
            image,
            points: entry.points,
            source_id,
        });
    }
    Ok((parsed.class, samples))
}

/// Load a dataset directory containing `train.json`, `test.json` and the
/// image files they reference.
pub fn load_annotations(dir: impl AsRef<Path>) -> Result<TaskDataset> {
    let dir = dir.as_ref();
    let (class_train, train) = load_split(dir, "train")?;
    let (class_test, test) = load_split(dir, "test")?;
    if class_train != class_test {
        return Err(CoreError::Schema {
            file: dir.join("test.json"),
            detail: format!("class '{class_test}' does not match train class '{class_train}'"),
        });
    }
    Ok(TaskDataset {
        class_name: class_train,
        train,
        test,
    })
}

/// Persist a dataset to the annotation schema (8-bit PNG images plus one
/// JSON document per split).
pub fn save_dataset(dataset: &TaskDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| CoreError::io(&img_dir, e))?;
    for (split, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        let mut entries = Vec::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            let rel = format!("images/{split}_{i:04}.png");
            save_image(&sample.image, &dir.join(&rel))?;
            entries.push(SampleEntry {
                image: rel,
                points: sample.points.clone(),
            });
        }
        let file = dir.join(format!("{split}.json"));
        let doc = SplitFile {
            class: dataset.class_name.clone(),
            samples: entries,
        };
        let text = serde_json::to_string_pretty(&doc).expect("serializable");
        fs::write(&file, text).map_err(|e| CoreError::io(&file, e))?;
    }
    Ok(dir.to_path_buf())
}
