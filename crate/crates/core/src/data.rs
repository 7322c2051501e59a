//! Synthetic motion-blur pairs, GoPro-style folders, patch sampling and flips.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::conv::reflect_index;
use crate::params::fnv1a;
use crate::tensor::Tensor;

/// A `(1, 3, H, W)` image with values in `[0, 1]`.
pub type Image = Tensor<f32>;

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "id\tlength\tangle\tcurvature\tnoise\tsplit";

#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    /// Row-major `size x size` weights.
    pub weights: Vec<f64>,
    pub size: usize,
    pub length: usize,
    pub angle: f64,
    pub curvature: f64,
    pub seed: u64,
}

impl BlurKernel {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.size + x]
    }
}

/// Points spaced one pixel apart along a circular arc of signed curvature
/// `curvature`, centred on the origin and heading along `angle`.
pub fn trajectory(length: usize, angle: f64, curvature: f64) -> Vec<(f64, f64)> {
    let (c, s) = (angle.cos(), angle.sin());
    (0..length)
        .map(|j| {
            let t = j as f64 - (length as f64 - 1.0) / 2.0;
            let (u, v) = if curvature.abs() < 1e-12 {
                (t, 0.0)
            } else {
                ((curvature * t).sin() / curvature, (1.0 - (curvature * t).cos()) / curvature)
            };
            (u * c - v * s, u * s + v * c)
        })
        .collect()
}

/// Rasterizes a motion trajectory onto a `size x size` grid with bilinear
/// splatting and normalizes it to unit sum.
pub fn gen_motion_kernel(length: usize, angle: f64, curvature: f64, size: usize, seed: u64) -> Result<BlurKernel> {
    if size.is_multiple_of(2) {
        return Err(Error::config("kernel_size", format!("must be odd, got {size}")));
    }
    if length == 0 || length > size {
        return Err(Error::config(
            "length",
            format!("motion length {length} must lie in 1..={size}"),
        ));
    }
    if !angle.is_finite() || !curvature.is_finite() {
        return Err(Error::config("angle", "angle and curvature must be finite"));
    }
    let r = (size / 2) as f64;
    let mut w = vec![0.0; size * size];
    for (x, y) in trajectory(length, angle, curvature) {
        let (px, py) = ((x + r).clamp(0.0, size as f64 - 1.0), (y + r).clamp(0.0, size as f64 - 1.0));
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
        w[y0 * size + x0] += (1.0 - fx) * (1.0 - fy);
        w[y0 * size + x1] += fx * (1.0 - fy);
        w[y1 * size + x0] += (1.0 - fx) * fy;
        w[y1 * size + x1] += fx * fy;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(BlurKernel {
        weights: w,
        size,
        length,
        angle,
        curvature,
        seed,
    })
}

/// Convolves every channel with `k` (reflect padding), adds Gaussian noise
/// of standard deviation `noise_sigma` and clamps to `[0, 1]`.
pub fn apply_blur(sharp: &Image, k: &BlurKernel, noise_sigma: f64, rng: &mut impl Rng) -> Result<Image> {
    let (b, c, h, w) = sharp.dims4();
    let r = (k.size / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = (0..k.size)
        .flat_map(|i| (0..k.size).map(move |j| (i, j)))
        .filter_map(|(i, j)| {
            let v = k.at(i, j);
            (v != 0.0).then_some((i as isize - r, j as isize - r, v))
        })
        .collect();
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).map_err(|e| Error::config("noise", e.to_string()))?)
    } else {
        None
    };
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for p in 0..b * c {
        let src = &sharp.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for &(dy, dx, v) in &taps {
                    let sy = reflect_index(y as isize - dy, h);
                    let sx = reflect_index(x as isize - dx, w);
                    acc += v * src[sy * w + sx] as f64;
                }
                if let Some(n) = &noise {
                    acc += n.sample(rng);
                }
                dst[y * w + x] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// Writes the first batch item as an 8-bit RGB PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (_, c, h, w) = img.dims4();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut raw = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for (p, &v) in img.plane(0, ch).iter().enumerate() {
            raw[p * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    image::save_buffer(path, &raw, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

/// Quantizes to 8 bits, as a PNG round trip would.
pub fn quantize(img: &Image) -> Image {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// A procedural sharp image: smooth background, shapes with hard edges and
/// fine stripes.
pub fn synth_sharp(size: usize, rng: &mut impl Rng) -> Image {
    let mut img = Tensor::zeros(&[1, 3, size, size]);
    let s = size as f32;
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let grad: [(f32, f32); 3] = std::array::from_fn(|_| (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
    {
        let d = img.data_mut();
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    d[(c * size + y) * size + x] = base[c] + grad[c].0 * (x as f32 / s - 0.5) + grad[c].1 * (y as f32 / s - 0.5);
                }
            }
        }
    }
    let shapes = rng.random_range(4..9);
    for _ in 0..shapes {
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let (rx, ry) = (rng.random_range(s / 16.0..s / 3.0), rng.random_range(s / 16.0..s / 3.0));
        let kind = rng.random_range(0..3);
        let period = rng.random_range(2.0..6.0f32);
        let d = img.data_mut();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let inside = match kind {
                    0 => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                    1 => dx * dx + dy * dy <= 1.0,
                    _ => dx.abs() <= 1.0 && dy.abs() <= 1.0 && ((x as f32 / period) as i32) % 2 == 0,
                };
                if inside {
                    for c in 0..3 {
                        d[(c * size + y) * size + x] = color[c];
                    }
                }
            }
        }
    }
    img.map(|v| v.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelRanges {
    pub length: (usize, usize),
    pub kernel_size: usize,
    pub curvature: (f64, f64),
    pub noise: (f64, f64),
}

impl Default for KernelRanges {
    fn default() -> Self {
        Self {
            length: (5, 21),
            kernel_size: 31,
            curvature: (-0.15, 0.15),
            noise: (0.0, 0.01),
        }
    }
}

impl KernelRanges {
    pub fn validate(&self) -> Result<()> {
        if self.length.0 == 0 || self.length.0 > self.length.1 || self.length.1 > self.kernel_size {
            return Err(Error::config(
                "kernel_length",
                format!("range {:?} must satisfy 1 <= min <= max <= kernel_size", self.length),
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("kernel_size", "must be odd"));
        }
        if self.curvature.0 > self.curvature.1 {
            return Err(Error::config("kernel_curvature", "min exceeds max"));
        }
        if self.noise.0 < 0.0 || self.noise.0 > self.noise.1 {
            return Err(Error::config("noise", "range must satisfy 0 <= min <= max"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::config("split", format!("expected train|test, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub length: usize,
    pub angle: f64,
    pub curvature: f64,
    pub noise: f64,
    pub split: Split,
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for e in entries {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            e.id,
            e.length,
            e.angle,
            e.curvature,
            e.noise,
            e.split.as_str()
        );
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Parse("manifest header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Parse(format!("bad manifest row `{l}`"));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                id: f[0].to_string(),
                length: f[1].parse().map_err(|_| bad())?,
                angle: f[2].parse().map_err(|_| bad())?,
                curvature: f[3].parse().map_err(|_| bad())?,
                noise: f[4].parse().map_err(|_| bad())?,
                split: f[5].parse()?,
            })
        })
        .collect()
}

pub struct DatasetSpec<'a> {
    /// Folder of sharp PNGs; `None` draws procedural images.
    pub sharp_dir: Option<&'a Path>,
    pub out_dir: &'a Path,
    /// Number of training pairs; the test split receives `ceil(count / 4)`.
    pub count: usize,
    /// Side length of procedural images.
    pub size: usize,
    pub ranges: KernelRanges,
    pub seed: u64,
}

fn pair_rng(seed: u64, id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(id.as_bytes()))
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Writes `{train,test}/{blur,sharp}/<id>.png` and the manifest.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Vec<ManifestEntry>> {
    spec.ranges.validate()?;
    if spec.count == 0 {
        return Err(Error::EmptyDataset("count must be at least 1".into()));
    }
    let sources: Vec<Image> = match spec.sharp_dir {
        Some(dir) => {
            let mut imgs = Vec::new();
            for p in list_pngs(dir)? {
                match load_png(&p) {
                    Ok(i) => imgs.push(i),
                    Err(e) => log::warn!("skipping {}: {e}", p.display()),
                }
            }
            if imgs.is_empty() {
                return Err(Error::EmptyDataset(format!("no readable PNG in {}", dir.display())));
            }
            imgs
        }
        None => Vec::new(),
    };
    let n_test = spec.count.div_ceil(4);
    let total = spec.count + n_test;
    let (mut left_train, mut left_test) = (spec.count, n_test);
    let mut entries = Vec::with_capacity(total);
    for j in 0..total {
        let id = format!("{j:06}");
        let mut rng = pair_rng(spec.seed, &id);
        let want_test = fnv1a(format!("{}:{id}", spec.seed).as_bytes()).is_multiple_of(5);
        let split = if (want_test && left_test > 0) || left_train == 0 {
            left_test -= 1;
            Split::Test
        } else {
            left_train -= 1;
            Split::Train
        };
        let sharp = if sources.is_empty() {
            quantize(&synth_sharp(spec.size, &mut rng))
        } else {
            sources[j % sources.len()].clone()
        };
        let r = &spec.ranges;
        let length = rng.random_range(r.length.0..=r.length.1);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let curvature = if r.curvature.0 < r.curvature.1 {
            rng.random_range(r.curvature.0..r.curvature.1)
        } else {
            r.curvature.0
        };
        let noise = if r.noise.0 < r.noise.1 {
            rng.random_range(r.noise.0..r.noise.1)
        } else {
            r.noise.0
        };
        let kernel = gen_motion_kernel(length, angle, curvature, r.kernel_size, spec.seed)?;
        let blurred = apply_blur(&sharp, &kernel, noise, &mut rng)?;
        let dir = spec.out_dir.join(split.as_str());
        save_png(&sharp, &dir.join("sharp").join(format!("{id}.png")))?;
        save_png(&blurred, &dir.join("blur").join(format!("{id}.png")))?;
        entries.push(ManifestEntry {
            id,
            length,
            angle,
            curvature,
            noise,
            split,
        });
    }
    std::fs::write(spec.out_dir.join(MANIFEST_NAME), manifest_text(&entries))?;
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub blurred: Image,
    pub sharp: Image,
    pub id: String,
}

/// Loads `root/{split}/{blur,sharp}/*.png`, pairing files by name. Pairs that
/// cannot be read or disagree in size are skipped with a warning.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<PairedSample>> {
    let dir = root.join(split.as_str());
    let blur_dir = dir.join("blur");
    if !blur_dir.is_dir() {
        return Err(Error::EmptyDataset(format!("{} does not exist", blur_dir.display())));
    }
    let mut out = Vec::new();
    for p in list_pngs(&blur_dir)? {
        let name = p.file_name().expect("listed file");
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let pair = load_png(&p).and_then(|b| Ok((b, load_png(&dir.join("sharp").join(name))?)));
        match pair {
            Ok((blurred, sharp)) if blurred.shape() == sharp.shape() => out.push(PairedSample { blurred, sharp, id }),
            Ok(_) => log::warn!("skipping {id}: blur and sharp sizes differ"),
            Err(e) => log::warn!("skipping {id}: {e}"),
        }
    }
    Ok(out)
}

fn crop(img: &Image, y0: usize, x0: usize, size: usize) -> Image {
    let (_, c, _, w) = img.dims4();
    let mut out = Tensor::zeros(&[1, c, size, size]);
    for ch in 0..c {
        let src = img.plane(0, ch);
        for y in 0..size {
            let dst = (ch * size + y) * size;
            out.data_mut()[dst..dst + size].copy_from_slice(&src[(y0 + y) * w + x0..][..size]);
        }
    }
    out
}

/// `n` aligned random `patch x patch` crops.
pub fn sample_patches(pair: &PairedSample, patch: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<PairedSample>> {
    let (_, _, h, w) = pair.blurred.dims4();
    if patch == 0 || patch > h.min(w) {
        return Err(Error::config("patch", format!("{patch} does not fit a {h}x{w} image")));
    }
    Ok((0..n)
        .map(|_| {
            let y0 = rng.random_range(0..=h - patch);
            let x0 = rng.random_range(0..=w - patch);
            PairedSample {
                blurred: crop(&pair.blurred, y0, x0, patch),
                sharp: crop(&pair.sharp, y0, x0, patch),
                id: pair.id.clone(),
            }
        })
        .collect())
}

pub fn flip_horizontal(img: &Image) -> Image {
    let w = img.shape()[3];
    Tensor::from_fn(img.shape(), |i| {
        let (row, x) = (i / w, i % w);
        img.data()[row * w + (w - 1 - x)]
    })
}

pub fn flip_vertical(img: &Image) -> Image {
    let (_, _, h, w) = img.dims4();
    Tensor::from_fn(img.shape(), |i| {
        let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.data()[(plane * h + (h - 1 - y)) * w + x]
    })
}

/// Applies the same random horizontal and vertical flips to both images.
pub fn augment(pair: &PairedSample, rng: &mut impl Rng) -> PairedSample {
    let (hf, vf) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let apply = |img: &Image| {
        let mut out = img.clone();
        if hf {
            out = flip_horizontal(&out);
        }
        if vf {
            out = flip_vertical(&out);
        }
        out
    };
    PairedSample {
        blurred: apply(&pair.blurred),
        sharp: apply(&pair.sharp),
        id: pair.id.clone(),
    }
}
