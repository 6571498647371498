//! Labeled image sets: the CIFAR-10 binary layout, class-per-directory
//! image folders, and seeded synthetic data. Pixels are kept as bytes and
//! normalized when a batch is assembled.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by a 32×32 image in channel-major order.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
/// Zero padding on each side before a random crop.
pub const CROP_PADDING: usize = 4;

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "ppm", "pgm", "pnm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Cifar10Bin,
    ImageDir,
    Synthetic,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10-bin" => Ok(Self::Cifar10Bin),
            "image-dir" => Ok(Self::ImageDir),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!(
                "unknown data format `{other}`; expected cifar10-bin, image-dir or synthetic"
            ))),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cifar10Bin => "cifar10-bin",
            Self::ImageDir => "image-dir",
            Self::Synthetic => "synthetic",
        })
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// A single batch file, or a directory whose `data_batch_*.bin` files
    /// (or, failing that, every `*.bin` file) are concatenated in name order.
    Cifar10Bin { path: PathBuf },
    /// One sub-directory per class. Class order comes from `labels.txt`
    /// (one name per line) when present, otherwise from sorted directory
    /// names. Images are resized to `size × size` when given, and must
    /// otherwise share one size.
    ImageDir {
        path: PathBuf,
        #[serde(default)]
        size: Option<usize>,
    },
    /// Class prototypes plus per-sample noise; labels are balanced.
    Synthetic {
        samples: usize,
        classes: usize,
        #[serde(default = "default_synthetic_size")]
        size: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_synthetic_size() -> usize {
    CIFAR_SIDE
}

impl DataSource {
    /// Source for a path and format name as given on a command line. For the
    /// synthetic format the "path" is `samples,classes[,size[,seed]]`.
    pub fn from_cli(format: DataFormat, path: &str) -> Result<Self> {
        Ok(match format {
            DataFormat::Cifar10Bin => Self::Cifar10Bin { path: path.into() },
            DataFormat::ImageDir => Self::ImageDir {
                path: path.into(),
                size: None,
            },
            DataFormat::Synthetic => {
                let fields: Vec<usize> = path
                    .split(',')
                    .map(|f| f.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Config(format!("synthetic data `{path}`: {e}")))?;
                match fields[..] {
                    [samples, classes] => Self::Synthetic {
                        samples,
                        classes,
                        size: CIFAR_SIDE,
                        seed: 0,
                    },
                    [samples, classes, size] => Self::Synthetic {
                        samples,
                        classes,
                        size,
                        seed: 0,
                    },
                    [samples, classes, size, seed] => Self::Synthetic {
                        samples,
                        classes,
                        size,
                        seed: seed as u64,
                    },
                    _ => {
                        return Err(Error::Config(format!(
                            "synthetic data `{path}`: expected samples,classes[,size[,seed]]"
                        )))
                    }
                }
            }
        })
    }

    pub fn format(&self) -> DataFormat {
        match self {
            Self::Cifar10Bin { .. } => DataFormat::Cifar10Bin,
            Self::ImageDir { .. } => DataFormat::ImageDir,
            Self::Synthetic { .. } => DataFormat::Synthetic,
        }
    }
}

/// In-memory labeled images, `[N, 3, H, W]` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_bytes(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_bytes();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Assembles `[B, 3, H, W]` inputs scaled to `[-1, 1]`. With an rng,
    /// each image is independently flipped horizontally with probability ½
    /// and cropped back to size from a zero-padded copy.
    pub fn batch<T: Scalar>(&self, indices: &[usize], mut augment: Option<&mut ChaCha8Rng>) -> (Tensor<T>, Vec<usize>) {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * self.image_bytes());
        for &i in indices {
            let img = self.image(i);
            let (flip, dy, dx) = match augment.as_deref_mut() {
                Some(rng) => {
                    let flip = rng.random::<f64>() < 0.5;
                    let dy = rng.random_range(0..=2 * CROP_PADDING) as isize - CROP_PADDING as isize;
                    let dx = rng.random_range(0..=2 * CROP_PADDING) as isize - CROP_PADDING as isize;
                    (flip, dy, dx)
                }
                None => (false, 0, 0),
            };
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let sx = if flip { w - 1 - x } else { x } as isize + dx;
                        let sy = y as isize + dy;
                        let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            0
                        } else {
                            img[(c * h + sy as usize) * w + sx as usize]
                        };
                        data.push(lit::<T>(normalize_byte(v)));
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(&[indices.len(), 3, h, w], data).expect("batch size consistent");
        (t, labels)
    }
}

/// Byte to `[-1, 1]`.
pub fn normalize_byte(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Sample order for one epoch: a permutation seeded by `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Cifar10Bin { path } => load_cifar10(path),
        DataSource::ImageDir { path, size } => load_image_dir(path, *size),
        DataSource::Synthetic {
            samples,
            classes,
            size,
            seed,
        } => synthetic(*samples, *classes, *size, *seed),
    }
}

/// Parses the CIFAR-10 binary layout from memory. `path` is used only in
/// error messages.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: whole as u64,
            msg: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD_BYTES} bytes",
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Schema(format!(
                "{}: label {label} at byte {} is outside 0..{CIFAR_CLASSES}",
                path.display(),
                i * CIFAR_RECORD_BYTES
            )));
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(Dataset {
        pixels,
        labels,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        num_classes: CIFAR_CLASSES,
    })
}

fn load_cifar10(path: &Path) -> Result<Dataset> {
    let files = if path.is_dir() {
        let mut bins: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        bins.sort();
        let train: Vec<PathBuf> = bins
            .iter()
            .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("data_batch_")))
            .cloned()
            .collect();
        if train.is_empty() {
            bins
        } else {
            train
        }
    } else {
        vec![path.to_path_buf()]
    };
    let mut out: Option<Dataset> = None;
    for f in &files {
        let part = parse_cifar10(&fs::read(f)?, f)?;
        match &mut out {
            None => out = Some(part),
            Some(d) => {
                d.pixels.extend(part.pixels);
                d.labels.extend(part.labels);
            }
        }
    }
    match out {
        Some(d) if !d.is_empty() => Ok(d),
        _ => Err(Error::EmptyDataset(path.to_path_buf())),
    }
}

fn load_image_dir(root: &Path, size: Option<usize>) -> Result<Dataset> {
    let mut dirs: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    dirs.sort();
    let labels_file = root.join("labels.txt");
    let classes: Vec<String> = if labels_file.is_file() {
        let names: Vec<String> = fs::read_to_string(&labels_file)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if let Some(unknown) = dirs.iter().find(|d| !names.contains(d)) {
            return Err(Error::Schema(format!(
                "{}: class directory `{unknown}` is not listed in labels.txt",
                root.display()
            )));
        }
        names
    } else {
        dirs.clone()
    };

    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut geometry: Option<(usize, usize)> = size.map(|s| (s, s));
    for dir in &dirs {
        let label = classes.iter().position(|c| c == dir).expect("class checked above");
        let mut files: Vec<PathBuf> = fs::read_dir(root.join(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_lowercase().as_str()))
            })
            .collect();
        files.sort();
        for f in files {
            let (img, h, w) = read_rgb(&f, size)?;
            match geometry {
                None => geometry = Some((h, w)),
                Some(g) if g != (h, w) => {
                    return Err(Error::Schema(format!(
                        "{}: image is {h}x{w}, expected {}x{} (set a size to resize)",
                        f.display(),
                        g.0,
                        g.1
                    )))
                }
                _ => {}
            }
            pixels.extend(img);
            labels.push(label);
        }
    }
    let Some((height, width)) = geometry.filter(|_| !labels.is_empty()) else {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    };
    Ok(Dataset {
        pixels,
        labels,
        height,
        width,
        num_classes: classes.len(),
    })
}

/// Reads an image file as channel-major RGB bytes with its height and
/// width, optionally resized to a square side.
pub fn read_rgb(path: &Path, size: Option<usize>) -> Result<(Vec<u8>, usize, usize)> {
    let mut img = image::open(path)?.to_rgb8();
    if let Some(s) = size {
        img = image::imageops::resize(&img, s as u32, s as u32, image::imageops::FilterType::Triangle);
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0u8; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c * h + y as usize) * w + x as usize] = p[c];
        }
    }
    Ok((out, h, w))
}

/// Balanced synthetic classification data: each class owns a random coarse
/// 4×4 color pattern; samples add Gaussian noise (σ = 24 grey levels).
pub fn synthetic(samples: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if samples == 0 {
        return Err(Error::EmptyDataset(PathBuf::from("<synthetic>")));
    }
    if classes == 0 || size == 0 {
        return Err(Error::Config("synthetic data needs at least one class and a positive size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const GRID: usize = 4;
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..3 * GRID * GRID).map(|_| rng.random_range(32.0..224.0)).collect())
        .collect();
    let noise = Normal::new(0.0, 24.0).expect("valid sigma");
    let mut pixels = Vec::with_capacity(samples * 3 * size * size);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % classes;
        let proto = &prototypes[label];
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let cell = (c * GRID + y * GRID / size) * GRID + x * GRID / size;
                    let v = proto[cell] + noise.sample(&mut rng);
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(label);
    }
    Ok(Dataset {
        pixels,
        labels,
        height: size,
        width: size,
        num_classes: classes,
    })
}
