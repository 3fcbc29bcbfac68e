use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ::image::imageops::FilterType;
use ::image::DynamicImage;
use rayon::prelude::*;

use super::{DataError, DatasetProfile, Image, ImageSample, ImageShape, Split};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// All samples of one split together with a per-class index.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub split: Split,
    pub shape: ImageShape,
    pub class_names: Vec<String>,
    pub samples: Vec<ImageSample>,
    by_class: Vec<Vec<usize>>,
}

impl SplitData {
    /// Builds a split from in-memory samples. `class_id`s are remapped to
    /// their position in `class_names` order of first appearance.
    pub fn from_samples(split: Split, shape: ImageShape, class_names: Vec<String>, samples: Vec<ImageSample>) -> Self {
        let mut ids: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut by_class = vec![Vec::new(); ids.len()];
        for (i, s) in samples.iter().enumerate() {
            let pos = ids.binary_search(&s.class_id).expect("id present");
            by_class[pos].push(i);
        }
        Self {
            split,
            shape,
            class_names,
            samples,
            by_class,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices of every class, in class order.
    pub fn classes(&self) -> &[Vec<usize>] {
        &self.by_class
    }

    pub fn images(&self) -> Vec<&Image> {
        self.samples.iter().map(|s| &s.image).collect()
    }
}

/// Reads a split manifest: one class name per line, blank lines and `#`
/// comments ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<String>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

pub fn write_manifest(path: &Path, classes: &[String]) -> Result<(), DataError> {
    let mut text = classes.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn list_dir_sorted(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>, DataError> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if want_dirs && path.is_dir() {
            out.push(path);
        } else if !want_dirs && path.is_file() && has_image_extension(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn decode(path: &Path, shape: ImageShape) -> Result<Image, DataError> {
    let img = ::image::open(path).map_err(|source| DataError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(to_image(&img, shape))
}

fn to_image(img: &DynamicImage, shape: ImageShape) -> Image {
    let (h, w) = (shape.height as u32, shape.width as u32);
    let plane = shape.height * shape.width;
    match shape.channels {
        1 => {
            let gray = img.to_luma8();
            let gray = if gray.dimensions() == (w, h) {
                gray
            } else {
                ::image::imageops::resize(&gray, w, h, FilterType::Triangle)
            };
            let data = gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Image::new(shape, data)
        }
        3 => {
            let rgb = img.to_rgb8();
            let rgb = if rgb.dimensions() == (w, h) {
                rgb
            } else {
                ::image::imageops::resize(&rgb, w, h, FilterType::Triangle)
            };
            let raw = rgb.into_raw();
            let mut data = vec![0.0; shape.len()];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = px[c] as f32 / 255.0;
                }
            }
            Image::new(shape, data)
        }
        c => panic!("unsupported channel count {c}"),
    }
}

/// Loads every image of `split` from `root/<split>/<class>/<file>`, resized
/// to the profile shape.
///
/// Classes come from `root/splits/<split>.txt` when that manifest exists,
/// otherwise from the sorted sub-directories of the split directory. Files
/// are read in sorted order, so the resulting ordering is deterministic.
pub fn load_split(profile: &DatasetProfile, split: Split, root: &Path) -> Result<SplitData, DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.to_path_buf()));
    }
    let split_dir = root.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(DataError::MissingSplit(split_dir));
    }
    let manifest = root.join("splits").join(format!("{}.txt", split.dir_name()));
    let class_dirs: Vec<PathBuf> = if manifest.is_file() {
        read_manifest(&manifest)?
            .into_iter()
            .map(|name| {
                let dir = split_dir.join(&name);
                if dir.is_dir() {
                    Ok(dir)
                } else {
                    Err(DataError::MissingClass(dir))
                }
            })
            .collect::<Result<_, _>>()?
    } else {
        list_dir_sorted(&split_dir, true)?
    };

    if let Some(sizes) = &profile.split_sizes {
        let expected = sizes.get(split);
        if class_dirs.len() != expected {
            return Err(DataError::ClassCount {
                profile: profile.name.clone(),
                split,
                expected,
                found: class_dirs.len(),
                path: split_dir,
            });
        }
    }

    let mut files = Vec::new();
    let mut class_names = Vec::with_capacity(class_dirs.len());
    for (class_idx, dir) in class_dirs.iter().enumerate() {
        let images = list_dir_sorted(dir, false)?;
        if images.is_empty() {
            return Err(DataError::EmptyClass(dir.clone()));
        }
        class_names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        files.extend(images.into_iter().map(|p| (class_idx, p)));
    }

    let shape = profile.shape;
    let class_base = (split.index() as usize) << 24;
    let decoded: Vec<Image> = files
        .par_iter()
        .map(|(_, path)| decode(path, shape))
        .collect::<Result<_, _>>()?;
    let samples = decoded
        .into_iter()
        .zip(&files)
        .enumerate()
        .map(|(i, (image, (class_idx, _)))| ImageSample {
            image,
            class_id: class_base + class_idx,
            sample_id: (split.index() << 40) | i as u64,
        })
        .collect();

    Ok(SplitData::from_samples(split, shape, class_names, samples))
}

/// Errors if any class name or class id is shared between two splits.
pub fn check_disjoint(splits: &[&SplitData]) -> Result<(), DataError> {
    let mut names = HashSet::new();
    let mut ids = HashSet::new();
    for split in splits {
        for name in &split.class_names {
            if !names.insert(name.as_str()) {
                return Err(DataError::Overlap(name.clone()));
            }
        }
        let own: HashSet<usize> = split.samples.iter().map(|s| s.class_id).collect();
        for id in own {
            if !ids.insert(id) {
                return Err(DataError::Overlap(format!("class id {id}")));
            }
        }
    }
    Ok(())
}
