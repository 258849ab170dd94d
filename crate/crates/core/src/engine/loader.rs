//! Image folders on disk: `root/<class>/sample_*.{ppm,nt}` plus a CSV
//! manifest assigning each class to a split.

use std::path::{Path, PathBuf};

use super::augment::resize;
use super::data::{Dataset, Split, Splits};
use super::formats::{read_file, read_image, write_file, write_ppm, write_tensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// `class,split` rows. Blank lines, `#` comments and a `class,split` header are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, Split)>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| load_err(path, "manifest is not UTF-8"))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.eq_ignore_ascii_case("class,split") {
            continue;
        }
        let (class, split) = line
            .split_once(',')
            .ok_or_else(|| load_err(path, format!("line {}: expected `class,split`", i + 1)))?;
        let split = match split.trim() {
            "auxiliary" | "train" => Split::Auxiliary,
            "validation" | "val" => Split::Validation,
            "test" => Split::Test,
            other => return Err(load_err(path, format!("line {}: unknown split `{other}`", i + 1))),
        };
        rows.push((class.trim().to_string(), split));
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[(String, Split)]) -> Result<()> {
    let mut text = String::from("class,split\n");
    for (class, split) in rows {
        text.push_str(&format!("{class},{}\n", split.name()));
    }
    write_file(path, text.as_bytes())
}

fn sample_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let ext = path.extension().and_then(|e| e.to_str());
        if name.starts_with("sample_") && matches!(ext, Some("ppm") | Some("nt")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads the classes of `split` listed in `manifest`. Images are resized to
/// `size` (any aspect ratio in, square out) when given. Each class must have
/// at least `min_per_class` samples.
pub fn load_dataset(
    root: &Path,
    manifest: &[(String, Split)],
    split: Split,
    size: Option<usize>,
    min_per_class: usize,
) -> Result<Dataset> {
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    for (class, _) in manifest.iter().filter(|(_, s)| *s == split) {
        let dir = root.join(class);
        let mut images = Vec::new();
        for file in sample_files(&dir)? {
            let img = read_image(&file).map_err(|e| match e {
                Error::Load { .. } => e,
                other => load_err(&file, other.to_string()),
            })?;
            if img.shape().len() != 3 || img.shape()[0] != 3 {
                return Err(load_err(&file, format!("expected a 3-channel image, got shape {:?}", img.shape())));
            }
            if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(load_err(&file, format!("pixel value {v} outside [0, 1]")));
            }
            images.push(match size {
                Some(n) => resize(&img, n)?,
                None => img,
            });
        }
        if images.len() < min_per_class {
            return Err(load_err(
                &dir,
                format!("class `{class}` has {} samples, need at least {min_per_class}", images.len()),
            ));
        }
        classes.push(class.clone());
        samples.push(images);
    }
    Dataset::new(split, classes, samples)
}

/// All three splits from `root` and the manifest at `manifest_path`.
pub fn load_splits(root: &Path, manifest_path: &Path, size: Option<usize>, min_per_class: usize) -> Result<Splits> {
    let manifest = read_manifest(manifest_path)?;
    Ok(Splits {
        auxiliary: load_dataset(root, &manifest, Split::Auxiliary, size, min_per_class)?,
        validation: load_dataset(root, &manifest, Split::Validation, size, min_per_class)?,
        test: load_dataset(root, &manifest, Split::Test, size, min_per_class)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Tensor,
}

fn write_image(path: &Path, image: &Tensor, format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Ppm => write_ppm(path, image),
        ImageFormat::Tensor => write_tensor(path, image),
    }
}

/// Writes datasets in the on-disk layout with a manifest at `root/manifest.csv`.
/// Returns the number of image files written.
pub fn write_datasets(root: &Path, datasets: &[&Dataset], format: ImageFormat) -> Result<usize> {
    let ext = match format {
        ImageFormat::Ppm => "ppm",
        ImageFormat::Tensor => "nt",
    };
    let mut rows = Vec::new();
    let mut count = 0;
    for ds in datasets {
        for (class, images) in ds.classes.iter().zip(&ds.samples) {
            for (i, img) in images.iter().enumerate() {
                write_image(&root.join(class).join(format!("sample_{i:04}.{ext}")), img, format)?;
                count += 1;
            }
            rows.push((class.clone(), ds.split));
        }
    }
    write_manifest(&root.join("manifest.csv"), &rows)?;
    Ok(count)
}
