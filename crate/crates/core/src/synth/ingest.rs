use std::path::{Path, PathBuf};

use crate::tensor::Tensor;

use super::{load_image, DataError, Result, Sample};

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("ppm" | "pgm")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(DataError::EmptyDirectory(dir.to_path_buf()));
    }
    Ok(files)
}

/// Largest centered square.
fn center_crop(img: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let mut data = Vec::with_capacity(3 * side * side);
    for ch in 0..3 {
        for y in 0..side {
            let row = ch * h * w + (y0 + y) * w + x0;
            data.extend_from_slice(&img.data()[row..row + side]);
        }
    }
    Tensor::new(&[3, side, side], data).expect("crop shape")
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
fn resize(img: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let side = img.shape()[1];
    if side == size {
        return img.clone();
    }
    let scale = side as f64 / size as f64;
    let src = img.data();
    let mut data = vec![0f32; 3 * size * size];
    let max = (side - 1) as f64;
    for y in 0..size {
        let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(side - 1);
        for x in 0..size {
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(side - 1);
            for ch in 0..3 {
                let at = |yy: usize, xx: usize| src[ch * side * side + yy * side + xx] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data[ch * size * size + y * size + x] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("resize shape")
}

/// Loads every `.ppm`/`.pgm` in `dir` in lexicographic order, center-cropped
/// to a square and resized to `size`.
pub fn load_folder(dir: impl AsRef<Path>, size: usize, label: u8) -> Result<Vec<Sample>> {
    image_files(dir.as_ref())?
        .into_iter()
        .map(|path| {
            let img = load_image(&path)?;
            Ok(Sample {
                image: resize(&center_crop(&img), size),
                label,
                scene: None,
                object: None,
            })
        })
        .collect()
}

pub fn ingest_folder(
    dir_with: impl AsRef<Path>,
    dir_without: impl AsRef<Path>,
    size: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    Ok((load_folder(dir_with, size, 1)?, load_folder(dir_without, size, 0)?))
}

/// `<root>/with` and `<root>/without`.
pub fn ingest_root(root: impl AsRef<Path>, size: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let root = root.as_ref();
    ingest_folder(root.join("with"), root.join("without"), size)
}
