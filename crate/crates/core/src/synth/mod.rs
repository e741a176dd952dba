//! Synthetic aligned faces with and without glasses, image file I/O, and
//! ingestion of user image folders.
//!
//! Every random draw comes from [`SplitMix64`](crate::rng::SplitMix64). For
//! `make_dataset(n_with, n_without, size, seed)` one generator seeded with
//! `seed` is consumed in this order: for each of the `n_with` samples a scene
//! then an object, then for each of the `n_without` samples a scene. A scene
//! takes six `next_f64` draws (hue, angle, cx, cy, radius, skin), mapped
//! affinely onto the field ranges; an object takes `below(3)` for the style
//! (round, square, shaded) then three `next_f64` draws (width, darkness, tint).

mod ingest;
mod pnm;
pub(crate) mod render;

pub use ingest::{ingest_folder, ingest_root, load_folder};
pub use pnm::{decode_pnm, encode_ppm, load_image, save_image};
pub use render::{
    composite_object, composite_with_mask, render_scene, sprite_mask, SpriteMask, SUPPORTED_SIZES,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unsupported image size {0}; expected one of 16, 32, 64")]
    UnsupportedSize(usize),
    #[error("cannot composite an absent object")]
    AbsentObject,
    #[error("malformed image at byte {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error("truncated image payload at byte {offset}: expected {expected} more bytes")]
    Truncated { offset: usize, expected: usize },
    #[error("pixel value {value} at index {index} is outside [0,1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no PPM/PGM images in {0}")]
    EmptyDirectory(PathBuf),
    #[error("bad image shape {0:?}; expected 3 x H x W")]
    Shape(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Everything about a synthetic image except the glasses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub bg_hue: f64,
    /// Direction of the background brightness gradient, radians in `[0, 2pi)`.
    pub gradient_angle: f64,
    /// Face center offsets from the image center, fraction of the image, within ±0.05.
    pub face_cx: f64,
    pub face_cy: f64,
    /// Fraction of the image side, in `[0.3, 0.4]`.
    pub face_radius: f64,
    pub skin_tone: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GlassesStyle {
    Round,
    Square,
    /// Round frame with tinted lenses.
    Shaded,
}

impl GlassesStyle {
    pub const ALL: [GlassesStyle; 3] = [GlassesStyle::Round, GlassesStyle::Square, GlassesStyle::Shaded];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    pub present: bool,
    pub style: GlassesStyle,
    /// Frame thickness, fraction of the image side, in `[0.05, 0.12]`.
    pub width: f64,
    /// Opacity, in `[0.2, 1.0]`.
    pub darkness: f64,
    /// Frame color, in `[0, 1]`: 0 is brown, 1 is blue, linear in between.
    pub tint: f64,
}

impl ObjectSpec {
    pub const WIDTH_RANGE: (f64, f64) = (0.05, 0.12);
    pub const DARKNESS_RANGE: (f64, f64) = (0.2, 1.0);

    pub fn absent() -> Self {
        Self {
            present: false,
            style: GlassesStyle::Round,
            width: Self::WIDTH_RANGE.0,
            darkness: Self::DARKNESS_RANGE.0,
            tint: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn sample(rng: &mut SplitMix64) -> Self {
        Self {
            bg_hue: rng.next_f64(),
            gradient_angle: rng.uniform(0.0, std::f64::consts::TAU),
            face_cx: rng.uniform(-0.05, 0.05),
            face_cy: rng.uniform(-0.05, 0.05),
            face_radius: rng.uniform(0.3, 0.4),
            skin_tone: rng.next_f64(),
        }
    }
}

impl ObjectSpec {
    pub fn sample(rng: &mut SplitMix64) -> Self {
        let style = GlassesStyle::ALL[rng.below(3)];
        let (w0, w1) = Self::WIDTH_RANGE;
        let (d0, d1) = Self::DARKNESS_RANGE;
        Self {
            present: true,
            style,
            width: rng.uniform(w0, w1),
            darkness: rng.uniform(d0, d1),
            tint: rng.next_f64(),
        }
    }
}

/// One image with its set label and, for synthetic data, its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// 1 when the object is present.
    pub label: u8,
    pub scene: Option<SceneSpec>,
    pub object: Option<ObjectSpec>,
}

impl Sample {
    /// The same scene rendered without the object, when ground truth is known.
    pub fn counterfactual(&self) -> Option<Result<Tensor<f32>>> {
        let scene = self.scene?;
        Some(render_scene(&scene, self.image.shape()[1]))
    }
}

/// The specs `make_dataset` would render, without rendering them.
pub fn sample_specs(n_with: usize, n_without: usize, seed: u64) -> (Vec<(SceneSpec, ObjectSpec)>, Vec<SceneSpec>) {
    let mut rng = SplitMix64::new(seed);
    let with = (0..n_with)
        .map(|_| {
            let s = SceneSpec::sample(&mut rng);
            (s, ObjectSpec::sample(&mut rng))
        })
        .collect();
    let without = (0..n_without).map(|_| SceneSpec::sample(&mut rng)).collect();
    (with, without)
}

/// Two unpaired sets: label-1 samples wearing glasses and label-0 samples without.
pub fn make_dataset(n_with: usize, n_without: usize, size: usize, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(DataError::UnsupportedSize(size));
    }
    let (with_specs, without_specs) = sample_specs(n_with, n_without, seed);
    let with = with_specs
        .into_iter()
        .map(|(scene, object)| {
            let base = render_scene(&scene, size)?;
            Ok(Sample {
                image: composite_object(&base, &scene, &object)?,
                label: 1,
                scene: Some(scene),
                object: Some(object),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let without = without_specs
        .into_iter()
        .map(|scene| {
            Ok(Sample {
                image: render_scene(&scene, size)?,
                label: 0,
                scene: Some(scene),
                object: Some(ObjectSpec::absent()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((with, without))
}

/// Stacks `3 x H x W` images into an `N x 3 x H x W` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let items: Vec<&Tensor<f32>> = images.into_iter().collect();
    Ok(Tensor::stack(&items)?)
}

#[cfg(test)]
mod tests;
