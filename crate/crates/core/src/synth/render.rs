use crate::tensor::Tensor;

use super::{DataError, GlassesStyle, ObjectSpec, Result, SceneSpec};

pub const SUPPORTED_SIZES: [usize; 3] = [16, 32, 64];

/// Subsamples per pixel side for anti-aliased coverage.
const SS: usize = 4;

// Sprite geometry, fractions of the image side, relative to the face center.
const EYE_LINE: f64 = -0.1;
const LENS_OFFSET: f64 = 0.18;
/// Radius of the rim's center line; the rim extends `width / 2` either side.
const LENS_RADIUS: f64 = 0.12;
const BRIDGE_HALF: f64 = 0.06;
/// Opacity of shaded lens interiors relative to the frame.
const SHADE: f64 = 0.6;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn skin(tone: f64) -> [f64; 3] {
    let light = [0.96, 0.80, 0.69];
    let dark = [0.42, 0.28, 0.19];
    std::array::from_fn(|c| light[c] + tone * (dark[c] - light[c]))
}

/// Tint blends linearly from a brown to a blue frame.
pub(crate) fn frame_color(tint: f64) -> [f64; 3] {
    let (a, b) = ([0.40, 0.14, 0.05], [0.05, 0.16, 0.48]);
    std::array::from_fn(|c| a[c] + tint * (b[c] - a[c]))
}

/// Fraction of pixel `(x, y)` covered by `inside`, in image-fraction coordinates.
fn coverage(size: usize, x: usize, y: usize, inside: impl Fn(f64, f64) -> bool) -> f64 {
    let s = size as f64;
    let mut hits = 0;
    for j in 0..SS {
        for i in 0..SS {
            let u = (x as f64 + (i as f64 + 0.5) / SS as f64) / s;
            let v = (y as f64 + (j as f64 + 0.5) / SS as f64) / s;
            if inside(u, v) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SS * SS) as f64
}

fn check_size(size: usize) -> Result<()> {
    if SUPPORTED_SIZES.contains(&size) {
        Ok(())
    } else {
        Err(DataError::UnsupportedSize(size))
    }
}

/// Gradient background plus an anti-aliased face disc, `3 x size x size`.
pub fn render_scene(spec: &SceneSpec, size: usize) -> Result<Tensor<f32>> {
    check_size(size)?;
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    let base = hsv(spec.bg_hue, 0.55, 1.0);
    let (sin, cos) = spec.gradient_angle.sin_cos();
    let face = skin(spec.skin_tone);
    let (fx, fy, r) = (0.5 + spec.face_cx, 0.5 + spec.face_cy, spec.face_radius);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 - 0.5;
            let v = (y as f64 + 0.5) / size as f64 - 0.5;
            let t = 0.5 + (u * cos + v * sin) / std::f64::consts::SQRT_2;
            let bright = 0.55 + 0.45 * t;
            let c = coverage(size, x, y, |u, v| (u - fx).hypot(v - fy) <= r);
            for ch in 0..3 {
                let bg = base[ch] * bright;
                let val = (1.0 - c) * bg + c * face[ch];
                data[ch * plane + y * size + x] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Tensor::new(&[3, size, size], data)?)
}

/// Per-pixel coverage of the glasses frame and of the lens interiors.
#[derive(Debug, Clone, PartialEq)]
pub struct SpriteMask {
    pub size: usize,
    pub frame: Vec<f64>,
    /// Zero everywhere unless the style is shaded.
    pub interior: Vec<f64>,
}

impl SpriteMask {
    /// Combined opacity weight of pixel `p` before scaling by darkness.
    pub fn coverage(&self, p: usize) -> f64 {
        self.frame[p] + SHADE * self.interior[p]
    }
}

pub(crate) fn blend(base: f32, alpha: f64, color: f64) -> f32 {
    ((1.0 - alpha) * base as f64 + alpha * color).clamp(0.0, 1.0) as f32
}

/// Sprite coverage for a style and frame thickness on a given face.
pub fn sprite_mask(scene: &SceneSpec, style: GlassesStyle, width: f64, size: usize) -> Result<SpriteMask> {
    check_size(size)?;
    let cx = 0.5 + scene.face_cx;
    let ey = 0.5 + scene.face_cy + EYE_LINE;
    let half = width / 2.0;
    let lens_dist = |u: f64, v: f64| -> f64 {
        let dx = (u - cx).abs() - LENS_OFFSET;
        let dy = v - ey;
        match style {
            GlassesStyle::Square => dx.abs().max(dy.abs()),
            GlassesStyle::Round | GlassesStyle::Shaded => dx.hypot(dy),
        }
    };
    let in_frame = |u: f64, v: f64| {
        let d = lens_dist(u, v);
        let lens = (d - LENS_RADIUS).abs() <= half;
        let bridge = (u - cx).abs() <= BRIDGE_HALF && (v - ey).abs() <= width / 3.0;
        lens || bridge
    };
    let in_interior = |u: f64, v: f64| !in_frame(u, v) && lens_dist(u, v) < LENS_RADIUS - half;
    let mut frame = vec![0.0; size * size];
    let mut interior = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            frame[y * size + x] = coverage(size, x, y, in_frame);
            if style == GlassesStyle::Shaded {
                interior[y * size + x] = coverage(size, x, y, in_interior);
            }
        }
    }
    Ok(SpriteMask { size, frame, interior })
}

/// Blends a sprite of the given opacity and tint over `base`. Pixels with zero
/// coverage are copied untouched.
pub fn composite_with_mask(base: &Tensor<f32>, mask: &SpriteMask, darkness: f64, tint: f64) -> Result<Tensor<f32>> {
    let size = mask.size;
    if base.shape() != [3, size, size] {
        return Err(DataError::Shape(base.shape().to_vec()));
    }
    let color = frame_color(tint);
    let plane = size * size;
    let mut out = base.clone();
    let data = out.data_mut();
    for p in 0..plane {
        let alpha = darkness * mask.coverage(p);
        if alpha == 0.0 {
            continue;
        }
        for (ch, col) in color.iter().enumerate() {
            data[ch * plane + p] = blend(data[ch * plane + p], alpha, *col);
        }
    }
    Ok(out)
}

/// Draws the glasses described by `object` onto the face of `scene`.
pub fn composite_object(base: &Tensor<f32>, scene: &SceneSpec, object: &ObjectSpec) -> Result<Tensor<f32>> {
    if !object.present {
        return Err(DataError::AbsentObject);
    }
    let size = base.shape().get(1).copied().unwrap_or(0);
    let mask = sprite_mask(scene, object.style, object.width, size)?;
    composite_with_mask(base, &mask, object.darkness, object.tint)
}
