use crate::model::{Inference, ModelConfig, ParamStore};
use crate::synth::render::{blend, frame_color};
use crate::synth::{render_scene, sprite_mask, stack_images, GlassesStyle, ObjectSpec, Sample, SceneSpec};
use crate::tensor::Tensor;

use super::{EvalError, Result};

pub const GRID_STEPS: usize = 8;
pub const DARKNESS_TOLERANCE: f64 = 0.15;
pub const WIDTH_TOLERANCE: f64 = 0.02;
const BATCH: usize = 64;

pub fn darkness_grid() -> [f64; GRID_STEPS] {
    let (lo, hi) = ObjectSpec::DARKNESS_RANGE;
    std::array::from_fn(|i| lo + i as f64 * (hi - lo) / (GRID_STEPS - 1) as f64)
}

pub fn width_grid() -> [f64; GRID_STEPS] {
    let (lo, hi) = ObjectSpec::WIDTH_RANGE;
    std::array::from_fn(|i| lo + i as f64 * (hi - lo) / (GRID_STEPS - 1) as f64)
}

pub fn tint_grid() -> [f64; GRID_STEPS] {
    std::array::from_fn(|i| i as f64 / (GRID_STEPS - 1) as f64)
}

/// Renders every grid object onto `scene` and returns the one nearest to
/// `image` in L1. Ties go to the first candidate in (style, width, darkness,
/// tint) order.
pub fn recover_object(image: &Tensor<f32>, scene: &SceneSpec) -> Result<ObjectSpec> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(EvalError::Input(format!("expected a 3 x H x H image, got {shape:?}")));
    }
    let size = shape[1];
    let base = render_scene(scene, size)?;
    let plane = size * size;
    let target = image.data();
    let bg = base.data();
    let mut best = (f64::INFINITY, ObjectSpec::absent());
    for style in GlassesStyle::ALL {
        for width in width_grid() {
            let mask = sprite_mask(scene, style, width, size)?;
            let touched: Vec<(usize, f64)> = (0..plane)
                .map(|p| (p, mask.coverage(p)))
                .filter(|&(_, c)| c > 0.0)
                .collect();
            // Untouched pixels cost the same for every darkness and tint.
            let mut inside = vec![false; plane];
            for &(p, _) in &touched {
                inside[p] = true;
            }
            let mut outside = 0.0;
            for p in (0..plane).filter(|&p| !inside[p]) {
                for ch in 0..3 {
                    outside += (target[ch * plane + p] as f64 - bg[ch * plane + p] as f64).abs();
                }
            }
            for darkness in darkness_grid() {
                for tint in tint_grid() {
                    let color = frame_color(tint);
                    let mut cost = outside;
                    for &(p, c) in &touched {
                        for (ch, col) in color.iter().enumerate() {
                            let v = blend(bg[ch * plane + p], darkness * c, *col);
                            cost += (target[ch * plane + p] as f64 - v as f64).abs();
                        }
                        if cost >= best.0 {
                            break;
                        }
                    }
                    if cost < best.0 {
                        best = (
                            cost,
                            ObjectSpec {
                                present: true,
                                style,
                                width,
                                darkness,
                                tint,
                            },
                        );
                    }
                }
            }
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftReport {
    pub n_pairs: usize,
    /// Pairs whose recovered object matches the donor's style exactly and its
    /// darkness and width within tolerance.
    pub match_rate: f64,
    pub style_match_rate: f64,
    pub darkness_error: f64,
    pub width_error: f64,
    pub tint_error: f64,
}

/// Whether a recovered object counts as the donor's.
pub fn object_matches(recovered: &ObjectSpec, donor: &ObjectSpec) -> bool {
    recovered.style == donor.style
        && (recovered.darkness - donor.darkness).abs() <= DARKNESS_TOLERANCE
        && (recovered.width - donor.width).abs() <= WIDTH_TOLERANCE
}

/// Scores transplanted images against their donors' specs. `pairs` holds the
/// donor object, the recipient scene and the transplanted image.
pub fn drift_report<'a>(pairs: impl IntoIterator<Item = (&'a ObjectSpec, &'a SceneSpec, &'a Tensor<f32>)>) -> Result<DriftReport> {
    let mut r = DriftReport {
        n_pairs: 0,
        match_rate: 0.0,
        style_match_rate: 0.0,
        darkness_error: 0.0,
        width_error: 0.0,
        tint_error: 0.0,
    };
    for (donor, scene, image) in pairs {
        let got = recover_object(image, scene)?;
        r.n_pairs += 1;
        r.match_rate += f64::from(u8::from(object_matches(&got, donor)));
        r.style_match_rate += f64::from(u8::from(got.style == donor.style));
        r.darkness_error += (got.darkness - donor.darkness).abs();
        r.width_error += (got.width - donor.width).abs();
        r.tint_error += (got.tint - donor.tint).abs();
    }
    if r.n_pairs == 0 {
        return Err(EvalError::Input("drift needs at least one pair".into()));
    }
    let n = r.n_pairs as f64;
    for v in [
        &mut r.match_rate,
        &mut r.style_match_rate,
        &mut r.darkness_error,
        &mut r.width_error,
        &mut r.tint_error,
    ] {
        *v /= n;
    }
    Ok(r)
}

fn ground_truth(s: &Sample) -> Result<(SceneSpec, ObjectSpec)> {
    match (s.scene, s.object) {
        (Some(scene), Some(object)) => Ok((scene, object)),
        _ => Err(EvalError::Input("drift needs synthetic samples with known specs".into())),
    }
}

/// Transplants the object of `donors[i]` onto `recipients[i]` for the first
/// `n_pairs` pairs and checks which object arrived.
pub fn drift_metric(
    params: &ParamStore<f32>,
    cfg: ModelConfig,
    donors: &[Sample],
    recipients: &[Sample],
    n_pairs: usize,
) -> Result<DriftReport> {
    if n_pairs > donors.len().min(recipients.len()) {
        return Err(EvalError::Input(format!(
            "{n_pairs} pairs requested from {} donors and {} recipients",
            donors.len(),
            recipients.len()
        )));
    }
    let net = Inference::new(params, cfg);
    let mut truth = Vec::with_capacity(n_pairs);
    let mut images = Vec::with_capacity(n_pairs);
    for start in (0..n_pairs).step_by(BATCH) {
        let end = (start + BATCH).min(n_pairs);
        let a = stack_images(donors[start..end].iter().map(|s| &s.image))?;
        let b = stack_images(recipients[start..end].iter().map(|s| &s.image))?;
        let ca = net.encode(&a)?;
        let mut cb = net.encode(&b)?;
        cb.object = ca.object;
        let bu = net.decode(&cb)?;
        for i in 0..end - start {
            let (_, donor) = ground_truth(&donors[start + i])?;
            let (scene, _) = ground_truth(&recipients[start + i])?;
            if !donor.present {
                return Err(EvalError::Input("drift donors must carry an object".into()));
            }
            truth.push((donor, scene));
            images.push(bu.select(i)?);
        }
    }
    drift_report(truth.iter().zip(&images).map(|((d, s), im)| (d, s, im)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{composite_object, make_dataset, sample_specs};

    #[test]
    fn grids_span_the_spec_ranges() {
        assert_eq!(darkness_grid()[0], 0.2);
        assert!((darkness_grid()[7] - 1.0).abs() < 1e-15);
        assert!((width_grid()[3] - 0.08).abs() < 1e-15);
        assert_eq!(tint_grid()[7], 1.0);
    }

    #[test]
    fn on_grid_transplants_are_recovered_exactly() {
        let (scenes, _) = sample_specs(12, 0, 5);
        for (i, (scene, _)) in scenes.iter().enumerate() {
            let donor = ObjectSpec {
                present: true,
                style: GlassesStyle::ALL[i % 3],
                width: width_grid()[(i * 3) % 8],
                darkness: darkness_grid()[(i * 5 + 2) % 8],
                tint: tint_grid()[(i * 7 + 1) % 8],
            };
            let base = render_scene(scene, 32).unwrap();
            let img = composite_object(&base, scene, &donor).unwrap();
            assert_eq!(recover_object(&img, scene).unwrap(), donor, "pair {i}");
        }
    }

    #[test]
    fn perfect_transplants_of_continuous_objects_all_match() {
        let (with, without) = sample_specs(60, 60, 9);
        let mut pairs = Vec::new();
        for ((_, donor), scene) in with.iter().zip(&without) {
            let base = render_scene(scene, 32).unwrap();
            pairs.push((*donor, *scene, composite_object(&base, scene, donor).unwrap()));
        }
        let r = drift_report(pairs.iter().map(|(d, s, im)| (d, s, im))).unwrap();
        assert_eq!(r.match_rate, 1.0, "{r:?}");
        assert!(r.width_error <= 0.005 + 1e-12);
    }

    #[test]
    fn empty_transplants_match_nothing_reliably() {
        let (with, without) = make_dataset(30, 30, 32, 2).unwrap();
        let pairs: Vec<_> = with
            .iter()
            .zip(&without)
            .map(|(d, r)| (d.object.unwrap(), r.scene.unwrap(), r.image.clone()))
            .collect();
        let r = drift_report(pairs.iter().map(|(d, s, im)| (d, s, im))).unwrap();
        assert!(r.match_rate < 0.5, "{r:?}");
    }

    #[test]
    fn model_pairs_are_scored() {
        let cfg = ModelConfig {
            image_size: 16,
            base_width: 4,
            code_background: 3,
            code_object: 2,
            leaky_slope: 0.2,
        };
        let params = ParamStore::<f32>::init(&cfg, 1);
        let (with, without) = make_dataset(5, 5, 16, 3).unwrap();
        let r = drift_metric(&params, cfg, &with, &without, 5).unwrap();
        assert_eq!(r.n_pairs, 5);
        assert!((0.0..=1.0).contains(&r.match_rate));
        assert!(drift_metric(&params, cfg, &with, &without, 6).is_err());
        assert!(drift_metric(&params, cfg, &without, &with, 5).is_err());
    }
}
