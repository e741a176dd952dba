use nalgebra::{DMatrix, DVector};

use crate::model::{Inference, LatentCode, ModelConfig, ParamStore};
use crate::synth::{stack_images, ObjectSpec, Sample};
use crate::tensor::Tensor;

use super::{EvalError, Result};

/// Share of probe samples used for fitting; the rest are scored.
pub const PROBE_FIT_FRACTION: f64 = 0.7;
pub const MIN_PROBE_SAMPLES: usize = 500;
const ENCODE_BATCH: usize = 64;

/// Scores of linear read-outs of the object parameters from one code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeBreakdown {
    pub r2_darkness: f64,
    pub r2_width: f64,
    pub r2_tint: f64,
    /// Nearest-centroid accuracy over the three styles.
    pub style_accuracy: f64,
    /// Every feature was constant on the fitting split.
    pub degenerate: bool,
}

impl ProbeBreakdown {
    /// Mean of the three regression scores.
    pub fn r2_object(&self) -> f64 {
        (self.r2_darkness + self.r2_width + self.r2_tint) / 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub r2_object_from_u: f64,
    pub r2_object_from_a: f64,
    pub from_u: ProbeBreakdown,
    pub from_a: ProbeBreakdown,
}

/// Held-out coefficient of determination, `1 - SSE/SST`.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let sse: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    if sst == 0.0 {
        return if sse == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - sse / sst
}

/// Column means and standard deviations over `rows`, with zero deviation for
/// constant columns.
fn column_stats(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut sd = vec![0.0; dim];
    for r in rows {
        for j in 0..dim {
            sd[j] += (r[j] - mean[j]).powi(2);
        }
    }
    for s in &mut sd {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 0.0;
        }
    }
    (mean, sd)
}

fn standardize(row: &[f64], mean: &[f64], sd: &[f64]) -> Vec<f64> {
    row.iter()
        .zip(mean.iter().zip(sd))
        .map(|(v, (m, s))| if *s == 0.0 { 0.0 } else { (v - m) / s })
        .collect()
}

/// Fits the probes on the first [`PROBE_FIT_FRACTION`] of the rows and scores
/// the rest.
pub fn probe_features(features: &[Vec<f64>], specs: &[ObjectSpec]) -> Result<ProbeBreakdown> {
    if features.len() != specs.len() {
        return Err(EvalError::Input(format!("{} feature rows for {} specs", features.len(), specs.len())));
    }
    let n = features.len();
    let n_fit = ((n as f64) * PROBE_FIT_FRACTION).round() as usize;
    if n_fit < 2 || n - n_fit < 2 {
        return Err(EvalError::Input(format!("need more probe samples than {n}")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(EvalError::Input("feature rows differ in length".into()));
    }
    let fit: Vec<&[f64]> = features[..n_fit].iter().map(|f| f.as_slice()).collect();
    let (mean, sd) = column_stats(&fit, dim);
    if sd.iter().all(|&s| s == 0.0) {
        return Ok(ProbeBreakdown {
            r2_darkness: 0.0,
            r2_width: 0.0,
            r2_tint: 0.0,
            style_accuracy: 0.0,
            degenerate: true,
        });
    }
    let z: Vec<Vec<f64>> = features.iter().map(|f| standardize(f, &mean, &sd)).collect();

    let design = |rows: &[Vec<f64>]| {
        DMatrix::from_fn(rows.len(), dim + 1, |i, j| if j == dim { 1.0 } else { rows[i][j] })
    };
    let x_fit = design(&z[..n_fit]);
    let x_test = design(&z[n_fit..]);
    let svd = x_fit.svd(true, true);
    let cutoff = svd.singular_values.max() * 1e-10;
    let targets: [fn(&ObjectSpec) -> f64; 3] = [|s| s.darkness, |s| s.width, |s| s.tint];
    let mut r2 = [0.0; 3];
    for (k, get) in targets.iter().enumerate() {
        let y = DVector::from_iterator(n_fit, specs[..n_fit].iter().map(get));
        let beta = svd.solve(&y, cutoff).map_err(|e| EvalError::Input(e.to_string()))?;
        let pred = &x_test * beta;
        let truth: Vec<f64> = specs[n_fit..].iter().map(get).collect();
        r2[k] = r_squared(&truth, pred.as_slice());
    }

    let mut centroids = vec![vec![0.0; dim]; 3];
    let mut counts = [0usize; 3];
    for (row, s) in z[..n_fit].iter().zip(&specs[..n_fit]) {
        let c = s.style.index();
        counts[c] += 1;
        for (a, v) in centroids[c].iter_mut().zip(row) {
            *a += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let mut correct = 0;
    for (row, s) in z[n_fit..].iter().zip(&specs[n_fit..]) {
        let best = (0..3)
            .filter(|&c| counts[c] > 0)
            .min_by(|&a, &b| {
                let d = |c: usize| row.iter().zip(&centroids[c]).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap_or(0);
        if best == s.style.index() {
            correct += 1;
        }
    }
    Ok(ProbeBreakdown {
        r2_darkness: r2[0],
        r2_width: r2[1],
        r2_tint: r2[2],
        style_accuracy: correct as f64 / (n - n_fit) as f64,
        degenerate: false,
    })
}

/// Encodes `samples` in batches and returns the flattened `(A, u)` per sample.
pub fn encode_features(params: &ParamStore<f32>, cfg: ModelConfig, samples: &[Sample]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let net = Inference::new(params, cfg);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ENCODE_BATCH) {
        let batch = stack_images(chunk.iter().map(|s| &s.image))?;
        let code: LatentCode<f32> = net.encode(&batch)?;
        let rows = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
            let per = t.numel() / chunk.len();
            t.to_f64_vec().chunks(per).map(|c| c.to_vec()).collect()
        };
        out.extend(rows(&code.background).into_iter().zip(rows(&code.object)));
    }
    Ok(out)
}

/// Linear read-out of the ground-truth object parameters from the object code
/// and from the background code of with-object samples.
pub fn disentanglement_probe(params: &ParamStore<f32>, cfg: ModelConfig, samples: &[Sample]) -> Result<ProbeResult> {
    if samples.len() < MIN_PROBE_SAMPLES {
        return Err(EvalError::Input(format!(
            "probe needs at least {MIN_PROBE_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let specs: Vec<ObjectSpec> = samples
        .iter()
        .map(|s| match s.object {
            Some(o) if o.present => Ok(o),
            _ => Err(EvalError::Input("probe samples must carry a present object spec".into())),
        })
        .collect::<Result<_>>()?;
    let (a, u): (Vec<_>, Vec<_>) = encode_features(params, cfg, samples)?.into_iter().unzip();
    let from_u = probe_features(&u, &specs)?;
    let from_a = probe_features(&a, &specs)?;
    Ok(ProbeResult {
        r2_object_from_u: from_u.r2_object(),
        r2_object_from_a: from_a.r2_object(),
        from_u,
        from_a,
    })
}
