use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::model::{Inference, LatentCode, ModelConfig, ParamStore};
use crate::synth::{stack_images, Sample};
use crate::tensor::Tensor;

use super::{recover_object, DriftReport, EvalError, ProbeResult, Result};

const BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionStats {
    /// Mean absolute per-pixel error over both sets.
    pub rec_l1: f64,
    pub rec_l1_with: f64,
    pub rec_l1_without: f64,
    /// Mean absolute object code of object-free images.
    pub null_abs: f64,
}

fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.numel() as f64
}

fn batches(samples: &[Sample]) -> impl Iterator<Item = (usize, Result<Tensor<f32>>)> + '_ {
    samples
        .chunks(BATCH)
        .enumerate()
        .map(|(i, c)| (i * BATCH, stack_images(c.iter().map(|s| &s.image)).map_err(EvalError::from)))
}

pub fn reconstruction_stats(
    params: &ParamStore<f32>,
    cfg: ModelConfig,
    with: &[Sample],
    without: &[Sample],
) -> Result<ReconstructionStats> {
    if with.is_empty() || without.is_empty() {
        return Err(EvalError::Input("reconstruction stats need both sets".into()));
    }
    let net = Inference::new(params, cfg);
    let mut rec = [0.0; 2];
    let mut null = 0.0;
    for (k, set) in [with, without].into_iter().enumerate() {
        for (_, batch) in batches(set) {
            let x = batch?;
            let code = net.encode(&x)?;
            let out = net.decode(&code)?;
            let n = x.shape()[0] as f64;
            rec[k] += mean_abs_diff(&x, &out) * n;
            if k == 1 {
                let o = &code.object;
                null += o.data().iter().map(|v| v.abs() as f64).sum::<f64>() / o.numel() as f64 * n;
            }
        }
    }
    let (nw, no) = (with.len() as f64, without.len() as f64);
    Ok(ReconstructionStats {
        rec_l1: (rec[0] + rec[1]) / (nw + no),
        rec_l1_with: rec[0] / nw,
        rec_l1_without: rec[1] / no,
        null_abs: null / no,
    })
}

/// Mean per-pixel L1 between `decode(A, 0)` and the rendered object-free
/// counterfactual of each with-object sample.
pub fn removal_error(params: &ParamStore<f32>, cfg: ModelConfig, with: &[Sample]) -> Result<f64> {
    if with.is_empty() {
        return Err(EvalError::Input("removal error needs samples".into()));
    }
    let net = Inference::new(params, cfg);
    let mut total = 0.0;
    for (start, batch) in batches(with) {
        let code = net.encode(&batch?)?;
        let removed = net.decode(&code.without_object())?;
        for i in 0..code.batch() {
            let truth = with[start + i]
                .counterfactual()
                .ok_or_else(|| EvalError::Input("removal error needs samples with known scenes".into()))??;
            total += mean_abs_diff(&removed.select(i)?, &truth);
        }
    }
    Ok(total / with.len() as f64)
}

/// Fraction of samples whose recovered darkness never decreases as the object
/// code is scaled through `factors` (ascending).
pub fn scale_monotonicity(params: &ParamStore<f32>, cfg: ModelConfig, with: &[Sample], factors: &[f64]) -> Result<f64> {
    if with.is_empty() || factors.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::Input("scale check needs samples and ascending factors".into()));
    }
    let net = Inference::new(params, cfg);
    let mut monotone = 0;
    for (start, batch) in batches(with) {
        let code = net.encode(&batch?)?;
        let mut darkness = vec![Vec::with_capacity(factors.len()); code.batch()];
        for &t in factors {
            let scaled = LatentCode {
                background: code.background.clone(),
                object: code.object.map(|v| v * t as f32),
            };
            let out = net.decode(&scaled)?;
            for (i, d) in darkness.iter_mut().enumerate() {
                let scene = with[start + i]
                    .scene
                    .ok_or_else(|| EvalError::Input("scale check needs samples with known scenes".into()))?;
                d.push(recover_object(&out.select(i)?, &scene)?.darkness);
            }
        }
        monotone += darkness.iter().filter(|d| d.windows(2).all(|w| w[0] <= w[1])).count();
    }
    Ok(monotone as f64 / with.len() as f64)
}

pub const PROBE_CSV_HEADER: &str = "label,r2_object_from_u,r2_object_from_a,u_r2_darkness,u_r2_width,u_r2_tint,u_style_accuracy,u_degenerate,a_r2_darkness,a_r2_width,a_r2_tint,a_style_accuracy,a_degenerate";
pub const DRIFT_CSV_HEADER: &str = "label,n_pairs,match_rate,style_match_rate,darkness_error,width_error,tint_error";

fn append_row(path: &Path, header: &str, row: &str) -> Result<()> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    if fresh {
        writeln!(f, "{header}").map_err(io)?;
    }
    writeln!(f, "{row}").map_err(io)
}

fn csv_label(label: &str) -> Result<&str> {
    if label.contains([',', '\n', '\r']) {
        return Err(EvalError::Input(format!("label {label:?} cannot go in a CSV cell")));
    }
    Ok(label)
}

/// Appends to `probe.csv` in `dir`, writing the header first if the file is new.
pub fn append_probe_csv(dir: &Path, label: &str, r: &ProbeResult) -> Result<()> {
    let (u, a) = (r.from_u, r.from_a);
    let row = format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        csv_label(label)?,
        r.r2_object_from_u,
        r.r2_object_from_a,
        u.r2_darkness,
        u.r2_width,
        u.r2_tint,
        u.style_accuracy,
        u.degenerate,
        a.r2_darkness,
        a.r2_width,
        a.r2_tint,
        a.style_accuracy,
        a.degenerate
    );
    append_row(&dir.join("probe.csv"), PROBE_CSV_HEADER, &row)
}

/// Appends to `drift.csv` in `dir`, writing the header first if the file is new.
pub fn append_drift_csv(dir: &Path, label: &str, r: &DriftReport) -> Result<()> {
    let row = format!(
        "{},{},{},{},{},{},{}",
        csv_label(label)?,
        r.n_pairs,
        r.match_rate,
        r.style_match_rate,
        r.darkness_error,
        r.width_error,
        r.tint_error
    );
    append_row(&dir.join("drift.csv"), DRIFT_CSV_HEADER, &row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ProbeBreakdown;
    use crate::synth::make_dataset;

    fn small() -> (ModelConfig, ParamStore<f32>) {
        let cfg = ModelConfig {
            image_size: 16,
            base_width: 4,
            code_background: 3,
            code_object: 2,
            leaky_slope: 0.2,
        };
        (cfg, ParamStore::init(&cfg, 4))
    }

    #[test]
    fn untrained_model_measurements_are_in_range() {
        let (cfg, p) = small();
        let (w, o) = make_dataset(70, 66, 16, 1).unwrap();
        let s = reconstruction_stats(&p, cfg, &w, &o).unwrap();
        assert!(s.rec_l1 > 0.0 && s.rec_l1 < 1.0);
        assert!((s.rec_l1 - (70.0 * s.rec_l1_with + 66.0 * s.rec_l1_without) / 136.0).abs() < 1e-12);
        assert!(s.null_abs > 0.0);
        let r = removal_error(&p, cfg, &w).unwrap();
        assert!(r > 0.0 && r < 1.0);
        let m = scale_monotonicity(&p, cfg, &w[..4], &[0.25, 0.5, 0.75, 1.0]).unwrap();
        assert!((0.0..=1.0).contains(&m));
        assert!(scale_monotonicity(&p, cfg, &w[..4], &[1.0, 0.5]).is_err());
    }

    #[test]
    fn csv_logs_get_one_header_and_a_row_per_call() {
        let dir = tempfile::tempdir().unwrap();
        let b = ProbeBreakdown {
            r2_darkness: 0.5,
            r2_width: 0.25,
            r2_tint: 0.0,
            style_accuracy: 1.0,
            degenerate: false,
        };
        let p = ProbeResult {
            r2_object_from_u: 0.25,
            r2_object_from_a: 0.25,
            from_u: b,
            from_a: b,
        };
        append_probe_csv(dir.path(), "run1", &p).unwrap();
        append_probe_csv(dir.path(), "run2", &p).unwrap();
        let text = std::fs::read_to_string(dir.path().join("probe.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], PROBE_CSV_HEADER);
        assert!(lines.iter().all(|l| l.split(',').count() == 13));
        assert!(append_probe_csv(dir.path(), "a,b", &p).is_err());

        let d = DriftReport {
            n_pairs: 4,
            match_rate: 0.75,
            style_match_rate: 1.0,
            darkness_error: 0.1,
            width_error: 0.01,
            tint_error: 0.2,
        };
        append_drift_csv(dir.path(), "run1", &d).unwrap();
        let text = std::fs::read_to_string(dir.path().join("drift.csv")).unwrap();
        assert_eq!(text, format!("{DRIFT_CSV_HEADER}\nrun1,4,0.75,1,0.1,0.01,0.2\n"));
    }
}
