use crate::model::{
    crossbreed_forward, discriminator_loss, four_child_forward, generator_loss, stacked_forward,
    stacked_generator_loss, LossWeights, ModelConfig, Net, ParamStore, Session,
};
use crate::rng::SplitMix64;
use crate::tensor::{BnMode, Graph, Tensor};

use super::{EvalError, Result};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Share of checked parameters that must meet [`GRAD_TOLERANCE`].
pub const GRAD_PASS_FRACTION: f64 = 0.999;

/// A loss value plus the signs of its piecewise-linear switch points.
#[derive(Debug, Clone, PartialEq)]
pub struct LossProbe {
    pub loss: f64,
    pub kinks: Vec<i8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdEntry {
    pub value: f64,
    /// The `±h` perturbation moved some kink input across zero, so the central
    /// difference straddles a non-differentiable point.
    pub kink_adjacent: bool,
}

/// Central differences `(f(p+h e_i) - f(p-h e_i)) / 2h` for every coordinate.
pub fn finite_diff_gradient(
    params: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<LossProbe>,
) -> Result<Vec<FdEntry>> {
    let base = f(params)?;
    if !base.loss.is_finite() {
        return Err(EvalError::NonFiniteLoss(base.loss));
    }
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = f(&p)?;
        p[i] = orig - h;
        let minus = f(&p)?;
        p[i] = orig;
        for v in [plus.loss, minus.loss] {
            if !v.is_finite() {
                return Err(EvalError::NonFiniteLoss(v));
            }
        }
        out.push(FdEntry {
            value: (plus.loss - minus.loss) / (2.0 * h),
            kink_adjacent: plus.kinks != base.kinks || minus.kinks != base.kinks,
        });
    }
    Ok(out)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Generator,
    StackedGenerator,
    Discriminator,
}

impl GradTarget {
    pub const ALL: [GradTarget; 3] = [GradTarget::Generator, GradTarget::StackedGenerator, GradTarget::Discriminator];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Generator => "generator",
            GradTarget::StackedGenerator => "stacked_generator",
            GradTarget::Discriminator => "discriminator",
        }
    }

    /// Networks whose parameters the loss depends on through the tape.
    fn nets(self) -> &'static [Net] {
        match self {
            GradTarget::Generator | GradTarget::StackedGenerator => &Net::ALL,
            GradTarget::Discriminator => &Net::DISCRIMINATORS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub target: GradTarget,
    pub params: usize,
    pub checked: usize,
    pub kink_skipped: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 0.0;
        }
        1.0 - self.failures.len() as f64 / self.checked as f64
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.pass_fraction() >= GRAD_PASS_FRACTION
    }
}

/// Small 8x8 model used by the gradient check.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        base_width: 2,
        code_background: 2,
        code_object: 1,
        leaky_slope: 0.2,
    }
}

fn random_batch(rng: &mut SplitMix64, n: usize, size: usize) -> Tensor<f64> {
    let data = (0..n * 3 * size * size).map(|_| rng.next_f64()).collect();
    Tensor::new(&[n, 3, size, size], data).expect("batch shape")
}

/// Loss on fixed random images, plus analytic gradients in flat parameter
/// order when `with_grad`.
fn model_loss(
    store: &ParamStore<f64>,
    cfg: ModelConfig,
    target: GradTarget,
    xa: &Tensor<f64>,
    xb: &Tensor<f64>,
    with_grad: bool,
) -> Result<(LossProbe, Vec<f64>)> {
    let mut g = Graph::new();
    let train = BnMode::Train { track_stats: false };
    let mut s = Session::new(store, cfg, target.nets(), train, train);
    let a = g.constant(xa.clone());
    let b = g.constant(xb.clone());
    let w = LossWeights::default();
    let loss = match target {
        GradTarget::Generator => {
            let c = four_child_forward(&mut s, &mut g, a, b)?;
            generator_loss(&mut s, &mut g, &c, a, b, &w)?.total
        }
        GradTarget::StackedGenerator => {
            let c = stacked_forward(&mut s, &mut g, a, b)?;
            stacked_generator_loss(&mut s, &mut g, &c, a, b, &w)?.total
        }
        GradTarget::Discriminator => {
            let c = crossbreed_forward(&mut s, &mut g, a, b)?;
            discriminator_loss(&mut s, &mut g, a, b, c.x_a0, c.x_bu)?.total
        }
    };
    let probe = LossProbe {
        loss: g.value(loss).item(),
        kinks: g.kink_pattern(),
    };
    let mut flat = Vec::new();
    if with_grad {
        let grads = g.backward(loss)?;
        let named = s.named_gradients(&grads);
        for (net, name, t) in store.iter_params().filter(|(n, _, _)| target.nets().contains(n)) {
            match named.get(&(net, name.to_string())) {
                Some(gt) => flat.extend_from_slice(gt.data()),
                None => flat.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
    }
    Ok((probe, flat))
}

fn flatten(store: &ParamStore<f64>, nets: &[Net]) -> (Vec<f64>, Vec<String>) {
    let mut values = Vec::new();
    let mut names = Vec::new();
    for (net, name, t) in store.iter_params().filter(|(n, _, _)| nets.contains(n)) {
        for (i, &v) in t.data().iter().enumerate() {
            values.push(v);
            names.push(format!("{net}.{name}[{i}]"));
        }
    }
    (values, names)
}

fn unflatten(store: &mut ParamStore<f64>, nets: &[Net], values: &[f64]) {
    let mut at = 0;
    for net in Net::ALL.into_iter().filter(|n| nets.contains(n)) {
        for t in store.net_mut(net).params.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
    }
}

/// Compares backward against central differences for every parameter the
/// chosen loss depends on, at float64, on a batch of four random images.
pub fn gradcheck_model(cfg: ModelConfig, target: GradTarget, seed: u64) -> Result<GradCheckReport> {
    let store = ParamStore::<f64>::init(&cfg, seed);
    let mut rng = SplitMix64::new(seed).fork(3);
    let xa = random_batch(&mut rng, 4, cfg.image_size);
    let xb = random_batch(&mut rng, 4, cfg.image_size);
    let (_, analytic) = model_loss(&store, cfg, target, &xa, &xb, true)?;
    let nets = target.nets();
    let (flat, names) = flatten(&store, nets);
    let mut scratch = store.clone();
    let numeric = finite_diff_gradient(&flat, FD_STEP, |p| {
        unflatten(&mut scratch, nets, p);
        Ok(model_loss(&scratch, cfg, target, &xa, &xb, false)?.0)
    })?;
    let mut report = GradCheckReport {
        target,
        params: flat.len(),
        checked: 0,
        kink_skipped: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    for ((fd, a), name) in numeric.iter().zip(&analytic).zip(names) {
        if fd.kink_adjacent {
            report.kink_skipped += 1;
            continue;
        }
        report.checked += 1;
        let e = relative_error(*a, fd.value);
        report.max_rel_err = report.max_rel_err.max(e);
        if e >= GRAD_TOLERANCE {
            report.failures.push(GradMismatch {
                name,
                analytic: *a,
                numeric: fd.value,
                rel_err: e,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff_gradient(&[3.0], FD_STEP, |p| {
            Ok(LossProbe {
                loss: p[0] * p[0],
                kinks: vec![],
            })
        })
        .unwrap();
        assert!((g[0].value - 6.0).abs() < 1e-8);
        assert!(!g[0].kink_adjacent);
    }

    #[test]
    fn l1_gradient_is_the_sign_away_from_kinks_and_flagged_at_them() {
        let f = |p: &[f64]| {
            Ok(LossProbe {
                loss: p.iter().map(|v| v.abs()).sum::<f64>() / p.len() as f64,
                kinks: p.iter().map(|v| v.signum() as i8).collect(),
            })
        };
        let g = finite_diff_gradient(&[0.7, -1.3, 2e-6], FD_STEP, f).unwrap();
        assert!((g[0].value - 1.0 / 3.0).abs() < 1e-9);
        assert!((g[1].value + 1.0 / 3.0).abs() < 1e-9);
        assert!(g[2].kink_adjacent && !g[0].kink_adjacent);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let r = finite_diff_gradient(&[1.0], FD_STEP, |_| {
            Ok(LossProbe {
                loss: f64::NAN,
                kinks: vec![],
            })
        });
        assert!(matches!(r, Err(EvalError::NonFiniteLoss(_))));
    }

    #[test]
    fn full_model_losses_pass_the_oracle() {
        for target in GradTarget::ALL {
            let r = gradcheck_model(gradcheck_config(), target, 11).unwrap();
            assert!(r.params <= 5000);
            assert!(r.passed(), "{target:?}: {} failures, max {:e}: {:?}", r.failures.len(), r.max_rel_err, &r.failures[..r.failures.len().min(5)]);
        }
    }
}
