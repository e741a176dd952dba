//! Loss terms recomputed with plain loops over flat slices. Nothing here
//! touches the graph, so agreement with the model losses is an independent check.

use crate::model::{GeneratorTerms, LossWeights};

/// Flat views of everything the generator loss reads.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorInputs<'a> {
    pub x_au: &'a [f64],
    pub x_b0: &'a [f64],
    /// Reconstructions of the parents (grandchildren in stacked mode).
    pub rec_au: &'a [f64],
    pub rec_b0: &'a [f64],
    pub x_a0: &'a [f64],
    pub x_bu: &'a [f64],
    /// Object codes that should vanish; their mean absolute values are summed.
    pub null_codes: &'a [&'a [f64]],
    /// Object-free discriminator logits on `x_a0`.
    pub logits_a0: &'a [f64],
    /// Object discriminator logits on `x_bu`.
    pub logits_bu: &'a [f64],
}

fn mean_abs(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x.abs();
    }
    s / v.len() as f64
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `-ln sigmoid(z)` averaged.
fn mean_neg_log_sigmoid(z: &[f64]) -> f64 {
    z.iter().map(|&v| softplus(-v)).sum::<f64>() / z.len() as f64
}

/// `-ln(1 - sigmoid(z))` averaged.
fn mean_neg_log_one_minus_sigmoid(z: &[f64]) -> f64 {
    z.iter().map(|&v| softplus(v)).sum::<f64>() / z.len() as f64
}

pub fn generator_loss_oracle(x: &GeneratorInputs, w: &LossWeights) -> GeneratorTerms {
    let rec_au = mean_abs_diff(x.x_au, x.rec_au);
    let rec_b0 = mean_abs_diff(x.x_b0, x.rec_b0);
    let gan_0 = mean_neg_log_sigmoid(x.logits_a0);
    let gan_ne0 = mean_neg_log_sigmoid(x.logits_bu);
    let null = x.null_codes.iter().map(|c| mean_abs(c)).sum::<f64>();
    let n = x.x_au.len();
    let mut par = 0.0;
    for i in 0..n {
        par += ((x.x_au[i] + x.x_b0[i]) - (x.x_a0[i] + x.x_bu[i])).abs();
    }
    par /= n as f64;
    GeneratorTerms {
        rec_au,
        rec_b0,
        gan_0,
        gan_ne0,
        null,
        par,
        total: w.rec * (rec_au + rec_b0) + w.gan * (gan_0 + gan_ne0) + w.null * null + w.par * par,
    }
}

/// `(with, without)` cross-entropies from raw logits.
pub fn discriminator_loss_oracle(real_with: &[f64], fake_with: &[f64], real_without: &[f64], fake_without: &[f64]) -> (f64, f64) {
    (
        mean_neg_log_sigmoid(real_with) + mean_neg_log_one_minus_sigmoid(fake_with),
        mean_neg_log_sigmoid(real_without) + mean_neg_log_one_minus_sigmoid(fake_without),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::gradcheck_config;
    use crate::model::{
        crossbreed_forward, discriminator_loss, four_child_forward, generator_loss, stacked_forward,
        stacked_generator_loss, Critic, Domain, Net, ParamStore, Session,
    };
    use crate::rng::SplitMix64;
    use crate::tensor::{BnMode, Graph, Tensor, Var};

    /// Passes logits through while keeping a copy of each call.
    struct Recorder<'r, 's> {
        inner: &'r mut Session<'s, f64>,
        seen: Vec<(Domain, Var)>,
    }

    impl Critic<f64> for Recorder<'_, '_> {
        fn logits(&mut self, g: &mut Graph<f64>, domain: Domain, x: Var) -> crate::model::Result<Var> {
            let v = self.inner.logits(g, domain, x)?;
            self.seen.push((domain, v));
            Ok(v)
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    fn close(a: &GeneratorTerms, b: &GeneratorTerms) -> bool {
        [
            (a.rec_au, b.rec_au),
            (a.rec_b0, b.rec_b0),
            (a.gan_0, b.gan_0),
            (a.gan_ne0, b.gan_ne0),
            (a.null, b.null),
            (a.par, b.par),
            (a.total, b.total),
        ]
        .iter()
        .all(|&(x, y)| rel(x, y) < 1e-6)
    }

    fn random(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.next_f64()).collect()).unwrap()
    }

    fn weights(rng: &mut SplitMix64) -> LossWeights {
        LossWeights {
            rec: rng.uniform(0.0, 20.0),
            gan: rng.uniform(0.0, 2.0),
            null: rng.uniform(0.0, 2.0),
            par: rng.uniform(0.0, 2.0),
        }
    }

    #[test]
    fn graph_losses_match_direct_arithmetic() {
        let cfg = gradcheck_config();
        let mut rng = SplitMix64::new(99);
        let train = BnMode::Train { track_stats: false };
        for trial in 0..100 {
            let store = ParamStore::<f64>::init(&cfg, trial);
            let n = 2 + rng.below(3);
            let xa = random(&mut rng, &[n, 3, 8, 8]);
            let xb = random(&mut rng, &[n, 3, 8, 8]);
            let w = weights(&mut rng);
            let stacked = trial % 2 == 1;

            let mut g = Graph::new();
            let mut s = Session::new(&store, cfg, &Net::ALL, train, train);
            let a = g.constant(xa.clone());
            let b = g.constant(xb.clone());
            let (loss, rec, cross, nulls) = if stacked {
                let c = stacked_forward(&mut s, &mut g, a, b).unwrap();
                let mut r = Recorder { inner: &mut s, seen: vec![] };
                let l = stacked_generator_loss(&mut r, &mut g, &c, a, b, &w).unwrap();
                let seen = r.seen;
                (l, (c.x_au_grand, c.x_b0_grand), (c.x_a0, c.x_bu, seen), vec![c.code_b0.object, c.code_a0.object])
            } else {
                let c = four_child_forward(&mut s, &mut g, a, b).unwrap();
                let mut r = Recorder { inner: &mut s, seen: vec![] };
                let l = generator_loss(&mut r, &mut g, &c, a, b, &w).unwrap();
                let seen = r.seen;
                (l, (c.x_au_rec, c.x_b0_rec), (c.x_a0, c.x_bu, seen), vec![c.code_b0.object])
            };
            let vals = |v: Var| g.value(v).to_f64_vec();
            let (x_a0, x_bu, seen) = cross;
            assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), [Domain::WithoutObject, Domain::WithObject]);
            let null_vals: Vec<Vec<f64>> = nulls.iter().map(|&v| vals(v)).collect();
            let null_refs: Vec<&[f64]> = null_vals.iter().map(|v| v.as_slice()).collect();
            let (xa_v, xb_v, ra, rb, a0, bu, la0, lbu) = (
                xa.to_f64_vec(),
                xb.to_f64_vec(),
                vals(rec.0),
                vals(rec.1),
                vals(x_a0),
                vals(x_bu),
                vals(seen[0].1),
                vals(seen[1].1),
            );
            let inputs = GeneratorInputs {
                x_au: &xa_v,
                x_b0: &xb_v,
                rec_au: &ra,
                rec_b0: &rb,
                x_a0: &a0,
                x_bu: &bu,
                null_codes: &null_refs,
                logits_a0: &la0,
                logits_bu: &lbu,
            };
            let oracle = generator_loss_oracle(&inputs, &w);
            let graph = loss.terms(&g);
            assert!(close(&oracle, &graph), "trial {trial}: {oracle:?} vs {graph:?}");
        }
    }

    #[test]
    fn discriminator_losses_match_direct_arithmetic() {
        let cfg = gradcheck_config();
        let mut rng = SplitMix64::new(7);
        let train = BnMode::Train { track_stats: false };
        for trial in 0..100 {
            let store = ParamStore::<f64>::init(&cfg, 1000 + trial);
            let n = 2 + rng.below(3);
            let mut g = Graph::new();
            let mut s = Session::new(&store, cfg, &Net::DISCRIMINATORS, train, train);
            let a = g.constant(random(&mut rng, &[n, 3, 8, 8]));
            let b = g.constant(random(&mut rng, &[n, 3, 8, 8]));
            let c = crossbreed_forward(&mut s, &mut g, a, b).unwrap();
            let mut r = Recorder { inner: &mut s, seen: vec![] };
            let l = discriminator_loss(&mut r, &mut g, a, b, c.x_a0, c.x_bu).unwrap();
            let v: Vec<Vec<f64>> = r.seen.iter().map(|&(_, x)| g.value(x).to_f64_vec()).collect();
            let (with, without) = discriminator_loss_oracle(&v[0], &v[1], &v[2], &v[3]);
            let (gw, gwo) = l.values(&g);
            assert!(rel(with, gw) < 1e-6 && rel(without, gwo) < 1e-6, "trial {trial}");
            assert!(rel(with + without, g.value(l.total).item()) < 1e-6);
        }
    }

    #[test]
    fn definitional_zeros_are_exact() {
        let x: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let y: Vec<f64> = (0..48).map(|i| (i as f64 * 0.91).cos().abs()).collect();
        let zero = vec![0.0; 12];
        let nulls: [&[f64]; 2] = [&zero, &zero];
        let t = generator_loss_oracle(
            &GeneratorInputs {
                x_au: &x,
                x_b0: &y,
                rec_au: &x,
                rec_b0: &y,
                x_a0: &y,
                x_bu: &x,
                null_codes: &nulls,
                logits_a0: &[0.0],
                logits_bu: &[0.0],
            },
            &LossWeights::default(),
        );
        assert_eq!((t.rec_au, t.rec_b0, t.null, t.par), (0.0, 0.0, 0.0, 0.0));
        assert!((t.gan_0 - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
