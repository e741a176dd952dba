use std::collections::BTreeMap;

use crate::tensor::{BatchMoments, BnMode, Float, Gradients, Graph, Tensor, Var};

use super::diagram::{Codec, CodeVars, Critic, Domain};
use super::object::LatentCode;
use super::params::{Net, ParamStore};
use super::{ModelConfig, ModelError, Result};

const STRIDE: usize = 2;
const PAD: usize = 1;

/// Batch statistics a train-mode forward pass wants folded into the running stats.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub net: Net,
    pub layer: String,
    pub moments: BatchMoments<T>,
}

/// One forward/backward pass of the networks over a [`Graph`].
///
/// Each network's parameters are placed on the graph once, the first time the
/// network is used, so every encoder or decoder invocation inside a diagram
/// shares the same leaves. Only networks listed as trainable become
/// gradient-carrying leaves.
pub struct Session<'s, T> {
    store: &'s ParamStore<T>,
    cfg: ModelConfig,
    trainable: Vec<Net>,
    gen_mode: BnMode,
    disc_mode: BnMode,
    bound: BTreeMap<Net, BTreeMap<String, Var>>,
    updates: Vec<StatUpdate<T>>,
}

impl<'s, T: Float> Session<'s, T> {
    pub fn new(
        store: &'s ParamStore<T>,
        cfg: ModelConfig,
        trainable: &[Net],
        gen_mode: BnMode,
        disc_mode: BnMode,
    ) -> Self {
        Self {
            store,
            cfg,
            trainable: trainable.to_vec(),
            gen_mode,
            disc_mode,
            bound: BTreeMap::new(),
            updates: Vec::new(),
        }
    }

    /// Eval-mode session with nothing trainable.
    pub fn inference(store: &'s ParamStore<T>, cfg: ModelConfig) -> Self {
        Self::new(store, cfg, &[], BnMode::Eval, BnMode::Eval)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn var(&mut self, g: &mut Graph<T>, net: Net, name: &str) -> Result<Var> {
        if !self.bound.contains_key(&net) {
            let trainable = self.trainable.contains(&net);
            let vars = self
                .store
                .net(net)
                .params
                .iter()
                .map(|(k, t)| {
                    let v = if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    };
                    (k.clone(), v)
                })
                .collect();
            self.bound.insert(net, vars);
        }
        self.bound[&net]
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(format!("{net}.{name}")))
    }

    fn batch_norm(&mut self, g: &mut Graph<T>, net: Net, layer: &str, x: Var) -> Result<Var> {
        let gamma = self.var(g, net, &format!("{layer}.gamma"))?;
        let beta = self.var(g, net, &format!("{layer}.beta"))?;
        let mode = if net.is_generator() {
            self.gen_mode
        } else {
            self.disc_mode
        };
        match mode {
            BnMode::Train { track_stats } => {
                let (y, moments) = g.batch_norm_train(x, gamma, beta)?;
                if track_stats {
                    self.updates.push(StatUpdate {
                        net,
                        layer: layer.to_string(),
                        moments,
                    });
                }
                Ok(y)
            }
            BnMode::Eval => {
                let stats = self
                    .store
                    .net(net)
                    .stats
                    .get(layer)
                    .ok_or_else(|| ModelError::MissingParam(format!("{net}.{layer} running stats")))?;
                Ok(g.batch_norm_eval(x, gamma, beta, stats)?)
            }
        }
    }

    fn conv(&mut self, g: &mut Graph<T>, net: Net, layer: &str, x: Var, bias: bool) -> Result<Var> {
        let w = self.var(g, net, &format!("{layer}.weight"))?;
        let b = if bias {
            Some(self.var(g, net, &format!("{layer}.bias"))?)
        } else {
            None
        };
        Ok(g.conv2d(x, w, b, STRIDE, PAD)?)
    }

    fn deconv(&mut self, g: &mut Graph<T>, layer: &str, x: Var, bias: bool) -> Result<Var> {
        let w = self.var(g, Net::Decoder, &format!("{layer}.weight"))?;
        let b = if bias {
            Some(self.var(g, Net::Decoder, &format!("{layer}.bias"))?)
        } else {
            None
        };
        Ok(g.conv2d_transpose(x, w, b, STRIDE, PAD)?)
    }

    fn check_image(&self, g: &Graph<T>, x: Var) -> Result<()> {
        match *g.shape(x) {
            [_, 3, h, w] if h % 8 == 0 && w % 8 == 0 && h > 0 && w > 0 => Ok(()),
            _ => Err(ModelError::InputShape {
                expected: "N x 3 x H x W with H and W divisible by 8".into(),
                got: g.shape(x).to_vec(),
            }),
        }
    }

    fn discriminator_logits(&mut self, g: &mut Graph<T>, net: Net, x: Var) -> Result<Var> {
        self.check_image(g, x)?;
        let slope = self.cfg.leaky_slope;
        let h = self.conv(g, net, "conv1", x, true)?;
        let h = g.leaky_relu(h, slope)?;
        let h = self.conv(g, net, "conv2", h, false)?;
        let h = self.batch_norm(g, net, "bn2", h)?;
        let h = g.leaky_relu(h, slope)?;
        let h = self.conv(g, net, "conv3", h, false)?;
        let h = self.batch_norm(g, net, "bn3", h)?;
        let h = g.leaky_relu(h, slope)?;
        let pooled = g.global_avg_pool(h)?;
        let w = self.var(g, net, "fc.weight")?;
        let b = self.var(g, net, "fc.bias")?;
        let logits = g.linear(pooled, w, Some(b))?;
        let n = g.shape(logits)[0];
        Ok(g.reshape(logits, &[n])?)
    }

    /// Every parameter leaf placed on the graph so far.
    pub fn bound_vars(&self) -> impl Iterator<Item = (Net, &str, Var)> {
        self.bound
            .iter()
            .flat_map(|(net, vars)| vars.iter().map(move |(k, v)| (*net, k.as_str(), *v)))
    }

    /// Gradients keyed by `(network, parameter)`.
    pub fn named_gradients(&self, grads: &Gradients<T>) -> BTreeMap<(Net, String), Tensor<T>> {
        self.bound_vars()
            .filter_map(|(net, name, var)| grads.get(var).map(|t| ((net, name.to_string()), t.clone())))
            .collect()
    }

    pub fn into_stat_updates(self) -> Vec<StatUpdate<T>> {
        self.updates
    }
}

impl<T: Float> Codec<T> for Session<'_, T> {
    fn encode(&mut self, g: &mut Graph<T>, x: Var) -> Result<CodeVars> {
        self.check_image(g, x)?;
        let net = Net::Encoder;
        let slope = self.cfg.leaky_slope;
        let h = self.conv(g, net, "conv1", x, false)?;
        let h = self.batch_norm(g, net, "bn1", h)?;
        let h = g.leaky_relu(h, slope)?;
        let h = self.conv(g, net, "conv2", h, false)?;
        let h = self.batch_norm(g, net, "bn2", h)?;
        let h = g.leaky_relu(h, slope)?;
        // No batch norm on the code layer: per-batch normalization would pin the
        // object channels' batch spread to |gamma| and make a zero code impossible.
        let h = self.conv(g, net, "conv3", h, true)?;
        let h = g.leaky_relu(h, slope)?;
        let (background, object) = g.split_channels(h, self.cfg.code_background)?;
        Ok(CodeVars { background, object })
    }

    fn decode(&mut self, g: &mut Graph<T>, background: Var, object: Var) -> Result<Var> {
        let (bs, os) = (g.shape(background).to_vec(), g.shape(object).to_vec());
        let ok = bs.len() == 4
            && os.len() == 4
            && bs[1] == self.cfg.code_background
            && os[1] == self.cfg.code_object
            && bs[0] == os[0]
            && bs[2..] == os[2..];
        if !ok {
            return Err(ModelError::InputShape {
                expected: format!(
                    "background N x {} x h x w and object N x {} x h x w",
                    self.cfg.code_background, self.cfg.code_object
                ),
                got: bs.into_iter().chain(os).collect(),
            });
        }
        let net = Net::Decoder;
        let slope = self.cfg.leaky_slope;
        let h = g.concat_channels(background, object)?;
        let h = self.deconv(g, "deconv1", h, false)?;
        let h = self.batch_norm(g, net, "bn1", h)?;
        let h = g.leaky_relu(h, slope)?;
        let h = self.deconv(g, "deconv2", h, false)?;
        let h = self.batch_norm(g, net, "bn2", h)?;
        let h = g.leaky_relu(h, slope)?;
        let h = self.deconv(g, "deconv3", h, true)?;
        Ok(g.sigmoid(h))
    }
}

impl<T: Float> Critic<T> for Session<'_, T> {
    fn logits(&mut self, g: &mut Graph<T>, domain: Domain, x: Var) -> Result<Var> {
        let net = match domain {
            Domain::WithObject => Net::DiscWith,
            Domain::WithoutObject => Net::DiscWithout,
        };
        self.discriminator_logits(g, net, x)
    }
}

impl<T: Float> ParamStore<T> {
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) -> Result<()> {
        for u in updates {
            let stats = self
                .net_mut(u.net)
                .stats
                .get_mut(&u.layer)
                .ok_or_else(|| ModelError::MissingParam(format!("{}.{} running stats", u.net, u.layer)))?;
            stats.update(&u.moments);
        }
        Ok(())
    }
}

/// Eval-mode encoder/decoder/discriminator calls on plain tensors.
pub struct Inference<'a, T> {
    store: &'a ParamStore<T>,
    cfg: ModelConfig,
}

impl<'a, T: Float> Inference<'a, T> {
    pub fn new(store: &'a ParamStore<T>, cfg: ModelConfig) -> Self {
        Self { store, cfg }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encode(&self, images: &Tensor<T>) -> Result<LatentCode<T>> {
        let mut g = Graph::new();
        let mut s = Session::inference(self.store, self.cfg);
        let x = g.constant(images.clone());
        let code = s.encode(&mut g, x)?;
        Ok(LatentCode {
            background: g.value(code.background).clone(),
            object: g.value(code.object).clone(),
        })
    }

    pub fn decode(&self, code: &LatentCode<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut s = Session::inference(self.store, self.cfg);
        let b = g.constant(code.background.clone());
        let o = g.constant(code.object.clone());
        let y = s.decode(&mut g, b, o)?;
        Ok(g.value(y).clone())
    }

    pub fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(images)?)
    }

    /// Per-sample probability of belonging to `domain`.
    pub fn discriminate(&self, domain: Domain, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut s = Session::inference(self.store, self.cfg);
        let x = g.constant(images.clone());
        let logits = s.logits(&mut g, domain, x)?;
        let p = g.sigmoid(logits);
        Ok(g.value(p).clone())
    }
}
