use std::collections::BTreeMap;
use std::fmt;

use crate::rng::SplitMix64;
use crate::tensor::{Float, RunningStats, Tensor};

use super::{ModelConfig, ModelError};

/// The four networks of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Net {
    Encoder,
    Decoder,
    /// Scores images against the with-object set.
    DiscWith,
    /// Scores images against the without-object set.
    DiscWithout,
}

impl Net {
    pub const ALL: [Net; 4] = [Net::Encoder, Net::Decoder, Net::DiscWith, Net::DiscWithout];
    pub const GENERATOR: [Net; 2] = [Net::Encoder, Net::Decoder];
    pub const DISCRIMINATORS: [Net; 2] = [Net::DiscWith, Net::DiscWithout];

    pub fn name(self) -> &'static str {
        match self {
            Net::Encoder => "encoder",
            Net::Decoder => "decoder",
            Net::DiscWith => "disc_with",
            Net::DiscWithout => "disc_without",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.name() == name)
    }

    pub fn is_generator(self) -> bool {
        matches!(self, Net::Encoder | Net::Decoder)
    }
}

impl fmt::Display for Net {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Trainable tensors and batch-norm running statistics of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub stats: BTreeMap<String, RunningStats<T>>,
}

impl<T> Default for NetParams<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            stats: BTreeMap::new(),
        }
    }
}

impl<T: Float> NetParams<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    fn conv(&mut self, name: &str, shape: [usize; 4], fan_in: usize, bias: bool, rng: &mut SplitMix64) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect();
        self.params
            .insert(format!("{name}.weight"), Tensor::new(&shape, data).expect("shape"));
        if bias {
            let out = if name.starts_with("deconv") { shape[1] } else { shape[0] };
            self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
        }
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, rng: &mut SplitMix64) {
        let bound = 1.0 / (inp as f64).sqrt();
        let data = (0..out * inp).map(|_| T::of(rng.uniform(-bound, bound))).collect();
        self.params
            .insert(format!("{name}.weight"), Tensor::new(&[out, inp], data).expect("shape"));
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
    }

    fn batch_norm(&mut self, name: &str, channels: usize) {
        self.params
            .insert(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.stats.insert(name.to_string(), RunningStats::new(channels));
    }
}

/// All model state: encoder, decoder and the two discriminators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub encoder: NetParams<T>,
    pub decoder: NetParams<T>,
    pub disc_with: NetParams<T>,
    pub disc_without: NetParams<T>,
}

pub(crate) const KERNEL: usize = 4;

impl<T: Float> ParamStore<T> {
    /// Fresh parameters: conv/linear weights uniform in `±1/sqrt(fan_in)`,
    /// biases 0, batch-norm gamma 1 and beta 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let w = cfg.base_width;
        let code = cfg.code_channels();
        let k = KERNEL;
        let area = k * k;

        let mut encoder = NetParams::default();
        encoder.conv("conv1", [w, 3, k, k], 3 * area, false, &mut rng);
        encoder.batch_norm("bn1", w);
        encoder.conv("conv2", [2 * w, w, k, k], w * area, false, &mut rng);
        encoder.batch_norm("bn2", 2 * w);
        encoder.conv("conv3", [code, 2 * w, k, k], 2 * w * area, true, &mut rng);

        let mut decoder = NetParams::default();
        decoder.conv("deconv1", [code, 2 * w, k, k], code * area, false, &mut rng);
        decoder.batch_norm("bn1", 2 * w);
        decoder.conv("deconv2", [2 * w, w, k, k], 2 * w * area, false, &mut rng);
        decoder.batch_norm("bn2", w);
        decoder.conv("deconv3", [w, 3, k, k], w * area, true, &mut rng);

        let disc = |rng: &mut SplitMix64| {
            let mut d = NetParams::default();
            d.conv("conv1", [w, 3, k, k], 3 * area, true, rng);
            d.conv("conv2", [2 * w, w, k, k], w * area, false, rng);
            d.batch_norm("bn2", 2 * w);
            d.conv("conv3", [4 * w, 2 * w, k, k], 2 * w * area, false, rng);
            d.batch_norm("bn3", 4 * w);
            d.linear("fc", 1, 4 * w, rng);
            d
        };
        let disc_with = disc(&mut rng);
        let disc_without = disc(&mut rng);
        Self {
            encoder,
            decoder,
            disc_with,
            disc_without,
        }
    }

    pub fn net(&self, net: Net) -> &NetParams<T> {
        match net {
            Net::Encoder => &self.encoder,
            Net::Decoder => &self.decoder,
            Net::DiscWith => &self.disc_with,
            Net::DiscWithout => &self.disc_without,
        }
    }

    pub fn net_mut(&mut self, net: Net) -> &mut NetParams<T> {
        match net {
            Net::Encoder => &mut self.encoder,
            Net::Decoder => &mut self.decoder,
            Net::DiscWith => &mut self.disc_with,
            Net::DiscWithout => &mut self.disc_without,
        }
    }

    pub fn param_count(&self) -> usize {
        Net::ALL.iter().map(|&n| self.net(n).param_count()).sum()
    }

    /// `(network, parameter name, tensor)` in a fixed order.
    pub fn iter_params(&self) -> impl Iterator<Item = (Net, &str, &Tensor<T>)> {
        Net::ALL.into_iter().flat_map(move |net| {
            self.net(net)
                .params
                .iter()
                .map(move |(k, v)| (net, k.as_str(), v))
        })
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        let cast_net = |n: &NetParams<T>| NetParams {
            params: n.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            stats: n
                .stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: s.mean.cast(),
                            var: s.var.cast(),
                        },
                    )
                })
                .collect(),
        };
        ParamStore {
            encoder: cast_net(&self.encoder),
            decoder: cast_net(&self.decoder),
            disc_with: cast_net(&self.disc_with),
            disc_without: cast_net(&self.disc_without),
        }
    }
}
