//! ResNet-style image-to-image generator.
//!
//! Topology (`w` = base width):
//!
//! ```text
//! reflect-pad 3, conv 7x7 -> w,   norm, relu      (norm1)
//! conv 3x3 s2 -> 2w,              norm, relu      (norm2)
//! conv 3x3 s2 -> 4w,              norm, relu      (norm3)
//! n x residual block at 4w                          (two norms each)
//! conv-transpose 3x3 s2 -> 2w,    norm, relu
//! conv-transpose 3x3 s2 -> w,     norm, relu
//! reflect-pad 3, conv 7x7 -> out, tanh
//! ```
//!
//! A residual block is `x + norm(conv(pad(relu(norm(conv(pad(x)))))))`.
//!
//! Parameter names (all conv weights are `[Cout, Cin, kh, kw]`, including
//! the transposed convolutions):
//!
//! | name                         | shape              |
//! |------------------------------|--------------------|
//! | `stem.conv.weight` / `.bias` | `[w, in, 7, 7]`    |
//! | `down1.conv.*`               | `[2w, w, 3, 3]`    |
//! | `down2.conv.*`               | `[4w, 2w, 3, 3]`   |
//! | `res{n}.conv1.*`, `res{n}.conv2.*` | `[4w, 4w, 3, 3]` |
//! | `up1.conv.*`                 | `[2w, 4w, 3, 3]`   |
//! | `up2.conv.*`                 | `[w, 2w, 3, 3]`    |
//! | `head.conv.*`                | `[out, w, 7, 7]`   |
//! | `norm{k}.gamma` / `.beta`    | `[C_k]`            |
//!
//! Residual blocks are numbered from 1 and normalization sites `k` run from
//! 1 (stem) to `5 + 2n` (second up-sampling stage).

use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::normstrat::{Coord, LayerStats, NormMode, NormSession, Phase};
use crate::ops::{add, conv2d, conv2d_reflect, conv_transpose2d, relu, tanh, PadSpec};
use crate::tensor::Tensor;
use crate::weights::{NamedArray, WeightStore};

/// Standard deviation of the random weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_resblocks: usize,
    pub patch_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 3,
            out_channels: 3,
            base_width: 64,
            n_resblocks: 9,
            patch_size: 512,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_resblocks == 0 {
            return Err(KinError::InvalidArgument("n_resblocks must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(KinError::InvalidArgument(
                "channel counts must be positive".into(),
            ));
        }
        if self.patch_size < 8 || !self.patch_size.is_multiple_of(4) {
            return Err(KinError::InvalidArgument(format!(
                "patch size must be a multiple of 4 and at least 8, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }

    pub fn norm_site_count(&self) -> usize {
        5 + 2 * self.n_resblocks
    }

    /// Channel count of every normalization site, in site order.
    pub fn norm_channels(&self) -> Vec<usize> {
        let w = self.base_width;
        let mut c = vec![w, 2 * w, 4 * w];
        c.extend(std::iter::repeat_n(4 * w, 2 * self.n_resblocks));
        c.extend([2 * w, w]);
        c
    }

    /// Every parameter the architecture needs, with its shape, in
    /// architecture order.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (i, o, w) = (self.in_channels, self.out_channels, self.base_width);
        let mut specs = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
            specs.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            specs.push((format!("{name}.bias"), vec![cout]));
        };
        conv("stem.conv", w, i, 7);
        conv("down1.conv", 2 * w, w, 3);
        conv("down2.conv", 4 * w, 2 * w, 3);
        for n in 1..=self.n_resblocks {
            conv(&format!("res{n}.conv1"), 4 * w, 4 * w, 3);
            conv(&format!("res{n}.conv2"), 4 * w, 4 * w, 3);
        }
        conv("up1.conv", 2 * w, 4 * w, 3);
        conv("up2.conv", w, 2 * w, 3);
        conv("head.conv", o, w, 7);
        for (k, c) in self.norm_channels().into_iter().enumerate() {
            specs.push((format!("norm{}.gamma", k + 1), vec![c]));
            specs.push((format!("norm{}.beta", k + 1), vec![c]));
        }
        specs
    }

    /// Reads channel counts and residual depth off the stored tensor shapes.
    pub fn infer_from_store(store: &WeightStore, patch_size: usize) -> Result<Self> {
        let dims = |name: &str| -> Result<&[usize]> {
            store
                .get(name)
                .map(|a| a.dims.as_slice())
                .ok_or_else(|| KinError::MissingParameter(name.to_owned()))
        };
        let stem = dims("stem.conv.weight")?;
        let head = dims("head.conv.weight")?;
        if stem.len() != 4 || head.len() != 4 {
            return Err(KinError::Format("conv weights must be rank 4".into()));
        }
        let n_resblocks = (1..)
            .take_while(|n| store.get(&format!("res{n}.conv1.weight")).is_some())
            .count();
        let config = GeneratorConfig {
            in_channels: stem[1],
            out_channels: head[0],
            base_width: stem[0],
            n_resblocks,
            patch_size,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Where the generator's parameters come from.
#[derive(Debug, Clone, Copy)]
pub enum WeightSource<'a> {
    Store(&'a WeightStore),
    /// Deterministic init: conv weights and biases ~ N(0, 0.02), gamma = 1, beta = 0.
    Seed(u64),
}

#[derive(Debug)]
struct Conv {
    weight: Tensor,
    bias: Vec<f32>,
}

/// Receives every normalization site's pre-norm features during a forward pass.
pub trait NormHook {
    /// `site` is 0-based.
    fn normalize(&self, site: usize, features: &Tensor) -> Result<Tensor>;
}

struct SessionHook<'a> {
    session: &'a NormSession,
    coord: Option<Coord>,
    phase: Phase,
}

impl NormHook for SessionHook<'_> {
    fn normalize(&self, site: usize, features: &Tensor) -> Result<Tensor> {
        self.session.apply(site, features, self.coord, self.phase)
    }
}

/// Own-statistics normalization that records each site's statistics.
struct ProbeHook<'a> {
    norms: &'a [(Vec<f32>, Vec<f32>)],
    eps: f32,
    records: Mutex<Vec<LayerStats>>,
}

impl NormHook for ProbeHook<'_> {
    fn normalize(&self, site: usize, features: &Tensor) -> Result<Tensor> {
        let stats = LayerStats::of(features);
        let (g, b) = &self.norms[site];
        let out = crate::ops::normalize_with_stats(features, &stats.mu, &stats.sigma, g, b, self.eps)?;
        self.records.lock().expect("probe lock").push(stats);
        Ok(out)
    }
}

/// Statistics of one normalization site as recorded by [`Generator::stat_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub layer_id: usize,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

/// Immutable generator; share it freely across threads.
#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    stem: Conv,
    down: [Conv; 2],
    res: Vec<(Conv, Conv)>,
    up: [Conv; 2],
    head: Conv,
    norms: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Generator {
    pub fn build(config: GeneratorConfig, source: WeightSource<'_>) -> Result<Self> {
        match source {
            WeightSource::Store(store) => Self::from_store(config, store, false),
            WeightSource::Seed(seed) => Self::from_seed(config, seed),
        }
    }

    pub fn from_seed(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut store = WeightStore::new();
        for (name, dims) in config.parameter_specs() {
            let n: usize = dims.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".beta") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            store.insert(name, NamedArray { dims, data });
        }
        Self::from_store(config, &store, false)
    }

    /// Builds from a store; unknown names are rejected unless `permissive`.
    pub fn from_store(config: GeneratorConfig, store: &WeightStore, permissive: bool) -> Result<Self> {
        config.validate()?;
        let specs = config.parameter_specs();
        if !permissive {
            if let Some(extra) = store
                .names()
                .find(|n| !specs.iter().any(|(s, _)| s == n))
            {
                return Err(KinError::UnexpectedParameter(extra.to_owned()));
            }
        }
        let fetch = |name: &str| -> Result<&NamedArray> {
            let expected = &specs
                .iter()
                .find(|(s, _)| s == name)
                .expect("name from specs")
                .1;
            let arr = store
                .get(name)
                .ok_or_else(|| KinError::MissingParameter(name.to_owned()))?;
            if &arr.dims != expected {
                return Err(KinError::ParameterShape {
                    name: name.to_owned(),
                    expected: expected.clone(),
                    found: arr.dims.clone(),
                });
            }
            Ok(arr)
        };
        let conv = |prefix: &str| -> Result<Conv> {
            let w = fetch(&format!("{prefix}.weight"))?;
            let b = fetch(&format!("{prefix}.bias"))?;
            let shape = [w.dims[0], w.dims[1], w.dims[2], w.dims[3]];
            Ok(Conv {
                weight: Tensor::from_vec(shape, w.data.clone())?,
                bias: b.data.clone(),
            })
        };
        let stem = conv("stem.conv")?;
        let down = [conv("down1.conv")?, conv("down2.conv")?];
        let res = (1..=config.n_resblocks)
            .map(|n| Ok((conv(&format!("res{n}.conv1"))?, conv(&format!("res{n}.conv2"))?)))
            .collect::<Result<Vec<_>>>()?;
        let up = [conv("up1.conv")?, conv("up2.conv")?];
        let head = conv("head.conv")?;
        let norms = (1..=config.norm_site_count())
            .map(|k| {
                Ok((
                    fetch(&format!("norm{k}.gamma"))?.data.clone(),
                    fetch(&format!("norm{k}.beta"))?.data.clone(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Generator {
            config,
            stem,
            down,
            res,
            up,
            head,
            norms,
        })
    }

    pub fn to_store(&self) -> WeightStore {
        let mut store = WeightStore::new();
        let mut put_conv = |prefix: &str, c: &Conv| {
            store.insert(
                format!("{prefix}.weight"),
                NamedArray {
                    dims: c.weight.shape().to_vec(),
                    data: c.weight.data().to_vec(),
                },
            );
            store.insert(
                format!("{prefix}.bias"),
                NamedArray {
                    dims: vec![c.bias.len()],
                    data: c.bias.clone(),
                },
            );
        };
        put_conv("stem.conv", &self.stem);
        put_conv("down1.conv", &self.down[0]);
        put_conv("down2.conv", &self.down[1]);
        for (n, (a, b)) in self.res.iter().enumerate() {
            put_conv(&format!("res{}.conv1", n + 1), a);
            put_conv(&format!("res{}.conv2", n + 1), b);
        }
        put_conv("up1.conv", &self.up[0]);
        put_conv("up2.conv", &self.up[1]);
        put_conv("head.conv", &self.head);
        for (k, (g, b)) in self.norms.iter().enumerate() {
            store.insert(
                format!("norm{}.gamma", k + 1),
                NamedArray { dims: vec![g.len()], data: g.clone() },
            );
            store.insert(
                format!("norm{}.beta", k + 1),
                NamedArray { dims: vec![b.len()], data: b.clone() },
            );
        }
        store
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    /// `(gamma, beta)` per normalization site.
    pub fn norm_params(&self) -> &[(Vec<f32>, Vec<f32>)] {
        &self.norms
    }

    /// A fresh normalization session for this generator.
    pub fn session(&self, mode: NormMode, grid: Option<(usize, usize)>) -> Result<NormSession> {
        NormSession::new(mode, &self.norms, grid)
    }

    /// Rough byte count of the live activations when the whole `h x w` image
    /// is pushed through at once.
    pub fn estimate_forward_bytes(&self, h: usize, w: usize) -> u64 {
        let px = (h as u64 + 6) * (w as u64 + 6);
        px * (self.config.in_channels as u64 + 3 * self.config.base_width as u64) * 4
    }

    /// Translates one `P x P` patch.
    pub fn forward(
        &self,
        patch: &Tensor,
        session: &NormSession,
        coord: Option<Coord>,
        phase: Phase,
    ) -> Result<Tensor> {
        let p = self.config.patch_size;
        let expected = [1, self.config.in_channels, p, p];
        if patch.shape() != expected {
            return Err(KinError::Shape(format!(
                "patch must be {expected:?}, got {:?}",
                patch.shape()
            )));
        }
        self.forward_with(patch, &SessionHook { session, coord, phase })
    }

    /// Translates an image of any size whose sides are multiples of 4.
    pub fn forward_image(&self, image: &Tensor, session: &NormSession, phase: Phase) -> Result<Tensor> {
        self.forward_with(image, &SessionHook { session, coord: None, phase })
    }

    /// Per-site statistics of `patch` as a caching pass would record them.
    pub fn stat_probe(&self, patch: &Tensor) -> Result<Vec<ProbeRecord>> {
        let hook = ProbeHook {
            norms: &self.norms,
            eps: crate::normstrat::DEFAULT_EPS,
            records: Mutex::new(Vec::with_capacity(self.norms.len())),
        };
        self.forward_with(patch, &hook)?;
        let records = hook.records.into_inner().expect("probe lock");
        Ok(records
            .into_iter()
            .enumerate()
            .map(|(i, s)| ProbeRecord {
                layer_id: i + 1,
                mu: s.mu,
                sigma: s.sigma,
            })
            .collect())
    }

    pub fn forward_with(&self, input: &Tensor, hook: &dyn NormHook) -> Result<Tensor> {
        let [b, c, h, w] = input.shape();
        if c != self.config.in_channels || b == 0 {
            return Err(KinError::Shape(format!(
                "generator expects {} input channels, got shape {:?}",
                self.config.in_channels,
                input.shape()
            )));
        }
        if h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
            return Err(KinError::Shape(format!(
                "spatial size {h}x{w} must be multiples of 4 and at least 8"
            )));
        }

        let mut site = 0usize;
        let mut norm = |x: Tensor| -> Result<Tensor> {
            let y = hook.normalize(site, &x)?;
            site += 1;
            Ok(y)
        };

        let x = conv2d_reflect(input, &self.stem.weight, &self.stem.bias, 3)?;
        let mut x = relu(norm(x)?);
        for d in &self.down {
            let y = conv2d(&x, &d.weight, &d.bias, 2, PadSpec::same(1))?;
            drop(x);
            x = relu(norm(y)?);
        }
        for (c1, c2) in &self.res {
            let y = conv2d_reflect(&x, &c1.weight, &c1.bias, 1)?;
            let h = relu(norm(y)?);
            let y = conv2d_reflect(&h, &c2.weight, &c2.bias, 1)?;
            drop(h);
            let y = norm(y)?;
            x = add(x, &y)?;
        }
        for u in &self.up {
            let y = conv_transpose2d(&x, &u.weight, &u.bias, 2, PadSpec::same(1), 1)?;
            drop(x);
            x = relu(norm(y)?);
        }
        let y = conv2d_reflect(&x, &self.head.weight, &self.head.bias, 3)?;
        drop(x);
        Ok(tanh(y))
    }
}
