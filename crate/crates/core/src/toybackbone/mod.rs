//! A miniature U-Net with the full module taxonomy, usable wherever a real
//! backbone would be.
//!
//! Layout for `L` levels: the down stage runs levels `0..L` at widths
//! `channels[l]`, halving resolution between levels; the mid stage holds
//! ResModule, ViT, ResModule at the lowest resolution; the up stage mirrors
//! the down stage with one extra ResModule per level, each consuming a
//! skip connection.

mod net;
mod ops;

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::catalog::{ActivationId, ArchitectureSpec, BlockRole, ResolutionSpec};
use crate::error::{Error, Result};
use crate::extraction::{BackboneAdapter, CaptureRequest, Captures, ExtractionConfig, Image};

pub use net::ResidualSite;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLevel {
    pub channels: u32,
    /// ResModules per down-stage level; the up stage uses one more.
    pub repeats: u32,
    /// Basic blocks in each ViT of this level, 0 for none.
    pub vit_blocks: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub name: String,
    /// Highest resolution first.
    pub levels: Vec<ToyLevel>,
    pub latent_channels: usize,
    /// Input pixels per latent pixel.
    pub latent_factor: u32,
    pub context_dim: usize,
    /// Prompt length in tokens, including begin/end markers and padding.
    pub tokens: usize,
    pub vocab: usize,
    pub weight_seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            levels: vec![
                ToyLevel { channels: 8, repeats: 1, vit_blocks: 1 },
                ToyLevel { channels: 16, repeats: 1, vit_blocks: 2 },
                ToyLevel { channels: 32, repeats: 1, vit_blocks: 2 },
            ],
            latent_channels: 4,
            latent_factor: 2,
            context_dim: 16,
            tokens: 8,
            vocab: 64,
            weight_seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("toy spec {}: {m}", self.name)));
        if self.levels.len() < 2 {
            return bad("needs at least two levels");
        }
        if self.levels.iter().any(|l| l.channels == 0 || l.repeats == 0) {
            return bad("levels need positive channels and repeats");
        }
        if self.latent_channels == 0 || self.latent_factor == 0 || self.context_dim == 0 || self.vocab == 0 {
            return bad("dimensions must be positive");
        }
        if self.tokens < 3 {
            return bad("token count must leave room for a word");
        }
        Ok(())
    }

    /// The catalog layout this network realizes.
    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        self.validate()?;
        let n = self.levels.len();
        let res = |l: &ToyLevel, level: usize, repeats: u32, sampler: bool| ResolutionSpec {
            channels: l.channels,
            divisor: 1 << level,
            repeats,
            vit_blocks: l.vit_blocks,
            vit_repeats: None,
            sampled_blocks: None,
            sampler,
        };
        let down = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| res(l, i, l.repeats, i + 1 < n))
            .collect();
        let last = self.levels[n - 1];
        let mid = ResolutionSpec {
            vit_repeats: Some(1),
            ..res(&last, n - 1, 2, false)
        };
        let up: Vec<_> = (0..n)
            .map(|j| {
                let l = &self.levels[n - 1 - j];
                res(l, n - 1 - j, l.repeats + 1, j + 1 < n)
            })
            .collect();
        let before_final = n - 2;
        let late = [
            format!("up-level{before_final}-repeat{}", up[before_final].repeats - 1),
            format!("up-level{before_final}-upsampler"),
            format!("up-level{}", n - 1),
        ];
        let arch = ArchitectureSpec {
            name: self.name.clone(),
            aliases: vec![],
            latent_factor: self.latent_factor,
            late_half: late.iter().map(|p| p.parse().map_err(Error::config)).collect::<Result<_>>()?,
            final_level: (n - 1) as u32,
            excluded: vec![],
            late_self_attention: vec![BlockRole::SelfQ, BlockRole::SelfK],
            down,
            mid,
            up,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Variance-preserving forward noising with a linear beta schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Self {
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|i| {
                let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps.max(2) - 1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self { alpha_bar }
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn add_noise(&self, x0: &Array3<f32>, eps: &Array3<f32>, t: usize) -> Array3<f32> {
        let a = self.alpha_bar[t];
        let (sa, sb) = (a.sqrt() as f32, (1.0 - a).sqrt() as f32);
        x0 * sa + eps * sb
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1e-4, 0.02, 1000)
    }
}

const BOS: usize = 0;
const EOS: usize = 1;
const PAD: usize = 2;
const SPECIAL: usize = 3;

fn fnv1a(word: &str) -> u64 {
    word.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Splits a prompt into lowercase words and hashes each into the
/// vocabulary: `[begin, words.., end, pad..]`, truncated to `tokens`.
pub fn tokenize(prompt: &str, tokens: usize, vocab: usize) -> (Vec<usize>, Vec<bool>) {
    let words: Vec<usize> = prompt
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(tokens.saturating_sub(2))
        .map(|w| SPECIAL + (fnv1a(&w.to_ascii_lowercase()) % vocab as u64) as usize)
        .collect();
    let mut ids = vec![BOS];
    ids.extend(&words);
    ids.push(EOS);
    ids.resize(tokens, PAD);
    let retained = (0..tokens).map(|i| i >= 1 && i <= words.len()).collect();
    (ids, retained)
}

pub struct ToyAdapter {
    spec: ToySpec,
    arch: ArchitectureSpec,
    net: net::ToyUnet,
    embeddings: Array2<f32>,
    encoder: Array2<f32>,
    schedule: NoiseSchedule,
}

/// Builds the toy network and the layout it realizes; weights depend only
/// on `spec.weight_seed`.
pub fn build_toy_adapter(spec: &ToySpec) -> Result<ToyAdapter> {
    let arch = spec.architecture()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.weight_seed);
    let net = net::ToyUnet::new(&mut rng, &arch, spec.latent_channels, spec.context_dim);
    let mut normal = |shape: (usize, usize)| {
        Array2::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    };
    let embeddings = normal((SPECIAL + spec.vocab, spec.context_dim));
    let encoder = normal((spec.latent_channels, 3)) * 0.8;
    Ok(ToyAdapter {
        spec: spec.clone(),
        arch,
        net,
        embeddings,
        encoder,
        schedule: NoiseSchedule::default(),
    })
}

impl ToyAdapter {
    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Maps an image to its clean latent: average pooling by the latent
    /// factor, then a fixed colour projection centred on mid-grey.
    pub fn encode(&self, image: &Image) -> Array3<f32> {
        let pooled = ops::avg_pool(image.view(), self.spec.latent_factor as usize);
        let (_, h, w) = pooled.dim();
        let flat = pooled
            .mapv(|v| 2.0 * v - 1.0)
            .into_shape_with_order((3, h * w))
            .expect("pooled image reshape");
        self.encoder
            .dot(&flat)
            .into_shape_with_order((self.spec.latent_channels, h, w))
            .expect("latent reshape")
    }

    fn context(&self, prompt: &str) -> (Array2<f32>, Vec<bool>) {
        let (ids, retained) = tokenize(prompt, self.spec.tokens, self.spec.vocab);
        (self.embeddings.select(ndarray::Axis(0), &ids), retained)
    }

    fn forward(&self, image: &Image, config: &ExtractionConfig, sink: &mut net::Sink) -> Result<Array3<f32>> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 image channels, got {c}")));
        }
        self.arch.latent_dims(w, h)?;
        if config.timestep >= self.schedule.len() {
            return Err(Error::config(format!("timestep {} outside schedule", config.timestep)));
        }
        let x0 = self.encode(image);
        let mut rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
        let eps = Array3::from_shape_simple_fn(x0.dim(), || StandardNormal.sample(&mut rng));
        let x_t = self.schedule.add_noise(&x0, &eps, config.timestep);
        let (context, retained) = self.context(&config.prompt);
        sink.pre_softmax = config.pre_softmax_attention;
        Ok(self.net.forward(x_t.view(), config.timestep, &context, &retained, sink))
    }

    /// Runs one step and returns every residual connection it crossed,
    /// alongside the requested captures.
    pub fn run_traced(
        &mut self,
        image: &Image,
        config: &ExtractionConfig,
        request: &CaptureRequest,
    ) -> Result<(Captures, Vec<ResidualSite>)> {
        let mut sink = self.sink_for(request)?;
        sink.trace = true;
        self.forward(image, config, &mut sink)?;
        Ok((
            Captures {
                activations: sink.captured,
                attention: sink.scores,
            },
            sink.residuals,
        ))
    }

    /// The predicted noise for one step.
    pub fn predict_noise(&self, image: &Image, config: &ExtractionConfig) -> Result<Array3<f32>> {
        self.forward(image, config, &mut net::Sink::default())
    }

    fn sink_for(&self, request: &CaptureRequest) -> Result<net::Sink> {
        for id in &request.ids {
            self.arch.describe(id)?;
        }
        Ok(net::Sink {
            want: request.ids.iter().copied().collect::<BTreeSet<ActivationId>>(),
            attention: request.attention_scores,
            ..Default::default()
        })
    }
}

impl BackboneAdapter for ToyAdapter {
    fn model(&self) -> &str {
        &self.spec.name
    }

    fn architecture(&self) -> &ArchitectureSpec {
        &self.arch
    }

    fn schedule_length(&self) -> usize {
        self.schedule.len()
    }

    fn run(&mut self, image: &Image, config: &ExtractionConfig, request: &CaptureRequest) -> Result<Captures> {
        let mut sink = self.sink_for(request)?;
        self.forward(image, config, &mut sink)?;
        Ok(Captures {
            activations: sink.captured,
            attention: sink.scores,
        })
    }
}
