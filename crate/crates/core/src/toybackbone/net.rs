//! The toy U-Net and its capture hooks.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;

use super::ops::{concat_channels, from_tokens, gelu, group_norm, layer_norm, silu, softmax_rows, to_tokens, upsample_nearest2, Conv, Linear};
use crate::catalog::{ActivationId, ArchitectureSpec, BlockRole, Stage};
use crate::extraction::CrossAttentionScores;

const GROUPS: usize = 4;
const TIME_FEATURES: usize = 32;
const TIME_DIM: usize = 64;

/// One residual connection observed during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSite {
    /// The activation whose branch is added, or the output it produces.
    pub site: String,
    pub residual: Array3<f32>,
    pub increment: Array3<f32>,
    pub output: Array3<f32>,
}

impl ResidualSite {
    pub fn max_abs_error(&self) -> f32 {
        let mut worst = 0.0f32;
        for ((r, i), o) in self.residual.iter().zip(&self.increment).zip(&self.output) {
            worst = worst.max((r + i - o).abs());
        }
        worst
    }
}

/// Collects what a forward pass is asked to expose.
#[derive(Debug, Default)]
pub(crate) struct Sink {
    pub want: BTreeSet<ActivationId>,
    pub attention: bool,
    pub pre_softmax: bool,
    pub trace: bool,
    pub captured: BTreeMap<ActivationId, Array3<f32>>,
    pub scores: Vec<CrossAttentionScores>,
    pub residuals: Vec<ResidualSite>,
}

impl Sink {
    fn offer(&mut self, id: Option<ActivationId>, make: impl FnOnce() -> Array3<f32>) {
        if let Some(id) = id {
            if self.want.contains(&id) {
                self.captured.insert(id, make());
            }
        }
    }

    fn residual(&mut self, site: impl FnOnce() -> String, parts: impl FnOnce() -> [Array3<f32>; 3]) {
        if self.trace {
            let [residual, increment, output] = parts();
            self.residuals.push(ResidualSite {
                site: site(),
                residual,
                increment,
                output,
            });
        }
    }
}

/// Address of one module, used to name its activations.
#[derive(Clone, Copy, Debug)]
struct At {
    stage: Stage,
    level: Option<u32>,
    repeat: u32,
}

impl At {
    fn res(self, increment: bool) -> Option<ActivationId> {
        ActivationId::res(self.stage, self.level, self.repeat, increment).ok()
    }

    fn block(self, block: u32, role: BlockRole) -> Option<ActivationId> {
        ActivationId::vit_block(self.stage, self.level, self.repeat, block, role).ok()
    }

    fn vit_out(self) -> Option<ActivationId> {
        ActivationId::vit_out(self.stage, self.level, self.repeat).ok()
    }
}

#[derive(Clone, Debug)]
struct ResModule {
    conv1: Conv,
    time: Linear,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResModule {
    fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        Self {
            conv1: Conv::new(rng, input, output, 3, 1, 1.4),
            time: Linear::new(rng, TIME_DIM, output, 1.0),
            conv2: Conv::new(rng, output, output, 3, 1, 0.7),
            shortcut: (input != output).then(|| Conv::new(rng, input, output, 1, 1, 1.0)),
        }
    }

    fn forward(&self, x: ArrayView3<f32>, temb: ArrayView2<f32>, at: At, sink: &mut Sink) -> Array3<f32> {
        let mut h = self.conv1.forward(group_norm(x, GROUPS).mapv(silu).view());
        let t = self.time.forward(temb);
        for (mut plane, bias) in h.outer_iter_mut().zip(t.row(0)) {
            plane += *bias;
        }
        let increment = self.conv2.forward(group_norm(h.view(), GROUPS).mapv(silu).view());
        let residual = match &self.shortcut {
            Some(conv) => conv.forward(x),
            None => x.to_owned(),
        };
        let out = &residual + &increment;
        sink.offer(at.res(true), || increment.clone());
        sink.offer(at.res(false), || out.clone());
        sink.residual(|| at.res(false).map(|i| i.to_string()).unwrap_or_default(), || [residual.clone(), increment.clone(), out.clone()]);
        out
    }
}

#[derive(Clone, Debug)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    cq: Linear,
    ck: Linear,
    cv: Linear,
    co: Linear,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn new<R: Rng>(rng: &mut R, width: usize, context: usize) -> Self {
        Self {
            q: Linear::new(rng, width, width, 1.0),
            k: Linear::new(rng, width, width, 1.0),
            v: Linear::new(rng, width, width, 1.0),
            o: Linear::new(rng, width, width, 0.7),
            cq: Linear::new(rng, width, width, 1.0),
            ck: Linear::new(rng, context, width, 1.0),
            cv: Linear::new(rng, context, width, 1.0),
            co: Linear::new(rng, width, width, 0.7),
            ff1: Linear::new(rng, width, 4 * width, 1.4),
            ff2: Linear::new(rng, 4 * width, width, 0.7),
        }
    }
}

#[derive(Clone, Debug)]
struct Vit {
    proj_in: Linear,
    blocks: Vec<Block>,
    proj_out: Linear,
}

fn attend(q: &Array2<f32>, k: &Array2<f32>) -> Array2<f32> {
    let scale = 1.0 / (q.ncols() as f32).sqrt();
    q.dot(&k.t()) * scale
}

/// Token tensors are exposed as `(C, tokens, 1)`.
fn token_map(t: &Array2<f32>) -> Array3<f32> {
    from_tokens(t.view(), t.nrows(), 1)
}

impl Vit {
    fn new<R: Rng>(rng: &mut R, width: usize, blocks: usize, context: usize) -> Self {
        Self {
            proj_in: Linear::new(rng, width, width, 1.0),
            blocks: (0..blocks).map(|_| Block::new(rng, width, context)).collect(),
            proj_out: Linear::new(rng, width, width, 0.7),
        }
    }

    fn forward(&self, x: ArrayView3<f32>, context: &Array2<f32>, retained: &[bool], at: At, sink: &mut Sink) -> Array3<f32> {
        let (_, hh, ww) = x.dim();
        let map = |t: &Array2<f32>| from_tokens(t.view(), hh, ww);
        let mut h = self.proj_in.forward(to_tokens(group_norm(x, GROUPS).view()).view());
        for (b, block) in self.blocks.iter().enumerate() {
            let b = b as u32;
            let role = |r| at.block(b, r);

            let a = layer_norm(h.view());
            let q = block.q.forward(a.view());
            let k = block.k.forward(a.view());
            let v = block.v.forward(a.view());
            let mut s = attend(&q, &k);
            softmax_rows(&mut s);
            let so = block.o.forward(s.dot(&v).view());
            sink.offer(role(BlockRole::SelfQ), || map(&q));
            sink.offer(role(BlockRole::SelfK), || map(&k));
            sink.offer(role(BlockRole::SelfV), || map(&v));
            sink.offer(role(BlockRole::SelfOut), || map(&so));
            let next = &h + &so;
            sink.residual(|| role(BlockRole::SelfOut).map(|i| i.to_string()).unwrap_or_default(), || [map(&h), map(&so), map(&next)]);
            h = next;

            let a = layer_norm(h.view());
            let cq = block.cq.forward(a.view());
            let ck = block.ck.forward(context.view());
            let cv = block.cv.forward(context.view());
            let logits = attend(&cq, &ck);
            let mut p = logits.clone();
            softmax_rows(&mut p);
            if sink.attention {
                if let Some(layer) = role(BlockRole::CrossQ) {
                    sink.scores.push(CrossAttentionScores {
                        layer,
                        height: hh,
                        width: ww,
                        scores: if sink.pre_softmax { logits.clone() } else { p.clone() },
                        retained: retained.to_vec(),
                    });
                }
            }
            let co = block.co.forward(p.dot(&cv).view());
            sink.offer(role(BlockRole::CrossQ), || map(&cq));
            sink.offer(role(BlockRole::CrossK), || token_map(&ck));
            sink.offer(role(BlockRole::CrossV), || token_map(&cv));
            sink.offer(role(BlockRole::CrossOut), || map(&co));
            let next = &h + &co;
            sink.residual(|| role(BlockRole::CrossOut).map(|i| i.to_string()).unwrap_or_default(), || [map(&h), map(&co), map(&next)]);
            h = next;

            let a = layer_norm(h.view());
            let ff = block.ff2.forward(block.ff1.forward(a.view()).mapv(gelu).view());
            sink.offer(role(BlockRole::FfOut), || map(&ff));
            let next = &h + &ff;
            sink.residual(|| role(BlockRole::FfOut).map(|i| i.to_string()).unwrap_or_default(), || [map(&h), map(&ff), map(&next)]);
            h = next;
            sink.offer(role(BlockRole::Out), || map(&h));
        }
        let increment = map(&self.proj_out.forward(h.view()));
        let out = &x + &increment;
        sink.offer(at.vit_out(), || out.clone());
        sink.residual(|| at.vit_out().map(|i| i.to_string()).unwrap_or_default(), || [x.to_owned(), increment.clone(), out.clone()]);
        out
    }
}

#[derive(Clone, Debug)]
struct Level {
    res: Vec<ResModule>,
    vits: Vec<Option<Vit>>,
    sampler: Option<Conv>,
}

#[derive(Clone, Debug)]
pub(crate) struct ToyUnet {
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    down: Vec<Level>,
    mid: Level,
    up: Vec<Level>,
    conv_out: Conv,
}

fn build_level<R: Rng>(
    rng: &mut R,
    spec: &crate::catalog::ResolutionSpec,
    mut channels: usize,
    skips: Option<&mut Vec<usize>>,
    context: usize,
    push_skips: Option<&mut Vec<usize>>,
) -> (Level, usize) {
    let width = spec.channels as usize;
    let mut res = Vec::new();
    let mut vits = Vec::new();
    let mut skips = skips;
    let mut pushed = push_skips;
    for r in 0..spec.repeats {
        let input = channels + skips.as_deref_mut().map_or(0, |s| s.pop().expect("skip available"));
        res.push(ResModule::new(rng, input, width));
        channels = width;
        vits.push(spec.has_vit(r).then(|| Vit::new(rng, width, spec.vit_blocks as usize, context)));
        if let Some(p) = pushed.as_deref_mut() {
            p.push(width);
        }
    }
    let sampler = spec.sampler.then(|| Conv::new(rng, width, width, 3, if skips.is_some() { 1 } else { 2 }, 1.0));
    if spec.sampler {
        if let Some(p) = pushed.as_deref_mut() {
            p.push(width);
        }
    }
    (Level { res, vits, sampler }, channels)
}

impl ToyUnet {
    pub fn new<R: Rng>(rng: &mut R, arch: &ArchitectureSpec, latent_channels: usize, context: usize) -> Self {
        let time1 = Linear::new(rng, TIME_FEATURES, TIME_DIM, 1.0);
        let time2 = Linear::new(rng, TIME_DIM, TIME_DIM, 1.0);
        let first = arch.down[0].channels as usize;
        let conv_in = Conv::new(rng, latent_channels, first, 3, 1, 1.0);
        let mut skips = vec![first];
        let mut channels = first;
        let mut down = Vec::new();
        for spec in &arch.down {
            let (level, c) = build_level(rng, spec, channels, None, context, Some(&mut skips));
            down.push(level);
            channels = c;
        }
        let (mid, c) = build_level(rng, &arch.mid, channels, None, context, None);
        channels = c;
        let mut up = Vec::new();
        for spec in &arch.up {
            let (level, c) = build_level(rng, spec, channels, Some(&mut skips), context, None);
            up.push(level);
            channels = c;
        }
        let conv_out = Conv::new(rng, channels, latent_channels, 3, 1, 1.0);
        Self {
            time1,
            time2,
            conv_in,
            down,
            mid,
            up,
            conv_out,
        }
    }

    fn time_embedding(&self, t: usize) -> Array2<f32> {
        let half = TIME_FEATURES / 2;
        let feats = Array1::from_shape_fn(TIME_FEATURES, |i| {
            let f = (-(10_000f32).ln() * (i % half) as f32 / half as f32).exp();
            let a = t as f32 * f;
            if i < half {
                a.sin()
            } else {
                a.cos()
            }
        });
        let h = self.time1.forward(feats.view().insert_axis(ndarray::Axis(0))).mapv(silu);
        self.time2.forward(h.view()).mapv(silu)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_level(
        level: &Level,
        mut h: Array3<f32>,
        stage: Stage,
        index: Option<u32>,
        temb: &Array2<f32>,
        context: &Array2<f32>,
        retained: &[bool],
        mut skips: Option<&mut Vec<Array3<f32>>>,
        push: bool,
        sink: &mut Sink,
    ) -> (Array3<f32>, Vec<Array3<f32>>) {
        let mut produced = Vec::new();
        for (r, (res, vit)) in level.res.iter().zip(&level.vits).enumerate() {
            let at = At {
                stage,
                level: index,
                repeat: r as u32,
            };
            if let Some(s) = skips.as_deref_mut() {
                let skip = s.pop().expect("skip available");
                h = concat_channels(h.view(), skip.view());
            }
            h = res.forward(h.view(), temb.view(), at, sink);
            if let Some(vit) = vit {
                h = vit.forward(h.view(), context, retained, at, sink);
            }
            if push {
                produced.push(h.clone());
            }
        }
        if let Some(conv) = &level.sampler {
            let level_index = index.expect("samplers sit on levels");
            let id = if stage == Stage::Up {
                h = conv.forward(upsample_nearest2(h.view()).view());
                ActivationId::upsampler(level_index)
            } else {
                h = conv.forward(h.view());
                ActivationId::downsampler(level_index)
            };
            sink.offer(Some(id), || h.clone());
            if push {
                produced.push(h.clone());
            }
        }
        (h, produced)
    }

    /// Predicts the noise in `x_t`, feeding activations to the sink.
    pub fn forward(&self, x_t: ArrayView3<f32>, t: usize, context: &Array2<f32>, retained: &[bool], sink: &mut Sink) -> Array3<f32> {
        let temb = self.time_embedding(t);
        let mut h = self.conv_in.forward(x_t);
        let mut skips = vec![h.clone()];
        for (l, level) in self.down.iter().enumerate() {
            let (next, produced) = Self::run_level(level, h, Stage::Down, Some(l as u32), &temb, context, retained, None, true, sink);
            h = next;
            skips.extend(produced);
        }
        let (next, _) = Self::run_level(&self.mid, h, Stage::Mid, None, &temb, context, retained, None, false, sink);
        h = next;
        for (l, level) in self.up.iter().enumerate() {
            let (next, _) = Self::run_level(level, h, Stage::Up, Some(l as u32), &temb, context, retained, Some(&mut skips), false, sink);
            h = next;
        }
        self.conv_out.forward(group_norm(h.view(), GROUPS).mapv(silu).view())
    }
}
