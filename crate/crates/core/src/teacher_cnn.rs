//! Residual convolutional teacher producing logits and a pooled embedding.

use serde::{Deserialize, Serialize};

use crate::tensor_nn::{join, Graph, Linear, Mode, Module, Norm, Parameter, RngState, Scalar, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Width of each stage.
    pub channels: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks: Vec<usize>,
    /// Embedding width; must equal the last stage width.
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            channels: vec![16, 32, 64],
            blocks: vec![1, 1, 1],
            embed_dim: 64,
            num_classes: 2,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.blocks.len() || self.channels.len() < 2 {
            return Err(Error::Config(format!(
                "teacher needs at least two stages with matching channels/blocks lists, got {:?} / {:?}",
                self.channels, self.blocks
            )));
        }
        if self.channels.contains(&0) || self.blocks.contains(&0) || self.in_channels == 0 || self.image_size == 0 {
            return Err(Error::Config("teacher extents must be positive".into()));
        }
        if self.embed_dim != *self.channels.last().unwrap() {
            return Err(Error::Config(format!(
                "teacher.embed_dim {} must equal the last stage width {}",
                self.embed_dim,
                self.channels.last().unwrap()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("teacher.num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

/// conv3×3 → norm → GELU → conv3×3 → norm, plus the input when shapes
/// match, then GELU.
#[derive(Clone, Debug)]
pub struct ConvBlock<F: Scalar = f32> {
    pub conv1: Parameter<F>,
    pub norm1: Norm<F>,
    pub conv2: Parameter<F>,
    pub norm2: Norm<F>,
    pub stride: usize,
}

fn he_kernel<F: Scalar>(c_out: usize, c_in: usize, k: usize, rng: &mut RngState) -> Parameter<F> {
    Parameter::normal([c_out, c_in, k, k], (2.0 / (c_in * k * k) as f64).sqrt(), rng)
}

impl<F: Scalar> ConvBlock<F> {
    fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut RngState) -> Self {
        Self {
            conv1: he_kernel(c_out, c_in, 3, rng),
            norm1: Norm::new(c_out),
            conv2: he_kernel(c_out, c_out, 3, rng),
            norm2: Norm::new(c_out),
            stride,
        }
    }

    fn residual(&self) -> bool {
        let s = self.conv1.value.shape();
        self.stride == 1 && s[0] == s[1]
    }

    fn forward(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let w1 = g.param(&self.conv1);
        let h = g.conv2d(x, w1, self.stride, 1)?;
        let h = self.norm1.spatial(g, h)?;
        let h = g.gelu(h);
        let w2 = g.param(&self.conv2);
        let h = g.conv2d(h, w2, 1, 1)?;
        let mut h = self.norm2.spatial(g, h)?;
        if self.residual() {
            h = g.add(h, x)?;
        }
        Ok(g.gelu(h))
    }
}

impl<F: Scalar> Module<F> for ConvBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<F>)) {
        f(&join(prefix, "conv1.weight"), &self.conv1);
        self.norm1.visit(&join(prefix, "norm1"), f);
        f(&join(prefix, "conv2.weight"), &self.conv2);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        f(&join(prefix, "conv1.weight"), &mut self.conv1);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        f(&join(prefix, "conv2.weight"), &mut self.conv2);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput<F: Scalar = f32> {
    /// `[batch×C]`
    pub logits: Tensor<F>,
    /// `[batch×D_t]`, globally pooled last-stage features.
    pub embedding: Tensor<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct TeacherVars {
    pub logits: Var,
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct TeacherCnn<F: Scalar = f32> {
    cfg: TeacherConfig,
    pub stem: Parameter<F>,
    pub stem_norm: Norm<F>,
    /// Blocks grouped by stage; the first block of every later stage
    /// downsamples with stride 2.
    pub stages: Vec<Vec<ConvBlock<F>>>,
    pub head: Linear<F>,
}

impl<F: Scalar> TeacherCnn<F> {
    pub fn new(cfg: &TeacherConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.channels.len());
        let mut c_in = cfg.channels[0];
        for (s, (&c, &n)) in cfg.channels.iter().zip(&cfg.blocks).enumerate() {
            let blocks = (0..n)
                .map(|j| {
                    let stride = if s > 0 && j == 0 { 2 } else { 1 };
                    
                    ConvBlock::new(if j == 0 { c_in } else { c }, c, stride, rng)
                })
                .collect();
            stages.push(blocks);
            c_in = c;
        }
        Ok(Self {
            stem: he_kernel(cfg.channels[0], cfg.in_channels, 3, rng),
            stem_norm: Norm::new(cfg.channels[0]),
            stages,
            head: Linear::trunc_normal(cfg.embed_dim, cfg.num_classes, 0.02, true, rng),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    /// Marks every parameter non-trainable. Idempotent.
    pub fn freeze(&mut self) {
        self.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        let mut any = false;
        self.visit("", &mut |_, p| any |= p.is_trainable());
        !any
    }

    fn check_geometry(&self, images: &Tensor<F>) -> Result<()> {
        let cfg = &self.cfg;
        match *images.shape() {
            [_, c, h, w] if c == cfg.in_channels && h == cfg.image_size && w == cfg.image_size => Ok(()),
            _ => Err(Error::dim(format!(
                "teacher expects [b,{},{},{}] images, got {:?}",
                cfg.in_channels,
                cfg.image_size,
                cfg.image_size,
                images.shape()
            ))),
        }
    }

    /// No stochastic layers, so `_mode` only exists for interface symmetry
    /// with the student.
    pub fn forward_graph(&self, g: &mut Graph<F>, images: &Tensor<F>, _mode: Mode) -> Result<TeacherVars> {
        self.check_geometry(images)?;
        let x = g.constant(images.clone());
        let w = g.param(&self.stem);
        let x = g.conv2d(x, w, 1, 1)?;
        let x = self.stem_norm.spatial(g, x)?;
        let mut x = g.gelu(x);
        for block in self.stages.iter().flatten() {
            x = block.forward(g, x)?;
        }
        let embedding = g.global_avg_pool(x)?;
        let logits = self.head.forward(g, embedding)?;
        Ok(TeacherVars { logits, embedding })
    }

    pub fn forward(&self, images: &Tensor<F>, mode: Mode) -> Result<TeacherOutput<F>> {
        let mut g = Graph::inference();
        let v = self.forward_graph(&mut g, images, mode)?;
        Ok(TeacherOutput { logits: g.value(v.logits).clone(), embedding: g.value(v.embedding).clone() })
    }

    pub fn attack_scores(&self, images: &Tensor<F>) -> Result<Vec<f64>> {
        Ok(crate::vit_lora::morph_probabilities(&self.forward(images, Mode::Eval)?.logits))
    }
}

impl<F: Scalar> Module<F> for TeacherCnn<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<F>)) {
        f(&join(prefix, "stem.weight"), &self.stem);
        self.stem_norm.visit(&join(prefix, "stem.norm"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (j, b) in stage.iter().enumerate() {
                b.visit(&join(prefix, &format!("stages.{s}.{j}")), f);
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        f(&join(prefix, "stem.weight"), &mut self.stem);
        self.stem_norm.visit_mut(&join(prefix, "stem.norm"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (j, b) in stage.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("stages.{s}.{j}")), f);
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
