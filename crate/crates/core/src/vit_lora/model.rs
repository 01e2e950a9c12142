use super::lora::{ensure_rank_fits, LoraLinear};
use super::{LoraConfig, LoraTarget, VitConfig};
use crate::tensor_nn::{join, Graph, Linear, Mode, Module, Norm, Parameter, RngState, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Init scale for every randomly initialised student weight.
pub const INIT_STD: f64 = 0.02;

/// One pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block<F: Scalar = f32> {
    pub norm1: Norm<F>,
    pub qkv: LoraLinear<F>,
    pub proj: LoraLinear<F>,
    pub norm2: Norm<F>,
    pub fc1: LoraLinear<F>,
    pub fc2: LoraLinear<F>,
    pub heads: usize,
}

impl<F: Scalar> Block<F> {
    fn new(cfg: &VitConfig, rng: &mut RngState) -> Self {
        let (d, hidden) = (cfg.dim, cfg.mlp_hidden());
        Self {
            norm1: Norm::new(d),
            qkv: LoraLinear::plain(Linear::trunc_normal(d, 3 * d, INIT_STD, true, rng)),
            proj: LoraLinear::plain(Linear::trunc_normal(d, d, INIT_STD, true, rng)),
            norm2: Norm::new(d),
            fc1: LoraLinear::plain(Linear::trunc_normal(d, hidden, INIT_STD, true, rng)),
            fc2: LoraLinear::plain(Linear::trunc_normal(hidden, d, INIT_STD, true, rng)),
            heads: cfg.heads,
        }
    }

    /// `x + proj(attention(qkv(norm1(x))))`; also returns the attention node.
    pub fn attention(&self, g: &mut Graph<F>, x: Var, mode: Mode, rng: &mut RngState) -> Result<(Var, Var)> {
        let h = self.norm1.layer(g, x)?;
        let qkv = self.qkv.forward(g, h, mode.is_train(), rng)?;
        let att = g.attention(qkv, self.heads)?;
        let out = self.proj.forward(g, att, mode.is_train(), rng)?;
        Ok((g.add(x, out)?, att))
    }

    /// `x + fc2(gelu(fc1(norm2(x))))`.
    pub fn mlp(&self, g: &mut Graph<F>, x: Var, mode: Mode, rng: &mut RngState) -> Result<Var> {
        let h = self.norm2.layer(g, x)?;
        let h = self.fc1.forward(g, h, mode.is_train(), rng)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h, mode.is_train(), rng)?;
        g.add(x, h)
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Var, mode: Mode, rng: &mut RngState) -> Result<Var> {
        let (x, _) = self.attention(g, x, mode, rng)?;
        self.mlp(g, x, mode, rng)
    }

    fn layers_mut(&mut self) -> [(&'static str, &mut LoraLinear<F>, LoraTarget); 4] {
        [
            ("qkv", &mut self.qkv, LoraTarget::AttentionQkv),
            ("proj", &mut self.proj, LoraTarget::FullyConnected),
            ("fc1", &mut self.fc1, LoraTarget::FullyConnected),
            ("fc2", &mut self.fc2, LoraTarget::FullyConnected),
        ]
    }
}

impl<F: Scalar> Module<F> for Block<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<F>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.qkv.visit(&join(prefix, "attn.qkv"), f);
        self.proj.visit(&join(prefix, "attn.proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.qkv.visit_mut(&join(prefix, "attn.qkv"), f);
        self.proj.visit_mut(&join(prefix, "attn.proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

/// Logits and class-token embedding of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentOutput<F: Scalar = f32> {
    /// `[batch×C]`
    pub logits: Tensor<F>,
    /// `[batch×D]`, the post-norm class token.
    pub embedding: Tensor<F>,
}

/// Graph handles for the same two outputs.
#[derive(Clone, Copy, Debug)]
pub struct StudentVars {
    pub logits: Var,
    pub embedding: Var,
}

/// Patch transformer with optional low-rank adaptation.
#[derive(Clone, Debug)]
pub struct VitModel<F: Scalar = f32> {
    cfg: VitConfig,
    lora: Option<LoraConfig>,
    pub patch_embed: Linear<F>,
    pub cls_token: Parameter<F>,
    pub pos_embed: Parameter<F>,
    pub blocks: Vec<Block<F>>,
    pub final_norm: Norm<F>,
    pub head: Linear<F>,
}

impl<F: Scalar> VitModel<F> {
    /// Random initialisation (truncated normal, std 0.02); everything trainable.
    pub fn new(cfg: &VitConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        Ok(Self {
            patch_embed: Linear::trunc_normal(cfg.patch_dim(), d, INIT_STD, true, rng),
            cls_token: Parameter::trunc_normal([d], INIT_STD, rng),
            pos_embed: Parameter::trunc_normal([cfg.num_tokens(), d], INIT_STD, rng),
            blocks: (0..cfg.depth).map(|_| Block::new(cfg, rng)).collect(),
            final_norm: Norm::new(d),
            head: Linear::trunc_normal(d, cfg.num_classes, INIT_STD, true, rng),
            cfg: cfg.clone(),
            lora: None,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    /// Attaches low-rank factors to the targeted layers and freezes every
    /// other weight except the classification head.
    pub fn attach_lora(&mut self, lora: &LoraConfig, rng: &mut RngState) -> Result<()> {
        lora.validate()?;
        if self.lora.is_some() {
            return Err(Error::Config("LoRA factors are already attached".into()));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, layer, target) in [
                ("qkv", &block.qkv, LoraTarget::AttentionQkv),
                ("proj", &block.proj, LoraTarget::FullyConnected),
                ("fc1", &block.fc1, LoraTarget::FullyConnected),
                ("fc2", &block.fc2, LoraTarget::FullyConnected),
            ] {
                if lora.targets(target) {
                    ensure_rank_fits(lora, &format!("blocks.{i}.{name}"), &layer.base)?;
                }
            }
        }
        self.set_trainable(false);
        for block in &mut self.blocks {
            for (_, layer, target) in block.layers_mut() {
                if lora.targets(target) {
                    layer.attach(lora, rng);
                }
            }
        }
        self.head.set_trainable(true);
        self.lora = Some(lora.clone());
        Ok(())
    }

    /// Plain model whose layers carry `W + scale·B·A`.
    pub fn merged(&self) -> Self {
        let mut out = self.clone();
        for block in &mut out.blocks {
            for (_, layer, _) in block.layers_mut() {
                *layer = layer.merged();
            }
        }
        out.lora = None;
        out
    }

    /// `[b×c×H×W] → [b×patches×(c·p·p)]`, patches in row-major order and each
    /// flattened channel-major.
    pub fn patchify(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        let cfg = &self.cfg;
        let &[b, c, h, w] = images.shape() else {
            return Err(Error::dim(format!("student expects [b,c,H,W] images, got {:?}", images.shape())));
        };
        if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::dim(format!(
                "student expects {}x{}x{} images, got {c}x{h}x{w}",
                cfg.channels, cfg.image_size, cfg.image_size
            )));
        }
        let (p, side) = (cfg.patch_size, cfg.patches_per_side());
        let pd = cfg.patch_dim();
        let src = images.data();
        let mut out = vec![F::zero(); b * side * side * pd];
        for n in 0..b {
            for py in 0..side {
                for px in 0..side {
                    let dst = &mut out[((n * side + py) * side + px) * pd..][..pd];
                    for ch in 0..c {
                        for dy in 0..p {
                            let row = ((n * c + ch) * h + py * p + dy) * w + px * p;
                            dst[(ch * p + dy) * p..][..p].copy_from_slice(&src[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new([b, side * side, pd], out)
    }

    /// Projected patches with the class token prepended and positions added.
    pub fn embed_tokens(&self, g: &mut Graph<F>, images: &Tensor<F>) -> Result<Var> {
        let patches = g.constant(self.patchify(images)?);
        let x = self.patch_embed.forward(g, patches)?;
        let cls = g.param(&self.cls_token);
        let x = g.prepend_token(x, cls)?;
        let pos = g.param(&self.pos_embed);
        g.add_broadcast(x, pos)
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<F>,
        images: &Tensor<F>,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<StudentVars> {
        let mut x = self.embed_tokens(g, images)?;
        for block in &self.blocks {
            x = block.forward(g, x, mode, rng)?;
        }
        let x = self.final_norm.layer(g, x)?;
        let embedding = g.select_token(x, 0)?;
        let logits = self.head.forward(g, embedding)?;
        Ok(StudentVars { logits, embedding })
    }

    pub fn forward(&self, images: &Tensor<F>, mode: Mode, rng: &mut RngState) -> Result<StudentOutput<F>> {
        let mut g = Graph::inference();
        let out = self.forward_graph(&mut g, images, mode, rng)?;
        Ok(StudentOutput { logits: g.value(out.logits).clone(), embedding: g.value(out.embedding).clone() })
    }

    /// Softmax probability of class 1 (morph) per image, evaluation mode.
    pub fn attack_scores(&self, images: &Tensor<F>) -> Result<Vec<f64>> {
        let out = self.forward(images, Mode::Eval, &mut RngState::new(0))?;
        Ok(morph_probabilities(&out.logits))
    }

    /// `(trainable scalars, all scalars)`.
    pub fn trainable_param_count(&self) -> (usize, usize) {
        self.param_counts()
    }
}

pub(crate) fn morph_probabilities<F: Scalar>(logits: &Tensor<F>) -> Vec<f64> {
    crate::tensor_nn::softmax_rows(logits).data().chunks(logits.last_dim()).map(|r| r[1].to_f64_lossy()).collect()
}

impl<F: Scalar> Module<F> for VitModel<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<F>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls_token"), &self.cls_token);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls_token"), &mut self.cls_token);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
