use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{
    join, AttnMixer, BlockOutputs, ConvMixer, GridShape, HybridBlock, LayerNormParams, Linear,
    MixerMode, Mlp, Params, PatchEmbed,
};
use crate::schedule::PrSchedule;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub in_channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub kernel: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    /// Learned absolute position table after the patch projection.
    pub abs_pos: bool,
    /// LayerNorm before global average pooling.
    pub head_norm: bool,
    /// Bias spike used when a convolution is rewritten as attention.
    pub beta: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            in_channels: 3,
            patch: 4,
            dim: 64,
            depth: 4,
            kernel: 3,
            mlp_ratio: 4,
            classes: 10,
            abs_pos: false,
            head_norm: true,
            beta: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> Result<GridShape> {
        let p = self.patch;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(Error::Geometry(format!(
                "image extent {}x{} is not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        Ok(GridShape::new(self.image_height / p, self.image_width / p))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("in_channels", self.in_channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("depth", self.depth),
            ("kernel", self.kernel),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid("model_config", format!("{name} must be positive")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::EvenKernel(self.kernel));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(invalid(
                "model_config",
                format!("beta must be positive and finite, got {}", self.beta),
            ));
        }
        self.grid().map(|_| ())
    }
}

/// Final LayerNorm, global average pooling over tokens, linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub norm: Option<LayerNormParams>,
    pub linear: Linear,
}

impl Head {
    pub fn forward(&self, g: &mut Graph, prefix: &str, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        let mut z = z;
        if let Some(n) = &self.norm {
            z = n.forward(g, &join(prefix, "norm"), z)?;
        }
        let z = g.reshape(z, &[s[0], s[1] * s[2], s[3]])?;
        let pooled = g.mean_axis(z, 1)?;
        self.linear.forward(g, &join(prefix, "linear"), pooled)
    }
}

impl Params for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(n) = &self.norm {
            n.visit(&join(prefix, "norm"), f);
        }
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(n) = &mut self.norm {
            n.visit_mut(&join(prefix, "norm"), f);
        }
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}

/// Which mixers a block holds; enough to rebuild it from stored tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub mode: MixerMode,
    pub conv: bool,
    pub attn: bool,
}

#[derive(Clone, Debug)]
pub struct ModelOutputs {
    /// Patch embedding `z_0`.
    pub embed: Var,
    pub blocks: Vec<BlockOutputs>,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub patch_embed: PatchEmbed,
    pub blocks: Vec<HybridBlock>,
    pub head: Head,
}

impl Model {
    /// Fresh model whose block `l` starts in `modes[l]`. Blocks that start in
    /// attention mode get a randomly initialised `K²`-head mixer with
    /// `d_H = d` and the pad token.
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        modes: &[MixerMode],
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if modes.len() != config.depth {
            return Err(invalid(
                "model",
                format!("{} modes for a depth-{} model", modes.len(), config.depth),
            ));
        }
        let grid = config.grid()?;
        let d = config.dim;
        let patch_embed = PatchEmbed::random(
            config.patch,
            config.in_channels,
            d,
            config.abs_pos.then_some(grid),
            rng,
        )?;
        let mut blocks = Vec::with_capacity(config.depth);
        for &mode in modes {
            let block = match mode {
                MixerMode::Conv => HybridBlock::conv(d, config.kernel, config.mlp_ratio, rng)?,
                MixerMode::SelfAttention => {
                    let heads = config.kernel * config.kernel;
                    let attn = AttnMixer::random(d, heads, d, grid, true, rng)?;
                    HybridBlock::attention(attn, config.mlp_ratio, rng)
                }
            };
            blocks.push(block);
        }
        let head = Head {
            norm: config.head_norm.then(|| LayerNormParams::new(d)),
            linear: Linear::random(d, config.classes, 0.02, rng),
        };
        Ok(Self {
            config,
            patch_embed,
            blocks,
            head,
        })
    }

    /// Zero-valued model with the given block layouts, ready to be filled
    /// from stored tensors. Frozen convolutions keep `requires_grad` off.
    pub fn skeleton(config: ModelConfig, layouts: &[BlockLayout]) -> Result<Self> {
        config.validate()?;
        if layouts.len() != config.depth {
            return Err(invalid(
                "model",
                format!(
                    "{} block layouts for a depth-{} model",
                    layouts.len(),
                    config.depth
                ),
            ));
        }
        let grid = config.grid()?;
        let (d, k, r) = (config.dim, config.kernel, config.mlp_ratio);
        let p = config.patch * config.patch * config.in_channels;
        let patch_embed = PatchEmbed {
            patch: config.patch,
            in_channels: config.in_channels,
            proj: Linear::zeros(p, d),
            pos: config
                .abs_pos
                .then(|| Tensor::zeros(vec![grid.tokens(), d]).with_requires_grad(true)),
        };
        let mut blocks = Vec::with_capacity(layouts.len());
        for (l, lay) in layouts.iter().enumerate() {
            let active = match lay.mode {
                MixerMode::Conv => lay.conv,
                MixerMode::SelfAttention => lay.attn,
            };
            if !active {
                return Err(Error::MissingMixer(l));
            }
            let conv = lay
                .conv
                .then(|| {
                    let mut c =
                        ConvMixer::new(Tensor::zeros(vec![k, k, d, d]), Tensor::zeros(vec![d]))?;
                    c.set_trainable(lay.mode == MixerMode::Conv);
                    Ok::<_, Error>(c)
                })
                .transpose()?;
            let attn = lay.attn.then(|| {
                let (rh, rw) = grid.rel_extent();
                let inner = k * k * d;
                AttnMixer {
                    heads: k * k,
                    head_dim: d,
                    grid,
                    w_q: Tensor::zeros(vec![d, inner]),
                    w_k: Tensor::zeros(vec![d, inner]),
                    w_v: Tensor::zeros(vec![d, inner]),
                    w_o: Tensor::zeros(vec![inner, d]),
                    rel_bias: Tensor::zeros(vec![k * k, rh, rw]),
                    bias: Tensor::zeros(vec![d]),
                    pad_token: true,
                }
                .trainable()
            });
            blocks.push(HybridBlock {
                mode: lay.mode,
                conv,
                attn,
                ln1: LayerNormParams::new(d),
                ln2: LayerNormParams::new(d),
                mlp: Mlp {
                    fc1: Linear::zeros(d, d * r),
                    fc2: Linear::zeros(d * r, d),
                },
            });
        }
        let head = Head {
            norm: config.head_norm.then(|| LayerNormParams::new(d)),
            linear: Linear::zeros(d, config.classes),
        };
        Ok(Self {
            config,
            patch_embed,
            blocks,
            head,
        })
    }

    /// Rebuilds a model from named tensors. Every parameter must be present
    /// with its exact extents; names outside the model are ignored.
    pub fn from_tensors(
        config: ModelConfig,
        layouts: &[BlockLayout],
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut model = Self::skeleton(config, layouts)?;
        let mut err = None;
        model.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match tensors.get(name) {
                None => err = Some(Error::Format(format!("missing tensor {name}"))),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(Error::Format(format!(
                        "tensor {name} has extents {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) => t.data_mut().copy_from_slice(src.data()),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    pub fn grid(&self) -> GridShape {
        self.config.grid().expect("validated at construction")
    }

    pub fn modes(&self) -> Vec<MixerMode> {
        self.blocks.iter().map(|b| b.mode).collect()
    }

    pub fn layouts(&self) -> Vec<BlockLayout> {
        self.blocks
            .iter()
            .map(|b| BlockLayout {
                mode: b.mode,
                conv: b.conv.is_some(),
                attn: b.attn.is_some(),
            })
            .collect()
    }

    /// Records the forward pass of `images: [B, H, W, C]`.
    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<ModelOutputs> {
        let embed = self.patch_embed.forward(g, "patch_embed", images)?;
        let mut z = embed;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let out = b
                .forward(g, &format!("blocks.{i}"), z)
                .map_err(|e| match e {
                    Error::MissingMixer(_) => Error::MissingMixer(i),
                    e => e,
                })?;
            z = out.out;
            blocks.push(out);
        }
        let logits = self.head.forward(g, "head", z)?;
        Ok(ModelOutputs {
            embed,
            blocks,
            logits,
        })
    }

    /// Tape-free convenience: logits `[B, classes]`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone())?;
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out.logits).clone())
    }

    /// Errors unless every block is in the mode `schedule` assigns at epoch `t`.
    pub fn check_modes(&self, schedule: &PrSchedule, t: u32) -> Result<()> {
        if schedule.layers() != self.blocks.len() {
            return Err(Error::Schedule(format!(
                "schedule covers {} layers, model has {}",
                schedule.layers(),
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let expected = schedule.mode_at(t, i + 1)?;
            if expected != b.mode {
                return Err(Error::ModeMismatch {
                    layer: i + 1,
                    epoch: t,
                    expected: expected.to_string(),
                    actual: b.mode.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Logits of `images` at epoch `t`, after checking that each block runs the
/// mixer the schedule prescribes.
pub fn model_forward(
    images: &Tensor,
    model: &Model,
    t: u32,
    schedule: &PrSchedule,
) -> Result<Tensor> {
    model.check_modes(schedule, t)?;
    model.logits(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_height: 8,
            image_width: 8,
            patch: 2,
            dim: 8,
            depth: 2,
            classes: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_weights_give_head_bias() {
        let mut rng = StdRng::seed_from_u64(1);
        let cfg = tiny();
        let mut m =
            Model::new(cfg, &[MixerMode::Conv, MixerMode::SelfAttention], &mut rng).unwrap();
        m.visit_mut("", &mut |name, t| {
            if !name.ends_with("gamma") {
                t.data_mut().fill(0.0)
            }
        });
        m.head.linear.bias = Tensor::from_fn(vec![5], |i| i as f32 - 2.0);
        let x = Tensor::uniform(vec![3, 8, 8, 3], 0.0, 1.0, &mut rng);
        let y = m.logits(&x).unwrap();
        for row in y.data().chunks(5) {
            assert_eq!(row, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        }
    }

    #[test]
    fn tensors_round_trip_through_skeleton() {
        let mut rng = StdRng::seed_from_u64(2);
        let m = Model::new(
            tiny(),
            &[MixerMode::SelfAttention, MixerMode::Conv],
            &mut rng,
        )
        .unwrap();
        let mut map = BTreeMap::new();
        m.visit("", &mut |n, t| {
            map.insert(n.to_string(), t.clone());
        });
        let back = Model::from_tensors(tiny(), &m.layouts(), &map).unwrap();
        assert_eq!(back, m);
        map.remove("blocks.1.conv.weight");
        let err = Model::from_tensors(tiny(), &m.layouts(), &map).unwrap_err();
        assert!(err.to_string().contains("blocks.1.conv.weight"));
    }

    #[test]
    fn wrong_mode_count_is_rejected() {
        let mut rng = StdRng::seed_from_u64(3);
        assert!(Model::new(tiny(), &[MixerMode::Conv], &mut rng).is_err());
    }
}
