use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, AttnMixer, ConvMixer, MixerMode, Params, TokenGrid};
use crate::tensor::ops::LAYER_NORM_EPS;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones(vec![dim]).with_requires_grad(true),
            beta: Tensor::zeros(vec![dim]).with_requires_grad(true),
        }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let gamma = g.param(&join(prefix, "gamma"), &self.gamma)?;
        let beta = g.param(&join(prefix, "beta"), &self.beta)?;
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

impl Params for LayerNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// `x·W + b` over the last axis, `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, std: f32, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(vec![input, output], std, rng).with_requires_grad(true),
            bias: Tensor::zeros(vec![output]).with_requires_grad(true),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![input, output]).with_requires_grad(true),
            bias: Tensor::zeros(vec![output]).with_requires_grad(true),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = g.param(&join(prefix, "weight"), &self.weight)?;
        let b = g.param(&join(prefix, "bias"), &self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_broadcast(y, b)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Two linear layers with GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn random<R: Rng + ?Sized>(dim: usize, ratio: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::random(dim, dim * ratio, 0.02, rng),
            fc2: Linear::random(dim * ratio, dim, 0.02, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, &join(prefix, "fc1"), x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, &join(prefix, "fc2"), h)
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// One pre-norm transformer block whose token mixer is a convolution or
/// self-attention, chosen by `mode`:
///
/// `z' = Mixer(LN(z)) + z`, `out = MLP(LN(z')) + z'`.
///
/// After a switch the convolution stays stored, frozen, next to the
/// attention mixer that replaced it.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridBlock {
    pub mode: MixerMode,
    pub conv: Option<ConvMixer>,
    pub attn: Option<AttnMixer>,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutputs {
    /// Mixer branch before the residual add.
    pub mixer: Var,
    /// `z'`, after the mixer residual.
    pub mid: Var,
    /// Block output `z_l`.
    pub out: Var,
}

impl HybridBlock {
    pub fn conv<R: Rng + ?Sized>(
        dim: usize,
        kernel: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mode: MixerMode::Conv,
            conv: Some(ConvMixer::random(kernel, dim, rng)?),
            attn: None,
            ln1: LayerNormParams::new(dim),
            ln2: LayerNormParams::new(dim),
            mlp: Mlp::random(dim, mlp_ratio, rng),
        })
    }

    pub fn attention<R: Rng + ?Sized>(attn: AttnMixer, mlp_ratio: usize, rng: &mut R) -> Self {
        let dim = attn.dim();
        Self {
            mode: MixerMode::SelfAttention,
            conv: None,
            attn: Some(attn),
            ln1: LayerNormParams::new(dim),
            ln2: LayerNormParams::new(dim),
            mlp: Mlp::random(dim, mlp_ratio, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.ln1.gamma.numel()
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, z: Var) -> Result<BlockOutputs> {
        let h = self.ln1.forward(g, &join(prefix, "ln1"), z)?;
        let mixer = match self.mode {
            MixerMode::Conv => self.conv.as_ref().ok_or_else(|| missing(prefix))?.forward(
                g,
                &join(prefix, "conv"),
                h,
            )?,
            MixerMode::SelfAttention => self
                .attn
                .as_ref()
                .ok_or_else(|| missing(prefix))?
                .forward(g, &join(prefix, "attn"), h)?,
        };
        let mid = g.add(mixer, z)?;
        let h = self.ln2.forward(g, &join(prefix, "ln2"), mid)?;
        let h = self.mlp.forward(g, &join(prefix, "mlp"), h)?;
        let out = g.add(h, mid)?;
        Ok(BlockOutputs { mixer, mid, out })
    }
}

fn missing(prefix: &str) -> Error {
    let layer = prefix
        .rsplit('.')
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    Error::MissingMixer(layer)
}

impl Params for HybridBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        if let Some(c) = &self.conv {
            c.visit(&join(prefix, "conv"), f);
        }
        if let Some(a) = &self.attn {
            a.visit(&join(prefix, "attn"), f);
        }
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        if let Some(c) = &mut self.conv {
            c.visit_mut(&join(prefix, "conv"), f);
        }
        if let Some(a) = &mut self.attn {
            a.visit_mut(&join(prefix, "attn"), f);
        }
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

pub fn block_forward(z: &TokenGrid, b: &HybridBlock) -> Result<TokenGrid> {
    let mut g = Graph::new();
    let zv = g.constant(z.tensor().clone())?;
    let out = b.forward(&mut g, "block", zv)?;
    TokenGrid::new(g.value(out.out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GridShape;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn zero_all(b: &mut HybridBlock) {
        if let Some(c) = &mut b.conv {
            c.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        }
        if let Some(a) = &mut b.attn {
            a.w_o.data_mut().fill(0.0);
        }
        b.mlp.fc2.weight.data_mut().fill(0.0);
    }

    #[test]
    fn zero_sublayers_make_identity() {
        let mut rng = StdRng::seed_from_u64(7);
        let grid = GridShape::new(3, 4);
        let mut conv = HybridBlock::conv(6, 3, 4, &mut rng).unwrap();
        let attn = AttnMixer::random(6, 9, 6, grid, true, &mut rng).unwrap();
        let mut sa = HybridBlock::attention(attn, 4, &mut rng);
        zero_all(&mut conv);
        zero_all(&mut sa);
        let z = TokenGrid::randn(2, grid, 6, 1.0, &mut rng);
        assert_eq!(block_forward(&z, &conv).unwrap(), z);
        assert_eq!(block_forward(&z, &sa).unwrap(), z);
    }

    #[test]
    fn missing_active_mixer_errors() {
        let mut rng = StdRng::seed_from_u64(8);
        let mut b = HybridBlock::conv(4, 3, 2, &mut rng).unwrap();
        b.mode = MixerMode::SelfAttention;
        let z = TokenGrid::randn(1, GridShape::new(2, 2), 4, 1.0, &mut rng);
        assert!(matches!(block_forward(&z, &b), Err(Error::MissingMixer(_))));
    }
}
