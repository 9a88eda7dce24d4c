use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Params, TokenGrid};
use crate::tensor::{Graph, Tensor, Var};

/// `K×K` convolution token mixer, weight `[K, K, d, d]`. Tap `(ky, kx)` is
/// the spatial offset `δ = (ky − ⌊K/2⌋, kx − ⌊K/2⌋)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvMixer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvMixer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[0] != s[1] || s[2] != s[3] {
            return Err(Error::InvalidArgument {
                op: "conv_mixer",
                msg: format!("weight must be [K, K, d, d], got {s:?}"),
            });
        }
        if s[0].is_multiple_of(2) {
            return Err(Error::EvenKernel(s[0]));
        }
        if bias.shape() != [s[3]] {
            return Err(Error::ShapeMismatch {
                op: "conv_mixer",
                expected: vec![s[3]],
                got: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    /// Uniform `±1/√(K²d)` weights, zero bias.
    pub fn random<R: Rng + ?Sized>(kernel: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::EvenKernel(kernel));
        }
        let bound = 1.0 / ((kernel * kernel * dim) as f32).sqrt();
        let weight = Tensor::uniform(vec![kernel, kernel, dim, dim], -bound, bound, rng)
            .with_requires_grad(true);
        let bias = Tensor::zeros(vec![dim]).with_requires_grad(true);
        Self::new(weight, bias)
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Offsets of Δ in row-major tap order.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let k = self.kernel_size() as isize;
        let r = k / 2;
        (0..k)
            .flat_map(|ky| (0..k).map(move |kx| (ky - r, kx - r)))
            .collect()
    }

    /// The `d×d` matrix `W^C_δ` at tap `(ky, kx)`.
    pub fn tap(&self, ky: usize, kx: usize) -> Tensor {
        let d = self.dim();
        let o = self.weight.offset(&[ky, kx, 0, 0]);
        Tensor::from_parts(vec![d, d], self.weight.data()[o..o + d * d].to_vec())
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.weight.set_requires_grad(flag);
        self.bias.set_requires_grad(flag);
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = g.param(&join(prefix, "weight"), &self.weight)?;
        let b = g.param(&join(prefix, "bias"), &self.bias)?;
        g.conv2d_same(x, w, b)
    }
}

impl Params for ConvMixer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn conv_mixer_forward(x: &TokenGrid, m: &ConvMixer) -> Result<TokenGrid> {
    if x.dim() != m.dim() {
        return Err(Error::ShapeMismatch {
            op: "conv_mixer_forward",
            expected: vec![m.dim()],
            got: vec![x.dim()],
        });
    }
    let mut g = Graph::new();
    let xv = g.constant(x.tensor().clone())?;
    let y = m.forward(&mut g, "conv", xv)?;
    TokenGrid::new(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let mut m = ConvMixer::random(3, 4, &mut rng).unwrap();
        m.bias = Tensor::from_fn(vec![4], |i| i as f32 - 1.5);
        let x = TokenGrid::new(Tensor::zeros(vec![2, 3, 3, 4])).unwrap();
        let y = conv_mixer_forward(&x, &m).unwrap();
        for (i, v) in y.tensor().data().iter().enumerate() {
            assert_eq!(*v, (i % 4) as f32 - 1.5);
        }
    }

    #[test]
    fn delta_kernel_on_grid_is_identity() {
        let d = 3;
        let mut w = Tensor::zeros(vec![3, 3, d, d]);
        for i in 0..d {
            w.set(&[1, 1, i, i], 1.0);
        }
        let m = ConvMixer::new(w, Tensor::zeros(vec![d])).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let x = TokenGrid::randn(2, crate::nn::GridShape::new(4, 5), d, 1.0, &mut rng);
        assert_eq!(conv_mixer_forward(&x, &m).unwrap(), x);
    }

    #[test]
    fn even_kernel_rejected() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        assert!(matches!(
            ConvMixer::random(2, 4, &mut rng),
            Err(Error::EvenKernel(2))
        ));
    }

    #[test]
    fn offsets_are_row_major() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let m = ConvMixer::random(3, 2, &mut rng).unwrap();
        let o = m.offsets();
        assert_eq!(o.len(), 9);
        assert_eq!(o[0], (-1, -1));
        assert_eq!(o[1], (-1, 0));
        assert_eq!(o[4], (0, 0));
        assert_eq!(o[8], (1, 1));
    }
}
