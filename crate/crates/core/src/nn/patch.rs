use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, GridShape, Linear, Params, TokenGrid};
use crate::tensor::{Graph, Tensor, Var};

/// Non-overlapping `P×P` patches, each flattened in `(row, col, channel)`
/// order and projected to `d` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub patch: usize,
    pub in_channels: usize,
    pub proj: Linear,
    /// Learned absolute position table `[N, d]`, when enabled.
    pub pos: Option<Tensor>,
}

impl PatchEmbed {
    pub fn random<R: Rng + ?Sized>(
        patch: usize,
        in_channels: usize,
        dim: usize,
        abs_pos: Option<GridShape>,
        rng: &mut R,
    ) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Geometry("patch size must be positive".into()));
        }
        let fan_in = patch * patch * in_channels;
        let proj = Linear::random(fan_in, dim, (1.0 / fan_in as f32).sqrt(), rng);
        let pos = abs_pos
            .map(|g| Tensor::randn(vec![g.tokens(), dim], 0.02, rng).with_requires_grad(true));
        Ok(Self {
            patch,
            in_channels,
            proj,
            pos,
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.output_dim()
    }

    pub fn grid_for(&self, height: usize, width: usize) -> Result<GridShape> {
        let p = self.patch;
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) || height == 0 || width == 0 {
            return Err(Error::Geometry(format!(
                "image extent {height}x{width} is not divisible by patch size {p}"
            )));
        }
        Ok(GridShape::new(height / p, width / p))
    }

    /// `images: [B, H, W, C]` to a `[B, H/P, W/P, d]` node.
    pub fn forward(&self, g: &mut Graph, prefix: &str, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[3] != self.in_channels {
            return Err(Error::Geometry(format!(
                "expected images [batch, H, W, {}], got {s:?}",
                self.in_channels
            )));
        }
        let (b, c, p) = (s[0], s[3], self.patch);
        let grid = self.grid_for(s[1], s[2])?;
        let (hp, wp) = (grid.height, grid.width);
        let x = g.reshape(images, &[b, hp, p, wp, p, c])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = g.reshape(x, &[b * hp * wp, p * p * c])?;
        let x = self.proj.forward(g, &join(prefix, "proj"), x)?;
        let mut x = g.reshape(x, &[b, hp * wp, self.dim()])?;
        if let Some(pos) = &self.pos {
            if pos.shape() != [hp * wp, self.dim()] {
                return Err(Error::Geometry(format!(
                    "position table {:?} does not fit a {hp}x{wp} grid",
                    pos.shape()
                )));
            }
            let pv = g.param(&join(prefix, "pos"), pos)?;
            x = g.add_broadcast(x, pv)?;
        }
        g.reshape(x, &[b, hp, wp, self.dim()])
    }
}

impl Params for PatchEmbed {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.proj.visit(&join(prefix, "proj"), f);
        if let Some(p) = &self.pos {
            f(&join(prefix, "pos"), p);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        if let Some(p) = &mut self.pos {
            f(&join(prefix, "pos"), p);
        }
    }
}

pub fn patch_embed_forward(image: &Tensor, pe: &PatchEmbed) -> Result<TokenGrid> {
    let mut g = Graph::new();
    let x = g.constant(image.clone())?;
    let y = pe.forward(&mut g, "patch_embed", x)?;
    TokenGrid::new(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn cifar_geometry() {
        let mut rng = StdRng::seed_from_u64(1);
        let pe = PatchEmbed::random(4, 3, 8, None, &mut rng).unwrap();
        let img = Tensor::uniform(vec![2, 32, 32, 3], 0.0, 1.0, &mut rng);
        let z = patch_embed_forward(&img, &pe).unwrap();
        assert_eq!(z.grid(), GridShape::new(8, 8));
        assert_eq!(z.grid().tokens(), 64);
        assert_eq!(z.dim(), 8);
    }

    #[test]
    fn constant_image_gives_equal_tokens() {
        let mut rng = StdRng::seed_from_u64(2);
        let pe = PatchEmbed::random(2, 3, 5, None, &mut rng).unwrap();
        let img = Tensor::full(vec![1, 6, 4, 3], 0.3);
        let z = patch_embed_forward(&img, &pe).unwrap();
        let first = z.token(0, 0, 0).to_vec();
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(z.token(0, r, c), first.as_slice());
            }
        }
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        let mut rng = StdRng::seed_from_u64(3);
        let pe = PatchEmbed::random(4, 3, 8, None, &mut rng).unwrap();
        let img = Tensor::zeros(vec![1, 30, 32, 3]);
        assert!(matches!(
            patch_embed_forward(&img, &pe),
            Err(Error::Geometry(_))
        ));
    }
}
