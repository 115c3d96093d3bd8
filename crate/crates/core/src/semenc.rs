//! Semantic path: two independent patch-transformer encoders over the left
//! image whose token features are concatenated channel-wise.

use serde::{Deserialize, Serialize};
use svla_numerics::{ConvSpec, Graph, ParamId, ParamStore, Real, Var};

use crate::nn::{p, Block, Conv, Init, LayerNorm};
use crate::SvlaError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemConfig {
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for SemConfig {
    fn default() -> Self {
        Self { patch: 8, width: 64, heads: 4, layers: 2 }
    }
}

#[derive(Debug, Clone)]
struct PatchEncoder {
    embed: Conv,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
}

impl PatchEncoder {
    fn new<T: Real>(init: &mut Init<T>, name: &str, cfg: SemConfig, tokens: usize) -> Self {
        let spec = ConvSpec { stride: cfg.patch, pad: 0 };
        Self {
            embed: Conv::new(init, &format!("{name}.patch"), 3, cfg.width, cfg.patch, spec),
            pos: init.normal(&format!("{name}.pos"), &[tokens, cfg.width], 0.02),
            blocks: (0..cfg.layers).map(|i| Block::new(init, &format!("{name}.block{i}"), cfg.width, cfg.heads)).collect(),
            ln: LayerNorm::new(init, &format!("{name}.ln"), cfg.width),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, img: Var) -> Var {
        let e = self.embed.forward(g, s, img);
        let sh = g.shape(e).to_vec();
        let e = g.reshape(e, &[sh[1], sh[2] * sh[3]]);
        let mut x = g.transpose(e);
        let pos = p(g, s, self.pos);
        x = g.add(x, pos);
        for b in &self.blocks {
            x = b.forward(g, s, x, None).0;
        }
        self.ln.forward(g, s, x)
    }
}

/// Two-encoder semantic feature extractor, `[3, H, W]` → `[N, 2·width]` with
/// `N = (H/patch)·(W/patch)` in row-major patch order.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub cfg: SemConfig,
    pub image_size: usize,
    a: PatchEncoder,
    b: PatchEncoder,
}

impl SemanticEncoder {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cfg: SemConfig, image_size: usize) -> Self {
        let side = image_size / cfg.patch;
        Self {
            cfg,
            image_size,
            a: PatchEncoder::new(init, &format!("{name}.a"), cfg, side * side),
            b: PatchEncoder::new(init, &format!("{name}.b"), cfg, side * side),
        }
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.cfg.patch).pow(2)
    }

    pub fn out_width(&self) -> usize {
        2 * self.cfg.width
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, image: Var) -> Result<Var, SvlaError> {
        let sh = g.shape(image).to_vec();
        if sh != [3, self.image_size, self.image_size] {
            return Err(SvlaError::Shape(format!(
                "semantic encoder expects [3, {0}, {0}], got {sh:?}",
                self.image_size
            )));
        }
        let x = g.reshape(image, &[1, 3, sh[1], sh[2]]);
        let fa = self.a.forward(g, s, x);
        let fb = self.b.forward(g, s, x);
        Ok(g.concat(&[fa, fb], 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use svla_numerics::Tensor;

    #[test]
    fn token_grid_and_width() {
        let mut s = ParamStore::<f64>::new();
        let mut init = Init::new(&mut s, 3);
        let enc = SemanticEncoder::new(&mut init, "sem", SemConfig::default(), 64);
        let mut g = Graph::new();
        let img = g.constant(Tensor::from_fn(&[3, 64, 64], |i| (i % 7) as f64 / 7.0));
        let f = enc.forward(&mut g, &s, img).unwrap();
        assert_eq!(g.shape(f), &[64, 128]);
        assert!(g.value(f).all_finite());
        let wrong = g.constant(Tensor::zeros(&[3, 32, 64]));
        assert!(enc.forward(&mut g, &s, wrong).is_err());
    }
}
