//! Vision towers: a tiny ViT, and the MoF pairing of two towers.

use serde::{Deserialize, Serialize};

use super::layers::{Block, Linear};
use super::params::{Ctx, ParamBuilder, ParamId, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, Var};

/// An image encoder producing one feature row per visual token.
pub trait VisionTower<S: Scalar>: Send + Sync {
    fn image_size(&self) -> usize;
    fn patch_size(&self) -> usize;
    fn width(&self) -> usize;
    fn num_tokens(&self) -> usize;
    /// Effective configuration with defaults materialized.
    fn config(&self) -> serde_json::Value;
    /// `image: [3, S, S]` → `[num_tokens, width]`.
    fn forward(&self, ctx: &mut Ctx<'_, S>, image: &Tensor<S>) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionTowerConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for VisionTowerConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 8,
            width: 64,
            depth: 2,
            heads: 4,
        }
    }
}

impl VisionTowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Validation(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Validation(format!(
                "vision width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Patchify → linear projection → positional embedding → encoder blocks.
#[derive(Debug, Clone)]
pub struct ViT {
    pub config: VisionTowerConfig,
    pub patch_proj: Linear,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
}

impl ViT {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, config: VisionTowerConfig) -> Result<Self> {
        config.validate()?;
        let p = config.patch_size;
        let n = (config.image_size / p).pow(2);
        let patch_proj = Linear::new(b, "patch_proj", 3 * p * p, config.width, true)?;
        let pos_emb = b.normal("pos_emb", &[n, config.width], INIT_STD)?;
        let blocks = b.scoped("blocks", |b| {
            (0..config.depth)
                .map(|i| Block::new(b, &i.to_string(), config.width, config.heads))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self {
            config,
            patch_proj,
            pos_emb,
            blocks,
        })
    }
}

/// Flattens `[3, S, S]` into `[(S/P)², 3·P·P]`, patches in row-major order,
/// each patch channel-major.
pub fn patchify<S: Scalar>(image: &Tensor<S>, image_size: usize, patch: usize) -> Result<Tensor<S>> {
    if image.shape() != [3, image_size, image_size] {
        return Err(Error::Dimension(format!(
            "vision tower expects a [3, {image_size}, {image_size}] image, got {:?}",
            image.shape()
        )));
    }
    let grid = image_size / patch;
    let d = image.data();
    let mut out = Vec::with_capacity(d.len());
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..3 {
                for y in 0..patch {
                    let row = c * image_size * image_size + (gy * patch + y) * image_size + gx * patch;
                    out.extend_from_slice(&d[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, 3 * patch * patch], out)
}

impl<S: Scalar> VisionTower<S> for ViT {
    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn width(&self) -> usize {
        self.config.width
    }

    fn num_tokens(&self) -> usize {
        (self.config.image_size / self.config.patch_size).pow(2)
    }

    fn config(&self) -> serde_json::Value {
        serde_json::to_value(self.config).expect("config serializes")
    }

    fn forward(&self, ctx: &mut Ctx<'_, S>, image: &Tensor<S>) -> Result<Var> {
        let patches = patchify(image, self.config.image_size, self.config.patch_size)?;
        let shape = patches.shape().to_vec();
        let x = ctx.graph.constant(&shape, patches.into_data())?;
        let x = self.patch_proj.forward(ctx, x)?;
        let pos = ctx.param(self.pos_emb);
        let mut x = ctx.graph.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(ctx, x, None)?;
        }
        Ok(x)
    }
}

/// The visual front end of a model: one tower, or two whose tokens are
/// interleaved (MoF).
pub enum VisionEncoder<S: Scalar> {
    Single(Box<dyn VisionTower<S>>),
    Mof(Box<dyn VisionTower<S>>, Box<dyn VisionTower<S>>),
}

impl<S: Scalar> VisionEncoder<S> {
    pub fn mof(a: Box<dyn VisionTower<S>>, b: Box<dyn VisionTower<S>>) -> Result<Self> {
        let sig = |t: &dyn VisionTower<S>| (t.image_size(), t.patch_size(), t.width());
        if sig(a.as_ref()) != sig(b.as_ref()) {
            return Err(Error::Validation(format!(
                "MoF towers must share image size, patch size and width: {:?} vs {:?}",
                sig(a.as_ref()),
                sig(b.as_ref())
            )));
        }
        Ok(Self::Mof(a, b))
    }

    pub fn primary(&self) -> &dyn VisionTower<S> {
        match self {
            Self::Single(t) | Self::Mof(t, _) => t.as_ref(),
        }
    }

    pub fn image_size(&self) -> usize {
        self.primary().image_size()
    }

    pub fn width(&self) -> usize {
        self.primary().width()
    }

    pub fn num_tokens(&self) -> usize {
        match self {
            Self::Single(t) => t.num_tokens(),
            Self::Mof(a, b) => a.num_tokens() + b.num_tokens(),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, S>, image: &Tensor<S>) -> Result<Var> {
        match self {
            Self::Single(t) => t.forward(ctx, image),
            Self::Mof(a, b) => mof_forward(ctx, a.as_ref(), b.as_ref(), image),
        }
    }
}

/// Runs both towers and interleaves their rows `A₀, B₀, A₁, B₁, …`.
pub fn mof_forward<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    a: &dyn VisionTower<S>,
    b: &dyn VisionTower<S>,
    image: &Tensor<S>,
) -> Result<Var> {
    if (a.image_size(), a.patch_size(), a.width()) != (b.image_size(), b.patch_size(), b.width()) {
        return Err(Error::Validation("MoF towers have mismatched configurations".into()));
    }
    let fa = a.forward(ctx, image)?;
    let fb = b.forward(ctx, image)?;
    let n = a.num_tokens();
    let both = ctx.graph.concat_rows(&[fa, fb])?;
    let order: Vec<usize> = (0..n).flat_map(|i| [i, n + i]).collect();
    ctx.graph.gather_rows(both, &order)
}
