//! Fusion of per-attribute embeddings into the conditioning vector.
//!
//! Two strategies are supported: the additive baseline, which sums the kept
//! slot embeddings, and concatenate-and-project, which lays the slots out in
//! fixed order (masked slots stay as zero blocks) and maps the result back to
//! the embedding dimension with a small MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::NUM_ATTRIBUTES;
use crate::nn::{Activation, Mlp, MlpCache, Param, Parameterized};

pub const DEFAULT_FULL_DROP: f64 = 0.1;
pub const DEFAULT_SLOT_KEEP: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Additive,
    ConcatProject,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" | "additive" => Ok(FusionStrategy::Additive),
            "concat" | "concat_project" => Ok(FusionStrategy::ConcatProject),
            other => Err(Error::InvalidConfig(format!("unknown fusion strategy '{other}'"))),
        }
    }
}

/// The per-attribute embeddings of one record plus which of them are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    slots: Vec<Vec<f64>>,
    mask: [bool; NUM_ATTRIBUTES],
}

impl EmbeddingBundle {
    /// Builds a bundle; slots whose mask bit is false are zeroed.
    pub fn new(mut slots: Vec<Vec<f64>>, mask: [bool; NUM_ATTRIBUTES]) -> Result<Self> {
        if slots.len() != NUM_ATTRIBUTES {
            return Err(Error::DimensionMismatch {
                context: "embedding bundle slots",
                expected: NUM_ATTRIBUTES,
                actual: slots.len(),
            });
        }
        let dim = slots[0].len();
        for s in &slots {
            if s.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "embedding bundle slot width",
                    expected: dim,
                    actual: s.len(),
                });
            }
        }
        for (slot, &keep) in slots.iter_mut().zip(&mask) {
            if !keep {
                slot.fill(0.0);
            }
        }
        Ok(EmbeddingBundle { slots, mask })
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingBundle {
            slots: vec![vec![0.0; dim]; NUM_ATTRIBUTES],
            mask: [false; NUM_ATTRIBUTES],
        }
    }

    pub fn dim(&self) -> usize {
        self.slots[0].len()
    }

    pub fn slots(&self) -> &[Vec<f64>] {
        &self.slots
    }

    pub fn mask(&self) -> &[bool; NUM_ATTRIBUTES] {
        &self.mask
    }

    /// Slots laid end to end in slot order (masked slots as zero blocks).
    pub fn concatenated(&self) -> Vec<f64> {
        self.slots.concat()
    }

    pub fn with_mask(&self, mask: &[bool; NUM_ATTRIBUTES]) -> Self {
        let mut out = self.clone();
        for j in 0..NUM_ATTRIBUTES {
            if !mask[j] {
                out.mask[j] = false;
                out.slots[j].fill(0.0);
            }
        }
        out
    }
}

/// Samples the two-level dropout mask: the whole metadata vector is dropped
/// with probability `p_full`; otherwise each slot is kept independently with
/// probability `p_slot_keep`. Always consumes `1 + NUM_ATTRIBUTES` draws.
pub fn sample_dropout_mask<R: Rng + ?Sized>(
    rng: &mut R,
    p_full: f64,
    p_slot_keep: f64,
) -> [bool; NUM_ATTRIBUTES] {
    let full_drop = rng.random::<f64>() < p_full;
    let mut mask = [false; NUM_ATTRIBUTES];
    for m in mask.iter_mut() {
        let keep = rng.random::<f64>() < p_slot_keep;
        *m = keep && !full_drop;
    }
    mask
}

pub fn apply_dropout<R: Rng + ?Sized>(
    bundle: &EmbeddingBundle,
    rng: &mut R,
    p_full: f64,
    p_slot_keep: f64,
) -> EmbeddingBundle {
    bundle.with_mask(&sample_dropout_mask(rng, p_full, p_slot_keep))
}

/// Sum of the kept slots.
pub fn fuse_additive(bundle: &EmbeddingBundle) -> Vec<f64> {
    let mut m = vec![0.0; bundle.dim()];
    for (slot, &keep) in bundle.slots.iter().zip(&bundle.mask) {
        if keep {
            m.iter_mut().zip(slot).for_each(|(a, b)| *a += b);
        }
    }
    m
}

/// Maps the `M * D` concatenation back to `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionProjector {
    pub mlp: Mlp,
}

impl FusionProjector {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, hidden: usize, rng: &mut R) -> Self {
        FusionProjector {
            mlp: Mlp::new(
                "fusion",
                &[NUM_ATTRIBUTES * embed_dim, hidden, embed_dim],
                Activation::Silu,
                rng,
            ),
        }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if !mlp.in_dim().is_multiple_of(NUM_ATTRIBUTES) || mlp.in_dim() / NUM_ATTRIBUTES != mlp.out_dim() {
            return Err(Error::InvalidConfig(format!(
                "fusion projector maps {} -> {}, expected M*D -> D",
                mlp.in_dim(),
                mlp.out_dim()
            )));
        }
        Ok(FusionProjector { mlp })
    }

    pub fn embed_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn project(&self, concat: &[f64], n: usize) -> Vec<f64> {
        self.mlp.forward(concat, n)
    }

    pub fn project_cached(&self, concat: &[f64], n: usize) -> (Vec<f64>, MlpCache) {
        self.mlp.forward_cached(concat, n)
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &[f64]) -> Vec<f64> {
        self.mlp.backward(cache, dy)
    }
}

impl Parameterized for FusionProjector {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.mlp.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.mlp.visit_mut(f)
    }
}

pub fn fuse_concat(bundle: &EmbeddingBundle, proj: &FusionProjector) -> Result<Vec<f64>> {
    let concat = bundle.concatenated();
    if concat.len() != proj.mlp.in_dim() {
        return Err(Error::DimensionMismatch {
            context: "fusion projector input",
            expected: proj.mlp.in_dim(),
            actual: concat.len(),
        });
    }
    Ok(proj.project(&concat, 1))
}

/// Everything the denoiser consumes besides the noisy image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningPacket {
    pub c: Vec<f64>,
    pub caption_embedding: Vec<f64>,
    pub strategy: FusionStrategy,
}

pub fn make_conditioning(
    m: &[f64],
    t_emb: &[f64],
    caption_embedding: &[f64],
    strategy: FusionStrategy,
) -> Result<ConditioningPacket> {
    if m.len() != t_emb.len() {
        return Err(Error::DimensionMismatch {
            context: "conditioning vector",
            expected: t_emb.len(),
            actual: m.len(),
        });
    }
    let c: Vec<f64> = m.iter().zip(t_emb).map(|(a, b)| a + b).collect();
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("conditioning vector is not finite".into()));
    }
    Ok(ConditioningPacket {
        c,
        caption_embedding: caption_embedding.to_vec(),
        strategy,
    })
}
