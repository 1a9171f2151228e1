//! The full classifier: overlapping patch embedding, encoder, optional part
//! selection before the last layer, and a linear head on the CLS token.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::encoder::{encode, AttentionStack, EncoderConfig, LayerParams, Linear};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::patch::{embed, extract_batch, PatchConfig};
use crate::psm::{assemble_local, classify, classify_cls, cls_rollout, select_rows, RolloutConfig, SelectionResult};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    /// Route only the selected tokens (plus CLS) into the last layer. When
    /// off, the model is a plain transformer classifier on the final CLS.
    pub psm: bool,
    pub rollout: RolloutConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.encoder.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Sequence length `N + 1`.
    pub fn seq_len(&self) -> usize {
        self.patch.grid().count + 1
    }
}

#[derive(Clone, Debug)]
pub struct TransFg<T: Scalar = f32> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    projection: ParamId,
    positions: ParamId,
    cls: ParamId,
    layers: Vec<LayerParams>,
    head: Linear,
}

/// Handles into one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[B, classes]`
    pub logits: Var,
    /// Final CLS token per image, `[B, D]`.
    pub cls: Var,
    /// Attention nodes of the layers that ran over the full sequence.
    pub attention: Vec<Var>,
    /// Selected patch indices per image (empty when part selection is off).
    pub selected: Vec<Vec<usize>>,
}

impl<T: Scalar> TransFg<T> {
    /// Fresh parameters: projections uniform in `±1/sqrt(fan_in)`, CLS token
    /// and position table zero, norms at unit gain.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = cfg.encoder.dim;
        let pd = cfg.patch.patch_dim();
        let projection = params.add_uniform("embed.projection", &[pd, d], pd, &mut rng);
        let positions = params.add_full("embed.positions", &[cfg.seq_len(), d], 0.0);
        let cls = params.add_full("embed.cls", &[d], 0.0);
        let layers = (0..cfg.encoder.layers)
            .map(|l| LayerParams::init(&mut params, &format!("layer{l}"), &cfg.encoder, &mut rng))
            .collect();
        let head = Linear::init(&mut params, "head", d, cfg.num_classes, &mut rng);
        Ok(Self {
            cfg,
            params,
            projection,
            positions,
            cls,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn embedding_ids(&self) -> (ParamId, ParamId, ParamId) {
        (self.projection, self.positions, self.cls)
    }

    /// Same architecture with every parameter converted to another precision.
    pub fn cast<U: Scalar>(&self) -> TransFg<U> {
        TransFg {
            cfg: self.cfg,
            params: self.params.cast(),
            projection: self.projection,
            positions: self.positions,
            cls: self.cls,
            layers: self.layers.clone(),
            head: self.head,
        }
    }

    /// Forward a `[B, H, W, C]` batch.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, images: &Tensor<T>) -> Result<ForwardPass> {
        let p = &self.cfg.patch;
        let want = [p.height, p.width, p.channels];
        if images.rank() != 4 || images.shape()[1..] != want {
            return Err(Error::shape("forward", images.shape(), &want));
        }
        let batch = images.shape()[0];
        let heads = self.cfg.encoder.heads;
        let patches = tape.constant(extract_batch(images, p)?);
        let z0 = embed(
            tape,
            patches,
            bound[self.projection],
            bound[self.positions],
            bound[self.cls],
            batch,
        )?;

        if !self.cfg.psm {
            let (z, attention) = encode(tape, bound, z0, &self.layers, heads)?;
            let (logits, cls) = classify_cls(tape, bound, z, &self.head)?;
            return Ok(ForwardPass {
                logits,
                cls,
                attention,
                selected: Vec::new(),
            });
        }

        let (pre, last) = self.layers.split_at(self.layers.len() - 1);
        let (z, attention) = encode(tape, bound, z0, pre, heads)?;
        let selected = (0..batch)
            .map(|b| {
                let stack = AttentionStack::from_tape(tape, &attention, b)?;
                Ok(select_rows(&cls_rollout(&stack, self.cfg.rollout))?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let local = assemble_local(tape, z, &selected)?;
        let (logits, cls) = classify(tape, bound, local, &last[0], &self.head, heads)?;
        Ok(ForwardPass {
            logits,
            cls,
            attention,
            selected,
        })
    }

    /// Full rollout and selection for image `b` of a recorded pass.
    pub fn selection(&self, tape: &Tape<T>, pass: &ForwardPass, b: usize) -> Result<SelectionResult<T>> {
        let stack = AttentionStack::from_tape(tape, &pass.attention, b)?;
        let stack = if self.cfg.psm {
            stack
        } else {
            // without part selection every layer ran on the full sequence;
            // attribute through the same pre-layers the selector would use
            let layers = stack.layers();
            AttentionStack::new(layers[..layers.len() - 1].to_vec())?
        };
        SelectionResult::from_stack(&stack, self.cfg.rollout)
    }

    /// Predicted class per image.
    pub fn predictions(tape: &Tape<T>, logits: Var) -> Vec<usize> {
        let classes = tape.shape(logits)[1];
        tape.value(logits)
            .chunks(classes)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(psm: bool) -> ModelConfig {
        ModelConfig {
            patch: PatchConfig::new(6, 6, 1, 3, 2).unwrap(),
            encoder: EncoderConfig {
                layers: 3,
                heads: 2,
                dim: 8,
                mlp_ratio: 2,
            },
            num_classes: 3,
            psm,
            rollout: RolloutConfig::default(),
        }
    }

    fn images(b: usize) -> Tensor<f64> {
        let data = (0..b * 36).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        Tensor::new([b, 6, 6, 1], data).unwrap()
    }

    #[test]
    fn forward_shapes() {
        for psm in [true, false] {
            let model = TransFg::<f64>::new(tiny(psm), 1).unwrap();
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let pass = model.forward(&mut tape, &bound, &images(3)).unwrap();
            assert_eq!(tape.shape(pass.logits), &[3, 3]);
            assert_eq!(tape.shape(pass.cls), &[3, 8]);
            assert_eq!(pass.attention.len(), if psm { 2 } else { 3 });
            assert_eq!(pass.selected.len(), if psm { 3 } else { 0 });
            for sel in &pass.selected {
                assert_eq!(sel.len(), 2);
                assert!(sel.iter().all(|&i| (1..=4).contains(&i)));
            }
            let full = model.selection(&tape, &pass, 1).unwrap();
            assert_eq!(full.rollout.len(), 2);
            if psm {
                assert_eq!(full.indices, pass.selected[1]);
            }
        }
    }

    #[test]
    fn rejects_wrong_image_size() {
        let model = TransFg::<f64>::new(tiny(true), 1).unwrap();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let bad = Tensor::<f64>::zeros([1, 5, 6, 1]);
        assert!(matches!(
            model.forward(&mut tape, &bound, &bad),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn init_is_seeded() {
        let a = TransFg::<f32>::new(tiny(true), 9).unwrap();
        let b = TransFg::<f32>::new(tiny(true), 9).unwrap();
        let c = TransFg::<f32>::new(tiny(true), 10).unwrap();
        let data = |m: &TransFg<f32>| m.params().iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(data(&a), data(&b));
        assert_ne!(data(&a), data(&c));
        let (_, pos, cls) = a.embedding_ids();
        assert!(a.params().get(pos).data().iter().all(|&v| v == 0.0));
        assert!(a.params().get(cls).data().iter().all(|&v| v == 0.0));
    }
}
