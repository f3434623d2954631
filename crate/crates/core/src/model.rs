//! The full trainable network: voxel encoder, voxel and text projections,
//! classification head and the sampling CVAE.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cas::{sample_topk, Cvae, CvaeConfig};
use crate::cost::MacCounter;
use crate::data::Coord;
use crate::encoder::{EncoderConfig, EncoderTape, Projection, ProjectionTape, TokenStore, VoxelEncoder};
use crate::error::{Error, Result};
use crate::interaction::{cosine_logits, cosine_logits_backward, HeadKind, InteractionConfig, LinearHead, SimilarityBlock};
use crate::nn::{Module, Param};
use crate::real::Real;
use crate::text::TextBank;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub interaction: InteractionConfig,
    pub cas: CvaeConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.interaction.validate()?;
        self.cas.validate()
    }
}

#[derive(Debug)]
pub struct InteractionTape<T> {
    voxel: ProjectionTape<T>,
    voxel_rows: Array2<T>,
    text: Option<(ProjectionTape<T>, Array2<T>)>,
}

#[derive(Debug, Clone)]
pub struct SegmentationModel<T> {
    config: ModelConfig,
    class_names: Vec<String>,
    /// Frozen text embeddings, `(N+1) x C`.
    text: Array2<T>,
    pub encoder: VoxelEncoder<T>,
    pub voxel_projection: Projection<T>,
    pub text_projection: Projection<T>,
    pub linear_head: Option<LinearHead<T>>,
    pub cvae: Cvae<T>,
}

impl<T: Real> SegmentationModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, bank: &TextBank, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.encoder.token_dim;
        let m = config.encoder.projected_dim;
        if bank.dim() != c {
            return Err(Error::DimensionMismatch {
                what: "text embedding vs token dimension",
                expected: c,
                found: bank.dim(),
            });
        }
        let encoder = VoxelEncoder::new(config.encoder.clone(), rng)?;
        let voxel_projection = Projection::new("voxel_projection", c, m, rng);
        let text_projection = Projection::new("text_projection", c, m, rng);
        let linear_head = match config.interaction.head {
            HeadKind::Cosine => None,
            HeadKind::Linear => Some(LinearHead::new(m, bank.num_classes(), rng)),
        };
        let cvae = Cvae::new(config.cas.clone(), rng)?;
        Ok(Self {
            class_names: bank.class_names().to_vec(),
            text: bank.embeddings_as(),
            config,
            encoder,
            voxel_projection,
            text_projection,
            linear_head,
            cvae,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn text_embeddings(&self) -> &Array2<T> {
        &self.text
    }

    /// Replaces the frozen text table (checkpoint restore).
    pub fn set_text_embeddings(&mut self, class_names: Vec<String>, text: Array2<T>) -> Result<()> {
        if text.nrows() != class_names.len() || text.ncols() != self.config.encoder.token_dim {
            return Err(Error::ShapeMismatch(format!(
                "text table {:?} for {} classes, dim {}",
                text.dim(),
                class_names.len(),
                self.config.encoder.token_dim
            )));
        }
        if let Some(h) = &self.linear_head {
            if h.bias.len() != class_names.len() {
                return Err(Error::ClassCountMismatch {
                    expected: h.bias.len(),
                    found: class_names.len(),
                });
            }
        }
        self.class_names = class_names;
        self.text = text;
        Ok(())
    }

    /// Encodes a `(D, H, W)` image into per-voxel tokens.
    pub fn encode(&self, image: ArrayView3<'_, T>) -> Result<(TokenStore<T>, EncoderTape<T>)> {
        let x = image.to_owned().insert_axis(Axis(0));
        let (map, tape) = self.encoder.forward(&x)?;
        Ok((TokenStore::from_feature_map(map), tape))
    }

    /// Classifies token rows `K x C`; counts interaction MACs when `macs` is given.
    pub fn interact(&self, rows: ArrayView2<'_, T>, macs: Option<&MacCounter>) -> Result<(SimilarityBlock<T>, InteractionTape<T>)> {
        let (voxel_rows, voxel) = self.voxel_projection.forward(rows, macs)?;
        match &self.linear_head {
            Some(head) => {
                let block = head.forward(voxel_rows.view(), macs);
                Ok((block, InteractionTape { voxel, voxel_rows, text: None }))
            }
            None => {
                let (text_rows, text_tape) = self.text_projection.forward(self.text.view(), macs)?;
                let block = cosine_logits(voxel_rows.view(), text_rows.view(), self.config.interaction.temperature, macs)?;
                Ok((
                    block,
                    InteractionTape {
                        voxel,
                        voxel_rows,
                        text: Some((text_tape, text_rows)),
                    },
                ))
            }
        }
    }

    /// Accumulates head and projection gradients; returns the gradient w.r.t. the token rows.
    pub fn interact_backward(&mut self, tape: &InteractionTape<T>, dlogits: ArrayView2<'_, T>) -> Array2<T> {
        let dvoxel = match (&mut self.linear_head, &tape.text) {
            (Some(head), _) => head.backward(tape.voxel_rows.view(), dlogits),
            (None, Some((text_tape, text_rows))) => {
                let (dv, dt) = cosine_logits_backward(
                    tape.voxel_rows.view(),
                    text_rows.view(),
                    self.config.interaction.temperature,
                    dlogits,
                );
                self.text_projection.backward(text_tape, dt.view());
                dv
            }
            (None, None) => unreachable!("cosine tape always records text"),
        };
        self.voxel_projection.backward(&tape.voxel, dvoxel.view())
    }

    /// Logits for every voxel of the image, row-major over `(D, H, W)`.
    pub fn predict_logits(&self, image: ArrayView3<'_, T>) -> Result<Array2<T>> {
        let (tokens, _) = self.encode(image)?;
        Ok(self.interact(tokens.to_rows().view(), None)?.0.logits)
    }

    /// Pseudo-heatmap from fresh prior noise.
    pub fn complexity_heatmap<R: Rng + ?Sized>(&self, image: ArrayView3<'_, T>, rng: &mut R) -> Result<Array3<T>> {
        self.cvae.generate(image, rng)
    }

    /// The `k` voxels the sampler would select for this image.
    pub fn complexity_sample<R: Rng + ?Sized>(&self, image: ArrayView3<'_, T>, k: usize, rng: &mut R) -> Result<Vec<Coord>> {
        let heat = self.complexity_heatmap(image, rng)?;
        sample_topk(heat.view(), k)
    }

    /// Image as a one-channel feature map.
    pub fn image_tensor(image: ArrayView3<'_, T>) -> Array4<T> {
        image.to_owned().insert_axis(Axis(0))
    }
}

impl<T: Real> Module<T> for SegmentationModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.visit(f);
        self.voxel_projection.visit(f);
        self.text_projection.visit(f);
        if let Some(h) = &self.linear_head {
            h.visit(f);
        }
        self.cvae.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_mut(f);
        self.voxel_projection.visit_mut(f);
        self.text_projection.visit_mut(f);
        if let Some(h) = &mut self.linear_head {
            h.visit_mut(f);
        }
        self.cvae.visit_mut(f);
    }
}
