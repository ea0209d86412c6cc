use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneKind, BackboneTape};
use super::heads::{mlp, DenseCache, Mlp};
use super::layers::{BnPolicy, Buffers, Mode};
use super::params::{Grads, ParamStore};
use super::tensor::{FeatureMap, Matrix};
use crate::data::{ImageTensor, JigsawSample, RotationSample};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Hidden width of the rotation head.
pub const ROTATION_HIDDEN: usize = 128;
pub const ROTATION_CLASSES: usize = 4;
pub const DROPOUT: f64 = 0.5;

/// Architecture of a [`ModelBundle`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Channel widths of the `small_conv` blocks; the last one is the
    /// embedding size. Ignored by `paper_resnet18`.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub bn_policy: BnPolicy,
    /// Classes of the supervised softmax head, when present.
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Size of the jigsaw permutation set, when the jigsaw head is present.
    #[serde(default)]
    pub jigsaw_classes: Option<usize>,
    #[serde(default)]
    pub rotation: bool,
}

fn default_widths() -> Vec<usize> {
    vec![64; 4]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::SmallConv,
            widths: default_widths(),
            bn_policy: BnPolicy::PerBatch,
            num_classes: None,
            jigsaw_classes: None,
            rotation: false,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        match self.backbone {
            BackboneKind::PaperResnet18 => 512,
            BackboneKind::SmallConv => self.widths.last().copied().unwrap_or(0),
        }
    }

    pub fn has_ssl_head(&self) -> bool {
        self.jigsaw_classes.is_some() || self.rotation
    }

    /// Hidden width of the jigsaw head: 4096 for the 512-d backbone,
    /// otherwise eight times the embedding size.
    pub fn jigsaw_hidden(&self) -> usize {
        if self.embed_dim() == 512 {
            4096
        } else {
            8 * self.embed_dim()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone == BackboneKind::SmallConv && (self.widths.is_empty() || self.widths.contains(&0)) {
            return Err(Error::Config("small_conv needs non-zero block widths".into()));
        }
        if self.has_ssl_head() && self.bn_policy != BnPolicy::PerBatch {
            return Err(Error::Config(
                "self-supervised heads require the per_batch batch-norm policy".into(),
            ));
        }
        if self.num_classes == Some(0) || self.jigsaw_classes == Some(0) {
            return Err(Error::Config("heads need at least one output class".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Head {
    Supervised,
    Jigsaw,
    Rotation,
}

/// Backbone activations of one forward pass.
#[derive(Debug)]
pub struct EmbedPass<T> {
    pub embeddings: Matrix<T>,
    tape: BackboneTape<T>,
}

/// Logits of one head plus everything needed to back-propagate them.
#[derive(Debug)]
pub struct HeadPass<T> {
    pub logits: Matrix<T>,
    head: Head,
    backbone: BackboneTape<T>,
    projection: Option<Vec<DenseCache<T>>>,
    head_cache: Vec<DenseCache<T>>,
}

/// Shared backbone `f` with supervised head `g` and self-supervised heads.
#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    buffers: ParamStore<T>,
    backbone: Backbone,
    supervised: Option<Mlp>,
    projection: Option<Mlp>,
    jigsaw: Option<Mlp>,
    rotation: Option<Mlp>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Builds and initialises the model. Each parameter tensor draws from its
    /// own `init/<name>` stream, so adding heads never changes backbone init.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let backbone = match config.backbone {
            BackboneKind::SmallConv => Backbone::small_conv(&mut params, &mut buffers, &config.widths, seed),
            BackboneKind::PaperResnet18 => Backbone::resnet18(&mut params, &mut buffers, seed),
        };
        let d = backbone.out_dim();
        let supervised = config
            .num_classes
            .map(|c| mlp(&mut params, "supervised", &[d, c], 0.0, false, seed));
        let projection = config
            .has_ssl_head()
            .then(|| mlp(&mut params, "projection", &[d, d], 0.0, true, seed));
        let jigsaw = config.jigsaw_classes.map(|p| {
            mlp(
                &mut params,
                "jigsaw",
                &[9 * d, config.jigsaw_hidden(), p],
                0.0,
                false,
                seed,
            )
        });
        let rotation = config.rotation.then(|| {
            mlp(
                &mut params,
                "rotation",
                &[d, ROTATION_HIDDEN, ROTATION_HIDDEN, ROTATION_CLASSES],
                DROPOUT,
                false,
                seed,
            )
        });
        Ok(Self {
            config,
            params,
            buffers,
            backbone,
            supervised,
            projection,
            jigsaw,
            rotation,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.out_dim()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> &ParamStore<T> {
        &self.buffers
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.zeros_like()
    }

    fn backbone_forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<(Matrix<T>, BackboneTape<T>)> {
        let mut bufs = Buffers::Tracking(&mut self.buffers);
        self.backbone
            .forward(&self.params, &mut bufs, x, mode, self.config.bn_policy)
    }

    fn backbone_forward_frozen(&self, x: &FeatureMap<T>, mode: Mode) -> Result<(Matrix<T>, BackboneTape<T>)> {
        let mut bufs = Buffers::Frozen(&self.buffers);
        self.backbone
            .forward(&self.params, &mut bufs, x, mode, self.config.bn_policy)
    }

    // ---------------------------------------------------------------- embed

    pub fn embed_pass<'a, I>(&mut self, images: I, mode: Mode) -> Result<EmbedPass<T>>
    where
        I: IntoIterator<Item = &'a ImageTensor<T>>,
    {
        let x = FeatureMap::from_images(images)?;
        let (embeddings, tape) = self.backbone_forward(&x, mode)?;
        Ok(EmbedPass { embeddings, tape })
    }

    /// `batch x embed_dim` features. In train mode under `running_stats`
    /// the running averages are updated.
    pub fn embed<'a, I>(&mut self, images: I, mode: Mode) -> Result<Matrix<T>>
    where
        I: IntoIterator<Item = &'a ImageTensor<T>>,
    {
        Ok(self.embed_pass(images, mode)?.embeddings)
    }

    /// Evaluation-mode features without touching any state.
    pub fn embed_eval<'a, I>(&self, images: I) -> Result<Matrix<T>>
    where
        I: IntoIterator<Item = &'a ImageTensor<T>>,
    {
        let x = FeatureMap::from_images(images)?;
        Ok(self.backbone_forward_frozen(&x, Mode::Eval)?.0)
    }

    /// Back-propagates `d_embeddings` into `grads`; returns the input
    /// gradient (channel-major) when `want_input` is set.
    pub fn embed_backward(
        &self,
        pass: &EmbedPass<T>,
        d_embeddings: &Matrix<T>,
        grads: &mut Grads<T>,
        want_input: bool,
    ) -> Option<FeatureMap<T>> {
        self.backbone
            .backward(&self.params, grads, &pass.tape, d_embeddings, want_input)
    }

    // ----------------------------------------------------------- supervised

    fn supervised_head(&self) -> Result<&Mlp> {
        self.supervised.as_ref().ok_or_else(|| {
            Error::Config("model has no supervised classification head (episodic-only configuration)".into())
        })
    }

    fn supervised_from(&self, (emb, tape): (Matrix<T>, BackboneTape<T>), mode: Mode) -> Result<HeadPass<T>> {
        let (logits, head_cache) = self.supervised_head()?.forward(&self.params, emb, mode, None)?;
        Ok(HeadPass {
            logits,
            head: Head::Supervised,
            backbone: tape,
            projection: None,
            head_cache,
        })
    }

    pub fn supervised_pass<'a, I>(&mut self, images: I, mode: Mode) -> Result<HeadPass<T>>
    where
        I: IntoIterator<Item = &'a ImageTensor<T>>,
    {
        self.supervised_head()?;
        let x = FeatureMap::from_images(images)?;
        let out = self.backbone_forward(&x, mode)?;
        self.supervised_from(out, mode)
    }

    /// Read-only evaluation-mode pass, usable for input gradients.
    pub fn supervised_pass_eval<'a, I>(&self, images: I) -> Result<HeadPass<T>>
    where
        I: IntoIterator<Item = &'a ImageTensor<T>>,
    {
        self.supervised_head()?;
        let x = FeatureMap::from_images(images)?;
        let out = self.backbone_forward_frozen(&x, Mode::Eval)?;
        self.supervised_from(out, Mode::Eval)
    }

    /// `batch x num_classes` logits of the linear classifier.
    pub fn supervised_forward<'a, I>(&mut self, images: I, mode: Mode) -> Result<Matrix<T>>
    where
        I: IntoIterator<Item = &'a ImageTensor<T>>,
    {
        Ok(self.supervised_pass(images, mode)?.logits)
    }

    // --------------------------------------------------------------- jigsaw

    fn jigsaw_from(
        &self,
        (emb, tape): (Matrix<T>, BackboneTape<T>),
        batch: usize,
        mode: Mode,
    ) -> Result<HeadPass<T>> {
        let head = self
            .jigsaw
            .as_ref()
            .ok_or_else(|| Error::Config("model has no jigsaw head".into()))?;
        let projection = self.projection.as_ref().expect("ssl head implies projection");
        let (proj, proj_cache) = projection.forward(&self.params, emb, mode, None)?;
        // rows are sample-major, so each sample's 9 tile features are contiguous
        let joined = Matrix::from_vec(batch, proj.cols * 9, proj.data)?;
        let (logits, head_cache) = head.forward(&self.params, joined, mode, None)?;
        Ok(HeadPass {
            logits,
            head: Head::Jigsaw,
            backbone: tape,
            projection: Some(proj_cache),
            head_cache,
        })
    }

    fn jigsaw_batch(&self, samples: &[JigsawSample<T>]) -> Result<FeatureMap<T>> {
        if self.jigsaw.is_none() {
            return Err(Error::Config("model has no jigsaw head".into()));
        }
        if let Some(bad) = samples.iter().find(|s| s.tiles.len() != 9) {
            return Err(Error::Shape(format!("jigsaw sample has {} tiles, expected 9", bad.tiles.len())));
        }
        FeatureMap::from_images(samples.iter().flat_map(|s| s.tiles.iter()))
    }

    /// Each tile goes through the shared backbone and projection; the nine
    /// projected features are concatenated and classified into permutation
    /// indices.
    pub fn jigsaw_pass(&mut self, samples: &[JigsawSample<T>], mode: Mode) -> Result<HeadPass<T>> {
        let x = self.jigsaw_batch(samples)?;
        let out = self.backbone_forward(&x, mode)?;
        self.jigsaw_from(out, samples.len(), mode)
    }

    pub fn jigsaw_forward(&mut self, samples: &[JigsawSample<T>], mode: Mode) -> Result<Matrix<T>> {
        Ok(self.jigsaw_pass(samples, mode)?.logits)
    }

    pub fn jigsaw_forward_eval(&self, samples: &[JigsawSample<T>]) -> Result<Matrix<T>> {
        let x = self.jigsaw_batch(samples)?;
        let out = self.backbone_forward_frozen(&x, Mode::Eval)?;
        Ok(self.jigsaw_from(out, samples.len(), Mode::Eval)?.logits)
    }

    // ------------------------------------------------------------- rotation

    fn rotation_from(
        &self,
        (emb, tape): (Matrix<T>, BackboneTape<T>),
        mode: Mode,
        mut rng: Option<&mut Rng>,
    ) -> Result<HeadPass<T>> {
        let head = self
            .rotation
            .as_ref()
            .ok_or_else(|| Error::Config("model has no rotation head".into()))?;
        let projection = self.projection.as_ref().expect("ssl head implies projection");
        let (proj, proj_cache) = projection.forward(&self.params, emb, mode, rng.as_deref_mut())?;
        let (logits, head_cache) = head.forward(&self.params, proj, mode, rng)?;
        Ok(HeadPass {
            logits,
            head: Head::Rotation,
            backbone: tape,
            projection: Some(proj_cache),
            head_cache,
        })
    }

    /// Backbone, projection, then fc-ReLU-dropout-fc-ReLU-dropout-fc to four
    /// angle logits. Train mode needs `rng` for dropout.
    pub fn rotation_pass(
        &mut self,
        samples: &[RotationSample<T>],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<HeadPass<T>> {
        if self.rotation.is_none() {
            return Err(Error::Config("model has no rotation head".into()));
        }
        let x = FeatureMap::from_images(samples.iter().map(|s| &s.image))?;
        let out = self.backbone_forward(&x, mode)?;
        self.rotation_from(out, mode, rng)
    }

    pub fn rotation_forward(
        &mut self,
        samples: &[RotationSample<T>],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<Matrix<T>> {
        Ok(self.rotation_pass(samples, mode, rng)?.logits)
    }

    pub fn rotation_forward_eval(&self, samples: &[RotationSample<T>]) -> Result<Matrix<T>> {
        if self.rotation.is_none() {
            return Err(Error::Config("model has no rotation head".into()));
        }
        let x = FeatureMap::from_images(samples.iter().map(|s| &s.image))?;
        let out = self.backbone_forward_frozen(&x, Mode::Eval)?;
        Ok(self.rotation_from(out, Mode::Eval, None)?.logits)
    }

    // ------------------------------------------------------------- backward

    /// Back-propagates `d_logits` of any head pass into `grads`.
    pub fn head_backward(
        &self,
        pass: &HeadPass<T>,
        d_logits: &Matrix<T>,
        grads: &mut Grads<T>,
        want_input: bool,
    ) -> Option<FeatureMap<T>> {
        let head = match pass.head {
            Head::Supervised => self.supervised.as_ref(),
            Head::Jigsaw => self.jigsaw.as_ref(),
            Head::Rotation => self.rotation.as_ref(),
        }
        .expect("pass was produced by this model");
        let mut d = head.backward(&self.params, grads, &pass.head_cache, d_logits);
        if let Some(cache) = &pass.projection {
            if pass.head == Head::Jigsaw {
                let rows = d.rows * 9;
                d = Matrix::from_vec(rows, d.cols / 9, d.data).expect("reshape of 9 tiles");
            }
            let projection = self.projection.as_ref().expect("projection present");
            d = projection.backward(&self.params, grads, cache, &d);
        }
        self.backbone
            .backward(&self.params, grads, &pass.backbone, &d, want_input)
    }

    /// Replaces parameters and buffers, checking names and shapes.
    pub(crate) fn load_state(&mut self, params: ParamStore<T>, buffers: ParamStore<T>) -> Result<()> {
        if !self.params.same_layout(&params) || !self.buffers.same_layout(&buffers) {
            return Err(Error::Checkpoint("tensor layout does not match the model configuration".into()));
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }
}
