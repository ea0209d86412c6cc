//! Shared feature backbone with supervised and self-supervised heads.

mod backbone;
mod bundle;
mod checkpoint;
mod heads;
pub mod layers;
mod params;
mod tensor;

pub use self::backbone::{Backbone, BackboneKind, BackboneTape};
pub use self::bundle::{
    EmbedPass, HeadPass, ModelBundle, ModelConfig, DROPOUT, ROTATION_CLASSES, ROTATION_HIDDEN,
};
pub use self::checkpoint::{Checkpoint, FORMAT_VERSION};
pub use self::layers::{BnPolicy, Mode};
pub use self::params::{Grads, ParamId, ParamStore, ParamTensor};
pub use self::tensor::{argmax, FeatureMap, Matrix};
