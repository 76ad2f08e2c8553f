//! Promptable volumetric tumor segmentation.
//!
//! A ViT-style image encoder sees a group of four slices spaced `δ` apart.
//! Low-rank adapters on the attention query/value projections and a
//! depth-conditioning block that mixes features across the group adapt
//! the frozen encoder; a prompt-driven decoder turns a box or point into a
//! per-slice mask.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below fix the common choice.

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod head;
pub mod model;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod volumes;

pub use encoder::{lora_forward, EncoderConfig, LoraAdapter};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Error, Result};
pub use eval::{binarize, dice, infer_volume, mean_unseen_dice, DiceReport, EvalConfig, PromptSource};
pub use head::{bce_loss, encode_prompt, DecoderConfig};
pub use model::{GbtSam, ModelConfig};
pub use params::{ParamGroup, ParamStore};
pub use sampler::{
    make_box_prompt, make_point_prompt, select_slices, Prompt, PromptBox, PromptPoint, SliceGroup, SliceMode,
    GROUP_SIZE,
};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use training::{
    build_freeze_plan, count_trainable_params, train_phase, FreezePlan, Phase, PromptRegime, TrainConfig, TrainMode,
};
pub use volumes::{
    generate_phantom, DomainTag, Modality, ModalityTransform, PhantomSpec, SegMask, Volume,
};

/// Single-precision model used for training and serving.
pub type Model = GbtSam<f32>;
/// Double-precision model used for gradient checks.
pub type Model64 = GbtSam<f64>;
pub type Tensor32 = Tensor<f32>;
