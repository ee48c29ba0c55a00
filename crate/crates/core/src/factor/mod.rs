//! Recurrent factor model: infers a latent confounder sequence from history
//! and predicts each treatment with its own head from `(x_t, ẑ_t)`.

mod augment;
mod model;
mod train;

pub use augment::{augment_panel, augment_with_truth, AugmentedPanel, ConfounderSource};
pub use model::{
    factor_loss, factor_loss_and_grad, infer_z_sequence, predict_sequence, predict_treatments, FactorModelConfig,
    FactorModelParams, Head, SequenceOutput, Standardizer,
};
pub use train::{train_factor_model, treatment_r2, EpochLog, TrainingLog};

#[cfg(test)]
mod tests;
