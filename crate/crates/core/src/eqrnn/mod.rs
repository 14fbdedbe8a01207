//! Quantile regression: losses, level sets, the encoder/decoder network and
//! the two-stage per-sensor quantile heads.

pub mod levels;
pub mod loss;
pub mod net;
pub mod quantile;

pub use levels::{horizon_output_count, Horizon, HorizonConfig, QuantileLevelSet};
pub use loss::{
    empirical_quantile, huber_quantile_loss, pinball_loss, quantile_loss, select_delta, QuantileLoss, DELTA_FLOOR,
};
pub use net::{EqrnnConfig, EqrnnNet};
pub use quantile::{
    interpolate_level, mean_pinball, refine_stage2, stage1_estimates, train_quantile_model, train_stage1,
    QuantileModel, QuantileTrainConfig, RefinedModel, Stage1Outputs, SupervisedSplit, TrainedModel, STAGE1_DIMS,
    STAGE2_HIDDEN,
};
