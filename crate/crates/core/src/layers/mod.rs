//! Conditional network building blocks and the backbone that assembles them.

mod batchnorm;
mod encoder;
mod film;
mod model;

pub use batchnorm::{
    batchnorm_forward, dual_bn_forward, same_width, width_channels, BatchNormState, Branch,
    DualBNState, Mode, NormOutcome, NormUnit, SwitchableDualBN, BN_EPS, BN_MOMENTUM,
};
pub use encoder::{EncodingScheme, LambdaEncoder};
pub use film::{film_forward, FiLMBlock, Mlp, MlpVars, FILM_SLOPE};
pub use model::{
    input_difference, model_gradcheck, BnStyle, Forward, GradcheckOptions, LayerSpec, LayerState,
    Model, ModelSpec, RoutingReport, RunOptions, StatUpdate, BACKBONE_SLOPE,
};
