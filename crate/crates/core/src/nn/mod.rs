//! Layer specifications, parameter storage and initialization, losses.

mod layers;
pub mod loss;

pub use layers::{
    fans, init_params, l2_penalty, Activation, LayerSpec, Param, ParamRole, ParamSet, ShapedLayer,
};
