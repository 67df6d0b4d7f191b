//! Network definition, parameters and the static shape audit.

mod config;
mod model;
mod params;

pub use config::{NetworkConfig, SkipMode, WidthScale, ENCODER_DOWNSAMPLE, STEM_DOWNSAMPLE};
pub use model::{
    batchnorm, build, residual_unit, shape_plan, BnMode, BnVars, ForwardOutput, Mode, Model, PlanEntry, UnitParams,
};
pub use params::{Bound, Group, Param, ParamKind, ParameterSet};
