//! Full backbone assembly: variant specifications, the model itself and
//! analytic cost counters.

mod cost;
mod model;
mod spec;

pub use cost::{count_flops, count_params, CostItem, CostReport};
pub use model::{BlockAffinity, BlockWeights, ForwardOutput, HeadWeights, Model, PatchEmbed, StageWeights, Stem};
pub use model::{linspace, MIN_INPUT_SIDE};
pub use spec::{HeadKind, VariantSpec, NUM_STAGES, PRESET_NAMES};
