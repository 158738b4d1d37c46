//! Slimmable SuperNet: width slicing, forward at any width configuration,
//! analytic MAC counting and norm recalibration.

mod layer;
mod net;
mod width;

pub use layer::{LayerKind, LayerSpec};
pub use net::{
    Architecture, ChannelStats, ForwardOut, InputSpec, LayerRef, NormMode, NormStats, Part, SlicedLayer, SuperNet,
};
pub use width::{active_count, WidthConfig, WidthList, WIDTH_STEP};
