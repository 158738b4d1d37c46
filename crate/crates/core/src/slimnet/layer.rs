use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Conv2d,
    ChanNorm,
    TaskHead,
    Relu,
    AvgPool2,
    Flatten,
}

impl LayerKind {
    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d | LayerKind::ChanNorm | LayerKind::TaskHead)
    }
}

/// One layer of a slimmable network. `full_in`/`full_out` are channel
/// counts at full width; for `Flatten` they are the incoming channel count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub full_in: usize,
    pub full_out: usize,
    pub slimmable_in: bool,
    pub slimmable_out: bool,
}

impl LayerSpec {
    fn new(kind: LayerKind, full_in: usize, full_out: usize, slimmable_out: bool) -> Self {
        // slimmable_in is resolved when the network is assembled
        Self { kind, full_in, full_out, slimmable_in: false, slimmable_out }
    }

    pub fn conv(full_in: usize, full_out: usize) -> Self {
        Self::new(LayerKind::Conv2d, full_in, full_out, true)
    }

    pub fn dense(full_in: usize, full_out: usize) -> Self {
        Self::new(LayerKind::Dense, full_in, full_out, true)
    }

    pub fn head(full_in: usize, outputs: usize) -> Self {
        Self::new(LayerKind::TaskHead, full_in, outputs, false)
    }

    pub fn norm(channels: usize) -> Self {
        Self::new(LayerKind::ChanNorm, channels, channels, false)
    }

    pub fn relu(channels: usize) -> Self {
        Self::new(LayerKind::Relu, channels, channels, false)
    }

    pub fn avg_pool2(channels: usize) -> Self {
        Self::new(LayerKind::AvgPool2, channels, channels, false)
    }

    pub fn flatten(channels: usize) -> Self {
        Self::new(LayerKind::Flatten, channels, channels, false)
    }

    /// Same layer with its output width pinned at full.
    pub fn fixed(mut self) -> Self {
        self.slimmable_out = false;
        self
    }

    /// Whether this layer owns a width-config entry.
    pub fn owns_ratio(&self) -> bool {
        self.slimmable_out && matches!(self.kind, LayerKind::Dense | LayerKind::Conv2d)
    }
}
