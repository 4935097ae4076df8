use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionAxis {
    /// Segments are stacked along H (each spans the full width).
    Horizontal,
    /// Segments are stacked along W.
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub area_segments: usize,
    pub axis: PartitionAxis,
    /// Add the 7x7 separable position perceiver on V.
    pub perceiver: bool,
}

impl AttentionConfig {
    /// Defaults: MLP ratio 1.2, four horizontal segments, perceiver on.
    pub fn new(channels: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            channels,
            heads,
            mlp_ratio: 1.2,
            area_segments: 4,
            axis: PartitionAxis::Horizontal,
            perceiver: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_segments(mut self, l: usize) -> Self {
        self.area_segments = l;
        self
    }

    pub fn with_axis(mut self, axis: PartitionAxis) -> Self {
        self.axis = axis;
        self
    }

    pub fn with_perceiver(mut self, on: bool) -> Self {
        self.perceiver = on;
        self
    }

    pub fn with_mlp_ratio(mut self, r: f64) -> Self {
        self.mlp_ratio = r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 {
            return Err(Error::Config("attention: channels and heads must be positive".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention: {} channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.area_segments == 0 {
            return Err(Error::Config("attention: area segments must be >= 1".into()));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!("attention: bad MLP ratio {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// `round(C * ratio)`, halves rounded up.
    pub fn mlp_hidden(&self) -> usize {
        (self.channels as f64 * self.mlp_ratio + 0.5).floor() as usize
    }
}

/// Split of an `H x W` token grid into `L` equal runs of the scan order.
///
/// Tokens are scanned row-major (horizontal) or column-major (vertical) and
/// cut into `L` contiguous runs of `n / L`. When the scanned axis is a
/// multiple of `L` every run is exactly an `(H/L, W)` or `(H, W/L)` slab.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AreaPartition {
    pub segments: usize,
    pub axis: PartitionAxis,
    pub height: usize,
    pub width: usize,
}

impl AreaPartition {
    pub fn new(height: usize, width: usize, segments: usize, axis: PartitionAxis) -> Result<Self> {
        let n = height * width;
        if segments == 0 || n == 0 || n % segments != 0 {
            let (name, extent) = match axis {
                PartitionAxis::Horizontal => ("H", height),
                PartitionAxis::Vertical => ("W", width),
            };
            return Err(Error::Partition(format!(
                "cannot split {height}x{width} map ({name} = {extent}, {n} tokens) into {segments} equal areas"
            )));
        }
        Ok(AreaPartition {
            segments,
            axis,
            height,
            width,
        })
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn tokens_per_segment(&self) -> usize {
        self.tokens() / self.segments
    }

    /// Rectangular slab shape when the partition aligns with rows/columns.
    pub fn segment_shape(&self) -> Option<(usize, usize)> {
        match self.axis {
            PartitionAxis::Horizontal if self.height % self.segments == 0 => {
                Some((self.height / self.segments, self.width))
            }
            PartitionAxis::Vertical if self.width % self.segments == 0 => Some((self.height, self.width / self.segments)),
            _ => None,
        }
    }

    /// Segment index owning pixel `(y, x)`.
    pub fn segment_of(&self, y: usize, x: usize) -> usize {
        let scan = match self.axis {
            PartitionAxis::Horizontal => y * self.width + x,
            PartitionAxis::Vertical => x * self.height + y,
        };
        scan / self.tokens_per_segment()
    }

    /// `[N, C, H, W]` -> `[N*L, n/L, C]`.
    pub fn split<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.dims4("AreaPartition::split")?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(
                "AreaPartition::split",
                "spatial extent",
                format!("{}x{}", self.height, self.width),
                format!("{h}x{w}"),
            ));
        }
        let scanned = match self.axis {
            PartitionAxis::Horizontal => x.permute(&[0, 2, 3, 1])?,
            PartitionAxis::Vertical => x.permute(&[0, 3, 2, 1])?,
        };
        scanned.reshape(&[n * self.segments, self.tokens_per_segment(), c])
    }

    /// Inverse of [`split`](Self::split).
    pub fn merge<T: Element>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c) = match t.shape() {
            &[b, m, c] if m == self.tokens_per_segment() && b % self.segments == 0 => (b, c),
            other => {
                return Err(Error::shape(
                    "AreaPartition::merge",
                    "token layout",
                    format!("[k*{}, {}, C]", self.segments, self.tokens_per_segment()),
                    format!("{other:?}"),
                ))
            }
        };
        let n = b / self.segments;
        match self.axis {
            PartitionAxis::Horizontal => t.reshape(&[n, self.height, self.width, c])?.permute(&[0, 3, 1, 2]),
            PartitionAxis::Vertical => t.reshape(&[n, self.width, self.height, c])?.permute(&[0, 3, 2, 1]),
        }
    }
}
