//! Shared domain types: feature grids, masks, memory banks, and the
//! matcher configuration.
//!
//! Conventions fixed here and relied on everywhere else:
//! - all arithmetic is `f64`
//! - grids are row-major and pixel-major: pixel index `i = y * w + x`,
//!   channel values of one pixel are contiguous
//! - memory keys are stored unit-normalized, foreground/background values
//!   sum to one per entry

use std::fmt;

/// Tolerance for stored-entry invariants (unit keys, fg+bg sums).
pub const ENTRY_TOL: f64 = 1e-9;

/// Pixel vectors with L2 norm below this are treated as degenerate
/// (normalization returns zeros, memory operations skip them).
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
pub enum CmeError {
    /// Malformed on-disk data; `detail` names the offending field or offset.
    Format {
        path: String,
        detail: String,
    },
    Io(std::io::Error),
    /// Shapes of two arguments do not agree.
    Dimension(String),
    /// A documented precondition was violated.
    Contract(String),
    /// A value is outside its documented range.
    Invalid(String),
    /// Memory initialization produced no usable entries.
    EmptyBank(String),
}

impl fmt::Display for CmeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmeError::Format { path, detail } => write!(f, "format error in {path}: {detail}"),
            CmeError::Io(err) => write!(f, "i/o error: {err}"),
            CmeError::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            CmeError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CmeError::Invalid(msg) => write!(f, "invalid value: {msg}"),
            CmeError::EmptyBank(msg) => write!(f, "empty memory bank: {msg}"),
        }
    }
}

impl std::error::Error for CmeError {}

impl From<std::io::Error> for CmeError {
    fn from(err: std::io::Error) -> Self {
        CmeError::Io(err)
    }
}

/// An `h × w` grid of `c`-dimensional real feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self, CmeError> {
        if h == 0 || w == 0 || c == 0 {
            return Err(CmeError::Invalid(format!(
                "feature map dimensions must be positive, got {h}x{w}x{c}"
            )));
        }
        if data.len() != h * w * c {
            return Err(CmeError::Dimension(format!(
                "feature map {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(CmeError::Invalid(format!(
                "feature map value {} is not finite",
                pos + 1
            )));
        }
        Ok(Self { h, w, c, data })
    }

    /// All-zero map, useful as an output buffer.
    pub fn zeros(h: usize, w: usize, c: usize) -> Result<Self, CmeError> {
        Self::new(h, w, c, vec![0.0; h * w * c])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    /// Number of pixels, `h * w`.
    pub fn pixel_count(&self) -> usize {
        self.h * self.w
    }

    /// Channel slice of pixel `i = y * w + x`.
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Number of pixels whose vector norm is below [`ZERO_NORM_EPS`].
    pub fn zero_pixel_count(&self) -> usize {
        (0..self.pixel_count())
            .filter(|&i| {
                let sq: f64 = self.pixel(i).iter().map(|v| v * v).sum();
                sq.sqrt() < ZERO_NORM_EPS
            })
            .count()
    }
}

/// An `h × w` real-valued map with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self, CmeError> {
        if h == 0 || w == 0 {
            return Err(CmeError::Invalid(format!(
                "mask dimensions must be positive, got {h}x{w}"
            )));
        }
        if data.len() != h * w {
            return Err(CmeError::Dimension(format!(
                "mask {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(pos) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(CmeError::Invalid(format!(
                "mask value {} ({}) is outside [0, 1]",
                pos + 1,
                data[pos]
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self, CmeError> {
        Self::new(h, w, vec![0.0; h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixel_count(&self) -> usize {
        self.h * self.w
    }

    pub fn value(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Pointwise complement `1 - m`, the background pair of a foreground mask.
    pub fn complement(&self) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// Checks the paired-mask invariant `fg(i) + bg(i) = 1` for every pixel.
    pub fn check_pair(fg: &Mask, bg: &Mask) -> Result<(), CmeError> {
        if fg.h != bg.h || fg.w != bg.w {
            return Err(CmeError::Dimension(format!(
                "mask pair shapes differ: {}x{} vs {}x{}",
                fg.h, fg.w, bg.h, bg.w
            )));
        }
        for i in 0..fg.data.len() {
            let sum = fg.data[i] + bg.data[i];
            if (sum - 1.0).abs() > ENTRY_TOL {
                return Err(CmeError::Contract(format!(
                    "mask pair sums to {sum} at pixel {i}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// One stored reference: a unit-norm key plus its foreground and
/// background values.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    key: Vec<f64>,
    fg: f64,
    bg: f64,
}

impl MemoryEntry {
    pub fn new(key: Vec<f64>, fg: f64, bg: f64) -> Result<Self, CmeError> {
        let norm: f64 = key.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > ENTRY_TOL {
            return Err(CmeError::Invalid(format!(
                "memory key norm {norm} is not 1 within {ENTRY_TOL}"
            )));
        }
        if !(0.0..=1.0).contains(&fg) || !(0.0..=1.0).contains(&bg) {
            return Err(CmeError::Invalid(format!(
                "memory values fg={fg} bg={bg} outside [0, 1]"
            )));
        }
        if (fg + bg - 1.0).abs() > ENTRY_TOL {
            return Err(CmeError::Invalid(format!(
                "memory values fg={fg} bg={bg} do not sum to 1 within {ENTRY_TOL}"
            )));
        }
        Ok(Self { key, fg, bg })
    }

    pub fn key(&self) -> &[f64] {
        &self.key
    }

    pub fn fg(&self) -> f64 {
        self.fg
    }

    pub fn bg(&self) -> f64 {
        self.bg
    }

    pub(crate) fn set(&mut self, key: Vec<f64>, fg: f64, bg: f64) {
        self.key = key;
        self.fg = fg;
        self.bg = bg;
    }
}

/// Ordered, variable-length bank of memory entries sharing one key
/// dimension. Entries inserted at initialization are marked so that
/// eviction policies never remove them.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    channels: usize,
    entries: Vec<MemoryEntry>,
    initial_len: usize,
}

impl MemoryBank {
    pub fn new(channels: usize) -> Result<Self, CmeError> {
        if channels == 0 {
            return Err(CmeError::Invalid("bank channels must be positive".into()));
        }
        Ok(Self {
            channels,
            entries: Vec::new(),
            initial_len: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, j: usize) -> &MemoryEntry {
        &self.entries[j]
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// How many leading entries came from initialization.
    pub fn initial_len(&self) -> usize {
        self.initial_len
    }

    pub fn push(&mut self, entry: MemoryEntry) -> Result<(), CmeError> {
        if entry.key.len() != self.channels {
            return Err(CmeError::Dimension(format!(
                "entry key has {} channels, bank expects {}",
                entry.key.len(),
                self.channels
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Marks everything currently stored as the initial (never-evicted) part.
    pub(crate) fn mark_initial(&mut self) {
        self.initial_len = self.entries.len();
    }

    pub(crate) fn entry_mut(&mut self, j: usize) -> &mut MemoryEntry {
        &mut self.entries[j]
    }

    /// Evicts the oldest non-initial entries until at most `cap` of them
    /// remain. Returns the number evicted.
    pub(crate) fn evict_non_initial_to(&mut self, cap: usize) -> usize {
        let non_initial = self.entries.len() - self.initial_len;
        if non_initial <= cap {
            return 0;
        }
        let excess = non_initial - cap;
        self.entries
            .drain(self.initial_len..self.initial_len + excess);
        excess
    }
}

/// Memory maintenance strategy used by the per-frame update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryStrategy {
    /// Keep only the initial frame's entries.
    InitialOnly,
    /// Append every query pixel of every frame.
    AllFrames,
    /// Merge / expand / discard by correlation thresholds.
    Compact,
}

impl MemoryStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MemoryStrategy::InitialOnly => "initial-only",
            MemoryStrategy::AllFrames => "all-frames",
            MemoryStrategy::Compact => "compact",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CmeError> {
        match s {
            "initial-only" => Ok(MemoryStrategy::InitialOnly),
            "all-frames" => Ok(MemoryStrategy::AllFrames),
            "compact" => Ok(MemoryStrategy::Compact),
            other => Err(CmeError::Invalid(format!(
                "unknown strategy '{other}' (expected initial-only | all-frames | compact)"
            ))),
        }
    }
}

/// Matching and memory-update configuration.
///
/// Defaults: `top_k = 3`, `upper_threshold = 0.90`, `fusion_weight = 0.001`,
/// strategy `Compact`, no cap on the all-frames baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct CmeConfig {
    /// Number of best matches averaged per pixel score.
    pub top_k: usize,
    /// Merge threshold on the maximum correlation, in (0, 1].
    pub upper_threshold: f64,
    /// Blend weight applied to the incoming feature when merging, in [0, 1].
    pub fusion_weight: f64,
    pub strategy: MemoryStrategy,
    /// Optional bound on non-initial entries kept by the all-frames baseline.
    pub all_frames_cap: Option<usize>,
}

impl Default for CmeConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            upper_threshold: 0.90,
            fusion_weight: 0.001,
            strategy: MemoryStrategy::Compact,
            all_frames_cap: None,
        }
    }
}

impl CmeConfig {
    pub fn validate(&self) -> Result<(), CmeError> {
        if self.top_k == 0 {
            return Err(CmeError::Invalid("top_k must be at least 1".into()));
        }
        if !(self.upper_threshold > 0.0 && self.upper_threshold <= 1.0) {
            return Err(CmeError::Invalid(format!(
                "upper_threshold {} outside (0, 1]",
                self.upper_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(CmeError::Invalid(format!(
                "fusion_weight {} outside [0, 1]",
                self.fusion_weight
            )));
        }
        if self.all_frames_cap == Some(0) {
            return Err(CmeError::Invalid("all_frames_cap must be positive".into()));
        }
        Ok(())
    }
}
