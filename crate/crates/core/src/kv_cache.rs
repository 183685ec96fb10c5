//! Rolling KV cache with a permanent reference sink and reference-anchored
//! positional re-encoding.
//!
//! Keys are stored without rotary encoding. Positions are assigned when a view
//! is built: the newest frame `t` sits at `min(t, D)`, window frames keep
//! their offset from it, and sink frames (the reference and the first
//! generation chunk) stay at their true distance from the reference. With
//! `D ≥ sink + window` capacity, window positions never reach down into the
//! sink range.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use crate::attention::{rotate_rows, RopeParams};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("frame {frame_id} does not follow last cached frame {last}")]
    OutOfOrder { frame_id: usize, last: usize },
    #[error("frame {0} appended twice")]
    Duplicate(usize),
    #[error("current frame {t} precedes cached frame {cached}")]
    FutureFrame { t: usize, cached: usize },
    #[error("positional index collision at frame {frame_id} (index {index}); rapr cap too small")]
    IndexCollision { frame_id: usize, index: usize },
    #[error("frame {frame_id} is more than the rapr cap behind current frame {t}")]
    IndexUnderflow { frame_id: usize, t: usize },
    #[error("invalid cache configuration: {0}")]
    Config(String),
    #[error("entry for frame {frame_id} has {got} layers, cache expects {expected}")]
    LayerMismatch {
        frame_id: usize,
        got: usize,
        expected: usize,
    },
}

type Result<T> = std::result::Result<T, CacheError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Sink,
    Window,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Sink => "sink",
            Region::Window => "window",
        }
    }
}

/// How cached frames are mapped to rotary positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionMode {
    /// Reference-anchored re-encoding with distance cap `D`.
    Anchored { cap: usize },
    /// Global frame index, unbounded.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheConfig {
    pub sink_frames: usize,
    pub window_frames: usize,
    /// Frames per generation chunk; frames `0..=chunk` are sink candidates.
    pub chunk: usize,
    pub positions: PositionMode,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            sink_frames: 4,
            window_frames: 6,
            chunk: 3,
            positions: PositionMode::Anchored { cap: 10 },
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 {
            return Err(CacheError::Config("chunk size must be positive".into()));
        }
        if self.sink_frames + self.window_frames == 0 {
            return Err(CacheError::Config("cache has no capacity".into()));
        }
        if let PositionMode::Anchored { cap } = self.positions {
            if cap < self.sink_frames + self.window_frames {
                return Err(CacheError::Config(format!(
                    "rapr cap {cap} below sink + window capacity {}",
                    self.sink_frames + self.window_frames
                )));
            }
        }
        Ok(())
    }

    pub fn cap(&self) -> Option<usize> {
        match self.positions {
            PositionMode::Anchored { cap } => Some(cap),
            PositionMode::Global => None,
        }
    }
}

/// Raw (non-encoded) keys and values of one frame, one tensor per layer,
/// each `[tokens_per_frame, heads·head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub frame_id: usize,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

#[derive(Clone, Debug)]
struct Slot {
    entry: CacheEntry,
    region: Region,
}

#[derive(Clone, Debug)]
pub struct CacheState {
    config: CacheConfig,
    sink: Vec<Slot>,
    window: VecDeque<Slot>,
    last_frame: Option<usize>,
    layers: Option<usize>,
    evicted: usize,
}

/// Rotary-encoded keys plus values for one attention step. Ephemeral: the
/// cache itself is never modified by building a view.
#[derive(Clone, Debug)]
pub struct EncodedView {
    pub frame_ids: Vec<usize>,
    pub regions: Vec<Region>,
    pub positions: Vec<usize>,
    /// Per layer, rows ordered by `frame_ids`, tokens of a frame contiguous.
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl EncodedView {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }
}

/// Positions for the cached frames of a view plus the incoming frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionPlan {
    pub cached: Vec<usize>,
    pub incoming: Vec<usize>,
}

impl PositionPlan {
    pub fn max(&self) -> usize {
        self.cached.iter().chain(&self.incoming).copied().max().unwrap_or(0)
    }
}

impl CacheState {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            sink: Vec::new(),
            window: VecDeque::new(),
            last_frame: None,
            layers: None,
            evicted: 0,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.sink.len() + self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn evicted(&self) -> usize {
        self.evicted
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.last_frame
    }

    pub fn sink_ids(&self) -> Vec<usize> {
        self.sink.iter().map(|s| s.entry.frame_id).collect()
    }

    pub fn window_ids(&self) -> Vec<usize> {
        self.window.iter().map(|s| s.entry.frame_id).collect()
    }

    pub fn frame_ids(&self) -> Vec<usize> {
        self.slots().map(|s| s.entry.frame_id).collect()
    }

    pub fn contains(&self, frame_id: usize) -> bool {
        self.slots().any(|s| s.entry.frame_id == frame_id)
    }

    pub fn entry(&self, frame_id: usize) -> Option<&CacheEntry> {
        self.slots().find(|s| s.entry.frame_id == frame_id).map(|s| &s.entry)
    }

    fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.sink.iter().chain(self.window.iter())
    }

    fn is_sink_candidate(&self, frame_id: usize, sink_len: usize) -> bool {
        frame_id <= self.config.chunk && sink_len < self.config.sink_frames
    }

    fn validate_incoming(&self, frame_ids: &[usize]) -> Result<()> {
        let mut last = self.last_frame;
        for &f in frame_ids {
            if let Some(l) = last {
                if f == l {
                    return Err(CacheError::Duplicate(f));
                }
                if f < l {
                    return Err(CacheError::OutOfOrder { frame_id: f, last: l });
                }
            }
            last = Some(f);
        }
        Ok(())
    }

    /// Appends one chunk of frames. Early frames fill the sink, the rest go
    /// to the window, which then drops its oldest frames down to capacity.
    pub fn append_chunk(&mut self, entries: Vec<CacheEntry>) -> Result<()> {
        let ids: Vec<usize> = entries.iter().map(|e| e.frame_id).collect();
        self.validate_incoming(&ids)?;
        for e in &entries {
            let expected = *self.layers.get_or_insert(e.keys.len());
            if e.keys.len() != expected || e.values.len() != expected {
                return Err(CacheError::LayerMismatch {
                    frame_id: e.frame_id,
                    got: e.keys.len(),
                    expected,
                });
            }
        }
        for entry in entries {
            self.last_frame = Some(entry.frame_id);
            if self.is_sink_candidate(entry.frame_id, self.sink.len()) {
                self.sink.push(Slot {
                    entry,
                    region: Region::Sink,
                });
            } else {
                self.window.push_back(Slot {
                    entry,
                    region: Region::Window,
                });
            }
        }
        while self.window.len() > self.config.window_frames {
            self.window.pop_front();
            self.evicted += 1;
        }
        Ok(())
    }

    /// Slots visible while `incoming` frames are being generated: the sink
    /// plus the newest window frames that still fit once the incoming frames
    /// take their own window room.
    fn context_slots(&self, incoming: &[usize]) -> Vec<&Slot> {
        let mut sink_len = self.sink.len();
        let mut to_window = 0;
        for &f in incoming {
            if self.is_sink_candidate(f, sink_len) {
                sink_len += 1;
            } else {
                to_window += 1;
            }
        }
        let keep = self.config.window_frames.saturating_sub(to_window);
        let skip = self.window.len().saturating_sub(keep);
        self.sink.iter().chain(self.window.iter().skip(skip)).collect()
    }

    fn plan_positions(&self, slots: &[&Slot], incoming: &[usize], t: usize) -> Result<PositionPlan> {
        if let Some(max_cached) = slots.iter().map(|s| s.entry.frame_id).max() {
            if max_cached > t {
                return Err(CacheError::FutureFrame { t, cached: max_cached });
            }
        }
        let cap = match self.config.positions {
            PositionMode::Global => {
                return Ok(PositionPlan {
                    cached: slots.iter().map(|s| s.entry.frame_id).collect(),
                    incoming: incoming.to_vec(),
                })
            }
            PositionMode::Anchored { cap } => cap,
        };
        let current = t.min(cap);
        let shifted = |frame_id: usize| -> Result<usize> {
            current
                .checked_sub(t - frame_id)
                .ok_or(CacheError::IndexUnderflow { frame_id, t })
        };
        let sink_max = slots
            .iter()
            .filter(|s| s.region == Region::Sink)
            .map(|s| s.entry.frame_id)
            .max();
        let mut cached = Vec::with_capacity(slots.len());
        for s in slots {
            let idx = match s.region {
                Region::Sink => s.entry.frame_id.min(cap),
                Region::Window => shifted(s.entry.frame_id)?,
            };
            if s.region == Region::Window && sink_max.is_some_and(|m| idx <= m) && t > cap {
                return Err(CacheError::IndexCollision {
                    frame_id: s.entry.frame_id,
                    index: idx,
                });
            }
            cached.push(idx);
        }
        let incoming = incoming.iter().map(|&f| shifted(f)).collect::<Result<Vec<_>>>()?;
        Ok(PositionPlan { cached, incoming })
    }

    /// Rotary index of every cached frame when the current frame is `t`.
    pub fn rapr_indices(&self, t: usize) -> Result<BTreeMap<usize, usize>> {
        let slots: Vec<&Slot> = self.slots().collect();
        let plan = self.plan_positions(&slots, &[], t)?;
        Ok(slots.iter().map(|s| s.entry.frame_id).zip(plan.cached).collect())
    }

    /// Index the current frame `t` itself receives.
    pub fn current_index(&self, t: usize) -> usize {
        self.config.cap().map_or(t, |cap| t.min(cap))
    }

    fn encode(&self, slots: &[&Slot], positions: &[usize], rope: &RopeParams) -> EncodedView {
        let layers = self.layers.unwrap_or(0);
        let mut keys = Vec::with_capacity(layers);
        let mut values = Vec::with_capacity(layers);
        for layer in 0..layers {
            let ks: Vec<&Tensor> = slots.iter().map(|s| &s.entry.keys[layer]).collect();
            let vs: Vec<&Tensor> = slots.iter().map(|s| &s.entry.values[layer]).collect();
            let mut k = Tensor::concat_rows(&ks).expect("uniform cache entries");
            let tokens = ks[0].shape()[0];
            let cols = k.shape()[1];
            let rows_pos: Vec<f64> = positions
                .iter()
                .flat_map(|&p| std::iter::repeat_n(p as f64, tokens))
                .collect();
            rotate_rows(k.data_mut(), cols, &rows_pos, rope.head_dim, rope.theta_base, 1.0);
            keys.push(k);
            values.push(Tensor::concat_rows(&vs).expect("uniform cache entries"));
        }
        EncodedView {
            frame_ids: slots.iter().map(|s| s.entry.frame_id).collect(),
            regions: slots.iter().map(|s| s.region).collect(),
            positions: positions.to_vec(),
            keys,
            values,
        }
    }

    /// Rotary-encoded view of the whole cache at current frame `t`.
    pub fn encoded_view(&self, t: usize, rope: &RopeParams) -> Result<EncodedView> {
        let slots: Vec<&Slot> = self.slots().collect();
        let plan = self.plan_positions(&slots, &[], t)?;
        Ok(self.encode(&slots, &plan.cached, rope))
    }

    /// View used while generating the `incoming` frames (ascending, not yet
    /// cached). Window frames that appending them would evict are left out,
    /// and the current frame is the last incoming one.
    pub fn context_view(&self, incoming: &[usize], rope: &RopeParams) -> Result<(EncodedView, PositionPlan)> {
        self.validate_incoming(incoming)?;
        let t = *incoming.last().ok_or(CacheError::Config("no incoming frames".into()))?;
        let slots = self.context_slots(incoming);
        let plan = self.plan_positions(&slots, incoming, t)?;
        let view = self.encode(&slots, &plan.cached, rope);
        Ok((view, plan))
    }

    /// Positions only, same rule as [`Self::context_view`].
    pub fn context_positions(&self, incoming: &[usize]) -> Result<PositionPlan> {
        self.validate_incoming(incoming)?;
        let t = *incoming.last().ok_or(CacheError::Config("no incoming frames".into()))?;
        let slots = self.context_slots(incoming);
        self.plan_positions(&slots, incoming, t)
    }

    /// `frame_id,region,index` lines at current frame `t`, header first.
    pub fn dump(&self, t: usize) -> Result<String> {
        let idx = self.rapr_indices(t)?;
        let mut out = String::from("frame_id,region,index\n");
        for s in self.slots() {
            let _ = writeln!(
                out,
                "{},{},{}",
                s.entry.frame_id,
                s.region.as_str(),
                idx[&s.entry.frame_id]
            );
        }
        Ok(out)
    }
}
