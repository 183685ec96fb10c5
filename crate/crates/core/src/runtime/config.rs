//! Flat `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.
//! Every consumer marks the keys it reads; [`KvConfig::finish`] rejects any
//! key nobody asked for, so typos fail loudly.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dit::{Mode, ModelConfig, Prediction};
use crate::kv_cache::{CacheConfig, PositionMode};
use crate::scheduler::NoiseSchedule;
use crate::{Error, Result};

#[derive(Debug, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if values.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(Self {
            values,
            used: RefCell::default(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for key {key:?}"))),
        }
    }

    pub fn get_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad number {s:?} in key {key:?}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Errors on keys that no reader looked at.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self.values.keys().filter(|k| !used.contains(*k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

impl ModelConfig {
    /// Reads model keys; missing ones keep `base` values.
    pub fn from_kv(kv: &KvConfig, base: &ModelConfig) -> Result<Self> {
        let mode: Mode = kv.get("mode", base.mode)?;
        let prediction: Prediction = kv.get("prediction", base.prediction)?;
        let c = ModelConfig {
            layers: kv.get("layers", base.layers)?,
            model_dim: kv.get("model_dim", base.model_dim)?,
            heads: kv.get("heads", base.heads)?,
            head_dim: kv.get("head_dim", base.head_dim)?,
            tokens_per_frame: kv.get("tokens_per_frame", base.tokens_per_frame)?,
            latent_channels: kv.get("latent_channels", base.latent_channels)?,
            window: kv.get("window", base.window)?,
            chunk: kv.get("chunk", base.chunk)?,
            audio_dim: kv.get("audio_dim", base.audio_dim)?,
            time_embed_dim: kv.get("time_embed_dim", base.time_embed_dim)?,
            prompt_tokens: kv.get("prompt_tokens", base.prompt_tokens)?,
            ffn_mult: kv.get("ffn_mult", base.ffn_mult)?,
            rope_theta: kv.get("rope_theta", base.rope_theta)?,
            mode,
            prediction,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse_kv(text: &str) -> Result<Self> {
        let kv = KvConfig::parse(text)?;
        let c = Self::from_kv(&kv, &Self::default())?;
        kv.finish()?;
        Ok(c)
    }
}

impl CacheConfig {
    /// Keys `sink_frames`, `window_frames`, `rapr` (`on`/`off`), `rapr_cap`.
    pub fn from_kv(kv: &KvConfig, chunk: usize, base: &CacheConfig) -> Result<Self> {
        let base_cap = base.cap().unwrap_or(10);
        let rapr: String = kv.get("rapr", if base.cap().is_some() { "on".into() } else { "off".into() })?;
        let cap: usize = kv.get("rapr_cap", base_cap)?;
        let positions = match rapr.as_str() {
            "on" => PositionMode::Anchored { cap },
            "off" => PositionMode::Global,
            other => return Err(Error::Config(format!("rapr must be on or off, got {other:?}"))),
        };
        let c = CacheConfig {
            sink_frames: kv.get("sink_frames", base.sink_frames)?,
            window_frames: kv.get("window_frames", base.window_frames)?,
            chunk,
            positions,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockMode {
    Simulated,
    Wall,
}

impl FromStr for ClockMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulated" => Ok(ClockMode::Simulated),
            "wall" => Ok(ClockMode::Wall),
            _ => Err(Error::Config(format!("unknown clock {s:?}"))),
        }
    }
}

/// Busy time of a stage per chunk: `first_us` for the first chunk,
/// `steady_us` after.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageDelay {
    pub first_us: u64,
    pub steady_us: u64,
}

impl StageDelay {
    pub const ZERO: StageDelay = StageDelay { first_us: 0, steady_us: 0 };

    /// Delay model with first-chunk delay `ffd_s` and steady-state real-time
    /// factor `rtf` for chunks of `chunk_s` seconds.
    pub fn from_rtf(ffd_s: f64, rtf: f64, chunk_s: f64) -> Self {
        Self {
            first_us: (ffd_s * 1e6).round() as u64,
            steady_us: (rtf * chunk_s * 1e6).round() as u64,
        }
    }

    pub fn for_chunk(&self, index: usize) -> u64 {
        if index == 0 {
            self.first_us
        } else {
            self.steady_us
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub checkpoint: Option<PathBuf>,
    pub cache: CacheConfig,
    pub schedule: NoiseSchedule,
    pub chunk_seconds: f64,
    pub num_chunks: usize,
    pub clock: ClockMode,
    pub denoise_delay: StageDelay,
    pub decode_delay: StageDelay,
    /// Output values per latent token of the stub decoder.
    pub decode_channels: usize,
    pub clean_recache: bool,
    pub output: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            cache: CacheConfig::default(),
            schedule: NoiseSchedule::student_default(),
            chunk_seconds: 0.48,
            num_chunks: 10,
            clock: ClockMode::Simulated,
            denoise_delay: StageDelay::ZERO,
            decode_delay: StageDelay::ZERO,
            decode_channels: 3,
            clean_recache: false,
            output: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chunk_seconds > 0.0 && self.chunk_seconds.is_finite()) {
            return Err(Error::Config(format!("chunk_seconds must be positive, got {}", self.chunk_seconds)));
        }
        if self.num_chunks == 0 {
            return Err(Error::Config("num_chunks must be positive".into()));
        }
        if self.decode_channels == 0 {
            return Err(Error::Config("decode_channels must be positive".into()));
        }
        self.cache.validate()?;
        Ok(())
    }

    /// Keys: `checkpoint`, `chunk`, cache keys, `schedule` (comma list),
    /// `chunk_seconds`, `num_chunks`, `clock`, `denoise_first_us`,
    /// `denoise_steady_us`, `decode_first_us`, `decode_steady_us`,
    /// `decode_channels`, `clean_recache`, `output`, `seed`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let chunk = kv.get("chunk", d.cache.chunk)?;
        let schedule = match kv.get_list("schedule")? {
            Some(levels) => NoiseSchedule::new(levels)?,
            None => d.schedule.clone(),
        };
        let c = Self {
            checkpoint: kv.raw("checkpoint").map(PathBuf::from),
            cache: CacheConfig::from_kv(kv, chunk, &d.cache)?,
            schedule,
            chunk_seconds: kv.get("chunk_seconds", d.chunk_seconds)?,
            num_chunks: kv.get("num_chunks", d.num_chunks)?,
            clock: kv.get("clock", d.clock)?,
            denoise_delay: StageDelay {
                first_us: kv.get("denoise_first_us", 0)?,
                steady_us: kv.get("denoise_steady_us", 0)?,
            },
            decode_delay: StageDelay {
                first_us: kv.get("decode_first_us", 0)?,
                steady_us: kv.get("decode_steady_us", 0)?,
            },
            decode_channels: kv.get("decode_channels", d.decode_channels)?,
            clean_recache: kv.get("clean_recache", d.clean_recache)?,
            output: kv.raw("output").map(PathBuf::from),
            seed: kv.get("seed", d.seed)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_unknown_keys() {
        let kv = KvConfig::parse("# c\nlayers = 3\n\nheads=2\nbogus=1\n").unwrap();
        assert_eq!(kv.get("layers", 0usize).unwrap(), 3);
        assert_eq!(kv.get("missing", 7usize).unwrap(), 7);
        assert!(kv.get::<usize>("heads", 0).is_ok());
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn malformed_lines() {
        assert!(KvConfig::parse("novalue\n").is_err());
        assert!(KvConfig::parse("a=1\na=2\n").is_err());
        assert!(KvConfig::parse("=1\n").is_err());
    }

    #[test]
    fn model_config_round_trip() {
        let c = ModelConfig::tiny();
        assert_eq!(ModelConfig::parse_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn pipeline_config() {
        let kv = KvConfig::parse("schedule=1.0,0.5\nrapr=off\nsink_frames=0\nwindow_frames=10\nclock=wall\n").unwrap();
        let p = PipelineConfig::from_kv(&kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(p.schedule.levels(), &[1.0, 0.5]);
        assert_eq!(p.cache.positions, PositionMode::Global);
        assert_eq!(p.clock, ClockMode::Wall);
        let bad = KvConfig::parse("chunk_seconds=0\n").unwrap();
        assert!(PipelineConfig::from_kv(&bad).is_err());
        let bad = KvConfig::parse("rapr_cap=5\n").unwrap();
        assert!(PipelineConfig::from_kv(&bad).is_err());
    }

    #[test]
    fn delay_from_rtf() {
        let d = StageDelay::from_rtf(0.33, 0.69, 0.48);
        assert_eq!(d.first_us, 330_000);
        assert_eq!(d.steady_us, 331_200);
    }
}
