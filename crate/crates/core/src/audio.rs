//! Per-frame speech features, the talking/listening mask, and the track file.
//!
//! The mask multiplies extracted features: the talking stream is
//! `features ⊙ mask` and the listening stream `features ⊙ (1 − mask)`, so the
//! two always sum back to the original features.
//!
//! Track file layout (little-endian):
//!
//! | bytes            | content                                  |
//! |------------------|------------------------------------------|
//! | 5                | magic `ATRK1`                            |
//! | 4                | `u32` frame count `F`                    |
//! | 4                | `u32` feature width `A`                  |
//! | `4·F·A`          | `f32` features, row-major `[F, A]`       |
//! | `F`              | mask, one byte per frame, `0` or `1`     |

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::Tensor;

pub const TRACK_MAGIC: &[u8; 5] = b"ATRK1";

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("malformed track file: {0}")]
    Malformed(String),
    #[error("mask value {value} at frame {frame} is not 0 or 1")]
    NonBinaryMask { frame: usize, value: u8 },
    #[error("feature rows ({features}) and mask length ({mask}) differ")]
    LengthMismatch { features: usize, mask: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 1 = speaking, 0 = listening, one value per video frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AudioMask(Vec<u8>);

impl AudioMask {
    pub fn new(values: Vec<u8>) -> Result<Self, TrackError> {
        if let Some((frame, &value)) = values.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(TrackError::NonBinaryMask { frame, value });
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn is_talking(&self, frame: usize) -> bool {
        self.0[frame] == 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskPattern {
    Talking,
    Listening,
    /// `period` talking frames, then `period` listening frames, repeated.
    Alternating { period: usize },
    Explicit(Vec<u8>),
}

impl MaskPattern {
    pub fn materialize(&self, frames: usize) -> Result<AudioMask, TrackError> {
        let values = match self {
            MaskPattern::Talking => vec![1; frames],
            MaskPattern::Listening => vec![0; frames],
            MaskPattern::Alternating { period } => {
                let p = (*period).max(1);
                (0..frames).map(|f| u8::from((f / p) % 2 == 0)).collect()
            }
            MaskPattern::Explicit(v) => {
                if v.len() != frames {
                    return Err(TrackError::LengthMismatch {
                        features: frames,
                        mask: v.len(),
                    });
                }
                v.clone()
            }
        };
        AudioMask::new(values)
    }
}

/// Pre-extracted speech features, one row per video frame, plus the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTrack {
    features: Tensor,
    mask: AudioMask,
}

impl AudioTrack {
    pub fn new(features: Tensor, mask: AudioMask) -> Result<Self, TrackError> {
        let (rows, _) = features
            .dims2()
            .map_err(|e| TrackError::Malformed(e.to_string()))?;
        if rows != mask.len() {
            return Err(TrackError::LengthMismatch {
                features: rows,
                mask: mask.len(),
            });
        }
        Ok(Self { features, mask })
    }

    pub fn frames(&self) -> usize {
        self.mask.len()
    }

    pub fn audio_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn mask(&self) -> &AudioMask {
        &self.mask
    }

    /// `(talking, listening)` feature streams.
    pub fn apply_mask(&self) -> (Tensor, Tensor) {
        let a = self.audio_dim();
        let m = self.mask.values();
        let talk = Tensor::from_fn(self.features.shape(), |i| {
            self.features.data()[i] * f64::from(m[i / a])
        });
        let listen = Tensor::from_fn(self.features.shape(), |i| {
            self.features.data()[i] * (1.0 - f64::from(m[i / a]))
        });
        (talk, listen)
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Option<AudioTrack> {
        if len == 0 || start + len > self.frames() {
            return None;
        }
        let features = self.features.slice_rows(start, len).ok()?;
        let mask = AudioMask(self.mask.0[start..start + len].to_vec());
        Some(Self { features, mask })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (frames, dim) = (self.frames(), self.audio_dim());
        let mut out = Vec::with_capacity(13 + 4 * frames * dim + frames);
        out.extend_from_slice(TRACK_MAGIC);
        out.extend_from_slice(&(frames as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for &v in self.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(self.mask.values());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrackError> {
        if bytes.len() < 13 || &bytes[..5] != TRACK_MAGIC {
            return Err(TrackError::Malformed("missing ATRK1 header".into()));
        }
        let frames = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
        if frames == 0 || dim == 0 {
            return Err(TrackError::Malformed(format!("empty track ({frames}x{dim})")));
        }
        let feat_end = 13 + 4 * frames * dim;
        if bytes.len() < feat_end {
            return Err(TrackError::Malformed(format!(
                "feature section truncated: {} of {} bytes",
                bytes.len() - 13,
                feat_end - 13
            )));
        }
        let data = bytes[13..feat_end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let mask_bytes = &bytes[feat_end..];
        if mask_bytes.len() != frames {
            return Err(TrackError::LengthMismatch {
                features: frames,
                mask: mask_bytes.len(),
            });
        }
        let features = Tensor::new(&[frames, dim], data).map_err(|e| TrackError::Malformed(e.to_string()))?;
        Self::new(features, AudioMask::new(mask_bytes.to_vec())?)
    }
}

pub fn load_track(path: impl AsRef<Path>) -> Result<AudioTrack, TrackError> {
    AudioTrack::from_bytes(&std::fs::read(path)?)
}

pub fn save_track(track: &AudioTrack, path: impl AsRef<Path>) -> Result<(), TrackError> {
    std::fs::write(path, track.to_bytes())?;
    Ok(())
}

/// Deterministic stand-in for extracted speech features.
///
/// Each feature channel is a sum of three low-frequency sinusoids (0.01 to
/// 0.08 cycles per frame, random phase and amplitude) plus an AR(1) process
/// with coefficient 0.9 and innovation std 0.1, all drawn from a ChaCha8
/// stream seeded with `seed`. Output is smooth: neighbouring frames are far
/// more correlated than frames ten apart.
pub fn synth_features(seed: u64, frames: usize, audio_dim: usize, pattern: &MaskPattern) -> Result<AudioTrack, TrackError> {
    if frames == 0 || audio_dim == 0 {
        return Err(TrackError::Malformed("synthetic track needs frames and features".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; frames * audio_dim];
    for d in 0..audio_dim {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.01..0.08),
                    rng.random_range(0.0..TAU),
                    rng.random_range(0.3..1.0),
                )
            })
            .collect();
        let mut ar = 0.0;
        for f in 0..frames {
            ar = 0.9 * ar + 0.1 * rng.sample::<f64, _>(StandardNormal);
            let s: f64 = waves
                .iter()
                .map(|(freq, phase, amp)| amp * (TAU * freq * f as f64 + phase).sin())
                .sum();
            data[f * audio_dim + d] = s / 3.0 + ar;
        }
    }
    let features = Tensor::new(&[frames, audio_dim], data).expect("sized above");
    AudioTrack::new(features, pattern.materialize(frames)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(mask: Vec<u8>) -> AudioTrack {
        let n = mask.len();
        AudioTrack::new(
            Tensor::from_fn(&[n, 3], |i| i as f64 - 4.0),
            AudioMask::new(mask).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn all_talking_routes_everything_to_talk() {
        let t = track(vec![1; 4]);
        let (talk, listen) = t.apply_mask();
        assert_eq!(&talk, t.features());
        assert!(listen.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_listening_routes_everything_to_listen() {
        let t = track(vec![0; 4]);
        let (talk, listen) = t.apply_mask();
        assert!(talk.data().iter().all(|&v| v == 0.0));
        assert_eq!(&listen, t.features());
    }

    #[test]
    fn masking_is_idempotent() {
        let t = track(vec![1, 0, 0, 1, 1]);
        let (talk, _) = t.apply_mask();
        let again = AudioTrack::new(talk.clone(), t.mask().clone()).unwrap();
        assert_eq!(again.apply_mask().0, talk);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let err = AudioTrack::new(Tensor::zeros(&[3, 2]), AudioMask::new(vec![1, 0]).unwrap());
        assert!(matches!(err, Err(TrackError::LengthMismatch { features: 3, mask: 2 })));
    }

    #[test]
    fn alternating_pattern() {
        let m = MaskPattern::Alternating { period: 10 }.materialize(40).unwrap();
        let expected: Vec<u8> = [vec![1; 10], vec![0; 10], vec![1; 10], vec![0; 10]].concat();
        assert_eq!(m.values(), expected.as_slice());
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let a = synth_features(7, 50, 4, &MaskPattern::Talking).unwrap();
        let b = synth_features(7, 50, 4, &MaskPattern::Talking).unwrap();
        let c = synth_features(8, 50, 4, &MaskPattern::Talking).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn file_errors_are_distinct() {
        let t = track(vec![1, 0, 1]);
        let mut bytes = t.to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(AudioTrack::from_bytes(&bad_magic), Err(TrackError::Malformed(_))));
        let last = bytes.len() - 1;
        bytes[last] = 2;
        assert!(matches!(
            AudioTrack::from_bytes(&bytes),
            Err(TrackError::NonBinaryMask { frame: 2, value: 2 })
        ));
        bytes.pop();
        assert!(matches!(AudioTrack::from_bytes(&bytes), Err(TrackError::LengthMismatch { .. })));
        assert!(matches!(AudioTrack::from_bytes(&bytes[..20]), Err(TrackError::Malformed(_))));
    }
}
