//! Run metrics of the streaming pipeline.
//!
//! Times are integer microseconds so simulated-clock results are exact.
//! For a stage, RTF is its total busy time over the generated media
//! duration and FFD is the busy time of its first chunk. The end-to-end
//! FFD is when the first decoded chunk completes, and the overall latency
//! adds one input chunk duration to it.

use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageMetrics {
    /// Busy time per chunk.
    pub busy_us: Vec<u64>,
    /// Completion time per chunk since the stream started.
    pub done_us: Vec<u64>,
}

impl StageMetrics {
    pub fn new(busy_us: Vec<u64>, done_us: Vec<u64>) -> Self {
        Self { busy_us, done_us }
    }

    pub fn total_busy_us(&self) -> u64 {
        self.busy_us.iter().sum()
    }

    pub fn ffd_us(&self) -> u64 {
        self.busy_us.first().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub chunks: usize,
    pub requested_chunks: usize,
    pub chunk_seconds: f64,
    pub denoise: StageMetrics,
    pub decode: StageMetrics,
    pub max_position: usize,
    /// Chunk passes, excluding the reference prefill.
    pub forwards: usize,
    pub prefill_forwards: usize,
}

fn secs(us: u64) -> f64 {
    us as f64 / 1e6
}

impl RunMetrics {
    pub fn chunk_us(&self) -> u64 {
        (self.chunk_seconds * 1e6).round() as u64
    }

    pub fn media_seconds(&self) -> f64 {
        self.chunks as f64 * self.chunk_seconds
    }

    /// True when the audio ran out before the requested chunk count.
    pub fn stopped_early(&self) -> bool {
        self.chunks < self.requested_chunks
    }

    pub fn denoise_rtf(&self) -> f64 {
        secs(self.denoise.total_busy_us()) / self.media_seconds()
    }

    pub fn decode_rtf(&self) -> f64 {
        secs(self.decode.total_busy_us()) / self.media_seconds()
    }

    pub fn ffd_us(&self) -> u64 {
        self.decode.done_us.first().copied().unwrap_or(0)
    }

    pub fn latency_us(&self) -> u64 {
        self.ffd_us() + self.chunk_us()
    }

    /// Every stage keeps up with the input rate.
    pub fn sustains_real_time(&self) -> bool {
        self.denoise_rtf() < 1.0 && self.decode_rtf() < 1.0
    }

    /// `metric,value` rows.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let rows: [(&str, String); 15] = [
            ("chunks", self.chunks.to_string()),
            ("stopped_early", self.stopped_early().to_string()),
            ("media_s", format!("{:.6}", self.media_seconds())),
            ("denoise_busy_s", format!("{:.6}", secs(self.denoise.total_busy_us()))),
            ("denoise_rtf", format!("{:.6}", self.denoise_rtf())),
            ("denoise_ffd_s", format!("{:.6}", secs(self.denoise.ffd_us()))),
            ("decode_busy_s", format!("{:.6}", secs(self.decode.total_busy_us()))),
            ("decode_rtf", format!("{:.6}", self.decode_rtf())),
            ("decode_ffd_s", format!("{:.6}", secs(self.decode.ffd_us()))),
            ("ffd_s", format!("{:.6}", secs(self.ffd_us()))),
            ("latency_s", format!("{:.6}", secs(self.latency_us()))),
            ("real_time", self.sustains_real_time().to_string()),
            ("max_position", self.max_position.to_string()),
            ("forwards", self.forwards.to_string()),
            ("prefill_forwards", self.prefill_forwards.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    /// One row per chunk.
    pub fn chunks_csv(&self) -> String {
        let mut s = String::from("chunk,denoise_busy_us,denoise_done_us,decode_busy_us,decode_done_us\n");
        for i in 0..self.chunks {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                i + 1,
                self.denoise.busy_us[i],
                self.denoise.done_us[i],
                self.decode.busy_us[i],
                self.decode.done_us[i]
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunMetrics {
        RunMetrics {
            chunks: 2,
            requested_chunks: 3,
            chunk_seconds: 0.5,
            denoise: StageMetrics::new(vec![100_000, 200_000], vec![100_000, 300_000]),
            decode: StageMetrics::new(vec![50_000, 50_000], vec![150_000, 350_000]),
            max_position: 4,
            forwards: 6,
            prefill_forwards: 1,
        }
    }

    #[test]
    fn derived_values() {
        let m = sample();
        assert!((m.denoise_rtf() - 0.3).abs() < 1e-12);
        assert!((m.decode_rtf() - 0.1).abs() < 1e-12);
        assert_eq!(m.ffd_us(), 150_000);
        assert_eq!(m.latency_us(), 650_000);
        assert!(m.stopped_early());
        assert!(m.sustains_real_time());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let m = sample();
        let s = m.summary_csv();
        assert!(s.starts_with("metric,value\n"));
        assert!(s.contains("latency_s,0.650000\n"));
        let c = m.chunks_csv();
        assert_eq!(c.lines().count(), 3);
    }
}
