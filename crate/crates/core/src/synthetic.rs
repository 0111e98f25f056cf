//! Seeded synthetic conversations whose emotions follow a sinusoid in the
//! minute-of-hour, for convergence experiments.

use std::f64::consts::PI;

use rand::Rng;

use crate::annotate::{AnnotatedRecord, EmotionVector};
use crate::ingest::{Timestamp, UtteranceRecord};
use crate::seed::component_rng;

/// Emotion at a clock time: joy and sadness trade off around 0.48 with
/// amplitude 0.4 over each hour; the other four stay at 0.01.
pub fn sinusoid_emotion(ts: &Timestamp) -> EmotionVector {
    let phase = 2.0 * PI * f64::from(ts.mm * 60 + ts.ss) / 3600.0;
    let s = 0.4 * phase.sin();
    EmotionVector([0.48 + s, 0.48 - s, 0.01, 0.01, 0.01, 0.01])
}

/// `n_segments` conversations of `n_knots` utterances, 30-120 s apart,
/// each starting at a random time of day.
pub fn sinusoid_segments(n_segments: usize, n_knots: usize, seed: u64) -> Vec<Vec<AnnotatedRecord>> {
    let mut rng = component_rng(seed, "synthetic.sinusoid");
    (0..n_segments)
        .map(|s| {
            let mut sec: u32 = rng.random_range(0..86_400 - 4 * 3600);
            (0..n_knots)
                .map(|i| {
                    if i > 0 {
                        sec += rng.random_range(30..=120);
                    }
                    let ts = Timestamp::new(2024, 1, 1 + s as u32 % 28, sec / 3600, (sec / 60) % 60, sec % 60)
                        .expect("generated clock time is valid");
                    AnnotatedRecord {
                        record: UtteranceRecord {
                            timestamp: ts,
                            conversation_id: format!("synthetic-{s}"),
                            speaker_id: format!("speaker-{}", i % 2),
                            text: format!("utterance {i}"),
                            is_noise: false,
                        },
                        emotion: sinusoid_emotion(&ts),
                    }
                })
                .collect()
        })
        .collect()
}
