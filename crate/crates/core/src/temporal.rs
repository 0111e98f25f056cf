//! Time features: cyclic clock encoding, inter-utterance delay, cumulative
//! time and affective magnitude.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::annotate::{AnnotatedRecord, EmotionVector};
use crate::error::{Error, Result};
use crate::ingest::Timestamp;

pub const MIN_DELAY: f64 = 1.0;
pub const MAX_DELAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CyclicEncoding {
    pub sin_h: f64,
    pub cos_h: f64,
    pub sin_m: f64,
    pub cos_m: f64,
    pub sin_s: f64,
    pub cos_s: f64,
}

impl CyclicEncoding {
    pub fn to_array(&self) -> [f64; 6] {
        [self.sin_h, self.cos_h, self.sin_m, self.cos_m, self.sin_s, self.cos_s]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        CyclicEncoding {
            sin_h: a[0],
            cos_h: a[1],
            sin_m: a[2],
            cos_m: a[3],
            sin_s: a[4],
            cos_s: a[5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalRow {
    pub tau: f64,
    pub t_tilde: f64,
    pub delta_mag: f64,
    pub cyclic: CyclicEncoding,
}

pub fn cyclic_transform(t: &Timestamp) -> CyclicEncoding {
    let h = TAU * f64::from(t.hh) / 24.0;
    let m = TAU * f64::from(t.mm) / 60.0;
    let s = TAU * f64::from(t.ss) / 60.0;
    CyclicEncoding {
        sin_h: h.sin(),
        cos_h: h.cos(),
        sin_m: m.sin(),
        cos_m: m.cos(),
        sin_s: s.sin(),
        cos_s: s.cos(),
    }
}

/// Delay in seconds between consecutive timestamps: 0 for the first, then
/// the absolute epoch-second gap clamped to `[MIN_DELAY, MAX_DELAY]`.
///
/// Delays are computed from raw timestamps, so a cyclic encoding cannot be
/// passed here:
///
/// ```compile_fail
/// use affectflow::temporal::{compute_delay, cyclic_transform};
/// let t: affectflow::ingest::Timestamp = "2020:01:01:00:00:00".parse().unwrap();
/// let enc = vec![cyclic_transform(&t)];
/// compute_delay(&enc);
/// ```
pub fn compute_delay(timestamps: &[Timestamp]) -> Vec<f64> {
    let mut taus = Vec::with_capacity(timestamps.len());
    for (i, t) in timestamps.iter().enumerate() {
        if i == 0 {
            taus.push(0.0);
        } else {
            let gap = (t.epoch_seconds() - timestamps[i - 1].epoch_seconds()).abs() as f64;
            taus.push(gap.clamp(MIN_DELAY, MAX_DELAY));
        }
    }
    taus
}

/// The literal seconds-field difference `|ss_t - ss_{t-1}|`, kept for
/// comparison with [`compute_delay`].
pub fn second_field_delay(timestamps: &[Timestamp]) -> Vec<f64> {
    std::iter::once(0.0)
        .chain(
            timestamps
                .windows(2)
                .map(|w| (f64::from(w[1].ss) - f64::from(w[0].ss)).abs()),
        )
        .take(timestamps.len())
        .collect()
}

pub fn cumulative_time(taus: &[f64]) -> Vec<f64> {
    taus.iter()
        .scan(0.0, |acc, tau| {
            *acc += tau;
            Some(*acc)
        })
        .collect()
}

/// L1 distance between consecutive emotion vectors; the first entry is 0.
pub fn affective_magnitude(emotions: &[EmotionVector]) -> Vec<f64> {
    let mut out = Vec::with_capacity(emotions.len());
    for (i, e) in emotions.iter().enumerate() {
        if i == 0 {
            out.push(0.0);
        } else {
            let prev = &emotions[i - 1];
            out.push(e.0.iter().zip(prev.0).map(|(a, b)| (a - b).abs()).sum());
        }
    }
    out
}

/// Recombines a (sin, cos) pair into an angle in `(-pi, pi]`.
pub fn arctan2_recombine(sin_v: f64, cos_v: f64) -> Result<f64> {
    if sin_v == 0.0 && cos_v == 0.0 {
        return Err(Error::domain("arctan2 of (0, 0) is undefined"));
    }
    let a = sin_v.atan2(cos_v);
    // atan2(-0.0, negative) yields -pi
    Ok(if a <= -PI { PI } else { a })
}

/// Delay, cumulative time, affective magnitude and cyclic encoding for a
/// chronologically sorted run of annotated records.
pub fn build_temporal_rows(records: &[AnnotatedRecord]) -> Result<Vec<TemporalRow>> {
    for (i, w) in records.windows(2).enumerate() {
        if w[1].record.timestamp.epoch_seconds() < w[0].record.timestamp.epoch_seconds() {
            return Err(Error::Ordering {
                conversation_id: w[1].record.conversation_id.clone(),
                index: i + 1,
            });
        }
    }
    let timestamps: Vec<Timestamp> = records.iter().map(|r| r.record.timestamp).collect();
    let taus = compute_delay(&timestamps);
    if log::log_enabled!(log::Level::Trace) {
        log::trace!("second-field delays: {:?}", second_field_delay(&timestamps));
    }
    let t_tilde = cumulative_time(&taus);
    let emotions: Vec<EmotionVector> = records.iter().map(|r| r.emotion).collect();
    let deltas = affective_magnitude(&emotions);

    Ok(timestamps
        .iter()
        .enumerate()
        .map(|(i, t)| TemporalRow {
            tau: taus[i],
            t_tilde: t_tilde[i],
            delta_mag: deltas[i],
            cyclic: cyclic_transform(t),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::UtteranceRecord;
    use proptest::prelude::*;

    fn ts(s: &str) -> Timestamp {
        s.parse().unwrap()
    }

    fn annotated(t: &str, e: EmotionVector) -> AnnotatedRecord {
        AnnotatedRecord {
            record: UtteranceRecord {
                timestamp: ts(t),
                conversation_id: "c".into(),
                speaker_id: "s".into(),
                text: "text".into(),
                is_noise: false,
            },
            emotion: e,
        }
    }

    #[test]
    fn cyclic_axis_cases() {
        let six = cyclic_transform(&ts("2020:01:01:06:00:00"));
        assert!((six.sin_h - 1.0).abs() < 1e-15 && six.cos_h.abs() < 1e-15);

        let zero = cyclic_transform(&ts("2020:01:01:00:00:00"));
        assert_eq!(zero.to_array(), [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);

        let half = cyclic_transform(&ts("2020:01:01:00:30:00"));
        assert!(half.sin_m.abs() < 1e-15 && (half.cos_m + 1.0).abs() < 1e-15);
    }

    #[test]
    fn delay_examples() {
        let t = [ts("2020:01:01:12:00:00"), ts("2020:01:01:12:00:19")];
        assert_eq!(compute_delay(&t), [0.0, 19.0]);
        assert_eq!(compute_delay(&t[..1]), [0.0]);
        let dup = [ts("2020:01:01:12:00:00"), ts("2020:01:01:12:00:00")];
        assert_eq!(compute_delay(&dup), [0.0, 1.0]);
        let far = [ts("2020:01:01:12:00:00"), ts("2020:01:05:12:00:00")];
        assert_eq!(compute_delay(&far), [0.0, MAX_DELAY]);
        assert!(compute_delay(&[]).is_empty());
    }

    #[test]
    fn delay_crosses_midnight() {
        let t = [ts("2020:01:01:23:59:50"), ts("2020:01:02:00:00:10")];
        assert_eq!(compute_delay(&t), [0.0, 20.0]);
        // the literal seconds-field reading disagrees
        assert_eq!(second_field_delay(&t), [0.0, 40.0]);
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(cumulative_time(&[0.0, 5.0, 3.0]), [0.0, 5.0, 8.0]);
        assert_eq!(cumulative_time(&[0.0]), [0.0]);
        let t = cumulative_time(&[0.0, 1.0, 1.0, 1.0]);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn magnitude_examples() {
        let a = EmotionVector([0.2, 0.1, 0.3, 0.2, 0.1, 0.1]);
        let b = EmotionVector([0.1, 0.2, 0.3, 0.2, 0.1, 0.1]);
        let d = affective_magnitude(&[a, a, b]);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 0.0);
        assert!((d[2] - 0.2).abs() < 1e-15);
        let opposite = affective_magnitude(&[EmotionVector::one_hot(0), EmotionVector::one_hot(5)]);
        assert_eq!(opposite[1], 2.0);
    }

    #[test]
    fn arctan2_axis_cases() {
        assert!((arctan2_recombine(1.0, 0.0).unwrap() - PI / 2.0).abs() < 1e-15);
        assert_eq!(arctan2_recombine(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(arctan2_recombine(-0.0, -1.0).unwrap(), PI);
        assert!(arctan2_recombine(0.0, 0.0).is_err());
    }

    #[test]
    fn round_trip_every_clock_value() {
        // angle 2*pi*k/n reduced into (-pi, pi]
        let reduce = |a: f64| if a > PI { a - TAU } else { a };
        for hh in 0..24 {
            let c = cyclic_transform(&Timestamp::new(2020, 1, 1, hh, 0, 0).unwrap());
            let got = arctan2_recombine(c.sin_h, c.cos_h).unwrap();
            let want = reduce(TAU * f64::from(hh) / 24.0);
            assert!((got - want).abs() < 1e-9, "hh={hh}: {got} vs {want}");
        }
        for v in 0..60 {
            let c = cyclic_transform(&Timestamp::new(2020, 1, 1, 0, v, v).unwrap());
            let want = reduce(TAU * f64::from(v) / 60.0);
            assert!((arctan2_recombine(c.sin_m, c.cos_m).unwrap() - want).abs() < 1e-9);
            assert!((arctan2_recombine(c.sin_s, c.cos_s).unwrap() - want).abs() < 1e-9);
        }
        let c = cyclic_transform(&Timestamp::new(2020, 1, 1, 17, 0, 0).unwrap());
        let got = arctan2_recombine(c.sin_h, c.cos_h).unwrap();
        assert!((got - (TAU * 17.0 / 24.0 - TAU)).abs() < 1e-9);
    }

    #[test]
    fn temporal_rows_compose() {
        let rows = build_temporal_rows(&[
            annotated("2020:01:01:10:00:00", EmotionVector::one_hot(0)),
            annotated("2020:01:01:10:00:07", EmotionVector::one_hot(1)),
        ])
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].tau, rows[0].delta_mag, rows[0].t_tilde), (0.0, 0.0, 0.0));
        assert_eq!((rows[1].tau, rows[1].t_tilde, rows[1].delta_mag), (7.0, 7.0, 2.0));

        let single = build_temporal_rows(&[annotated("2020:01:01:10:00:00", EmotionVector::uniform())])
            .unwrap();
        assert_eq!((single[0].tau, single[0].delta_mag, single[0].t_tilde), (0.0, 0.0, 0.0));

        let err = build_temporal_rows(&[
            annotated("2020:01:01:10:00:07", EmotionVector::uniform()),
            annotated("2020:01:01:10:00:00", EmotionVector::uniform()),
        ]);
        assert!(matches!(err, Err(Error::Ordering { index: 1, .. })));
    }

    fn simplex() -> impl Strategy<Value = EmotionVector> {
        prop::array::uniform6(0.001f64..1.0).prop_map(|raw| {
            let s: f64 = raw.iter().sum();
            EmotionVector(raw.map(|v| v / s))
        })
    }

    proptest! {
        #[test]
        fn row_invariants(
            gaps in prop::collection::vec(0i64..200_000, 1..40),
            emotions in prop::collection::vec(simplex(), 40),
        ) {
            let start = ts("2020:03:01:00:00:00").epoch_seconds();
            let mut t = start;
            let mut recs = Vec::new();
            for (i, g) in gaps.iter().enumerate() {
                t += g;
                let dt = chrono::DateTime::from_timestamp(t, 0).unwrap().naive_utc();
                let s = dt.format("%Y:%m:%d:%H:%M:%S").to_string();
                recs.push(annotated(&s, emotions[i]));
            }
            let rows = build_temporal_rows(&recs).unwrap();
            prop_assert_eq!(rows[0].tau, 0.0);
            prop_assert_eq!(rows[0].delta_mag, 0.0);
            for (i, r) in rows.iter().enumerate() {
                let c = r.cyclic;
                for (s, co) in [(c.sin_h, c.cos_h), (c.sin_m, c.cos_m), (c.sin_s, c.cos_s)] {
                    prop_assert!((s * s + co * co - 1.0).abs() < 1e-9);
                }
                prop_assert!((0.0..=2.0 + 1e-12).contains(&r.delta_mag));
                prop_assert!(r.tau == 0.0 || (MIN_DELAY..=MAX_DELAY).contains(&r.tau));
                if i > 0 {
                    prop_assert!(r.t_tilde > rows[i - 1].t_tilde);
                }
            }
        }
    }
}
