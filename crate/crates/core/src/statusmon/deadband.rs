//! The significance filter, generic over the numeric type of a field.

use std::fmt::Debug;

use num_traits::Num;
use serde::{Deserialize, Serialize};

/// Numeric types a deadband can be expressed in.
pub trait Scalar: Num + PartialOrd + Clone + Debug {}

impl<T: Num + PartialOrd + Clone + Debug> Scalar for T {}

/// One sampled field value.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample<T> {
    Number(T),
    Text(String),
    Bool(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportReason {
    Initial,
    Change,
}

/// Poller bookkeeping for one monitor.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorState<T> {
    /// Absolute deadband in the field's units.
    pub precision: T,
    /// Value carried by the most recent emitted report.
    pub last_reported: Option<Sample<T>>,
    pub active: bool,
}

impl<T: Scalar> MonitorState<T> {
    pub fn new(precision: T) -> Self {
        MonitorState {
            precision,
            last_reported: None,
            active: true,
        }
    }
}

fn abs_diff<T: Scalar>(a: &T, b: &T) -> T {
    if a >= b {
        a.clone() - b.clone()
    } else {
        b.clone() - a.clone()
    }
}

/// True if `sample` is significant relative to `last` at `precision`.
///
/// Numbers: a change with `|sample - last| >= precision`, so precision 0
/// reports every change. Everything else: inequality.
pub fn significant<T: Scalar>(last: &Sample<T>, sample: &Sample<T>, precision: &T) -> bool {
    match (last, sample) {
        (Sample::Number(l), Sample::Number(s)) => s != l && abs_diff(s, l) >= *precision,
        (l, s) => l != s,
    }
}

/// One poll of a monitor. Pure: returns the successor state and, when the
/// sample is reported, the reason. The first sample is always reported.
pub fn poll_step<T: Scalar>(state: &MonitorState<T>, sample: Sample<T>) -> (MonitorState<T>, Option<ReportReason>) {
    if !state.active {
        return (state.clone(), None);
    }
    let reason = match &state.last_reported {
        None => Some(ReportReason::Initial),
        Some(last) if significant(last, &sample, &state.precision) => Some(ReportReason::Change),
        Some(_) => None,
    };
    let next = match reason {
        Some(_) => MonitorState {
            last_reported: Some(sample),
            ..state.clone()
        },
        None => state.clone(),
    };
    (next, reason)
}

/// Runs `poll_step` over a whole sequence, returning the reported samples.
pub fn filter_sequence<T: Scalar>(precision: T, samples: &[Sample<T>]) -> Vec<(Sample<T>, ReportReason)> {
    let mut state = MonitorState::new(precision);
    let mut out = Vec::new();
    for s in samples {
        let (next, reason) = poll_step(&state, s.clone());
        if let Some(r) = reason {
            out.push((s.clone(), r));
        }
        state = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn nums<T: Clone>(v: &[T]) -> Vec<Sample<T>> {
        v.iter().cloned().map(Sample::Number).collect()
    }

    fn values<T: Clone>(out: &[(Sample<T>, ReportReason)]) -> Vec<T> {
        out.iter()
            .map(|(s, _)| match s {
                Sample::Number(n) => n.clone(),
                _ => unreachable!(),
            })
            .collect()
    }

    #[test]
    fn deadband_against_last_reported() {
        // 0 initial; 0.3 and 0.6 measured from 0; 0.7 from 0.6; 1.3 from 0.6.
        let out = filter_sequence(0.5, &nums(&[0.0, 0.3, 0.6, 0.7, 1.3]));
        assert_eq!(values(&out), [0.0, 0.6, 1.3]);
        assert_eq!(out[0].1, ReportReason::Initial);
        assert!(out[1..].iter().all(|(_, r)| *r == ReportReason::Change));
    }

    #[test]
    fn exact_rationals_hit_the_boundary() {
        let r = |n, d| Ratio::new(n, d);
        let out = filter_sequence(r(1, 2), &nums(&[r(0, 1), r(3, 10), r(1, 2), r(7, 10), r(1, 1)]));
        assert_eq!(values(&out), [r(0, 1), r(1, 2), r(1, 1)]);
    }

    #[test]
    fn zero_precision_reports_every_change() {
        let out = filter_sequence(0.0f32, &nums(&[1.0, 1.0, 2.0, 2.0, 1.5]));
        assert_eq!(values(&out), [1.0, 2.0, 1.5]);
    }

    #[test]
    fn constant_signal_reports_once() {
        let out = filter_sequence(0.1, &nums(&[4.0; 20]));
        assert_eq!(out.len(), 1);
        let out = filter_sequence(0i64, &nums(&[7i64; 5]));
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn slow_drift_is_not_absorbed() {
        let samples: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let out = filter_sequence(0.25, &nums(&samples));
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn text_and_bool_report_on_inequality() {
        let s = vec![
            Sample::<f64>::Text("closed".into()),
            Sample::Text("closed".into()),
            Sample::Text("transit".into()),
            Sample::Bool(true),
            Sample::Bool(true),
            Sample::Bool(false),
        ];
        assert_eq!(filter_sequence(100.0, &s).len(), 4);
    }

    #[test]
    fn inactive_monitor_is_silent() {
        let mut st = MonitorState::new(0.0);
        st.active = false;
        assert_eq!(poll_step(&st, Sample::Number(1.0)).1, None);
    }
}
