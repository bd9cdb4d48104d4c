//! Quadratic Bayesian surprise gating for the dictionary updates.
//!
//! Under a quadratic error model, the surprise carried by frame `k+1` reduces
//! to the step in reprojection error `S2 = e_{k+1} - e_k`, with both errors
//! measured against the dictionary that coded the frames. A causal moving
//! average smooths the raw differences, and learning is enabled only while the
//! filtered surprise is strictly positive: rising error means the stream has
//! something the dictionary lacks, flat or falling error freezes Phi.
//!
//! The filter is evaluated after each frame's learning block, so the decision
//! recorded at frame `k` governs the dictionary update at frame `k+1`. The
//! filtered value starts at 1, which makes the first frame always learn.

use crate::dlsc::{encode, DlscError, EncoderState, SparseCode};
use crate::frame::Frame;
use std::collections::VecDeque;
use thiserror::Error;

pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum SurpriseError {
    #[error("non-finite reprojection error {value}")]
    NonFiniteError { value: f64 },
    #[error("window width must be at least 1")]
    ZeroWindow,
}

#[derive(Debug, Error)]
pub enum GatedStepError {
    #[error(transparent)]
    Coding(#[from] DlscError),
    #[error(transparent)]
    Surprise(#[from] SurpriseError),
}

/// Raw quadratic surprise between consecutive reprojection errors.
pub fn qbs_raw(e_curr: f64, e_prev: f64) -> f64 {
    debug_assert!(e_curr.is_finite() && e_prev.is_finite());
    debug_assert!(e_curr >= 0.0 && e_prev >= 0.0);
    e_curr - e_prev
}

/// Outcome of one filter update: the filtered surprise and the gate it
/// implies. `learn` is true exactly when `s2 > 0`; equality freezes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    s2: f64,
    learn: bool,
}

impl GateDecision {
    fn new(s2: f64) -> Self {
        GateDecision { s2, learn: s2 > 0.0 }
    }

    pub fn s2(&self) -> f64 {
        self.s2
    }

    pub fn learn(&self) -> bool {
        self.learn
    }
}

/// Causal moving-average filter over the raw surprise sequence.
#[derive(Debug, Clone)]
pub struct SurpriseState {
    window: VecDeque<f64>,
    width: usize,
    prev_error: Option<f64>,
    s2_filtered: f64,
}

impl SurpriseState {
    pub fn new(width: usize) -> Result<Self, SurpriseError> {
        if width == 0 {
            return Err(SurpriseError::ZeroWindow);
        }
        Ok(SurpriseState {
            window: VecDeque::with_capacity(width),
            width,
            prev_error: None,
            s2_filtered: 1.0,
        })
    }

    /// Feeds the reprojection error of the frame just coded. The first call
    /// only records the baseline and reports the initial surprise of 1, so a
    /// fresh stream always starts learning.
    pub fn qbs_update(&mut self, e_curr: f64) -> Result<GateDecision, SurpriseError> {
        if !e_curr.is_finite() || e_curr < 0.0 {
            return Err(SurpriseError::NonFiniteError { value: e_curr });
        }
        if let Some(prev) = self.prev_error {
            let raw = qbs_raw(e_curr, prev);
            if self.window.len() == self.width {
                self.window.pop_front();
            }
            self.window.push_back(raw);
            // The mean is recomputed from the stored values every time; no
            // running sum, so no accumulated drift.
            self.s2_filtered = self.window.iter().sum::<f64>() / self.window.len() as f64;
        }
        self.prev_error = Some(e_curr);
        Ok(GateDecision::new(self.s2_filtered))
    }

    /// The gate the next learning block must obey: the decision from the most
    /// recent update (or the optimistic initial value on a fresh filter).
    pub fn pending_learn(&self) -> bool {
        self.s2_filtered > 0.0
    }

    pub fn filtered(&self) -> f64 {
        self.s2_filtered
    }

    pub fn last_raw(&self) -> Option<f64> {
        self.window.back().copied()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

fn learning_step(
    enc: &mut EncoderState,
    sur: &mut SurpriseState,
    frame: &Frame,
    learn_now: bool,
) -> Result<(SparseCode, GateDecision), GatedStepError> {
    let code = encode(enc, frame)?;
    if learn_now {
        for _ in 0..enc.params().n_d {
            enc.dictionary_step_in_place(&code, frame)?;
        }
    }
    let e = enc.prev_error();
    let decision = sur.qbs_update(e)?;
    Ok((code, decision))
}

/// One full streaming step: encode the frame, apply the dictionary updates if
/// the gate from the previous step is open, then update the filter with this
/// frame's reprojection error. Returns the code and the decision that will
/// gate the next step.
pub fn gated_learning_step(
    enc: &mut EncoderState,
    sur: &mut SurpriseState,
    frame: &Frame,
) -> Result<(SparseCode, GateDecision), GatedStepError> {
    let learn_now = sur.pending_learn();
    learning_step(enc, sur, frame, learn_now)
}

/// Ablation twin of [`gated_learning_step`]: the dictionary update always
/// runs, but the surprise filter is still tracked so the decision it *would*
/// have taken stays observable.
pub fn ungated_learning_step(
    enc: &mut EncoderState,
    sur: &mut SurpriseState,
    frame: &Frame,
) -> Result<(SparseCode, GateDecision), GatedStepError> {
    learning_step(enc, sur, frame, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dlsc::DlscParams;
    use crate::frame::{Frame, PixelMode};
    use approx::assert_abs_diff_eq;

    fn feed(sur: &mut SurpriseState, errors: &[f64]) -> Vec<GateDecision> {
        errors.iter().map(|&e| sur.qbs_update(e).unwrap()).collect()
    }

    #[test]
    fn first_update_learns() {
        let mut sur = SurpriseState::new(5).unwrap();
        let d = sur.qbs_update(3.0).unwrap();
        assert_eq!(d.s2(), 1.0);
        assert!(d.learn());
        assert_eq!(sur.window_len(), 0);
    }

    #[test]
    fn constant_errors_close_the_gate() {
        let mut sur = SurpriseState::new(5).unwrap();
        let ds = feed(&mut sur, &[1.0; 6]);
        let last = ds.last().unwrap();
        assert_eq!(last.s2(), 0.0);
        assert!(!last.learn(), "zero surprise must freeze the dictionary");
    }

    #[test]
    fn linearly_rising_errors_keep_learning() {
        let mut sur = SurpriseState::new(5).unwrap();
        let ds = feed(&mut sur, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let last = ds.last().unwrap();
        assert_abs_diff_eq!(last.s2(), 1.0, epsilon = 1e-15);
        assert!(last.learn());
    }

    #[test]
    fn filter_matches_hand_computed_moving_average() {
        let errors = [4.0, 2.5, 2.5, 3.5, 1.0, 1.0, 6.0, 0.5];
        let width = 3;
        let mut sur = SurpriseState::new(width).unwrap();
        let ds = feed(&mut sur, &errors);
        let raws: Vec<f64> = errors.windows(2).map(|w| w[1] - w[0]).collect();
        for (k, d) in ds.iter().enumerate().skip(1) {
            let lo = (k - 1).saturating_sub(width - 1);
            let window = &raws[lo..k];
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            assert_abs_diff_eq!(d.s2(), mean, epsilon = 1e-12);
            assert_eq!(d.learn(), mean > 0.0);
        }
    }

    #[test]
    fn raw_surprise_is_antisymmetric() {
        for (a, b) in [(0.0, 1.0), (2.5, 2.5), (7.0, 0.25)] {
            assert_eq!(qbs_raw(a, b), -qbs_raw(b, a));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(SurpriseState::new(0).is_err());
        let mut sur = SurpriseState::new(3).unwrap();
        assert!(sur.qbs_update(f64::NAN).is_err());
        assert!(sur.qbs_update(-1.0).is_err());
        assert!(sur.qbs_update(0.5).is_ok());
    }

    fn static_frame(n: usize, id: u64) -> Frame {
        let pixels: Vec<f64> = (0..n).map(|i| 0.2 + 0.6 * ((i * 37 % 101) as f64 / 101.0)).collect();
        Frame::new(id, id as f64 * 0.1, n as u32, 1, PixelMode::Gray, pixels).unwrap()
    }

    #[test]
    fn closed_gate_leaves_dictionary_bit_identical() {
        let params = DlscParams { n_atoms: 4, sigma_w: 0.05, ..Default::default() };
        let mut enc = EncoderState::new(24, params, 1).unwrap();
        let mut sur = SurpriseState::new(5).unwrap();
        let mut closed_seen = 0;
        for id in 0..120 {
            let frame = static_frame(24, id);
            let gate_was_open = sur.pending_learn();
            let before = (!gate_was_open).then(|| enc.dictionary().clone());
            let (_, _) = gated_learning_step(&mut enc, &mut sur, &frame).unwrap();
            if let Some(before) = before {
                assert_eq!(before.atoms(), enc.dictionary().atoms());
                closed_seen += 1;
            }
        }
        assert!(closed_seen > 0, "a static stream must eventually close the gate");
    }

    #[test]
    fn static_stream_gate_stays_closed_once_converged() {
        let params = DlscParams { n_atoms: 4, sigma_w: 0.05, ..Default::default() };
        let mut enc = EncoderState::new(24, params, 1).unwrap();
        let mut sur = SurpriseState::new(5).unwrap();
        let mut decisions = Vec::new();
        for id in 0..150 {
            let frame = static_frame(24, id);
            let (_, d) = gated_learning_step(&mut enc, &mut sur, &frame).unwrap();
            decisions.push(d.learn());
        }
        let first_closed = decisions.iter().position(|l| !l).expect("gate never closed");
        assert!(
            decisions[first_closed..].iter().filter(|&&l| l).count() <= 2,
            "gate should stay (almost) closed on a static stream"
        );
    }

    #[test]
    fn open_gate_count_is_independent_of_stream_length() {
        let count_open = |total: usize| {
            let params = DlscParams { n_atoms: 4, sigma_w: 0.05, ..Default::default() };
            let mut enc = EncoderState::new(24, params, 1).unwrap();
            let mut sur = SurpriseState::new(5).unwrap();
            let mut open = 0;
            for id in 0..total {
                let frame = static_frame(24, id as u64);
                if sur.pending_learn() {
                    open += 1;
                }
                gated_learning_step(&mut enc, &mut sur, &frame).unwrap();
            }
            open
        };
        assert_eq!(count_open(100), count_open(300));
    }

    #[test]
    fn scene_change_reopens_the_gate() {
        let params = DlscParams { n_atoms: 4, sigma_w: 0.05, ..Default::default() };
        let mut enc = EncoderState::new(24, params, 1).unwrap();
        let mut sur = SurpriseState::new(5).unwrap();
        for id in 0..100 {
            gated_learning_step(&mut enc, &mut sur, &static_frame(24, id)).unwrap();
        }
        assert!(!sur.pending_learn(), "gate open after convergence on scene A");
        let other: Vec<f64> = (0..24).map(|i| 0.1 + 0.8 * ((i * 53 % 97) as f64 / 97.0)).collect();
        let mut reopened = false;
        for id in 100..110 {
            let frame = Frame::new(id, id as f64 * 0.1, 24, 1, PixelMode::Gray, other.clone()).unwrap();
            let (_, d) = gated_learning_step(&mut enc, &mut sur, &frame).unwrap();
            reopened |= d.learn();
        }
        assert!(reopened, "a scene change must reopen the gate");
    }
}
