//! Loop-closure matching over sparse-code templates.
//!
//! Codes are down-sampled into a template store on a fixed wall-clock period
//! and compared by cosine similarity. A query returns the single most similar
//! template outside a temporal exclusion window, and only if that best
//! similarity reaches the acceptance threshold `mu` — argmax first, threshold
//! second, so there is exactly one candidate per query.

use crate::dlsc::SparseCode;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("cosine similarity is undefined for a zero-norm code")]
    ZeroNorm,
    #[error("code length {actual} does not match stored template length {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid parameter {name} = {value}")]
    InvalidParam { name: &'static str, value: f64 },
}

/// `mu` is the acceptance threshold on cosine similarity. The useful range is
/// `(0, 1]`; values above 1 are accepted as an explicit off-switch, since no
/// pair of codes can reach them.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams {
    pub mu: f64,
    pub sample_period: f64,
    pub exclusion_window: f64,
}

impl Default for MatcherParams {
    fn default() -> Self {
        MatcherParams { mu: 0.9, sample_period: 0.1, exclusion_window: 10.0 }
    }
}

impl MatcherParams {
    pub fn validate(&self) -> Result<(), MatcherError> {
        if !self.mu.is_finite() || self.mu <= 0.0 {
            return Err(MatcherError::InvalidParam { name: "mu", value: self.mu });
        }
        if !self.sample_period.is_finite() || self.sample_period <= 0.0 {
            return Err(MatcherError::InvalidParam {
                name: "sample_period",
                value: self.sample_period,
            });
        }
        if !self.exclusion_window.is_finite() || self.exclusion_window < 0.0 {
            return Err(MatcherError::InvalidParam {
                name: "exclusion_window",
                value: self.exclusion_window,
            });
        }
        Ok(())
    }
}

/// A stored view: the code that described it, the experience-map node active
/// when it was captured, and when it was captured.
#[derive(Debug, Clone)]
pub struct Template {
    pub template_id: u64,
    pub experience_id: u64,
    pub timestamp: f64,
    pub code: SparseCode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopMatch {
    pub template_id: u64,
    pub similarity: f64,
}

/// Cosine similarity of two codes, clamped into `[-1, 1]` against rounding.
pub fn cosine_similarity(a: &SparseCode, b: &SparseCode) -> Result<f64, MatcherError> {
    if a.len() != b.len() {
        return Err(MatcherError::LengthMismatch { expected: a.len(), actual: b.len() });
    }
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(MatcherError::ZeroNorm);
    }
    let dot: f64 = a.values().iter().zip(b.values().iter()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Default)]
pub struct TemplateStore {
    templates: Vec<Template>,
    last_sample_time: Option<f64>,
}

impl TemplateStore {
    pub fn new() -> Self {
        TemplateStore::default()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    /// Template ids are assigned sequentially, so lookup is an index.
    pub fn get(&self, template_id: u64) -> Option<&Template> {
        self.templates.get(template_id as usize)
    }

    /// Whether the sampling clock has advanced a full period since the last
    /// stored template. A fresh store is always due.
    pub fn due(&self, timestamp: f64, params: &MatcherParams) -> bool {
        self.last_sample_time
            .map_or(true, |last| timestamp - last >= params.sample_period)
    }

    /// Stores the code as a new template if the sampling period has elapsed.
    /// Zero-norm codes are skipped with a warning and do not advance the
    /// sampling clock. Returns whether a template was stored.
    pub fn maybe_sample(
        &mut self,
        code: &SparseCode,
        timestamp: f64,
        experience_id: u64,
        params: &MatcherParams,
    ) -> bool {
        if !self.due(timestamp, params) {
            return false;
        }
        if code.l2_norm() == 0.0 {
            log::warn!("skipping zero-norm code at t={timestamp}: no template stored");
            return false;
        }
        self.templates.push(Template {
            template_id: self.templates.len() as u64,
            experience_id,
            timestamp,
            code: code.clone(),
        });
        self.last_sample_time = Some(timestamp);
        true
    }

    /// Scans every template strictly older than the exclusion window, takes
    /// the most similar (ties keep the oldest), and accepts it only if its
    /// similarity reaches `mu`. A zero-norm query never matches.
    pub fn find_loop_closure(
        &self,
        code: &SparseCode,
        timestamp: f64,
        params: &MatcherParams,
    ) -> Option<LoopMatch> {
        if code.l2_norm() == 0.0 {
            log::warn!("zero-norm query at t={timestamp}: loop closure skipped");
            return None;
        }
        let mut best: Option<LoopMatch> = None;
        for t in &self.templates {
            if timestamp - t.timestamp <= params.exclusion_window {
                continue;
            }
            let similarity = cosine_similarity(code, &t.code)
                .expect("stored templates have non-zero, matching-length codes");
            if best.map_or(true, |b| similarity > b.similarity) {
                best = Some(LoopMatch { template_id: t.template_id, similarity });
            }
        }
        best.filter(|b| b.similarity >= params.mu)
    }

    /// Writes `templates.csv`: id, owning experience, capture time, then the
    /// full code, one column per atom.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let code_len = self.templates.first().map_or(0, |t| t.code.len());
        write!(w, "template_id,experience_id,timestamp")?;
        for j in 0..code_len {
            write!(w, ",code_{j}")?;
        }
        writeln!(w)?;
        for t in &self.templates {
            write!(w, "{},{},{}", t.template_id, t.experience_id, t.timestamp)?;
            for v in t.code.values() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    fn code(values: &[f64]) -> SparseCode {
        SparseCode::from_values(Array1::from_vec(values.to_vec())).unwrap()
    }

    #[test]
    fn cosine_trivial_cases() {
        let a = code(&[1.0, 0.0, 0.0]);
        let b = code(&[0.0, 1.0, 0.0]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let neg = code(&[-2.0, 0.0, 0.0]);
        assert_eq!(cosine_similarity(&a, &neg).unwrap(), -1.0);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let a = code(&[0.3, -0.7, 0.2, 0.0]);
        let b = code(&[0.1, 0.4, -0.2, 0.6]);
        let s1 = cosine_similarity(&a, &b).unwrap();
        let scaled = code(&[0.3 * 7.5, -0.7 * 7.5, 0.2 * 7.5, 0.0]);
        let s2 = cosine_similarity(&scaled, &b).unwrap();
        assert_abs_diff_eq!(s1, s2, epsilon = 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        let a = code(&[1.0, 0.0]);
        let z = code(&[0.0, 0.0]);
        assert!(matches!(cosine_similarity(&a, &z), Err(MatcherError::ZeroNorm)));
        let c = code(&[1.0, 0.0, 0.0]);
        assert!(matches!(cosine_similarity(&a, &c), Err(MatcherError::LengthMismatch { .. })));
    }

    #[test]
    fn sampling_respects_period() {
        let params = MatcherParams::default();
        let mut store = TemplateStore::new();
        let c = code(&[1.0, 0.0]);
        assert!(store.maybe_sample(&c, 0.00, 0, &params), "first sample always stores");
        assert!(!store.maybe_sample(&c, 0.05, 1, &params));
        assert!(store.maybe_sample(&c, 0.10, 1, &params));
        assert_eq!(store.len(), 2);
        assert_eq!(store.get(1).unwrap().experience_id, 1);
    }

    #[test]
    fn zero_code_is_skipped_and_clock_not_advanced() {
        let params = MatcherParams::default();
        let mut store = TemplateStore::new();
        assert!(!store.maybe_sample(&code(&[0.0, 0.0]), 0.0, 0, &params));
        assert!(store.is_empty());
        assert!(store.maybe_sample(&code(&[1.0, 0.0]), 0.01, 0, &params));
    }

    #[test]
    fn query_on_empty_store_returns_none() {
        let store = TemplateStore::new();
        assert!(store.find_loop_closure(&code(&[1.0, 0.0]), 100.0, &MatcherParams::default()).is_none());
    }

    #[test]
    fn recent_templates_are_excluded() {
        let params = MatcherParams::default();
        let mut store = TemplateStore::new();
        let c = code(&[1.0, 0.0]);
        store.maybe_sample(&c, 0.0, 0, &params);
        // Identical code, but the template is 5 s old: inside the 10 s window.
        assert!(store.find_loop_closure(&c, 5.0, &params).is_none());
        // Exactly at the window boundary: still excluded (age must exceed it).
        assert!(store.find_loop_closure(&c, 10.0, &params).is_none());
        let m = store.find_loop_closure(&c, 10.1, &params).expect("old identical template matches");
        assert_eq!(m.template_id, 0);
        assert_eq!(m.similarity, 1.0);
    }

    #[test]
    fn argmax_wins_over_second_best() {
        let params = MatcherParams { mu: 0.5, ..Default::default() };
        let mut store = TemplateStore::new();
        store.maybe_sample(&code(&[1.0, 0.0, 0.0]), 0.0, 0, &params);
        store.maybe_sample(&code(&[1.0, 0.4, 0.0]), 0.2, 1, &params);
        let query = code(&[1.0, 0.39, 0.0]);
        let m = store.find_loop_closure(&query, 20.0, &params).unwrap();
        assert_eq!(m.template_id, 1);
    }

    #[test]
    fn threshold_applies_after_argmax() {
        let params = MatcherParams { mu: 0.99, ..Default::default() };
        let mut store = TemplateStore::new();
        store.maybe_sample(&code(&[1.0, 0.0]), 0.0, 0, &params);
        let query = code(&[1.0, 0.5]);
        assert!(store.find_loop_closure(&query, 20.0, &params).is_none());
    }

    #[test]
    fn mu_above_one_disables_matching() {
        let params = MatcherParams { mu: 1.0 + 1e-9, ..Default::default() };
        let mut store = TemplateStore::new();
        let c = code(&[1.0, 0.0]);
        store.maybe_sample(&c, 0.0, 0, &params);
        assert!(store.find_loop_closure(&c, 20.0, &params).is_none());
    }

    #[test]
    fn matches_brute_force_oracle() {
        let params = MatcherParams { mu: 0.2, exclusion_window: 3.0, sample_period: 0.5, ..Default::default() };
        let mut store = TemplateStore::new();
        let mut t = 0.0;
        let mut state = 88172645463325252u64;
        let mut rnd = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for i in 0..40 {
            let c = code(&[rnd(), rnd(), rnd(), rnd()]);
            store.maybe_sample(&c, t, i, &params);
            t += 0.5;
        }
        for _ in 0..25 {
            let query = code(&[rnd(), rnd(), rnd(), rnd()]);
            let got = store.find_loop_closure(&query, t, &params);
            let mut best: Option<(u64, f64)> = None;
            for tpl in store.templates() {
                if t - tpl.timestamp <= params.exclusion_window {
                    continue;
                }
                let s = cosine_similarity(&query, &tpl.code).unwrap();
                if best.map_or(true, |(_, bs)| s > bs) {
                    best = Some((tpl.template_id, s));
                }
            }
            let expect = best.filter(|(_, s)| *s >= params.mu);
            match (got, expect) {
                (None, None) => {}
                (Some(m), Some((id, s))) => {
                    assert_eq!(m.template_id, id);
                    assert_abs_diff_eq!(m.similarity, s, epsilon = 1e-15);
                }
                other => panic!("oracle disagreement: {other:?}"),
            }
        }
    }

    #[test]
    fn store_density_is_bounded_by_duration() {
        let params = MatcherParams::default();
        let mut store = TemplateStore::new();
        let c = code(&[1.0, 0.0]);
        let mut t = 0.0;
        // 10 Hz ticks for 30 s with a 0.1 s sampling period.
        for i in 0..300 {
            store.maybe_sample(&c, t, i, &params);
            t += 0.1;
        }
        let duration = 29.9;
        let bound = (duration / params.sample_period).floor() as usize + 1;
        assert!(store.len() <= bound, "{} templates over {duration} s", store.len());
    }

    #[test]
    fn csv_has_one_column_per_atom() {
        let params = MatcherParams::default();
        let mut store = TemplateStore::new();
        store.maybe_sample(&code(&[0.5, 0.0, -0.25]), 0.0, 7, &params);
        let mut buf = Vec::new();
        store.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "template_id,experience_id,timestamp,code_0,code_1,code_2");
        assert_eq!(lines.next().unwrap(), "0,7,0,0.5,0,-0.25");
    }
}
