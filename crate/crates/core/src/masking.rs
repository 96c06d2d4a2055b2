//! Per-client feature masks driven by the stability of first-layer weights.
//!
//! Every client keeps one mask logit per input feature plus exponential
//! moving estimates of the mean and variance of each first-layer weight.
//! Once per local epoch the estimates are refreshed; after the warm-up
//! epochs each logit moves by the client's mean feature variance minus
//! `alpha` times the feature's own variance. Features whose weights keep
//! drifting are pushed toward a closed gate, stable ones toward an open one.
//! Inputs are gated elementwise by `σ(m)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

/// How the per-element variances of one feature's weights collapse to a
/// single feature variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceReduction {
    #[default]
    Mean,
    Max,
    /// Euclidean norm of the element variances.
    Norm,
}

/// Hyper-parameters of the mask lifecycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSettings {
    /// Scaling factor applied to each feature's own variance.
    pub alpha: f64,
    /// EMA rate of the weight mean.
    pub beta: f64,
    /// EMA rate of the weight variance.
    pub delta: f64,
    /// Local epochs per round before masks start moving.
    pub e_init: usize,
    pub reduction: VarianceReduction,
}

impl Default for MaskSettings {
    fn default() -> Self {
        MaskSettings {
            alpha: 10.0,
            beta: 0.1,
            delta: 0.9,
            e_init: 5,
            reduction: VarianceReduction::Mean,
        }
    }
}

impl MaskSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!("beta must be in (0, 1], got {}", self.beta)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::invalid(format!("delta must be in (0, 1], got {}", self.delta)));
        }
        Ok(())
    }
}

/// Mask logits and weight statistics of one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    m: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    epochs_seen: usize,
    width: usize,
    settings: MaskSettings,
}

/// Input after elementwise gating.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedInput {
    pub z: Vec<f64>,
}

/// Result of [`MaskState::mask_update`].
#[derive(Clone, Debug, PartialEq)]
pub enum MaskUpdate {
    /// Per-feature logit increments that were applied.
    Applied(Vec<f64>),
    /// The warm-up gate was still closed; nothing changed.
    WarmUp,
}

impl MaskState {
    /// Masks at 1.0 and zeroed statistics for `features` inputs, each
    /// attached to `width` first-layer weights.
    pub fn new(features: usize, width: usize, settings: MaskSettings) -> Result<Self> {
        if features == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "mask dimensions must be positive, got {features} features × {width} weights"
            )));
        }
        settings.validate()?;
        Ok(MaskState {
            m: vec![1.0; features],
            u: vec![0.0; features * width],
            v: vec![0.0; features * width],
            epochs_seen: 0,
            width,
            settings,
        })
    }

    pub fn features(&self) -> usize {
        self.m.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn logits(&self) -> &[f64] {
        &self.m
    }

    pub fn mean(&self) -> &[f64] {
        &self.u
    }

    pub fn variance(&self) -> &[f64] {
        &self.v
    }

    pub fn epochs_seen(&self) -> usize {
        self.epochs_seen
    }

    pub fn settings(&self) -> &MaskSettings {
        &self.settings
    }

    /// `σ(m_i)` for every feature.
    pub fn gates(&self) -> Vec<f64> {
        self.m.iter().map(|&m| sigmoid(m)).collect()
    }

    /// Replaces the logits, e.g. with the server aggregate. Statistics stay.
    pub fn set_logits(&mut self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "set_logits",
                shapes: vec![vec![logits.len()], vec![self.m.len()]],
            });
        }
        self.m.copy_from_slice(logits);
        Ok(())
    }

    /// Restarts the warm-up counter for a new round of local training.
    pub fn begin_round(&mut self) {
        self.epochs_seen = 0;
    }

    /// One EMA step over the current first-layer weights, grouped by feature
    /// (`feature * width + unit`). Counts as one elapsed epoch.
    pub fn ema_update(&mut self, grouped_weights: &[f64]) -> Result<()> {
        if grouped_weights.len() != self.u.len() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                shapes: vec![vec![grouped_weights.len()], vec![self.u.len()]],
            });
        }
        let MaskSettings { beta, delta, .. } = self.settings;
        for ((u, v), &w) in self.u.iter_mut().zip(self.v.iter_mut()).zip(grouped_weights) {
            let u_old = *u;
            *u = beta * w + (1.0 - beta) * u_old;
            let dev = w - u_old;
            *v = delta * *v + (1.0 - delta) * dev * dev;
        }
        self.epochs_seen += 1;
        Ok(())
    }

    /// Variance of each feature's weights, reduced over its `width` entries.
    pub fn feature_variance(&self) -> Vec<f64> {
        self.v
            .chunks(self.width)
            .map(|chunk| match self.settings.reduction {
                VarianceReduction::Mean => chunk.iter().sum::<f64>() / chunk.len() as f64,
                VarianceReduction::Max => chunk.iter().cloned().fold(0.0, f64::max),
                VarianceReduction::Norm => chunk.iter().map(|x| x * x).sum::<f64>().sqrt(),
            })
            .collect()
    }

    /// Moves every logit by `mean variance − alpha · own variance`, once the
    /// warm-up epochs have elapsed.
    pub fn mask_update(&mut self) -> MaskUpdate {
        if self.epochs_seen <= self.settings.e_init {
            return MaskUpdate::WarmUp;
        }
        let deltas = mask_deltas(&self.feature_variance(), self.settings.alpha);
        self.m.iter_mut().zip(&deltas).for_each(|(m, d)| *m += d);
        MaskUpdate::Applied(deltas)
    }

    pub fn gate(&self, x: &[f64]) -> Result<GatedInput> {
        Ok(GatedInput { z: gate(&self.m, x)? })
    }
}

/// Logit increments for the given feature variances.
pub fn mask_deltas(feature_variance: &[f64], alpha: f64) -> Vec<f64> {
    if feature_variance.is_empty() {
        return Vec::new();
    }
    let mean = feature_variance.iter().sum::<f64>() / feature_variance.len() as f64;
    feature_variance.iter().map(|&v| mean - alpha * v).collect()
}

/// `z_i = σ(m_i)·x_i`.
pub fn gate(logits: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "gate",
            shapes: vec![vec![logits.len()], vec![x.len()]],
        });
    }
    Ok(logits.iter().zip(x).map(|(&m, &x)| sigmoid(m) * x).collect())
}

/// Gates every row of a row-major matrix whose width equals `logits.len()`.
pub fn gate_rows(logits: &[f64], rows: &[f64]) -> Result<Vec<f64>> {
    let j = logits.len();
    if j == 0 || !rows.len().is_multiple_of(j) {
        return Err(Error::ShapeMismatch {
            op: "gate_rows",
            shapes: vec![vec![j], vec![rows.len()]],
        });
    }
    let gates: Vec<f64> = logits.iter().map(|&m| sigmoid(m)).collect();
    Ok(rows
        .chunks(j)
        .flat_map(|row| row.iter().zip(&gates).map(|(x, g)| g * x))
        .collect())
}

/// Sample-weighted average of client mask logits, summed in entry order.
pub fn aggregate_masks(entries: &[(&[f64], usize)]) -> Result<Vec<f64>> {
    let Some((first, _)) = entries.first() else {
        return Err(Error::invalid("no masks to aggregate"));
    };
    let total: usize = entries.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::invalid("total sample count is zero"));
    }
    let mut out = vec![0.0; first.len()];
    for (mask, n) in entries {
        if mask.len() != out.len() {
            return Err(Error::ShapeMismatch {
                op: "aggregate_masks",
                shapes: vec![vec![mask.len()], vec![out.len()]],
            });
        }
        let weight = *n as f64 / total as f64;
        out.iter_mut().zip(mask.iter()).for_each(|(o, m)| *o += weight * m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(alpha: f64) -> MaskSettings {
        MaskSettings {
            alpha,
            ..MaskSettings::default()
        }
    }

    #[test]
    fn init_state() {
        let s = MaskState::new(3, 4, MaskSettings::default()).unwrap();
        assert_eq!(s.logits(), &[1.0; 3]);
        assert!(s.mean().iter().chain(s.variance()).all(|&x| x == 0.0));
        assert_eq!(s.variance().len(), 12);
        assert_eq!(s.epochs_seen(), 0);
        assert!((s.gates()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(MaskState::new(0, 4, MaskSettings::default()).is_err());
        assert!(MaskState::new(2, 4, MaskSettings { beta: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn ema_with_unit_beta_tracks_weights() {
        let mut s = MaskState::new(2, 1, MaskSettings { beta: 1.0, ..Default::default() }).unwrap();
        s.ema_update(&[0.4, -2.0]).unwrap();
        assert_eq!(s.mean(), &[0.4, -2.0]);
        assert!(s.ema_update(&[1.0]).is_err());
    }

    #[test]
    fn ema_zero_is_fixed_point() {
        let mut s = MaskState::new(2, 2, MaskSettings::default()).unwrap();
        for _ in 0..50 {
            s.ema_update(&[0.0; 4]).unwrap();
        }
        assert!(s.mean().iter().chain(s.variance()).all(|&x| x == 0.0));
    }

    #[test]
    fn ema_constant_weight_converges() {
        // Reference iteration of the two recurrences, written out separately.
        let (beta, delta, c) = (0.1, 0.9, 0.7);
        let (mut u, mut v) = (0.0f64, 0.0f64);
        let mut refs = Vec::new();
        for _ in 0..100 {
            let u_old = u;
            u = beta * c + (1.0 - beta) * u_old;
            v = delta * v + (1.0 - delta) * (c - u_old).powi(2);
            refs.push((u, v));
        }
        let mut s = MaskState::new(1, 1, MaskSettings::default()).unwrap();
        let mut prev_u = 0.0;
        let mut peak_v = 0.0f64;
        for (u_ref, v_ref) in &refs {
            s.ema_update(&[c]).unwrap();
            let (u, v) = (s.mean()[0], s.variance()[0]);
            assert!((u - u_ref).abs() < 1e-15 && (v - v_ref).abs() < 1e-15);
            assert!(u >= prev_u && u <= c);
            prev_u = u;
            peak_v = peak_v.max(v);
        }
        assert!(peak_v < c * c);
        assert!((prev_u - c).abs() < 1e-4);
        assert!(s.variance()[0] < 1e-3 * peak_v);
    }

    #[test]
    fn feature_variance_reductions() {
        let mut s = MaskState::new(2, 2, MaskSettings { beta: 1.0, delta: 1.0, ..Default::default() }).unwrap();
        s.v = vec![0.0, 2.0, 3.0, 4.0];
        assert_eq!(s.feature_variance(), vec![1.0, 3.5]);
        s.settings.reduction = VarianceReduction::Max;
        assert_eq!(s.feature_variance(), vec![2.0, 4.0]);
        s.settings.reduction = VarianceReduction::Norm;
        assert_eq!(s.feature_variance()[1], 5.0);
    }

    #[test]
    fn mask_update_hand_values() {
        let d = mask_deltas(&[0.1, 0.9], 1.0);
        assert!((d[0] - 0.4).abs() < 1e-15 && (d[1] + 0.4).abs() < 1e-15);
        let d = mask_deltas(&[0.1, 0.9], 10.0);
        assert!((d[0] + 0.5).abs() < 1e-12 && (d[1] + 8.5).abs() < 1e-12);
        assert_eq!(mask_deltas(&[0.3; 4], 1.0), vec![0.0; 4]);
    }

    #[test]
    fn mask_update_respects_warm_up() {
        let mut s = MaskState::new(2, 1, MaskSettings { e_init: 2, ..settings(1.0) }).unwrap();
        for _ in 0..2 {
            s.ema_update(&[0.0, 5.0]).unwrap();
            assert_eq!(s.mask_update(), MaskUpdate::WarmUp);
        }
        assert_eq!(s.logits(), &[1.0, 1.0]);
        s.ema_update(&[0.0, 5.0]).unwrap();
        match s.mask_update() {
            MaskUpdate::Applied(d) => {
                assert!(d[0] > 0.0 && d[1] < 0.0);
                assert!(d.iter().sum::<f64>().abs() < 1e-12);
            }
            MaskUpdate::WarmUp => panic!("warm-up should be over"),
        }
        s.begin_round();
        assert_eq!(s.epochs_seen(), 0);
        assert_eq!(s.mask_update(), MaskUpdate::WarmUp);
    }

    #[test]
    fn gate_limits() {
        let x = [3.0, -2.0, 5.0];
        let z = gate(&[20.0, -20.0, 0.0], &x).unwrap();
        assert!((z[0] - 3.0).abs() < 1e-8);
        assert!(z[1].abs() < 1e-8 * 2.0);
        assert_eq!(z[2], 2.5);
        assert!(gate(&[0.0], &x).is_err());
        let rows = gate_rows(&[0.0, 20.0], &[2.0, 1.0, 4.0, -1.0]).unwrap();
        assert_eq!(rows[0], 1.0);
        assert_eq!(rows[2], 2.0);
    }

    #[test]
    fn aggregate_masks_cases() {
        let single = aggregate_masks(&[(&[0.3, -1.0][..], 17)]).unwrap();
        assert_eq!(single, vec![0.3, -1.0]);
        let sym = aggregate_masks(&[(&[2.0, 0.0][..], 5), (&[0.0, 2.0][..], 5)]).unwrap();
        assert_eq!(sym, vec![1.0, 1.0]);
        let weighted = aggregate_masks(&[(&[4.0][..], 1), (&[0.0][..], 3)]).unwrap();
        assert!((weighted[0] - 1.0).abs() < 1e-15);
        assert!(aggregate_masks(&[]).is_err());
        assert!(aggregate_masks(&[(&[1.0][..], 0)]).is_err());
        assert!(aggregate_masks(&[(&[1.0][..], 1), (&[1.0, 2.0][..], 1)]).is_err());
    }
}
