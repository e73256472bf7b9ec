//! Loss and link functions for the labeled fit and the pseudo-label refits.
//!
//! Every loss used here is a function of the model logit `x` and a target
//! `p` in the model's output space, so the finite-size solver and the
//! asymptotic solver share a single scalar kernel ([`PointLoss`]).
//!
//! For the identity model the labeled target is `2y - 1`, so that the sign
//! of the logit is the predicted class in both model families.

use crate::error::{Error, Result};
use crate::special::{sigmoid, softplus};
use serde::{Deserialize, Serialize};

/// Nonlinearity applied to the logit by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelLink {
    Identity,
    Sigmoid,
}

/// Pseudo-labeler applied to the previous model's logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlLink {
    Identity,
    Sigmoid,
    /// Sigmoid whose input is scaled by `1 + a t` at step `t`.
    AnnealedSigmoid,
    /// Step function: hard labels.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    CrossEntropy,
}

/// The scalar loss `l(p, x)` as a function of the logit `x` for a target `p`.
///
/// * squared: `(p - x)^2 / 2`
/// * cross entropy on a sigmoid output: `softplus(x) - p x`, which equals
///   `-p log s(x) - (1 - p) log(1 - s(x))` without the cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointLoss(pub LossKind);

impl PointLoss {
    #[inline]
    pub fn value(self, p: f64, x: f64) -> f64 {
        match self.0 {
            LossKind::Squared => 0.5 * (p - x) * (p - x),
            LossKind::CrossEntropy => softplus(x) - p * x,
        }
    }

    /// Derivative in the logit.
    #[inline]
    pub fn d2(self, p: f64, x: f64) -> f64 {
        match self.0 {
            LossKind::Squared => x - p,
            LossKind::CrossEntropy => sigmoid(x) - p,
        }
    }

    /// Second derivative in the logit.
    #[inline]
    pub fn d22(self, x: f64) -> f64 {
        match self.0 {
            LossKind::Squared => 1.0,
            LossKind::CrossEntropy => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// First and second derivative in one call.
    #[inline]
    pub fn d2_d22(self, p: f64, x: f64) -> (f64, f64) {
        match self.0 {
            LossKind::Squared => (x - p, 1.0),
            LossKind::CrossEntropy => {
                let s = sigmoid(x);
                (s - p, s * (1.0 - s))
            }
        }
    }

    /// Minimizer of `u^2 / (2c) + l(p, h + u)`, returned as the optimal logit `h + u`.
    ///
    /// `guess` warm-starts the cross-entropy solve; pass `h` when nothing better is known.
    pub fn prox(self, p: f64, h: f64, c: f64, guess: f64) -> f64 {
        match self.0 {
            LossKind::Squared => (h + c * p) / (1.0 + c),
            LossKind::CrossEntropy => prox_cross_entropy(p, h, c, guess),
        }
    }
}

/// Solves `(z - h)/c + s(z) - p = 0`, which is strictly increasing in `z`.
///
/// The root lies in `[h - c(1 - p), h + c p]` for `p` in `[0, 1]`; Newton steps
/// that leave the current bracket are replaced by bisection.
fn prox_cross_entropy(p: f64, h: f64, c: f64, guess: f64) -> f64 {
    let mut lo = h - c * (1.0 - p).max(0.0);
    let mut hi = h + c * p.max(0.0);
    if hi - lo <= 0.0 {
        return h;
    }
    let mut z = if guess > lo && guess < hi { guess } else { 0.5 * (lo + hi) };
    let inv_c = 1.0 / c;
    for _ in 0..200 {
        let s = sigmoid(z);
        let f = (z - h) * inv_c + s - p;
        if f > 0.0 {
            hi = z;
        } else if f < 0.0 {
            lo = z;
        } else {
            return z;
        }
        let df = inv_c + s * (1.0 - s);
        let mut next = z - f / df;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let step = (next - z).abs();
        z = next;
        if step <= 4.0 * f64::EPSILON * (1.0 + z.abs()) || hi - lo <= 4.0 * f64::EPSILON * (1.0 + z.abs()) {
            break;
        }
    }
    z
}

/// The quadruple of model link, pseudo-labeler, labeled loss and pseudo-label loss,
/// together with the selection threshold and the annealing schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub model_link: ModelLink,
    pub pl_link: PlLink,
    pub loss: LossKind,
    pub pl_loss: LossKind,
    /// Selection threshold `Γ >= 0`; points with `|logit| <= Γ sqrt(q_prev)` are dropped.
    #[serde(default)]
    pub pls_threshold: f64,
    /// Annealing rate `a >= 0`; only used by [`PlLink::AnnealedSigmoid`].
    #[serde(default)]
    pub anneal_rate: f64,
    /// Constant input gain of the pseudo-labeler (1 for the plain links).
    #[serde(default = "one")]
    pub pl_gain: f64,
}

fn one() -> f64 {
    1.0
}

/// Derivatives of the unlabeled loss at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivBundle {
    pub value: f64,
    /// Derivative in the logit.
    pub d2: f64,
    /// Second derivative in the logit.
    pub d22: f64,
    /// Mixed derivative in the previous logit and the logit.
    pub d12: f64,
    /// The previous logit sits exactly on the selection boundary; the values are
    /// taken from the accepted side.
    pub on_boundary: bool,
}

impl LossSpec {
    /// Logistic model trained with cross entropy on sigmoid pseudo-labels.
    pub fn logistic() -> Self {
        LossSpec {
            model_link: ModelLink::Sigmoid,
            pl_link: PlLink::Sigmoid,
            loss: LossKind::CrossEntropy,
            pl_loss: LossKind::CrossEntropy,
            pls_threshold: 0.0,
            anneal_rate: 0.0,
            pl_gain: 1.0,
        }
    }

    /// Linear model with squared losses and identity pseudo-labels.
    pub fn squared() -> Self {
        LossSpec {
            model_link: ModelLink::Identity,
            pl_link: PlLink::Identity,
            loss: LossKind::Squared,
            pl_loss: LossKind::Squared,
            pls_threshold: 0.0,
            anneal_rate: 0.0,
            pl_gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.model_link {
            ModelLink::Identity => {
                self.loss == LossKind::Squared
                    && self.pl_loss == LossKind::Squared
                    && matches!(self.pl_link, PlLink::Identity | PlLink::Hard)
            }
            ModelLink::Sigmoid => {
                self.loss == LossKind::CrossEntropy
                    && self.pl_loss == LossKind::CrossEntropy
                    && matches!(self.pl_link, PlLink::Sigmoid | PlLink::AnnealedSigmoid | PlLink::Hard)
            }
        };
        if !ok {
            return Err(Error::config(
                "loss",
                format!(
                    "unsupported combination model_link={:?} pl_link={:?} loss={:?} pl_loss={:?}",
                    self.model_link, self.pl_link, self.loss, self.pl_loss
                ),
            ));
        }
        if !(self.pls_threshold >= 0.0 && self.pls_threshold.is_finite()) {
            return Err(Error::config("loss.pls_threshold", "must be finite and >= 0"));
        }
        if !(self.anneal_rate >= 0.0 && self.anneal_rate.is_finite()) {
            return Err(Error::config("loss.anneal_rate", "must be finite and >= 0"));
        }
        if self.anneal_rate > 0.0 && self.pl_link != PlLink::AnnealedSigmoid {
            return Err(Error::config("loss.anneal_rate", "only meaningful with pl_link = annealed_sigmoid"));
        }
        if !(self.pl_gain > 0.0 && self.pl_gain.is_finite()) {
            return Err(Error::config("loss.pl_gain", "must be finite and > 0"));
        }
        Ok(())
    }

    #[inline]
    pub fn labeled_loss(&self) -> PointLoss {
        PointLoss(self.loss)
    }

    #[inline]
    pub fn pl_point_loss(&self) -> PointLoss {
        PointLoss(self.pl_loss)
    }

    /// Target of the labeled loss for a true label.
    #[inline]
    pub fn label_target(&self, y: u8) -> f64 {
        match self.model_link {
            ModelLink::Identity => 2.0 * y as f64 - 1.0,
            ModelLink::Sigmoid => y as f64,
        }
    }

    /// `γ^(t) = 1 + a t`.
    #[inline]
    pub fn anneal_gamma(&self, t: usize) -> f64 {
        1.0 + self.anneal_rate * t as f64
    }

    /// Gain applied to the previous logit before the pseudo-labeler at step `t`.
    #[inline]
    pub fn pl_input_gain(&self, t: usize) -> f64 {
        match self.pl_link {
            PlLink::AnnealedSigmoid => self.pl_gain * self.anneal_gamma(t),
            _ => self.pl_gain,
        }
    }

    /// Pseudo-label for a previous logit `h_prev`, given the input gain `g`.
    #[inline]
    pub fn pseudo_label(&self, h_prev: f64, g: f64) -> f64 {
        match self.pl_link {
            PlLink::Identity => g * h_prev,
            PlLink::Sigmoid | PlLink::AnnealedSigmoid => sigmoid(g * h_prev),
            PlLink::Hard => self.hard_label(h_prev > 0.0),
        }
    }

    /// Hard label in the model's output space.
    #[inline]
    pub fn hard_label(&self, positive: bool) -> f64 {
        match (self.model_link, positive) {
            (_, true) => 1.0,
            (ModelLink::Identity, false) => -1.0,
            (ModelLink::Sigmoid, false) => 0.0,
        }
    }

    /// Derivative of the pseudo-label with respect to the previous logit.
    #[inline]
    pub fn pseudo_label_slope(&self, h_prev: f64, g: f64) -> f64 {
        match self.pl_link {
            PlLink::Identity => g,
            PlLink::Sigmoid | PlLink::AnnealedSigmoid => {
                let s = sigmoid(g * h_prev);
                g * s * (1.0 - s)
            }
            PlLink::Hard => 0.0,
        }
    }

    /// Acceptance rule `|h_prev| > Γ sqrt(q_prev)`.
    #[inline]
    pub fn accepts(&self, h_prev: f64, q_prev: f64) -> bool {
        h_prev.abs() > self.pls_threshold * q_prev.sqrt()
    }

    /// Labeled loss `l(y, σ(x))`.
    pub fn eval_l_labeled(&self, y: u8, x: f64) -> Result<f64> {
        if x.is_nan() {
            return Err(Error::NonFinite("eval_l_labeled"));
        }
        Ok(self.labeled_loss().value(self.label_target(y), x))
    }

    /// Unlabeled loss with selection: zero for rejected points, otherwise
    /// `l_pl(σ_pl(γ h_prev), σ(x))`. `gamma` is the annealing factor `γ^(t)`.
    pub fn eval_l_unlabeled(&self, h_prev: f64, x: f64, gamma: f64, q_prev: f64) -> Result<f64> {
        check_unlabeled_args(h_prev, x, q_prev)?;
        if !self.accepts(h_prev, q_prev) {
            return Ok(0.0);
        }
        let p = self.pseudo_label(h_prev, self.pl_gain * gamma);
        Ok(self.pl_point_loss().value(p, x))
    }

    /// Derivatives of the labeled loss in the logit.
    pub fn derivs_labeled(&self, y: u8, x: f64) -> DerivBundle {
        let l = self.labeled_loss();
        let p = self.label_target(y);
        DerivBundle {
            value: l.value(p, x),
            d2: l.d2(p, x),
            d22: l.d22(x),
            d12: 0.0,
            on_boundary: false,
        }
    }

    /// Derivatives of the unlabeled loss. Off the boundary these are the smooth-region
    /// derivatives; the boundary itself is reported through `on_boundary`.
    pub fn derivs_unlabeled(&self, h_prev: f64, x: f64, gamma: f64, q_prev: f64) -> Result<DerivBundle> {
        check_unlabeled_args(h_prev, x, q_prev)?;
        let threshold = self.pls_threshold * q_prev.sqrt();
        let on_boundary = h_prev.abs() == threshold && threshold > 0.0;
        if !self.accepts(h_prev, q_prev) && !on_boundary {
            return Ok(DerivBundle {
                value: 0.0,
                d2: 0.0,
                d22: 0.0,
                d12: 0.0,
                on_boundary: false,
            });
        }
        let g = self.pl_gain * gamma;
        let l = self.pl_point_loss();
        let p = self.pseudo_label(h_prev, g);
        let (d2, d22) = l.d2_d22(p, x);
        Ok(DerivBundle {
            value: l.value(p, x),
            d2,
            d22,
            // both losses have d2 = link(x) - p
            d12: -self.pseudo_label_slope(h_prev, g),
            on_boundary,
        })
    }
}

fn check_unlabeled_args(h_prev: f64, x: f64, q_prev: f64) -> Result<()> {
    if h_prev.is_nan() || x.is_nan() {
        return Err(Error::NonFinite("unlabeled loss"));
    }
    if !(q_prev > 0.0) {
        return Err(Error::InvalidArgument(format!("q_prev must be > 0, got {q_prev}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn annealed(a: f64) -> LossSpec {
        LossSpec {
            pl_link: PlLink::AnnealedSigmoid,
            anneal_rate: a,
            ..LossSpec::logistic()
        }
    }

    fn all_specs() -> Vec<LossSpec> {
        vec![
            LossSpec::squared(),
            LossSpec {
                pl_link: PlLink::Hard,
                ..LossSpec::squared()
            },
            LossSpec::logistic(),
            annealed(0.3),
            LossSpec {
                pl_link: PlLink::Hard,
                ..LossSpec::logistic()
            },
        ]
    }

    #[test]
    fn labeled_values() {
        let ce = LossSpec::logistic();
        assert_relative_eq!(ce.eval_l_labeled(1, 0.0).unwrap(), std::f64::consts::LN_2, max_relative = 1e-15);
        let want = -(1.0 - sigmoid(-3.0)).ln();
        assert_relative_eq!(ce.eval_l_labeled(0, -3.0).unwrap(), want, max_relative = 1e-12);
        assert_relative_eq!(want, 0.048587, epsilon = 1e-6);
        assert_eq!(LossSpec::squared().eval_l_labeled(1, 1.0).unwrap(), 0.0);
        assert!(ce.eval_l_labeled(1, f64::NAN).is_err());
    }

    #[test]
    fn unlabeled_values() {
        let mut sq = LossSpec::squared();
        assert_eq!(sq.eval_l_unlabeled(2.0, 1.0, 1.0, 1.0).unwrap(), 0.5);
        sq.pls_threshold = 1.0;
        assert_eq!(sq.eval_l_unlabeled(0.5, 1.0, 1.0, 1.0).unwrap(), 0.0);
        let ce = LossSpec::logistic();
        let got = ce.eval_l_unlabeled(1.0, 0.0, 1.0, 1.0).unwrap();
        let s = sigmoid(1.0);
        let want = -s * 0.5f64.ln() - (1.0 - s) * 0.5f64.ln();
        assert_relative_eq!(got, want, max_relative = 1e-14);
        assert!(ce.eval_l_unlabeled(1.0, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn annealing_schedule() {
        assert_eq!(annealed(0.0).anneal_gamma(7), 1.0);
        assert_eq!(annealed(0.5).anneal_gamma(4), 3.0);
        assert_relative_eq!(annealed(0.1).anneal_gamma(16), 2.6, max_relative = 1e-15);
    }

    #[test]
    fn rejects_bad_combinations() {
        let bad = LossSpec {
            loss: LossKind::Squared,
            ..LossSpec::logistic()
        };
        assert!(bad.validate().is_err());
        let bad = LossSpec {
            anneal_rate: 0.2,
            ..LossSpec::logistic()
        };
        assert!(bad.validate().is_err());
        for s in all_specs() {
            s.validate().unwrap();
        }
    }

    #[test]
    fn cross_entropy_d22_at_target() {
        let l = PointLoss(LossKind::CrossEntropy);
        for &p in &[0.1f64, 0.5, 0.83] {
            let x = (p / (1.0 - p)).ln();
            assert_relative_eq!(l.d22(x), p * (1.0 - p), max_relative = 1e-12);
        }
    }

    #[test]
    fn boundary_is_flagged() {
        let mut s = LossSpec::logistic();
        s.pls_threshold = 0.5;
        let b = s.derivs_unlabeled(1.0, 0.3, 1.0, 4.0).unwrap();
        assert!(b.on_boundary);
        assert!(b.d2 != 0.0);
    }

    #[test]
    fn cross_entropy_matches_definition_on_grid() {
        let l = PointLoss(LossKind::CrossEntropy);
        for i in 0..=20 {
            let p = i as f64 / 20.0;
            for j in -20..=20 {
                let x = j as f64 * 0.25;
                let q = sigmoid(x);
                let want = -p * q.ln() - (1.0 - p) * (1.0 - q).ln();
                assert_relative_eq!(l.value(p, x), want, max_relative = 1e-12, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences_on_grid() {
        let h = 1e-5;
        for spec in all_specs() {
            let gamma = 1.3;
            for i in -10..=10 {
                for j in -10..=10 {
                    let (hp, x) = (i as f64 * 0.5 + 0.013, j as f64 * 0.5 + 0.007);
                    let f = |hp: f64, x: f64| spec.eval_l_unlabeled(hp, x, gamma, 1.0).unwrap();
                    let b = spec.derivs_unlabeled(hp, x, gamma, 1.0).unwrap();
                    let fd2 = (f(hp, x + h) - f(hp, x - h)) / (2.0 * h);
                    let d2 = |hp: f64, x: f64| spec.derivs_unlabeled(hp, x, gamma, 1.0).unwrap().d2;
                    let fd12 = (d2(hp + h, x) - d2(hp - h, x)) / (2.0 * h);
                    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol * (1.0 + b.abs());
                    assert!(close(b.d2, fd2, 1e-6), "{spec:?} d2 {} vs {}", b.d2, fd2);
                    assert!(close(b.d12, fd12, 1e-6), "{spec:?} d12 {} vs {}", b.d12, fd12);
                    // d22 as the centred difference of d2; a second difference of
                    // the value is roundoff-limited near 1e-4 at this step
                    let fd22 = (d2(hp, x + h) - d2(hp, x - h)) / (2.0 * h);
                    assert!(close(b.d22, fd22, 1e-6), "{spec:?} d22 {} vs {}", b.d22, fd22);
                }
            }
        }
    }

    #[test]
    fn prox_squared_closed_form() {
        let l = PointLoss(LossKind::Squared);
        let (p, h, c) = (0.7, -0.4, 0.9);
        let z = l.prox(p, h, c, h);
        assert_relative_eq!(z - h, (p - h) / (1.0 / c + 1.0), max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn convex_everywhere(x in -40.0f64..40.0, hp in -40.0f64..40.0, which in 0usize..5) {
            let spec = all_specs()[which];
            let b = spec.derivs_unlabeled(hp, x, 2.0, 1.0).unwrap();
            prop_assert!(b.d22 >= 0.0);
            prop_assert!(spec.derivs_labeled(1, x).d22 >= 0.0);
        }

        #[test]
        fn annealed_reduces_to_sigmoid(hp in -30.0f64..30.0, t in 1usize..100) {
            let plain = LossSpec::logistic();
            let ann = annealed(0.0);
            prop_assert_eq!(
                plain.pseudo_label(hp, plain.pl_input_gain(t)),
                ann.pseudo_label(hp, ann.pl_input_gain(t))
            );
        }

        #[test]
        fn prox_is_stationary(p in 0.0f64..1.0, h in -20.0f64..20.0, c in 1e-3f64..50.0) {
            let l = PointLoss(LossKind::CrossEntropy);
            let z = l.prox(p, h, c, h);
            let r = (z - h) / c + sigmoid(z) - p;
            prop_assert!(r.abs() <= 1e-12 * (1.0 + (z - h).abs() / c), "residual {r}");
        }
    }
}
