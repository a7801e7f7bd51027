//! Rectified-flow forward process, flow-matching loss, and Euler sampler.

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Coefficients of the forward process `z_t = a(t)·x0 + b(t)·eps`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlowSchedule {
    /// Straight path: `a(t) = 1 - t`, `b(t) = t`.
    #[default]
    Rectified,
}

impl FlowSchedule {
    pub fn a(self, t: f32) -> f32 {
        match self {
            FlowSchedule::Rectified => 1.0 - t,
        }
    }

    pub fn b(self, t: f32) -> f32 {
        match self {
            FlowSchedule::Rectified => t,
        }
    }
}

/// Noisy latent at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub z_t: Tensor,
    pub t: f32,
}

impl FlowState {
    pub fn new(z_t: Tensor, t: f32) -> Result<Self> {
        check_t(t)?;
        Ok(Self { z_t, t })
    }
}

fn check_t(t: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - t)·x0 + t·eps`
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f32) -> Result<Tensor> {
    check_t(t)?;
    let s = FlowSchedule::Rectified;
    let (a, b) = (s.a(t), s.b(t));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Regression target `eps - x0` of the velocity field.
pub fn cfm_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.zip_map(x0, |e, x| e - x)
}

/// Mean squared error between a predicted velocity and `eps - x0`, on the tape.
pub fn cfm_loss(tape: &mut Tape, v_pred: Var, x0: &Tensor, eps: &Tensor) -> Result<Var> {
    if tape.shape(v_pred) != x0.shape() {
        return Err(shape_mismatch("cfm_loss", tape.shape(v_pred), x0.shape()));
    }
    let target = tape.constant(cfm_target(x0, eps)?);
    tape.mse(v_pred, target)
}

/// Tape-free evaluation of [`cfm_loss`].
pub fn cfm_loss_value(v_pred: &Tensor, x0: &Tensor, eps: &Tensor) -> Result<f32> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(v_pred.clone());
    let l = cfm_loss(&mut tape, v, x0, eps)?;
    Ok(tape.value(l).data()[0])
}

/// Integrate `dz/dt = v(z, t)` from `t = 1` to `t = 0` with `steps` uniform
/// Euler steps: `z <- z - Δt·v(z, t)`.
///
/// The velocity closure receives the current step index so callers can keep
/// per-step diagnostics; any conditioning it needs is captured by the closure
/// and stays unchanged across calls.
pub fn euler_sample<F>(mut velocity: F, z1: &Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f32, usize) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(invalid("euler_sample needs at least one step"));
    }
    let dt = 1.0 / steps as f32;
    let mut z = z1.clone();
    for i in 0..steps {
        let t = 1.0 - i as f32 * dt;
        let v = velocity(&z, t, i)?;
        if v.shape() != z.shape() {
            return Err(shape_mismatch("euler_sample", z.shape(), v.shape()));
        }
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "velocity field".into(),
                step: i,
            });
        }
        z.data_mut()
            .iter_mut()
            .zip(v.data())
            .for_each(|(zi, vi)| *zi -= dt * vi);
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = FlowSchedule::Rectified;
        assert_eq!(
            (s.a(0.0), s.b(0.0), s.a(1.0), s.b(1.0)),
            (1.0, 0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let (x0, e) = (t(&[2.0, 0.0]), t(&[0.0, 2.0]));
        assert_eq!(interpolate(&x0, &e, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &e, 1.0).unwrap(), e);
        assert_eq!(interpolate(&x0, &e, 0.5).unwrap(), t(&[1.0, 1.0]));
        assert!(interpolate(&x0, &e, 1.5).is_err());
        assert!(interpolate(&x0, &e, -0.1).is_err());
    }

    #[test]
    fn target_cases() {
        let x = t(&[1.0, 1.0]);
        assert_eq!(cfm_target(&x, &x).unwrap(), t(&[0.0, 0.0]));
        assert_eq!(
            cfm_target(&t(&[0.0, 0.0]), &t(&[4.0, -1.0])).unwrap(),
            t(&[4.0, -1.0])
        );
        assert_eq!(cfm_target(&x, &t(&[3.0, 0.0])).unwrap(), t(&[2.0, -1.0]));
    }

    #[test]
    fn loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let e = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let target = cfm_target(&x0, &e).unwrap();
        assert_eq!(cfm_loss_value(&target, &x0, &e).unwrap(), 0.0);
        let off = target.map(|v| v + 1.0);
        assert!((cfm_loss_value(&off, &x0, &e).unwrap() - 1.0).abs() < 1e-6);

        let v = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let mut acc = 0.0f64;
        for i in 0..v.len() {
            let d = v.data()[i] as f64 - (e.data()[i] as f64 - x0.data()[i] as f64);
            acc += d * d;
        }
        let oracle = acc / v.len() as f64;
        assert!((cfm_loss_value(&v, &x0, &e).unwrap() as f64 - oracle).abs() < 1e-6);
    }

    #[test]
    fn euler_exact_on_constant_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let e = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let v = cfm_target(&x0, &e).unwrap();
        let out = euler_sample(|_, _, _| Ok(v.clone()), &e, 1).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-6);
        let out = euler_sample(|_, _, _| Ok(v.clone()), &e, 50).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-5);
        let zero = Tensor::zeros(&[3, 4, 4]);
        let out = euler_sample(|_, _, _| Ok(zero.clone()), &e, 7).unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn euler_reports_nan_step() {
        let z = Tensor::zeros(&[2]);
        let err = euler_sample(
            |_, _, i| {
                Ok(if i == 2 {
                    t(&[f32::NAN, 0.0])
                } else {
                    t(&[0.0, 0.0])
                })
            },
            &z,
            5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 2, .. }));
        assert!(euler_sample(|z, _, _| Ok(z.clone()), &z, 0).is_err());
    }

    #[test]
    fn euler_visits_uniform_times() {
        let mut seen = Vec::new();
        let z = Tensor::zeros(&[1]);
        euler_sample(
            |z, t, _| {
                seen.push(t);
                Ok(z.clone())
            },
            &z,
            4,
        )
        .unwrap();
        assert_eq!(seen, vec![1.0, 0.75, 0.5, 0.25]);
    }

    proptest! {
        #[test]
        fn interpolate_swap_symmetry(
            a in prop::collection::vec(-5.0f32..5.0, 6),
            b in prop::collection::vec(-5.0f32..5.0, 6),
            tt in 0.0f32..=1.0,
        ) {
            let (x0, e) = (t(&a), t(&b));
            let lhs = interpolate(&x0, &e, tt).unwrap();
            let rhs = interpolate(&e, &x0, 1.0 - tt).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
        }

        #[test]
        fn loss_is_nonnegative(
            v in prop::collection::vec(-5.0f32..5.0, 6),
            a in prop::collection::vec(-5.0f32..5.0, 6),
            b in prop::collection::vec(-5.0f32..5.0, 6),
        ) {
            prop_assert!(cfm_loss_value(&t(&v), &t(&a), &t(&b)).unwrap() >= 0.0);
        }
    }
}
