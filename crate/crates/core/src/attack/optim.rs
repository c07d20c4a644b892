//! First-order optimizers and the binary search over the norm weight.

use crate::error::{Error, Result};

const EPS: f64 = 1e-8;

/// RMSprop: a decayed accumulator of squared gradients scales each step.
#[derive(Debug, Clone)]
pub struct RmsProp {
    lr: f64,
    decay: f64,
    acc: Vec<f64>,
}

impl RmsProp {
    pub fn new(dim: usize, lr: f64, decay: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                lr
            )));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Argument(format!(
                "decay must lie in [0, 1), got {}",
                decay
            )));
        }
        Ok(RmsProp {
            lr,
            decay,
            acc: vec![0.0; dim],
        })
    }

    /// One update: `acc <- decay*acc + (1-decay)*g^2`,
    /// `z <- z - lr * g / sqrt(acc + 1e-8)`.
    pub fn step(&mut self, z: &mut [f64], grad: &[f64]) -> Result<()> {
        if z.len() != self.acc.len() || grad.len() != self.acc.len() {
            return Err(Error::Argument(format!(
                "optimizer built for dimension {} stepped with {} / {}",
                self.acc.len(),
                z.len(),
                grad.len()
            )));
        }
        for ((a, g), zi) in self.acc.iter_mut().zip(grad).zip(z.iter_mut()) {
            *a = self.decay * *a + (1.0 - self.decay) * g * g;
            *zi -= self.lr * g / (*a + EPS).sqrt();
        }
        Ok(())
    }
}

/// Adam with the usual bias correction; used by the sigmoid baseline.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    t: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                lr
            )));
        }
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        })
    }

    pub fn step(&mut self, z: &mut [f64], grad: &[f64]) -> Result<()> {
        if z.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Argument(format!(
                "optimizer built for dimension {} stepped with {} / {}",
                self.m.len(),
                z.len(),
                grad.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((m, v), g), zi) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grad)
            .zip(z.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *zi -= self.lr * mh / (vh.sqrt() + EPS);
        }
        Ok(())
    }
}

/// Runs `trials` optimization attempts while binary-searching the norm
/// weight `c` in `[c_lo, c_hi]`: after a successful attempt the weight
/// rises (`lo = c`), after a failure it falls (`hi = c`), and the next
/// trial uses the geometric midpoint `sqrt(lo * hi)`. Returns the
/// `(c, success)` trace; the caller keeps whatever best iterate its closure
/// recorded.
pub fn binary_search_c(
    c_init: f64,
    c_lo: f64,
    c_hi: f64,
    trials: usize,
    mut run: impl FnMut(f64) -> Result<bool>,
) -> Result<Vec<(f64, bool)>> {
    if !(c_lo > 0.0 && c_lo <= c_init && c_init <= c_hi && c_hi.is_finite()) {
        return Err(Error::Argument(format!(
            "need 0 < c_lo <= c_init <= c_hi, got {} / {} / {}",
            c_lo, c_init, c_hi
        )));
    }
    let mut lo = c_lo;
    let mut hi = c_hi;
    let mut c = c_init;
    let mut trace = Vec::with_capacity(trials);
    for _ in 0..trials {
        let ok = run(c)?;
        trace.push((c, ok));
        if ok {
            lo = c;
        } else {
            hi = c;
        }
        c = (lo * hi).sqrt();
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_first_step_from_cold_start() {
        // acc = (1 - 0.99) * 1 = 0.01; step = 0.05 / sqrt(0.01 + 1e-8).
        let mut opt = RmsProp::new(1, 0.05, 0.99).unwrap();
        let mut z = vec![0.0];
        opt.step(&mut z, &[1.0]).unwrap();
        let expect = 0.05 / (0.01f64 + 1e-8).sqrt();
        assert!((z[0] + expect).abs() < 1e-12, "z {}", z[0]);
    }

    #[test]
    fn rmsprop_zero_gradient_is_a_fixed_point() {
        let mut opt = RmsProp::new(2, 0.05, 0.99).unwrap();
        let mut z = vec![0.3, -0.7];
        opt.step(&mut z, &[0.0, 0.0]).unwrap();
        assert_eq!(z, vec![0.3, -0.7]);
    }

    #[test]
    fn rmsprop_constant_gradient_step_approaches_lr() {
        let mut opt = RmsProp::new(1, 0.05, 0.9).unwrap();
        let mut z = vec![0.0];
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..400 {
            opt.step(&mut z, &[2.0]).unwrap();
            last_step = (z[0] - prev).abs();
            prev = z[0];
        }
        assert!((last_step - 0.05).abs() < 0.05 * 0.01, "step {}", last_step);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut opt = Adam::new(2, 0.01).unwrap();
        let mut z = vec![0.0, 0.0];
        opt.step(&mut z, &[3.0, -0.5]).unwrap();
        assert!((z[0] + 0.01).abs() < 1e-6, "z {}", z[0]);
        assert!((z[1] - 0.01).abs() < 1e-6, "z {}", z[1]);
    }

    #[test]
    fn all_successes_drive_c_toward_the_upper_bound() {
        let trace = binary_search_c(1.0, 1e-3, 1e3, 5, |_| Ok(true)).unwrap();
        let cs: Vec<f64> = trace.iter().map(|(c, _)| *c).collect();
        assert!((cs[0] - 1.0).abs() < 1e-12);
        for w in cs.windows(2) {
            assert!(w[1] > w[0], "not increasing: {:?}", cs);
        }
        assert!(cs[4] > 100.0, "final c {}", cs[4]);
        assert!(cs[4] < 1e3);
    }

    #[test]
    fn all_failures_drive_c_toward_the_lower_bound() {
        let trace = binary_search_c(1.0, 1e-3, 1e3, 5, |_| Ok(false)).unwrap();
        let cs: Vec<f64> = trace.iter().map(|(c, _)| *c).collect();
        for w in cs.windows(2) {
            assert!(w[1] < w[0], "not decreasing: {:?}", cs);
        }
        assert!(cs[4] < 0.01, "final c {}", cs[4]);
        assert!(cs[4] > 1e-3);
    }

    #[test]
    fn mixed_outcomes_stay_bracketed() {
        let mut flip = false;
        let trace = binary_search_c(1.0, 1e-3, 1e3, 8, |_| {
            flip = !flip;
            Ok(flip)
        })
        .unwrap();
        for (c, _) in trace {
            assert!((1e-3..=1e3).contains(&c));
        }
    }

    #[test]
    fn closure_errors_propagate() {
        let err = binary_search_c(1.0, 1e-3, 1e3, 3, |_| Err(Error::Optimizer("boom".into())))
            .unwrap_err();
        assert!(matches!(err, Error::Optimizer(_)));
        assert!(binary_search_c(1.0, 10.0, 1e3, 3, |_| Ok(true)).is_err());
    }
}
