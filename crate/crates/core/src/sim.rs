//! Lorenz vector field, adaptive Dormand–Prince integration and the flow map.

use std::ops::{Add, Index, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lorenz system parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

impl LorenzParams {
    /// The two non-trivial equilibria `C+` and `C-`.
    pub fn wing_equilibria(&self) -> (State3, State3) {
        let r = (self.beta * (self.rho - 1.0)).sqrt();
        let z = self.rho - 1.0;
        (State3::new(r, r, z), State3::new(-r, -r, z))
    }
}

/// A point of the Lorenz state space.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl State3 {
    pub const ORIGIN: State3 = State3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }
}

impl Index<usize> for State3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("State3 index {i} out of range"),
        }
    }
}

impl Add for State3 {
    type Output = State3;
    fn add(self, o: State3) -> State3 {
        State3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for State3 {
    type Output = State3;
    fn sub(self, o: State3) -> State3 {
        State3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for State3 {
    type Output = State3;
    fn mul(self, k: f64) -> State3 {
        State3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Sampling interval and error control for [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt_sample: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_internal_step: f64,
    /// Step floor below which integration gives up.
    pub min_step: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt_sample: 0.01,
            rtol: 1e-10,
            atol: 1e-10,
            max_internal_step: 0.01,
            min_step: 1e-14,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }
}

pub fn lorenz_deriv(s: State3, p: &LorenzParams) -> State3 {
    State3::new(
        p.sigma * (s.y - s.x),
        s.x * (p.rho - s.z) - s.y,
        s.x * s.y - p.beta * s.z,
    )
}

// Dormand–Prince 5(4) tableau.
// The Lorenz field is autonomous, so the node coefficients c_i are not needed.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th and embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

/// Adaptive Dormand–Prince stepper carrying its controller state between
/// calls, so consecutive sample intervals reuse the step size.
struct Stepper<'a> {
    p: &'a LorenzParams,
    cfg: &'a IntegratorConfig,
    h: f64,
    err_prev: f64,
}

impl<'a> Stepper<'a> {
    fn new(p: &'a LorenzParams, cfg: &'a IntegratorConfig, s0: State3) -> Self {
        let h = initial_step(s0, p, cfg);
        Self {
            p,
            cfg,
            h,
            err_prev: 1e-4,
        }
    }

    /// Advances `s` from `t0` to exactly `t1`.
    fn advance(&mut self, mut s: State3, t0: f64, t1: f64) -> Result<State3> {
        let mut t = t0;
        let mut k1 = lorenz_deriv(s, self.p);
        while t < t1 {
            let remaining = t1 - t;
            let mut h = self.h.min(self.cfg.max_internal_step);
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            if h < self.cfg.min_step && !last {
                return Err(Error::StepSizeUnderflow {
                    t,
                    floor: self.cfg.min_step,
                });
            }
            let (s_new, k7, err) = self.trial(s, k1, h);
            if err <= 1.0 {
                let factor = if err == 0.0 {
                    MAX_FACTOR
                } else {
                    (SAFETY * err.powf(-ALPHA) * self.err_prev.powf(BETA))
                        .clamp(MIN_FACTOR, MAX_FACTOR)
                };
                self.err_prev = err.max(1e-4);
                // Landing steps are clipped; keep the controller's own proposal.
                if !last || h >= self.h {
                    self.h = h * factor;
                }
                t = if last { t1 } else { t + h };
                s = s_new;
                k1 = k7;
            } else {
                let factor = (SAFETY * err.powf(-ALPHA)).max(MIN_FACTOR);
                self.h = h * factor;
                if self.h < self.cfg.min_step {
                    return Err(Error::StepSizeUnderflow {
                        t,
                        floor: self.cfg.min_step,
                    });
                }
            }
        }
        Ok(s)
    }

    fn trial(&self, s: State3, k1: State3, h: f64) -> (State3, State3, f64) {
        let p = self.p;
        let k2 = lorenz_deriv(s + k1 * (h * A21), p);
        let k3 = lorenz_deriv(s + k1 * (h * A31) + k2 * (h * A32), p);
        let k4 = lorenz_deriv(s + k1 * (h * A41) + k2 * (h * A42) + k3 * (h * A43), p);
        let k5 = lorenz_deriv(
            s + k1 * (h * A51) + k2 * (h * A52) + k3 * (h * A53) + k4 * (h * A54),
            p,
        );
        let k6 = lorenz_deriv(
            s + k1 * (h * A61)
                + k2 * (h * A62)
                + k3 * (h * A63)
                + k4 * (h * A64)
                + k5 * (h * A65),
            p,
        );
        let s_new = s + (k1 * B1 + k3 * B3 + k4 * B4 + k5 * B5 + k6 * B6) * h;
        let k7 = lorenz_deriv(s_new, p);
        let e = (k1 * E1 + k3 * E3 + k4 * E4 + k5 * E5 + k6 * E6 + k7 * E7) * h;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            let scale = self.cfg.atol + self.cfg.rtol * s[i].abs().max(s_new[i].abs());
            err = err.max(e[i].abs() / scale);
        }
        if !err.is_finite() {
            err = f64::INFINITY;
        }
        (s_new, k7, err)
    }
}

fn initial_step(s0: State3, p: &LorenzParams, cfg: &IntegratorConfig) -> f64 {
    let f0 = lorenz_deriv(s0, p);
    let scale = |s: State3, i: usize| cfg.atol + cfg.rtol * s[i].abs();
    let rms = |v: State3, s: State3| {
        ((0..3).map(|i| (v[i] / scale(s, i)).powi(2)).sum::<f64>() / 3.0).sqrt()
    };
    let d0 = rms(s0, s0);
    let d1 = rms(f0, s0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let s1 = s0 + f0 * h0;
    let f1 = lorenz_deriv(s1, p);
    let d2 = rms(f1 - f0, s0) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(cfg.max_internal_step)
}

/// Integrates `n_steps` sample intervals from `s0`; returns `n_steps + 1`
/// states at `t = k * dt_sample`.
pub fn integrate(
    s0: State3,
    n_steps: usize,
    cfg: &IntegratorConfig,
    p: &LorenzParams,
) -> Result<Vec<State3>> {
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(s0);
    let mut stepper = Stepper::new(p, cfg, s0);
    let mut s = s0;
    for k in 0..n_steps {
        let t0 = k as f64 * cfg.dt_sample;
        let t1 = (k + 1) as f64 * cfg.dt_sample;
        s = stepper.advance(s, t0, t1)?;
        out.push(s);
    }
    Ok(out)
}

/// Advances `s0` by `duration` time units without sampling.
pub fn advance(
    s0: State3,
    duration: f64,
    cfg: &IntegratorConfig,
    p: &LorenzParams,
) -> Result<State3> {
    if duration <= 0.0 {
        return Ok(s0);
    }
    // Walk in sample-sized intervals so long runs follow the same step
    // sequence as `integrate`.
    let n = (duration / cfg.dt_sample).floor() as usize;
    let mut stepper = Stepper::new(p, cfg, s0);
    let mut s = s0;
    for k in 0..n {
        s = stepper.advance(s, k as f64 * cfg.dt_sample, (k + 1) as f64 * cfg.dt_sample)?;
    }
    let t_n = n as f64 * cfg.dt_sample;
    if duration > t_n {
        s = stepper.advance(s, t_n, duration)?;
    }
    Ok(s)
}

/// Noisy flow map `F(q, noise) = Phi_tau(q) + noise`.
pub fn flow_map(
    q: State3,
    tau: f64,
    noise: State3,
    cfg: &IntegratorConfig,
    p: &LorenzParams,
) -> Result<State3> {
    Ok(advance(q, tau, cfg, p)? + noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> LorenzParams {
        LorenzParams::default()
    }

    #[test]
    fn derivative_hand_values() {
        assert_eq!(lorenz_deriv(State3::ORIGIN, &p()), State3::ORIGIN);
        let d = lorenz_deriv(State3::new(1.0, 2.0, 3.0), &p());
        assert_eq!(d.x, 10.0);
        assert_eq!(d.y, 23.0);
        assert!((d.z - (-6.0)).abs() < 1e-14);
    }

    #[test]
    fn equilibria_have_zero_derivative() {
        let (cp, cm) = p().wing_equilibria();
        assert!((cp.x - 72f64.sqrt()).abs() < 1e-14);
        assert_eq!(cp.z, 27.0);
        for c in [cp, cm] {
            assert!(lorenz_deriv(c, &p()).max_abs() < 1e-12);
        }
    }

    #[test]
    fn origin_trajectory_stays_put() {
        let tr = integrate(State3::ORIGIN, 100, &IntegratorConfig::default(), &p()).unwrap();
        assert_eq!(tr.len(), 101);
        assert!(tr.iter().all(|s| *s == State3::ORIGIN));
    }

    #[test]
    fn trajectory_is_bounded() {
        let tr = integrate(
            State3::new(1.0, 1.0, 1.0),
            1024,
            &IntegratorConfig::default(),
            &p(),
        )
        .unwrap();
        assert!(tr.iter().all(|s| s.max_abs() < 100.0));
    }

    #[test]
    fn flow_map_identity_and_noise() {
        let cfg = IntegratorConfig::default();
        let q = State3::new(1.0, 1.0, 1.0);
        assert_eq!(flow_map(q, 0.0, State3::ORIGIN, &cfg, &p()).unwrap(), q);
        let (cp, _) = p().wing_equilibria();
        let out = flow_map(cp, 0.1, State3::new(0.5, 0.0, 0.0), &cfg, &p()).unwrap();
        assert!((out - (cp + State3::new(0.5, 0.0, 0.0))).max_abs() < 1e-6);
    }

    #[test]
    fn flow_map_semigroup() {
        let cfg = IntegratorConfig::default();
        let q = State3::new(1.0, 1.0, 1.0);
        let once = flow_map(q, 0.05, State3::ORIGIN, &cfg, &p()).unwrap();
        let twice = flow_map(once, 0.05, State3::ORIGIN, &cfg, &p()).unwrap();
        let direct = flow_map(q, 0.1, State3::ORIGIN, &cfg, &p()).unwrap();
        assert!((twice - direct).max_abs() < 1e-8);
    }

    #[test]
    fn underflow_is_reported() {
        let cfg = IntegratorConfig {
            min_step: 1.0,
            max_internal_step: 1e-3,
            ..IntegratorConfig::default()
        };
        let err = integrate(State3::new(1.0, 1.0, 1.0), 3, &cfg, &p()).unwrap_err();
        assert!(matches!(err, Error::StepSizeUnderflow { .. }));
    }
}
