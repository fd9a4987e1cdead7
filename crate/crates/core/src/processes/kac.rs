use super::{Process1D, SUPPORT_SLACK};
use crate::error::{Error, Result};
use crate::numerics::{
    adaptive_simpson, bessel_i0, bessel_i0e, bessel_i1_over_x, bessel_i1e, bessel_x_i0_over_i1,
    poisson_event_times, Rng,
};

/// Persistent motion at speed `c` whose direction flips at the events of a
/// rate-`a` Poisson process. The law at time t has atoms of mass `e^{-at}/2`
/// at `+-ct` and an absolutely continuous part on the open interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KacProcess {
    pub a: f64,
    pub c: f64,
    /// `|1 - total mass|` at t = 1, measured once by quadrature.
    pub mass_defect: f64,
}

/// Within this fraction of `ct` from the boundary the velocity is `+-c`.
const BOUNDARY_REL: f64 = 1e-9;

/// Below this Bessel argument the unscaled functions are used.
const SCALE_SWITCH: f64 = 15.0;

impl KacProcess {
    pub fn new(a: f64, c: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) || !(c > 0.0 && c.is_finite()) {
            return Err(Error::domain("KacProcess", format!("need a, c > 0, got a = {a}, c = {c}")));
        }
        let mut p = Self { a, c, mass_defect: 0.0 };
        p.mass_defect = (p.total_mass(1.0) - 1.0).abs();
        Ok(p)
    }

    pub fn beta(&self) -> f64 {
        self.a / self.c
    }

    /// Mass of each of the two atoms at `+-ct`.
    pub fn atom_mass(&self, t: f64) -> f64 {
        0.5 * (-self.a * t).exp()
    }

    /// Absolutely continuous part of the law; zero off `(-ct, ct)`.
    pub fn density_ac(&self, t: f64, x: f64) -> f64 {
        let ct = self.c * t;
        if t <= 0.0 || x.abs() >= ct {
            return 0.0;
        }
        let beta = self.beta();
        let r = ((ct - x) * (ct + x)).sqrt();
        let z = beta * r;
        let at = self.a * t;
        if z < SCALE_SWITCH {
            let i0 = bessel_i0(z).unwrap_or(f64::INFINITY);
            0.5 * beta * (-at).exp() * (beta * ct * bessel_i1_over_x(z) + i0)
        } else {
            0.5 * beta * (z - at).exp() * (beta * ct * bessel_i1e(z) / z + bessel_i0e(z))
        }
    }

    /// Atoms plus quadrature of the continuous part.
    pub fn total_mass(&self, t: f64) -> f64 {
        let ct = self.c * t;
        2.0 * self.atom_mass(t) + adaptive_simpson(|x| self.density_ac(t, x), -ct, ct, 1e-11)
    }

    pub fn sample_with(&self, t: f64, rng: &mut Rng) -> f64 {
        kac_sample(self.a, self.c, t, rng)
    }
}

/// Exact simulation: random initial direction, then the signed sum of the
/// segment lengths between switch times.
pub fn kac_sample(a: f64, c: f64, t: f64, rng: &mut Rng) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let b = rng.sign();
    let events = poisson_event_times(a, t, rng);
    let mut sum = 0.0;
    let mut last = 0.0;
    let mut dir = 1.0;
    for &s in &events {
        sum += dir * (s - last);
        last = s;
        dir = -dir;
    }
    sum += dir * (t - last);
    b * c * sum
}

pub fn kac_velocity(a: f64, c: f64, t: f64, x: f64) -> Result<f64> {
    let ct = c * t;
    if t < 0.0 {
        return Err(Error::domain("kac_velocity", format!("t = {t} negative")));
    }
    if x.abs() > ct * (1.0 + SUPPORT_SLACK) {
        return Err(Error::domain("kac_velocity", format!("x = {x} outside [-{ct}, {ct}]")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if ct - x.abs() <= BOUNDARY_REL * ct {
        return Ok(c.copysign(x));
    }
    let r = ((ct - x) * (ct + x)).sqrt();
    let z = (a / c) * r;
    Ok(x / (t + bessel_x_i0_over_i1(z) / a))
}

impl Process1D for KacProcess {
    fn sample(&self, t: f64, rng: &mut Rng) -> f64 {
        self.sample_with(t, rng)
    }

    fn velocity(&self, t: f64, x: f64) -> Result<f64> {
        kac_velocity(self.a, self.c, t, x)
    }

    fn support(&self, t: f64) -> (f64, f64) {
        let ct = self.c * t.max(0.0);
        (-ct, ct)
    }

    fn density(&self, t: f64, x: f64) -> Option<f64> {
        Some(self.density_ac(t, x))
    }

    fn cdf(&self, t: f64, x: f64) -> Option<f64> {
        let ct = self.c * t;
        if t <= 0.0 {
            return Some(if x >= 0.0 { 1.0 } else { 0.0 });
        }
        if x < -ct {
            return Some(0.0);
        }
        if x >= ct {
            return Some(1.0);
        }
        let ac = adaptive_simpson(|y| self.density_ac(t, y), -ct, x, 1e-12);
        Some((self.atom_mass(t) + ac).clamp(0.0, 1.0))
    }

    fn name(&self) -> &'static str {
        "kac"
    }
}
