//! Helpers for circular azimuth arithmetic. Azimuths are degrees in (-180, 180].

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_deg(theta: f64) -> f64 {
    let mut t = theta % 360.0;
    if t <= -180.0 {
        t += 360.0;
    } else if t > 180.0 {
        t -= 360.0;
    }
    t
}

/// Signed circular difference a - b in degrees, in (-180, 180].
pub fn diff_deg(a: f64, b: f64) -> f64 {
    wrap_deg(a - b)
}

/// Absolute circular distance between two azimuths in degrees, in [0, 180].
pub fn dist_deg(a: f64, b: f64) -> f64 {
    diff_deg(a, b).abs()
}

/// Unit vector (cos, sin) of an azimuth given in degrees.
pub fn unit_vec(theta_deg: f64) -> (f64, f64) {
    let r = theta_deg.to_radians();
    (r.cos(), r.sin())
}
