use std::f64::consts::TAU;

use crate::error::{Error, Result};

/// `(sin, cos)` of `2π · r / n` for integer `r ∈ [0, n)`. Angles on a
/// quarter turn are returned exactly.
fn sin_cos_turn(r: u64, n: u64) -> (f64, f64) {
    if (4 * r) % n == 0 {
        return match 4 * r / n {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        };
    }
    let theta = TAU * r as f64 / n as f64;
    theta.sin_cos()
}

/// Parameter-free sinusoidal encoding of an integer phase:
/// `θ_i = 2π(i − h)/dim` for `i < dim/2`, output `[sin θ ∥ cos θ]`.
///
/// The angle is reduced modulo `dim` in integer arithmetic first, so the
/// encoding is exactly periodic in `h` with period `dim`.
pub fn hour_encode(h: u64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Model(format!("encoding width must be even and positive, got {dim}")));
    }
    let n = dim as u64;
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let r = (i as u64 + n - h % n) % n;
        let (s, c) = sin_cos_turn(r, n);
        out[i] = s;
        out[half + i] = c;
    }
    Ok(out)
}

/// Checked hour-of-day form of [`hour_encode`].
pub fn hour_of_day_encode(h: u8, dim: usize) -> Result<Vec<f64>> {
    if h > 23 {
        return Err(Error::Model(format!("hour {h} outside 0..=23")));
    }
    hour_encode(h as u64, dim)
}

/// Per-token order encoding: row `m` is [`hour_encode`]`(m, dim)`. Returned
/// row-major as `M × dim`.
pub fn token_position_encode(m: usize, dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(m * dim);
    for i in 0..m {
        out.extend(hour_encode(i as u64, dim)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_turns_exact() {
        assert_eq!(hour_encode(0, 4).unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(hour_encode(1, 4).unwrap(), vec![-1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(hour_encode(0, 3).is_err());
        assert!(hour_of_day_encode(24, 8).is_err());
    }
}
