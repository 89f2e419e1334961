//! Escape times from loss plateaus.

/// First step `t` with `loss[t] ≤ fraction · loss[0]`; `None` means the
/// trajectory never got there. Also `None` for an empty trajectory or a
/// fraction outside `(0, 1)`.
pub fn saddle_escape_time(trajectory: &[f64], fraction: f64) -> Option<usize> {
    let first = *trajectory.first()?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return None;
    }
    let target = fraction * first;
    trajectory.iter().position(|&l| l <= target)
}

/// Escape time with "not escaped" counted as the trajectory length, so
/// unescaped runs rank behind every escaped one.
pub fn censored_escape_time(trajectory: &[f64], fraction: f64) -> usize {
    saddle_escape_time(trajectory, fraction).unwrap_or(trajectory.len())
}
