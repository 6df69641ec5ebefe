//! The compactly supported plateau bump used for sources and readout windows.

/// `ψ(r)`: equal to 1 on `[0, 1/2]`, 0 on `[1, ∞)`, and joined in between by
/// the quintic smoothstep, which makes it C² across both transitions.
pub fn psi(r: f64) -> f64 {
    let r = r.abs();
    if r <= 0.5 {
        1.0
    } else if r >= 1.0 {
        0.0
    } else {
        let u = 2.0 * (1.0 - r);
        u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_and_support() {
        assert_eq!(psi(0.0), 1.0);
        assert_eq!(psi(0.5), 1.0);
        assert_eq!(psi(1.0), 0.0);
        assert_eq!(psi(3.0), 0.0);
        assert!((psi(0.75) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn smooth_at_the_joints() {
        let h = 1e-5;
        for r0 in [0.5, 1.0] {
            let d_left = (psi(r0) - psi(r0 - h)) / h;
            let d_right = (psi(r0 + h) - psi(r0)) / h;
            assert!(d_left.abs() < 1e-6 && d_right.abs() < 1e-6);
        }
    }

    #[test]
    fn monotone_on_transition() {
        let mut prev = 1.0;
        for k in 0..=100 {
            let v = psi(0.5 + 0.005 * k as f64);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }
}
