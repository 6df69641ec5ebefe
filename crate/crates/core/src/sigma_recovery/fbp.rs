//! Parallel-beam filtered back-projection with the band-limited ramp filter.
//!
//! Offsets are measured from the square's center along the unit normal
//! `θ = (cos φ_a, sin φ_a)` with `φ_a = aπ/K`. The spatial ramp kernel at
//! spacing `d` is `h(0) = 1/(4d²)`, `h(n) = -1/(π²n²d²)` for odd `n`, zero
//! for even `n ≠ 0`; its frequency response is `|ω|` up to the Nyquist limit.

use crate::error::{Error, Result};
use crate::geometry::{Grid, Vec2};
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub n_angles: usize,
    pub n_offsets: usize,
    /// Offset spacing `d`; offsets are `(o - (n_offsets - 1)/2) d`.
    pub spacing: f64,
    /// Row-major values, one row per angle.
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn new(n_angles: usize, n_offsets: usize, spacing: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_angles * n_offsets {
            return Err(Error::Parse(format!(
                "sinogram holds {} values, header says {n_angles}x{n_offsets}",
                values.len()
            )));
        }
        if !(spacing > 0.0) {
            return Err(Error::Config(format!(
                "sinogram offset spacing must be positive, got {spacing}"
            )));
        }
        Ok(Self {
            n_angles,
            n_offsets,
            spacing,
            values,
        })
    }

    /// Samples `f` with the supplied line integral `line(θ, s)`.
    pub fn from_fn<F: Fn(Vec2, f64) -> f64>(
        n_angles: usize,
        n_offsets: usize,
        spacing: f64,
        line: F,
    ) -> Self {
        let mut values = Vec::with_capacity(n_angles * n_offsets);
        for a in 0..n_angles {
            let th = Self::normal(n_angles, a);
            for o in 0..n_offsets {
                values.push(line(th, Self::offset_at(n_offsets, spacing, o)));
            }
        }
        Self {
            n_angles,
            n_offsets,
            spacing,
            values,
        }
    }

    pub fn normal(n_angles: usize, a: usize) -> Vec2 {
        Vec2::from_angle(PI * a as f64 / n_angles as f64)
    }

    pub fn offset_at(n_offsets: usize, spacing: f64, o: usize) -> f64 {
        (o as f64 - 0.5 * (n_offsets as f64 - 1.0)) * spacing
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.values[a * self.n_offsets..(a + 1) * self.n_offsets]
    }

    /// Text form: `n_angles n_offsets` header, then the row-major values.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = format!("{} {}\n", self.n_angles, self.n_offsets);
        for a in 0..self.n_angles {
            let row: Vec<String> = self.row(a).iter().map(|v| format!("{v:.17e}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, spacing: f64) -> Result<Self> {
        let mut it = text.split_whitespace();
        let mut next_usize = |what: &str| -> Result<usize> {
            it.next()
                .ok_or_else(|| Error::Parse(format!("sinogram header is missing {what}")))?
                .parse()
                .map_err(|e| Error::Parse(format!("sinogram {what}: {e}")))
        };
        let na = next_usize("n_angles")?;
        let no = next_usize("n_offsets")?;
        let values = it
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("sinogram value `{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(na, no, spacing, values)
    }
}

fn ramp(n: isize, d: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * d * d)
    } else if n % 2 != 0 {
        -1.0 / (PI * PI * (n * n) as f64 * d * d)
    } else {
        0.0
    }
}

/// Reconstructs nodal values on `grid`. Returns the image and a warning when
/// the angular sampling is too coarse for a usable result.
pub fn fbp_reconstruct(sino: &Sinogram, grid: &Grid) -> (Vec<f64>, Option<String>) {
    let warning = (sino.n_angles < 8).then(|| {
        format!(
            "only {} projection angles; expect severe streaking",
            sino.n_angles
        )
    });
    let no = sino.n_offsets as isize;
    let d = sino.spacing;
    let filtered: Vec<Vec<f64>> = (0..sino.n_angles)
        .map(|a| {
            let p = sino.row(a);
            (0..no)
                .map(|n| d * (0..no).map(|m| ramp(n - m, d) * p[m as usize]).sum::<f64>())
                .collect()
        })
        .collect();
    let center = Vec2::new(0.5, 0.5);
    let half = 0.5 * (sino.n_offsets as f64 - 1.0);
    let image = (0..grid.node_count())
        .map(|node| {
            let x = grid.node_point(node) - center;
            let mut acc = 0.0;
            for (a, q) in filtered.iter().enumerate() {
                let s = x.dot(Sinogram::normal(sino.n_angles, a)) / d + half;
                if s < 0.0 || s > (sino.n_offsets - 1) as f64 {
                    continue;
                }
                let i = (s.floor() as usize).min(sino.n_offsets.saturating_sub(2));
                let t = s - i as f64;
                let right = q.get(i + 1).copied().unwrap_or(0.0);
                acc += (1.0 - t) * q[i] + t * right;
            }
            acc * PI / sino.n_angles as f64
        })
        .collect();
    (image, warning)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_sinogram(na: usize, no: usize, r: f64) -> Sinogram {
        let d = 1.5 / no as f64;
        Sinogram::from_fn(na, no, d, |_, s| {
            if s.abs() < r {
                2.0 * (r * r - s * s).sqrt()
            } else {
                0.0
            }
        })
    }

    #[test]
    fn disk_interior_mean_is_close_to_one() {
        let grid = Grid::planar(64, 4).unwrap();
        let (img, warn) = fbp_reconstruct(&disk_sinogram(64, 128, 0.25), &grid);
        assert!(warn.is_none());
        let inside: Vec<f64> = (0..grid.node_count())
            .filter(|&i| grid.node_point(i).dist(Vec2::new(0.5, 0.5)) < 0.2)
            .map(|i| img[i])
            .collect();
        let mean = inside.iter().sum::<f64>() / inside.len() as f64;
        assert!((mean - 1.0).abs() < 0.1, "mean {mean}");
        let outside = img[grid.node_index(2, 2)];
        assert!(outside.abs() < 0.1);
    }

    #[test]
    fn zero_and_linearity() {
        let grid = Grid::planar(16, 4).unwrap();
        let zero = Sinogram::new(8, 16, 0.1, vec![0.0; 128]).unwrap();
        assert!(fbp_reconstruct(&zero, &grid).0.iter().all(|v| *v == 0.0));
        let s = disk_sinogram(8, 16, 0.3);
        let mut s3 = s.clone();
        s3.values.iter_mut().for_each(|v| *v *= 3.0);
        let a = fbp_reconstruct(&s, &grid).0;
        let b = fbp_reconstruct(&s3, &grid).0;
        for (x, y) in a.iter().zip(&b) {
            assert!((3.0 * x - y).abs() < 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn coarse_angular_sampling_warns() {
        let grid = Grid::planar(8, 4).unwrap();
        assert!(fbp_reconstruct(&disk_sinogram(4, 16, 0.2), &grid)
            .1
            .is_some());
    }

    #[test]
    fn text_round_trip() {
        let s = disk_sinogram(3, 5, 0.2);
        let back = Sinogram::from_text(&s.to_text(), s.spacing).unwrap();
        assert_eq!(back, s);
    }
}
