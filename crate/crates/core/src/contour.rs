//! Fourier description of closed loop contours given in polar form.
//!
//! A contour is a radius function `R(phi) = a0 + sum_h [a_h cos(h phi) + b_h sin(h phi)]`
//! on `phi in [0, 2pi)`. The same harmonics can be written in amplitude-phase
//! form `A_h cos(h phi - phi_h)` with `a_h = A_h cos phi_h`, `b_h = A_h sin phi_h`.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourCoefficients {
    pub a0: f64,
    /// `(a_h, b_h)` for h = 1..=H.
    pub pairs: Vec<(f64, f64)>,
}

impl ContourCoefficients {
    pub fn new(a0: f64, pairs: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::BadValue("at least one harmonic required".into()));
        }
        let finite = a0.is_finite() && pairs.iter().all(|(a, b)| a.is_finite() && b.is_finite());
        if !finite {
            return Err(Error::BadValue("non-finite Fourier coefficient".into()));
        }
        Ok(Self { a0, pairs })
    }

    pub fn harmonics(&self) -> usize {
        self.pairs.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudePhase {
    pub a0: f64,
    /// `(A_h, phi_h)` with `A_h >= 0` and `phi_h` in `[0, 2pi)`.
    pub pairs: Vec<(f64, f64)>,
}

/// Polar samples `(phi, r)`, phis strictly increasing in `[0, 2pi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarContour {
    samples: Vec<(f64, f64)>,
}

impl PolarContour {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::BadValue("polar angles must be strictly increasing".into()));
            }
        }
        if let Some(&(phi, _)) = samples.iter().find(|(phi, _)| !(0.0..TAU).contains(phi)) {
            return Err(Error::BadValue(format!("angle {phi} outside [0, 2pi)")));
        }
        if let Some(&(_, r)) = samples.iter().find(|(_, r)| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::BadValue(format!("radius {r} is not positive")));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same angles with every radius multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.samples.iter().map(|&(p, r)| (p, r * factor)).collect())
    }

    /// Cartesian points (x, y) around the pole, in sample order.
    pub fn to_cartesian(&self) -> Vec<(f64, f64)> {
        self.samples
            .iter()
            .map(|&(phi, r)| (r * phi.cos(), r * phi.sin()))
            .collect()
    }
}

pub fn eval_radius(c: &ContourCoefficients, phi: f64) -> f64 {
    c.pairs
        .iter()
        .enumerate()
        .fold(c.a0, |acc, (i, &(a, b))| {
            let h = (i + 1) as f64;
            acc + a * (h * phi).cos() + b * (h * phi).sin()
        })
}

fn wrap_angle(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

pub fn to_amplitude_phase(c: &ContourCoefficients) -> AmplitudePhase {
    AmplitudePhase {
        a0: c.a0,
        pairs: c
            .pairs
            .iter()
            .map(|&(a, b)| {
                let amp = a.hypot(b);
                if amp == 0.0 {
                    (0.0, 0.0)
                } else {
                    (amp, wrap_angle(b.atan2(a)))
                }
            })
            .collect(),
    }
}

pub fn from_amplitude_phase(d: &AmplitudePhase) -> Result<ContourCoefficients> {
    let pairs = d
        .pairs
        .iter()
        .map(|&(amp, phase)| {
            if amp < 0.0 {
                Err(Error::BadAmplitude(amp))
            } else {
                Ok((amp * phase.cos(), amp * phase.sin()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ContourCoefficients::new(d.a0, pairs)
}

/// Least-squares fit of `harmonics` harmonic pairs on the design
/// `[1, cos(h phi), sin(h phi)]`.
pub fn fit_coefficients(pc: &PolarContour, harmonics: usize) -> Result<ContourCoefficients> {
    let n = pc.len();
    let cols = 2 * harmonics + 1;
    if harmonics == 0 || n < cols {
        return Err(Error::Underdetermined {
            samples: n,
            harmonics,
        });
    }
    let design = DMatrix::from_fn(n, cols, |i, j| {
        let phi = pc.samples[i].0;
        if j == 0 {
            1.0
        } else {
            let h = ((j + 1) / 2) as f64;
            if j % 2 == 1 {
                (h * phi).cos()
            } else {
                (h * phi).sin()
            }
        }
    });
    let r = DVector::from_iterator(n, pc.samples.iter().map(|s| s.1));
    let beta = design
        .svd(true, true)
        .solve(&r, 1e-12)
        .map_err(|e| Error::BadValue(format!("least squares failed: {e}")))?;
    let pairs = (0..harmonics)
        .map(|h| (beta[2 * h + 1], beta[2 * h + 2]))
        .collect();
    ContourCoefficients::new(beta[0], pairs)
}

/// Enclosed area by the periodic trapezoidal rule on `r^2 / 2`.
pub fn surface_area(pc: &PolarContour) -> Result<f64> {
    let s = &pc.samples;
    if s.len() < 3 {
        return Err(Error::BadValue(format!(
            "area needs at least 3 samples, got {}",
            s.len()
        )));
    }
    let n = s.len();
    let area = (0..n)
        .map(|k| {
            let (phi0, r0) = s[k];
            let (phi1, r1) = if k + 1 < n {
                s[k + 1]
            } else {
                (s[0].0 + TAU, s[0].1)
            };
            0.25 * (r0 * r0 + r1 * r1) * (phi1 - phi0)
        })
        .sum();
    Ok(area)
}

/// Rescales radii so the enclosed area is 1; returns the original area,
/// which is the surface-size feature.
pub fn normalize_contour(pc: &PolarContour) -> Result<(PolarContour, f64)> {
    let area = surface_area(pc)?;
    if !(area > 0.0) {
        return Err(Error::DegenerateContour(area));
    }
    Ok((pc.scaled(1.0 / area.sqrt())?, area))
}

/// Samples the radius function at `n_points` equally spaced angles.
pub fn render_contour(c: &ContourCoefficients, n_points: usize) -> Result<PolarContour> {
    if n_points < 3 {
        return Err(Error::BadValue(format!(
            "rendering needs at least 3 points, got {n_points}"
        )));
    }
    let step = TAU / n_points as f64;
    let samples = (0..n_points)
        .map(|k| {
            let phi = k as f64 * step;
            (phi, eval_radius(c, phi))
        })
        .collect();
    // radii may be nonpositive for wild coefficients; keep them for plotting
    Ok(PolarContour { samples })
}

/// Renders the closed curve as an SVG document with a single path.
pub fn to_svg(pc: &PolarContour, size: f64) -> String {
    let pts = pc.to_cartesian();
    let extent = pts
        .iter()
        .fold(0.0f64, |m, (x, y)| m.max(x.abs()).max(y.abs()))
        .max(f64::MIN_POSITIVE);
    let scale = 0.45 * size / extent;
    let mut d = String::new();
    for (i, (x, y)) in pts.iter().enumerate() {
        let (sx, sy) = (0.5 * size + scale * x, 0.5 * size - scale * y);
        d.push_str(&format!("{}{sx:.4} {sy:.4} ", if i == 0 { "M" } else { "L" }));
    }
    d.push('Z');
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n  <path d=\"{d}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n</svg>\n"
    )
}
