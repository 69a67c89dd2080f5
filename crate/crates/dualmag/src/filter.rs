//! IIR low-pass filter design and application.
//!
//! Butterworth and Chebyshev-I prototypes are computed in closed form;
//! Bessel (magnitude-normalized) and elliptic (0.5 dB ripple, 50 dB
//! stopband) prototypes are embedded as precomputed pole/zero tables for
//! orders 1–10. Designs are frequency-scaled, mapped with the bilinear
//! transform, and applied as cascaded biquads.

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::signal::Waveform;

#[derive(Error, Debug)]
pub enum FilterError {
    #[error("invalid cutoff {cutoff} Hz for sample rate {fs} Hz")]
    Cutoff { cutoff: f64, fs: f64 },
    #[error("unsupported order {order} for {family:?} (supported: {supported})")]
    Order {
        family: FilterFamily,
        order: usize,
        supported: &'static str,
    },
    #[error("unstable design: pole at radius {radius:.6} outside the unit circle")]
    Unstable { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterFamily {
    Butterworth,
    Bessel,
    Chebyshev1,
    Elliptic,
}

impl FilterFamily {
    /// Order used by the distortion recipe when none is given explicitly.
    pub fn default_order(&self) -> usize {
        match self {
            FilterFamily::Butterworth | FilterFamily::Bessel | FilterFamily::Chebyshev1 => 8,
            FilterFamily::Elliptic => 6,
        }
    }

    pub fn parse(s: &str) -> Option<FilterFamily> {
        match s.to_ascii_lowercase().as_str() {
            "butterworth" | "butter" => Some(FilterFamily::Butterworth),
            "bessel" => Some(FilterFamily::Bessel),
            "chebyshev1" | "cheby1" | "chebyshev" => Some(FilterFamily::Chebyshev1),
            "elliptic" | "ellip" => Some(FilterFamily::Elliptic),
            _ => None,
        }
    }
}

impl std::fmt::Display for FilterFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FilterFamily::Butterworth => "butterworth",
            FilterFamily::Bessel => "bessel",
            FilterFamily::Chebyshev1 => "chebyshev1",
            FilterFamily::Elliptic => "elliptic",
        };
        f.write_str(s)
    }
}

/// One second-order section, coefficients normalized so a0 == 1.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

/// Cascade of second-order sections.
#[derive(Debug, Clone)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Complex response at normalized angular frequency `w` (rad/sample).
    pub fn response(&self, w: f64) -> Complex<f64> {
        let z1 = Complex::from_polar(1.0, -w);
        let z2 = Complex::from_polar(1.0, -2.0 * w);
        let mut h = Complex::new(1.0, 0.0);
        for s in &self.sections {
            let num = s.b[0] + s.b[1] * z1 + s.b[2] * z2;
            let den = s.a[0] + s.a[1] * z1 + s.a[2] * z2;
            h *= num / den;
        }
        h
    }

    /// Magnitude response in dB at frequency `f` Hz.
    pub fn gain_db(&self, f: f64, fs: f64) -> f64 {
        20.0 * self.response(2.0 * PI * f / fs).norm().log10()
    }

    /// All pole radii (roots of each section's denominator).
    pub fn pole_radii(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.sections {
            // a0 z^2 + a1 z + a2 roots.
            let (a1, a2) = (s.a[1], s.a[2]);
            let disc = Complex::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
            let r1 = (Complex::new(-a1, 0.0) + disc) / 2.0;
            let r2 = (Complex::new(-a1, 0.0) - disc) / 2.0;
            out.push(r1.norm());
            out.push(r2.norm());
        }
        out
    }

    /// Applies the cascade (direct form II transposed, zero initial state).
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = x.to_vec();
        for s in &self.sections {
            let mut w1 = 0.0f64;
            let mut w2 = 0.0f64;
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b[0] * xin + w1;
                w1 = s.b[1] * xin - s.a[1] * out + w2;
                w2 = s.b[2] * xin - s.a[2] * out;
                *v = out;
            }
        }
        y
    }
}

type Zpk = (Vec<Complex<f64>>, Vec<Complex<f64>>, f64);

fn butter_ap(n: usize) -> Zpk {
    let poles = (1..=n)
        .map(|k| {
            let theta = PI * (2 * k + n - 1) as f64 / (2 * n) as f64;
            Complex::from_polar(1.0, theta)
        })
        .collect();
    (Vec::new(), poles, 1.0)
}

fn cheby1_ap(n: usize, ripple_db: f64) -> Zpk {
    let eps = (10f64.powf(ripple_db / 10.0) - 1.0).sqrt();
    let mu = (1.0 / eps).asinh() / n as f64;
    let poles: Vec<Complex<f64>> = (1..=n)
        .map(|k| {
            let theta = PI * (2 * k - 1) as f64 / (2 * n) as f64;
            Complex::new(-mu.sinh() * theta.sin(), mu.cosh() * theta.cos())
        })
        .collect();
    let mut k = poles.iter().fold(Complex::new(1.0, 0.0), |acc, p| acc * -p).re;
    if n % 2 == 0 {
        k /= (1.0 + eps * eps).sqrt();
    }
    (Vec::new(), poles, k)
}

fn bessel_ap(n: usize) -> Result<Zpk, FilterError> {
    let (poles, k) = match n {
        1 => BESSEL_1,
        2 => BESSEL_2,
        3 => BESSEL_3,
        4 => BESSEL_4,
        5 => BESSEL_5,
        6 => BESSEL_6,
        7 => BESSEL_7,
        8 => BESSEL_8,
        9 => BESSEL_9,
        10 => BESSEL_10,
        _ => {
            return Err(FilterError::Order {
                family: FilterFamily::Bessel,
                order: n,
                supported: "1-10",
            })
        }
    };
    Ok((Vec::new(), poles.to_vec(), k))
}

fn ellip_ap(n: usize) -> Result<Zpk, FilterError> {
    let (zeros, poles, k) = match n {
        1 => ELLIP_1,
        2 => ELLIP_2,
        3 => ELLIP_3,
        4 => ELLIP_4,
        5 => ELLIP_5,
        6 => ELLIP_6,
        7 => ELLIP_7,
        8 => ELLIP_8,
        9 => ELLIP_9,
        10 => ELLIP_10,
        _ => {
            return Err(FilterError::Order {
                family: FilterFamily::Elliptic,
                order: n,
                supported: "1-10",
            })
        }
    };
    Ok((zeros.to_vec(), poles.to_vec(), k))
}

fn lp2lp(zpk: Zpk, wc: f64) -> Zpk {
    let (z, p, k) = zpk;
    let degree = p.len() - z.len();
    let z2: Vec<_> = z.iter().map(|&zz| zz * wc).collect();
    let p2: Vec<_> = p.iter().map(|&pp| pp * wc).collect();
    (z2, p2, k * wc.powi(degree as i32))
}

fn bilinear(zpk: Zpk, fs: f64) -> Zpk {
    let (z, p, k) = zpk;
    let fs2 = 2.0 * fs;
    let degree = p.len() - z.len();
    let zd: Vec<_> = z.iter().map(|&s| (fs2 + s) / (fs2 - s)).collect();
    let pd: Vec<_> = p.iter().map(|&s| (fs2 + s) / (fs2 - s)).collect();
    let num = z.iter().fold(Complex::new(1.0, 0.0), |acc, &s| acc * (fs2 - s));
    let den = p.iter().fold(Complex::new(1.0, 0.0), |acc, &s| acc * (fs2 - s));
    let kd = k * (num / den).re;
    let mut zd = zd;
    // Zeros at infinity map to z = -1.
    zd.extend(std::iter::repeat(Complex::new(-1.0, 0.0)).take(degree));
    (zd, pd, kd)
}

/// Splits roots into complex-conjugate pairs (upper-half representative)
/// and reals.
fn split_pairs(roots: &[Complex<f64>]) -> (Vec<Complex<f64>>, Vec<f64>) {
    let mut pairs = Vec::new();
    let mut reals = Vec::new();
    for r in roots {
        if r.im.abs() < 1e-10 {
            reals.push(r.re);
        } else if r.im > 0.0 {
            pairs.push(*r);
        }
    }
    (pairs, reals)
}

fn zpk2sos(zpk: Zpk) -> Sos {
    let (z, p, k) = zpk;
    let (mut zp, mut zr) = split_pairs(&z);
    let (mut pp, mut pr) = split_pairs(&p);
    // Poles nearest the unit circle come first so each gets the closest
    // zero pair, keeping section gains tame.
    pp.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap());
    let mut sections = Vec::new();
    for pole in &pp {
        let a = [1.0, -2.0 * pole.re, pole.norm_sqr()];
        let b = if let Some(idx) = nearest_angle(&zp, pole.arg()) {
            let zz = zp.swap_remove(idx);
            [1.0, -2.0 * zz.re, zz.norm_sqr()]
        } else if zr.len() >= 2 {
            let z1 = zr.pop().unwrap();
            let z2 = zr.pop().unwrap();
            [1.0, -(z1 + z2), z1 * z2]
        } else if let Some(z1) = zr.pop() {
            [1.0, -z1, 0.0]
        } else {
            [1.0, 0.0, 0.0]
        };
        sections.push(Biquad { b, a });
    }
    // Leftover real poles in pairs, then a possible first-order tail.
    while let Some(p1) = pr.pop() {
        let (a, consumed_two) = if let Some(p2) = pr.pop() {
            ([1.0, -(p1 + p2), p1 * p2], true)
        } else {
            ([1.0, -p1, 0.0], false)
        };
        let b = if consumed_two && zr.len() >= 2 {
            let z1 = zr.pop().unwrap();
            let z2 = zr.pop().unwrap();
            [1.0, -(z1 + z2), z1 * z2]
        } else if let Some(z1) = zr.pop() {
            [1.0, -z1, 0.0]
        } else {
            [1.0, 0.0, 0.0]
        };
        sections.push(Biquad { b, a });
    }
    if sections.is_empty() {
        sections.push(Biquad {
            b: [1.0, 0.0, 0.0],
            a: [1.0, 0.0, 0.0],
        });
    }
    for c in sections[0].b.iter_mut() {
        *c *= k;
    }
    Sos { sections }
}

fn nearest_angle(pairs: &[Complex<f64>], target: f64) -> Option<usize> {
    pairs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (a.arg() - target)
                .abs()
                .partial_cmp(&(b.arg() - target).abs())
                .unwrap()
        })
        .map(|(i, _)| i)
}

/// Designs a digital low-pass filter with the given family, order, and
/// -3 dB/edge frequency, via bilinear transform with pre-warping.
pub fn design_lowpass(
    family: FilterFamily,
    order: usize,
    cutoff_hz: f64,
    fs: f64,
) -> Result<Sos, FilterError> {
    if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(FilterError::Cutoff {
            cutoff: cutoff_hz,
            fs,
        });
    }
    if order == 0 || (order > 10 && matches!(family, FilterFamily::Bessel | FilterFamily::Elliptic))
    {
        return Err(FilterError::Order {
            family,
            order,
            supported: "1-10",
        });
    }
    let proto = match family {
        FilterFamily::Butterworth => butter_ap(order),
        FilterFamily::Chebyshev1 => cheby1_ap(order, 0.5),
        FilterFamily::Bessel => bessel_ap(order)?,
        FilterFamily::Elliptic => ellip_ap(order)?,
    };
    let warped = 2.0 * fs * (PI * cutoff_hz / fs).tan();
    let analog = lp2lp(proto, warped);
    let digital = bilinear(analog, fs);
    let max_radius = digital
        .1
        .iter()
        .map(|p| p.norm())
        .fold(0.0f64, f64::max);
    if max_radius >= 1.0 {
        return Err(FilterError::Unstable { radius: max_radius });
    }
    Ok(zpk2sos(digital))
}

/// Low-pass filters a waveform in place of the distortion recipe's `h`.
pub fn lowpass(
    x: &Waveform,
    family: FilterFamily,
    order: usize,
    cutoff_hz: f64,
) -> Result<Waveform, FilterError> {
    let sos = design_lowpass(family, order, cutoff_hz, x.sample_rate as f64)?;
    let mut out = Waveform::new(sos.filter(&x.samples), x.id.clone());
    out.sample_rate = x.sample_rate;
    Ok(out)
}

include!("filter_prototypes.rs");
