//! Layer thickness from a clean single-component mask.
//!
//! The layer is assumed to run along `x` with its thickness along `y`. Pixel
//! `(x, y)` is treated as the unit square centred on `(x, y)`, so a column
//! whose mask rows span `top..=bottom` has its upper edge at `top - 0.5` and
//! its lower edge at `bottom + 0.5`.
//!
//! Two estimators are provided:
//!
//! * **orthogonal** — boundary midpoints are fitted with a least-squares line
//!   and, from every midpoint, a ray is cast both ways along the line's
//!   normal. The rays are intersected exactly with the piecewise-linear upper
//!   and lower edges, so lengths are sub-pixel.
//! * **three-line** — the legacy manual procedure: three axis-aligned chords
//!   at 25%, 50% and 75% of the occupied column range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BinaryMask;

/// Minimum number of orthogonal samples for a report to be accepted.
pub const MIN_SAMPLES: usize = 10;

/// tan(60 deg); steeper midlines are rejected.
const MAX_SLOPE: f64 = 1.732_050_807_568_877_2;

/// Per-column extremes of the mask, for one contiguous run of columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryColumns {
    pub first_column: usize,
    /// Smallest mask row per column.
    pub top: Vec<f64>,
    /// Largest mask row per column.
    pub bottom: Vec<f64>,
}

impl BoundaryColumns {
    pub fn len(&self) -> usize {
        self.top.len()
    }

    pub fn is_empty(&self) -> bool {
        self.top.is_empty()
    }

    pub fn column(&self, i: usize) -> f64 {
        (self.first_column + i) as f64
    }

    pub fn columns(&self) -> impl Iterator<Item = usize> + '_ {
        self.first_column..self.first_column + self.len()
    }

    /// Pixel count spanned by column `i`, holes included.
    pub fn chord(&self, i: usize) -> f64 {
        self.bottom[i] - self.top[i] + 1.0
    }

    fn upper_edge(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| (self.column(i), self.top[i] - 0.5)).collect()
    }

    fn lower_edge(&self) -> Vec<(f64, f64)> {
        (0..self.len())
            .map(|i| (self.column(i), self.bottom[i] + 0.5))
            .collect()
    }
}

pub fn extract_boundaries(mask: &BinaryMask) -> Result<BoundaryColumns> {
    let (w, h) = mask.dims();
    let extremes: Vec<Option<(usize, usize)>> = (0..w)
        .map(|x| {
            let top = (0..h).find(|&y| mask.get(x, y))?;
            let bottom = (0..h).rev().find(|&y| mask.get(x, y))?;
            Some((top, bottom))
        })
        .collect();
    let first = extremes
        .iter()
        .position(Option::is_some)
        .ok_or(Error::EmptyPrediction)?;
    let last = extremes.iter().rposition(Option::is_some).unwrap();
    if let Some(gap) = (first..=last).find(|&x| extremes[x].is_none()) {
        return Err(Error::NonContiguousColumns { after: gap - 1 });
    }
    let (top, bottom) = extremes[first..=last]
        .iter()
        .map(|e| {
            let (t, b) = e.unwrap();
            (t as f64, b as f64)
        })
        .unzip();
    Ok(BoundaryColumns {
        first_column: first,
        top,
        bottom,
    })
}

/// One `(x, (top + bottom) / 2)` point per occupied column.
pub fn midpoints(b: &BoundaryColumns) -> Vec<(f64, f64)> {
    (0..b.len())
        .map(|i| (b.column(i), (b.top[i] + b.bottom[i]) / 2.0))
        .collect()
}

/// Least-squares line `y = slope * x + intercept` through the midpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MidlineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Unit normal, oriented towards increasing `y`.
    pub normal: (f64, f64),
    pub residual_rms: f64,
}

impl MidlineFit {
    pub fn direction(&self) -> (f64, f64) {
        let norm = self.slope.hypot(1.0);
        (1.0 / norm, self.slope / norm)
    }
}

/// Ordinary least squares on vertical residuals.
pub fn fit_regression_line(points: &[(f64, f64)]) -> Result<MidlineFit> {
    let (slope, intercept) = ols(points)?;
    if slope.abs() > MAX_SLOPE {
        return Err(Error::SteepLayer { slope });
    }
    let ss: f64 = points.iter().map(|&(x, y)| (y - (slope * x + intercept)).powi(2)).sum();
    let norm = slope.hypot(1.0);
    Ok(MidlineFit {
        slope,
        intercept,
        normal: (-slope / norm, 1.0 / norm),
        residual_rms: (ss / points.len() as f64).sqrt(),
    })
}

/// Centered closed-form OLS; shared with the comparison fit in `metrics`.
pub(crate) fn ols(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 2 {
        return Err(Error::DegenerateFit);
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThicknessSample {
    pub anchor: (f64, f64),
    pub upper_hit: (f64, f64),
    pub lower_hit: (f64, f64),
    pub length: f64,
}

impl ThicknessSample {
    fn between(anchor: (f64, f64), upper_hit: (f64, f64), lower_hit: (f64, f64)) -> Self {
        let length = (lower_hit.0 - upper_hit.0).hypot(lower_hit.1 - upper_hit.1);
        Self {
            anchor,
            upper_hit,
            lower_hit,
            length,
        }
    }
}

fn cross(a: (f64, f64), b: (f64, f64)) -> f64 {
    a.0 * b.1 - a.1 * b.0
}

/// Distance along the ray to its first crossing of the polyline, if any.
fn first_crossing(origin: (f64, f64), dir: (f64, f64), polyline: &[(f64, f64)]) -> Option<f64> {
    const EPS: f64 = 1e-12;
    polyline
        .windows(2)
        .filter_map(|seg| {
            let (p, q) = (seg[0], seg[1]);
            let e = (q.0 - p.0, q.1 - p.1);
            let denom = cross(dir, e);
            if denom.abs() < EPS {
                return None;
            }
            let op = (p.0 - origin.0, p.1 - origin.1);
            let s = cross(op, e) / denom;
            let u = cross(op, dir) / denom;
            (s > 0.0 && (-EPS..=1.0 + EPS).contains(&u)).then_some(s)
        })
        .min_by(f64::total_cmp)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Casts one normal ray pair per midpoint, skipping `ceil(median chord)`
/// columns at each end where rays would leave through the open band ends.
pub fn orthogonal_samples(b: &BoundaryColumns, fit: &MidlineFit) -> Result<Vec<ThicknessSample>> {
    let n_cols = b.len();
    let mut chords: Vec<f64> = (0..n_cols).map(|i| b.chord(i)).collect();
    let guard = if chords.is_empty() {
        0
    } else {
        median(&mut chords).ceil() as usize
    };
    let upper = b.upper_edge();
    let lower = b.lower_edge();
    let n = fit.normal;
    let up = (-n.0, -n.1);

    let samples: Vec<ThicknessSample> = midpoints(b)
        .into_iter()
        .enumerate()
        .filter(|&(i, _)| i >= guard && n_cols - 1 - i >= guard)
        .filter_map(|(_, anchor)| {
            let s_up = first_crossing(anchor, up, &upper)?;
            let s_down = first_crossing(anchor, n, &lower)?;
            Some(ThicknessSample::between(
                anchor,
                (anchor.0 + s_up * up.0, anchor.1 + s_up * up.1),
                (anchor.0 + s_down * n.0, anchor.1 + s_down * n.1),
            ))
        })
        .collect();

    if samples.len() < MIN_SAMPLES {
        return Err(Error::InsufficientCoverage {
            valid: samples.len(),
            required: MIN_SAMPLES,
        });
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Orthogonal,
    ThreeLine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThicknessReport {
    pub method: Method,
    pub samples: Vec<ThicknessSample>,
    pub mean: f64,
    /// Sample standard deviation (divisor `n - 1`).
    pub sd: f64,
    pub n: usize,
    /// Physical units per pixel, e.g. nm/px.
    pub scale: f64,
    pub mean_scaled: f64,
    pub sd_scaled: f64,
}

impl ThicknessReport {
    pub fn from_samples(method: Method, samples: Vec<ThicknessSample>, scale: f64) -> Self {
        let n = samples.len();
        let mean = samples.iter().map(|s| s.length).sum::<f64>() / n as f64;
        let sd = if n > 1 {
            let ss: f64 = samples.iter().map(|s| (s.length - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            method,
            samples,
            mean,
            sd,
            n,
            scale,
            mean_scaled: mean * scale,
            sd_scaled: sd * scale,
        }
    }

    /// Serializable form with the given file name.
    pub fn to_record(&self, file: &str) -> ReportRecord {
        ReportRecord {
            file: file.to_owned(),
            method: self.method,
            n: self.n,
            mean_px: self.mean,
            sd_px: self.sd,
            scale_nm_per_px: self.scale,
            mean_nm: self.mean_scaled,
            sd_nm: self.sd_scaled,
            samples: self
                .samples
                .iter()
                .map(|s| SampleRecord {
                    x: s.anchor.0,
                    y: s.anchor.1,
                    len_px: s.length,
                })
                .collect(),
        }
    }
}

/// JSON shape of a thickness report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub file: String,
    pub method: Method,
    pub n: usize,
    pub mean_px: f64,
    pub sd_px: f64,
    pub scale_nm_per_px: f64,
    pub mean_nm: f64,
    pub sd_nm: f64,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub x: f64,
    pub y: f64,
    pub len_px: f64,
}

fn check_scale(scale: f64) -> Result<()> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("scale must be positive, got {scale}")))
    }
}

/// Mean of the perpendicular chords to the midline regression line.
pub fn orthogonal_report(mask: &BinaryMask, scale: f64) -> Result<ThicknessReport> {
    check_scale(scale)?;
    let b = extract_boundaries(mask)?;
    let fit = fit_regression_line(&midpoints(&b))?;
    let samples = orthogonal_samples(&b, &fit)?;
    Ok(ThicknessReport::from_samples(Method::Orthogonal, samples, scale))
}

/// Three axis-aligned chords at 25/50/75% of the occupied column range.
pub fn three_line_report(mask: &BinaryMask, scale: f64) -> Result<ThicknessReport> {
    check_scale(scale)?;
    let b = extract_boundaries(mask)?;
    let extent = b.len() as f64;
    let samples = [0.25, 0.5, 0.75]
        .iter()
        .map(|&p| {
            let i = ((p * extent).floor() as usize).min(b.len() - 1);
            let x = b.column(i);
            ThicknessSample::between(
                (x, (b.top[i] + b.bottom[i]) / 2.0),
                (x, b.top[i] - 0.5),
                (x, b.bottom[i] + 0.5),
            )
        })
        .collect();
    Ok(ThicknessReport::from_samples(Method::ThreeLine, samples, scale))
}
