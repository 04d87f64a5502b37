//! Synthetic layered micrographs with analytically known geometry.
//!
//! A bright band of perpendicular thickness `t` follows the centerline
//!
//! ```text
//! c(x) = H/2 + tan(theta) * (x - W/2) + kappa * sin(2 pi x / W)
//! ```
//!
//! in continuous image coordinates where pixel `(i, j)` has its center at
//! `(i + 0.5, j + 0.5)`. A pixel belongs to the layer iff its center lies
//! within `t / 2` of the curve; the distance is taken as the minimum over
//! curve samples spaced a quarter column apart.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{normalize, BinaryMask, GrayImage};
use crate::pgm;

const CURVE_SAMPLES_PER_PX: f64 = 4.0;
const MAX_TILT_DEG: f64 = 35.0;
const MIN_THICKNESS: f64 = 3.0;
const MIN_CONTRAST: f64 = 0.1;

/// Parameters of one synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    /// Perpendicular layer thickness, px.
    pub thickness: f64,
    pub tilt_deg: f64,
    /// Amplitude of the one-period sinusoidal bow, px.
    pub curvature: f64,
    /// Standard deviation of additive Gaussian noise, intensity units.
    pub noise: f64,
    pub layer_brightness: f64,
    pub upper_brightness: f64,
    pub lower_brightness: f64,
    pub blur_radius: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 64,
            thickness: 10.0,
            tilt_deg: 0.0,
            curvature: 0.0,
            noise: 0.0,
            layer_brightness: 0.85,
            upper_brightness: 0.3,
            lower_brightness: 0.2,
            blur_radius: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn centerline(&self, x: f64) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        h / 2.0 + self.tilt_deg.to_radians().tan() * (x - w / 2.0) + self.curvature * (2.0 * PI * x / w).sin()
    }

    fn max_abs_slope(&self) -> f64 {
        self.tilt_deg.to_radians().tan().abs() + self.curvature * 2.0 * PI / self.width as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.width == 0 || self.height == 0 {
            return bad(format!("empty image {}x{}", self.width, self.height));
        }
        let finite = [
            self.thickness,
            self.tilt_deg,
            self.curvature,
            self.noise,
            self.layer_brightness,
            self.upper_brightness,
            self.lower_brightness,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        if self.tilt_deg.abs() > MAX_TILT_DEG {
            return bad(format!("tilt {} outside [-35, 35] degrees", self.tilt_deg));
        }
        if self.thickness < MIN_THICKNESS {
            return bad(format!("thickness {} below {MIN_THICKNESS}", self.thickness));
        }
        if self.curvature < 0.0 || self.noise < 0.0 {
            return bad("curvature and noise must be non-negative".into());
        }
        if self.thickness + 2.0 * self.curvature > self.height as f64 / 2.0 {
            return bad(format!(
                "thickness + 2*curvature = {} exceeds half the height {}",
                self.thickness + 2.0 * self.curvature,
                self.height as f64 / 2.0
            ));
        }
        for (name, v) in [
            ("layer", self.layer_brightness),
            ("upper", self.upper_brightness),
            ("lower", self.lower_brightness),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} brightness {v} outside [0, 1]"));
            }
        }
        if self.layer_brightness <= self.upper_brightness.max(self.lower_brightness) + MIN_CONTRAST {
            return bad("layer must be brighter than both neighbours by more than 0.1".into());
        }
        // the band plus a one-pixel margin must stay inside the frame at every column
        let half_extent = self.thickness / 2.0 * (1.0 + self.max_abs_slope().powi(2)).sqrt();
        let steps = (self.width as f64 * CURVE_SAMPLES_PER_PX) as usize;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..=steps {
            let c = self.centerline(k as f64 / CURVE_SAMPLES_PER_PX);
            lo = lo.min(c);
            hi = hi.max(c);
        }
        if lo - half_extent < 1.0 || hi + half_extent > self.height as f64 - 1.0 {
            return bad(format!(
                "layer spans rows {:.1}..{:.1}, outside the {}-row frame",
                lo - half_extent,
                hi + half_extent,
                self.height
            ));
        }
        Ok(())
    }
}

/// Generated image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: GrayImage,
    pub truth_mask: BinaryMask,
    pub true_thickness: f64,
    pub spec: SynthSpec,
}

/// Renders one sample; deterministic in `spec` (including its seed).
pub fn generate(spec: &SynthSpec) -> Result<SynthSample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let half = spec.thickness / 2.0;
    let reach = half + 0.5;

    let mut mask = BinaryMask::empty(w, h);
    let mut intensity = vec![0.0; w * h];
    for x in 0..w {
        let cx = x as f64 + 0.5;
        let k_lo = ((cx - reach) * CURVE_SAMPLES_PER_PX).ceil() as i64;
        let k_hi = ((cx + reach) * CURVE_SAMPLES_PER_PX).floor() as i64;
        let curve: Vec<(f64, f64)> = (k_lo..=k_hi)
            .map(|k| {
                let sx = k as f64 / CURVE_SAMPLES_PER_PX;
                (sx, spec.centerline(sx))
            })
            .collect();
        let c_here = spec.centerline(cx);
        for y in 0..h {
            let cy = y as f64 + 0.5;
            let d2 = curve
                .iter()
                .map(|&(sx, sy)| (sx - cx).powi(2) + (sy - cy).powi(2))
                .fold(f64::INFINITY, f64::min);
            let value = if d2 <= half * half {
                mask.set(x, y, true);
                spec.layer_brightness
            } else if cy < c_here {
                spec.upper_brightness
            } else {
                spec.lower_brightness
            };
            intensity[y * w + x] = value;
        }
    }

    if spec.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for v in intensity.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v + spec.noise * n).clamp(0.0, 1.0);
        }
    }
    if spec.blur_radius > 0 {
        intensity = box_blur(&intensity, w, h, spec.blur_radius);
    }

    Ok(SynthSample {
        image: GrayImage::new(w, h, intensity)?,
        truth_mask: mask,
        true_thickness: spec.thickness,
        spec: *spec,
    })
}

/// Mean over the `(2r+1)^2` window, clipped at the borders.
fn box_blur(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (x.saturating_sub(r), (x + r).min(w - 1));
            let s: f64 = src[y * w + a..=y * w + b].iter().sum();
            tmp[y * w + x] = s / (b - a + 1) as f64;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (a, b) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let s: f64 = (a..=b).map(|yy| tmp[yy * w + x]).sum();
            out[y * w + x] = (s / (b - a + 1) as f64).clamp(0.0, 1.0);
        }
    }
    out
}

/// Inclusive parameter ranges for batch generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRanges {
    pub width: usize,
    pub height: usize,
    pub thickness: (f64, f64),
    pub tilt_deg: (f64, f64),
    pub curvature: (f64, f64),
    pub noise: (f64, f64),
    pub layer_brightness: (f64, f64),
    pub upper_brightness: (f64, f64),
    pub lower_brightness: (f64, f64),
    pub blur_radius: (usize, usize),
}

impl Default for BatchRanges {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            thickness: (6.0, 12.0),
            tilt_deg: (-20.0, 20.0),
            curvature: (0.0, 0.0),
            noise: (0.0, 0.05),
            layer_brightness: (0.75, 0.95),
            upper_brightness: (0.15, 0.45),
            lower_brightness: (0.1, 0.4),
            blur_radius: (0, 1),
        }
    }
}

impl BatchRanges {
    /// Checks every bound is ordered and that the extreme corner of the
    /// range still yields a valid spec.
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("thickness", self.thickness),
            ("tilt", self.tilt_deg),
            ("curvature", self.curvature),
            ("noise", self.noise),
            ("layer brightness", self.layer_brightness),
            ("upper brightness", self.upper_brightness),
            ("lower brightness", self.lower_brightness),
        ];
        for (name, (lo, hi)) in pairs {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InfeasibleRanges(format!("{name} range {lo}:{hi}")));
            }
        }
        if self.blur_radius.0 > self.blur_radius.1 {
            return Err(Error::InfeasibleRanges("blur radius range".into()));
        }
        let worst_tilt = if self.tilt_deg.0.abs() > self.tilt_deg.1.abs() {
            self.tilt_deg.0
        } else {
            self.tilt_deg.1
        };
        let worst = SynthSpec {
            width: self.width,
            height: self.height,
            thickness: self.thickness.1,
            tilt_deg: worst_tilt,
            curvature: self.curvature.1,
            noise: self.noise.1,
            layer_brightness: self.layer_brightness.0,
            upper_brightness: self.upper_brightness.1,
            lower_brightness: self.lower_brightness.1,
            blur_radius: self.blur_radius.1,
            seed: 0,
        };
        let least = SynthSpec {
            thickness: self.thickness.0,
            tilt_deg: if self.tilt_deg.0 * self.tilt_deg.1 <= 0.0 {
                0.0
            } else {
                self.tilt_deg.0.abs().min(self.tilt_deg.1.abs())
            },
            curvature: self.curvature.0,
            noise: self.noise.0,
            ..worst
        };
        least
            .validate()
            .and_then(|_| worst.validate())
            .map_err(|e| Error::InfeasibleRanges(e.to_string()))
    }
}

/// SplitMix64 finalizer; decorrelates per-index streams.
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Spec of sample `index` in the batch seeded by `seed`.
pub fn draw_spec(ranges: &BatchRanges, seed: u64, index: usize) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index as u64));
    let mut uniform = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let thickness = uniform(ranges.thickness);
    let tilt_deg = uniform(ranges.tilt_deg);
    let curvature = uniform(ranges.curvature);
    let noise = uniform(ranges.noise);
    let layer_brightness = uniform(ranges.layer_brightness);
    let upper_brightness = uniform(ranges.upper_brightness);
    let lower_brightness = uniform(ranges.lower_brightness);
    let blur_radius = rng.random_range(ranges.blur_radius.0..=ranges.blur_radius.1);
    SynthSpec {
        width: ranges.width,
        height: ranges.height,
        thickness,
        tilt_deg,
        curvature,
        noise,
        layer_brightness,
        upper_brightness,
        lower_brightness,
        blur_radius,
        seed: rng.next_u64(),
    }
}

pub fn generate_batch(n: usize, ranges: &BatchRanges, seed: u64) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::InvalidConfig("batch size n must be at least 1".into()));
    }
    ranges.validate()?;
    (0..n).map(|i| generate(&draw_spec(ranges, seed, i))).collect()
}

/// One line of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub true_thickness: f64,
    pub tilt_deg: f64,
    pub curvature: f64,
    pub noise: f64,
    pub seed: u64,
}

pub fn image_file_name(index: usize) -> String {
    format!("img_{index:04}.pgm")
}

pub fn mask_file_name(index: usize) -> String {
    format!("mask_{index:04}.pgm")
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `img_NNNN.pgm`, `mask_NNNN.pgm` and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[SynthSample]) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        fs::write(dir.join(image_file_name(index)), pgm::write_pgm(&s.image.to_gray8()))?;
        fs::write(dir.join(mask_file_name(index)), pgm::mask_to_pgm(&s.truth_mask))?;
        manifest.push(ManifestEntry {
            index,
            true_thickness: s.true_thickness,
            tilt_deg: s.spec.tilt_deg,
            curvature: s.spec.curvature,
            noise: s.spec.noise,
            seed: s.spec.seed,
        });
    }
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

/// A sample loaded back from a dataset directory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub entry: ManifestEntry,
    pub image: GrayImage,
    pub mask: BinaryMask,
}

/// Reads a directory written by [`write_dataset`]. Every unreadable file is
/// named in the error, not just the first.
pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedSample>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let mut out = Vec::with_capacity(manifest.len());
    let mut broken = Vec::new();
    for entry in manifest {
        let img_name = image_file_name(entry.index);
        let mask_name = mask_file_name(entry.index);
        let image = fs::read(dir.join(&img_name))
            .map_err(Error::from)
            .and_then(|b| normalize(&pgm::read_pgm(&b)?));
        let mask = fs::read(dir.join(&mask_name))
            .map_err(Error::from)
            .and_then(|b| pgm::pgm_to_mask(&b));
        match (image, mask) {
            (Ok(image), Ok(mask)) => out.push(LoadedSample { entry, image, mask }),
            (image, mask) => {
                if let Err(e) = image {
                    broken.push(format!("{img_name}: {e}"));
                }
                if let Err(e) = mask {
                    broken.push(format!("{mask_name}: {e}"));
                }
            }
        }
    }
    if !broken.is_empty() {
        return Err(Error::CorruptFiles(broken));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::{label_components, Connectivity};

    fn flat(t: f64) -> SynthSpec {
        SynthSpec {
            thickness: t,
            ..SynthSpec::default()
        }
    }

    fn column_extent(mask: &BinaryMask, x: usize) -> Option<(usize, usize)> {
        let rows: Vec<usize> = (0..mask.height()).filter(|&y| mask.get(x, y)).collect();
        Some((*rows.first()?, *rows.last()?))
    }

    #[test]
    fn flat_band_is_exactly_t_rows() {
        let s = generate(&flat(10.0)).unwrap();
        for x in 0..s.spec.width {
            let (top, bottom) = column_extent(&s.truth_mask, x).unwrap();
            assert_eq!(bottom - top + 1, 10, "column {x}");
            assert_eq!(top, 27);
            let count = (0..s.spec.height).filter(|&y| s.truth_mask.get(x, y)).count();
            assert_eq!(count, 10);
        }
    }

    #[test]
    fn tilted_chords_match_secant() {
        let spec = SynthSpec {
            width: 128,
            height: 128,
            tilt_deg: 30.0,
            ..flat(10.0)
        };
        let s = generate(&spec).unwrap();
        let expected = 10.0 / 30f64.to_radians().cos();
        for x in 0..spec.width {
            let (top, bottom) = column_extent(&s.truth_mask, x).unwrap();
            let chord = (bottom - top + 1) as f64;
            assert!((chord - expected).abs() <= 1.0, "column {x}: {chord} vs {expected}");
        }
    }

    #[test]
    fn noiseless_intensities_are_exact() {
        let s = generate(&SynthSpec {
            tilt_deg: 12.0,
            curvature: 3.0,
            ..flat(8.0)
        })
        .unwrap();
        let (w, h) = s.image.dims();
        let mut inside = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = s.image.get(x, y);
                if s.truth_mask.get(x, y) {
                    inside.push(v);
                } else {
                    assert!(v == s.spec.upper_brightness || v == s.spec.lower_brightness);
                }
            }
        }
        let mean = inside.iter().sum::<f64>() / inside.len() as f64;
        assert!((mean - s.spec.layer_brightness).abs() < 1e-12);
    }

    #[test]
    fn area_matches_thickness_times_arc_length() {
        for (t, tilt) in [(6.0, 0.0), (9.5, 15.0), (12.0, -25.0)] {
            let spec = SynthSpec {
                width: 128,
                height: 160,
                tilt_deg: tilt,
                ..flat(t)
            };
            let s = generate(&spec).unwrap();
            let expected = t * spec.width as f64 / f64::to_radians(tilt).cos();
            let area = s.truth_mask.area() as f64;
            assert!((area - expected).abs() / expected < 0.05, "{area} vs {expected}");
        }
    }

    #[test]
    fn mask_is_one_component() {
        let s = generate(&SynthSpec {
            tilt_deg: -20.0,
            curvature: 4.0,
            ..flat(5.0)
        })
        .unwrap();
        assert_eq!(label_components(&s.truth_mask, Connectivity::Eight).len(), 1);
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SynthSpec {
            noise: 0.08,
            blur_radius: 1,
            seed: 42,
            ..flat(10.0)
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = generate(&SynthSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(other.image, generate(&spec).unwrap().image);
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = flat(10.0);
        for bad in [
            SynthSpec { thickness: 2.0, ..base },
            SynthSpec { tilt_deg: 40.0, ..base },
            SynthSpec {
                thickness: 20.0,
                curvature: 7.0,
                ..base
            },
            SynthSpec {
                layer_brightness: 0.35,
                ..base
            },
            SynthSpec { noise: -0.1, ..base },
            SynthSpec { tilt_deg: 30.0, ..base },
        ] {
            assert!(matches!(generate(&bad), Err(Error::InvalidSpec(_))), "{bad:?}");
        }
    }

    #[test]
    fn batch_of_one_matches_direct_generation() {
        let ranges = BatchRanges::default();
        let batch = generate_batch(1, &ranges, 9).unwrap();
        assert_eq!(batch[0], generate(&draw_spec(&ranges, 9, 0)).unwrap());
    }

    #[test]
    fn batch_thickness_within_range() {
        let ranges = BatchRanges {
            thickness: (6.0, 16.0),
            tilt_deg: (-5.0, 5.0),
            ..BatchRanges::default()
        };
        let batch = generate_batch(200, &ranges, 3).unwrap();
        assert_eq!(batch.len(), 200);
        assert!(batch.iter().all(|s| (6.0..=16.0).contains(&s.true_thickness)));
    }

    #[test]
    fn infeasible_ranges_rejected() {
        let too_thick = BatchRanges {
            thickness: (6.0, 40.0),
            ..BatchRanges::default()
        };
        assert!(matches!(
            generate_batch(3, &too_thick, 0),
            Err(Error::InfeasibleRanges(_))
        ));
        let inverted = BatchRanges {
            noise: (0.2, 0.1),
            ..BatchRanges::default()
        };
        assert!(inverted.validate().is_err());
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let ranges = BatchRanges::default();
        for dir in [&dir_a, &dir_b] {
            write_dataset(dir.path(), &generate_batch(3, &ranges, 11).unwrap()).unwrap();
        }
        for name in [MANIFEST_FILE, "img_0002.pgm", "mask_0000.pgm"] {
            assert_eq!(
                fs::read(dir_a.path().join(name)).unwrap(),
                fs::read(dir_b.path().join(name)).unwrap()
            );
        }
        let loaded = load_dataset(dir_a.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        let direct = generate(&draw_spec(&ranges, 11, 2)).unwrap();
        assert_eq!(loaded[2].mask, direct.truth_mask);
        assert_eq!(loaded[2].image.to_gray8(), direct.image.to_gray8());

        fs::write(dir_a.path().join("img_0001.pgm"), b"junk").unwrap();
        fs::write(dir_a.path().join("mask_0002.pgm"), b"P5\n1 1\n255\n\x07").unwrap();
        match load_dataset(dir_a.path()) {
            Err(Error::CorruptFiles(names)) => {
                assert_eq!(names.len(), 2);
                assert!(names[0].starts_with("img_0001.pgm"));
                assert!(names[1].starts_with("mask_0002.pgm"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
