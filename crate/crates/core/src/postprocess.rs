//! Connected-component labelling and the largest-region filter applied to
//! raw segmentation output.

use crate::error::{Error, Result};
use crate::image::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    pub label: u32,
    pub area: usize,
    /// Inclusive `(x_min, y_min, x_max, y_max)`.
    pub bbox: (usize, usize, usize, usize),
    pub centroid: (f64, f64),
}

/// Label image plus per-region statistics. Labels run densely from 1 in
/// raster-scan discovery order; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRegions {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub regions: Vec<RegionStats>,
}

impl LabeledRegions {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn region_mask(&self, label: u32) -> BinaryMask {
        let cells = self.labels.iter().map(|&l| l == label).collect();
        BinaryMask::new(self.width, self.height, cells).expect("label grid matches dimensions")
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        // keep the smaller (earlier) provisional label as root
        if ra < rb {
            self.parent[rb as usize] = ra;
        } else if rb < ra {
            self.parent[ra as usize] = rb;
        }
    }
}

/// Two-pass union-find labelling.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> LabeledRegions {
    let (w, h) = mask.dims();
    let mut provisional = vec![0u32; w * h];
    let mut sets = DisjointSet { parent: vec![0] };

    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut count = 0;
            let mut push = |nx: usize, ny: usize| {
                let l = provisional[ny * w + nx];
                if l != 0 {
                    neighbours[count] = l;
                    count += 1;
                }
            };
            if x > 0 {
                push(x - 1, y);
            }
            if y > 0 {
                push(x, y - 1);
                if connectivity == Connectivity::Eight {
                    if x > 0 {
                        push(x - 1, y - 1);
                    }
                    if x + 1 < w {
                        push(x + 1, y - 1);
                    }
                }
            }
            let label = if count == 0 {
                let next = sets.parent.len() as u32;
                sets.parent.push(next);
                next
            } else {
                let min = *neighbours[..count].iter().min().unwrap();
                for &n in &neighbours[..count] {
                    sets.union(min, n);
                }
                min
            };
            provisional[y * w + x] = label;
        }
    }

    // final labels follow the raster order in which each root is first met
    let mut remap = vec![0u32; sets.parent.len()];
    let mut regions: Vec<RegionStats> = Vec::new();
    let mut sums: Vec<(f64, f64)> = Vec::new();
    let mut labels = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = provisional[y * w + x];
            if p == 0 {
                continue;
            }
            let root = sets.find(p) as usize;
            if remap[root] == 0 {
                regions.push(RegionStats {
                    label: regions.len() as u32 + 1,
                    area: 0,
                    bbox: (x, y, x, y),
                    centroid: (0.0, 0.0),
                });
                sums.push((0.0, 0.0));
                remap[root] = regions.len() as u32;
            }
            let label = remap[root];
            labels[y * w + x] = label;
            let r = &mut regions[label as usize - 1];
            r.area += 1;
            r.bbox.0 = r.bbox.0.min(x);
            r.bbox.1 = r.bbox.1.min(y);
            r.bbox.2 = r.bbox.2.max(x);
            r.bbox.3 = r.bbox.3.max(y);
            let s = &mut sums[label as usize - 1];
            s.0 += x as f64;
            s.1 += y as f64;
        }
    }
    for (r, s) in regions.iter_mut().zip(&sums) {
        r.centroid = (s.0 / r.area as f64, s.1 / r.area as f64);
    }

    LabeledRegions {
        width: w,
        height: h,
        labels,
        regions,
    }
}

/// Keeps only the region with the largest area; ties go to the lower label.
pub fn largest_component(regions: &LabeledRegions) -> Result<BinaryMask> {
    let best = regions
        .regions
        .iter()
        .fold(None::<&RegionStats>, |best, r| match best {
            Some(b) if b.area >= r.area => Some(b),
            _ => Some(r),
        })
        .ok_or(Error::EmptyPrediction)?;
    Ok(regions.region_mask(best.label))
}

/// Post-processing layer: 8-connected labelling followed by largest-region selection.
pub fn postprocess(mask: &BinaryMask) -> Result<BinaryMask> {
    largest_component(&label_components(mask, Connectivity::Eight))
}
