use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TabError};
use crate::synthdata::BBox;

/// Patch attentions on a `p × p` grid and their upsampled `height × width` map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub grid: usize,
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub upsampled: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.upsampled[y * self.width + x]
    }
}

fn grid_of(n: usize) -> Result<usize> {
    let p = (n as f64).sqrt().round() as usize;
    if p == 0 || p * p != n {
        return Err(TabError::Eval(format!("{n} patch values do not form a square grid")));
    }
    Ok(p)
}

/// Block replication of the `p × p` grid; `height` and `width` must be multiples of `p`.
pub fn upscale_nearest(patches: &[f64], height: usize, width: usize) -> Result<Heatmap> {
    let p = grid_of(patches.len())?;
    if height % p != 0 || width % p != 0 {
        return Err(TabError::Eval(format!("{height}x{width} is not a multiple of the {p}x{p} grid")));
    }
    let (bh, bw) = (height / p, width / p);
    let mut up = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            up.push(patches[(y / bh) * p + x / bw]);
        }
    }
    Ok(Heatmap { grid: p, values: patches.to_vec(), height, width, upsampled: up })
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Smooth bicubic upsampling (half-pixel centres, replicated borders).
/// Produces values absent from the source grid, unlike [`upscale_nearest`].
pub fn upscale_bicubic(patches: &[f64], height: usize, width: usize) -> Result<Heatmap> {
    let p = grid_of(patches.len())?;
    let src = |r: isize, c: isize| {
        let r = r.clamp(0, p as isize - 1) as usize;
        let c = c.clamp(0, p as isize - 1) as usize;
        patches[r * p + c]
    };
    let (sy, sx) = (p as f64 / height as f64, p as f64 / width as f64);
    let mut up = Vec::with_capacity(height * width);
    for y in 0..height {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        let iy = fy.floor();
        for x in 0..width {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let ix = fx.floor();
            let mut acc = 0.0;
            for dy in -1..=2isize {
                let wy = cubic_weight(fy - (iy + dy as f64));
                for dx in -1..=2isize {
                    let wx = cubic_weight(fx - (ix + dx as f64));
                    acc += wy * wx * src(iy as isize + dy, ix as isize + dx);
                }
            }
            up.push(acc);
        }
    }
    Ok(Heatmap { grid: p, values: patches.to_vec(), height, width, upsampled: up })
}

/// Tight boxes of the 4-connected components of `{v ≥ t}`, in scan order of
/// each component's first pixel.
pub fn boxes_at(map: &Heatmap, t: f64) -> Vec<BBox> {
    let (w, h) = (map.width, map.height);
    let mut seen = vec![false; w * h];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || map.upsampled[start] < t {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut b = BBox { x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0 };
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            b.x0 = b.x0.min(x);
            b.y0 = b.y0.min(y);
            b.x1 = b.x1.max(x + 1);
            b.y1 = b.y1.max(y + 1);
            let mut visit = |j: usize| {
                if !seen[j] && map.upsampled[j] >= t {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        boxes.push(b);
    }
    boxes
}

/// True when nothing survives thresholding at `t`: no pixel has `v ≥ t` and `v > 0`.
pub fn all_zero_at(map: &Heatmap, t: f64) -> bool {
    !map.upsampled.iter().any(|&v| v >= t && v > 0.0)
}

/// Row-major index of the first maximal pixel.
pub fn argmax_pixel(map: &Heatmap) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in map.upsampled.iter().enumerate() {
        if v > map.upsampled[best] {
            best = i;
        }
    }
    (best % map.width, best / map.width)
}
