//! Gradient magnitude, Otsu thresholding and the exact Euclidean distance
//! transform shared by the quality metrics.

use crate::raster::GrayImage;

/// Largest Sobel magnitude an image in `[0, 1]` can produce.
pub const SOBEL_MAX: f64 = 4.0 * std::f64::consts::SQRT_2;

/// Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut out = vec![0.0; w * h];
    if w == 0 || h == 0 {
        return out;
    }
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        img.data[yc * w + xc]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out[y as usize * w + x as usize] = gx.hypot(gy);
        }
    }
    out
}

const OTSU_BINS: usize = 256;

/// Otsu threshold of non-negative values over 256 bins on `[0, max]`.
/// Values strictly above the result form the foreground. `None` when every
/// value is zero.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return None;
    }
    let mut hist = [0usize; OTSU_BINS];
    for &v in values {
        let b = ((v / max) * OTSU_BINS as f64) as usize;
        hist[b.min(OTSU_BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    if best < 0.0 {
        // a single occupied bin: everything non-zero is foreground
        return Some(0.0);
    }
    Some((best_t + 1) as f64 * max / OTSU_BINS as f64)
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // k > 0 here since z[0] is -inf
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel;
/// infinite everywhere when there is none.
pub fn distance_transform(sites: &[bool], width: usize, height: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; height];
    let mut tmp = vec![0.0; height.max(width)];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        edt_1d(&col, &mut tmp[..height]);
        for y in 0..height {
            grid[y * width + x] = tmp[y];
        }
    }
    for y in 0..height {
        let row = grid[y * width..(y + 1) * width].to_vec();
        edt_1d(&row, &mut grid[y * width..(y + 1) * width]);
    }
    grid.iter_mut().for_each(|d| *d = d.sqrt());
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sobel_of_constant_and_step() {
        let flat = GrayImage::from_fn(6, 5, |_, _| 0.3);
        assert!(sobel_magnitude(&flat).iter().all(|&m| m == 0.0));
        let step = GrayImage::from_fn(6, 5, |x, _| if x >= 3 { 1.0 } else { 0.0 });
        let m = sobel_magnitude(&step);
        for y in 0..5 {
            assert_eq!(m[y * 6 + 2], 4.0);
            assert_eq!(m[y * 6 + 3], 4.0);
            assert_eq!(m[y * 6], 0.0);
        }
    }

    #[test]
    fn otsu_separates_two_levels() {
        let mut v = vec![0.1; 50];
        v.extend(vec![3.0; 10]);
        let t = otsu_threshold(&v).unwrap();
        assert!(t > 0.1 && t < 3.0);
        assert_eq!(otsu_threshold(&[0.0; 4]), None);
        assert_eq!(otsu_threshold(&[0.0, 2.0, 2.0]).map(|t| t < 2.0), Some(true));
    }

    fn brute(sites: &[bool], w: usize, h: usize) -> Vec<f64> {
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                sites
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s)
                    .map(|(j, _)| ((x - (j % w) as f64).powi(2) + (y - (j / w) as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn edt_matches_brute_force(w in 1usize..12, h in 1usize..12, bits in prop::collection::vec(prop::bool::weighted(0.1), 144)) {
            let sites = &bits[..w * h];
            let fast = distance_transform(sites, w, h);
            let slow = brute(sites, w, h);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() < 1e-9 || (a.is_infinite() && b.is_infinite()), "{} vs {}", a, b);
            }
        }
    }
}
