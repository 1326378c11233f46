//! Heatmap post-processing: min-max normalization, corner-aligned bilinear
//! upsampling, and a colour overlay on the original image.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Heatmap opacity in overlays.
pub const DEFAULT_ALPHA: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    /// `(H, W)` normalized heatmap at image resolution, values in `[0, 1]`.
    pub normalized: Tensor,
    /// `(H, W, 3)` blend of the image and the colourized heatmap.
    pub overlay: Tensor,
}

/// Min-max normalization to `[0, 1]`. A constant map becomes all zeros.
pub fn normalize(map: &Tensor) -> Tensor {
    let (lo, hi) = (map.min(), map.max());
    if hi <= lo {
        return Tensor::zeros(map.shape());
    }
    let span = hi - lo;
    map.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Bilinear resize of an `(h, w)` map to `(rows, cols)` with corner
/// alignment: output corners take the input corner values exactly.
pub fn upsample_bilinear(map: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "heatmap must be (h, w), got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if rows < h || cols < w {
        return Err(Error::InvalidArgument(format!(
            "target {rows}x{cols} is smaller than heatmap {h}x{w}"
        )));
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let num = i * (src - 1);
        let lo = num / (dst - 1);
        let frac = (num % (dst - 1)) as f64 / (dst - 1) as f64;
        (lo, (lo + 1).min(src - 1), frac)
    };
    let d = map.data();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let (y0, y1, fy) = coord(i, h, rows);
        for j in 0..cols {
            let (x0, x1, fx) = coord(j, w, cols);
            let top = lerp(d[y0 * w + x0], d[y0 * w + x1], fx);
            let bottom = lerp(d[y1 * w + x0], d[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Tensor::new(vec![rows, cols], out)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        (1.0 - t) * a + t * b
    }
}

/// Blue-to-red ramp: 0 maps to pure blue, 1 to pure red.
pub fn colorize(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.0, 1.0 - v]
}

/// Normalizes `heatmap`, upsamples it to the image size and blends it over
/// `image` (`(H, W, 1)` or `(H, W, 3)`): `(1 - alpha) * image + alpha * colour`.
pub fn render(heatmap: &Tensor, image: &Tensor, alpha: f64) -> Result<Rendered> {
    if image.rank() != 3 || !matches!(image.shape()[2], 1 | 3) {
        return Err(Error::InvalidArgument(format!(
            "overlay image must be (H, W, 1) or (H, W, 3), got {:?}",
            image.shape()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let (rows, cols, channels) = image.dims3();
    let normalized = upsample_bilinear(&normalize(heatmap), rows, cols)?;
    let mut overlay = Vec::with_capacity(rows * cols * 3);
    for (p, &v) in normalized.data().iter().enumerate() {
        let color = colorize(v);
        for (ch, c) in color.iter().enumerate() {
            let base = image.data()[p * channels + if channels == 1 { 0 } else { ch }];
            overlay.push((1.0 - alpha) * base + alpha * c);
        }
    }
    Ok(Rendered {
        normalized,
        overlay: Tensor::new(vec![rows, cols, 3], overlay)?,
    })
}

/// Collapses an `(H, W, C)` attribution map to `(H, W)` by summing absolute
/// values over channels; other ranks are returned as a single row.
pub fn ig_saliency(values: &Tensor) -> Tensor {
    if values.rank() == 3 {
        let (h, w, c) = values.dims3();
        let data = values
            .data()
            .chunks_exact(c)
            .map(|px| px.iter().map(|v| v.abs()).sum())
            .collect();
        Tensor::new(vec![h, w], data).expect("h*w values")
    } else {
        let n = values.len();
        Tensor::new(vec![1, n], values.data().iter().map(|v| v.abs()).collect()).expect("n values")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_to_four_by_four() {
        let m = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&m, 4, 4).unwrap();
        for row in up.data().chunks(4) {
            assert_eq!(row[0], 0.0);
            assert_eq!(row[3], 1.0);
            assert!((row[1] - 1.0 / 3.0).abs() < 1e-15);
            assert!((row[2] - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_normalizes_to_zero() {
        let m = Tensor::full(&[3, 3], 4.2);
        assert!(normalize(&m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_targets_rejected() {
        let m = Tensor::zeros(&[4, 4]);
        assert!(upsample_bilinear(&m, 3, 8).is_err());
        assert!(upsample_bilinear(&m, 8, 0).is_err());
    }

    #[test]
    fn single_cell_upsamples_to_constant() {
        let m = Tensor::full(&[1, 1], 2.5);
        let up = upsample_bilinear(&m, 3, 5).unwrap();
        assert!(up.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn overlay_blends_gray_with_ramp() {
        let hm = Tensor::new(vec![1, 2], vec![0.0, 5.0]).unwrap();
        let img = Tensor::full(&[1, 2, 1], 0.5);
        let r = render(&hm, &img, 0.4).unwrap();
        assert_eq!(r.normalized.data(), &[0.0, 1.0]);
        let expect = [0.3, 0.3, 0.7, 0.7, 0.3, 0.3];
        for (a, b) in r.overlay.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn upsampling_is_linear(
            h1 in prop::collection::vec(-5.0f64..5.0, 6),
            h2 in prop::collection::vec(-5.0f64..5.0, 6),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let t1 = Tensor::new(vec![2, 3], h1).unwrap();
            let t2 = Tensor::new(vec![2, 3], h2).unwrap();
            let mix = t1.zip_map(&t2, |x, y| a * x + b * y).unwrap();
            let lhs = upsample_bilinear(&mix, 7, 9).unwrap();
            let u1 = upsample_bilinear(&t1, 7, 9).unwrap();
            let u2 = upsample_bilinear(&t2, 7, 9).unwrap();
            let rhs = u1.zip_map(&u2, |x, y| a * x + b * y).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_upsample_in_unit_interval(
            vals in prop::collection::vec(-100.0f64..100.0, 12),
        ) {
            let t = Tensor::new(vec![3, 4], vals).unwrap();
            let img = Tensor::zeros(&[10, 13, 3]);
            let r = render(&t, &img, DEFAULT_ALPHA).unwrap();
            prop_assert!(r.normalized.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let up = r.normalized.data();
            // corners carry the normalized input corners
            let n = normalize(&t);
            prop_assert_eq!(up[0], n.data()[0]);
            prop_assert_eq!(up[12], n.data()[3]);
            prop_assert_eq!(up[9 * 13], n.data()[8]);
            prop_assert_eq!(up[10 * 13 - 1], n.data()[11]);
        }
    }
}
