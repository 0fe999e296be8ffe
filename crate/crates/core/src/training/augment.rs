//! Image augmentation on `[B, C, H, W]` batches.

use rand::Rng;

use crate::error::{Result, UgnnError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mirror index into `0..n` without repeating the edge (`-1 → 1`, `n → n−2`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Crop an `H × W` window at offset `(dy, dx)` from the image reflect-padded
/// by `pad` on every side. Offsets lie in `0..=2·pad`.
pub fn reflect_pad_crop<T: Scalar>(
    img: &[T],
    ch: usize,
    h: usize,
    w: usize,
    pad: usize,
    dy: usize,
    dx: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(img.len());
    for c in 0..ch {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let sy = reflect(y as isize + dy as isize - pad as isize, h);
            for x in 0..w {
                let sx = reflect(x as isize + dx as isize - pad as isize, w);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    out
}

pub fn hflip<T: Scalar>(img: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(img.len());
    for row in img.chunks_exact(w).take(ch * h) {
        out.extend(row.iter().rev());
    }
    out
}

/// Random crop (when `pad > 0`) and random horizontal flip, independently per
/// sample.
pub fn augment_batch<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    pad: usize,
    flip: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(UgnnError::InvalidShape {
            shape: s.to_vec(),
            reason: "augmentation needs [B, C, H, W] images".into(),
        });
    }
    let (ch, h, w) = (s[1], s[2], s[3]);
    if pad >= h || pad >= w {
        return Err(UgnnError::Config(format!(
            "crop padding {pad} must be below the image extent {h}×{w}"
        )));
    }
    let n = ch * h * w;
    let mut data = Vec::with_capacity(x.len());
    for img in x.data().chunks_exact(n) {
        let mut cur = img.to_vec();
        if pad > 0 {
            let (dy, dx) = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
            cur = reflect_pad_crop(&cur, ch, h, w, pad, dy, dx);
        }
        if flip && rng.random::<bool>() {
            cur = hflip(&cur, ch, h, w);
        }
        data.extend(cur);
    }
    Tensor::new(s, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn centered_crop_is_identity() {
        let img: Vec<f64> = (0..2 * 5 * 6).map(|v| v as f64).collect();
        assert_eq!(reflect_pad_crop(&img, 2, 5, 6, 4, 4, 4), img);
    }

    #[test]
    fn shifted_crop_matches_reflection() {
        // 1×1×4 row [0,1,2,3] padded by 2 is [2,1,0,1,2,3,2,1].
        let img = vec![0.0, 1.0, 2.0, 3.0];
        assert_eq!(
            reflect_pad_crop(&img, 1, 1, 4, 2, 0, 0),
            vec![2.0, 1.0, 0.0, 1.0]
        );
        assert_eq!(
            reflect_pad_crop(&img, 1, 1, 4, 2, 0, 4),
            vec![2.0, 3.0, 2.0, 1.0]
        );
    }

    #[test]
    fn flip_reverses_rows() {
        let img = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(hflip(&img, 1, 2, 3), vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn batch_rejects_flat_inputs() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(augment_batch(&x, 0, true, &mut seeded_rng(0)).is_err());
    }

    proptest! {
        #[test]
        fn augmentation_keeps_the_value_multiset_under_flip(seed in 0u64..1000) {
            let x = Tensor::<f64>::randn(&[3, 2, 4, 4], 1.0, &mut seeded_rng(seed));
            let y = augment_batch(&x, 0, true, &mut seeded_rng(seed + 1)).unwrap();
            let sort = |t: &Tensor<f64>| {
                let mut v = t.data().to_vec();
                v.sort_by(f64::total_cmp);
                v
            };
            prop_assert_eq!(sort(&x), sort(&y));
        }

        #[test]
        fn cropped_values_come_from_the_source_image(seed in 0u64..1000) {
            let x = Tensor::<f64>::randn(&[1, 1, 6, 6], 1.0, &mut seeded_rng(seed));
            let y = augment_batch(&x, 2, true, &mut seeded_rng(seed + 7)).unwrap();
            prop_assert!(y.data().iter().all(|v| x.data().contains(v)));
        }
    }
}
