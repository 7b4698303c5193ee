//! Non-overlapping window embedding of `H x W x C` images and the padding
//! helpers used when a window does not tile the image.
//!
//! [`embed`] stacks the windows along a leading patch axis, giving a
//! `B x wh x ww x C` tensor. Patches are ordered row-major over the window
//! grid and channels stay the trailing mode. [`inverse_embed`] scatters a
//! patch stack back onto a grid; the patch windows may be smaller than the
//! ones used to cut the image, which is how compressed measurement images
//! are formed.

use crate::error::{MtsError, Result};
use crate::tensor::{Real, Tensor};

/// Layout of an image and the window grid that tiles it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub window_h: usize,
    pub window_w: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub channels: usize,
}

impl PatchConfig {
    pub fn new(
        window_h: usize,
        window_w: usize,
        in_height: usize,
        in_width: usize,
        channels: usize,
    ) -> Result<Self> {
        if [window_h, window_w, in_height, in_width, channels].contains(&0) {
            return Err(MtsError::shape("patch configuration entries must be positive"));
        }
        if !in_height.is_multiple_of(window_h) || !in_width.is_multiple_of(window_w) {
            return Err(MtsError::shape(format!(
                "{in_height}x{in_width} image is not tiled by {window_h}x{window_w} windows"
            )));
        }
        Ok(Self {
            window_h,
            window_w,
            in_height,
            in_width,
            channels,
        })
    }

    pub fn square(window: usize, in_height: usize, in_width: usize, channels: usize) -> Result<Self> {
        Self::new(window, window, in_height, in_width, channels)
    }

    #[inline]
    pub fn grid_rows(&self) -> usize {
        self.in_height / self.window_h
    }

    #[inline]
    pub fn grid_cols(&self) -> usize {
        self.in_width / self.window_w
    }

    #[inline]
    pub fn patch_count(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_height, self.in_width, self.channels]
    }

    pub fn patch_shape(&self) -> [usize; 4] {
        [self.patch_count(), self.window_h, self.window_w, self.channels]
    }

    /// For every position of the patch-major layout, the flat offset of the
    /// same element in the image layout. This is the permutation that
    /// [`embed`] applies.
    pub fn patch_major_index(&self) -> Vec<usize> {
        let (wh, ww, c) = (self.window_h, self.window_w, self.channels);
        let mut idx = Vec::with_capacity(self.in_height * self.in_width * c);
        for gi in 0..self.grid_rows() {
            for gj in 0..self.grid_cols() {
                for i in 0..wh {
                    for j in 0..ww {
                        let base = ((gi * wh + i) * self.in_width + gj * ww + j) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
        idx
    }
}

fn expect_image<T: Real>(x: &Tensor<T>, cfg: &PatchConfig) -> Result<()> {
    if x.shape() != cfg.image_shape() {
        return Err(MtsError::shape(format!(
            "expected image of shape {:?}, got {:?}",
            cfg.image_shape(),
            x.shape()
        )));
    }
    Ok(())
}

/// Cuts `x` into the windows described by `cfg`.
pub fn embed<T: Real>(x: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    expect_image(x, cfg)?;
    let (wh, ww, c) = (cfg.window_h, cfg.window_w, cfg.channels);
    let row_len = ww * c;
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for gi in 0..cfg.grid_rows() {
        for gj in 0..cfg.grid_cols() {
            for i in 0..wh {
                let start = ((gi * wh + i) * cfg.in_width + gj * ww) * c;
                out.extend_from_slice(&src[start..start + row_len]);
            }
        }
    }
    Tensor::new(cfg.patch_shape().to_vec(), out)
}

/// Places each patch of `p` at its grid location in an image laid out by `cfg`.
pub fn inverse_embed<T: Real>(p: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    if p.shape() != cfg.patch_shape() {
        return Err(MtsError::shape(format!(
            "patch stack {:?} does not match grid {:?}",
            p.shape(),
            cfg.patch_shape()
        )));
    }
    let (wh, ww, c) = (cfg.window_h, cfg.window_w, cfg.channels);
    let row_len = ww * c;
    let mut out = vec![T::zero(); cfg.in_height * cfg.in_width * c];
    let mut rows = p.data().chunks_exact(row_len);
    for gi in 0..cfg.grid_rows() {
        for gj in 0..cfg.grid_cols() {
            for i in 0..wh {
                let start = ((gi * wh + i) * cfg.in_width + gj * ww) * c;
                out[start..start + row_len].copy_from_slice(rows.next().expect("row count"));
            }
        }
    }
    Tensor::new(cfg.image_shape().to_vec(), out)
}

/// Source index of position `i` after reflecting (without edge repeat) an
/// axis of length `n` out to any length.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn image_dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(MtsError::shape(format!("expected H x W x C image, got {s:?}"))),
    }
}

/// Reflect-pads an image at the bottom and right to `height x width`.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (h, w, c) = image_dims(x)?;
    if height < h || width < w {
        return Err(MtsError::shape("reflect_pad target smaller than input"));
    }
    if height == h && width == w {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = Vec::with_capacity(height * width * c);
    for i in 0..height {
        let si = reflect_index(i, h);
        for j in 0..width {
            let sj = reflect_index(j, w);
            let start = (si * w + sj) * c;
            out.extend_from_slice(&src[start..start + c]);
        }
    }
    Tensor::new(vec![height, width, c], out)
}

/// Adjoint of [`reflect_pad`]: folds padded values back onto their sources.
pub fn reflect_pad_adjoint<T: Real>(y: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (ph, pw, c) = image_dims(y)?;
    if ph < height || pw < width {
        return Err(MtsError::shape("reflect_pad_adjoint target larger than input"));
    }
    if ph == height && pw == width {
        return Ok(y.clone());
    }
    let src = y.data();
    let mut out = vec![T::zero(); height * width * c];
    for i in 0..ph {
        let si = reflect_index(i, height);
        for j in 0..pw {
            let sj = reflect_index(j, width);
            let from = (i * pw + j) * c;
            let to = (si * width + sj) * c;
            for k in 0..c {
                out[to + k] += src[from + k];
            }
        }
    }
    Tensor::new(vec![height, width, c], out)
}

/// Keeps the top-left `height x width` region.
pub fn crop<T: Real>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (h, w, c) = image_dims(x)?;
    if height > h || width > w {
        return Err(MtsError::shape("crop target larger than input"));
    }
    if height == h && width == w {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = Vec::with_capacity(height * width * c);
    for i in 0..height {
        out.extend_from_slice(&src[i * w * c..(i * w + width) * c]);
    }
    Tensor::new(vec![height, width, c], out)
}

/// Adjoint of [`crop`]: zero-extends at the bottom and right.
pub fn zero_pad<T: Real>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (h, w, c) = image_dims(x)?;
    if height < h || width < w {
        return Err(MtsError::shape("zero_pad target smaller than input"));
    }
    if height == h && width == w {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = vec![T::zero(); height * width * c];
    for i in 0..h {
        out[i * width * c..(i * width + w) * c].copy_from_slice(&src[i * w * c..(i + 1) * w * c]);
    }
    Tensor::new(vec![height, width, c], out)
}

/// Smallest multiple of `m` that is at least `n`.
pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_patch_adds_leading_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 4, 4, 2);
        let cfg = PatchConfig::square(4, 4, 4, 2).unwrap();
        let p = embed(&x, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4, 2]);
        assert_eq!(p.data(), x.data());
        assert_eq!(inverse_embed(&p, &cfg).unwrap(), x);
    }

    #[test]
    fn four_by_four_tiling_by_hand() {
        let x = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let cfg = PatchConfig::square(2, 4, 4, 1).unwrap();
        let p = embed(&x, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 2, 2, 1]);
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn non_divisible_is_rejected() {
        assert!(PatchConfig::square(3, 4, 4, 1).is_err());
        let x = Tensor::<f64>::zeros(&[4, 6, 1]);
        let cfg = PatchConfig::square(2, 4, 4, 1).unwrap();
        assert!(embed(&x, &cfg).is_err());
    }

    #[test]
    fn round_trip_eight_by_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 8, 8, 3);
        let cfg = PatchConfig::square(4, 8, 8, 3).unwrap();
        assert_eq!(inverse_embed(&embed(&x, &cfg).unwrap(), &cfg).unwrap(), x);
    }

    #[test]
    fn compressed_windows_shrink_the_image() {
        let cut = PatchConfig::square(4, 16, 16, 1).unwrap();
        let p = Tensor::<f64>::zeros(&[cut.patch_count(), 2, 2, 1]);
        let out_cfg = PatchConfig::square(2, 8, 8, 1).unwrap();
        let img = inverse_embed(&p, &out_cfg).unwrap();
        assert_eq!(img.shape(), &[8, 8, 1]);
        assert_eq!(img.len() as f64, 0.25 * 256.0);
        let wrong = PatchConfig::square(2, 8, 4, 1).unwrap();
        assert!(inverse_embed(&p, &wrong).is_err());
    }

    #[test]
    fn patch_major_index_agrees_with_embed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 6, 9, 2);
        let cfg = PatchConfig::new(3, 3, 6, 9, 2).unwrap();
        let p = embed(&x, &cfg).unwrap();
        for (k, &src) in cfg.patch_major_index().iter().enumerate() {
            assert_eq!(p.data()[k], x.data()[src]);
        }
    }

    #[test]
    fn reflect_index_folds_without_edge_repeat() {
        let got: Vec<_> = (0..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn pad_and_crop_shapes() {
        let x = Tensor::new(vec![2, 3, 1], (0..6).map(f64::from).collect()).unwrap();
        let p = reflect_pad(&x, 4, 5).unwrap();
        assert_eq!(p.shape(), &[4, 5, 1]);
        // row 2 mirrors row 0, column 3 mirrors column 1
        assert_eq!(p.get(&[2, 0, 0]), 0.0);
        assert_eq!(p.get(&[0, 3, 0]), 1.0);
        assert_eq!(crop(&p, 2, 3).unwrap(), x);
        assert!(crop(&x, 3, 3).is_err());
        assert!(reflect_pad(&x, 1, 3).is_err());
    }

    proptest! {
        #[test]
        fn embed_round_trips_and_conserves(gh in 1usize..4, gw in 1usize..4, wh in 1usize..5, ww in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = PatchConfig::new(wh, ww, gh * wh, gw * ww, c).unwrap();
            let x = random_image(&mut rng, gh * wh, gw * ww, c);
            let p = embed(&x, &cfg).unwrap();
            prop_assert_eq!(&inverse_embed(&p, &cfg).unwrap(), &x);
            let mut a = x.data().to_vec();
            let mut b = p.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            // same summation order, so conservation is exact
            prop_assert_eq!(a.iter().sum::<f64>(), b.iter().sum::<f64>());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn embed_and_inverse_are_adjoint(gh in 1usize..4, gw in 1usize..4, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = PatchConfig::square(w, gh * w, gw * w, c).unwrap();
            let x = random_image(&mut rng, gh * w, gw * w, c);
            let y = Tensor::from_fn(&cfg.patch_shape(), |_| rng.random_range(-1.0..1.0));
            let lhs = embed(&x, &cfg).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&inverse_embed(&y, &cfg).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (x.frobenius_norm() * y.frobenius_norm()).max(1e-300));
        }

        #[test]
        fn pad_crop_adjoints(h in 1usize..6, w in 1usize..6, eh in 0usize..9, ew in 0usize..9, c in 1usize..3, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_image(&mut rng, h, w, c);
            let y = random_image(&mut rng, h + eh, w + ew, c);
            let tol = 1e-12 * x.frobenius_norm() * y.frobenius_norm() * 4.0;
            let lhs = reflect_pad(&x, h + eh, w + ew).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&reflect_pad_adjoint(&y, h, w).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() <= tol.max(1e-300));
            let lhs = crop(&y, h, w).unwrap().dot(&x).unwrap();
            let rhs = y.dot(&zero_pad(&x, h + eh, w + ew).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() <= tol.max(1e-300));
        }
    }
}
