//! Coordinate-ordered sparse activation format shared by all engine layers.
//!
//! Active sites are stored row-major (left-to-right, top-to-bottom) together
//! with a per-site channel feature vector and an occupancy bitmap, mirroring
//! the accelerator's token-feature stream.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

/// Scalar feature types a sparse tensor can carry.
pub trait Value: Copy + PartialEq + fmt::Display + fmt::Debug + Send + Sync + 'static {
    const ZERO: Self;

    /// True when `|self| > tol`; decides site activity in [`SparseTensor::from_dense`].
    fn magnitude_exceeds(self, tol: Self) -> bool;

    fn maxv(self, other: Self) -> Self;

    fn clampv(self, lo: Self, hi: Self) -> Self;
}

impl Value for f32 {
    const ZERO: Self = 0.0;

    fn magnitude_exceeds(self, tol: Self) -> bool {
        self.abs() > tol
    }

    fn maxv(self, other: Self) -> Self {
        self.max(other)
    }

    fn clampv(self, lo: Self, hi: Self) -> Self {
        self.clamp(lo, hi)
    }
}

impl Value for i8 {
    const ZERO: Self = 0;

    fn magnitude_exceeds(self, tol: Self) -> bool {
        (self as i16).abs() > (tol as i16).abs()
    }

    fn maxv(self, other: Self) -> Self {
        self.max(other)
    }

    fn clampv(self, lo: Self, hi: Self) -> Self {
        self.clamp(lo, hi)
    }
}

impl Value for i32 {
    const ZERO: Self = 0;

    fn magnitude_exceeds(self, tol: Self) -> bool {
        (self as i64).abs() > (tol as i64).abs()
    }

    fn maxv(self, other: Self) -> Self {
        self.max(other)
    }

    fn clampv(self, lo: Self, hi: Self) -> Self {
        self.clamp(lo, hi)
    }
}

/// Stream marker for one non-zero pixel; `end` terminates the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub x: u16,
    pub y: u16,
    pub end: bool,
}

impl Token {
    pub fn site(x: u16, y: u16) -> Self {
        Token { x, y, end: false }
    }

    pub fn end() -> Self {
        Token { x: 0, y: 0, end: true }
    }
}

/// H×W occupancy bit matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl Bitmap {
    pub fn new(height: usize, width: usize) -> Self {
        let bits = height * width;
        Bitmap {
            width,
            height,
            words: vec![0; bits.div_ceil(64)],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        let bit = y * self.width + x;
        (self.words[bit / 64] >> (bit % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize) {
        let bit = y * self.width + x;
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn popcount(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// Sparse 2-D activation: ordered active sites, per-site feature vectors and
/// an occupancy bitmap. `T` is `f32` in float mode, `i8` in quantized mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor<T: Value> {
    height: usize,
    width: usize,
    channels: usize,
    sites: Vec<(u16, u16)>,
    features: Vec<T>,
    bitmap: Bitmap,
}

impl<T: Value> SparseTensor<T> {
    /// Tensor with no active sites.
    pub fn empty(height: usize, width: usize, channels: usize) -> Self {
        SparseTensor {
            height,
            width,
            channels,
            sites: Vec::new(),
            features: Vec::new(),
            bitmap: Bitmap::new(height, width),
        }
    }

    /// Validating constructor: sites must be strictly increasing under (y, x),
    /// in bounds, with one feature vector of length `channels` per site.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        sites: Vec<(u16, u16)>,
        features: Vec<T>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::argument("tensor geometry must be positive"));
        }
        if features.len() != sites.len() * channels {
            return Err(Error::argument(format!(
                "feature length {} does not match {} sites x {} channels",
                features.len(),
                sites.len(),
                channels
            )));
        }
        let mut bitmap = Bitmap::new(height, width);
        let mut prev: Option<(u16, u16)> = None;
        for &(y, x) in &sites {
            if (y as usize) >= height || (x as usize) >= width {
                return Err(Error::argument(format!(
                    "site ({y},{x}) outside {height}x{width}"
                )));
            }
            if let Some(p) = prev {
                if (y, x) <= p {
                    return Err(Error::argument(format!(
                        "sites not strictly increasing at ({y},{x})"
                    )));
                }
            }
            prev = Some((y, x));
            bitmap.set(y as usize, x as usize);
        }
        Ok(SparseTensor {
            height,
            width,
            channels,
            sites,
            features,
            bitmap,
        })
    }

    /// Constructor for engine layers that emit sites already in row-major
    /// order; order is checked only in debug builds.
    pub(crate) fn from_sorted(
        height: usize,
        width: usize,
        channels: usize,
        sites: Vec<(u16, u16)>,
        features: Vec<T>,
    ) -> Self {
        debug_assert!(sites.windows(2).all(|w| w[0] < w[1]));
        debug_assert_eq!(features.len(), sites.len() * channels);
        let mut bitmap = Bitmap::new(height, width);
        for &(y, x) in &sites {
            bitmap.set(y as usize, x as usize);
        }
        SparseTensor {
            height,
            width,
            channels,
            sites,
            features,
            bitmap,
        }
    }

    /// Site present iff some channel's magnitude exceeds `zero_tol`.
    pub fn from_dense(
        height: usize,
        width: usize,
        channels: usize,
        dense: &[T],
        zero_tol: T,
    ) -> Result<Self> {
        if dense.len() != height * width * channels {
            return Err(Error::argument(format!(
                "dense length {} does not match {height}x{width}x{channels}",
                dense.len()
            )));
        }
        let mut sites = Vec::new();
        let mut features = Vec::new();
        for y in 0..height {
            for x in 0..width {
                let base = (y * width + x) * channels;
                let cell = &dense[base..base + channels];
                if cell.iter().any(|v| v.magnitude_exceeds(zero_tol)) {
                    sites.push((y as u16, x as u16));
                    features.extend_from_slice(cell);
                }
            }
        }
        Ok(Self::from_sorted(height, width, channels, sites, features))
    }

    /// Dense H×W×C array, row-major; inactive sites are exactly zero.
    pub fn to_dense(&self) -> Vec<T> {
        let mut dense = vec![T::ZERO; self.height * self.width * self.channels];
        for (i, &(y, x)) in self.sites.iter().enumerate() {
            let base = (y as usize * self.width + x as usize) * self.channels;
            dense[base..base + self.channels].copy_from_slice(self.feature(i));
        }
        dense
    }

    /// One token per site in site order, then one end token.
    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        self.sites
            .iter()
            .map(|&(y, x)| Token::site(x, y))
            .chain(std::iter::once(Token::end()))
    }

    /// Fraction of grid cells that are active.
    pub fn density(&self) -> f64 {
        self.sites.len() as f64 / (self.height * self.width) as f64
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[(u16, u16)] {
        &self.sites
    }

    #[inline]
    pub fn feature(&self, site_idx: usize) -> &[T] {
        &self.features[site_idx * self.channels..(site_idx + 1) * self.channels]
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub(crate) fn features_mut(&mut self) -> &mut [T] {
        &mut self.features
    }

    #[inline]
    pub fn is_active(&self, y: usize, x: usize) -> bool {
        self.bitmap.get(y, x)
    }

    pub fn bitmap(&self) -> &Bitmap {
        &self.bitmap
    }

    /// Re-checks every structural invariant; rejects corrupted tensors.
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.sites.len() * self.channels {
            return Err(Error::argument("feature/site length mismatch"));
        }
        if self.bitmap.popcount() != self.sites.len() {
            return Err(Error::argument("bitmap popcount does not match site count"));
        }
        let mut prev: Option<(u16, u16)> = None;
        for &(y, x) in &self.sites {
            if (y as usize) >= self.height || (x as usize) >= self.width {
                return Err(Error::argument("site out of bounds"));
            }
            if !self.bitmap.get(y as usize, x as usize) {
                return Err(Error::argument("site missing from bitmap"));
            }
            if let Some(p) = prev {
                if (y, x) <= p {
                    return Err(Error::argument("sites not strictly increasing"));
                }
            }
            prev = Some((y, x));
        }
        Ok(())
    }

    /// Debug dump: one line per site, "y x c0 c1 ... c{C-1}", in site order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, &(y, x)) in self.sites.iter().enumerate() {
            write!(out, "{y} {x}").unwrap();
            for v in self.feature(i) {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_dense_all_zero_has_no_sites() {
        let t = SparseTensor::<f32>::from_dense(4, 4, 2, &[0.0; 32], 0.0).unwrap();
        assert_eq!(t.site_count(), 0);
        assert_eq!(t.density(), 0.0);
    }

    #[test]
    fn from_dense_emits_row_major_sites() {
        let mut dense = vec![0.0f32; 4 * 4];
        dense[2 * 4 + 1] = 5.0; // (2,1), written first on purpose
        dense[3] = 1.0; // (0,3)
        let t = SparseTensor::from_dense(4, 4, 1, &dense, 0.0).unwrap();
        assert_eq!(t.sites(), &[(0, 3), (2, 1)]);
        assert_eq!(t.feature(0), &[1.0]);
        assert_eq!(t.feature(1), &[5.0]);
    }

    #[test]
    fn to_dense_single_site() {
        let t = SparseTensor::new(3, 3, 1, vec![(1, 1)], vec![7.0f32]).unwrap();
        let dense = t.to_dense();
        for (i, v) in dense.iter().enumerate() {
            if i == 4 {
                assert_eq!(*v, 7.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn to_dense_of_empty_is_all_zero() {
        let t = SparseTensor::<f32>::empty(3, 5, 2);
        assert!(t.to_dense().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tokens_empty_tensor_is_end_only() {
        let t = SparseTensor::<f32>::empty(4, 4, 1);
        let toks: Vec<_> = t.tokens().collect();
        assert_eq!(toks, vec![Token::end()]);
    }

    #[test]
    fn tokens_map_sites_then_end() {
        let t = SparseTensor::new(4, 4, 1, vec![(0, 3), (2, 1)], vec![1.0f32, 2.0]).unwrap();
        let toks: Vec<_> = t.tokens().collect();
        assert_eq!(
            toks,
            vec![Token::site(3, 0), Token::site(1, 2), Token::end()]
        );
    }

    #[test]
    fn density_ratios() {
        let t = SparseTensor::<f32>::empty(8, 8, 1);
        assert_eq!(t.density(), 0.0);

        let sites: Vec<(u16, u16)> = (0..2).flat_map(|y| (0..8).map(move |x| (y, x))).collect();
        let feats = vec![1.0f32; 16];
        let t = SparseTensor::new(8, 8, 1, sites, feats).unwrap();
        assert_eq!(t.density(), 0.25);

        let sites: Vec<(u16, u16)> = (0..8).flat_map(|y| (0..8).map(move |x| (y, x))).collect();
        let t = SparseTensor::new(8, 8, 1, sites, vec![1.0f32; 64]).unwrap();
        assert_eq!(t.density(), 1.0);
    }

    #[test]
    fn new_rejects_unsorted_and_duplicate_sites() {
        let r = SparseTensor::new(4, 4, 1, vec![(2, 1), (0, 3)], vec![1.0f32, 2.0]);
        assert!(r.is_err());
        let r = SparseTensor::new(4, 4, 1, vec![(1, 1), (1, 1)], vec![1.0f32, 2.0]);
        assert!(r.is_err());
    }

    #[test]
    fn new_rejects_out_of_bounds_site() {
        let r = SparseTensor::new(4, 4, 1, vec![(4, 0)], vec![1.0f32]);
        assert!(r.is_err());
    }

    #[test]
    fn bitmap_matches_sites() {
        let t = SparseTensor::new(4, 4, 1, vec![(0, 3), (2, 1)], vec![1.0f32, 2.0]).unwrap();
        assert!(t.is_active(0, 3));
        assert!(t.is_active(2, 1));
        assert!(!t.is_active(0, 0));
        assert_eq!(t.bitmap().popcount(), 2);
        t.validate().unwrap();
    }

    #[test]
    fn dump_format_is_site_ordered() {
        let t =
            SparseTensor::new(4, 4, 2, vec![(0, 3), (2, 1)], vec![1i8, -2, 3, 4]).unwrap();
        assert_eq!(t.dump(), "0 3 1 -2\n2 1 3 4\n");
    }

    #[test]
    fn zero_feature_sites_stay_active() {
        // Quantization may round a feature vector to zero without
        // deactivating the site; activity is positional.
        let t = SparseTensor::new(4, 4, 2, vec![(1, 1)], vec![0i8, 0]).unwrap();
        assert_eq!(t.site_count(), 1);
        assert!(t.is_active(1, 1));
    }
}
