//! Sliding-window patch extraction and token embedding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ppm::read_ppm;
use crate::tape::{Tape, Var};
use crate::tensor::{load_tfgt, Scalar, Tensor};

/// Image geometry and sliding-window parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
}

/// Window counts along each axis; `count == rows * cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub count: usize,
}

impl PatchConfig {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize, stride: usize) -> Result<Self> {
        let cfg = Self {
            height,
            width,
            channels,
            patch,
            stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.stride == 0 || self.stride > self.patch {
            return Err(Error::Config(format!(
                "stride must satisfy 0 < S <= P, got S={} P={}",
                self.stride, self.patch
            )));
        }
        if self.patch > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "patch {} exceeds image {}x{}",
                self.patch, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        let rows = (self.height - self.patch + self.stride) / self.stride;
        let cols = (self.width - self.patch + self.stride) / self.stride;
        PatchGrid {
            rows,
            cols,
            count: rows * cols,
        }
    }

    /// Flattened patch length `P·P·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Top-left pixel `(row, col)` of patch `index` (0-based, row-major grid).
    pub fn origin(&self, index: usize) -> (usize, usize) {
        let cols = self.grid().cols;
        ((index / cols) * self.stride, (index % cols) * self.stride)
    }
}

/// `(N_H, N_W, N)` for a configuration: `N_H = ⌊(H−P+S)/S⌋`, likewise for W.
pub fn count_patches(cfg: &PatchConfig) -> Result<(usize, usize, usize)> {
    cfg.validate()?;
    let g = cfg.grid();
    Ok((g.rows, g.cols, g.count))
}

/// Every window of an `[H, W, C]` image, one flattened `(y, x, c)` row each.
/// Pixels past the last full window are dropped.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let want = [cfg.height, cfg.width, cfg.channels];
    if image.shape() != want {
        return Err(Error::shape("extract_patches", image.shape(), &want));
    }
    let grid = cfg.grid();
    let (p, c) = (cfg.patch, cfg.channels);
    let line = cfg.width * c;
    let src = image.data();
    let mut out = Vec::with_capacity(grid.count * cfg.patch_dim());
    for idx in 0..grid.count {
        let (r0, c0) = cfg.origin(idx);
        for y in r0..r0 + p {
            let start = y * line + c0 * c;
            out.extend_from_slice(&src[start..start + p * c]);
        }
    }
    Tensor::new([grid.count, cfg.patch_dim()], out)
}

/// Extract patches for every image of a `[B, H, W, C]` batch into one
/// `[B·N, P²C]` matrix.
pub fn extract_batch<T: Scalar>(images: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    let b = *images.shape().first().unwrap_or(&0);
    if images.rank() != 4 {
        return Err(Error::Contract(format!(
            "expected a [B, H, W, C] batch, got {:?}",
            images.shape()
        )));
    }
    let mut data = Vec::with_capacity(b * cfg.grid().count * cfg.patch_dim());
    for i in 0..b {
        data.extend(extract_patches(&images.index_outer(i)?, cfg)?.into_data());
    }
    Tensor::new([b * cfg.grid().count, cfg.patch_dim()], data)
}

/// A recorded token matrix holding `batch` sequences of `len` tokens each,
/// stacked as `[batch·len, D]`. Index 0 of every sequence is the CLS token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub batch: usize,
    pub len: usize,
}

impl TokenSequence {
    /// Global row of token `t` in sequence `b`.
    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.len + t
    }
}

/// `z_0 = [cls; patches·E] + E_pos` for each sequence in the batch.
///
/// `patches` is `[B·N, P²C]`, `projection` is `[P²C, D]`, `positions` is
/// `[N+1, D]` (row 0 belongs to the CLS token) and `cls` is `[D]`.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    patches: Var,
    projection: Var,
    positions: Var,
    cls: Var,
    batch: usize,
) -> Result<TokenSequence> {
    let projected = tape.matmul(patches, projection)?;
    let dim = tape.shape(projected)[1];
    let with_cls = tape.prepend_row(projected, cls, batch)?;
    let rows = tape.shape(with_cls)[0];
    let len = rows / batch;
    if tape.shape(positions) != [len, dim] {
        return Err(Error::shape("embed", &[len, dim], tape.shape(positions)));
    }
    let tokens = tape.add_tiled(with_cls, positions)?;
    Ok(TokenSequence { tokens, batch, len })
}

/// Load an `[H, W, C]` image from a `.ppm` (as RGB in `[0, 1]`) or a `TFGT`
/// file (first record, rank 3).
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let is_ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        return Ok(read_ppm(path)?.to_tensor());
    }
    let t = load_tfgt::<f32>(path)?.swap_remove(0);
    if t.rank() != 3 {
        return Err(Error::Contract(format!(
            "{} holds shape {:?}, expected [H, W, C]",
            path.display(),
            t.shape()
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::new([h, w, 1], data).unwrap()
    }

    #[test]
    fn counts_for_reported_resolutions() {
        let c = |h, p, s| count_patches(&PatchConfig::new(h, h, 3, p, s).unwrap()).unwrap();
        assert_eq!(c(448, 16, 12), (37, 37, 1369));
        assert_eq!(c(448, 16, 16), (28, 28, 784));
        assert_eq!(c(304, 16, 12), (25, 25, 625));
    }

    #[test]
    fn invalid_configs() {
        assert!(PatchConfig::new(8, 8, 1, 4, 5).is_err());
        assert!(PatchConfig::new(8, 8, 1, 9, 1).is_err());
        assert!(PatchConfig::new(8, 8, 1, 4, 0).is_err());
        let cfg = PatchConfig {
            height: 8,
            width: 8,
            channels: 1,
            patch: 2,
            stride: 3,
        };
        assert!(matches!(count_patches(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn disjoint_tiling() {
        let img = image(4, 4, |r, c| (r * 4 + c) as f64);
        let cfg = PatchConfig::new(4, 4, 1, 2, 2).unwrap();
        let p = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn stride_one_windows_overlap() {
        let img = image(4, 4, |r, c| (r * 4 + c) as f64);
        let cfg = PatchConfig::new(4, 4, 1, 2, 1).unwrap();
        let p = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[9, 4]);
        // windows at (0,1) and (0,2) share pixels 2 and 6
        assert_eq!(p.row(1), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(p.row(2), &[2.0, 3.0, 6.0, 7.0]);
        let shared = p.row(1).iter().filter(|v| p.row(2).contains(v)).count();
        assert_eq!(shared, 2);
    }

    #[test]
    fn constant_image_gives_identical_rows() {
        let img = image(7, 5, |_, _| 0.25);
        let cfg = PatchConfig::new(7, 5, 1, 3, 2).unwrap();
        let p = extract_patches(&img, &cfg).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn multichannel_layout() {
        let data: Vec<f64> = (0..2 * 2 * 3).map(|v| v as f64).collect();
        let img = Tensor::new([2, 2, 3], data.clone()).unwrap();
        let cfg = PatchConfig::new(2, 2, 3, 2, 1).unwrap();
        let p = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.data(), &data[..]);
    }

    #[test]
    fn extent_mismatch_is_dimension_error() {
        let img = image(4, 5, |_, _| 0.0);
        let cfg = PatchConfig::new(4, 4, 1, 2, 2).unwrap();
        assert!(matches!(extract_patches(&img, &cfg), Err(Error::Shape { .. })));
    }

    #[test]
    fn embed_places_cls_first() {
        let mut tape = Tape::<f64>::new();
        let patches = tape.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let proj = tape.constant(Tensor::eye(2));
        let pos = tape.constant(Tensor::zeros([3, 2]));
        let cls = tape.constant(Tensor::zeros([2]));
        let seq = embed(&mut tape, patches, proj, pos, cls, 1).unwrap();
        assert_eq!(seq.len, 3);
        assert_eq!(tape.value(seq.tokens), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);

        let zero = tape.constant(Tensor::zeros([2, 2]));
        let pos = tape.constant(Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let cls = tape.constant(Tensor::new([2], vec![10.0, 20.0]).unwrap());
        let seq = embed(&mut tape, zero, proj, pos, cls, 1).unwrap();
        assert_eq!(tape.value(seq.tokens), &[11.0, 22.0, 3.0, 4.0, 5.0, 6.0]);

        let short = tape.constant(Tensor::zeros([2, 2]));
        assert!(embed(&mut tape, zero, proj, short, cls, 1).is_err());
    }
}
