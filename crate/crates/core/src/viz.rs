//! Selected-patch overlays and head-averaged attention maps.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::patch::PatchConfig;
use crate::ppm::RgbImage;
use crate::psm::SelectionResult;

pub const DEFAULT_TOP_K: usize = 4;

const BOX_COLOUR: [f32; 3] = [1.0, 0.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlayMode {
    SelectedPatches,
    AttentionMap,
}

impl FromStr for OverlayMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selected" | "selected-patches" | "selected_patches" => Ok(Self::SelectedPatches),
            "attention" | "attention-map" | "attention_map" => Ok(Self::AttentionMap),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?}; expected selected-patches or attention-map"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OverlayRequest<'a> {
    pub image: &'a RgbImage,
    pub selection: &'a SelectionResult<f32>,
    pub patch: PatchConfig,
    pub mode: OverlayMode,
    pub top_k: usize,
}

impl OverlayRequest<'_> {
    fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top-k must be at least 1".into()));
        }
        if (self.image.height, self.image.width) != (self.patch.height, self.patch.width) {
            return Err(Error::shape(
                "overlay",
                &[self.image.height, self.image.width],
                &[self.patch.height, self.patch.width],
            ));
        }
        let n = self.patch.grid().count;
        if let Some(&bad) = self.selection.indices.iter().find(|&&i| i == 0 || i > n) {
            return Err(Error::Contract(format!("selected token {bad} is outside 1..={n}")));
        }
        if self.selection.scores.len() != self.selection.indices.len() {
            return Err(Error::Contract("one score per selected token required".into()));
        }
        Ok(())
    }
}

pub fn render(req: &OverlayRequest) -> Result<RgbImage> {
    match req.mode {
        OverlayMode::SelectedPatches => render_selected(req),
        OverlayMode::AttentionMap => render_attention(req),
    }
}

/// Head ids ordered by descending score; equal scores keep the lower id first.
pub fn rank_heads(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Pixel rectangle `(row0, col0, row1, col1)`, half-open, of token
/// `token`'s patch doubled in side length about its centre. May extend
/// past the image.
pub fn enlarged_square(token: usize, patch: &PatchConfig) -> (isize, isize, isize, isize) {
    let (r, c) = patch.origin(token - 1);
    let p = patch.patch as isize;
    let lo = p / 2;
    let hi = p - lo;
    let (r, c) = (r as isize, c as isize);
    (r - lo, c - lo, r + p + hi, c + p + hi)
}

fn draw_outline(img: &mut RgbImage, (r0, c0, r1, c1): (isize, isize, isize, isize), rgb: [f32; 3]) {
    let (h, w) = (img.height as isize, img.width as isize);
    let mut put = |y: isize, x: isize| {
        if (0..h).contains(&y) && (0..w).contains(&x) {
            img.set(y as usize, x as usize, rgb);
        }
    };
    for x in c0..c1 {
        put(r0, x);
        put(r1 - 1, x);
    }
    for y in r0..r1 {
        put(y, c0);
        put(y, c1 - 1);
    }
}

/// Outline the `top_k` best-scoring heads' patches, each square enlarged
/// two times about its centre and clipped to the image.
pub fn render_selected(req: &OverlayRequest) -> Result<RgbImage> {
    req.validate()?;
    let mut out = req.image.clone();
    for head in rank_heads(&req.selection.scores).into_iter().take(req.top_k) {
        let square = enlarged_square(req.selection.indices[head], &req.patch);
        draw_outline(&mut out, square, BOX_COLOUR);
    }
    Ok(out)
}

/// Spread one value per patch over the pixels it covers, dividing each
/// pixel's sum by the number of patches covering it. Pixels no patch
/// reaches take the smallest covered value. Row-major `H × W`.
pub fn splat_attention(values: &[f64], patch: &PatchConfig) -> Result<Vec<f64>> {
    let grid = patch.grid();
    if values.len() != grid.count {
        return Err(Error::shape("splat_attention", &[values.len()], &[grid.count]));
    }
    let (h, w, p) = (patch.height, patch.width, patch.patch);
    let mut sum = vec![0.0; h * w];
    let mut cover = vec![0u32; h * w];
    for (i, &v) in values.iter().enumerate() {
        let (r0, c0) = patch.origin(i);
        for y in r0..r0 + p {
            for x in c0..c0 + p {
                sum[y * w + x] += v;
                cover[y * w + x] += 1;
            }
        }
    }
    let floor = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(sum
        .iter()
        .zip(&cover)
        .map(|(&s, &c)| if c == 0 { floor } else { s / c as f64 })
        .collect())
}

/// Min-max normalise to `[0, 1]`; a constant map becomes uniform 0.5.
pub fn normalize(map: &mut [f64]) {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 1e-12 * hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE)) {
        map.fill(0.5);
        return;
    }
    map.iter_mut().for_each(|v| *v = (*v - lo) / span);
}

/// Heat map of the patch columns of the heads' CLS rollout rows, averaged
/// over heads, normalised to `[0, 1]`. Lighter means more attended.
pub fn attention_map(selection: &SelectionResult<f32>, patch: &PatchConfig) -> Result<Vec<f64>> {
    let rows = selection.cls_rows();
    if rows.is_empty() {
        return Err(Error::Contract("selection holds no rollout matrices".into()));
    }
    let n = patch.grid().count;
    let mut mean = vec![0.0; n];
    for row in &rows {
        if row.len() != n + 1 {
            return Err(Error::shape("attention_map", &[row.len()], &[n + 1]));
        }
        for (m, &v) in mean.iter_mut().zip(&row[1..]) {
            *m += f64::from(v) / rows.len() as f64;
        }
    }
    let mut map = splat_attention(&mean, patch)?;
    normalize(&mut map);
    Ok(map)
}

/// Greyscale images are multiplied by the map; colour images are blended
/// half and half with it.
pub fn render_attention(req: &OverlayRequest) -> Result<RgbImage> {
    req.validate()?;
    let map = attention_map(req.selection, &req.patch)?;
    let img = req.image;
    let grey = img.pixels.chunks(3).all(|px| px[0] == px[1] && px[1] == px[2]);
    let mut out = img.clone();
    for (px, &m) in out.pixels.chunks_mut(3).zip(&map) {
        let m = m as f32;
        for v in px {
            *v = if grey { *v * m } else { 0.5 * *v + 0.5 * m };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn selection(n: usize, indices: Vec<usize>, scores: Vec<f32>, cls: &[Vec<f32>]) -> SelectionResult<f32> {
        let rollout = cls
            .iter()
            .map(|row| {
                let mut m = Tensor::<f32>::eye(n + 1);
                m.data_mut()[..n + 1].copy_from_slice(row);
                m
            })
            .collect();
        SelectionResult {
            rollout,
            indices,
            scores,
        }
    }

    fn grey(h: usize, w: usize, v: f32) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        img.pixels.fill(v);
        img
    }

    #[test]
    fn splat_hand_case() {
        // 4×4, P=2, S=1: 3×3 patches with values 1..=9
        let patch = PatchConfig::new(4, 4, 1, 2, 1).unwrap();
        let values: Vec<f64> = (1..=9).map(f64::from).collect();
        let map = splat_attention(&values, &patch).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.5, 2.5, 3.0,
            2.5, 3.0, 4.0, 4.5,
            5.5, 6.0, 7.0, 7.5,
            7.0, 7.5, 8.5, 9.0,
        ];
        assert_eq!(map, want);
    }

    #[test]
    fn uncovered_pixels_take_the_minimum() {
        let patch = PatchConfig::new(5, 5, 1, 2, 2).unwrap();
        let map = splat_attention(&[4.0, 3.0, 2.0, 1.0], &patch).unwrap();
        assert_eq!(map[4], 1.0);
        assert_eq!(map[4 * 5 + 2], 1.0);
        assert_eq!(map[0], 4.0);
    }

    #[test]
    fn one_square_at_known_centre() {
        let patch = PatchConfig::new(16, 16, 1, 4, 4).unwrap();
        // token 6 is grid (1, 1): pixels [4, 8); doubled: [2, 10)
        assert_eq!(enlarged_square(6, &patch), (2, 2, 10, 10));
        let img = grey(16, 16, 0.0);
        let sel = selection(16, vec![6, 1], vec![0.9, 0.1], &[vec![0.0; 17], vec![0.0; 17]]);
        let req = OverlayRequest {
            image: &img,
            selection: &sel,
            patch,
            mode: OverlayMode::SelectedPatches,
            top_k: 1,
        };
        let out = render_selected(&req).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let on_border = (2..10).contains(&y) && (2..10).contains(&x) && (y == 2 || y == 9 || x == 2 || x == 9);
                assert_eq!(out.get(y, x) == BOX_COLOUR, on_border, "({y}, {x})");
            }
        }
    }

    #[test]
    fn corner_square_is_clipped() {
        let patch = PatchConfig::new(8, 8, 1, 4, 4).unwrap();
        assert_eq!(enlarged_square(1, &patch), (-2, -2, 6, 6));
        let img = grey(8, 8, 0.5);
        let sel = selection(4, vec![1], vec![1.0], &[vec![0.0; 5]]);
        let req = OverlayRequest {
            image: &img,
            selection: &sel,
            patch,
            mode: OverlayMode::SelectedPatches,
            top_k: 4,
        };
        let out = render_selected(&req).unwrap();
        assert_eq!(out.pixels.len(), img.pixels.len());
        assert_eq!(out.get(5, 0), BOX_COLOUR);
        assert_eq!(out.get(0, 5), BOX_COLOUR);
        assert_eq!(out.get(0, 0), [0.5; 3]);
    }

    #[test]
    fn ties_rank_by_head_id() {
        assert_eq!(rank_heads(&[0.2, 0.5, 0.5, 0.1]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn uniform_attention_gives_uniform_overlay() {
        let patch = PatchConfig::new(6, 6, 1, 3, 3).unwrap();
        let sel = selection(4, vec![1], vec![0.25], &[vec![0.0, 0.25, 0.25, 0.25, 0.25]]);
        let img = grey(6, 6, 0.8);
        let req = OverlayRequest {
            image: &img,
            selection: &sel,
            patch,
            mode: OverlayMode::AttentionMap,
            top_k: 1,
        };
        let out = render_attention(&req).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 0.8 * 0.5));
    }

    #[test]
    fn single_hot_is_brightest_on_its_patch() {
        let patch = PatchConfig::new(8, 8, 1, 4, 2).unwrap();
        let mut row = vec![0.0; 10];
        row[5] = 1.0; // patch 4 = grid (1, 1), pixels [2, 6)
        let sel = selection(9, vec![5], vec![1.0], &[row]);
        let map = attention_map(&sel, &patch).unwrap();
        let best = map.iter().copied().fold(0.0, f64::max);
        assert_eq!(best, 1.0);
        for y in 0..8 {
            for x in 0..8 {
                // every pixel of the hot patch is covered by four patches
                let inside = (2..6).contains(&y) && (2..6).contains(&x);
                assert_eq!(map[y * 8 + x] == best, inside, "({y}, {x})");
            }
        }
    }

    #[test]
    fn affine_invariance() {
        let patch = PatchConfig::new(6, 6, 1, 3, 1).unwrap();
        let row: Vec<f32> = (0..17).map(|i| ((i * 7) % 5) as f32 / 10.0).collect();
        let scaled: Vec<f32> = row.iter().map(|v| 3.0 * v + 0.25).collect();
        let a = attention_map(&selection(16, vec![1], vec![0.0], &[row]), &patch).unwrap();
        let b = attention_map(&selection(16, vec![1], vec![0.0], &[scaled]), &patch).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn colour_images_are_blended() {
        let patch = PatchConfig::new(2, 2, 3, 2, 2).unwrap();
        let sel = selection(1, vec![1], vec![1.0], &[vec![0.0, 1.0]]);
        let mut img = grey(2, 2, 0.0);
        img.set(0, 0, [1.0, 0.0, 0.0]);
        let req = OverlayRequest {
            image: &img,
            selection: &sel,
            patch,
            mode: OverlayMode::AttentionMap,
            top_k: 1,
        };
        let out = render(&req).unwrap();
        assert_eq!(out.get(0, 0), [0.75, 0.25, 0.25]);
        assert_eq!(out.get(1, 1), [0.25, 0.25, 0.25]);
    }

    #[test]
    fn errors() {
        let patch = PatchConfig::new(4, 4, 1, 2, 2).unwrap();
        let img = grey(4, 4, 0.0);
        let bad = selection(4, vec![5], vec![1.0], &[vec![0.0; 5]]);
        let mut req = OverlayRequest {
            image: &img,
            selection: &bad,
            patch,
            mode: OverlayMode::SelectedPatches,
            top_k: 1,
        };
        assert!(matches!(render(&req), Err(Error::Contract(_))));
        let good = selection(4, vec![2], vec![1.0], &[vec![0.0; 5]]);
        req.selection = &good;
        req.top_k = 0;
        assert!(matches!(render(&req), Err(Error::Config(_))));
        let small = grey(3, 4, 0.0);
        req.top_k = 1;
        req.image = &small;
        assert!(matches!(render(&req), Err(Error::Shape { .. })));
        assert!("bogus".parse::<OverlayMode>().is_err());
        assert_eq!(
            "attention-map".parse::<OverlayMode>().unwrap(),
            OverlayMode::AttentionMap
        );
    }
}
