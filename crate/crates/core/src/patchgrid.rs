//! Crop and patch geometry.
//!
//! A screenshot is resized to `(cy * base_side) x (cx * base_side)` and cut
//! into `cx * cy` square sub-images; the whole screenshot is also resized to
//! `base_side x base_side` as one extra global sub-image. Each sub-image is
//! split into `(base_side / patch_side)^2` patches, and every
//! `concat_group` consecutive patch latents later become one sequence
//! position of the encoder.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::PixelGrid;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropConfig {
    pub cx: usize,
    pub cy: usize,
    pub base_side: usize,
    pub patch_side: usize,
    pub concat_group: usize,
}

impl CropConfig {
    /// Sub-image side of a ViT-L/14 at 336px.
    pub const CANONICAL_BASE_SIDE: usize = 336;
    pub const CANONICAL_PATCH_SIDE: usize = 14;
    pub const CANONICAL_CONCAT_GROUP: usize = 4;

    pub const TOY_BASE_SIDE: usize = 64;
    pub const TOY_PATCH_SIDE: usize = 8;

    pub fn canonical(cx: usize, cy: usize) -> Self {
        Self {
            cx,
            cy,
            base_side: Self::CANONICAL_BASE_SIDE,
            patch_side: Self::CANONICAL_PATCH_SIDE,
            concat_group: Self::CANONICAL_CONCAT_GROUP,
        }
    }

    /// Small geometry used for CPU-scale training: 64px sub-images, 8px patches.
    pub fn toy(cx: usize, cy: usize) -> Self {
        Self {
            cx,
            cy,
            base_side: Self::TOY_BASE_SIDE,
            patch_side: Self::TOY_PATCH_SIDE,
            concat_group: Self::CANONICAL_CONCAT_GROUP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cx == 0 || self.cy == 0 {
            return Err(Error::Config(format!(
                "crop grid must be at least 1x1, got {}x{}",
                self.cx, self.cy
            )));
        }
        if self.patch_side == 0 || self.base_side == 0 || self.concat_group == 0 {
            return Err(Error::Config(
                "crop sides and concat group must be positive".into(),
            ));
        }
        if self.base_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "base side {} is not divisible by patch side {}",
                self.base_side, self.patch_side
            )));
        }
        let grid = self.base_side / self.patch_side;
        if (grid * grid) % self.concat_group != 0 {
            return Err(Error::Config(format!(
                "concat group {} does not divide {} patches per sub-image",
                self.concat_group,
                grid * grid
            )));
        }
        Ok(())
    }

    /// Length of one flattened patch vector.
    pub fn patch_len(&self, channels: usize) -> usize {
        self.patch_side * self.patch_side * channels
    }

    /// Pixel size `(height, width)` the local crops are cut from.
    pub fn local_canvas(&self) -> (usize, usize) {
        (self.cy * self.base_side, self.cx * self.base_side)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub grid_per_subimage: usize,
    pub patches_per_subimage: usize,
    /// Local crops plus the global one.
    pub total_subimages: usize,
    pub total_patches: usize,
    pub latent_embeddings: usize,
}

pub fn layout(config: &CropConfig) -> Result<PatchLayout> {
    config.validate()?;
    let grid = config.base_side / config.patch_side;
    let per_sub = grid * grid;
    let subimages = config.cx * config.cy + 1;
    let total = subimages * per_sub;
    Ok(PatchLayout {
        grid_per_subimage: grid,
        patches_per_subimage: per_sub,
        total_subimages: subimages,
        total_patches: total,
        latent_embeddings: total / config.concat_group,
    })
}

/// Source sample positions for one axis: `(lo, hi, frac)` per output index,
/// using half-pixel centres clamped to the edge.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres; results are rounded half
/// to even.
pub fn resize(image: &PixelGrid, height: usize, width: usize) -> Result<PixelGrid> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "resize target must be at least 1x1, got {height}x{width}"
        )));
    }
    if image.height() == height && image.width() == width {
        return Ok(image.clone());
    }
    let ch = image.channels();
    let rows = axis_taps(image.height(), height);
    let cols = axis_taps(image.width(), width);
    let src = image.data();
    let stride = image.width() * ch;
    let mut out = Vec::with_capacity(height * width * ch);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for c in 0..ch {
                let p = |y: usize, x: usize| f64::from(src[y * stride + x * ch + c]);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(v.round_ties_even().clamp(0.0, 255.0) as u8);
            }
        }
    }
    PixelGrid::new(height, width, ch, out)
}

fn push_patches<T: Scalar>(
    grid: &PixelGrid,
    origin: (usize, usize),
    config: &CropConfig,
    scale: &[T; 256],
    out: &mut Vec<T>,
) {
    let cells = config.base_side / config.patch_side;
    let ch = grid.channels();
    let data = grid.data();
    let stride = grid.width() * ch;
    for py in 0..cells {
        for px in 0..cells {
            let top = origin.0 + py * config.patch_side;
            let left = origin.1 + px * config.patch_side;
            for r in 0..config.patch_side {
                let start = (top + r) * stride + left * ch;
                let row = &data[start..start + config.patch_side * ch];
                out.extend(row.iter().map(|&v| scale[v as usize]));
            }
        }
    }
}

/// Flattened patch vectors for every local sub-image (row-major over the
/// crop grid, row-major patches within each) followed by the global
/// sub-image's patches. Pixels are scaled to `[0, 1]`.
///
/// The result has one row per patch and `patch_side^2 * channels` columns.
pub fn crop_and_patch<T: Scalar>(image: &PixelGrid, config: &CropConfig) -> Result<Array2<T>> {
    let plan = layout(config)?;
    let plen = config.patch_len(image.channels());
    let mut scale = [T::zero(); 256];
    for (v, s) in scale.iter_mut().enumerate() {
        *s = T::lit(v as f64 / 255.0);
    }
    let mut out = Vec::with_capacity(plan.total_patches * plen);

    let (h, w) = config.local_canvas();
    let local = resize(image, h, w)?;
    for sy in 0..config.cy {
        for sx in 0..config.cx {
            let origin = (sy * config.base_side, sx * config.base_side);
            push_patches(&local, origin, config, &scale, &mut out);
        }
    }
    let global = resize(image, config.base_side, config.base_side)?;
    push_patches(&global, (0, 0), config, &scale, &mut out);

    Array2::from_shape_vec((plan.total_patches, plen), out)
        .map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_counts() {
        let l = layout(&CropConfig::canonical(4, 4)).unwrap();
        assert_eq!(l.grid_per_subimage, 24);
        assert_eq!(l.patches_per_subimage, 576);
        assert_eq!(l.total_subimages, 17);
        assert_eq!(l.total_patches, 9792);
        assert_eq!(l.latent_embeddings, 2448);

        let l = layout(&CropConfig::canonical(1, 1)).unwrap();
        assert_eq!(l.total_patches, 1152);
        assert_eq!(l.latent_embeddings, 288);
    }

    #[test]
    fn toy_counts() {
        let cfg = CropConfig {
            cx: 2,
            cy: 3,
            base_side: 64,
            patch_side: 8,
            concat_group: 4,
        };
        let l = layout(&cfg).unwrap();
        assert_eq!(l.patches_per_subimage, 64);
        assert_eq!(l.total_patches, 448);
        assert_eq!(l.latent_embeddings, 112);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = CropConfig::toy(1, 1);
        cfg.patch_side = 7;
        assert!(matches!(layout(&cfg), Err(Error::Config(_))));
        let mut cfg = CropConfig::toy(1, 1);
        cfg.concat_group = 3;
        assert!(layout(&cfg).is_err());
        assert!(layout(&CropConfig::toy(0, 1)).is_err());
    }

    #[test]
    fn identity_and_constant_resize() {
        let g = crate::corpus::render_text_screenshot("abc", 64, 64, 2).unwrap();
        assert_eq!(resize(&g, 64, 64).unwrap(), g);
        let c = PixelGrid::filled(100, 100, 1, 77).unwrap();
        assert_eq!(
            resize(&c, 50, 50).unwrap(),
            PixelGrid::filled(50, 50, 1, 77).unwrap()
        );
        assert_eq!(
            resize(&c, 333, 7).unwrap(),
            PixelGrid::filled(333, 7, 1, 77).unwrap()
        );
        assert!(resize(&c, 0, 5).is_err());
    }

    #[test]
    fn checkerboard_to_single_pixel() {
        let g = PixelGrid::new(2, 2, 1, vec![0, 255, 255, 0]).unwrap();
        // Centre sample averages all four pixels: 127.5, rounded half to even.
        assert_eq!(resize(&g, 1, 1).unwrap().data(), &[128]);
    }

    #[test]
    fn downsample_by_two_is_box_average() {
        let g = PixelGrid::new(2, 4, 1, vec![10, 20, 30, 41, 50, 60, 70, 80]).unwrap();
        let r = resize(&g, 1, 2).unwrap();
        assert_eq!(r.data(), &[35, 55]); // (10+20+50+60)/4, (30+41+70+80)/4 = 55.25
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = PixelGrid::filled(50, 70, 1, 200).unwrap();
        let p = crop_and_patch::<f64>(&img, &CropConfig::toy(2, 2)).unwrap();
        assert_eq!(p.nrows(), 320);
        let first = p.row(0).to_owned();
        assert!(p.rows().into_iter().all(|r| r == first));
        assert!((first[0] - 200.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn one_by_one_toy_patch_count() {
        let img = PixelGrid::filled(64, 64, 1, 0).unwrap();
        let p = crop_and_patch::<f32>(&img, &CropConfig::toy(1, 1)).unwrap();
        assert_eq!(p.dim(), (128, 64));
    }

    #[test]
    fn single_bright_pixel_hits_expected_patches() {
        // 128x128 with crop (2,2) toy: local canvas is the image itself;
        // the global crop halves it, so pixel (0,0) lands at (0,0) there.
        let mut img = PixelGrid::filled(128, 128, 1, 0).unwrap();
        img.set(0, 0, 0, 255);
        let cfg = CropConfig::toy(2, 2);
        let p = crop_and_patch::<f64>(&img, &cfg).unwrap();
        let nonzero: Vec<usize> = p
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(_, r)| r.iter().any(|&v| v != 0.0))
            .map(|(i, _)| i)
            .collect();
        // patch 0 of sub-image 0, and patch 0 of the global crop (index 4*64).
        assert_eq!(nonzero, vec![0, 256]);
        assert_eq!(p[[0, 0]], 1.0);
        // 2x box average of {255,0,0,0} = 63.75 -> 64
        assert!((p[[256, 0]] - 64.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn rgb_patch_is_interleaved() {
        let mut img = PixelGrid::filled(8, 8, 3, 0).unwrap();
        img.set(0, 1, 2, 255);
        let cfg = CropConfig {
            cx: 1,
            cy: 1,
            base_side: 8,
            patch_side: 4,
            concat_group: 4,
        };
        let p = crop_and_patch::<f64>(&img, &cfg).unwrap();
        assert_eq!(p.dim(), (8, 48));
        assert_eq!(p[[0, 5]], 1.0);
    }

    fn valid_config() -> impl Strategy<Value = CropConfig> {
        (
            1usize..4,
            1usize..4,
            1usize..5,
            prop::sample::select(vec![2usize, 4, 8]),
        )
            .prop_map(|(cx, cy, grid, patch)| CropConfig {
                cx,
                cy,
                base_side: grid * 2 * patch,
                patch_side: patch,
                concat_group: 4,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn layout_matches_patch_count(cfg in valid_config(), h in 1usize..40, w in 1usize..40, v in 0u8..=255) {
            let img = PixelGrid::filled(h, w, 1, v).unwrap();
            let l = layout(&cfg).unwrap();
            let p = crop_and_patch::<f32>(&img, &cfg).unwrap();
            prop_assert_eq!(p.nrows(), l.total_patches);
            prop_assert_eq!(p.ncols(), cfg.patch_len(1));
            prop_assert_eq!(l.latent_embeddings * cfg.concat_group, l.total_patches);
            prop_assert_eq!(l.total_patches, (cfg.cx * cfg.cy + 1) * l.patches_per_subimage);
        }

        #[test]
        fn more_crops_more_patches(cx in 1usize..6, cy in 1usize..6, extra in 1usize..4) {
            let a = layout(&CropConfig::canonical(cx, cy)).unwrap();
            let b = layout(&CropConfig::canonical(cx + extra, cy)).unwrap();
            prop_assert!(b.total_patches > a.total_patches);
        }
    }
}
