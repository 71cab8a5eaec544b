use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, ImageDataset};
use crate::seed::mix;

/// One affine placement of a source image on a square canvas.
///
/// The linear part is `rotation · shear · scale`, applied about the source
/// center; with zero translation the source center lands on the canvas at
/// the integer offset `((canvas − w)/2, (canvas − h)/2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    pub shear: f64,
    pub tx: f64,
    pub ty: f64,
    pub canvas: usize,
}

/// Sampling ranges for random placements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineRanges {
    pub max_rotation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_shear: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self { max_rotation: 20f64.to_radians(), min_scale: 0.8, max_scale: 1.2, max_shear: 0.2 }
    }
}

impl AffineParams {
    pub fn identity(canvas: usize) -> Self {
        Self::translation(canvas, 0.0, 0.0)
    }

    pub fn translation(canvas: usize, tx: f64, ty: f64) -> Self {
        Self { rotation: 0.0, scale_x: 1.0, scale_y: 1.0, shear: 0.0, tx, ty, canvas }
    }

    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        let k = self.shear;
        [
            [c * self.scale_x, (c * k - s) * self.scale_y],
            [s * self.scale_x, (s * k + c) * self.scale_y],
        ]
    }

    fn center(&self, height: usize, width: usize) -> (f64, f64) {
        let off_x = ((self.canvas - width) / 2) as f64;
        let off_y = ((self.canvas - height) / 2) as f64;
        (off_x + (width as f64 - 1.0) / 2.0, off_y + (height as f64 - 1.0) / 2.0)
    }

    /// Canvas-coordinate extent `(x_min, x_max, y_min, y_max)` of the
    /// source box `bbox = (x0, x1, y0, y1)` (inclusive pixel centers),
    /// padded by one pixel for interpolation spread.
    fn extent(&self, bbox: (usize, usize, usize, usize), height: usize, width: usize) -> (f64, f64, f64, f64) {
        let m = self.matrix();
        let (cx, cy) = self.center(height, width);
        let (sx, sy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let xs = [bbox.0 as f64 - 1.0 - sx, bbox.1 as f64 + 1.0 - sx];
        let ys = [bbox.2 as f64 - 1.0 - sy, bbox.3 as f64 + 1.0 - sy];
        let mut e = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &x in &xs {
            for &y in &ys {
                let qx = m[0][0] * x + m[0][1] * y + cx + self.tx;
                let qy = m[1][0] * x + m[1][1] * y + cy + self.ty;
                e = (e.0.min(qx), e.1.max(qx), e.2.min(qy), e.3.max(qy));
            }
        }
        e
    }

    /// Whether the (padded) digit box stays inside the canvas.
    pub fn fits(&self, bbox: (usize, usize, usize, usize), height: usize, width: usize) -> bool {
        let max = self.canvas as f64 - 1.0;
        let (x0, x1, y0, y1) = self.extent(bbox, height, width);
        x0 >= 0.0 && y0 >= 0.0 && x1 <= max && y1 <= max
    }

    /// Draws a random placement whose digit box fits inside the canvas.
    /// Falls back to the untranslated identity if no draw fits.
    pub fn draw(
        rng: &mut impl Rng,
        ranges: &AffineRanges,
        bbox: (usize, usize, usize, usize),
        height: usize,
        width: usize,
        canvas: usize,
    ) -> Self {
        let max = canvas as f64 - 1.0;
        for _ in 0..100 {
            let mut p = Self {
                rotation: rng.gen_range(-ranges.max_rotation..=ranges.max_rotation),
                scale_x: rng.gen_range(ranges.min_scale..=ranges.max_scale),
                scale_y: rng.gen_range(ranges.min_scale..=ranges.max_scale),
                shear: rng.gen_range(-ranges.max_shear..=ranges.max_shear),
                tx: 0.0,
                ty: 0.0,
                canvas,
            };
            let (x0, x1, y0, y1) = p.extent(bbox, height, width);
            if x1 - x0 > max || y1 - y0 > max {
                continue;
            }
            p.tx = rng.gen_range(-x0..=max - x1);
            p.ty = rng.gen_range(-y0..=max - y1);
            return p;
        }
        Self::identity(canvas)
    }
}

/// Inclusive bounding box `(x0, x1, y0, y1)` of nonzero pixels in a
/// single-channel image; the full frame if the image is blank.
pub fn digit_bbox(img: &[u8], height: usize, width: usize) -> (usize, usize, usize, usize) {
    let mut b = (width, 0, height, 0);
    for y in 0..height {
        for x in 0..width {
            if img[y * width + x] > 0 {
                b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
            }
        }
    }
    if b.0 > b.1 {
        (0, width - 1, 0, height - 1)
    } else {
        b
    }
}

/// Bilinear resampling of a single-channel `height`×`width` image onto the
/// canvas. Values outside the source are 0; results are rounded and clamped
/// to `max_value`.
pub fn apply_affine(img: &[u8], height: usize, width: usize, params: &AffineParams, max_value: u8) -> Vec<u8> {
    let m = params.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cx, cy) = params.center(height, width);
    let (sx, sy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let at = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= height as i64 || x >= width as i64 {
            0.0
        } else {
            f64::from(img[y as usize * width + x as usize])
        }
    };
    let n = params.canvas;
    let mut out = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 - cx - params.tx;
            let dy = y as f64 - cy - params.ty;
            let u = inv[0][0] * dx + inv[0][1] * dy + sx;
            let v = inv[1][0] * dx + inv[1][1] * dy + sy;
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let (iu, iv) = (u0 as i64, v0 as i64);
            let value = (1.0 - fv) * ((1.0 - fu) * at(iv, iu) + fu * at(iv, iu + 1))
                + fv * ((1.0 - fu) * at(iv + 1, iu) + fu * at(iv + 1, iu + 1));
            out[y * n + x] = value.round().clamp(0.0, f64::from(max_value)) as u8;
        }
    }
    out
}

/// Places every source digit on a `canvas`×`canvas` frame under its own
/// seeded random affine draw. Labels, split tags and levels carry over.
pub fn make_affine_digits(
    source: &ImageDataset,
    canvas: usize,
    seed: u64,
    ranges: &AffineRanges,
) -> Result<(ImageDataset, Vec<AffineParams>), DataError> {
    if canvas < source.height || canvas < source.width {
        return Err(DataError::CanvasTooSmall { canvas, height: source.height, width: source.width });
    }
    if source.channels != 1 {
        return Err(DataError::Inconsistent("affine digits need single-channel images".into()));
    }
    let max_value = (source.levels - 1) as u8;
    let mut images = Vec::with_capacity(source.len() * canvas * canvas);
    let mut params = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let img = source.image(i);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
        let bbox = digit_bbox(img, source.height, source.width);
        let p = AffineParams::draw(&mut rng, ranges, bbox, source.height, source.width, canvas);
        images.extend(apply_affine(img, source.height, source.width, &p, max_value));
        params.push(p);
    }
    let out = ImageDataset {
        images,
        height: canvas,
        width: canvas,
        labels: source.labels.clone(),
        splits: source.splits.clone(),
        ..source.clone_header()
    };
    Ok((out, params))
}
