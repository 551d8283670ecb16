//! Image container, patch grids, boundary padding and PSNR.
//!
//! Pixels are stored interleaved (`(row * width + col) * channels + ch`) and
//! a patch vector lists its `p × p × C` block in the same order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// A float raster with 1 or more interleaved channels, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(height, width, channels);
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid(format!("image dimensions must be positive, got {height}x{width}x{channels}")));
        }
        if data.len() != shape.len() {
            return Err(invalid(format!(
                "image data has {} values, expected {}x{}x{} = {}",
                data.len(),
                height,
                width,
                channels,
                shape.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("image value at index {i} is not finite")));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for r in 0..shape.height {
            for c in 0..shape.width {
                for ch in 0..shape.channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self { shape, data }
    }

    /// Builds an image without checking finiteness. Length must match.
    pub(crate) fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.shape.width + col) * self.shape.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height() || left + width > self.width() || height == 0 || width == 0 {
            return Err(invalid(format!(
                "crop {height}x{width} at ({top},{left}) exceeds image {}x{}",
                self.height(),
                self.width()
            )));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for r in top..top + height {
            let start = self.index(r, left, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Image::from_vec(Shape::new(height, width, c), data))
    }

    /// Pixelwise `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Image) -> Result<()> {
        ensure_same_shape(self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &Image) -> Result<f64> {
        ensure_same_shape(self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn squared_distance(&self, other: &Image) -> Result<f64> {
        ensure_same_shape(self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// Luma conversion with Rec. 601 weights; single-channel images are returned unchanged.
    pub fn to_gray(&self) -> Image {
        match self.channels() {
            1 => self.clone(),
            3 => {
                let shape = Shape::new(self.height(), self.width(), 1);
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
                    .collect();
                Image::from_vec(shape, data)
            }
            c => {
                let shape = Shape::new(self.height(), self.width(), 1);
                let data = self.data.chunks_exact(c).map(|px| px.iter().sum::<f64>() / c as f64).collect();
                Image::from_vec(shape, data)
            }
        }
    }
}

pub(crate) fn ensure_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Whole-sample symmetric index: `-1 -> 1`, `n -> n - 2`.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let j = i.rem_euclid(period);
    if j >= n as isize {
        (period - j) as usize
    } else {
        j as usize
    }
}

/// Per-side padding amounts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(margin: usize) -> Self {
        Self { top: margin, bottom: margin, left: margin, right: margin }
    }

    pub fn padded_shape(&self, shape: Shape) -> Shape {
        Shape::new(
            shape.height + self.top + self.bottom,
            shape.width + self.left + self.right,
            shape.channels,
        )
    }

    fn check(&self, shape: Shape) -> Result<()> {
        let fits = |n: usize, a: usize, b: usize| n == 1 || a.max(b) < n;
        if !fits(shape.height, self.top, self.bottom) || !fits(shape.width, self.left, self.right) {
            return Err(invalid(format!(
                "reflection padding {:?} too large for a {}x{} image",
                self, shape.height, shape.width
            )));
        }
        Ok(())
    }
}

/// Reflect-pads a raw interleaved buffer. Values are copied verbatim, so
/// non-finite entries (e.g. infinite variances) are allowed.
pub(crate) fn pad_reflect_raw(data: &[f64], shape: Shape, pad: Padding) -> Result<Vec<f64>> {
    pad.check(shape)?;
    Ok(extend_reflect(data, shape, pad))
}

/// Like [`pad_reflect_raw`] but without the size check: margins wider than
/// the image keep reflecting back and forth.
pub(crate) fn extend_reflect(data: &[f64], shape: Shape, pad: Padding) -> Vec<f64> {
    let out_shape = pad.padded_shape(shape);
    let c = shape.channels;
    let mut out = Vec::with_capacity(out_shape.len());
    for r in 0..out_shape.height {
        let sr = reflect_index(r as isize - pad.top as isize, shape.height);
        for col in 0..out_shape.width {
            let sc = reflect_index(col as isize - pad.left as isize, shape.width);
            let base = (sr * shape.width + sc) * c;
            out.extend_from_slice(&data[base..base + c]);
        }
    }
    out
}

/// Reflects the image about its edges (no edge repeat) by `margin` pixels on
/// every side. An axis of length one is extended by replication.
pub fn pad_reflect(img: &Image, margin: usize) -> Result<Image> {
    pad_reflect_with(img, Padding::uniform(margin))
}

pub fn pad_reflect_with(img: &Image, pad: Padding) -> Result<Image> {
    let data = pad_reflect_raw(img.data(), img.shape(), pad)?;
    Ok(Image::from_vec(pad.padded_shape(img.shape()), data))
}

/// A grid of non-overlapping `p × p` patches starting at `(offset_y, offset_x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridSpec {
    pub patch_size: usize,
    pub offset_y: usize,
    pub offset_x: usize,
}

/// Number of patch rows and columns a grid places on an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
}

impl GridLayout {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

impl GridSpec {
    pub fn new(patch_size: usize, offset_y: usize, offset_x: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(invalid("patch size must be positive"));
        }
        if offset_y >= patch_size || offset_x >= patch_size {
            return Err(invalid(format!(
                "grid offset ({offset_y},{offset_x}) must lie in [0,{patch_size})"
            )));
        }
        Ok(Self { patch_size, offset_y, offset_x })
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        self.patch_size * self.patch_size * channels
    }

    /// Patches laid out from the offset until the next one would overhang.
    pub fn layout(&self, shape: Shape) -> Result<GridLayout> {
        let p = self.patch_size;
        if p == 0 || self.offset_y >= p || self.offset_x >= p {
            return Err(invalid(format!("invalid grid {self:?}")));
        }
        if shape.height < self.offset_y + p || shape.width < self.offset_x + p {
            return Err(invalid(format!(
                "grid {:?} does not fit a {}x{} image",
                self, shape.height, shape.width
            )));
        }
        Ok(GridLayout {
            rows: (shape.height - self.offset_y) / p,
            cols: (shape.width - self.offset_x) / p,
        })
    }

    /// Per-pixel flags: `true` where a patch of this grid covers the pixel.
    pub fn coverage(&self, shape: Shape) -> Result<Vec<bool>> {
        let layout = self.layout(shape)?;
        let p = self.patch_size;
        let rows = self.offset_y..self.offset_y + layout.rows * p;
        let cols = self.offset_x..self.offset_x + layout.cols * p;
        let mut mask = vec![false; shape.pixels()];
        for r in rows {
            for c in cols.clone() {
                mask[r * shape.width + c] = true;
            }
        }
        Ok(mask)
    }
}

/// Copies the `p × p × C` block whose top-left corner is `(r0, c0)`, wrapping
/// indices modulo the image size.
fn read_block(img: &Image, r0: usize, c0: usize, p: usize, out: &mut Vec<f64>) {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    for dr in 0..p {
        let r = (r0 + dr) % h;
        if c0 + p <= w {
            let start = img.index(r, c0, 0);
            out.extend_from_slice(&img.data()[start..start + p * ch]);
        } else {
            for dc in 0..p {
                let start = img.index(r, (c0 + dc) % w, 0);
                out.extend_from_slice(&img.data()[start..start + ch]);
            }
        }
    }
}

fn write_block(img: &mut Image, r0: usize, c0: usize, p: usize, patch: &[f64]) {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut k = 0;
    for dr in 0..p {
        let r = (r0 + dr) % h;
        for dc in 0..p {
            let start = img.index(r, (c0 + dc) % w, 0);
            img.data_mut()[start..start + ch].copy_from_slice(&patch[k..k + ch]);
            k += ch;
        }
    }
}

/// Extracts the patches of `grid`, ordered row-major by block position.
pub fn extract_grid_patches(img: &Image, grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
    let layout = grid.layout(img.shape())?;
    let p = grid.patch_size;
    let dim = grid.patch_dim(img.channels());
    let mut patches = Vec::with_capacity(layout.count());
    for br in 0..layout.rows {
        for bc in 0..layout.cols {
            let mut patch = Vec::with_capacity(dim);
            read_block(img, grid.offset_y + br * p, grid.offset_x + bc * p, p, &mut patch);
            patches.push(patch);
        }
    }
    Ok(patches)
}

fn check_patches(patches: &[Vec<f64>], expected: usize, dim: usize) -> Result<()> {
    if patches.len() != expected {
        return Err(invalid(format!("expected {expected} patches, got {}", patches.len())));
    }
    if let Some(bad) = patches.iter().position(|p| p.len() != dim) {
        return Err(invalid(format!(
            "patch {bad} has {} values, expected {dim}",
            patches[bad].len()
        )));
    }
    Ok(())
}

/// Writes `patches` into the pixels covered by `grid`, leaving the rest of
/// `img` untouched.
pub fn assemble_grid_patches_into(patches: &[Vec<f64>], grid: &GridSpec, img: &mut Image) -> Result<()> {
    let layout = grid.layout(img.shape())?;
    let p = grid.patch_size;
    check_patches(patches, layout.count(), grid.patch_dim(img.channels()))?;
    for (i, patch) in patches.iter().enumerate() {
        let (br, bc) = (i / layout.cols, i % layout.cols);
        write_block(img, grid.offset_y + br * p, grid.offset_x + bc * p, p, patch);
    }
    Ok(())
}

/// Inverse of [`extract_grid_patches`]; pixels outside the grid are zero.
pub fn assemble_grid_patches(patches: &[Vec<f64>], grid: &GridSpec, shape: Shape) -> Result<Image> {
    let mut img = Image::zeros(shape);
    assemble_grid_patches_into(patches, grid, &mut img)?;
    Ok(img)
}

fn periodic_layout(grid: &GridSpec, shape: Shape) -> Result<GridLayout> {
    let p = grid.patch_size;
    if p == 0 || grid.offset_y >= p || grid.offset_x >= p {
        return Err(invalid(format!("invalid grid {grid:?}")));
    }
    if shape.height % p != 0 || shape.width % p != 0 {
        return Err(invalid(format!(
            "periodic grids need dimensions divisible by {p}, got {}x{}",
            shape.height, shape.width
        )));
    }
    Ok(GridLayout { rows: shape.height / p, cols: shape.width / p })
}

/// Extracts patches treating the image as a torus; every pixel lands in
/// exactly one patch for any offset.
pub fn extract_grid_patches_periodic(img: &Image, grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
    let layout = periodic_layout(grid, img.shape())?;
    let p = grid.patch_size;
    let dim = grid.patch_dim(img.channels());
    let mut patches = Vec::with_capacity(layout.count());
    for br in 0..layout.rows {
        for bc in 0..layout.cols {
            let mut patch = Vec::with_capacity(dim);
            read_block(img, grid.offset_y + br * p, grid.offset_x + bc * p, p, &mut patch);
            patches.push(patch);
        }
    }
    Ok(patches)
}

pub fn assemble_grid_patches_periodic(patches: &[Vec<f64>], grid: &GridSpec, shape: Shape) -> Result<Image> {
    let layout = periodic_layout(grid, shape)?;
    let p = grid.patch_size;
    check_patches(patches, layout.count(), grid.patch_dim(shape.channels))?;
    let mut img = Image::zeros(shape);
    for (i, patch) in patches.iter().enumerate() {
        let (br, bc) = (i / layout.cols, i % layout.cols);
        write_block(&mut img, grid.offset_y + br * p, grid.offset_x + bc * p, p, patch);
    }
    Ok(img)
}

/// An ordered set of grids sharing one patch size; grid 0 is unshifted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridSet {
    grids: Vec<GridSpec>,
}

impl GridSet {
    pub fn new(grids: Vec<GridSpec>) -> Result<Self> {
        let first = grids.first().ok_or_else(|| invalid("grid set must not be empty"))?;
        let p = first.patch_size;
        if first.offset_y != 0 || first.offset_x != 0 {
            return Err(invalid("the first grid must have offset (0,0)"));
        }
        for (i, g) in grids.iter().enumerate() {
            GridSpec::new(g.patch_size, g.offset_y, g.offset_x)?;
            if g.patch_size != p {
                return Err(invalid(format!("grid {i} has patch size {}, expected {p}", g.patch_size)));
            }
            if grids[..i].iter().any(|o| o.offset_y == g.offset_y && o.offset_x == g.offset_x) {
                return Err(invalid(format!("grid {i} repeats offset ({},{})", g.offset_y, g.offset_x)));
            }
        }
        Ok(Self { grids })
    }

    pub fn patch_size(&self) -> usize {
        self.grids[0].patch_size
    }

    pub fn count(&self) -> usize {
        self.grids.len()
    }

    pub fn grids(&self) -> &[GridSpec] {
        &self.grids
    }

    pub fn get(&self, g: usize) -> &GridSpec {
        &self.grids[g]
    }
}

/// Offset (0,0) followed by `count - 1` distinct offsets drawn by a seeded
/// shuffle of the remaining `p² - 1` shifts.
pub fn make_grids(patch_size: usize, count: usize, seed: u64) -> Result<GridSet> {
    if patch_size == 0 {
        return Err(invalid("patch size must be positive"));
    }
    let total = patch_size * patch_size;
    if count == 0 || count > total {
        return Err(invalid(format!(
            "grid count must be in [1,{total}] for patch size {patch_size}, got {count}"
        )));
    }
    let mut rest: Vec<(usize, usize)> = (1..total).map(|i| (i / patch_size, i % patch_size)).collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let grids = std::iter::once((0, 0))
        .chain(rest.into_iter().take(count - 1))
        .map(|(oy, ox)| GridSpec { patch_size, offset_y: oy, offset_x: ox })
        .collect();
    GridSet::new(grids)
}

/// `n` patches of size `p × p` at uniformly random positions, drawn from
/// uniformly chosen images among those at least `p` on each side.
pub fn sample_patches(images: &[Image], p: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if p == 0 {
        return Err(invalid("patch size must be positive"));
    }
    let usable: Vec<&Image> = images.iter().filter(|im| im.height() >= p && im.width() >= p).collect();
    if usable.is_empty() {
        return Err(invalid(format!("no image is at least {p}x{p}")));
    }
    if usable.iter().any(|im| im.channels() != usable[0].channels()) {
        return Err(invalid("images have different channel counts"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let img = usable[rng.random_range(0..usable.len())];
        let r = rng.random_range(0..=img.height() - p);
        let c = rng.random_range(0..=img.width() - p);
        let mut patch = Vec::with_capacity(p * p * img.channels());
        read_block(img, r, c, p, &mut patch);
        out.push(patch);
    }
    Ok(out)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    Ok(a.squared_distance(b)? / a.data().len() as f64)
}

/// `10·log10(peak² / MSE)`; `+∞` when the images are identical.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(invalid(format!("peak must be positive, got {peak}")));
    }
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}
