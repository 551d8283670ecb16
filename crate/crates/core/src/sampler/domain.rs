//! The working domain of a chain: the input extended so that every grid
//! tiles it.

use crate::error::Result;
use crate::image::{
    assemble_grid_patches_into, assemble_grid_patches_periodic, extend_reflect, extract_grid_patches,
    extract_grid_patches_periodic, GridSpec, Image, Padding, Shape,
};

pub(crate) fn extend(img: &Image, pad: Padding) -> Image {
    Image::from_vec(pad.padded_shape(img.shape()), extend_reflect(img.data(), img.shape(), pad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Boundary {
    /// Reflect-padded by the patch size on every side; grids are cut off at
    /// the padded edge.
    Reflect,
    /// Treated as a torus, padded at the bottom/right only up to a multiple
    /// of the patch size; grids wrap around.
    Torus,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Domain {
    boundary: Boundary,
    pad: Padding,
    original: Shape,
    pub shape: Shape,
}

impl Domain {
    pub fn reflect(original: Shape, patch_size: usize) -> Self {
        let pad = Padding::uniform(patch_size);
        Self { boundary: Boundary::Reflect, pad, original, shape: pad.padded_shape(original) }
    }

    pub fn torus(original: Shape, patch_size: usize) -> Self {
        let extra = |n: usize| (patch_size - n % patch_size) % patch_size;
        let pad = Padding { top: 0, bottom: extra(original.height), left: 0, right: extra(original.width) };
        Self { boundary: Boundary::Torus, pad, original, shape: pad.padded_shape(original) }
    }

    pub fn extend(&self, img: &Image) -> Image {
        extend(img, self.pad)
    }

    /// Extends a raw buffer of the original size (may hold non-finite values).
    pub fn extend_raw(&self, data: &[f64], channels: usize) -> Vec<f64> {
        let shape = Shape::new(self.original.height, self.original.width, channels);
        extend_reflect(data, shape, self.pad)
    }

    pub fn crop(&self, img: &Image) -> Result<Image> {
        img.crop(self.pad.top, self.pad.left, self.original.height, self.original.width)
    }

    pub fn extract(&self, img: &Image, grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
        match self.boundary {
            Boundary::Reflect => extract_grid_patches(img, grid),
            Boundary::Torus => extract_grid_patches_periodic(img, grid),
        }
    }

    pub fn assemble_into(&self, patches: &[Vec<f64>], grid: &GridSpec, img: &mut Image) -> Result<()> {
        match self.boundary {
            Boundary::Reflect => assemble_grid_patches_into(patches, grid, img),
            Boundary::Torus => {
                *img = assemble_grid_patches_periodic(patches, grid, img.shape())?;
                Ok(())
            }
        }
    }

    /// Pixel indices no patch of `grid` touches.
    pub fn uncovered(&self, grid: &GridSpec) -> Result<Vec<usize>> {
        Ok(match self.boundary {
            Boundary::Reflect => grid
                .coverage(self.shape)?
                .iter()
                .enumerate()
                .filter(|(_, &c)| !c)
                .map(|(i, _)| i)
                .collect(),
            Boundary::Torus => Vec::new(),
        })
    }
}
