//! Reconstruction grid and sinogram geometry, plus the pixel/bin containers
//! shared by every other module.

use ndarray::Array2;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum GeometryError {
    #[error("image grids must be square, got {width}x{height}")]
    NonSquare { width: usize, height: usize },
    #[error("image dimensions must be nonzero")]
    EmptyGrid,
    #[error("pixel size must be positive, got {0}")]
    BadPixelSize(f64),
    #[error("fov radius {fov} out of range (0, {max}]")]
    BadFovRadius { fov: f64, max: f64 },
    #[error("sinogram needs at least one angle and one bin")]
    EmptySinogram,
    #[error("bin spacing must be positive, got {0}")]
    BadBinSpacing(f64),
    #[error("array shape {got:?} does not match geometry {want:?}")]
    ShapeMismatch { got: (usize, usize), want: (usize, usize) },
    #[error("values must be finite")]
    NonFiniteValues,
}

/// Square reconstruction grid with a circular field of view.
///
/// Physical coordinates are centered: pixel (row, col) has its center at
/// `x = (col + 0.5 - width/2) * pixel_size`, `y = (row + 0.5 - height/2) * pixel_size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageGeometry {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    pub fov_radius: f64,
}

impl ImageGeometry {
    /// Square grid with the default FOV radius of `width/2 * pixel_size`.
    pub fn square(size: usize, pixel_size: f64) -> Result<Self, GeometryError> {
        let fov = size as f64 / 2.0 * pixel_size;
        Self::new(size, size, pixel_size, fov)
    }

    pub fn new(
        width: usize,
        height: usize,
        pixel_size: f64,
        fov_radius: f64,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyGrid);
        }
        if width != height {
            return Err(GeometryError::NonSquare { width, height });
        }
        if !(pixel_size > 0.0) || !pixel_size.is_finite() {
            return Err(GeometryError::BadPixelSize(pixel_size));
        }
        let max = width as f64 / 2.0 * pixel_size;
        if !(fov_radius > 0.0) || fov_radius > max {
            return Err(GeometryError::BadFovRadius { fov: fov_radius, max });
        }
        Ok(Self { width, height, pixel_size, fov_radius })
    }

    /// Physical (x, y) of a pixel center, relative to the grid center.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = (col as f64 + 0.5 - self.width as f64 / 2.0) * self.pixel_size;
        let y = (row as f64 + 0.5 - self.height as f64 / 2.0) * self.pixel_size;
        (x, y)
    }

    /// Whether a pixel center lies strictly inside the FOV circle.
    pub fn in_fov(&self, row: usize, col: usize) -> bool {
        let (x, y) = self.pixel_center(row, col);
        x * x + y * y < self.fov_radius * self.fov_radius
    }
}

/// Pixels whose center lies strictly inside the FOV circle, row-major.
pub fn fov_pixel_list(geom: &ImageGeometry) -> Vec<(usize, usize)> {
    let mut pixels = Vec::new();
    for row in 0..geom.height {
        for col in 0..geom.width {
            if geom.in_fov(row, col) {
                pixels.push((row, col));
            }
        }
    }
    pixels
}

/// Radon-domain layout: `num_angles` views uniformly spanning [0, pi) and
/// `num_bins` radial samples centered on offset zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinogramGeometry {
    pub num_angles: usize,
    pub num_bins: usize,
    pub bin_spacing: f64,
}

impl SinogramGeometry {
    pub fn new(num_angles: usize, num_bins: usize, bin_spacing: f64) -> Result<Self, GeometryError> {
        if num_angles == 0 || num_bins == 0 {
            return Err(GeometryError::EmptySinogram);
        }
        if !(bin_spacing > 0.0) || !bin_spacing.is_finite() {
            return Err(GeometryError::BadBinSpacing(bin_spacing));
        }
        Ok(Self { num_angles, num_bins, bin_spacing })
    }

    /// View angle of row `i`, in radians.
    pub fn angle(&self, i: usize) -> f64 {
        i as f64 * std::f64::consts::PI / self.num_angles as f64
    }

    /// Radial offset of bin `j`; the axis is centered at index (num_bins-1)/2.
    pub fn bin_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.num_bins as f64 - 1.0) / 2.0) * self.bin_spacing
    }

    /// Continuous bin coordinate of a physical radial offset (inverse of `bin_offset`).
    pub fn offset_to_bin(&self, s: f64) -> f64 {
        s / self.bin_spacing + (self.num_bins as f64 - 1.0) / 2.0
    }

    pub fn total_bins(&self) -> usize {
        self.num_angles * self.num_bins
    }
}

/// Activity image on a grid. Values are in arbitrary activity units.
#[derive(Debug, Clone)]
pub struct ImageGrid {
    pub geometry: ImageGeometry,
    pub values: Array2<f64>,
}

impl ImageGrid {
    pub fn zeros(geometry: ImageGeometry) -> Self {
        Self { geometry, values: Array2::zeros((geometry.height, geometry.width)) }
    }

    pub fn new(geometry: ImageGeometry, values: Array2<f64>) -> Result<Self, GeometryError> {
        let want = (geometry.height, geometry.width);
        if values.dim() != want {
            return Err(GeometryError::ShapeMismatch { got: values.dim(), want });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteValues);
        }
        Ok(Self { geometry, values })
    }

    /// Zero every pixel whose center lies outside the FOV circle.
    pub fn clear_outside_fov(&mut self) {
        for row in 0..self.geometry.height {
            for col in 0..self.geometry.width {
                if !self.geometry.in_fov(row, col) {
                    self.values[(row, col)] = 0.0;
                }
            }
        }
    }
}

/// Measurement array over (angle, radial bin); counts or line-integral units.
#[derive(Debug, Clone)]
pub struct Sinogram {
    pub geometry: SinogramGeometry,
    pub values: Array2<f64>,
}

impl Sinogram {
    pub fn zeros(geometry: SinogramGeometry) -> Self {
        Self { geometry, values: Array2::zeros((geometry.num_angles, geometry.num_bins)) }
    }

    pub fn new(geometry: SinogramGeometry, values: Array2<f64>) -> Result<Self, GeometryError> {
        let want = (geometry.num_angles, geometry.num_bins);
        if values.dim() != want {
            return Err(GeometryError::ShapeMismatch { got: values.dim(), want });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteValues);
        }
        Ok(Self { geometry, values })
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}
