//! Row-major 2D rasters and the sampling/filtering helpers used by the
//! energy terms.

/// Dense row-major raster. `(x, y)` indexing with `y` selecting the row.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Raster {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height);
        Raster {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Raster {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn at(&self, index: usize) -> T {
        self.data[index]
    }

    #[inline]
    pub fn index_of(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords_of(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl Raster<f64> {
    /// Bilinear sample at continuous coordinates. `None` outside
    /// `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        self.sample_bilinear_with_grad(u, v)
            .map(|(value, _, _)| value)
    }

    /// Bilinear sample together with the exact in-cell derivative of the
    /// interpolated surface, `(value, d/du, d/dv)`.
    pub fn sample_bilinear_with_grad(&self, u: f64, v: f64) -> Option<(f64, f64, f64)> {
        let wf = (self.width - 1) as f64;
        let hf = (self.height - 1) as f64;
        if !(u >= 0.0 && u <= wf && v >= 0.0 && v <= hf) {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        if self.width < 2 || self.height < 2 {
            // Degenerate rasters admit no interpolation cell.
            return if self.width == 1 && self.height == 1 {
                Some((self.get(0, 0), 0.0, 0.0))
            } else {
                None
            };
        }
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let i00 = self.get(x0, y0);
        let i10 = self.get(x0 + 1, y0);
        let i01 = self.get(x0, y0 + 1);
        let i11 = self.get(x0 + 1, y0 + 1);
        let value = (1.0 - fy) * ((1.0 - fx) * i00 + fx * i10) + fy * ((1.0 - fx) * i01 + fx * i11);
        let du = (1.0 - fy) * (i10 - i00) + fy * (i11 - i01);
        let dv = (1.0 - fx) * (i01 - i00) + fx * (i11 - i10);
        Some((value, du, dv))
    }

    /// Separable Gaussian blur with kernel radius `ceil(3 sigma)` and
    /// replicated borders. `sigma <= 0` is the identity.
    pub fn gaussian_blur(&self, sigma: f64) -> Raster<f64> {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let radius = kernel.len() / 2;
        let clamp = |i: isize, n: usize| -> usize { i.clamp(0, n as isize - 1) as usize };

        let mut horizontal = Raster::filled(self.width, self.height, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + k as isize - radius as isize, self.width);
                    acc += w * self.get(sx, y);
                }
                horizontal.set(x, y, acc);
            }
        }
        let mut out = Raster::filled(self.width, self.height, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + k as isize - radius as isize, self.height);
                    acc += w * horizontal.get(x, sy);
                }
                out.set(x, y, acc);
            }
        }
        out
    }
}

/// Normalized 1D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= sum;
    }
    kernel
}
