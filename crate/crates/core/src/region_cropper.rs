//! The sixteen local facial regions fed to the local clue aggregator.
//!
//! Eight directions, each cropped at one half and three quarters of the side
//! length, every window resized to 48x48 with corner-aligned bilinear
//! interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REGION_SIZE: usize = 48;
pub const REGION_COUNT: usize = 16;
pub const MIN_IMAGE_SIDE: usize = 4;

/// An RGB image with values in `[0, 1]`, stored row-major as `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::Invalid(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {height}x{width}"
            )));
        }
        Self::window(height, width, data)
    }

    /// Like [`ImageTensor::new`] without the minimum-side invariant; used for
    /// crop windows and resize inputs.
    pub fn window(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image extent must be positive".into()));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn mirror_horizontal(&self) -> Self {
        self.remap(|y, x| (y, self.width - 1 - x))
    }

    pub fn mirror_vertical(&self) -> Self {
        self.remap(|y, x| (self.height - 1 - y, x))
    }

    fn remap(&self, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                let (sy, sx) = src(y, x);
                data.extend_from_slice(&self.data[(sy * self.width + sx) * 3..][..3]);
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Top,
    Bottom,
    Left,
    Right,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::Top,
        Direction::Bottom,
        Direction::Left,
        Direction::Right,
        Direction::TopLeft,
        Direction::TopRight,
        Direction::BottomLeft,
        Direction::BottomRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Top => "top",
            Direction::Bottom => "bottom",
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::TopLeft => "top-left",
            Direction::TopRight => "top-right",
            Direction::BottomLeft => "bottom-left",
            Direction::BottomRight => "bottom-right",
        }
    }

    /// The direction seen in a horizontally mirrored image.
    pub fn mirrored_horizontal(self) -> Self {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::TopLeft => Direction::TopRight,
            Direction::TopRight => Direction::TopLeft,
            Direction::BottomLeft => Direction::BottomRight,
            Direction::BottomRight => Direction::BottomLeft,
            d => d,
        }
    }

    pub fn mirrored_vertical(self) -> Self {
        match self {
            Direction::Top => Direction::Bottom,
            Direction::Bottom => Direction::Top,
            Direction::TopLeft => Direction::BottomLeft,
            Direction::TopRight => Direction::BottomRight,
            Direction::BottomLeft => Direction::TopLeft,
            Direction::BottomRight => Direction::TopRight,
            d => d,
        }
    }

    fn takes_rows(self) -> Option<bool> {
        // Some(true): rows from the top, Some(false): rows from the bottom
        match self {
            Direction::Top | Direction::TopLeft | Direction::TopRight => Some(true),
            Direction::Bottom | Direction::BottomLeft | Direction::BottomRight => Some(false),
            Direction::Left | Direction::Right => None,
        }
    }

    fn takes_cols(self) -> Option<bool> {
        match self {
            Direction::Left | Direction::TopLeft | Direction::BottomLeft => Some(true),
            Direction::Right | Direction::TopRight | Direction::BottomRight => Some(false),
            Direction::Top | Direction::Bottom => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fraction {
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "3/4")]
    ThreeQuarters,
}

impl Fraction {
    pub const ALL: [Fraction; 2] = [Fraction::Half, Fraction::ThreeQuarters];

    /// `floor(fraction * side)` in exact integer arithmetic.
    pub fn of(self, side: usize) -> usize {
        match self {
            Fraction::Half => side / 2,
            Fraction::ThreeQuarters => side * 3 / 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Fraction::Half => "1-2",
            Fraction::ThreeQuarters => "3-4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropSpec {
    pub direction: Direction,
    pub fraction: Fraction,
}

impl CropSpec {
    /// The sixteen specs in canonical order: directions as listed in
    /// [`Direction::ALL`], half before three quarters within each.
    pub fn canonical() -> Vec<CropSpec> {
        Direction::ALL
            .iter()
            .flat_map(|&direction| {
                Fraction::ALL
                    .iter()
                    .map(move |&fraction| CropSpec { direction, fraction })
            })
            .collect()
    }

    pub fn label(&self) -> String {
        format!("{}_{}", self.direction.name(), self.fraction.label())
    }
}

/// Half-open pixel window `[row_start, row_end) x [col_start, col_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelWindow {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl PixelWindow {
    pub fn height(&self) -> usize {
        self.row_end - self.row_start
    }

    pub fn width(&self) -> usize {
        self.col_end - self.col_start
    }
}

/// How edge directions treat the axis perpendicular to the cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Edge crops keep the full perpendicular extent (canonical).
    #[default]
    Strip,
    /// Non-canonical: edge crops are also cut to the fraction along the
    /// perpendicular axis, centred.
    Square,
}

pub fn crop_window(height: usize, width: usize, spec: CropSpec, mode: CropMode) -> Result<PixelWindow> {
    let h = spec.fraction.of(height);
    let w = spec.fraction.of(width);
    if h < 1 || w < 1 {
        return Err(Error::Invalid(format!(
            "crop {} of a {height}x{width} image is empty",
            spec.label()
        )));
    }
    let centred = |extent: usize, keep: usize| ((extent - keep) / 2, (extent - keep) / 2 + keep);
    let (row_start, row_end) = match (spec.direction.takes_rows(), mode) {
        (Some(true), _) => (0, h),
        (Some(false), _) => (height - h, height),
        (None, CropMode::Strip) => (0, height),
        (None, CropMode::Square) => centred(height, h),
    };
    let (col_start, col_end) = match (spec.direction.takes_cols(), mode) {
        (Some(true), _) => (0, w),
        (Some(false), _) => (width - w, width),
        (None, CropMode::Strip) => (0, width),
        (None, CropMode::Square) => centred(width, w),
    };
    Ok(PixelWindow {
        row_start,
        row_end,
        col_start,
        col_end,
    })
}

/// Copy of the pixels inside `spec`'s window (canonical strip mode).
pub fn crop_region(image: &ImageTensor, spec: CropSpec) -> Result<ImageTensor> {
    crop_region_with_mode(image, spec, CropMode::Strip)
}

pub fn crop_region_with_mode(image: &ImageTensor, spec: CropSpec, mode: CropMode) -> Result<ImageTensor> {
    let win = crop_window(image.height, image.width, spec, mode)?;
    Ok(extract_window(image, &win))
}

pub fn extract_window(image: &ImageTensor, win: &PixelWindow) -> ImageTensor {
    let mut data = Vec::with_capacity(win.height() * win.width() * 3);
    for y in win.row_start..win.row_end {
        let start = (y * image.width + win.col_start) * 3;
        let end = (y * image.width + win.col_end) * 3;
        data.extend_from_slice(&image.data[start..end]);
    }
    ImageTensor {
        height: win.height(),
        width: win.width(),
        data,
    }
}

/// Corner-aligned bilinear resize to `out_h x out_w`.
///
/// Interpolation is written as `a + (b - a) t`, so constant images come out
/// as the same constant bit for bit, and a same-size resize is the identity.
pub fn resize_bilinear_to(window: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let src_coord = |i: usize, in_extent: usize, out_extent: usize| -> (usize, usize, f64) {
        if in_extent == 1 || out_extent == 1 {
            return (0, 0, 0.0);
        }
        let pos = (i * (in_extent - 1)) as f64 / (out_extent - 1) as f64;
        let lo = (pos.floor() as usize).min(in_extent - 1);
        let hi = (lo + 1).min(in_extent - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for oy in 0..out_h {
        let (y0, y1, ty) = src_coord(oy, window.height, out_h);
        for ox in 0..out_w {
            let (x0, x1, tx) = src_coord(ox, window.width, out_w);
            for c in 0..3 {
                let a = window.pixel(y0, x0, c);
                let b = window.pixel(y0, x1, c);
                let cc = window.pixel(y1, x0, c);
                let d = window.pixel(y1, x1, c);
                let top = if tx == 0.0 { a } else { a + (b - a) * tx };
                let bottom = if tx == 0.0 { cc } else { cc + (d - cc) * tx };
                let v = if ty == 0.0 { top } else { top + (bottom - top) * ty };
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor {
        height: out_h,
        width: out_w,
        data,
    }
}

pub fn resize_bilinear(window: &ImageTensor) -> ImageTensor {
    resize_bilinear_to(window, REGION_SIZE, REGION_SIZE)
}

/// The ordered local regions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRegionSet {
    pub regions: Vec<ImageTensor>,
    pub specs: Vec<CropSpec>,
}

impl LocalRegionSet {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region(&self, spec: CropSpec) -> Option<&ImageTensor> {
        self.specs.iter().position(|s| *s == spec).map(|i| &self.regions[i])
    }
}

pub fn crop_regions(image: &ImageTensor) -> Result<LocalRegionSet> {
    crop_regions_with_mode(image, CropMode::Strip)
}

pub fn crop_regions_with_mode(image: &ImageTensor, mode: CropMode) -> Result<LocalRegionSet> {
    let specs = CropSpec::canonical();
    let regions = specs
        .iter()
        .map(|&s| crop_region_with_mode(image, s, mode).map(|w| resize_bilinear(&w)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LocalRegionSet { regions, specs })
}
