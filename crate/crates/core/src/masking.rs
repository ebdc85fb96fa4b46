//! Object masks and their token-grid downsamples.
//!
//! A pixel counts as object when its 8-bit value exceeds [`THRESHOLD`].
//! Downsampling is a max-pool: a token is object if any pixel it covers is.
//! Windows use floor/ceil bounds so every token covers at least one pixel
//! even when the grid does not divide evenly.

use std::collections::BTreeMap;

use thiserror::Error;

/// Values strictly above this are object pixels.
pub const THRESHOLD: u8 = 127;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("malformed mask image: {0}")]
    Malformed(String),
    #[error("mask image has zero size")]
    Empty,
    #[error("mask must be single-channel 8-bit grayscale, got {0}")]
    NotGrayscale(String),
    #[error("token resolution must be positive")]
    ZeroResolution,
    #[error("mask is {got:?}, expected {expected:?}")]
    SizeMismatch { expected: (usize, usize), got: (usize, usize) },
}

/// Binary object indicator at image resolution (`true` = object).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl ObjectMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::Empty);
        }
        if bits.len() != width * height {
            return Err(MaskError::Malformed(format!(
                "{} bits for {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { width, height, bits }
    }

    /// Thresholds 8-bit luma values.
    pub fn from_luma(width: usize, height: usize, pixels: &[u8]) -> Result<Self, MaskError> {
        Self::new(width, height, pixels.iter().map(|&p| p > THRESHOLD).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn object_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn has_background(&self) -> bool {
        self.bits.iter().any(|&b| !b)
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Max-pools onto an `out_h × out_w` grid.
    pub fn pool(&self, out_h: usize, out_w: usize) -> Result<ObjectMask, MaskError> {
        if out_h == 0 || out_w == 0 {
            return Err(MaskError::ZeroResolution);
        }
        let rows: Vec<_> = (0..out_h).map(|i| window(i, out_h, self.height)).collect();
        let cols: Vec<_> = (0..out_w).map(|j| window(j, out_w, self.width)).collect();
        let mut bits = Vec::with_capacity(out_h * out_w);
        for r in &rows {
            for c in &cols {
                bits.push(r.clone().any(|y| c.clone().any(|x| self.get(y, x))));
            }
        }
        Ok(ObjectMask { width: out_w, height: out_h, bits })
    }

    /// Nearest-neighbour enlargement to `height × width`.
    pub fn upsample_nearest(&self, height: usize, width: usize) -> ObjectMask {
        ObjectMask::from_fn(width, height, |y, x| {
            self.get(y * self.height / height, x * self.width / width)
        })
    }
}

/// Pixel span `[floor(i·n/out), ceil((i+1)·n/out))` covered by cell `i`.
fn window(i: usize, out: usize, n: usize) -> std::ops::Range<usize> {
    let start = i * n / out;
    let end = ((i + 1) * n).div_ceil(out);
    start..end.max(start + 1).min(n)
}

/// Decodes a PGM (binary P5) or PNG mask.
pub fn load_mask(bytes: &[u8]) -> Result<ObjectMask, MaskError> {
    let img = image::load_from_memory(bytes).map_err(|e| MaskError::Malformed(e.to_string()))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(MaskError::Empty);
    }
    let luma = match img {
        image::DynamicImage::ImageLuma8(l) => l,
        other => return Err(MaskError::NotGrayscale(format!("{:?}", other.color()))),
    };
    ObjectMask::from_luma(luma.width() as usize, luma.height() as usize, luma.as_raw())
}

/// Object indicator on a square attention token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    resolution: usize,
    bits: Vec<bool>,
    object: Vec<usize>,
    background: Vec<usize>,
}

impl TokenMask {
    pub fn from_bits(resolution: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), resolution * resolution);
        let (object, background): (Vec<usize>, Vec<usize>) =
            (0..bits.len()).partition(|&i| bits[i]);
        Self { resolution, bits, object, background }
    }

    /// Token mask where exactly the listed indices are object.
    pub fn from_object_indices(resolution: usize, object: &[usize]) -> Self {
        let mut bits = vec![false; resolution * resolution];
        for &i in object {
            bits[i] = true;
        }
        Self::from_bits(resolution, bits)
    }

    pub fn empty(resolution: usize) -> Self {
        Self::from_bits(resolution, vec![false; resolution * resolution])
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_object(&self, token: usize) -> bool {
        self.bits[token]
    }

    pub fn object_indices(&self) -> &[usize] {
        &self.object
    }

    pub fn background_indices(&self) -> &[usize] {
        &self.background
    }

    pub fn to_object_mask(&self) -> ObjectMask {
        ObjectMask {
            width: self.resolution,
            height: self.resolution,
            bits: self.bits.clone(),
        }
    }
}

pub fn downsample(mask: &ObjectMask, resolution: usize) -> Result<TokenMask, MaskError> {
    let pooled = mask.pool(resolution, resolution)?;
    Ok(TokenMask::from_bits(resolution, pooled.bits))
}

pub fn complement(mask: &TokenMask) -> TokenMask {
    TokenMask {
        resolution: mask.resolution,
        bits: mask.bits.iter().map(|b| !b).collect(),
        object: mask.background.clone(),
        background: mask.object.clone(),
    }
}

/// Token masks for each attention resolution, built once per run.
#[derive(Debug, Clone, Default)]
pub struct TokenMasks {
    by_resolution: BTreeMap<usize, TokenMask>,
}

impl TokenMasks {
    pub fn build(
        mask: &ObjectMask,
        resolutions: impl IntoIterator<Item = usize>,
    ) -> Result<Self, MaskError> {
        let mut by_resolution = BTreeMap::new();
        for r in resolutions {
            if let std::collections::btree_map::Entry::Vacant(e) = by_resolution.entry(r) {
                e.insert(downsample(mask, r)?);
            }
        }
        Ok(Self { by_resolution })
    }

    pub fn get(&self, resolution: usize) -> Option<&TokenMask> {
        self.by_resolution.get(&resolution)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &TokenMask)> {
        self.by_resolution.iter()
    }
}
