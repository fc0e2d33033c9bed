//! Replayable image augmentation.
//!
//! [`sample_augmentation`] draws a concrete [`AugmentationParams`] once, at
//! reinforcement time; [`apply_augmentation`] is a pure function of the image
//! and those parameters, so storing the parameters is enough to rebuild the
//! augmented image byte-for-byte later.
//!
//! Pipeline: crop → bilinear resize (half-pixel centers, ties-to-even) →
//! optional horizontal flip → integer ops in listed order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("crop {crop:?} exceeds a {width}x{height} image")]
    CropOutOfBounds {
        crop: CropRect,
        width: u32,
        height: u32,
    },
    #[error("invalid augmentation parameters: {0}")]
    InvalidParams(String),
    #[error("truncated or malformed parameter encoding: {0}")]
    Decode(String),
}

/// 8-bit RGB image, row-major.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RasterImage({}x{})", self.width, self.height)
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, AugmentError> {
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(AugmentError::InvalidParams(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u16,
    pub y: u16,
    pub w: u16,
    pub h: u16,
}

/// Integer image ops that replay exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum AugOp {
    /// Adds the magnitude to every channel.
    Brightness = 0,
    /// Scales deviations from the mean intensity by `(100 + m) / 100`.
    Contrast = 1,
    /// Keeps the top `m` bits of each channel.
    Posterize = 2,
    /// Inverts channels at or above threshold `m`.
    Solarize = 3,
    Invert = 4,
    /// Shifts right by `m` pixels (left if negative), filling with gray.
    TranslateX = 5,
    /// Shifts down by `m` pixels (up if negative), filling with gray.
    TranslateY = 6,
}

pub const ALL_OPS: [AugOp; 7] = [
    AugOp::Brightness,
    AugOp::Contrast,
    AugOp::Posterize,
    AugOp::Solarize,
    AugOp::Invert,
    AugOp::TranslateX,
    AugOp::TranslateY,
];

const FILL: u8 = 128;
/// RandAugment magnitude scale (bins 0..=30).
pub const MAX_MAGNITUDE: u8 = 30;

impl AugOp {
    pub fn from_id(id: u8) -> Option<Self> {
        ALL_OPS.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    /// Inclusive magnitude range for an output of the given size.
    pub fn magnitude_range(self, out_w: u16, out_h: u16) -> (i16, i16) {
        match self {
            AugOp::Brightness => (-128, 128),
            AugOp::Contrast => (-100, 100),
            AugOp::Posterize => (1, 8),
            AugOp::Solarize => (0, 256),
            AugOp::Invert => (0, 0),
            AugOp::TranslateX => {
                let m = out_w.saturating_sub(1) as i16;
                (-m, m)
            }
            AugOp::TranslateY => {
                let m = out_h.saturating_sub(1) as i16;
                (-m, m)
            }
        }
    }
}

/// Everything needed to rebuild one augmented view of a source image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub crop: CropRect,
    pub out_size: (u16, u16),
    pub hflip: bool,
    pub ops: Vec<(AugOp, i16)>,
    /// Seed the parameters were drawn from; provenance only.
    pub seed: u64,
}

impl AugmentationParams {
    /// Full-frame crop at the source size with nothing else applied.
    pub fn identity(width: u16, height: u16) -> Self {
        Self {
            crop: CropRect {
                x: 0,
                y: 0,
                w: width,
                h: height,
            },
            out_size: (width, height),
            hflip: false,
            ops: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<(), AugmentError> {
        let c = self.crop;
        if c.w == 0
            || c.h == 0
            || c.x as u32 + c.w as u32 > width
            || c.y as u32 + c.h as u32 > height
        {
            return Err(AugmentError::CropOutOfBounds {
                crop: c,
                width,
                height,
            });
        }
        if self.out_size.0 == 0 || self.out_size.1 == 0 {
            return Err(AugmentError::InvalidParams(
                "output size must be positive".into(),
            ));
        }
        if self.ops.len() > u8::MAX as usize {
            return Err(AugmentError::InvalidParams("too many ops".into()));
        }
        for &(op, m) in &self.ops {
            let (lo, hi) = op.magnitude_range(self.out_size.0, self.out_size.1);
            if m < lo || m > hi {
                return Err(AugmentError::InvalidParams(format!(
                    "{op:?} magnitude {m} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        12 + 2 + 3 * self.ops.len() + 8
    }

    /// Little-endian layout:
    /// `x y w h out_w out_h` (u16 each), `hflip` u8, `n_ops` u8,
    /// `n_ops × (op_id u8, magnitude i16)`, `seed` u64.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        for v in [
            self.crop.x,
            self.crop.y,
            self.crop.w,
            self.crop.h,
            self.out_size.0,
            self.out_size.1,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.hflip as u8);
        out.push(self.ops.len() as u8);
        for &(op, m) in &self.ops {
            out.push(op.id());
            out.extend_from_slice(&m.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    /// Decodes one record from the front of `bytes`, returning it and the bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), AugmentError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(AugmentError::Decode(format!(
                    "need {n} bytes, have {}",
                    bytes.len()
                )))
            } else {
                Ok(())
            }
        };
        need(14)?;
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let crop = CropRect {
            x: u16_at(0),
            y: u16_at(2),
            w: u16_at(4),
            h: u16_at(6),
        };
        let out_size = (u16_at(8), u16_at(10));
        let hflip = match bytes[12] {
            0 => false,
            1 => true,
            v => return Err(AugmentError::Decode(format!("hflip byte {v}"))),
        };
        let n_ops = bytes[13] as usize;
        let end = 14 + 3 * n_ops + 8;
        need(end)?;
        let mut ops = Vec::with_capacity(n_ops);
        for i in 0..n_ops {
            let at = 14 + 3 * i;
            let op = AugOp::from_id(bytes[at])
                .ok_or_else(|| AugmentError::Decode(format!("unknown op id {}", bytes[at])))?;
            ops.push((op, i16::from_le_bytes([bytes[at + 1], bytes[at + 2]])));
        }
        let seed = u64::from_le_bytes(bytes[end - 8..end].try_into().unwrap());
        Ok((
            Self {
                crop,
                out_size,
                hflip,
                ops,
                seed,
            },
            end,
        ))
    }
}

/// Sampling policy: RandomResizedCrop followed by a RandAugment-style op draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Bounds on crop area as a fraction of the source area.
    pub rrc_scale: (f64, f64),
    /// Bounds on crop aspect ratio (w/h).
    pub rrc_ratio: (f64, f64),
    /// `(number of ops, magnitude bin 0..=30)`.
    pub randaug: (u8, u8),
    pub out_size: (u16, u16),
    pub hflip_prob: f64,
}

impl AugmentPolicy {
    /// Strong crop plus RandAugment, as used for reinforcement.
    pub fn strong(out_size: (u16, u16)) -> Self {
        Self {
            rrc_scale: (0.08, 1.0),
            rrc_ratio: (3.0 / 4.0, 4.0 / 3.0),
            randaug: (2, 9),
            out_size,
            hflip_prob: 0.0,
        }
    }

    /// Milder crops and ops, for images with little redundancy.
    pub fn moderate(out_size: (u16, u16)) -> Self {
        Self {
            rrc_scale: (0.35, 1.0),
            randaug: (1, 5),
            ..Self::strong(out_size)
        }
    }

    /// Full frame, no ops.
    pub fn identity(out_size: (u16, u16)) -> Self {
        Self {
            rrc_scale: (1.0, 1.0),
            rrc_ratio: (1.0, 1.0),
            randaug: (0, 0),
            out_size,
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let (lo, hi) = self.rrc_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(AugmentError::InvalidPolicy(format!(
                "scale bounds ({lo}, {hi})"
            )));
        }
        let (rlo, rhi) = self.rrc_ratio;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(AugmentError::InvalidPolicy(format!(
                "ratio bounds ({rlo}, {rhi})"
            )));
        }
        if self.randaug.1 > MAX_MAGNITUDE {
            return Err(AugmentError::InvalidPolicy(format!(
                "magnitude {} above {MAX_MAGNITUDE}",
                self.randaug.1
            )));
        }
        if self.out_size.0 == 0 || self.out_size.1 == 0 {
            return Err(AugmentError::InvalidPolicy(
                "output size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(AugmentError::InvalidPolicy(format!(
                "hflip probability {}",
                self.hflip_prob
            )));
        }
        Ok(())
    }
}

/// Draws augmentation parameters; deterministic in `(seed, policy, source dims)`.
pub fn sample_augmentation(
    seed: u64,
    policy: &AugmentPolicy,
    src_width: u32,
    src_height: u32,
) -> Result<AugmentationParams, AugmentError> {
    policy.validate()?;
    if src_width == 0
        || src_height == 0
        || src_width > u16::MAX as u32
        || src_height > u16::MAX as u32
    {
        return Err(AugmentError::InvalidPolicy(format!(
            "unsupported source size {src_width}x{src_height}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crop = random_resized_crop(&mut rng, policy, src_width, src_height);
    let hflip = policy.hflip_prob > 0.0 && rng.gen_bool(policy.hflip_prob);
    let (n_ops, magnitude) = policy.randaug;
    let frac = magnitude as f64 / MAX_MAGNITUDE as f64;
    let (ow, oh) = policy.out_size;
    let mut ops = Vec::with_capacity(n_ops as usize);
    for _ in 0..n_ops {
        let op = ALL_OPS[rng.gen_range(0..ALL_OPS.len())];
        let sign: i16 = if rng.gen_bool(0.5) { 1 } else { -1 };
        let m = match op {
            AugOp::Brightness => sign * (frac * 128.0).round() as i16,
            AugOp::Contrast => sign * (frac * 90.0).round() as i16,
            AugOp::Posterize => 8 - (frac * 4.0).round() as i16,
            AugOp::Solarize => 256 - (frac * 256.0).round() as i16,
            AugOp::Invert => 0,
            AugOp::TranslateX => sign * (frac * 0.45 * ow as f64).round() as i16,
            AugOp::TranslateY => sign * (frac * 0.45 * oh as f64).round() as i16,
        };
        let (lo, hi) = op.magnitude_range(ow, oh);
        ops.push((op, m.clamp(lo, hi)));
    }
    Ok(AugmentationParams {
        crop,
        out_size: policy.out_size,
        hflip,
        ops,
        seed,
    })
}

fn random_resized_crop(
    rng: &mut ChaCha8Rng,
    policy: &AugmentPolicy,
    width: u32,
    height: u32,
) -> CropRect {
    let (w_src, h_src) = (width as f64, height as f64);
    let area = w_src * h_src;
    let (lo, hi) = policy.rrc_scale;
    let (log_r0, log_r1) = (policy.rrc_ratio.0.ln(), policy.rrc_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(lo..=hi);
        let aspect = if log_r0 == log_r1 {
            log_r0.exp()
        } else {
            rng.gen_range(log_r0..log_r1).exp()
        };
        let w = (target * aspect).sqrt().round() as u32;
        let h = (target / aspect).sqrt().round() as u32;
        let realized = (w as f64 * h as f64) / area;
        if w > 0 && h > 0 && w <= width && h <= height && realized >= lo && realized <= hi {
            let y = rng.gen_range(0..=height - h);
            let x = rng.gen_range(0..=width - w);
            return CropRect {
                x: x as u16,
                y: y as u16,
                w: w as u16,
                h: h as u16,
            };
        }
    }
    // Center crop clamped to the ratio bounds.
    let in_ratio = w_src / h_src;
    let (w, h) = if in_ratio < policy.rrc_ratio.0 {
        (
            width,
            ((w_src / policy.rrc_ratio.0).round() as u32).clamp(1, height),
        )
    } else if in_ratio > policy.rrc_ratio.1 {
        (
            ((h_src * policy.rrc_ratio.1).round() as u32).clamp(1, width),
            height,
        )
    } else {
        (width, height)
    };
    CropRect {
        x: ((width - w) / 2) as u16,
        y: ((height - h) / 2) as u16,
        w: w as u16,
        h: h as u16,
    }
}

/// Rebuilds the augmented image described by `params`.
pub fn apply_augmentation(
    img: &RasterImage,
    params: &AugmentationParams,
) -> Result<RasterImage, AugmentError> {
    params.validate(img.width, img.height)?;
    let mut out = resize_crop_bilinear(img, params.crop, params.out_size);
    if params.hflip {
        hflip(&mut out);
    }
    for &(op, m) in &params.ops {
        apply_op(&mut out, op, m);
    }
    Ok(out)
}

fn resize_crop_bilinear(img: &RasterImage, crop: CropRect, (ow, oh): (u16, u16)) -> RasterImage {
    let (cw, ch) = (crop.w as usize, crop.h as usize);
    let (ow, oh) = (ow as usize, oh as usize);
    let sx = cw as f64 / ow as f64;
    let sy = ch as f64 / oh as f64;
    // Per-axis source indices and weights, shared by every row/column.
    let axis = |n_out: usize, n_in: usize, scale: f64| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let xs = axis(ow, cw, sx);
    let ys = axis(oh, ch, sy);
    let mut pixels = Vec::with_capacity(ow * oh * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p00 = img.pixel(crop.x as u32 + x0 as u32, crop.y as u32 + y0 as u32);
            let p01 = img.pixel(crop.x as u32 + x1 as u32, crop.y as u32 + y0 as u32);
            let p10 = img.pixel(crop.x as u32 + x0 as u32, crop.y as u32 + y1 as u32);
            let p11 = img.pixel(crop.x as u32 + x1 as u32, crop.y as u32 + y1 as u32);
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bottom = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round_ties_even().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RasterImage {
        width: ow as u32,
        height: oh as u32,
        pixels,
    }
}

pub fn hflip(img: &mut RasterImage) {
    let w = img.width as usize;
    for row in img.pixels.chunks_exact_mut(w * 3) {
        for x in 0..w / 2 {
            for c in 0..3 {
                row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
            }
        }
    }
}

fn apply_op(img: &mut RasterImage, op: AugOp, m: i16) {
    let m = m as i32;
    match op {
        AugOp::Brightness => img
            .pixels
            .iter_mut()
            .for_each(|p| *p = (*p as i32 + m).clamp(0, 255) as u8),
        AugOp::Contrast => {
            let total: u64 = img.pixels.iter().map(|&p| p as u64).sum();
            let mean = (total / img.pixels.len().max(1) as u64) as i32;
            for p in img.pixels.iter_mut() {
                let v = mean + ((*p as i32 - mean) * (100 + m)).div_euclid(100);
                *p = v.clamp(0, 255) as u8;
            }
        }
        AugOp::Posterize => {
            let mask = (0xFFu32 << (8 - m as u32)) as u8;
            img.pixels.iter_mut().for_each(|p| *p &= mask);
        }
        AugOp::Solarize => img.pixels.iter_mut().for_each(|p| {
            if *p as i32 >= m {
                *p = 255 - *p;
            }
        }),
        AugOp::Invert => img.pixels.iter_mut().for_each(|p| *p = 255 - *p),
        AugOp::TranslateX | AugOp::TranslateY => {
            let (w, h) = (img.width as i32, img.height as i32);
            let (dx, dy) = if op == AugOp::TranslateX {
                (m, 0)
            } else {
                (0, m)
            };
            let src = img.pixels.clone();
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = (x - dx, y - dy);
                    let dst = ((y * w + x) * 3) as usize;
                    if sx >= 0 && sx < w && sy >= 0 && sy < h {
                        let s = ((sy * w + sx) * 3) as usize;
                        img.pixels[dst..dst + 3].copy_from_slice(&src[s..s + 3]);
                    } else {
                        img.pixels[dst..dst + 3].fill(FILL);
                    }
                }
            }
        }
    }
}
