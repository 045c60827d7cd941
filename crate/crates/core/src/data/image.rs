//! PPM (P6) image I/O and the resize/pad/normalize preprocessing chain.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Decodes a binary PPM (P6, maxval 255) into a `[3,H,W]` tensor in `[0,1]`.
pub fn decode_ppm<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut pos = 0;
    let field = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = field(&mut pos)?;
    if magic != "P6" {
        return Err(Error::Format(format!("expected PPM magic P6, found `{magic}`")));
    }
    let num = |pos: &mut usize, what: &str| -> Result<usize> {
        let f = field(pos)?;
        f.parse()
            .map_err(|_| Error::Format(format!("bad PPM {what} `{f}`")))
    };
    let width = num(&mut pos, "width")?;
    let height = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM with zero size".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format(format!("truncated PPM raster: need {need} bytes")))?;
    let plane = width * height;
    let mut data = vec![S::zero(); 3 * plane];
    for (i, px) in raster.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = S::from_f64c(px[c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Encodes a `[3,H,W]` tensor as P6; values are clamped to `[0,1]` and
/// rounded to the nearest byte.
pub fn encode_ppm<S: Scalar>(img: &Tensor<S>) -> Result<Vec<u8>> {
    let (h, w) = image_dims(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    for i in 0..plane {
        for c in 0..3 {
            let v = d[c * plane + i].to_f64c().clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_image<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_image<S: Scalar>(path: &Path, img: &Tensor<S>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

fn image_dims<S: Scalar>(img: &Tensor<S>) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::Validation(format!("image must be [3,H,W], got {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AspectMode {
    /// Resize straight to `S×S`.
    #[default]
    Square,
    /// Pad the short side with the mean color, then resize.
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Bilinear resize with half-pixel centers (no antialiasing).
pub fn resize_bilinear<S: Scalar>(img: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (h, w) = image_dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Validation("resize to zero size".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let d = img.data();
    let mut out = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        let p = &d[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| p[y * w + x].to_f64c();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(S::from_f64c(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(vec![3, out_h, out_w], out)
}

/// Centers the image on a square canvas filled with `fill` (per channel).
pub fn pad_to_square<S: Scalar>(img: &Tensor<S>, fill: [f64; 3]) -> Result<Tensor<S>> {
    let (h, w) = image_dims(img)?;
    let side = h.max(w);
    let (top, left) = ((side - h) / 2, (side - w) / 2);
    let mut out = Vec::with_capacity(3 * side * side);
    for (c, &f) in fill.iter().enumerate() {
        let fill = S::from_f64c(f);
        let p = &img.data()[c * h * w..(c + 1) * h * w];
        for y in 0..side {
            for x in 0..side {
                let inside = (top..top + h).contains(&y) && (left..left + w).contains(&x);
                out.push(if inside { p[(y - top) * w + (x - left)] } else { fill });
            }
        }
    }
    Tensor::new(vec![3, side, side], out)
}

/// Resize (or pad then resize) to `target×target`, then normalize each
/// channel as `(x − mean) / std`.
pub fn preprocess_image<S: Scalar>(
    img: &Tensor<S>,
    target: usize,
    mode: AspectMode,
    norm: &Normalization,
) -> Result<Tensor<S>> {
    let (h, w) = image_dims(img)?;
    if h == 0 || w == 0 || target == 0 {
        return Err(Error::Validation("zero-size image".into()));
    }
    let resized = match mode {
        AspectMode::Square => resize_bilinear(img, target, target)?,
        AspectMode::Pad => resize_bilinear(&pad_to_square(img, norm.mean)?, target, target)?,
    };
    let plane = target * target;
    let mut data = resized.into_data();
    for c in 0..3 {
        let (m, s) = (norm.mean[c], norm.std[c]);
        for v in &mut data[c * plane..(c + 1) * plane] {
            *v = S::from_f64c((v.to_f64c() - m) / s);
        }
    }
    Tensor::new(vec![3, target, target], data)
}
