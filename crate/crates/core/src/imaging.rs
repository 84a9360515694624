//! Grayscale images, blur operators, noise, metrics, synthetic data and PGM
//! I/O.
//!
//! Pixels are row-major, `index = row * width + col`. Values are clamped to
//! `[0, 1]` only when quantised for output; internal arithmetic is
//! unclamped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::pnp::LinearOperator;
use crate::{io, Matrix, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dim("image pixels", width * height, pixels.len())?;
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                pixels.push(f(row, col));
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn from_vector(width: usize, height: usize, v: &Vector) -> Result<Self> {
        Image::new(width, height, v.iter().copied().collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn to_vector(&self) -> Vector {
        Vector::from_column_slice(&self.pixels)
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width == other.width && self.height == other.height {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "image sizes differ: {}×{} vs {}×{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }
}

/// Square blur kernel, row-major taps.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    taps: Vec<f64>,
    normalized: bool,
}

impl BlurKernel {
    /// Taps must be nonnegative. With `normalize` set they are rescaled to
    /// sum to one.
    pub fn new(size: usize, mut taps: Vec<f64>, normalize: bool) -> Result<Self> {
        check_dim("kernel taps", size * size, taps.len())?;
        if size == 0 {
            return Err(Error::Invalid("kernel must be at least 1×1".into()));
        }
        if taps.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Invalid("kernel taps must be finite and nonnegative".into()));
        }
        if normalize {
            let sum: f64 = taps.iter().sum();
            if sum <= 0.0 {
                return Err(Error::Invalid("cannot normalise an all-zero kernel".into()));
            }
            taps.iter_mut().for_each(|t| *t /= sum);
        }
        Ok(BlurKernel {
            size,
            taps,
            normalized: normalize,
        })
    }

    pub fn identity() -> Self {
        BlurKernel::new(1, vec![1.0], true).expect("valid")
    }

    /// Uniform `k × k` average.
    pub fn uniform(k: usize) -> Result<Self> {
        BlurKernel::new(k, vec![1.0; k * k], true)
    }

    /// Diagonal motion line of length `k`.
    pub fn motion_diagonal(k: usize) -> Result<Self> {
        BlurKernel::new(k, (0..k * k).map(|i| f64::from(u8::from(i / k == i % k))).collect(), true)
    }

    /// Gaussian with standard deviation `std` truncated to `k × k`.
    pub fn gaussian(k: usize, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::Invalid("gaussian kernel needs std > 0".into()));
        }
        let c = (k as f64 - 1.0) / 2.0;
        let taps = (0..k * k)
            .map(|i| {
                let (r, s) = ((i / k) as f64 - c, (i % k) as f64 - c);
                (-(r * r + s * s) / (2.0 * std * std)).exp()
            })
            .collect();
        BlurKernel::new(k, taps, true)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn tap(&self, row: usize, col: usize) -> f64 {
        self.taps[row * self.size + col]
    }

    /// Whitespace-separated grid, one kernel row per line. The grid must be
    /// square; taps are normalised on load.
    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty())
            .map(|(ln, l)| {
                l.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| Error::parse(ln, format!("bad tap '{t}'"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::parse(0, "kernel grid must be square and non-empty"));
        }
        BlurKernel::new(k, rows.concat(), true)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.taps.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|t| format!("{t:.17e}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        BlurKernel::from_text(&io::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    ZeroPad,
    Replicate,
}

/// Dense matrix of the 2-D convolution `(k ∗ x)(r, c) = Σ k(i, j) x(r + h − i, c + h − j)`
/// with `h = ⌊k/2⌋`; the adjoint is the transpose.
pub fn build_blur_operator(
    kernel: &BlurKernel,
    width: usize,
    height: usize,
    boundary: Boundary,
) -> Result<LinearOperator> {
    let k = kernel.size();
    if k > width || k > height {
        return Err(Error::Invalid(format!(
            "{k}×{k} kernel does not fit a {width}×{height} image"
        )));
    }
    let n = width * height;
    let half = (k / 2) as isize;
    let mut m = Matrix::zeros(n, n);
    for r in 0..height {
        for c in 0..width {
            let out = r * width + c;
            for i in 0..k {
                for j in 0..k {
                    let tap = kernel.tap(i, j);
                    if tap == 0.0 {
                        continue;
                    }
                    let sr = r as isize + half - i as isize;
                    let sc = c as isize + half - j as isize;
                    let src = match boundary {
                        Boundary::ZeroPad => {
                            if sr < 0 || sc < 0 || sr >= height as isize || sc >= width as isize {
                                continue;
                            }
                            (sr as usize, sc as usize)
                        }
                        Boundary::Replicate => (
                            sr.clamp(0, height as isize - 1) as usize,
                            sc.clamp(0, width as isize - 1) as usize,
                        ),
                    };
                    m[(out, src.0 * width + src.1)] += tap;
                }
            }
        }
    }
    Ok(LinearOperator::new(m))
}

/// Adds i.i.d. `N(0, σ²)` noise, deterministic in `seed`.
pub fn add_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Invalid(format!("noise level must be ≥ 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    let pixels = img.pixels.iter().map(|p| p + normal.sample(&mut rng)).collect();
    Image::new(img.width, img.height, pixels)
}

/// `10 log₁₀(1 / MSE)` with peak 1. Identical images give `+∞`.
pub fn psnr(img: &Image, reference: &Image) -> Result<f64> {
    img.same_shape(reference)?;
    let mse = img
        .pixels
        .iter()
        .zip(&reference.pixels)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / img.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

/// What counts as the support in the edge-density normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Support {
    /// Pixels with value strictly greater than zero.
    #[default]
    Positive,
    AllPixels,
}

/// Edge density
///
/// ```text
/// Ω(x) = supp(x)⁻¹ Σ_{δ ∈ {h, v}} Σ_i H(|(D_δ x)_i| − t_th)
/// ```
///
/// with forward differences (no wrap-around) and `H(0) = 0`.
pub fn edge_density(img: &Image, threshold: f64, support: Support) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Invalid(format!("threshold must be positive, got {threshold}")));
    }
    let supp = match support {
        Support::Positive => img.pixels.iter().filter(|&&p| p > 0.0).count(),
        Support::AllPixels => img.len(),
    };
    if supp == 0 {
        return Err(Error::Domain {
            context: "edge density of an image with empty support",
        });
    }
    let (w, h) = (img.width, img.height);
    let mut hits = 0usize;
    for r in 0..h {
        for c in 0..w {
            let p = img.get(r, c);
            if c + 1 < w && (img.get(r, c + 1) - p).abs() > threshold {
                hits += 1;
            }
            if r + 1 < h && (img.get(r + 1, c) - p).abs() > threshold {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / supp as f64)
}

/// Synthetic image families. Intensities stay in `[0.1, 0.9]` so every image
/// has full support.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Tiles of side `block` with random levels.
    Blocks { block: usize },
    /// Stripes of width `width` alternating between two random levels, in a
    /// random orientation.
    Stripes { width: usize },
    /// A few Gaussian bumps on a flat background.
    Blobs { count: usize },
}

impl SynthKind {
    /// `blocks`, `stripes` or `blobs` with size-dependent defaults.
    pub fn from_name(name: &str, size: usize) -> Option<Self> {
        match name {
            "blocks" => Some(SynthKind::Blocks { block: (size / 4).max(1) }),
            "stripes" => Some(SynthKind::Stripes { width: 2 }),
            "blobs" => Some(SynthKind::Blobs { count: 3 }),
            _ => None,
        }
    }
}

/// `count` reproducible `size × size` images. Image `i` uses its own stream
/// derived from `seed`, so generation parallelises without changing output.
pub fn synth_dataset(kind: SynthKind, count: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    if size < 4 {
        return Err(Error::Invalid(format!("synthetic images need size ≥ 4, got {size}")));
    }
    Ok((0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            synth_image(kind, size, &mut rng)
        })
        .collect())
}

fn synth_image(kind: SynthKind, size: usize, rng: &mut ChaCha8Rng) -> Image {
    match kind {
        SynthKind::Blocks { block } => {
            let block = block.max(1);
            let tiles = size.div_ceil(block);
            let levels: Vec<f64> = (0..tiles * tiles).map(|_| rng.random_range(0.1..=0.9)).collect();
            Image::from_fn(size, size, |r, c| levels[(r / block) * tiles + c / block])
        }
        SynthKind::Stripes { width } => {
            let width = width.max(1);
            let lo = rng.random_range(0.1..0.4);
            let hi = rng.random_range(0.6..=0.9);
            let vertical = rng.random_bool(0.5);
            Image::from_fn(size, size, |r, c| {
                let k = if vertical { c } else { r };
                if (k / width) % 2 == 0 {
                    lo
                } else {
                    hi
                }
            })
        }
        SynthKind::Blobs { count } => {
            let background = rng.random_range(0.1..0.3);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        rng.random_range(0.0..size as f64),
                        rng.random_range(0.0..size as f64),
                        rng.random_range(0.1..0.3) * size as f64,
                        rng.random_range(0.3..0.6),
                    )
                })
                .collect();
            Image::from_fn(size, size, |r, c| {
                let bump: f64 = blobs
                    .iter()
                    .map(|&(br, bc, s, amp)| {
                        let d2 = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
                        amp * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
                (background + bump).clamp(0.1, 0.9)
            })
        }
    }
}

/// `round(clamp(v, 0, 1) · 255)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binary 8-bit graymap (`P5`, maxval 255).
pub fn pgm_encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&p| quantize(p)));
    out
}

pub fn pgm_decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
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
            return Err(Error::parse(0, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err(Error::parse(0, "not a binary PGM (P5) file"));
    }
    let mut number = |what: &str| -> Result<usize> {
        token(&mut pos)?
            .parse()
            .map_err(|_| Error::parse(0, format!("bad PGM {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::parse(0, format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::parse(0, "truncated PGM raster"))?;
    Image::new(width, height, raster.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn pgm_write(img: &Image, path: &Path) -> Result<()> {
    io::write_atomic(path, &pgm_encode(img))
}

pub fn pgm_read(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    pgm_decode(&bytes)
}

/// Reads the `path` column of a dataset manifest. Relative paths resolve
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let column = reader
        .headers()?
        .iter()
        .position(|h| h == "path")
        .ok_or_else(|| Error::parse(1, "manifest has no 'path' column"))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let p = PathBuf::from(&record[column]);
        out.push(if p.is_absolute() { p } else { base.join(p) });
    }
    Ok(out)
}

/// Manifest CSV with `path` and `edge_density` columns.
pub fn manifest_csv(entries: &[(String, f64)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["path", "edge_density"])?;
    for (p, omega) in entries {
        w.write_record([p.as_str(), &format!("{omega}")])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 input"))
}
