//! Pixel grids in world coordinates: spatial softmax, Gaussian blobs, a
//! small rasterizer for benchmark geometries and PGM export.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::systems::Anchor;

pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_GRID: usize = 64;
pub const DEFAULT_EXTENT: f64 = 1.2;

const BACKGROUND: f64 = 0.1;
const LINK_LEVEL: f64 = 0.6;
const DISC_LEVEL: f64 = 1.0;
const DISC_RADIUS_PX: f64 = 2.0;

/// Mapping between a `height × width` pixel grid and a world rectangle.
/// Row 0 is the top of the image; pixel coordinates are cell centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFrame {
    pub height: usize,
    pub width: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for WorldFrame {
    fn default() -> Self {
        Self::square(DEFAULT_GRID, DEFAULT_EXTENT)
    }
}

impl WorldFrame {
    /// `n × n` grid over `[−extent, extent]²`.
    pub fn square(n: usize, extent: f64) -> Self {
        Self {
            height: n,
            width: n,
            x_min: -extent,
            x_max: extent,
            y_min: -extent,
            y_max: extent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::InvalidInput(format!("grid {}×{} is below 2×2", self.height, self.width)));
        }
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(Error::InvalidInput("world frame bounds are empty".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// World size of one pixel along x and y.
    pub fn pixel_extent(&self) -> (f64, f64) {
        (
            (self.x_max - self.x_min) / self.width as f64,
            (self.y_max - self.y_min) / self.height as f64,
        )
    }

    pub fn pixel_to_world(&self, row: usize, col: usize) -> [f64; 2] {
        let (dx, dy) = self.pixel_extent();
        [
            self.x_min + (col as f64 + 0.5) * dx,
            self.y_max - (row as f64 + 0.5) * dy,
        ]
    }

    /// Fractional `(row, col)` of a world point; integer values are centers.
    pub fn world_to_pixel(&self, p: [f64; 2]) -> (f64, f64) {
        let (dx, dy) = self.pixel_extent();
        ((self.y_max - p[1]) / dy - 0.5, (p[0] - self.x_min) / dx - 0.5)
    }

    /// World coordinates of every pixel center in row-major order.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .map(|(r, c)| self.pixel_to_world(r, c))
            .collect()
    }
}

/// `m` score maps on a shared grid, stored keypoint-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub frame: WorldFrame,
    pub m: usize,
    pub data: Vec<f64>,
}

impl HeatmapStack {
    pub fn new(frame: WorldFrame, m: usize, data: Vec<f64>) -> Result<Self> {
        frame.validate()?;
        check_dim("heatmap data", m * frame.pixels(), data.len())?;
        Ok(Self { frame, m, data })
    }

    pub fn zeros(frame: WorldFrame, m: usize) -> Self {
        Self {
            frame,
            m,
            data: vec![0.0; m * frame.pixels()],
        }
    }

    pub fn map(&self, k: usize) -> &[f64] {
        let n = self.frame.pixels();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn map_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.frame.pixels();
        &mut self.data[k * n..(k + 1) * n]
    }

    /// Natural log of every entry, turning blob values into scores whose
    /// softmax is the normalized blob.
    pub fn ln(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| v.ln()).collect(),
            ..self.clone()
        }
    }
}

/// Softmax-weighted mean of pixel-center coordinates per map, `2m` values.
pub fn spatial_softmax(s: &HeatmapStack) -> Vec<f64> {
    let centers = s.frame.centers();
    let mut out = Vec::with_capacity(2 * s.m);
    for k in 0..s.m {
        let map = s.map(k);
        let peak = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut ax, mut ay) = (0.0, 0.0, 0.0);
        for (score, c) in map.iter().zip(&centers) {
            let w = (score - peak).exp();
            z += w;
            ax += w * c[0];
            ay += w * c[1];
        }
        out.push(ax / z);
        out.push(ay / z);
    }
    out
}

/// Unnormalized Gaussian blobs `exp(−‖x_p − x_k‖² / 2σ²)`, one per keypoint.
pub fn gaussian_blobs(x: &[f64], frame: &WorldFrame, sigma: f64) -> Result<HeatmapStack> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput(format!("blob sigma must be positive, got {sigma}")));
    }
    if !x.len().is_multiple_of(2) {
        return Err(Error::InvalidInput("state vector has odd length".into()));
    }
    frame.validate()?;
    let m = x.len() / 2;
    let centers = frame.centers();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = Vec::with_capacity(m * centers.len());
    for k in 0..m {
        let (px, py) = (x[2 * k], x[2 * k + 1]);
        data.extend(centers.iter().map(|c| {
            let d2 = (c[0] - px).powi(2) + (c[1] - py).powi(2);
            (-d2 * inv).exp()
        }));
    }
    Ok(HeatmapStack { frame: *frame, m, data })
}

/// Emulated keypoint estimator: log-blob scores at `x` perturbed by seeded
/// Gaussian noise, and their spatial-softmax readout.
pub fn synth_observe(
    x: &[f64],
    frame: &WorldFrame,
    sigma: f64,
    noise_std: f64,
    seed: u64,
) -> Result<(HeatmapStack, Vec<f64>)> {
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidInput(format!("noise std must be non-negative, got {noise_std}")));
    }
    let mut s = gaussian_blobs(x, frame, sigma)?.ln();
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_std).expect("finite std");
        for v in &mut s.data {
            *v += normal.sample(&mut rng);
        }
    }
    let xhat = spatial_softmax(&s);
    Ok((s, xhat))
}

/// Readout of keypoints from a rendered grayscale frame: the brightest
/// disc-level pixels are clustered around each guess and averaged.
pub fn locate_discs(img: &Image, frame: &WorldFrame, guess: &[f64]) -> Result<Vec<f64>> {
    check_dim("image pixels", frame.pixels(), img.data.len())?;
    let centers = frame.centers();
    let m = guess.len() / 2;
    let mut acc = vec![[0.0f64; 3]; m];
    for (p, v) in img.data.iter().enumerate() {
        if *v < 0.5 * (LINK_LEVEL + DISC_LEVEL) {
            continue;
        }
        let c = centers[p];
        let nearest = (0..m)
            .min_by(|&a, &b| {
                let da = (c[0] - guess[2 * a]).powi(2) + (c[1] - guess[2 * a + 1]).powi(2);
                let db = (c[0] - guess[2 * b]).powi(2) + (c[1] - guess[2 * b + 1]).powi(2);
                da.total_cmp(&db)
            })
            .expect("at least one keypoint");
        acc[nearest][0] += v * c[0];
        acc[nearest][1] += v * c[1];
        acc[nearest][2] += v;
    }
    let mut out = Vec::with_capacity(2 * m);
    for (k, a) in acc.iter().enumerate() {
        if a[2] == 0.0 {
            out.extend_from_slice(&guess[2 * k..2 * k + 2]);
        } else {
            out.push(a[0] / a[2]);
            out.push(a[1] / a[2]);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rendering

/// Grayscale image, row-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Mean squared difference over pixels.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        check_dim("image pixels", self.data.len(), other.data.len())?;
        let n = self.data.len() as f64;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p[0] - a[0] - t * ex).powi(2) + (p[1] - a[1] - t * ey).powi(2)).sqrt()
}

/// Rasterizes links as anti-aliased one-pixel segments and keypoints as
/// discs on a constant background. Distances are measured in pixel units.
pub fn synth_render(links: &[(Anchor, usize)], x: &[f64], frame: &WorldFrame) -> Image {
    let (dx, dy) = frame.pixel_extent();
    let to_px = |p: [f64; 2]| [p[0] / dx, p[1] / dy];
    let point = |a: &Anchor| match *a {
        Anchor::Fixed(p) => p,
        Anchor::Keypoint(i) => [x[2 * i], x[2 * i + 1]],
    };
    let segments: Vec<([f64; 2], [f64; 2])> = links
        .iter()
        .map(|(a, j)| (to_px(point(a)), to_px([x[2 * j], x[2 * j + 1]])))
        .collect();
    let discs: Vec<[f64; 2]> = (0..x.len() / 2).map(|i| to_px([x[2 * i], x[2 * i + 1]])).collect();

    let mut img = Image::filled(frame.height, frame.width, BACKGROUND);
    for (p, c) in frame.centers().into_iter().enumerate() {
        let c = to_px(c);
        let mut v = BACKGROUND;
        for &(a, b) in &segments {
            let cov = (1.0 - segment_distance(c, a, b)).clamp(0.0, 1.0);
            v += (LINK_LEVEL - v).max(0.0) * cov;
        }
        for d in &discs {
            let dist = ((c[0] - d[0]).powi(2) + (c[1] - d[1]).powi(2)).sqrt();
            let cov = (DISC_RADIUS_PX + 0.5 - dist).clamp(0.0, 1.0);
            v += (DISC_LEVEL - v) * cov;
        }
        img.data[p] = v;
    }
    img
}

/// Renders every state of a sequence.
pub fn render_sequence(links: &[(Anchor, usize)], states: &[Vec<f64>], frame: &WorldFrame) -> Vec<Image> {
    states.par_iter().map(|x| synth_render(links, x, frame)).collect()
}

// ---------------------------------------------------------------------------
// PGM

/// Binary 8-bit PGM (P5) with `round(255 · clamp(v, 0, 1))`.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Format(format!("pgm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ascii"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval is supported"));
    }
    let body = &bytes[(i + 1).min(bytes.len())..];
    if body.len() < width * height {
        return Err(bad("truncated pixel data"));
    }
    Ok(Image {
        height,
        width,
        data: body[..width * height].iter().map(|&b| b as f64 / maxval as f64).collect(),
    })
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn frame_file_name(seq: usize, idx: usize) -> String {
    format!("frame_{seq:04}_{idx:03}.pgm")
}

/// Heatmap values as one image per keypoint, for export.
pub fn heatmap_images(s: &HeatmapStack) -> Vec<Image> {
    (0..s.m)
        .map(|k| Image {
            height: s.frame.height,
            width: s.frame.width,
            data: s.map(k).to_vec(),
        })
        .collect()
}
