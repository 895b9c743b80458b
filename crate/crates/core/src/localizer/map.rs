use std::fs;
use std::path::Path;

use crate::data::{save_image, Image};
use crate::error::{Error, Result};

pub const PATCH: usize = 72;
pub const RAW_MAGIC: &[u8; 6] = b"SRMAP1";

/// Top-left patch positions along both axes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    pub step: usize,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
}

/// `0, step, 2 step, ...` while a patch fits, then one final position flush
/// with the far edge if the regular positions stop short of it.
pub fn axis_positions(dim: usize, step: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 0;
    while p + PATCH <= dim {
        out.push(p);
        p += step;
    }
    if let Some(&last) = out.last() {
        if last + PATCH < dim {
            out.push(dim - PATCH);
        }
    }
    out
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, step: usize) -> Result<Self> {
        if !(1..=PATCH).contains(&step) {
            return Err(Error::Parameter(format!(
                "step {step} outside [1, {PATCH}]"
            )));
        }
        if width < PATCH || height < PATCH {
            return Err(Error::Input(format!(
                "image {width}x{height} is smaller than a {PATCH}x{PATCH} patch"
            )));
        }
        Ok(PatchGrid {
            step,
            xs: axis_positions(width, step),
            ys: axis_positions(height, step),
        })
    }

    pub fn rows(&self) -> usize {
        self.ys.len()
    }

    pub fn cols(&self) -> usize {
        self.xs.len()
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major patch top-left corners `(x, y)`.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ys
            .iter()
            .flat_map(move |&y| self.xs.iter().map(move |&x| (x, y)))
    }

    pub fn centers_x(&self) -> Vec<f64> {
        self.xs
            .iter()
            .map(|&x| x as f64 + (PATCH as f64 - 1.0) / 2.0)
            .collect()
    }

    pub fn centers_y(&self) -> Vec<f64> {
        self.ys
            .iter()
            .map(|&y| y as f64 + (PATCH as f64 - 1.0) / 2.0)
            .collect()
    }
}

/// One value per grid cell, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl GridMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} map given {} values",
                values.len()
            )));
        }
        Ok(GridMap { rows, cols, values })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Morphology {
    Opening,
    Closing,
    None,
}

fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn rank_filter(map: &GridMap, radius: usize, pick_max: bool) -> GridMap {
    let se = disk(radius);
    let mut out = Vec::with_capacity(map.values.len());
    for r in 0..map.rows as isize {
        for c in 0..map.cols as isize {
            let mut acc = if pick_max {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            };
            for &(dx, dy) in &se {
                let (y, x) = (r + dy, c + dx);
                if y < 0 || x < 0 || y >= map.rows as isize || x >= map.cols as isize {
                    continue;
                }
                let v = map.values[y as usize * map.cols + x as usize];
                acc = if pick_max { acc.max(v) } else { acc.min(v) };
            }
            out.push(acc);
        }
    }
    GridMap {
        rows: map.rows,
        cols: map.cols,
        values: out,
    }
}

/// Grayscale erosion with a disk; cells outside the grid are ignored.
pub fn erode(map: &GridMap, radius: usize) -> GridMap {
    rank_filter(map, radius, false)
}

pub fn dilate(map: &GridMap, radius: usize) -> GridMap {
    rank_filter(map, radius, true)
}

pub fn clean_map(map: &GridMap, radius: usize, op: Morphology) -> GridMap {
    match op {
        Morphology::Opening => dilate(&erode(map, radius), radius),
        Morphology::Closing => erode(&dilate(map, radius), radius),
        Morphology::None => map.clone(),
    }
}

fn interp_axis(centers: &[f64], p: f64) -> (usize, usize, f64) {
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.partition_point(|&c| c <= p) - 1;
    let t = (p - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, t)
}

/// Bilinear interpolation of grid values placed at the given pixel
/// coordinates, held constant beyond the outermost centres.
pub fn upsample_at(
    map: &GridMap,
    centers_y: &[f64],
    centers_x: &[f64],
    height: usize,
    width: usize,
) -> Vec<f64> {
    let cols: Vec<(usize, usize, f64)> = (0..width)
        .map(|x| interp_axis(centers_x, x as f64))
        .collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let (r0, r1, ty) = interp_axis(centers_y, y as f64);
        for &(c0, c1, tx) in &cols {
            let top = map.get(r0, c0) * (1.0 - tx) + map.get(r0, c1) * tx;
            let bot = map.get(r1, c0) * (1.0 - tx) + map.get(r1, c1) * tx;
            out.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
        }
    }
    out
}

/// Upsampling with cell centres spread evenly over the target.
pub fn upsample_map(map: &GridMap, height: usize, width: usize) -> Result<Vec<f64>> {
    if height < map.rows || width < map.cols {
        return Err(Error::Dimension(format!(
            "cannot upsample {}x{} to smaller {height}x{width}",
            map.rows, map.cols
        )));
    }
    let centers = |n: usize, size: usize| -> Vec<f64> {
        (0..n)
            .map(|i| (i as f64 + 0.5) * size as f64 / n as f64 - 0.5)
            .collect()
    };
    Ok(upsample_at(
        map,
        &centers(map.rows, height),
        &centers(map.cols, width),
        height,
        width,
    ))
}

/// Tamper probability at grid and at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub grid: GridMap,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl ProbabilityMap {
    pub fn to_image(&self) -> Result<Image> {
        Image::new(
            self.width,
            self.height,
            1,
            self.pixels.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_image(&self.to_image()?, path)
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        write_raw_map(path, self.width, self.height, &self.pixels)
    }
}

/// `SRMAP1`, u32 width, u32 height (LE), then LE f32 values row-major.
pub fn encode_raw_map(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 4 * values.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_raw_map(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    fs::write(path, encode_raw_map(width, height, values)).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, values)`.
pub fn read_raw_map(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 14 || &bytes[..6] != RAW_MAGIC {
        return Err(Error::format(path, "not an SRMAP1 file"));
    }
    let w = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 14 + 4 * w * h {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes of data for {w}x{h}, found {}",
                4 * w * h,
                bytes.len() - 14
            ),
        ));
    }
    let values = bytes[14..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((w, h, values))
}
