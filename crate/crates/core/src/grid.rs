//! Scalar fields on a pixel grid and the `DGRID` / `DFLOW` file formats.
//!
//! All arithmetic is done in `f64`. The text format round-trips exactly
//! (shortest-representation printing); the binary format stores `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Largest number of cells a grid read from disk may declare.
pub const MAX_CELLS: u64 = 1 << 30;

const TEXT_MAGIC: &str = "DGRID";
const FLOW_TEXT_MAGIC: &str = "DFLOW";
const BIN_MAGIC: &[u8; 4] = b"DGRB";
const FLOW_BIN_MAGIC: &[u8; 4] = b"DFLB";
const VERSION: u8 = 1;

/// Row-major `height x width` field of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .ok_or(Error::DimensionOverflow {
                height: height as u64,
                width: width as u64,
            })?;
        if values.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        assert!(value.is_finite());
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    /// Builds a grid by evaluating `f(row, col)` at every cell.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Applies `f` to every value; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Splits the grid into `k` equal tiles (`k` must be a perfect square),
    /// ordered row-major over the tile grid.
    pub fn partition_patches(&self, k: usize) -> Result<Vec<Grid2D>> {
        let side = patch_side(k)?;
        if self.height % side != 0 || self.width % side != 0 {
            return Err(Error::InvalidPatchCount {
                k,
                reason: format!(
                    "{}x{} grid is not divisible into {side}x{side} tiles",
                    self.height, self.width
                ),
            });
        }
        let (ph, pw) = (self.height / side, self.width / side);
        let mut patches = Vec::with_capacity(k);
        for tr in 0..side {
            for tc in 0..side {
                let mut values = Vec::with_capacity(ph * pw);
                for r in 0..ph {
                    let start = (tr * ph + r) * self.width + tc * pw;
                    values.extend_from_slice(&self.values[start..start + pw]);
                }
                patches.push(Grid2D {
                    height: ph,
                    width: pw,
                    values,
                });
            }
        }
        Ok(patches)
    }

    /// Sums over each of the `k` tiles, row-major over the tile grid.
    pub fn patch_sums(&self, k: usize) -> Result<Vec<f64>> {
        Ok(self.partition_patches(k)?.iter().map(Grid2D::sum).collect())
    }

    /// Bilinear resampling on a corner-aligned sample grid.
    pub fn resize_bilinear(&self, new_height: usize, new_width: usize) -> Result<Self> {
        if new_height == 0 || new_width == 0 {
            return Err(Error::InvalidValue(format!(
                "target size must be positive, got {new_height}x{new_width}"
            )));
        }
        let coord = |i: usize, n_out: usize, n_in: usize| -> f64 {
            if n_out == 1 {
                0.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            }
        };
        let mut values = Vec::with_capacity(new_height * new_width);
        for r in 0..new_height {
            let y = coord(r, new_height, self.height);
            let y0 = (y.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = y - y0 as f64;
            for c in 0..new_width {
                let x = coord(c, new_width, self.width);
                let x0 = (x.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = x - x0 as f64;
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                // Clamp away last-ulp excursions so the value range is preserved.
                let lo = self.get(y0, x0).min(self.get(y0, x1)).min(self.get(y1, x0)).min(self.get(y1, x1));
                let hi = self.get(y0, x0).max(self.get(y0, x1)).max(self.get(y1, x0)).max(self.get(y1, x1));
                values.push(v.clamp(lo, hi));
            }
        }
        Self::new(new_height, new_width, values)
    }
}

pub(crate) fn patch_side(k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidPatchCount {
            k,
            reason: "must be positive".into(),
        });
    }
    let side = (k as f64).sqrt().round() as usize;
    if side * side != k {
        return Err(Error::InvalidPatchCount {
            k,
            reason: "not a perfect square".into(),
        });
    }
    Ok(side)
}

/// Non-negative person-density field; its sum is the crowd count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap(Grid2D);

impl DensityMap {
    pub fn new(grid: Grid2D) -> Result<Self> {
        if let Some(index) = grid.values.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidValue(format!(
                "density map has negative value {} at index {index}",
                grid.values[index]
            )));
        }
        Ok(Self(grid))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid2D::zeros(height, width))
    }

    pub fn grid(&self) -> &Grid2D {
        &self.0
    }

    pub fn into_grid(self) -> Grid2D {
        self.0
    }

    pub fn count(&self) -> f64 {
        self.0.sum()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

/// Grayscale frame with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame(Grid2D);

impl Frame {
    pub fn new(grid: Grid2D) -> Result<Self> {
        if let Some(index) = grid.values.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidValue(format!(
                "frame intensity {} at index {index} outside [0, 1]",
                grid.values[index]
            )));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid2D {
        &self.0
    }

    pub fn into_grid(self) -> Grid2D {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

/// Per-pixel displacement in pixels per sampling interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    u: Grid2D,
    v: Grid2D,
}

impl FlowField {
    pub fn new(u: Grid2D, v: Grid2D) -> Result<Self> {
        if u.dims() != v.dims() {
            return Err(Error::DimensionMismatch(format!(
                "flow components {:?} and {:?} differ",
                u.dims(),
                v.dims()
            )));
        }
        Ok(Self { u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            u: Grid2D::zeros(height, width),
            v: Grid2D::zeros(height, width),
        }
    }

    pub fn u(&self) -> &Grid2D {
        &self.u
    }

    pub fn v(&self) -> &Grid2D {
        &self.v
    }

    pub fn dims(&self) -> (usize, usize) {
        self.u.dims()
    }
}

/// Head annotations per frame index for a scene of declared size.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    height: usize,
    width: usize,
    entries: BTreeMap<u64, Vec<(f64, f64)>>,
}

impl AnnotationSet {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            entries: BTreeMap::new(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Registers a frame with no heads.
    pub fn add_frame(&mut self, frame: u64) {
        self.entries.entry(frame).or_default();
    }

    pub fn push(&mut self, frame: u64, x: f64, y: f64) -> Result<()> {
        if !(x.is_finite() && y.is_finite())
            || x < 0.0
            || y < 0.0
            || x >= self.width as f64
            || y >= self.height as f64
        {
            return Err(Error::InvalidValue(format!(
                "annotation ({x}, {y}) in frame {frame} outside {}x{} scene",
                self.width, self.height
            )));
        }
        self.entries.entry(frame).or_default().push((x, y));
        Ok(())
    }

    pub fn heads(&self, frame: u64) -> Option<&[(f64, f64)]> {
        self.entries.get(&frame).map(Vec::as_slice)
    }

    pub fn frames(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    /// Parses the `frame,x,y` CSV format (header required).
    pub fn parse_csv(text: &str, height: usize, width: usize) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "frame,x,y" => {}
            _ => return Err(Error::Format("annotation CSV must start with `frame,x,y`".into())),
        }
        let mut set = Self::new(height, width);
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("annotation CSV line {}: `{line}`", lineno + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let frame: u64 = fields[0].parse().map_err(|_| bad())?;
            let x: f64 = fields[1].parse().map_err(|_| bad())?;
            let y: f64 = fields[2].parse().map_err(|_| bad())?;
            set.push(frame, x, y)?;
        }
        Ok(set)
    }

    pub fn read_csv(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, height, width)
    }
}

/// On-disk encoding of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridFormat {
    Text,
    Binary,
}

impl GridFormat {
    /// Sniffs the format from leading bytes.
    pub fn detect(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(BIN_MAGIC) || bytes.starts_with(FLOW_BIN_MAGIC) {
            Some(GridFormat::Binary)
        } else if bytes.starts_with(TEXT_MAGIC.as_bytes()) || bytes.starts_with(FLOW_TEXT_MAGIC.as_bytes()) {
            Some(GridFormat::Text)
        } else {
            None
        }
    }
}

fn check_finite(grid: &Grid2D) -> Result<()> {
    match grid.values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn push_text_rows(out: &mut String, grid: &Grid2D) {
    use std::fmt::Write as _;
    for row in grid.values.chunks(grid.width) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
}

fn push_binary_values(out: &mut Vec<u8>, grid: &Grid2D) {
    for &v in &grid.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_grid(grid: &Grid2D, format: GridFormat) -> Result<Vec<u8>> {
    check_finite(grid)?;
    Ok(match format {
        GridFormat::Text => {
            let mut out = format!("{TEXT_MAGIC} v1 {} {}\n", grid.height, grid.width);
            push_text_rows(&mut out, grid);
            out.into_bytes()
        }
        GridFormat::Binary => {
            let mut out = Vec::with_capacity(13 + 4 * grid.values.len());
            out.extend_from_slice(BIN_MAGIC);
            out.push(VERSION);
            out.extend_from_slice(&(grid.height as u32).to_le_bytes());
            out.extend_from_slice(&(grid.width as u32).to_le_bytes());
            push_binary_values(&mut out, grid);
            out
        }
    })
}

pub fn decode_grid(bytes: &[u8], format: GridFormat) -> Result<Grid2D> {
    match format {
        GridFormat::Text => {
            let text = std::str::from_utf8(bytes).map_err(|_| Error::Format("grid text is not UTF-8".into()))?;
            let (h, w, mut tokens) = parse_text_header(text, TEXT_MAGIC)?;
            let grid = take_text_grid(&mut tokens, h, w)?;
            ensure_exhausted(tokens)?;
            Ok(grid)
        }
        GridFormat::Binary => {
            let (h, w, payload) = parse_binary_header(bytes, BIN_MAGIC)?;
            let values = read_f32_values(payload, h * w)?;
            if payload.len() != 4 * h * w {
                return Err(Error::Format("trailing bytes after grid payload".into()));
            }
            Grid2D::new(h, w, values)
        }
    }
}

pub fn write_grid(grid: &Grid2D, path: impl AsRef<Path>, format: GridFormat) -> Result<()> {
    let bytes = encode_grid(grid, format)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_grid(path: impl AsRef<Path>, format: GridFormat) -> Result<Grid2D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, format)
}

/// Reads a grid, choosing the format from the file's magic bytes.
pub fn read_grid_auto(path: impl AsRef<Path>) -> Result<Grid2D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = GridFormat::detect(&bytes).ok_or_else(|| Error::Format(format!("{}: unknown magic", path.display())))?;
    decode_grid(&bytes, format)
}

pub fn encode_flow(flow: &FlowField, format: GridFormat) -> Result<Vec<u8>> {
    check_finite(&flow.u)?;
    check_finite(&flow.v)?;
    let (h, w) = flow.dims();
    Ok(match format {
        GridFormat::Text => {
            let mut out = format!("{FLOW_TEXT_MAGIC} v1 {h} {w}\n");
            push_text_rows(&mut out, &flow.u);
            push_text_rows(&mut out, &flow.v);
            out.into_bytes()
        }
        GridFormat::Binary => {
            let mut out = Vec::with_capacity(13 + 8 * h * w);
            out.extend_from_slice(FLOW_BIN_MAGIC);
            out.push(VERSION);
            out.extend_from_slice(&(h as u32).to_le_bytes());
            out.extend_from_slice(&(w as u32).to_le_bytes());
            push_binary_values(&mut out, &flow.u);
            push_binary_values(&mut out, &flow.v);
            out
        }
    })
}

pub fn decode_flow(bytes: &[u8], format: GridFormat) -> Result<FlowField> {
    match format {
        GridFormat::Text => {
            let text = std::str::from_utf8(bytes).map_err(|_| Error::Format("flow text is not UTF-8".into()))?;
            let (h, w, mut tokens) = parse_text_header(text, FLOW_TEXT_MAGIC)?;
            let u = take_text_grid(&mut tokens, h, w).map_err(|e| double_count(e, h * w, 0))?;
            let v = take_text_grid(&mut tokens, h, w).map_err(|e| double_count(e, h * w, h * w))?;
            ensure_exhausted(tokens)?;
            FlowField::new(u, v)
        }
        GridFormat::Binary => {
            let (h, w, payload) = parse_binary_header(bytes, FLOW_BIN_MAGIC)?;
            let mut values = read_f32_values(payload, 2 * h * w)?;
            if payload.len() != 8 * h * w {
                return Err(Error::Format("trailing bytes after flow payload".into()));
            }
            let v = values.split_off(h * w);
            FlowField::new(Grid2D::new(h, w, values)?, Grid2D::new(h, w, v)?)
        }
    }
}

fn double_count(err: Error, n: usize, offset: usize) -> Error {
    match err {
        Error::Truncated { found, .. } => Error::Truncated {
            expected: 2 * n,
            found: offset + found,
        },
        other => other,
    }
}

pub fn write_flow(flow: &FlowField, path: impl AsRef<Path>, format: GridFormat) -> Result<()> {
    let bytes = encode_flow(flow, format)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_flow(path: impl AsRef<Path>, format: GridFormat) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flow(&bytes, format)
}

pub fn read_flow_auto(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = GridFormat::detect(&bytes).ok_or_else(|| Error::Format(format!("{}: unknown magic", path.display())))?;
    decode_flow(&bytes, format)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn checked_dims(h: u64, w: u64) -> Result<(usize, usize)> {
    if h == 0 || w == 0 {
        return Err(Error::Format(format!("zero dimension {h}x{w}")));
    }
    match h.checked_mul(w) {
        Some(n) if n <= MAX_CELLS => Ok((h as usize, w as usize)),
        _ => Err(Error::DimensionOverflow { height: h, width: w }),
    }
}

fn parse_text_header<'a>(text: &'a str, magic: &str) -> Result<(usize, usize, std::str::SplitAsciiWhitespace<'a>)> {
    let (header, body) = text.split_once('\n').unwrap_or((text, ""));
    let parts: Vec<&str> = header.split_ascii_whitespace().collect();
    if parts.first() != Some(&magic) {
        return Err(Error::Format(format!("expected `{magic}` header")));
    }
    if parts.len() != 4 {
        return Err(Error::Format(format!("malformed header `{header}`")));
    }
    let version = parts[1]
        .strip_prefix('v')
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::Format(format!("malformed version `{}`", parts[1])))?;
    if version != VERSION as u32 {
        return Err(Error::Version {
            found: version,
            expected: VERSION as u32,
        });
    }
    let parse_dim = |s: &str| s.parse::<u64>().map_err(|_| Error::Format(format!("malformed dimension `{s}`")));
    let (h, w) = checked_dims(parse_dim(parts[2])?, parse_dim(parts[3])?)?;
    Ok((h, w, body.split_ascii_whitespace()))
}

fn take_text_grid(tokens: &mut std::str::SplitAsciiWhitespace<'_>, h: usize, w: usize) -> Result<Grid2D> {
    let n = h * w;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        match tokens.next() {
            Some(tok) => {
                let v: f64 = tok.parse().map_err(|_| Error::Format(format!("malformed value `{tok}`")))?;
                if !v.is_finite() {
                    return Err(Error::NonFinite { index: values.len() });
                }
                values.push(v);
            }
            None => {
                return Err(Error::Truncated {
                    expected: n,
                    found: values.len(),
                })
            }
        }
    }
    Grid2D::new(h, w, values)
}

fn ensure_exhausted(mut tokens: std::str::SplitAsciiWhitespace<'_>) -> Result<()> {
    match tokens.next() {
        Some(extra) => Err(Error::Format(format!("unexpected trailing value `{extra}`"))),
        None => Ok(()),
    }
}

fn parse_binary_header<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "expected magic `{}`",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes.len() < 13 {
        return Err(Error::Format("binary header truncated".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Version {
            found: bytes[4] as u32,
            expected: VERSION as u32,
        });
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as u64;
    let w = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as u64;
    let (h, w) = checked_dims(h, w)?;
    Ok((h, w, &bytes[13..]))
}

fn read_f32_values(payload: &[u8], n: usize) -> Result<Vec<f64>> {
    if payload.len() < 4 * n {
        return Err(Error::Truncated {
            expected: n,
            found: payload.len() / 4,
        });
    }
    let mut values = Vec::with_capacity(n);
    for (index, chunk) in payload[..4 * n].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite { index });
        }
        values.push(v);
    }
    Ok(values)
}
