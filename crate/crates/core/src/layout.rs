//! Rectangle-list device designs and their pixelized images.
//!
//! Coordinates are in nanometres. A pixel belongs to a rectangle when its
//! center lies in the half-open box `[x, x + w) x [y, y + h)`, so abutting
//! rectangles never double-cover a pixel and axis-aligned shapes rasterize
//! exactly.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::g17;

/// Default raster resolution, nm per pixel.
pub const DEFAULT_PIXEL_SIZE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let r = Rect { x, y, w, h };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid(format!(
                "rect has non-finite coordinates: {self:?}"
            )));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!(
                "rect extents must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn x_max(&self) -> f64 {
        self.x + self.w
    }

    pub fn y_max(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    #[inline]
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x_max() && py >= self.y && py < self.y_max()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x_max() <= self.x_max()
            && other.y_max() <= self.y_max()
    }

    pub fn union(&self, other: &Rect) -> Rect {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        Rect {
            x,
            y,
            w: self.x_max().max(other.x_max()) - x,
            h: self.y_max().max(other.y_max()) - y,
        }
    }
}

/// A named rectangle-list design.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub name: String,
    rects: Vec<Rect>,
    bbox: Option<Rect>,
}

#[derive(Serialize, Deserialize)]
struct LayoutFile {
    name: String,
    units: String,
    rects: Vec<Rect>,
}

impl Layout {
    pub fn new(name: impl Into<String>, rects: Vec<Rect>) -> Result<Self> {
        for r in &rects {
            r.validate()?;
        }
        let bbox = rects.iter().copied().reduce(|a, b| a.union(&b));
        Ok(Layout {
            name: name.into(),
            rects,
            bbox,
        })
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    /// Bounding box, `None` for an empty layout.
    pub fn bbox(&self) -> Option<Rect> {
        self.bbox
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn push(&mut self, rect: Rect) -> Result<()> {
        rect.validate()?;
        self.bbox = Some(match self.bbox {
            Some(b) => b.union(&rect),
            None => rect,
        });
        self.rects.push(rect);
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: LayoutFile = serde_json::from_str(s)?;
        if file.units != "nm" {
            return Err(Error::invalid(format!(
                "layout units must be \"nm\", got {:?}",
                file.units
            )));
        }
        Layout::new(file.name, file.rects)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = LayoutFile {
            name: self.name.clone(),
            units: "nm".into(),
            rects: self.rects.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

/// Parameters of a parallel lead array.
///
/// Lead `i` occupies the cell `[i * pitch, (i + 1) * pitch)` and is centered in it,
/// so the nominal fill fraction of the array cell region is `width / pitch`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadArray {
    pub n: usize,
    pub pitch: f64,
    pub width: f64,
    pub length: f64,
}

impl LeadArray {
    pub fn new(n: usize, pitch: f64, width: f64, length: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("lead array needs at least one lead"));
        }
        if !(pitch.is_finite() && width.is_finite() && length.is_finite()) {
            return Err(Error::invalid("lead array dimensions must be finite"));
        }
        if width <= 0.0 || length <= 0.0 {
            return Err(Error::invalid("lead width and length must be positive"));
        }
        if width >= pitch {
            return Err(Error::invalid(format!(
                "lead width ({width} nm) must be smaller than the pitch ({pitch} nm)"
            )));
        }
        Ok(LeadArray {
            n,
            pitch,
            width,
            length,
        })
    }

    /// Array whose leads fill `rho` of each cell.
    pub fn with_fill(n: usize, pitch: f64, rho: f64, length: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::invalid(format!(
                "fill fraction must be in (0, 1), got {rho}"
            )));
        }
        LeadArray::new(n, pitch, rho * pitch, length)
    }

    pub fn fill_fraction(&self) -> f64 {
        self.width / self.pitch
    }

    /// Region spanned by the `n` array cells.
    pub fn cell_region(&self) -> Rect {
        Rect {
            x: 0.0,
            y: 0.0,
            w: self.n as f64 * self.pitch,
            h: self.length,
        }
    }

    pub fn layout(&self) -> Layout {
        let offset = 0.5 * (self.pitch - self.width);
        let rects = (0..self.n)
            .map(|i| Rect {
                x: i as f64 * self.pitch + offset,
                y: 0.0,
                w: self.width,
                h: self.length,
            })
            .collect();
        Layout::new(
            format!(
                "leads_n{}_p{}_w{}",
                self.n,
                g17(self.pitch),
                g17(self.width)
            ),
            rects,
        )
        .expect("lead array rects are valid by construction")
    }
}

/// `n` parallel leads of the given width at the given pitch.
pub fn lead_array(n: usize, pitch: f64, width: f64, length: f64) -> Result<Layout> {
    Ok(LeadArray::new(n, pitch, width, length)?.layout())
}

/// Pixel lattice geometry. Pixel `(ix, iy)` has its center at
/// `(origin_x + (ix + 0.5) * pixel_size, origin_y + (iy + 0.5) * pixel_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridFrame {
    pub pixel_size: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub width: usize,
    pub height: usize,
}

impl GridFrame {
    pub fn new(
        pixel_size: f64,
        origin_x: f64,
        origin_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::invalid(format!(
                "pixel size must be positive, got {pixel_size}"
            )));
        }
        if !(origin_x.is_finite() && origin_y.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(GridFrame {
            pixel_size,
            origin_x,
            origin_y,
            width,
            height,
        })
    }

    /// Frame covering `bbox` plus `margin` on every side.
    pub fn covering(bbox: &Rect, pixel_size: f64, margin: f64) -> Result<Self> {
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::invalid(format!(
                "margin must be non-negative, got {margin}"
            )));
        }
        let width = ((bbox.w + 2.0 * margin) / pixel_size).ceil() as usize;
        let height = ((bbox.h + 2.0 * margin) / pixel_size).ceil() as usize;
        GridFrame::new(pixel_size, bbox.x - margin, bbox.y - margin, width, height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.width + ix
    }

    #[inline]
    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin_x + (ix as f64 + 0.5) * self.pixel_size,
            self.origin_y + (iy as f64 + 0.5) * self.pixel_size,
        )
    }

    pub fn extent(&self) -> Rect {
        Rect {
            x: self.origin_x,
            y: self.origin_y,
            w: self.width as f64 * self.pixel_size,
            h: self.height as f64 * self.pixel_size,
        }
    }

    /// Half-open pixel index ranges whose centers fall inside `rect`.
    pub fn pixel_span(&self, rect: &Rect) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let span = |lo: f64, hi: f64, origin: f64, n: usize| {
            // center c_i = origin + (i + 0.5) p; need lo <= c_i < hi
            let first = ((lo - origin) / self.pixel_size - 0.5).ceil().max(0.0);
            let end = ((hi - origin) / self.pixel_size - 0.5).ceil().max(0.0);
            let first = (first as usize).min(n);
            let end = (end as usize).min(n);
            first..end.max(first)
        };
        (
            span(rect.x, rect.x_max(), self.origin_x, self.width),
            span(rect.y, rect.y_max(), self.origin_y, self.height),
        )
    }

    /// Flat indices of the pixels whose centers lie inside `rect`.
    pub fn rect_pixels(&self, rect: &Rect) -> Vec<usize> {
        let (xs, ys) = self.pixel_span(rect);
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for iy in ys {
            for ix in xs.clone() {
                let (cx, cy) = self.center(ix, iy);
                // the span arithmetic can be off by one ulp at exact boundaries
                if rect.contains_point(cx, cy) {
                    out.push(self.index(ix, iy));
                }
            }
        }
        out
    }
}

/// A scalar field on a pixel lattice: binary for masks, non-negative for
/// energy and dose fields.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    frame: GridFrame,
    values: Vec<f64>,
}

impl RasterGrid {
    pub fn zeros(frame: GridFrame) -> Self {
        RasterGrid {
            values: vec![0.0; frame.len()],
            frame,
        }
    }

    pub fn filled(frame: GridFrame, value: f64) -> Self {
        RasterGrid {
            values: vec![value; frame.len()],
            frame,
        }
    }

    pub fn from_values(frame: GridFrame, values: Vec<f64>) -> Result<Self> {
        if values.len() != frame.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                frame.width,
                frame.height
            )));
        }
        Ok(RasterGrid { frame, values })
    }

    pub fn frame(&self) -> &GridFrame {
        &self.frame
    }

    pub fn pixel_size(&self) -> f64 {
        self.frame.pixel_size
    }

    pub fn width(&self) -> usize {
        self.frame.width
    }

    pub fn height(&self) -> usize {
        self.frame.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.frame.index(ix, iy)]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        let i = self.frame.index(ix, iy);
        self.values[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn count_set(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn ensure_binary(&self) -> Result<()> {
        match self.values.iter().position(|&v| v != 0.0 && v != 1.0) {
            None => Ok(()),
            Some(index) => Err(Error::NotBinary {
                index,
                value: self.values[index],
            }),
        }
    }

    pub fn same_frame(&self, other: &RasterGrid) -> bool {
        self.frame == other.frame
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RasterGrid {
        RasterGrid {
            frame: self.frame,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Binary PGM (P5), 0 -> black, non-zero -> white.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width(), self.height())?;
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|&v| if v != 0.0 { 255 } else { 0 })
            .collect();
        w.write_all(&bytes)
    }

    /// One CSV row per grid row, comma separated, no header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in self.values.chunks(self.width().max(1)) {
            let line: Vec<String> = row.iter().map(|&v| g17(v)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Rasterize a layout onto a frame covering its bounding box plus `margin` nm.
///
/// Rejects pixel sizes larger than half the smallest rect dimension so no
/// feature can vanish.
pub fn rasterize(layout: &Layout, pixel_size: f64, margin: f64) -> Result<RasterGrid> {
    let bbox = layout
        .bbox()
        .ok_or_else(|| Error::invalid("cannot rasterize an empty layout"))?;
    check_resolution(layout, pixel_size)?;
    let frame = GridFrame::covering(&bbox, pixel_size, margin)?;
    Ok(rasterize_onto(layout, &frame))
}

pub fn check_resolution(layout: &Layout, pixel_size: f64) -> Result<()> {
    if !(pixel_size > 0.0 && pixel_size.is_finite()) {
        return Err(Error::invalid(format!(
            "pixel size must be positive, got {pixel_size}"
        )));
    }
    for (index, r) in layout.rects().iter().enumerate() {
        let limit = 0.5 * r.w.min(r.h);
        if pixel_size > limit {
            return Err(Error::PixelTooCoarse {
                index,
                w: r.w,
                h: r.h,
                pixel_size,
                limit,
            });
        }
    }
    Ok(())
}

/// Rasterize onto an existing frame. Parts of the layout outside the frame are dropped.
pub fn rasterize_onto(layout: &Layout, frame: &GridFrame) -> RasterGrid {
    let mut grid = RasterGrid::zeros(*frame);
    for r in layout.rects() {
        for i in frame.rect_pixels(r) {
            grid.values[i] = 1.0;
        }
    }
    grid
}

/// A 4-connected region of set pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub id: usize,
    /// Flat pixel indices in row-major order.
    pub pixels: Vec<usize>,
    /// Indices of design rects overlapping the component (filled by
    /// [`attach_sources`]).
    pub source_rect_ids: Vec<usize>,
}

/// Label map with `0` for background and `id + 1` for component `id`.
pub fn label_components(grid: &RasterGrid) -> Result<(Vec<u32>, usize)> {
    grid.ensure_binary()?;
    let (w, h) = (grid.width(), grid.height());
    let mut labels = vec![0u32; w * h];
    let mut queue = VecDeque::new();
    let mut next = 0u32;
    for start in 0..w * h {
        if grid.values[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if grid.values[j] != 0.0 && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    Ok((labels, next as usize))
}

/// 4-connected components of a binary grid, numbered in row-major order of
/// their first pixel.
pub fn connected_components(grid: &RasterGrid) -> Result<Vec<Component>> {
    let (labels, n) = label_components(grid)?;
    let mut comps: Vec<Component> = (0..n)
        .map(|id| Component {
            id,
            pixels: Vec::new(),
            source_rect_ids: Vec::new(),
        })
        .collect();
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            comps[l as usize - 1].pixels.push(i);
        }
    }
    Ok(comps)
}

/// Record which design rects overlap each component.
pub fn attach_sources(components: &mut [Component], layout: &Layout, frame: &GridFrame) {
    let mut owner = vec![usize::MAX; frame.len()];
    for c in components.iter() {
        for &p in &c.pixels {
            owner[p] = c.id;
        }
    }
    for (rect_id, r) in layout.rects().iter().enumerate() {
        let mut hit: Vec<usize> = frame
            .rect_pixels(r)
            .into_iter()
            .filter_map(|p| (owner[p] != usize::MAX).then_some(owner[p]))
            .collect();
        hit.sort_unstable();
        hit.dedup();
        for cid in hit {
            if let Some(c) = components.iter_mut().find(|c| c.id == cid) {
                c.source_rect_ids.push(rect_id);
            }
        }
    }
}

/// Mean pixel value over `region` (nm), or over the whole grid.
pub fn fill_fraction(grid: &RasterGrid, region: Option<&Rect>) -> Result<f64> {
    grid.ensure_binary()?;
    match region {
        None => {
            if grid.values.is_empty() {
                return Err(Error::invalid("fill fraction of an empty grid"));
            }
            Ok(grid.sum() / grid.values.len() as f64)
        }
        Some(r) => {
            if !(r.w > 0.0 && r.h > 0.0) {
                return Err(Error::invalid("fill-fraction region has zero area"));
            }
            let extent = grid.frame.extent();
            let tol = 1e-9 * grid.pixel_size();
            if r.x < extent.x - tol
                || r.y < extent.y - tol
                || r.x_max() > extent.x_max() + tol
                || r.y_max() > extent.y_max() + tol
            {
                return Err(Error::invalid(format!(
                    "region {r:?} extends outside the grid {extent:?}"
                )));
            }
            let pixels = grid.frame.rect_pixels(r);
            if pixels.is_empty() {
                return Err(Error::invalid(
                    "fill-fraction region contains no pixel centers",
                ));
            }
            let set: f64 = pixels.iter().map(|&i| grid.values[i]).sum();
            Ok(set / pixels.len() as f64)
        }
    }
}
