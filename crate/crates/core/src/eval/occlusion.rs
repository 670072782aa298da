//! Grid occlusion: mask one cell at a time, describe, and measure how far the
//! description moves from the unmasked baseline.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{Rgba, RgbaImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{EmbedBackend, VisionBackend};
use crate::domain::OcclusionReport;
use crate::error::{Error, Result};
use crate::vision::describe_image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub row: u32,
    pub col: u32,
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Cell {
    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

/// Side length of an `n`-cell square grid.
pub fn grid_side(n: usize) -> Result<u32> {
    let k = (n as f64).sqrt().round() as usize;
    if n == 0 || k * k != n {
        return Err(Error::Input(format!("cell count {n} is not a nonzero perfect square")));
    }
    Ok(k as u32)
}

/// k×k row-major cells; the last row and column take the remainder pixels.
pub fn grid_cells(width: u32, height: u32, n: usize) -> Result<Vec<Cell>> {
    let k = grid_side(n)?;
    if width < k || height < k {
        return Err(Error::Input(format!(
            "{width}x{height} image too small for a {k}x{k} grid"
        )));
    }
    let (cw, ch) = (width / k, height / k);
    let mut cells = Vec::with_capacity(n);
    for row in 0..k {
        for col in 0..k {
            let (x, y) = (col * cw, row * ch);
            cells.push(Cell {
                row,
                col,
                x,
                y,
                width: if col + 1 == k { width - x } else { cw },
                height: if row + 1 == k { height - y } else { ch },
            });
        }
    }
    Ok(cells)
}

/// Copy of `image` with `cell` painted opaque black.
pub fn mask_cell(image: &RgbaImage, cell: &Cell) -> Result<RgbaImage> {
    let (w, h) = image.dimensions();
    if u64::from(cell.x) + u64::from(cell.width) > u64::from(w)
        || u64::from(cell.y) + u64::from(cell.height) > u64::from(h)
    {
        return Err(Error::Input(format!("cell {cell:?} outside {w}x{h} image")));
    }
    let mut out = image.clone();
    for y in cell.y..cell.y + cell.height {
        for x in cell.x..cell.x + cell.width {
            out.put_pixel(x, y, Rgba([0, 0, 0, 255]));
        }
    }
    Ok(out)
}

/// 1 − cos(u, v), in [0, 2].
pub fn cosine_distance(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.is_empty() || u.len() != v.len() {
        return Err(Error::Input(format!(
            "vectors must be nonempty and equal length ({} vs {})",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::Input("zero vector has no direction".into()));
    }
    if !(dot.is_finite() && uu.is_finite() && vv.is_finite()) {
        return Err(Error::Input("vector components must be finite".into()));
    }
    let cos = (dot / (uu * vv).sqrt()).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

pub fn encode_png(image: &RgbaImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn embed(backend: &dyn EmbedBackend, text: &str) -> Result<Vec<f32>> {
    Ok(backend.retry_policy().run(|| backend.embed(text))?)
}

/// Describe the image once unmasked and once per masked cell, and record
/// each cell's embedding distance from the baseline.
#[allow(clippy::too_many_arguments)]
pub fn occlusion_run(
    image: &RgbaImage,
    image_id: &str,
    prompt: &str,
    vision: &dyn VisionBackend,
    embedder: &dyn EmbedBackend,
    n: usize,
    parallelism: usize,
) -> Result<OcclusionReport> {
    let k = grid_side(n)? as usize;
    let cells = grid_cells(image.width(), image.height(), n)?;
    let baseline_text = describe_image(vision, &encode_png(image)?, prompt)?;
    let baseline = embed(embedder, &baseline_text)?;

    let pool = crate::label::pool(parallelism)?;
    let distances = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let masked = encode_png(&mask_cell(image, cell)?)?;
                let text = describe_image(vision, &masked, prompt)?;
                cosine_distance(&baseline, &embed(embedder, &text)?)
            })
            .collect::<Result<Vec<f64>>>()
    })?;

    Ok(OcclusionReport {
        image_id: image_id.to_string(),
        baseline_text,
        grid_rows: k,
        grid_cols: k,
        distances,
        region_mask: None,
        rmd: None,
        nrmd: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    /// Mean distance over cells inside the region (the roof).
    pub rmd: f64,
    /// Mean distance over the other cells.
    pub nrmd: f64,
    pub region_cells: usize,
    pub other_cells: usize,
}

pub fn region_stats(report: &OcclusionReport, mask: &[bool]) -> Result<RegionStats> {
    if mask.len() != report.distances.len() {
        return Err(Error::Stats(format!(
            "mask has {} cells, grid has {}",
            mask.len(),
            report.distances.len()
        )));
    }
    let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
    for (&d, &m) in report.distances.iter().zip(mask) {
        let acc = if m { &mut inside } else { &mut outside };
        acc.0 += d;
        acc.1 += 1;
    }
    if inside.1 == 0 || outside.1 == 0 {
        return Err(Error::Stats("mask must select some but not all cells".into()));
    }
    Ok(RegionStats {
        rmd: inside.0 / inside.1 as f64,
        nrmd: outside.0 / outside.1 as f64,
        region_cells: inside.1,
        other_cells: outside.1,
    })
}

/// Attach a region mask and its statistics to a report.
pub fn with_region(mut report: OcclusionReport, mask: Vec<bool>) -> Result<OcclusionReport> {
    let stats = region_stats(&report, &mask)?;
    report.rmd = Some(stats.rmd);
    report.nrmd = Some(stats.nrmd);
    report.region_mask = Some(mask);
    Ok(report)
}

/// Pixels per grid cell in rendered heatmaps.
pub const HEATMAP_CELL_PX: u32 = 16;

/// White at zero to pure red at the report's maximum distance.
pub fn ramp(distance: f64, max: f64) -> Rgba<u8> {
    let t = if max > 0.0 {
        (distance / max).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let gb = (255.0 * (1.0 - t)).round() as u8;
    Rgba([255, gb, gb, 255])
}

pub fn heatmap_image(report: &OcclusionReport) -> RgbaImage {
    let max = report.max_distance();
    let (cols, rows) = (report.grid_cols as u32, report.grid_rows as u32);
    RgbaImage::from_fn(cols * HEATMAP_CELL_PX, rows * HEATMAP_CELL_PX, |x, y| {
        let (r, c) = ((y / HEATMAP_CELL_PX) as usize, (x / HEATMAP_CELL_PX) as usize);
        ramp(report.distance(r, c), max)
    })
}

pub fn distance_csv(report: &OcclusionReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "col", "distance"])?;
    for r in 0..report.grid_rows {
        for c in 0..report.grid_cols {
            w.write_record([r.to_string(), c.to_string(), format!("{:.6}", report.distance(r, c))])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Stats(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}

/// Write the heatmap PNG and the distance CSV.
pub fn render_heatmap(report: &OcclusionReport, png: &Path, csv_path: &Path) -> Result<()> {
    report.validate().map_err(Error::Stats)?;
    heatmap_image(report).save(png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(png, io),
        other => Error::Image(other),
    })?;
    fs::write(csv_path, distance_csv(report)?).map_err(|e| Error::io(csv_path, e))
}

/// Parse a `row,col,distance` CSV into a row-major grid.
pub fn read_distance_csv(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let parse_err = |what: &str| Error::Parse(format!("bad {what} in distance CSV: {rec:?}"));
        let r: usize = field(0).parse().map_err(|_| parse_err("row"))?;
        let c: usize = field(1).parse().map_err(|_| parse_err("col"))?;
        let d: f64 = field(2).parse().map_err(|_| parse_err("distance"))?;
        cells.push((r, c, d));
    }
    let rows = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let cols = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    let mut grid = vec![f64::NAN; rows * cols];
    for (r, c, d) in cells {
        grid[r * cols + c] = d;
    }
    if grid.iter().any(|d| d.is_nan()) {
        return Err(Error::Parse("distance CSV does not cover the full grid".into()));
    }
    Ok((rows, cols, grid))
}

/// Parse a k×k grid of 0/1 values (one row per line, comma separated).
pub fn parse_mask_csv(text: &str, k: usize) -> Result<Vec<bool>> {
    let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if rows.len() != k {
        return Err(Error::Parse(format!("mask has {} rows, expected {k}", rows.len())));
    }
    let mut mask = Vec::with_capacity(k * k);
    for (i, line) in rows.iter().enumerate() {
        let vals: Vec<&str> = line.split(',').map(str::trim).collect();
        if vals.len() != k {
            return Err(Error::Parse(format!(
                "mask row {i} has {} values, expected {k}",
                vals.len()
            )));
        }
        for v in vals {
            mask.push(match v {
                "0" => false,
                "1" => true,
                other => return Err(Error::Parse(format!("mask value {other:?} is not 0 or 1"))),
            });
        }
    }
    Ok(mask)
}

pub fn read_mask_csv(path: &Path, k: usize) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mask_csv(&text, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, HashEmbedder, MockVisionBackend};

    fn report(rows: usize, cols: usize, distances: Vec<f64>) -> OcclusionReport {
        OcclusionReport {
            image_id: "img".into(),
            baseline_text: "b".into(),
            grid_rows: rows,
            grid_cols: cols,
            distances,
            region_mask: None,
            rmd: None,
            nrmd: None,
        }
    }

    #[test]
    fn even_grid() {
        let cells = grid_cells(100, 100, 100).unwrap();
        assert_eq!(cells.len(), 100);
        assert!(cells.iter().all(|c| c.width == 10 && c.height == 10));
    }

    #[test]
    fn remainder_goes_to_last_row_and_column() {
        let cells = grid_cells(105, 103, 100).unwrap();
        let last_col: Vec<_> = cells.iter().filter(|c| c.col == 9).collect();
        let last_row: Vec<_> = cells.iter().filter(|c| c.row == 9).collect();
        assert!(last_col.iter().all(|c| c.width == 15));
        assert!(last_row.iter().all(|c| c.height == 13));
        assert_eq!(cells.iter().map(Cell::area).sum::<u64>(), 105 * 103);
        let mut seen = vec![0u8; 105 * 103];
        for c in &cells {
            for y in c.y..c.y + c.height {
                for x in c.x..c.x + c.width {
                    seen[(y * 105 + x) as usize] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn non_square_count_rejected() {
        assert!(matches!(grid_cells(100, 100, 99), Err(Error::Input(_))));
        assert!(matches!(grid_cells(100, 100, 0), Err(Error::Input(_))));
        assert!(matches!(grid_cells(5, 100, 100), Err(Error::Input(_))));
    }

    #[test]
    fn masking_touches_only_the_cell() {
        let img = RgbaImage::from_fn(20, 20, |x, y| Rgba([x as u8 * 10, y as u8 * 10, 7, 255]));
        let cell = grid_cells(20, 20, 4).unwrap()[3];
        let once = mask_cell(&img, &cell).unwrap();
        for (x, y, p) in once.enumerate_pixels() {
            if cell.contains(x, y) {
                assert_eq!(*p, Rgba([0, 0, 0, 255]));
            } else {
                assert_eq!(p, img.get_pixel(x, y));
            }
        }
        assert_eq!(mask_cell(&once, &cell).unwrap(), once);
        let full = Cell {
            row: 0,
            col: 0,
            x: 0,
            y: 0,
            width: 20,
            height: 20,
        };
        assert!(mask_cell(&img, &full)
            .unwrap()
            .pixels()
            .all(|p| *p == Rgba([0, 0, 0, 255])));
        let outside = Cell {
            row: 0,
            col: 0,
            x: 15,
            y: 0,
            width: 10,
            height: 1,
        };
        assert!(matches!(mask_cell(&img, &outside), Err(Error::Input(_))));
    }

    #[test]
    fn cosine_cases() {
        let u = [0.3f32, -1.7, 2.25];
        assert_eq!(cosine_distance(&u, &u).unwrap(), 0.0);
        let neg: Vec<f32> = u.iter().map(|x| -x).collect();
        assert_eq!(cosine_distance(&u, &neg).unwrap(), 2.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn region_stats_example() {
        let r = report(2, 2, vec![0.2, 0.4, 0.6, 0.8]);
        let s = region_stats(&r, &[true, true, false, false]).unwrap();
        assert!((s.rmd - 0.3).abs() < 1e-12 && (s.nrmd - 0.7).abs() < 1e-12);
        assert_eq!((s.region_cells, s.other_cells), (2, 2));
        let flat = report(2, 2, vec![0.5; 4]);
        let s = region_stats(&flat, &[false, true, false, false]).unwrap();
        assert_eq!((s.rmd, s.nrmd), (0.5, 0.5));
        assert!(matches!(region_stats(&r, &[true; 4]), Err(Error::Stats(_))));
    }

    /// Answers "hidden" when any pixel of a fixed square is black.
    struct SquareWatcher {
        x0: u32,
        y0: u32,
        side: u32,
    }

    impl VisionBackend for SquareWatcher {
        fn id(&self) -> &str {
            "square-watcher"
        }

        fn describe(&self, image: &[u8], _prompt: &str) -> Result<String, BackendError> {
            let img = image::load_from_memory(image)
                .map_err(|e| BackendError::Protocol(e.to_string()))?
                .to_rgba8();
            let hidden = (self.y0..self.y0 + self.side)
                .any(|y| (self.x0..self.x0 + self.side).any(|x| img.get_pixel(x, y).0[..3] == [0, 0, 0]));
            Ok(if hidden {
                "the roof is hidden from view"
            } else {
                "asphalt shingle roof in fair shape"
            }
            .into())
        }
    }

    #[test]
    fn distances_nonzero_exactly_on_sensitive_cells() {
        let img = RgbaImage::from_pixel(50, 50, Rgba([120, 130, 140, 255]));
        let watcher = SquareWatcher {
            x0: 12,
            y0: 3,
            side: 10,
        };
        let rep = occlusion_run(&img, "sq", "describe", &watcher, &HashEmbedder::default(), 25, 3).unwrap();
        let cells = grid_cells(50, 50, 25).unwrap();
        for (cell, d) in cells.iter().zip(&rep.distances) {
            let hits = (watcher.y0..watcher.y0 + watcher.side)
                .any(|y| (watcher.x0..watcher.x0 + watcher.side).any(|x| cell.contains(x, y)));
            assert_eq!(*d > 0.0, hits, "cell {cell:?} distance {d}");
        }
    }

    struct Constant;

    impl VisionBackend for Constant {
        fn id(&self) -> &str {
            "constant"
        }

        fn describe(&self, _: &[u8], _: &str) -> Result<String, BackendError> {
            Ok("same every time".into())
        }
    }

    #[test]
    fn image_blind_backend_gives_zero_map() {
        let img = RgbaImage::from_pixel(30, 30, Rgba([1, 2, 3, 255]));
        let rep = occlusion_run(&img, "c", "p", &Constant, &HashEmbedder::default(), 100, 2).unwrap();
        assert_eq!(rep.distances.len(), 100);
        assert!(rep.distances.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn mock_runs_are_reproducible() {
        let img = RgbaImage::from_fn(40, 40, |x, y| Rgba([(x * 6) as u8, (y * 6) as u8, 50, 255]));
        let a = occlusion_run(&img, "m", "p", &MockVisionBackend, &HashEmbedder::default(), 16, 4).unwrap();
        let b = occlusion_run(&img, "m", "p", &MockVisionBackend, &HashEmbedder::default(), 16, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.distances.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn heatmap_single_hot_cell() {
        let mut d = vec![0.0; 9];
        d[4] = 0.37;
        let rep = report(3, 3, d);
        let img = heatmap_image(&rep);
        let white = Rgba([255, 255, 255, 255]);
        let hot: Vec<_> = (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .filter(|&(r, c)| *img.get_pixel(c * HEATMAP_CELL_PX, r * HEATMAP_CELL_PX) != white)
            .collect();
        assert_eq!(hot, [(1, 1)]);
        assert_eq!(*img.get_pixel(HEATMAP_CELL_PX, HEATMAP_CELL_PX), Rgba([255, 0, 0, 255]));
    }

    #[test]
    fn zero_grid_renders_uniform() {
        let dir = tempfile::tempdir().unwrap();
        let rep = report(2, 2, vec![0.0; 4]);
        render_heatmap(&rep, &dir.path().join("h.png"), &dir.path().join("h.csv")).unwrap();
        let img = image::open(dir.path().join("h.png")).unwrap().to_rgba8();
        assert!(img.pixels().all(|p| *p == Rgba([255, 255, 255, 255])));
    }

    #[test]
    fn csv_round_trip() {
        let rep = report(2, 3, vec![0.1234564, 0.0, 1.999999, 0.5, 0.25, 0.000001]);
        let (r, c, grid) = read_distance_csv(&distance_csv(&rep).unwrap()).unwrap();
        assert_eq!((r, c), (2, 3));
        for (a, b) in grid.iter().zip(&rep.distances) {
            assert!((a - b).abs() <= 5e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn mask_parsing() {
        assert_eq!(parse_mask_csv("1,0\n0,0\n", 2).unwrap(), [true, false, false, false]);
        assert!(parse_mask_csv("1,0\n", 2).is_err());
        assert!(parse_mask_csv("1,2\n0,0", 2).is_err());
    }
}
