//! Heatmap figures: side-by-side panels sharing one colour scale.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;
use resgrad_core::{Error, Result};

const GAP: u32 = 4;
const SCALE: u32 = 2;
const MAX_COLS: usize = 10;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

/// Perceptually ordered sequential map (dark purple → yellow).
const SEQUENTIAL: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Blue → white → red.
const DIVERGING: [[f64; 3]; 3] = [
    [33.0, 102.0, 172.0],
    [247.0, 247.0, 247.0],
    [178.0, 24.0, 43.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMap {
    Sequential,
    Diverging,
}

impl ColorMap {
    /// `u` in [0, 1].
    pub fn color(self, u: f64) -> Rgb<u8> {
        let anchors: &[[f64; 3]] = match self {
            ColorMap::Sequential => &SEQUENTIAL,
            ColorMap::Diverging => &DIVERGING,
        };
        let u = if u.is_finite() {
            u.clamp(0.0, 1.0)
        } else {
            0.0
        };
        let x = u * (anchors.len() - 1) as f64;
        let i = (x.floor() as usize).min(anchors.len() - 2);
        let f = x - i as f64;
        let mix = |k: usize| (anchors[i][k] * (1.0 - f) + anchors[i + 1][k] * f).round() as u8;
        Rgb([mix(0), mix(1), mix(2)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorScale {
    pub lo: f64,
    pub hi: f64,
}

impl ColorScale {
    /// Min/max over every panel.
    pub fn shared(panels: &[ArrayView2<'_, f32>]) -> ColorScale {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in panels {
            for v in p.iter().filter(|v| v.is_finite()) {
                lo = lo.min(*v as f64);
                hi = hi.max(*v as f64);
            }
        }
        if !lo.is_finite() {
            return ColorScale { lo: 0.0, hi: 1.0 };
        }
        ColorScale { lo, hi }
    }

    /// `[-m, m]` with `m` the largest magnitude over every panel.
    pub fn symmetric(panels: &[ArrayView2<'_, f32>]) -> ColorScale {
        let m = panels
            .iter()
            .flat_map(|p| p.iter())
            .filter(|v| v.is_finite())
            .fold(0.0f64, |m, v| m.max((*v as f64).abs()));
        ColorScale { lo: -m, hi: m }
    }

    fn unit(&self, v: f64) -> f64 {
        if self.hi > self.lo {
            (v - self.lo) / (self.hi - self.lo)
        } else {
            0.5
        }
    }
}

/// Pixel rectangle of one panel inside a figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone)]
pub struct Figure {
    pub image: RgbImage,
    pub panels: Vec<PanelRect>,
    pub scale: ColorScale,
}

impl Figure {
    pub fn panel_pixels(&self, i: usize) -> Vec<Rgb<u8>> {
        let r = self.panels[i];
        let mut out = Vec::with_capacity((r.w * r.h) as usize);
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                out.push(*self.image.get_pixel(x, y));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.image
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Panels are `frames × bins`; time runs left to right and low bins sit at
/// the bottom. Panels wrap after ten columns.
pub fn heatmap_grid(
    panels: &[ArrayView2<'_, f32>],
    scale: ColorScale,
    cmap: ColorMap,
) -> Result<Figure> {
    let first = panels
        .first()
        .ok_or_else(|| Error::InvalidArgument("figure needs at least one panel".into()))?;
    let (frames, bins) = first.dim();
    if panels.iter().any(|p| p.dim() != (frames, bins)) || frames == 0 || bins == 0 {
        return Err(Error::Shape(
            "figure panels must share a nonempty shape".into(),
        ));
    }
    let cols = panels.len().min(MAX_COLS);
    let rows = panels.len().div_ceil(cols);
    let (pw, ph) = (frames as u32 * SCALE, bins as u32 * SCALE);
    let width = cols as u32 * pw + (cols as u32 + 1) * GAP;
    let height = rows as u32 * ph + (rows as u32 + 1) * GAP;
    let mut image = RgbImage::from_pixel(width, height, BACKGROUND);
    let mut rects = Vec::with_capacity(panels.len());
    for (i, p) in panels.iter().enumerate() {
        let (r, c) = ((i / cols) as u32, (i % cols) as u32);
        let rect = PanelRect {
            x: GAP + c * (pw + GAP),
            y: GAP + r * (ph + GAP),
            w: pw,
            h: ph,
        };
        for ((t, b), v) in p.indexed_iter() {
            let color = cmap.color(scale.unit(*v as f64));
            let x0 = rect.x + t as u32 * SCALE;
            let y0 = rect.y + (bins - 1 - b) as u32 * SCALE;
            for dy in 0..SCALE {
                for dx in 0..SCALE {
                    image.put_pixel(x0 + dx, y0 + dy, color);
                }
            }
        }
        rects.push(rect);
    }
    Ok(Figure {
        image,
        panels: rects,
        scale,
    })
}

/// base | refined | ground truth.
pub fn triptych<'a>(
    base: ArrayView2<'a, f32>,
    refined: ArrayView2<'a, f32>,
    gt: ArrayView2<'a, f32>,
) -> Result<Figure> {
    let panels = [base, refined, gt];
    heatmap_grid(&panels, ColorScale::shared(&panels), ColorMap::Sequential)
}

/// Ground-truth residual | sampled residual, diverging about zero.
pub fn residual_pair<'a>(
    gt_residual: ArrayView2<'a, f32>,
    sampled: ArrayView2<'a, f32>,
) -> Result<Figure> {
    let panels = [gt_residual, sampled];
    heatmap_grid(&panels, ColorScale::symmetric(&panels), ColorMap::Diverging)
}

/// One panel per sampler step.
pub fn trajectory(states: &[ArrayView2<'_, f32>]) -> Result<Figure> {
    heatmap_grid(states, ColorScale::shared(states), ColorMap::Sequential)
}
