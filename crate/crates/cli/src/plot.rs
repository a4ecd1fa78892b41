//! Minimal line charts rendered straight to PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use adasample::MetricRecord;

const W: usize = 480;
const H: usize = 320;
const MARGIN: usize = 24;

struct Canvas {
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            px: vec![[255, 255, 255]; W * H],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < W && (y as usize) < H {
            self.px[y as usize * W + x as usize] = c;
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
            for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
                self.set(x.round() as i64 + dx, y.round() as i64 + dy, c);
            }
        }
    }

    fn save(&self, path: &Path) -> std::io::Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, W as u32, H as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(std::io::Error::other)?;
        let data: Vec<u8> = self.px.iter().flatten().copied().collect();
        writer.write_image_data(&data).map_err(std::io::Error::other)
    }
}

/// Draws each series of `(x, y)` points on shared axes; a light grid marks
/// tenths of the y range.
fn chart(path: &Path, series: &[(&[(f64, f64)], [u8; 3])]) -> std::io::Result<()> {
    let mut c = Canvas::new();
    let pts = series.iter().flat_map(|(s, _)| s.iter());
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::MAX, f64::MIN, 0.0f64, f64::MIN);
    for &(x, y) in pts {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    let (pw, ph) = ((W - 2 * MARGIN) as f64, (H - 2 * MARGIN) as f64);
    let map = |x: f64, y: f64| {
        (
            MARGIN as f64 + (x - x_lo) / (x_hi - x_lo) * pw,
            (H - MARGIN) as f64 - (y - y_lo) / (y_hi - y_lo) * ph,
        )
    };
    for i in 1..10 {
        let y = (H - MARGIN) as f64 - ph * i as f64 / 10.0;
        c.line((MARGIN as f64, y), ((W - MARGIN) as f64, y), [232, 232, 232]);
    }
    let axis = [90, 90, 90];
    c.line(map(x_lo, y_lo), map(x_hi, y_lo), axis);
    c.line(map(x_lo, y_lo), map(x_lo, y_hi), axis);
    for (s, colour) in series {
        for w in s.windows(2) {
            c.line(map(w[0].0, w[0].1), map(w[1].0, w[1].1), *colour);
        }
        if let [only] = s {
            let p = map(only.0, only.1);
            c.line(p, (p.0 + 1.0, p.1), *colour);
        }
    }
    c.save(path)
}

/// `loss.png`: train (blue) and eval (orange) loss per epoch.
/// `accuracy.png`: accuracy (green) and mean IoU (purple) per epoch.
pub fn write_curves(dir: &Path, records: &[MetricRecord]) -> std::io::Result<()> {
    let pick = |kind: &str, f: &dyn Fn(&MetricRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        records
            .iter()
            .filter(|r| r.kind == kind)
            .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
            .collect()
    };
    let train = pick("train", &|r| Some(r.loss));
    let eval = pick("eval", &|r| Some(r.loss));
    let acc = pick("eval", &|r| r.accuracy);
    let iou = pick("eval", &|r| r.mean_iou);
    chart(&dir.join("loss.png"), &[(&train, [31, 119, 180]), (&eval, [255, 127, 14])])?;
    chart(&dir.join("accuracy.png"), &[(&acc, [44, 160, 44]), (&iou, [148, 103, 189])])
}
