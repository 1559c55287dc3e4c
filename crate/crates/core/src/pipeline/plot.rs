//! Static SVG plots: landmark overlays and attention heatmaps.

use std::fmt::Write;

use crate::error::Result;
use crate::features::PcaModel;
use crate::mat::Mat;
use crate::metrics::dtw;

pub const GENERATED_COLOR: &str = "green";
pub const REFERENCE_COLOR: &str = "red";

const PANEL_COLS: usize = 10;
const PANEL_W: f64 = 160.0;
const PANEL_H: f64 = 80.0;
const MARGIN: f64 = 6.0;

/// Generated and reference landmark frames paired along the DTW path of
/// their coefficient streams.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayPlot {
    pub id: String,
    /// `(generated frame, reference frame)` per panel.
    pub path: Vec<(usize, usize)>,
    pub generated_hand: Mat,
    pub generated_lips: Mat,
    pub reference_hand: Mat,
    pub reference_lips: Mat,
}

fn hcat(a: &Mat, b: &Mat) -> Mat {
    Mat::from_fn(a.rows, a.cols + b.cols, |r, c| if c < a.cols { a.at(r, c) } else { b.at(r, c - a.cols) })
}

impl OverlayPlot {
    /// Aligns on the concatenated hand and lip coefficients, then projects
    /// both sides back to landmark coordinates.
    pub fn new(
        id: &str,
        gen_hand: &Mat,
        gen_lips: &Mat,
        ref_hand: &Mat,
        ref_lips: &Mat,
        pca_hand: &PcaModel,
        pca_lips: &PcaModel,
    ) -> Result<Self> {
        let path = dtw(&hcat(gen_hand, gen_lips), &hcat(ref_hand, ref_lips))?.path;
        Ok(Self {
            id: id.to_string(),
            path,
            generated_hand: pca_hand.inverse(gen_hand)?,
            generated_lips: pca_lips.inverse(gen_lips)?,
            reference_hand: pca_hand.inverse(ref_hand)?,
            reference_lips: pca_lips.inverse(ref_lips)?,
        })
    }

    pub fn steps(&self) -> usize {
        self.path.len()
    }

    /// Largest distance between a generated point and its reference
    /// counterpart over all panels.
    pub fn max_point_distance(&self) -> f64 {
        let mut worst = 0.0f64;
        for &(i, j) in &self.path {
            for (g, r) in [(&self.generated_hand, &self.reference_hand), (&self.generated_lips, &self.reference_lips)] {
                for (p, q) in g.row(i).chunks(2).zip(r.row(j).chunks(2)) {
                    let d = ((p[0] - q[0]) as f64).hypot((p[1] - q[1]) as f64);
                    worst = worst.max(d);
                }
            }
        }
        worst
    }
}

/// `(min x, min y, max x, max y)` over every point of the given frames.
fn bounds(mats: &[&Mat]) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for m in mats {
        for p in m.data.chunks(2) {
            let (x, y) = (p[0] as f64, p[1] as f64);
            b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
    }
    if !b.0.is_finite() {
        return (0.0, 0.0, 1.0, 1.0);
    }
    b
}

struct Frame {
    x0: f64,
    y0: f64,
    size: f64,
    b: (f64, f64, f64, f64),
}

impl Frame {
    fn map(&self, p: &[f32]) -> (f64, f64) {
        let span = (self.b.2 - self.b.0).max(self.b.3 - self.b.1).max(1e-9);
        (
            self.x0 + (p[0] as f64 - self.b.0) / span * self.size,
            self.y0 + (p[1] as f64 - self.b.1) / span * self.size,
        )
    }
}

fn point_groups(out: &mut String, class: &str, frame: &Frame, gen: &[f32], reference: &[f32]) {
    for (g, r) in gen.chunks(2).zip(reference.chunks(2)) {
        let (gx, gy) = frame.map(g);
        let (rx, ry) = frame.map(r);
        let _ = write!(
            out,
            r#"<g class="{class}"><circle cx="{rx:.2}" cy="{ry:.2}" r="1.3" fill="{REFERENCE_COLOR}"/><circle cx="{gx:.2}" cy="{gy:.2}" r="1.3" fill="{GENERATED_COLOR}"/></g>"#
        );
    }
}

/// One panel per DTW step, each with 21 hand and 42 lip point groups.
pub fn overlay_svg(p: &OverlayPlot) -> String {
    let rows = p.steps().div_ceil(PANEL_COLS).max(1);
    let (w, h) = (PANEL_COLS as f64 * PANEL_W, rows as f64 * PANEL_H + 20.0);
    let hb = bounds(&[&p.generated_hand, &p.reference_hand]);
    let lb = bounds(&[&p.generated_lips, &p.reference_lips]);
    let mut out = String::new();
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" data-steps="{}">"#,
        p.steps()
    );
    let _ = write!(
        out,
        r#"<text x="4" y="14" font-size="12">{} (green generated, red reference; one panel per aligned frame pair)</text>"#,
        p.id
    );
    let size = PANEL_H - 2.0 * MARGIN;
    for (k, &(i, j)) in p.path.iter().enumerate() {
        let (px, py) = ((k % PANEL_COLS) as f64 * PANEL_W, 20.0 + (k / PANEL_COLS) as f64 * PANEL_H);
        let _ = write!(
            out,
            r#"<g class="panel" data-step="{k}" data-generated="{i}" data-reference="{j}"><rect x="{px}" y="{py}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="lightgray"/>"#
        );
        let hand = Frame {
            x0: px + MARGIN,
            y0: py + MARGIN,
            size,
            b: hb,
        };
        let lips = Frame {
            x0: px + PANEL_W / 2.0 + MARGIN,
            y0: py + MARGIN,
            size,
            b: lb,
        };
        point_groups(&mut out, "hand", &hand, p.generated_hand.row(i), p.reference_hand.row(j));
        point_groups(&mut out, "lips", &lips, p.generated_lips.row(i), p.reference_lips.row(j));
        let _ = write!(out, r#"<text x="{:.1}" y="{:.1}" font-size="8">{k}</text></g>"#, px + 2.0, py + PANEL_H - 2.0);
    }
    out.push_str("</svg>\n");
    out
}

/// `T x L` weights as a grayscale grid, decoder steps left to right and
/// encoder positions top to bottom.
pub fn attention_svg(id: &str, weights: &Mat) -> String {
    const CELL: f64 = 4.0;
    let (t, l) = (weights.rows, weights.cols);
    let top = 20.0;
    let (w, h) = ((t as f64 * CELL).max(200.0), top + l as f64 * CELL * 4.0);
    let peak = weights.data.iter().fold(0.0f32, |m, &x| m.max(x)).max(1e-12);
    let mut out = String::new();
    let _ = write!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = write!(out, r#"<text x="4" y="14" font-size="12">{id} attention ({t} x {l})</text>"#);
    for r in 0..t {
        for c in 0..l {
            let shade = 255 - (255.0 * weights.at(r, c) / peak).round().clamp(0.0, 255.0) as u8;
            let _ = write!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{}" fill="rgb({shade},{shade},{shade})"/>"#,
                r as f64 * CELL,
                top + c as f64 * CELL * 4.0,
                CELL * 4.0
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
