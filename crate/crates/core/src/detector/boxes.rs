//! Anchors, box-delta coding and non-maximum suppression.

use crate::geometry::{iou, BoundingBox};

/// Corner-form box used inside the detector, where boxes may temporarily leave
/// the image before clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl Corners {
    pub fn from_box(b: &BoundingBox) -> Self {
        let [x0, y0, x1, y1] = b.corners();
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn iou(&self, other: &Corners) -> f32 {
        let iw = self.x1.min(other.x1) - self.x0.max(other.x0);
        let ih = self.y1.min(other.y1) - self.y0.max(other.y0);
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        let inter = iw * ih;
        let union = self.width() * self.height() + other.width() * other.height() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: usize, height: usize) -> Option<BoundingBox> {
        BoundingBox::clipped(self.x0, self.y0, self.x1, self.y1, width, height)
    }
}

/// Anchors for a `grid_h x grid_w` feature grid. Index order is
/// `(k * grid_h + i) * grid_w + j` for anchor shape `k` at cell `(i, j)`,
/// matching the channel-major layout of the proposal-stage outputs.
pub fn generate_anchors(
    grid_h: usize,
    grid_w: usize,
    stride: usize,
    sizes: &[f32],
    ratios: &[f32],
) -> Vec<Corners> {
    let shapes: Vec<(f32, f32)> = sizes
        .iter()
        .flat_map(|&s| {
            ratios.iter().map(move |&r| {
                // r = h / w at constant area s^2
                let w = s / r.sqrt();
                (w, s * r.sqrt())
            })
        })
        .collect();
    let mut out = Vec::with_capacity(shapes.len() * grid_h * grid_w);
    for &(w, h) in &shapes {
        for i in 0..grid_h {
            for j in 0..grid_w {
                let cx = (j as f32 + 0.5) * stride as f32;
                let cy = (i as f32 + 0.5) * stride as f32;
                out.push(Corners {
                    x0: cx - 0.5 * w,
                    y0: cy - 0.5 * h,
                    x1: cx + 0.5 * w,
                    y1: cy + 0.5 * h,
                });
            }
        }
    }
    out
}

/// Standard `(dx, dy, dw, dh)` parameterisation with per-coordinate weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    pub weights: [f32; 4],
}

const MAX_LOG_SCALE: f32 = 4.135_166_6; // ln(1000 / 16)

impl BoxCoder {
    pub fn new(weights: [f32; 4]) -> Self {
        Self { weights }
    }

    pub fn encode(&self, target: &Corners, reference: &Corners) -> [f32; 4] {
        let (rx, ry) = reference.center();
        let (tx, ty) = target.center();
        let (rw, rh) = (reference.width(), reference.height());
        [
            self.weights[0] * (tx - rx) / rw,
            self.weights[1] * (ty - ry) / rh,
            self.weights[2] * (target.width() / rw).ln(),
            self.weights[3] * (target.height() / rh).ln(),
        ]
    }

    pub fn decode(&self, deltas: &[f32], reference: &Corners) -> Corners {
        let (rx, ry) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        let dx = deltas[0] / self.weights[0];
        let dy = deltas[1] / self.weights[1];
        let dw = (deltas[2] / self.weights[2]).min(MAX_LOG_SCALE);
        let dh = (deltas[3] / self.weights[3]).min(MAX_LOG_SCALE);
        let cx = rx + dx * rw;
        let cy = ry + dy * rh;
        let w = rw * dw.exp();
        let h = rh * dh.exp();
        Corners {
            x0: cx - 0.5 * w,
            y0: cy - 0.5 * h,
            x1: cx + 0.5 * w,
            y1: cy + 0.5 * h,
        }
    }
}

/// Greedy NMS; returns kept indices in descending score order. Ties keep the
/// lower index first.
pub fn nms(boxes: &[BoundingBox], scores: &[f32], iou_threshold: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}
