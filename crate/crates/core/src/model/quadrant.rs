use crate::flow::FlowField;
use crate::numcore::Tensor;

use super::ModelError;

/// The four quadrants of an even-cropped flow field, ordered top-left,
/// top-right, bottom-left, bottom-right.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantSet {
    pub quads: [FlowField; 4],
}

/// Drops the last column/row when odd, then splits at the midpoints.
pub fn split_quadrants(field: &FlowField) -> Result<QuadrantSet, ModelError> {
    if field.width < 2 || field.height < 2 {
        return Err(ModelError::Degenerate(field.width, field.height));
    }
    let (w, h) = (field.width / 2, field.height / 2);
    Ok(QuadrantSet {
        quads: [
            field.crop(0, 0, w, h),
            field.crop(w, 0, w, h),
            field.crop(0, h, w, h),
            field.crop(w, h, w, h),
        ],
    })
}

impl QuadrantSet {
    pub fn quad_size(&self) -> (usize, usize) {
        (self.quads[0].width, self.quads[0].height)
    }

    /// Inverse of [`split_quadrants`] on the even-cropped field.
    pub fn reassemble(&self) -> FlowField {
        let (w, h) = self.quad_size();
        FlowField::from_fn(2 * w, 2 * h, |x, y| {
            let q = &self.quads[(y / h) * 2 + x / w];
            q.at(x % w, y % h)
        })
    }

    /// Network inputs: one 2×H×W tensor `(u, v) / flow_scale` per quadrant.
    pub fn to_tensors(&self, flow_scale: f64) -> [Tensor; 4] {
        self.quads.clone().map(|q| {
            let data: Vec<f64> = q.u.iter().chain(&q.v).map(|v| v / flow_scale).collect();
            Tensor::new(&[2, q.height, q.width], data).expect("quadrant is non-empty")
        })
    }

    /// Same quadrants in a different order (used to probe branch specificity).
    pub fn permuted(&self, order: [usize; 4]) -> QuadrantSet {
        QuadrantSet {
            quads: order.map(|i| self.quads[i].clone()),
        }
    }
}
