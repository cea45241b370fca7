//! Padded, time-major mini-batches. Row `t * units + b` holds step `t` of unit `b`.

use caetc_autodiff::Tensor;

use crate::data::{Schema, Trajectory};
use crate::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct Batch {
    pub units: usize,
    pub steps: usize,
    pub lens: Vec<usize>,
    /// `[V, onehot(A_t), Y_t]` per row, zeros on padding.
    pub vay: Tensor,
    pub x: Option<Tensor>,
    pub a: Vec<usize>,
    /// Treatment applied after each row's step, `0` where there is none.
    pub a_next: Vec<usize>,
    pub y: Tensor,
    pub y_next: Tensor,
    /// Per-row weights averaging over a unit's steps, then over units.
    pub recon_weight: Vec<f64>,
    /// Same for transitions `t -> t + 1`; zero for units of length one.
    pub transition_weight: Vec<f64>,
    pub transition_units: usize,
}

impl Batch {
    /// Builds a batch with outcomes divided by `scale`.
    pub fn new(trajectories: &[&Trajectory], schema: &Schema, scale: f64) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(CoreError::Input("empty batch".into()));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(CoreError::Config(format!("outcome scale must be positive, got {scale}")));
        }
        for t in trajectories {
            t.validate(schema)?;
        }
        let b = trajectories.len();
        let steps = trajectories.iter().map(|t| t.len).max().unwrap_or(0);
        let rows = steps * b;
        let (dv, k, dy, dx) = (schema.dim_v, schema.num_treatments, schema.dim_y, schema.dim_x);
        let width = dv + k + dy;
        let mut vay = vec![0.0; rows * width];
        let mut x = schema.has_x().then(|| vec![0.0; rows * dx]);
        let mut y = vec![0.0; rows * dy];
        let mut y_next = vec![0.0; rows * dy];
        let mut a = vec![0; rows];
        let mut a_next = vec![0; rows];
        let mut recon_weight = vec![0.0; rows];
        let mut transition_weight = vec![0.0; rows];
        let transition_units = trajectories.iter().filter(|t| t.len >= 2).count();
        for (bi, tr) in trajectories.iter().enumerate() {
            for t in 0..tr.len {
                let r = t * b + bi;
                let row = &mut vay[r * width..(r + 1) * width];
                row[..dv].copy_from_slice(&tr.v);
                row[dv + tr.a[t]] = 1.0;
                for (j, val) in tr.y[t].iter().enumerate() {
                    row[dv + k + j] = val / scale;
                    y[r * dy + j] = val / scale;
                }
                if let (Some(buf), Some(src)) = (x.as_mut(), tr.x.as_ref()) {
                    buf[r * dx..(r + 1) * dx].copy_from_slice(&src[t]);
                }
                a[r] = tr.a[t];
                recon_weight[r] = 1.0 / (tr.len * b) as f64;
                if t + 1 < tr.len {
                    a_next[r] = tr.a[t + 1];
                    for (j, val) in tr.y[t + 1].iter().enumerate() {
                        y_next[r * dy + j] = val / scale;
                    }
                    transition_weight[r] = 1.0 / ((tr.len - 1) * transition_units) as f64;
                }
            }
        }
        Ok(Self {
            units: b,
            steps,
            lens: trajectories.iter().map(|t| t.len).collect(),
            vay: Tensor::new(vec![rows, width], vay)?,
            x: x.map(|d| Tensor::new(vec![rows, dx], d)).transpose()?,
            a,
            a_next,
            y: Tensor::new(vec![rows, dy], y)?,
            y_next: Tensor::new(vec![rows, dy], y_next)?,
            recon_weight,
            transition_weight,
            transition_units,
        })
    }

    pub fn rows(&self) -> usize {
        self.units * self.steps
    }

    pub fn is_valid(&self, row: usize) -> bool {
        self.recon_weight[row] > 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(len: usize) -> Trajectory {
        Trajectory {
            id: len as u64,
            v: vec![1.0],
            a: (0..len).map(|t| t % 2).collect(),
            y: (0..len).map(|t| vec![t as f64]).collect(),
            x: None,
            len,
            gamma: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn weights_average_steps_then_units() {
        let schema = Schema {
            dim_v: 1,
            dim_y: 1,
            dim_x: 0,
            num_treatments: 2,
            max_len: 4,
        };
        let (a, b) = (traj(3), traj(1));
        let batch = Batch::new(&[&a, &b], &schema, 2.0).unwrap();
        assert_eq!(batch.rows(), 6);
        assert!((batch.recon_weight.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((batch.transition_weight.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(batch.transition_units, 1);
        // Row 2 is step 1 of unit 0: treatment 1, outcome 1 / 2, next outcome 2 / 2.
        assert_eq!(batch.vay.row(2), &[1.0, 0.0, 1.0, 0.5]);
        assert_eq!(batch.y_next.row(2), &[1.0]);
        assert_eq!(batch.a_next[2], 0);
        assert!(!batch.is_valid(3));
    }
}
