//! Operator inference on a cell-centered lattice.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mfg::{BoundaryCode, WorkingBox};

use super::model::OperatorModel;

/// Inferred density fields with their quadrature masses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inference {
    pub working_box: WorkingBox,
    pub points_per_axis: Vec<usize>,
    /// Lattice points, `K × d`.
    pub points: Vec<f64>,
    /// `fields[n-1][j] = G(code, x_j)_n`.
    pub fields: Vec<Vec<f64>>,
    /// `Σ_j fields[n][j] · cell volume`.
    pub masses: Vec<f64>,
    pub seconds: f64,
}

impl Inference {
    pub fn steps(&self) -> usize {
        self.fields.len()
    }
}

/// Evaluates every step of the operator on the `points_per_axis` lattice of
/// `working_box`.
pub fn infer_equilibrium(
    model: &OperatorModel,
    code: &BoundaryCode,
    working_box: &WorkingBox,
    points_per_axis: &[usize],
) -> Result<Inference> {
    let start = Instant::now();
    model.check_code(code)?;
    if working_box.dim() != model.dim() || points_per_axis.len() != model.dim() || points_per_axis.contains(&0) {
        return Err(Error::Incompatible(format!(
            "lattice {points_per_axis:?} on a {}-d box for a {}-d operator",
            working_box.dim(),
            model.dim()
        )));
    }
    let points = working_box.lattice(points_per_axis).concat();
    let out = model.eval(code, &points)?;
    let n_steps = model.steps();
    let k = points.len() / model.dim();
    let fields: Vec<Vec<f64>> = (0..n_steps).map(|n| (0..k).map(|j| out[j * n_steps + n]).collect()).collect();
    let vol = working_box.cell_volume(points_per_axis);
    let masses = fields.iter().map(|f| crate::exec::compensated_sum(f.iter().copied()) * vol).collect();
    Ok(Inference {
        working_box: working_box.clone(),
        points_per_axis: points_per_axis.to_vec(),
        points,
        fields,
        masses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg::{CodeLayout, Obstacle, Scenario};
    use crate::operator::OperatorArch;

    fn code_2d(layout: CodeLayout) -> BoundaryCode {
        let s = Scenario {
            init_mean: vec![-7.0, 0.0],
            init_std: 0.2,
            target: vec![7.0, 0.0],
            obstacles: vec![Obstacle::circle(&[0.0, 0.0], 2.0)],
            sigma: 0.3,
        };
        BoundaryCode::encode(&s, layout).unwrap()
    }

    #[test]
    fn lattice_inference_has_the_contracted_shape_and_is_repeatable() {
        let layout = CodeLayout::circles(2, 2);
        let arch = OperatorArch {
            width: 8,
            layers: 2,
            modes: 4,
            steps: 20,
            feature_scale: 10.0,
        };
        let model = OperatorModel::new(layout, arch, 1).unwrap();
        let b = WorkingBox::new(vec![-10.0, -6.0], vec![10.0, 6.0]);
        let a = infer_equilibrium(&model, &code_2d(layout), &b, &[100, 100]).unwrap();
        assert_eq!(a.steps(), 20);
        assert!(a.fields.iter().all(|f| f.len() == 10_000 && f.iter().all(|v| v.is_finite() && *v >= 0.0)));
        assert_eq!(a.masses.len(), 20);
        let b2 = infer_equilibrium(&model, &code_2d(layout), &b, &[100, 100]).unwrap();
        assert_eq!(a.fields, b2.fields);
    }

    #[test]
    fn foreign_layout_is_refused() {
        let model = OperatorModel::new(CodeLayout::circles(2, 2), OperatorArch::default(), 1).unwrap();
        let b = WorkingBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let err = infer_equilibrium(&model, &code_2d(CodeLayout::circles(2, 3)), &b, &[4, 4]).unwrap_err();
        assert!(matches!(err, Error::LayoutMismatch { .. }));
    }
}
