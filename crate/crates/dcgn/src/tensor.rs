//! Dense 2-D double-precision arrays, the activation/softmax primitives the
//! network is built from, and a central-difference gradient check harness.
//!
//! Backward rules live next to the operations that need them (graph, layers,
//! classifier); this module only provides the value types and the primitives
//! whose gradients everything else composes.

use crate::error::{DcgnError, Result};
use crate::rng::SplitMix64;

/// Row-major 2-D array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Tensor2::from_vec: {} values for {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor2 { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor2 { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    /// Xavier/Glorot uniform init in +-sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut SplitMix64) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor2 {
        self.map(|x| x * s)
    }

    /// self += other * scale. Panics on shape mismatch.
    pub fn add_scaled(&mut self, other: &Tensor2, scale: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Concatenate all rows into a single 1 x (rows*cols) tensor.
    pub fn flatten_rows(&self) -> Tensor2 {
        Tensor2 {
            rows: 1,
            cols: self.data.len(),
            data: self.data.clone(),
        }
    }

    /// Inverse of `flatten_rows` for a known shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor2 {
        assert_eq!(rows * cols, self.data.len(), "reshape size mismatch");
        Tensor2 {
            rows,
            cols,
            data: self.data.clone(),
        }
    }
}

/// Standard matrix product.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(DcgnError::ShapeMismatch {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for j in 0..brow.len() {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Softmax over a slice, stable under large logits.
pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Elementwise activation kinds. The propagation nonlinearity defaults to
/// sigmoid; relu is selectable per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output, which is all the
    /// backward passes keep around.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise activation of a whole tensor.
pub fn activate(x: &Tensor2, kind: Activation) -> Tensor2 {
    x.map(|v| kind.apply(v))
}

/// Trainable tensor: value plus accumulated gradient of the loss.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub value: Tensor2,
    pub grad: Tensor2,
}

impl ParamTensor {
    pub fn new(value: Tensor2) -> Self {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        ParamTensor { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that exposes its trainable tensors by name: models implement this
/// so the gradient checker, the optimizer and the checkpoint writer can walk
/// parameters without knowing the architecture.
pub trait ParamSet {
    /// Stable, deterministic ordering; doubles as the checkpoint block order.
    fn param_names(&self) -> Vec<String>;
    fn param(&self, name: &str) -> Option<&ParamTensor>;
    fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor>;

    fn zero_grads(&mut self) {
        for name in self.param_names() {
            if let Some(p) = self.param_mut(&name) {
                p.zero_grad();
            }
        }
    }
}

/// Outcome of checking one parameter tensor against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry, for diagnostics.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub pass: bool,
}

/// Per-parameter report from `finite_diff_check`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !e.pass).collect()
    }
}

// Below this magnitude both gradients are treated as zero-scale and compared
// against 1e-6 instead of each other; central differences on f64 carry about
// 1e-10 of absolute noise for losses of order one.
const REL_ERR_FLOOR: f64 = 1e-6;

/// Verify the analytic gradients stored in `model`'s parameters against
/// central finite differences of `loss`.
///
/// The caller must have run a backward pass first so that each `ParamTensor`
/// grad holds d(loss)/d(value); `loss` must be a deterministic forward-only
/// evaluation of the same scalar.
pub fn finite_diff_check<M, F>(model: &mut M, loss: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    M: ParamSet,
    F: Fn(&M) -> f64,
{
    assert!(eps > 0.0, "finite_diff_check: eps must be positive");
    let names = model.param_names();
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let analytic = model
            .param(&name)
            .unwrap_or_else(|| panic!("param_names listed unknown tensor {name}"))
            .grad
            .clone();
        let len = analytic.len();
        let mut worst = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            pass: true,
        };
        for idx in 0..len {
            let orig = model.param(&name).unwrap().value.data()[idx];

            model.param_mut(&name).unwrap().value.data_mut()[idx] = orig + eps;
            let f_plus = loss(model);
            model.param_mut(&name).unwrap().value.data_mut()[idx] = orig - eps;
            let f_minus = loss(model);
            model.param_mut(&name).unwrap().value.data_mut()[idx] = orig;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(DcgnError::NonFinite {
                    context: format!("finite_diff_check at {name}[{idx}]"),
                });
            }

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = idx;
                worst.analytic_at_worst = a;
                worst.numeric_at_worst = numeric;
            }
        }
        worst.pass = worst.max_rel_err <= tol;
        entries.push(worst);
    }
    Ok(GradCheckReport { eps, tol, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor2::identity(2);
        let m = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let out = matmul(&i2, &m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_case() {
        // [1 2] * [3; 4] = [11]
        let a = Tensor2::from_rows(&[vec![1.0, 2.0]]);
        let b = Tensor2::from_rows(&[vec![3.0], vec![4.0]]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.rows(), 1);
        assert_eq!(out.cols(), 1);
        assert_eq!(out.get(0, 0), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor2::zeros(2, 3);
        let b = Tensor2::zeros(4, 2);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let x = Tensor2::from_rows(&[vec![0.0, 0.0, 0.0]]);
        let s = row_softmax(&x);
        for j in 0..3 {
            assert!((s.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor2::from_rows(&[vec![1000.0, 1000.0]]);
        let s = row_softmax(&big);
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_closed_form() {
        // softmax([0, ln 3]) = [0.25, 0.75]
        let x = Tensor2::from_rows(&[vec![0.0, 3.0f64.ln()]]);
        let s = row_softmax(&x);
        assert!((s.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        let relu = activate(&Tensor2::from_rows(&[vec![-2.0, 3.0]]), Activation::Relu);
        assert_eq!(relu.data(), &[0.0, 3.0]);
        // sigmoid(ln 3) = 3/4
        assert!((sigmoid(3.0f64.ln()) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert!(sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(-800.0).is_finite());
    }

    struct Quadratic {
        w: ParamTensor,
    }

    impl ParamSet for Quadratic {
        fn param_names(&self) -> Vec<String> {
            vec!["w".into()]
        }
        fn param(&self, name: &str) -> Option<&ParamTensor> {
            (name == "w").then_some(&self.w)
        }
        fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
            (name == "w").then_some(&mut self.w)
        }
    }

    #[test]
    fn gradcheck_quadratic() {
        // f(w) = w^2 at w = 3: analytic gradient 6.
        let mut m = Quadratic {
            w: ParamTensor::new(Tensor2::from_rows(&[vec![3.0]])),
        };
        m.w.grad.set(0, 0, 6.0);
        let report =
            finite_diff_check(&mut m, |m| m.w.value.get(0, 0).powi(2), 1e-5, 1e-4).unwrap();
        assert!(report.all_pass());
        assert!(report.max_rel_err() < 1e-8, "{}", report.max_rel_err());
    }

    #[test]
    fn gradcheck_constant_function() {
        let mut m = Quadratic {
            w: ParamTensor::new(Tensor2::from_rows(&[vec![1.5]])),
        };
        // Analytic gradient stays zero; numeric is zero too.
        let report = finite_diff_check(&mut m, |_| 4.0, 1e-5, 1e-4).unwrap();
        assert!(report.all_pass());
        assert_eq!(report.max_rel_err(), 0.0);
    }

    #[test]
    fn gradcheck_flags_wrong_gradient() {
        let mut m = Quadratic {
            w: ParamTensor::new(Tensor2::from_rows(&[vec![3.0]])),
        };
        m.w.grad.set(0, 0, 5.0); // wrong on purpose
        let report =
            finite_diff_check(&mut m, |m| m.w.value.get(0, 0).powi(2), 1e-5, 1e-4).unwrap();
        assert!(!report.all_pass());
        assert_eq!(report.failures()[0].name, "w");
    }

    #[test]
    fn gradcheck_aborts_on_non_finite() {
        let mut m = Quadratic {
            w: ParamTensor::new(Tensor2::from_rows(&[vec![0.0]])),
        };
        // ln at the negative probe point is NaN, which must abort the check.
        let err = finite_diff_check(&mut m, |m| m.w.value.get(0, 0).ln(), 1e-5, 1e-4)
            .map(|_| ())
            .unwrap_err();
        assert!(err.to_string().contains("w[0]"), "{err}");
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let a = Tensor2::glorot_uniform(3, 4, &mut rng);
            let b = Tensor2::glorot_uniform(4, 2, &mut rng);
            let c = Tensor2::glorot_uniform(2, 5, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                let denom = x.abs().max(y.abs()).max(1.0);
                prop_assert!((x - y).abs() / denom < 1e-9);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let rows = 1 + (seed % 4) as usize;
            let cols = 1 + (seed % 7) as usize;
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-700.0, 700.0)).collect();
            let x = Tensor2::from_vec(rows, cols, data);
            let s = row_softmax(&x);
            for i in 0..rows {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(s.row(i).iter().all(|v| v.is_finite()));
            }
        }
    }
}
