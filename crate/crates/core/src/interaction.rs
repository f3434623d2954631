//! Voxel-to-text classification by temperature-scaled cosine similarity, and the
//! two segmentation losses evaluated on it.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::MacCounter;
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Aggregation {
    /// Mean soft-F1 per foreground class present in the sample, then averaged over classes.
    #[default]
    ClassMacro,
    /// Literal per-voxel reading: mean over foreground voxels of `1 - f_v / N`.
    PerVoxel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Temperature-scaled cosine similarity against projected text embeddings.
    #[default]
    Cosine,
    /// Learned affine classifier on projected voxel tokens; text is unused.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionConfig {
    pub temperature: f64,
    pub f1_aggregation: F1Aggregation,
    pub head: HeadKind,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            f1_aggregation: F1Aggregation::ClassMacro,
            head: HeadKind::Cosine,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Logits `K x (N+1)` and their row-softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBlock<T> {
    pub logits: Array2<T>,
    pub probs: Array2<T>,
}

impl<T: Real> SimilarityBlock<T> {
    pub fn from_logits(logits: Array2<T>) -> Self {
        let mut probs = logits.clone();
        for mut row in probs.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        Self { logits, probs }
    }

    pub fn num_rows(&self) -> usize {
        self.logits.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }

    /// Chains a gradient w.r.t. probabilities through the row softmax.
    pub fn softmax_backward(&self, dprobs: &Array2<T>) -> Array2<T> {
        let mut out = Array2::<T>::zeros(self.probs.raw_dim());
        for ((mut g, p), dp) in out
            .axis_iter_mut(Axis(0))
            .zip(self.probs.axis_iter(Axis(0)))
            .zip(dprobs.axis_iter(Axis(0)))
        {
            let dot = p.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for j in 0..g.len() {
                g[j] = p[j] * (dp[j] - dot);
            }
        }
        out
    }
}

fn check_finite<T: Real>(x: ArrayView2<'_, T>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// `logits[k][i] = dot(v_k, t_i) / tau`; counts `K*M*N` MACs.
pub fn cosine_logits<T: Real>(
    voxel_tokens: ArrayView2<'_, T>,
    text_tokens: ArrayView2<'_, T>,
    temperature: f64,
    macs: Option<&MacCounter>,
) -> Result<SimilarityBlock<T>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    if voxel_tokens.ncols() != text_tokens.ncols() {
        return Err(Error::DimensionMismatch {
            what: "voxel/text token dimension",
            expected: text_tokens.ncols(),
            found: voxel_tokens.ncols(),
        });
    }
    check_finite(voxel_tokens, "voxel tokens")?;
    check_finite(text_tokens, "text tokens")?;
    let mut logits = Array2::<T>::zeros((voxel_tokens.nrows(), text_tokens.nrows()));
    general_mat_mul(T::lit(1.0 / temperature), &voxel_tokens, &text_tokens.t(), T::zero(), &mut logits);
    if let Some(m) = macs {
        m.add((voxel_tokens.nrows() * voxel_tokens.ncols() * text_tokens.nrows()) as u64);
    }
    Ok(SimilarityBlock::from_logits(logits))
}

/// Returns `(d voxel_tokens, d text_tokens)` given `d logits`.
pub fn cosine_logits_backward<T: Real>(
    voxel_tokens: ArrayView2<'_, T>,
    text_tokens: ArrayView2<'_, T>,
    temperature: f64,
    dlogits: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>) {
    let s = T::lit(1.0 / temperature);
    let mut dv = Array2::<T>::zeros(voxel_tokens.raw_dim());
    general_mat_mul(s, &dlogits, &text_tokens, T::zero(), &mut dv);
    let mut dt = Array2::<T>::zeros(text_tokens.raw_dim());
    general_mat_mul(s, &dlogits.t(), &voxel_tokens, T::zero(), &mut dt);
    (dv, dt)
}

/// Scalar loss with its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad_logits: Array2<T>,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::DimensionMismatch {
            what: "label count",
            expected: rows,
            found: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: l,
            num_classes: classes,
        });
    }
    Ok(())
}

/// Mean over rows of `-log o_label`; gradient `(o - onehot) / K`.
pub fn ce_loss<T: Real>(block: &SimilarityBlock<T>, labels: &[usize]) -> Result<LossOutput<T>> {
    let (k, n) = block.logits.dim();
    check_labels(labels, k, n)?;
    if k == 0 {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let kf = T::from_usize(k).unwrap();
    let mut total = T::zero();
    let mut grad = block.probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        let row = block.logits.row(r);
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - row[y];
        grad[(r, y)] -= T::one();
    }
    grad.mapv_inplace(|g| g / kf);
    Ok(LossOutput {
        value: total / kf,
        grad_logits: grad,
    })
}

/// Soft voxel-wise F1 loss over foreground-labelled rows.
///
/// For a row with foreground label `y`: `f = 2 o_y / (1 + o_y + sum_{i fg, i != y} o_i)`.
/// Background rows and the background probability do not enter the score.
pub fn f1_loss<T: Real>(
    block: &SimilarityBlock<T>,
    labels: &[usize],
    aggregation: F1Aggregation,
) -> Result<LossOutput<T>> {
    let (k, n) = block.logits.dim();
    check_labels(labels, k, n)?;
    let mut class_counts = vec![0usize; n];
    for &y in labels {
        class_counts[y] += 1;
    }
    let fg_rows: usize = class_counts[1..].iter().sum();
    if fg_rows == 0 {
        return Err(Error::NoForeground);
    }
    let present = class_counts[1..].iter().filter(|&&c| c > 0).count();
    let two = T::lit(2.0);
    let mut dprobs = Array2::<T>::zeros((k, n));
    let mut value = T::one();
    let num_fg = T::from_usize(n - 1).unwrap();
    for (r, &y) in labels.iter().enumerate() {
        if y == 0 {
            continue;
        }
        let o = block.probs.row(r);
        let oy = o[y];
        let others = (1..n).filter(|&i| i != y).map(|i| o[i]).sum::<T>();
        let den = T::one() + oy + others;
        let f = two * oy / den;
        // weight of this row's f in the loss (loss = 1 - sum w_r f_r)
        let w = match aggregation {
            F1Aggregation::ClassMacro => {
                T::one() / (T::from_usize(present * class_counts[y]).unwrap())
            }
            F1Aggregation::PerVoxel => T::one() / (num_fg * T::from_usize(fg_rows).unwrap()),
        };
        value -= w * f;
        let den2 = den * den;
        let df_doy = two * (T::one() + others) / den2;
        let df_doi = -two * oy / den2;
        for i in 1..n {
            dprobs[(r, i)] = -w * if i == y { df_doy } else { df_doi };
        }
    }
    Ok(LossOutput {
        value,
        grad_logits: block.softmax_backward(&dprobs),
    })
}

/// Argmax class per row (lowest index wins ties) and its softmax probability.
pub fn classify<T: Real>(block: &SimilarityBlock<T>) -> (Vec<usize>, Vec<T>) {
    let mut labels = Vec::with_capacity(block.num_rows());
    let mut conf = Vec::with_capacity(block.num_rows());
    for (row, probs) in block.logits.axis_iter(Axis(0)).zip(block.probs.axis_iter(Axis(0))) {
        let mut best = 0;
        for i in 1..row.len() {
            if row[i] > row[best] {
                best = i;
            }
        }
        labels.push(best);
        conf.push(probs[best]);
    }
    (labels, conf)
}

/// Plain learned classification layer on projected tokens (ablation baseline).
#[derive(Debug, Clone)]
pub struct LinearHead<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_dim: usize,
    classes: usize,
}

impl<T: Real> LinearHead<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, classes: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * classes)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Self {
            weight: Param::new("linear_head.weight", vec![classes, in_dim], w),
            bias: Param::zeros("linear_head.bias", vec![classes]),
            in_dim,
            classes,
        }
    }

    fn matrix(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.classes, self.in_dim), &self.weight.value).expect("layout")
    }

    pub fn forward(&self, x: ArrayView2<'_, T>, macs: Option<&MacCounter>) -> SimilarityBlock<T> {
        let mut logits = Array2::<T>::zeros((x.nrows(), self.classes));
        general_mat_mul(T::one(), &x, &self.matrix().t(), T::zero(), &mut logits);
        let b = Array1::from(self.bias.value.clone());
        logits += &b;
        if let Some(m) = macs {
            m.add((x.nrows() * self.in_dim * self.classes) as u64);
        }
        SimilarityBlock::from_logits(logits)
    }

    pub fn backward(&mut self, x: ArrayView2<'_, T>, dlogits: ArrayView2<'_, T>) -> Array2<T> {
        {
            let mut gw = ndarray::ArrayViewMut2::from_shape((self.classes, self.in_dim), &mut self.weight.grad)
                .expect("layout");
            general_mat_mul(T::one(), &dlogits.t(), &x, T::one(), &mut gw);
        }
        for (g, col) in self.bias.grad.iter_mut().zip(dlogits.axis_iter(Axis(1))) {
            *g += col.sum();
        }
        let mut dx = Array2::<T>::zeros(x.raw_dim());
        general_mat_mul(T::one(), &dlogits, &self.matrix(), T::zero(), &mut dx);
        dx
    }
}

impl<T: Real> Module<T> for LinearHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(logits: &Array2<f64>, labels: &[usize], f: impl Fn(&SimilarityBlock<f64>) -> LossOutput<f64>, tol: f64) {
        let block = SimilarityBlock::from_logits(logits.clone());
        let grad = f(&block).grad_logits;
        let h = 1e-6;
        for idx in ndarray::indices_of(logits) {
            let mut p = logits.clone();
            p[idx] += h;
            let a = f(&SimilarityBlock::from_logits(p.clone())).value;
            p[idx] -= 2.0 * h;
            let b = f(&SimilarityBlock::from_logits(p)).value;
            let fd = (a - b) / (2.0 * h);
            let err = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-8);
            assert!(err <= tol || (fd - grad[idx]).abs() < 1e-10, "{idx:?}: fd {fd} vs {}", grad[idx]);
        }
        let _ = labels;
    }

    #[test]
    fn hand_softmax_case() {
        let v = arr2(&[[1.0, 0.0]]);
        let t = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = cosine_logits(v.view(), t.view(), 1.0, None).unwrap();
        assert_eq!(b.logits, arr2(&[[1.0, 0.0]]));
        let e = std::f64::consts::E;
        assert!((b.probs[(0, 0)] - e / (e + 1.0)).abs() < 1e-12);
        assert!((b.probs[(0, 0)] - 0.7311).abs() < 1e-4);
        let ce = ce_loss(&b, &[0]).unwrap();
        assert!((ce.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_text_tokens_give_uniform_rows() {
        let v = arr2(&[[0.6f64, 0.8], [1.0, 0.0]]);
        let t = arr2(&[[0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]);
        let b = cosine_logits(v.view(), t.view(), 0.07, None).unwrap();
        assert!(b.probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));
        let ce = ce_loss(&b, &[1, 3]).unwrap();
        assert!((ce.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn halving_temperature_doubles_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Array2<f64> = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let t: Array2<f64> = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let a = cosine_logits(v.view(), t.view(), 0.2, None).unwrap();
        let b = cosine_logits(v.view(), t.view(), 0.1, None).unwrap();
        for (x, y) in a.logits.iter().zip(b.logits.iter()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        assert_eq!(classify(&a).0, classify(&b).0);
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let v = arr2(&[[f64::NAN, 0.0]]);
        let t = arr2(&[[1.0, 0.0]]);
        assert!(matches!(cosine_logits(v.view(), t.view(), 1.0, None), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ce_label_out_of_range() {
        let b = SimilarityBlock::from_logits(arr2(&[[0.0, 1.0]]));
        assert!(matches!(ce_loss(&b, &[2]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
        let labels = [0, 3, 1];
        fd_check(&logits, &labels, |b| ce_loss(b, &labels).unwrap(), 1e-6);
    }

    #[test]
    fn f1_hand_evaluation() {
        let probs = arr2(&[[0.2f64, 0.5, 0.3]]);
        let block = SimilarityBlock::from_logits(probs.mapv(f64::ln));
        let out = f1_loss(&block, &[1], F1Aggregation::ClassMacro).unwrap();
        assert!((out.value - (1.0 - 1.0 / 1.8)).abs() < 1e-12);
        assert!((out.value - 0.4444).abs() < 1e-4);
    }

    #[test]
    fn f1_perfect_prediction_is_zero() {
        let block = SimilarityBlock::<f64>::from_logits(arr2(&[[-1e3, 0.0, -1e3], [0.0, -1e3, -1e3]]));
        let out = f1_loss(&block, &[1, 0], F1Aggregation::ClassMacro).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn f1_per_voxel_variant_bottoms_out_at_one_minus_inverse_n() {
        let block = SimilarityBlock::<f64>::from_logits(arr2(&[[-1e3, 0.0, -1e3]]));
        let out = f1_loss(&block, &[1], F1Aggregation::PerVoxel).unwrap();
        assert!((out.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f1_requires_foreground() {
        let block = SimilarityBlock::from_logits(arr2(&[[0.0, 1.0]]));
        assert!(matches!(f1_loss(&block, &[0], F1Aggregation::ClassMacro), Err(Error::NoForeground)));
    }

    #[test]
    fn f1_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Array2::from_shape_fn((6, 4), |_| rng.random_range(-2.0..2.0));
        let labels = [0, 1, 3, 3, 2, 0];
        for agg in [F1Aggregation::ClassMacro, F1Aggregation::PerVoxel] {
            fd_check(&logits, &labels, |b| f1_loss(b, &labels, agg).unwrap(), 1e-5);
        }
    }

    #[test]
    fn classify_ties_prefer_lower_index() {
        let b = SimilarityBlock::<f64>::from_logits(arr2(&[[0.2, 0.9, 0.1], [0.5, 0.1, 0.5]]));
        let (labels, conf) = classify(&b);
        assert_eq!(labels, vec![1, 0]);
        assert!((conf[0] - b.probs[(0, 1)]).abs() < 1e-15);
    }

    #[test]
    fn logits_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let r = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
        let (dv, dt) = cosine_logits_backward(v.view(), t.view(), 0.3, r.view());
        let loss = |v: &Array2<f64>, t: &Array2<f64>| (&cosine_logits(v.view(), t.view(), 0.3, None).unwrap().logits * &r).sum();
        let h = 1e-6;
        let mut vp = v.clone();
        vp[(1, 2)] += h;
        let fd = (loss(&vp, &t) - loss(&v, &t)) / h;
        assert!((fd - dv[(1, 2)]).abs() < 1e-5);
        let mut tp = t.clone();
        tp[(0, 3)] += h;
        let fd = (loss(&v, &tp) - loss(&v, &t)) / h;
        assert!((fd - dt[(0, 3)]).abs() < 1e-5);
    }
}
