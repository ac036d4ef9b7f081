//! Cross-correlation alignment loss, bidirectional cross-modal contrastive
//! loss, and their weighted sum.
//!
//! All functions build onto the tape of their inputs, so the result can be
//! back-propagated directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the off-diagonal terms of the alignment loss.
    pub lambda_offdiag: f64,
    /// Weight of the alignment loss in the total.
    pub lambda_cor: f64,
    /// Weight of the contrastive loss in the total.
    pub lambda_self: f64,
    /// Temperature of the cosine-similarity softmax.
    pub tau: f64,
    /// Mean-centre feature columns before correlating them.
    pub center: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_offdiag: 0.005,
            lambda_cor: 0.9,
            lambda_self: 0.1,
            tau: 0.1,
            center: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_offdiag", self.lambda_offdiag),
            ("lambda_cor", self.lambda_cor),
            ("lambda_self", self.lambda_self),
            ("tau", self.tau),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("loss.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Batch cross-correlation between the two modalities' feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix(Tensor);

impl CorrelationMatrix {
    pub fn compute(f_v: &Tensor, f_a: &Tensor) -> Result<Self> {
        let tape = crate::Tape::new();
        let c = cross_correlation(tape.constant(f_v.clone()), tape.constant(f_a.clone()), false)?;
        Ok(Self((*c.value()).clone()))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }
}

fn check_pair(f_v: &Var<'_>, f_a: &Var<'_>, op: &'static str) -> Result<(usize, usize)> {
    let (vs, as_) = (f_v.shape(), f_a.shape());
    if vs.len() != 2 || vs != as_ {
        return Err(Error::dim(op, &vs, &as_));
    }
    Ok((vs[0], vs[1]))
}

fn zero_column(t: &Tensor) -> Option<usize> {
    (0..t.cols()).find(|&j| (0..t.rows()).all(|i| t.at(i, j) == 0.0))
}

fn zero_row(t: &Tensor) -> Option<usize> {
    (0..t.rows()).find(|&i| t.row(i).iter().all(|&x| x == 0.0))
}

fn mean_center<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let tape = x.tape();
    let mean = x.sum_axis(0)?.scale(1.0 / s[0] as f64).reshape(&[1, s[1]])?;
    x.sub(&tape.constant(Tensor::ones(&[s[0], 1])).matmul(&mean)?)
}

/// `C_ij = Σ_b f_v[b,i] f_a[b,j] / (‖f_v[:,i]‖ ‖f_a[:,j]‖)`, normalized per
/// column along the batch, without centring unless `center` is set.
pub fn cross_correlation<'t>(f_v: Var<'t>, f_a: Var<'t>, center: bool) -> Result<Var<'t>> {
    let (_, d) = check_pair(&f_v, &f_a, "cross_correlation")?;
    let (f_v, f_a) = if center {
        (mean_center(f_v)?, mean_center(f_a)?)
    } else {
        (f_v, f_a)
    };
    if let Some(index) = zero_column(&f_v.value()) {
        return Err(Error::Degenerate { what: "visual feature column", index });
    }
    if let Some(index) = zero_column(&f_a.value()) {
        return Err(Error::Degenerate { what: "audio feature column", index });
    }
    let num = f_v.transpose()?.matmul(&f_a)?;
    let nv = f_v.l2_norm_axis(0)?.reshape(&[d, 1])?;
    let na = f_a.l2_norm_axis(0)?.reshape(&[1, d])?;
    let c = num.div(&nv.matmul(&na)?)?;
    // Nearly collinear columns can land an ulp outside [-1, 1]; pull them
    // back. Both corrections are exact near ±1 and zero everywhere else.
    c.sub(&c.offset(-1.0).relu())?.add(&c.neg().offset(-1.0).relu())
}

/// `Σ_i (1 − C_ii)² + λ Σ_i Σ_{j≠i} C_ij²`.
pub fn cgra_loss<'t>(c: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    let s = c.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("cgra_loss", &s, &[]));
    }
    let d = s[0];
    let tape = c.tape();
    let eye = tape.constant(Tensor::eye(d));
    let mut off = Tensor::ones(&[d, d]);
    for i in 0..d {
        off.data_mut()[i * d + i] = 0.0;
    }
    let off = tape.constant(off);
    let on_diag = c.mul(&eye)?.sub(&eye)?.square().sum();
    let off_diag = c.mul(&off)?.square().sum().scale(lambda);
    on_diag.add(&off_diag)
}

/// Contrastive loss anchored on `anchor` with `other` as the paired modality:
///
/// `−Σ_i log[ h(x_i, y_i) / (Σ_j h(x_i, y_j) + Σ_{j≠i} h(x_i, x_j)) ]`,
/// `h(p, q) = exp(cos(p, q) / τ)`.
///
/// The cross-modal sum in the denominator includes `j = i`.
fn contrastive_one_way<'t>(anchor: Var<'t>, other: Var<'t>, tau: f64, anchor_name: &'static str, other_name: &'static str) -> Result<Var<'t>> {
    let (n, _) = check_pair(&anchor, &other, "selfcl_loss")?;
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    if let Some(index) = zero_row(&anchor.value()) {
        return Err(Error::Degenerate { what: anchor_name, index });
    }
    if let Some(index) = zero_row(&other.value()) {
        return Err(Error::Degenerate { what: other_name, index });
    }
    let tape = anchor.tape();
    let nx = anchor.l2_norm_axis(1)?;
    let ny = other.l2_norm_axis(1)?;
    let cosine = |y: Var<'t>, ny: Var<'t>| -> Result<Var<'t>> {
        let dots = anchor.matmul(&y.transpose()?)?;
        let norms = nx.reshape(&[n, 1])?.matmul(&ny.reshape(&[1, n])?)?;
        dots.div(&norms)
    };
    let s_cross = cosine(other, ny)?;
    let s_self = cosine(anchor, nx)?;

    let eye = tape.constant(Tensor::eye(n));
    let mut off = Tensor::ones(&[n, n]);
    for i in 0..n {
        off.data_mut()[i * n + i] = 0.0;
    }
    let off = tape.constant(off);

    let cross_sum = s_cross.scale(1.0 / tau).exp().sum_axis(1)?;
    let self_sum = s_self.scale(1.0 / tau).exp().mul(&off)?.sum_axis(1)?;
    let log_den = cross_sum.add(&self_sum)?.log()?.sum();
    // log of the numerator is just the positive-pair similarity over τ
    let log_num = s_cross.mul(&eye)?.sum().scale(1.0 / tau);
    log_den.sub(&log_num)
}

/// Contrastive loss for the visual modality.
pub fn selfcl_loss_v<'t>(f_v: Var<'t>, f_a: Var<'t>, tau: f64) -> Result<Var<'t>> {
    contrastive_one_way(f_v, f_a, tau, "visual feature row", "audio feature row")
}

/// Mirror image of [`selfcl_loss_v`] anchored on audio.
pub fn selfcl_loss_a<'t>(f_a: Var<'t>, f_v: Var<'t>, tau: f64) -> Result<Var<'t>> {
    contrastive_one_way(f_a, f_v, tau, "audio feature row", "visual feature row")
}

pub fn selfcl_total<'t>(f_v: Var<'t>, f_a: Var<'t>, tau: f64) -> Result<Var<'t>> {
    selfcl_loss_v(f_v, f_a, tau)?.add(&selfcl_loss_a(f_a, f_v, tau)?)
}

/// Which loss terms contribute to the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub cgra: bool,
    pub selfcl: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Self { cgra: true, selfcl: true }
    }
}

/// The total and the individual (unweighted) terms that went into it.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    pub cgra: Option<Var<'t>>,
    pub selfcl_v: Option<Var<'t>>,
    pub selfcl_a: Option<Var<'t>>,
}

/// `λ_cor · cgra + λ_self · (selfcl_v + selfcl_a)`, skipping disabled terms.
pub fn loss_breakdown<'t>(f_v: Var<'t>, f_a: Var<'t>, cfg: &LossConfig, terms: Terms) -> Result<LossBreakdown<'t>> {
    check_pair(&f_v, &f_a, "total_loss")?;
    let tape = f_v.tape();
    let mut total = tape.scalar(0.0);
    let mut out = LossBreakdown { total, cgra: None, selfcl_v: None, selfcl_a: None };
    if terms.cgra {
        let c = cross_correlation(f_v, f_a, cfg.center)?;
        let l = cgra_loss(c, cfg.lambda_offdiag)?;
        total = total.add(&l.scale(cfg.lambda_cor))?;
        out.cgra = Some(l);
    }
    if terms.selfcl {
        let lv = selfcl_loss_v(f_v, f_a, cfg.tau)?;
        let la = selfcl_loss_a(f_a, f_v, cfg.tau)?;
        total = total.add(&lv.add(&la)?.scale(cfg.lambda_self))?;
        out.selfcl_v = Some(lv);
        out.selfcl_a = Some(la);
    }
    out.total = total;
    Ok(out)
}

pub fn total_loss<'t>(f_v: Var<'t>, f_a: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    Ok(loss_breakdown(f_v, f_a, cfg, Terms::default())?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_many, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn corr(fv: &Tensor, fa: &Tensor) -> Tensor {
        CorrelationMatrix::compute(fv, fa).unwrap().values().clone()
    }

    fn scalar<F>(f: F) -> f64
    where
        F: for<'t> Fn(&'t Tape) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        f(&tape).unwrap().item().unwrap()
    }

    #[test]
    fn orthonormal_self_correlation_is_identity() {
        let q = m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        assert!(corr(&q, &q).max_abs_diff(&Tensor::eye(2)) < 1e-15);
        let neg = m(&[&[-1.0, 0.0], &[0.0, -1.0], &[0.0, 0.0]]);
        let c = corr(&q, &neg);
        assert!(c.max_abs_diff(&m(&[&[-1.0, 0.0], &[0.0, -1.0]])) < 1e-15);
    }

    #[test]
    fn hand_computed_correlation() {
        let fv = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let fa = m(&[&[1.0, 1.0], &[0.0, 1.0]]);
        let r = 1.0 / 2f64.sqrt();
        assert!(corr(&fv, &fa).max_abs_diff(&m(&[&[1.0, r], &[0.0, r]])) < 1e-15);
    }

    #[test]
    fn collinear_columns_stay_within_unit_bound() {
        for seed in 0..50 {
            let fa = rand_matrix(7, 5, seed);
            let near = Tensor::new(&[7, 5], fa.data().iter().map(|x| x * 3.0 + 1e-9).collect()).unwrap();
            let flipped = Tensor::new(&[7, 5], fa.data().iter().map(|x| -2.0 * x).collect()).unwrap();
            for c in [corr(&fa, &near), corr(&near, &flipped)] {
                assert!(c.data().iter().all(|v| (-1.0..=1.0).contains(v)), "seed {seed}");
            }
        }
    }

    #[test]
    fn zero_column_is_degenerate() {
        let fv = m(&[&[1.0, 0.0], &[2.0, 0.0]]);
        let fa = m(&[&[1.0, 1.0], &[0.0, 1.0]]);
        let err = CorrelationMatrix::compute(&fv, &fa).unwrap_err();
        assert!(matches!(err, Error::Degenerate { what: "visual feature column", index: 1 }));
        let err = CorrelationMatrix::compute(&fa, &fv).unwrap_err();
        assert!(matches!(err, Error::Degenerate { what: "audio feature column", index: 1 }));
    }

    #[test]
    fn cgra_values() {
        let at = |c: Tensor, lambda: f64| scalar(|t| cgra_loss(t.constant(c.clone()), lambda));
        assert_eq!(at(Tensor::eye(3), 0.005), 0.0);
        assert_eq!(at(m(&[&[-1.0, 0.0], &[0.0, -1.0]]), 0.005), 8.0);
        let r = 1.0 / 2f64.sqrt();
        let v = at(m(&[&[1.0, r], &[0.0, r]]), 0.005);
        let expect = (1.0 - r).powi(2) + 0.005 * 0.5;
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.08829).abs() < 5e-6);
        let tape = Tape::new();
        assert!(cgra_loss(tape.constant(Tensor::zeros(&[2, 3])), 0.1).is_err());
    }

    #[test]
    fn selfcl_two_sample_value() {
        let f = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let expect = 2.0 * ((std::f64::consts::E + 2.0) / std::f64::consts::E).ln();
        assert!((expect - 1.102_889_427_864_102).abs() < 1e-14);
        let lv = scalar(|t| selfcl_loss_v(t.constant(f.clone()), t.constant(f.clone()), 1.0));
        let la = scalar(|t| selfcl_loss_a(t.constant(f.clone()), t.constant(f.clone()), 1.0));
        assert!((lv - expect).abs() < 1e-12);
        assert_eq!(lv.to_bits(), la.to_bits());
        let tot = scalar(|t| selfcl_total(t.constant(f.clone()), t.constant(f.clone()), 1.0));
        assert!((tot - 2.0 * expect).abs() < 1e-12);
    }

    #[test]
    fn single_sample_contrastive_is_zero() {
        let fv = rand_matrix(1, 5, 1);
        let fa = rand_matrix(1, 5, 2);
        for tau in [0.1, 1.0] {
            let v = scalar(|t| selfcl_total(t.constant(fv.clone()), t.constant(fa.clone()), tau));
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn zero_row_is_degenerate() {
        let fv = m(&[&[1.0, 2.0], &[0.0, 0.0]]);
        let fa = rand_matrix(2, 2, 0);
        let tape = Tape::new();
        let r = selfcl_loss_v(tape.constant(fv), tape.constant(fa), 0.1);
        assert!(matches!(r, Err(Error::Degenerate { what: "visual feature row", index: 1 })));
    }

    #[test]
    fn positive_similarity_decreases_loss() {
        // rotate the positive partner of sample 0 towards its anchor while
        // every other feature stays put
        let fv = rand_matrix(4, 3, 10);
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let w = step as f64 / 10.0;
            let mut fa = rand_matrix(4, 3, 11);
            for j in 0..3 {
                let v = (1.0 - w) * fa.at(0, j) + w * fv.at(0, j);
                fa.data_mut()[j] = v;
            }
            let l = scalar(|t| selfcl_loss_v(t.constant(fv.clone()), t.constant(fa.clone()), 0.1));
            assert!(l < prev, "step {step}: {l} !< {prev}");
            prev = l;
        }
    }

    #[test]
    fn total_decomposes() {
        let q = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = LossConfig::default();
        let tot = scalar(|t| total_loss(t.constant(q.clone()), t.constant(q.clone()), &cfg));
        let sc = scalar(|t| selfcl_total(t.constant(q.clone()), t.constant(q.clone()), cfg.tau));
        assert!((tot - cfg.lambda_self * sc).abs() < 1e-12);

        let fv = rand_matrix(4, 6, 1);
        let fa = rand_matrix(4, 6, 2);
        let off = LossConfig { lambda_self: 0.0, ..cfg.clone() };
        let tot = scalar(|t| total_loss(t.constant(fv.clone()), t.constant(fa.clone()), &off));
        let cg = scalar(|t| cgra_loss(cross_correlation(t.constant(fv.clone()), t.constant(fa.clone()), false)?, off.lambda_offdiag));
        assert!((tot - off.lambda_cor * cg).abs() < 1e-12);
    }

    #[test]
    fn centered_variant_removes_column_means() {
        let fv = rand_matrix(6, 3, 4);
        let shifted = Tensor::new(fv.shape(), fv.data().iter().map(|x| x + 5.0).collect()).unwrap();
        let c = |x: &Tensor| {
            let tape = Tape::new();
            (*cross_correlation(tape.constant(x.clone()), tape.constant(fv.clone()), true).unwrap().value()).clone()
        };
        assert!(c(&fv).max_abs_diff(&c(&shifted)) < 1e-9);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..10 {
            let fv = rand_matrix(4, 6, seed);
            let fa = rand_matrix(4, 6, seed + 1000);
            let cgra = grad_check_many(
                |_, x| cgra_loss(cross_correlation(x[0], x[1], false)?, 0.005),
                &[fv.clone(), fa.clone()],
                1e-5,
            )
            .unwrap();
            let selfcl = grad_check_many(|_, x| selfcl_total(x[0], x[1], 0.1), &[fv.clone(), fa.clone()], 1e-5).unwrap();
            let total = grad_check_many(|_, x| total_loss(x[0], x[1], &LossConfig::default()), &[fv.clone(), fa.clone()], 1e-5).unwrap();
            let centered = grad_check(|t, x| cgra_loss(cross_correlation(x, t.constant(fa.clone()), true)?, 0.005), &fv, 1e-5).unwrap();
            for e in cgra.iter().chain(&selfcl).chain(&total).chain([&centered]) {
                assert!(*e < 1e-4, "seed {seed}: {e}");
            }
        }
    }

    #[test]
    fn config_validation() {
        LossConfig::default().validate().unwrap();
        assert!(LossConfig { tau: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { lambda_cor: -1.0, ..LossConfig::default() }.validate().is_err());
        assert!(serde_json::from_str::<LossConfig>(r#"{"lamda_cor": 1}"#).is_err());
    }

    fn matrix_strategy(max_n: usize, max_d: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
        (2..=max_n, 2..=max_d, any::<u64>()).prop_map(|(n, d, seed)| (rand_matrix(n, d, seed), rand_matrix(n, d, seed ^ 0xABCD)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn correlation_entries_bounded((fv, fa) in matrix_strategy(8, 8)) {
            let c = corr(&fv, &fa);
            prop_assert!(c.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn cgra_zero_only_at_identity((fv, fa) in matrix_strategy(8, 8)) {
            let c = corr(&fv, &fa);
            let l = scalar(|t| cgra_loss(t.constant(c.clone()), 0.005));
            prop_assert!(l > 0.0);
        }

        #[test]
        fn contrastive_scale_invariant((fv, fa) in matrix_strategy(8, 8), s in 0.01f64..100.0) {
            let scaled = Tensor::new(fv.shape(), fv.data().iter().map(|x| x * s).collect()).unwrap();
            let v = |x: &Tensor| scalar(|t| selfcl_loss_v(t.constant(x.clone()), t.constant(fa.clone()), 0.1));
            let a = |x: &Tensor| scalar(|t| selfcl_loss_a(t.constant(fa.clone()), t.constant(x.clone()), 0.1));
            prop_assert!((v(&fv) - v(&scaled)).abs() < 1e-9);
            prop_assert!((a(&fv) - a(&scaled)).abs() < 1e-9);
        }

        #[test]
        fn correlation_column_scale_invariant((fv, fa) in matrix_strategy(8, 8), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scales: Vec<f64> = (0..fv.cols()).map(|_| rng.random_range(0.01..100.0)).collect();
            let mut scaled = fv.clone();
            let d = fv.cols();
            for (i, v) in scaled.data_mut().iter_mut().enumerate() {
                *v *= scales[i % d];
            }
            prop_assert!(corr(&fv, &fa).max_abs_diff(&corr(&scaled, &fa)) < 1e-9);
        }
    }
}
