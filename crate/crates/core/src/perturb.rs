//! Constrained-optimization core: valid-range clamping, L∞ projection,
//! sign-gradient PGD, budget splitting and staged perturbation composition.

use crate::error::{Error, Result};
use crate::image_tensor::{ImageTensor, PixelField};
use crate::seed::rng_from_seed;
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Numeric slop allowed on budget checks (accumulated f64 rounding).
pub const BUDGET_TOL: f64 = 1e-9;

/// Element-wise kernels. The pipeline runs f64 end to end; the primitives
/// are precision-generic so a 32-bit engine instantiation stays available.
pub mod kernel {
    pub trait Scalar: Copy + PartialOrd + core::ops::Neg<Output = Self> {
        const ZERO: Self;
        const ONE: Self;
    }

    impl Scalar for f32 {
        const ZERO: Self = 0.0;
        const ONE: Self = 1.0;
    }

    impl Scalar for f64 {
        const ZERO: Self = 0.0;
        const ONE: Self = 1.0;
    }

    /// Sign with `sign(0) = 0`: no movement on flat coordinates.
    pub fn sign<T: Scalar>(v: T) -> T {
        if v > T::ZERO {
            T::ONE
        } else if v < T::ZERO {
            -T::ONE
        } else {
            T::ZERO
        }
    }

    /// Clip into the valid pixel range `[0,1]`.
    pub fn clamp01<T: Scalar>(v: T) -> T {
        if v < T::ZERO {
            T::ZERO
        } else if v > T::ONE {
            T::ONE
        } else {
            v
        }
    }

    /// Clip into the L∞ ball of radius `eps` around zero.
    pub fn clip_to_ball<T: Scalar>(v: T, eps: T) -> T {
        if v < -eps {
            -eps
        } else if v > eps {
            eps
        } else {
            v
        }
    }
}

/// Which optimization stage produced a delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Task,
    Clip,
    Composed,
}

/// An additive image delta together with the L∞ budget it was optimized
/// under and the stage that produced it.
#[derive(Debug, Clone)]
pub struct Perturbation {
    delta: Array3<f64>,
    budget: f64,
    stage: StageTag,
}

impl Perturbation {
    /// Wrap a delta, validating `max|delta| <= budget + 1e-9`.
    pub fn new(delta: Array3<f64>, budget: f64, stage: StageTag) -> Result<Self> {
        if budget < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "perturbation budget must be non-negative, got {budget}"
            )));
        }
        let norm = linf_norm(&delta);
        if norm > budget + BUDGET_TOL {
            return Err(Error::InvalidArgument(format!(
                "delta exceeds budget: |delta|_inf = {norm} > {budget}"
            )));
        }
        Ok(Self {
            delta,
            budget,
            stage,
        })
    }

    /// All-zero delta matching the given image shape.
    pub fn zeros_like(image: &ImageTensor, budget: f64, stage: StageTag) -> Self {
        Self {
            delta: Array3::zeros(image.dim()),
            budget,
            stage,
        }
    }

    pub fn delta(&self) -> &Array3<f64> {
        &self.delta
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn stage(&self) -> StageTag {
        self.stage
    }

    pub fn linf_norm(&self) -> f64 {
        linf_norm(&self.delta)
    }

    pub fn same_shape(&self, image: &ImageTensor) -> bool {
        self.delta.dim() == image.dim()
    }
}

/// L∞ norm of a pixel field.
pub fn linf_norm(field: &PixelField) -> f64 {
    field.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Clip every element of an image into `[0,1]`. Idempotent.
pub fn clamp_valid_field(field: &PixelField) -> ImageTensor {
    ImageTensor::from_clamped(field.mapv(kernel::clamp01))
}

/// Clip every element of an image into `[0,1]`. Idempotent.
pub fn clamp_valid(image: &ImageTensor) -> ImageTensor {
    clamp_valid_field(image.data())
}

/// Project a raw delta field onto the L∞ ball of radius `eps`.
pub fn project_linf_field(field: &PixelField, eps: f64) -> Result<PixelField> {
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "projection radius must be a finite non-negative real, got {eps}"
        )));
    }
    Ok(field.mapv(|v| kernel::clip_to_ball(v, eps)))
}

/// Project a perturbation onto the L∞ ball of radius `eps`; the result's
/// budget becomes `eps`.
pub fn project_linf(delta: &Perturbation, eps: f64) -> Result<Perturbation> {
    let projected = project_linf_field(&delta.delta, eps)?;
    Ok(Perturbation {
        delta: projected,
        budget: eps,
        stage: delta.stage,
    })
}

/// How PGD initializes its first iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Start from the clean image (reproducible default).
    #[default]
    Clean,
    /// Start from a uniform point inside the ball, projected to feasibility.
    RandomUniform,
}

/// PGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    /// Step size in pixel units.
    pub alpha: f64,
    /// Number of sign-gradient iterations.
    pub iterations: usize,
    pub init_mode: InitMode,
    pub seed: u64,
}

impl PgdConfig {
    pub fn new(alpha: f64, iterations: usize) -> Self {
        Self {
            alpha,
            iterations,
            init_mode: InitMode::Clean,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init(mut self, init_mode: InitMode) -> Self {
        self.init_mode = init_mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "PGD step size must be a positive finite real, got {}",
                self.alpha
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "PGD iteration count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One projected sign-gradient ascent step:
/// `clamp_valid(x_clean + project_linf(x_t + alpha * sign(grad) - x_clean, eps))`.
pub fn pgd_step(
    x_t: &ImageTensor,
    grad: &PixelField,
    alpha: f64,
    x_clean: &ImageTensor,
    eps: f64,
) -> Result<ImageTensor> {
    if grad.dim() != x_t.dim() {
        return Err(Error::ShapeMismatch {
            context: "pgd_step gradient",
            expected: vec![x_t.dim().0, x_t.dim().1, x_t.dim().2],
            found: grad.shape().to_vec(),
        });
    }
    if !x_t.same_shape(x_clean) {
        return Err(Error::ShapeMismatch {
            context: "pgd_step clean image",
            expected: vec![x_t.dim().0, x_t.dim().1, x_t.dim().2],
            found: vec![x_clean.dim().0, x_clean.dim().1, x_clean.dim().2],
        });
    }
    let mut moved = x_t.data() - x_clean.data();
    moved.zip_mut_with(grad, |d, &g| *d += alpha * kernel::sign(g));
    let projected = project_linf_field(&moved, eps)?;
    Ok(clamp_valid_field(&(x_clean.data() + &projected)))
}

/// Gradient oracle: loss and input-gradient at an image.
pub type GradOracle<'a> = dyn FnMut(&ImageTensor) -> Result<(f64, PixelField)> + 'a;

/// Result of a PGD run: the feasible delta and the loss trace.
#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub delta: Perturbation,
    /// `losses[t]` is the loss at iterate `t`; the last entry is the loss at
    /// `x + delta`.
    pub losses: Vec<f64>,
}

impl PgdOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trace has at least one entry")
    }
}

/// Sign-gradient PGD ascent of `oracle` over the L∞ ball of radius `eps`
/// centered at `x`, intersected with the valid pixel range.
///
/// Returns the last iterate's delta (`|delta|_inf <= eps`, `x + delta` in
/// `[0,1]`) and the per-iteration loss trace. With `eps = 0` the ball is a
/// point and the clean loss is reported unchanged.
pub fn pgd_ascent(
    oracle: &mut GradOracle,
    x: &ImageTensor,
    eps: f64,
    cfg: &PgdConfig,
    stage: StageTag,
) -> Result<PgdOutcome> {
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "attack budget must be a finite non-negative real, got {eps}"
        )));
    }
    cfg.validate()?;
    if cfg.alpha > eps && eps > 0.0 {
        log::warn!(
            "PGD step size {} exceeds budget {}; every step will land on the ball boundary",
            cfg.alpha,
            eps
        );
    }

    if eps == 0.0 {
        let (loss, _) = checked_oracle(oracle, x)?;
        return Ok(PgdOutcome {
            delta: Perturbation::zeros_like(x, 0.0, stage),
            losses: vec![loss],
        });
    }

    let mut current = match cfg.init_mode {
        InitMode::Clean => x.clone(),
        InitMode::RandomUniform => {
            let mut rng = rng_from_seed(cfg.seed);
            let noise = Array3::from_shape_simple_fn(x.dim(), || rng.gen_range(-eps..=eps));
            clamp_valid_field(&(x.data() + &noise))
        }
    };

    let mut losses = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        let (loss, grad) = checked_oracle(oracle, &current)?;
        losses.push(loss);
        current = pgd_step(&current, &grad, cfg.alpha, x, eps)?;
    }
    let (final_loss, _) = checked_oracle(oracle, &current)?;
    losses.push(final_loss);

    let delta = Perturbation::new(current.data() - x.data(), eps, stage)?;
    Ok(PgdOutcome { delta, losses })
}

fn checked_oracle(oracle: &mut GradOracle, x: &ImageTensor) -> Result<(f64, PixelField)> {
    let (loss, grad) = oracle(x)?;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure {
            context: "oracle loss".into(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure {
            context: "oracle gradient".into(),
        });
    }
    Ok((loss, grad))
}

/// Allocation of a total L∞ budget between the task stage and the CLIP
/// stage: `eps_task / eps_clip = lambda`, `eps_task + eps_clip = eps_total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetSplit {
    pub eps_task: f64,
    pub eps_clip: f64,
    pub lambda: f64,
    pub eps_total: f64,
}

impl BudgetSplit {
    /// Build a split directly from per-stage budgets (ablation rows).
    /// `lambda` is `+inf` when `eps_clip = 0`.
    pub fn from_parts(eps_task: f64, eps_clip: f64) -> Result<Self> {
        if eps_task < 0.0 || eps_clip < 0.0 {
            return Err(Error::InvalidArgument(
                "stage budgets must be non-negative".into(),
            ));
        }
        let lambda = if eps_clip > 0.0 {
            eps_task / eps_clip
        } else {
            f64::INFINITY
        };
        Ok(Self {
            eps_task,
            eps_clip,
            lambda,
            eps_total: eps_task + eps_clip,
        })
    }

    /// Whether the split follows the canonical configuration (more budget on
    /// the fine-grained stage).
    pub fn is_canonical(&self) -> bool {
        self.lambda > 1.0
    }
}

/// Split `eps_total` at ratio `lambda = eps_task / eps_clip`.
pub fn split_budget(eps_total: f64, lambda: f64) -> Result<BudgetSplit> {
    if eps_total < 0.0 || !eps_total.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "total budget must be a finite non-negative real, got {eps_total}"
        )));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "budget ratio must be a positive finite real, got {lambda}"
        )));
    }
    let eps_task = eps_total * lambda / (1.0 + lambda);
    let eps_clip = eps_total / (1.0 + lambda);
    debug_assert!((eps_task + eps_clip - eps_total).abs() <= 1e-12);
    Ok(BudgetSplit {
        eps_task,
        eps_clip,
        lambda,
        eps_total,
    })
}

/// A composed perturbation together with the adversarial image it produces.
#[derive(Debug, Clone)]
pub struct Composed {
    pub delta: Perturbation,
    pub adversarial: ImageTensor,
}

/// Add the two stage deltas, re-clamp `x + delta` into `[0,1]` and fold the
/// clamp residual into the returned delta, so that quantizing
/// `x + delta` reproduces the stored adversarial image exactly.
pub fn compose_perturbations(
    delta_task: &Perturbation,
    delta_clip: &Perturbation,
    x: &ImageTensor,
) -> Result<Composed> {
    if delta_task.delta.dim() != delta_clip.delta.dim() || !delta_task.same_shape(x) {
        return Err(Error::ShapeMismatch {
            context: "compose_perturbations",
            expected: vec![x.dim().0, x.dim().1, x.dim().2],
            found: delta_task.delta.shape().to_vec(),
        });
    }
    let sum = &delta_task.delta + &delta_clip.delta;
    let adversarial = clamp_valid_field(&(x.data() + &sum));
    let folded = adversarial.data() - x.data();
    let budget = delta_task.budget + delta_clip.budget;
    let delta = Perturbation::new(folded, budget, StageTag::Composed)?;
    Ok(Composed { delta, adversarial })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    const EPS_8: f64 = 8.0 / 255.0;

    fn const_image(v: f64) -> ImageTensor {
        ImageTensor::splat(4, 4, 3, v).unwrap()
    }

    #[test]
    fn clamp_valid_is_identity_on_feasible_images() {
        let img = ImageTensor::zeros(4, 4, 3);
        assert_eq!(clamp_valid(&img).max_abs_diff(&img), 0.0);
    }

    #[test]
    fn clamp_valid_clips_by_definition() {
        let mut field = Array3::zeros((2, 2, 3));
        field[[0, 0, 0]] = 1.2;
        field[[1, 1, 2]] = -0.1;
        let clamped = clamp_valid_field(&field);
        assert_eq!(clamped.data()[[0, 0, 0]], 1.0);
        assert_eq!(clamped.data()[[1, 1, 2]], 0.0);
    }

    #[test]
    fn project_interior_point_is_unchanged() {
        let delta = Perturbation::new(Array3::zeros((4, 4, 3)), 0.0, StageTag::Task).unwrap();
        let projected = project_linf(&delta, EPS_8).unwrap();
        assert_eq!(projected.linf_norm(), 0.0);
        assert_eq!(projected.budget(), EPS_8);
    }

    #[test]
    fn project_clips_boundary_elements() {
        let mut field = Array3::zeros((2, 2, 3));
        field[[0, 0, 0]] = 0.10;
        let projected = project_linf_field(&field, EPS_8).unwrap();
        assert_abs_diff_eq!(projected[[0, 0, 0]], EPS_8, epsilon = 0.0);
    }

    #[test]
    fn project_rejects_negative_radius() {
        let field = Array3::zeros((2, 2, 3));
        assert!(project_linf_field(&field, -0.1).is_err());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(kernel::sign(0.0_f64), 0.0);
        assert_eq!(kernel::sign(3.0_f64), 1.0);
        assert_eq!(kernel::sign(-3.0_f64), -1.0);
        // f32 instantiation of the same kernel
        assert_eq!(kernel::sign(0.0_f32), 0.0);
        assert_eq!(kernel::sign(f64::NAN), 0.0);
    }

    #[test]
    fn pgd_step_zero_gradient_stays_put() {
        let x = const_image(0.5);
        let grad = Array3::zeros((4, 4, 3));
        let next = pgd_step(&x, &grad, 2.0 / 255.0, &x, EPS_8).unwrap();
        assert_eq!(next.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn pgd_step_moves_by_alpha_on_positive_gradient() {
        let x = const_image(0.5);
        let grad = Array3::from_elem((4, 4, 3), 1.0);
        let next = pgd_step(&x, &grad, 2.0 / 255.0, &x, EPS_8).unwrap();
        for &v in next.data() {
            assert_abs_diff_eq!(v, 0.5 + 2.0 / 255.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn pgd_step_rejects_shape_mismatch() {
        let x = const_image(0.5);
        let grad = Array3::zeros((2, 2, 3));
        assert!(pgd_step(&x, &grad, 0.01, &x, EPS_8).is_err());
    }

    /// Fixed positive gradient field: 4 unconstrained steps of 2/255, then the
    /// projection binds and the delta saturates at +8/255.
    #[test]
    fn pgd_saturates_at_budget_on_fixed_gradient() {
        let x = const_image(0.5);
        let mut current = x.clone();
        let grad = Array3::from_elem((4, 4, 3), 0.7);
        for _ in 0..10 {
            current = pgd_step(&current, &grad, 2.0 / 255.0, &x, EPS_8).unwrap();
        }
        for (&v, &x0) in current.data().iter().zip(x.data().iter()) {
            assert_abs_diff_eq!(v - x0, EPS_8, epsilon = 1e-12);
        }
    }

    #[test]
    fn pgd_ascent_zero_budget_returns_clean_loss() {
        let x = const_image(0.25);
        let mut oracle = |img: &ImageTensor| {
            let loss: f64 = img.data().sum();
            Ok((loss, Array3::from_elem(img.dim(), 1.0)))
        };
        let cfg = PgdConfig::new(2.0 / 255.0, 10);
        let out = pgd_ascent(&mut oracle, &x, 0.0, &cfg, StageTag::Task).unwrap();
        assert_eq!(out.delta.linf_norm(), 0.0);
        assert_eq!(out.losses, vec![x.data().sum()]);
    }

    /// Ascent on loss `-|x - x*|^2` with `x*` far outside the ball: every
    /// coordinate saturates at the sign that increases distance from `x*`.
    #[test]
    fn pgd_ascent_separable_quadratic_saturates_away_from_target() {
        let x = const_image(0.5);
        let target = 2.0; // far above the feasible ball
        let mut oracle = |img: &ImageTensor| {
            let loss: f64 = img.data().iter().map(|v| (v - target).powi(2)).sum();
            let grad = img.data().mapv(|v| 2.0 * (v - target));
            Ok((loss, grad))
        };
        let cfg = PgdConfig::new(2.0 / 255.0, 10);
        let out = pgd_ascent(&mut oracle, &x, EPS_8, &cfg, StageTag::Task).unwrap();
        // Gradient points toward -inf (v < target), so ascent drives every
        // coordinate to the -eps face: distance from x* grows.
        for &d in out.delta.delta() {
            assert_abs_diff_eq!(d, -EPS_8, epsilon = 1e-12);
        }
        assert!(out.final_loss() > out.losses[0]);
    }

    #[test]
    fn pgd_ascent_random_init_stays_feasible_and_is_seeded() {
        let x = const_image(0.01);
        let mut oracle = |img: &ImageTensor| {
            let loss: f64 = img.data().sum();
            Ok((loss, Array3::from_elem(img.dim(), 1.0)))
        };
        let cfg = PgdConfig::new(2.0 / 255.0, 3)
            .with_init(InitMode::RandomUniform)
            .with_seed(11);
        let a = pgd_ascent(&mut oracle, &x, EPS_8, &cfg, StageTag::Task).unwrap();
        let b = pgd_ascent(&mut oracle, &x, EPS_8, &cfg, StageTag::Task).unwrap();
        assert_eq!(a.delta.delta(), b.delta.delta());
        assert!(a.delta.linf_norm() <= EPS_8 + BUDGET_TOL);
        let adv = x.data() + a.delta.delta();
        assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pgd_ascent_propagates_numerical_failure() {
        let x = const_image(0.5);
        let mut oracle =
            |img: &ImageTensor| Ok((f64::NAN, Array3::from_elem(img.dim(), 1.0)));
        let cfg = PgdConfig::new(2.0 / 255.0, 2);
        let err = pgd_ascent(&mut oracle, &x, EPS_8, &cfg, StageTag::Task).unwrap_err();
        assert!(matches!(err, Error::NumericalFailure { .. }));
    }

    #[test]
    fn split_budget_canonical_three_to_one() {
        let split = split_budget(8.0 / 255.0, 3.0).unwrap();
        assert_abs_diff_eq!(split.eps_task, 6.0 / 255.0, epsilon = 1e-15);
        assert_abs_diff_eq!(split.eps_clip, 2.0 / 255.0, epsilon = 1e-15);
        assert!((split.eps_task + split.eps_clip - split.eps_total).abs() <= 1e-12);
        assert!(split.is_canonical());
    }

    #[test]
    fn split_budget_zero_total() {
        let split = split_budget(0.0, 3.0).unwrap();
        assert_eq!(split.eps_task, 0.0);
        assert_eq!(split.eps_clip, 0.0);
    }

    #[test]
    fn split_budget_table_row_six_over_255() {
        let split = split_budget(6.0 / 255.0, 2.0).unwrap();
        assert_abs_diff_eq!(split.eps_task, 4.0 / 255.0, epsilon = 1e-15);
        assert_abs_diff_eq!(split.eps_clip, 2.0 / 255.0, epsilon = 1e-15);
    }

    #[test]
    fn split_budget_rejects_non_positive_lambda() {
        assert!(split_budget(8.0 / 255.0, 0.0).is_err());
        assert!(split_budget(8.0 / 255.0, -1.0).is_err());
    }

    #[test]
    fn compose_zero_clip_delta_is_identity() {
        let x = const_image(0.5);
        let mut field = Array3::zeros((4, 4, 3));
        field[[0, 0, 0]] = 6.0 / 255.0;
        let dt = Perturbation::new(field, 6.0 / 255.0, StageTag::Task).unwrap();
        let dc = Perturbation::zeros_like(&x, 2.0 / 255.0, StageTag::Clip);
        let composed = compose_perturbations(&dt, &dc, &x).unwrap();
        // identical up to the one rounding of folding through x + delta
        for (&a, &b) in composed.delta.delta().iter().zip(dt.delta().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn compose_adds_saturated_deltas() {
        let x = const_image(0.5);
        let mut t = Array3::zeros((4, 4, 3));
        t[[0, 0, 0]] = 6.0 / 255.0;
        let mut c = Array3::zeros((4, 4, 3));
        c[[0, 0, 0]] = 2.0 / 255.0;
        let dt = Perturbation::new(t, 6.0 / 255.0, StageTag::Task).unwrap();
        let dc = Perturbation::new(c, 2.0 / 255.0, StageTag::Clip).unwrap();
        let composed = compose_perturbations(&dt, &dc, &x).unwrap();
        assert_abs_diff_eq!(
            composed.delta.delta()[[0, 0, 0]],
            8.0 / 255.0,
            epsilon = 1e-15
        );
        assert_eq!(composed.delta.stage(), StageTag::Composed);
    }

    #[test]
    fn compose_folds_clamp_residual() {
        let x = const_image(0.99);
        let dt = Perturbation::new(
            Array3::from_elem((4, 4, 3), 6.0 / 255.0),
            6.0 / 255.0,
            StageTag::Task,
        )
        .unwrap();
        let dc = Perturbation::new(
            Array3::from_elem((4, 4, 3), 2.0 / 255.0),
            2.0 / 255.0,
            StageTag::Clip,
        )
        .unwrap();
        let composed = compose_perturbations(&dt, &dc, &x).unwrap();
        // 0.99 + 8/255 > 1, so the clamp binds and the folded delta is 1 - x.
        for (&d, &x0) in composed.delta.delta().iter().zip(x.data().iter()) {
            assert_abs_diff_eq!(d, 1.0 - x0, epsilon = 1e-15);
        }
        assert_eq!(composed.adversarial.max_abs_diff(&const_image(1.0)), 0.0);
    }
}
