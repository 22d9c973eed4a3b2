//! Conditional flow matching on the straight noise-to-data path.
//!
//! A latent is a list of streams (audio and video for the joint model, a
//! single stream for toy problems). `x_t = t·x1 + (1−t)·x0` and the regression
//! target is its time derivative `x1 − x0`.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape, Var};
use crate::backbone::BackboneError;
use crate::conditioning::ConditioningError;
use crate::rng::{normal_matrix, Rng};
use crate::speaker::NegativeStrategy;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
}

fn same_shape(a: &Matrix, b: &Matrix) -> Result<(), FlowError> {
    if a.shape() != b.shape() {
        return Err(FlowError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn ot_interpolate(x0: &Matrix, x1: &Matrix, t: f64) -> Result<Matrix, FlowError> {
    same_shape(x0, x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::InvalidConfig(format!("t = {t} outside [0, 1]")));
    }
    Ok(x1.zip_map(x0, |a, b| t * a + (1.0 - t) * b))
}

pub fn target_velocity(x0: &Matrix, x1: &Matrix) -> Result<Matrix, FlowError> {
    same_shape(x0, x1)?;
    Ok(x1.sub(x0))
}

/// `w·v_cond + (1−w)·v_uncond`, so that `w = 1` and `w = 0` return the
/// respective branch exactly.
pub fn cfg_combine(v_cond: &Matrix, v_uncond: &Matrix, w: f64) -> Result<Matrix, FlowError> {
    same_shape(v_cond, v_uncond)?;
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    if w == 0.0 {
        return Ok(v_uncond.clone());
    }
    Ok(v_cond.zip_map(v_uncond, |c, u| w * c + (1.0 - w) * u))
}

/// A velocity field over latent streams, evaluated on a tape so it can be trained.
pub trait VelocityField<C: ?Sized> {
    fn velocity_vars(&self, tape: &mut Tape<'_>, x: &[Var], t: f64, cond: &C) -> Result<Vec<Var>, FlowError>;

    fn velocity(&self, store: &ParamStore, x: &[Matrix], t: f64, cond: &C) -> Result<Vec<Matrix>, FlowError> {
        let mut tape = Tape::new(store);
        let xs: Vec<Var> = x.iter().map(|m| tape.constant(m.clone())).collect();
        let vs = self.velocity_vars(&mut tape, &xs, t, cond)?;
        Ok(vs.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

/// The random part of one flow-matching sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw {
    pub t: f64,
    pub x0: Vec<Matrix>,
}

/// `t ~ U[0, 1]`, then standard-normal noise per stream, in stream order.
pub fn draw_flow(rng: &mut Rng, shapes: &[(usize, usize)]) -> FlowDraw {
    let t = rng.random::<f64>();
    let x0 = shapes.iter().map(|&(r, c)| normal_matrix(rng, r, c, 1.0)).collect();
    FlowDraw { t, x0 }
}

/// Sum over streams of the per-stream mean squared error, on `tape`.
pub fn sample_loss<C: ?Sized, F: VelocityField<C> + ?Sized>(
    field: &F,
    tape: &mut Tape<'_>,
    x1: &[Matrix],
    cond: &C,
    draw: &FlowDraw,
) -> Result<Var, FlowError> {
    if x1.len() != draw.x0.len() {
        return Err(FlowError::ShapeMismatch(format!(
            "{} data streams, {} noise streams",
            x1.len(),
            draw.x0.len()
        )));
    }
    let mut xt = Vec::with_capacity(x1.len());
    let mut targets = Vec::with_capacity(x1.len());
    for (a, b) in x1.iter().zip(&draw.x0) {
        xt.push(tape.constant(ot_interpolate(b, a, draw.t)?));
        targets.push(target_velocity(b, a)?);
    }
    let v = field.velocity_vars(tape, &xt, draw.t, cond)?;
    if v.len() != targets.len() {
        return Err(FlowError::ShapeMismatch("field returned a different stream count".into()));
    }
    let mut total: Option<Var> = None;
    for (vi, ui) in v.into_iter().zip(&targets) {
        if tape.shape(vi) != ui.shape() {
            return Err(FlowError::ShapeMismatch(format!(
                "velocity {:?} vs target {:?}",
                tape.shape(vi),
                ui.shape()
            )));
        }
        let l = tape.mse(vi, ui);
        total = Some(match total {
            Some(acc) => tape.add(acc, l),
            None => l,
        });
    }
    total.ok_or_else(|| FlowError::ShapeMismatch("no streams".into()))
}

/// One training example: data streams and their conditioning.
pub type FlowItem<'a, C> = (&'a [Matrix], &'a C);

fn shapes(x1: &[Matrix]) -> Vec<(usize, usize)> {
    x1.iter().map(Matrix::shape).collect()
}

/// Batch-mean loss and gradients for explicit draws.
pub fn cfm_loss_with_draws<C: ?Sized, F: VelocityField<C> + ?Sized>(
    field: &F,
    store: &ParamStore,
    batch: &[FlowItem<'_, C>],
    draws: &[FlowDraw],
    with_grads: bool,
) -> Result<(f64, Option<Gradients>), FlowError> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(FlowError::ShapeMismatch(format!(
            "{} items, {} draws",
            batch.len(),
            draws.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = with_grads.then(|| Gradients::zeros_like(store));
    for ((x1, cond), draw) in batch.iter().zip(draws) {
        let mut tape = Tape::new(store);
        let l = sample_loss(field, &mut tape, x1, *cond, draw)?;
        loss += tape.scalar(l);
        if let Some(g) = grads.as_mut() {
            g.merge(&tape.backward(l));
        }
    }
    let scale = 1.0 / batch.len() as f64;
    if let Some(g) = grads.as_mut() {
        g.scale(scale);
    }
    Ok((loss * scale, grads))
}

/// Draws `t` and noise per item from `rng` (in batch order) and returns the batch-mean loss.
pub fn cfm_loss<C: ?Sized, F: VelocityField<C> + ?Sized>(
    field: &F,
    store: &ParamStore,
    batch: &[FlowItem<'_, C>],
    rng: &mut Rng,
) -> Result<f64, FlowError> {
    let draws: Vec<FlowDraw> = batch.iter().map(|(x1, _)| draw_flow(rng, &shapes(x1))).collect();
    Ok(cfm_loss_with_draws(field, store, batch, &draws, false)?.0)
}

pub fn cfm_loss_and_grads<C: ?Sized, F: VelocityField<C> + ?Sized>(
    field: &F,
    store: &ParamStore,
    batch: &[FlowItem<'_, C>],
    rng: &mut Rng,
) -> Result<(f64, Gradients), FlowError> {
    let draws: Vec<FlowDraw> = batch.iter().map(|(x1, _)| draw_flow(rng, &shapes(x1))).collect();
    let (loss, grads) = cfm_loss_with_draws(field, store, batch, &draws, true)?;
    Ok((loss, grads.expect("requested gradients")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_w: f64,
    pub negative_strategy: NegativeStrategy,
    /// `[audio, video]` scales overriding `guidance_w`.
    pub per_modality_w: Option<[f64; 2]>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            guidance_w: 1.0,
            negative_strategy: NegativeStrategy::Zero,
            per_modality_w: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.steps == 0 {
            return Err(FlowError::InvalidConfig("steps must be positive".into()));
        }
        let ws = std::iter::once(self.guidance_w).chain(self.per_modality_w.into_iter().flatten());
        for w in ws {
            if !w.is_finite() || w < 0.0 {
                return Err(FlowError::InvalidConfig(format!("guidance scale {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Guidance scale of stream `i`.
    pub fn w(&self, i: usize) -> f64 {
        match self.per_modality_w {
            Some(ws) if i < 2 => ws[i],
            _ => self.guidance_w,
        }
    }

    fn needs_unconditional(&self, streams: usize) -> bool {
        (0..streams).any(|i| self.w(i) != 1.0)
    }
}

/// Integrates from `x` at `t = 0` to `t = 1` with guided Euler steps.
pub fn euler_integrate<C: ?Sized, F: VelocityField<C> + ?Sized>(
    field: &F,
    store: &ParamStore,
    mut x: Vec<Matrix>,
    cond: &C,
    neg_cond: &C,
    cfg: &SamplerConfig,
) -> Result<Vec<Matrix>, FlowError> {
    cfg.validate()?;
    let dt = cfg.dt();
    let guided = cfg.needs_unconditional(x.len());
    for k in 0..cfg.steps {
        let t = k as f64 * dt;
        let vc = field.velocity(store, &x, t, cond)?;
        let v = if guided {
            let vu = field.velocity(store, &x, t, neg_cond)?;
            vc.iter()
                .zip(&vu)
                .enumerate()
                .map(|(i, (c, u))| cfg_combine(c, u, cfg.w(i)))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            vc
        };
        if v.len() != x.len() {
            return Err(FlowError::ShapeMismatch("field returned a different stream count".into()));
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            same_shape(xi, vi)?;
            xi.axpy(dt, vi);
        }
    }
    Ok(x)
}

/// Standard-normal start for each stream, drawn in stream order.
pub fn initial_noise(rng: &mut Rng, shapes: &[(usize, usize)]) -> Vec<Matrix> {
    shapes.iter().map(|&(r, c)| normal_matrix(rng, r, c, 1.0)).collect()
}

pub fn euler_sample<C: ?Sized, F: VelocityField<C> + ?Sized>(
    field: &F,
    store: &ParamStore,
    shapes: &[(usize, usize)],
    cond: &C,
    neg_cond: &C,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<Matrix>, FlowError> {
    euler_integrate(field, store, initial_noise(rng, shapes), cond, neg_cond, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic gradients of `loss` against central differences at
/// `samples` randomly chosen scalars (without replacement where possible).
pub fn finite_diff_gradcheck(
    store: &mut ParamStore,
    loss: impl Fn(&mut Tape<'_>) -> Result<Var, FlowError>,
    samples: usize,
    eps: f64,
    rng: &mut Rng,
) -> Result<GradcheckReport, FlowError> {
    if !(eps > 0.0) {
        return Err(FlowError::InvalidConfig(format!("gradcheck eps must be > 0, got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)
    };
    let mut offsets = Vec::with_capacity(store.len());
    let mut total = 0;
    for id in store.ids() {
        offsets.push(total);
        total += store.get(id).len();
    }
    if total == 0 {
        return Err(FlowError::InvalidConfig("no parameters to check".into()));
    }
    let picks = sample_indices(rng, total, samples.min(total)).into_vec();
    let eval = |store: &ParamStore| -> Result<f64, FlowError> {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        Ok(tape.scalar(l))
    };
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for flat in picks {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let id = ParamId(p);
        let idx = flat - offsets[p];
        let orig = store.get(id).as_slice()[idx];
        store.get_mut(id).as_mut_slice()[idx] = orig + eps;
        let plus = eval(store)?;
        store.get_mut(id).as_mut_slice()[idx] = orig - eps;
        let minus = eval(store)?;
        store.get_mut(id).as_mut_slice()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.get(id).map_or(0.0, |g| g.as_slice()[idx]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.name(id).to_string(), idx, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::seeded;

    /// Returns `−x` for every stream.
    struct Decay;
    impl VelocityField<()> for Decay {
        fn velocity_vars(&self, tape: &mut Tape<'_>, x: &[Var], _t: f64, _c: &()) -> Result<Vec<Var>, FlowError> {
            Ok(x.iter().map(|&v| tape.scale(v, -1.0)).collect())
        }
    }

    /// Returns a fixed matrix per stream (conditioning selects which).
    struct Constant(Vec<Matrix>);
    impl VelocityField<usize> for Constant {
        fn velocity_vars(&self, tape: &mut Tape<'_>, _x: &[Var], _t: f64, c: &usize) -> Result<Vec<Var>, FlowError> {
            Ok(vec![tape.constant(self.0[*c].clone())])
        }
    }

    #[test]
    fn interpolation_examples() {
        let x0 = Matrix::from_rows(&[vec![0.0, 1.0]]);
        let x1 = Matrix::from_rows(&[vec![2.0, 3.0]]);
        assert!(ot_interpolate(&x0, &x1, 0.0).unwrap().bit_eq(&x0));
        assert!(ot_interpolate(&x0, &x1, 1.0).unwrap().bit_eq(&x1));
        assert_eq!(ot_interpolate(&x0, &x1, 0.5).unwrap().get(0, 0), 1.0);
        assert_eq!(target_velocity(&x0, &x1).unwrap(), Matrix::from_rows(&[vec![2.0, 2.0]]));
        assert_eq!(target_velocity(&x1, &x1).unwrap(), Matrix::zeros(1, 2));
        assert!(matches!(
            ot_interpolate(&x0, &Matrix::zeros(2, 2), 0.5),
            Err(FlowError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn cfg_examples() {
        let c = Matrix::filled(2, 2, 2.0);
        let u = Matrix::zeros(2, 2);
        assert!(cfg_combine(&c, &u, 1.0).unwrap().bit_eq(&c));
        assert!(cfg_combine(&c, &u, 0.0).unwrap().bit_eq(&u));
        assert_eq!(cfg_combine(&c, &u, 3.0).unwrap(), Matrix::filled(2, 2, 6.0));
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let c = Matrix::from_rows(&[vec![0.25, -0.5]]);
        let field = Constant(vec![c.clone()]);
        let store = ParamStore::new();
        let start = vec![Matrix::from_rows(&[vec![1.0, 1.0]])];
        let out = euler_integrate(&field, &store, start.clone(), &0, &0, &SamplerConfig::default()).unwrap();
        assert!(out[0].max_abs_diff(&start[0].add(&c)) < 1e-12);
    }

    #[test]
    fn unit_guidance_ignores_negative_branch() {
        let field = Constant(vec![Matrix::filled(1, 2, 1.0), Matrix::filled(1, 2, -40.0)]);
        let store = ParamStore::new();
        let start = vec![Matrix::zeros(1, 2)];
        let cfg = SamplerConfig::default();
        let guided = euler_integrate(&field, &store, start.clone(), &0, &1, &cfg).unwrap();
        let plain = euler_integrate(&field, &store, start, &0, &0, &cfg).unwrap();
        assert!(guided[0].bit_eq(&plain[0]));
    }

    #[test]
    fn per_modality_scales() {
        let cfg = SamplerConfig {
            guidance_w: 2.0,
            per_modality_w: Some([3.0, 1.0]),
            ..SamplerConfig::default()
        };
        assert_eq!((cfg.w(0), cfg.w(1), cfg.w(2)), (3.0, 1.0, 2.0));
        assert!(SamplerConfig { steps: 0, ..cfg.clone() }.validate().is_err());
        assert!(SamplerConfig {
            guidance_w: f64::NAN,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn decay_endpoint() {
        let store = ParamStore::new();
        let out = euler_integrate(
            &Decay,
            &store,
            vec![Matrix::filled(1, 1, 1.0)],
            &(),
            &(),
            &SamplerConfig::default(),
        )
        .unwrap();
        assert!((out[0].get(0, 0) - 0.358486).abs() < 1e-6);
    }

    #[test]
    fn gradcheck_rejects_nonpositive_eps() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::filled(1, 1, 1.0));
        let r = finite_diff_gradcheck(
            &mut store,
            |tape| {
                let w = tape.param(ParamId(0));
                Ok(tape.mse(w, &Matrix::zeros(1, 1)))
            },
            1,
            0.0,
            &mut seeded(1),
        );
        assert!(matches!(r, Err(FlowError::InvalidConfig(_))));
    }

    #[test]
    fn gradcheck_on_linear_model() {
        let mut store = ParamStore::new();
        let mut rng = seeded(2);
        let w = store.add("w", normal_matrix(&mut rng, 3, 2, 1.0));
        let x = normal_matrix(&mut rng, 5, 3, 1.0);
        let y = normal_matrix(&mut rng, 5, 2, 1.0);
        let report = finite_diff_gradcheck(
            &mut store,
            |tape| {
                let xv = tape.constant(x.clone());
                let wv = tape.param(w);
                let out = tape.matmul(xv, wv);
                Ok(tape.mse(out, &y))
            },
            6,
            1e-4,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.checked, 6);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    proptest! {
        #[test]
        fn endpoints_and_guidance_identity(seed in 0u64..1000, w in -5.0f64..5.0, t in 0.0f64..=1.0) {
            let mut rng = seeded(seed);
            let x0 = normal_matrix(&mut rng, 3, 4, 1.0);
            let x1 = normal_matrix(&mut rng, 3, 4, 1.0);
            prop_assert!(ot_interpolate(&x0, &x1, 0.0).unwrap().bit_eq(&x0));
            prop_assert!(ot_interpolate(&x0, &x1, 1.0).unwrap().bit_eq(&x1));
            let xt = ot_interpolate(&x0, &x1, t).unwrap();
            prop_assert!(xt.max_abs_diff(&x0.add(&target_velocity(&x0, &x1).unwrap().scale(t))) < 1e-12);
            prop_assert!(cfg_combine(&x0, &x0, w).unwrap().max_abs_diff(&x0) < 1e-12);
        }
    }
}
