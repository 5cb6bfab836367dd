//! The mean-teacher training loop.
//!
//! Each step: sample the teacher with MC dropout to set the regularization
//! weights, build the teacher's consistency target, take one Adam step on
//! the student, then move the teacher towards the student by EMA.

use serde::{Deserialize, Serialize};

use crate::autodiff::{volume_tensor, Tensor};
use crate::error::{Error, Result};
use crate::losses::{consistency_loss, sim_loss, smoothness_loss, total_loss, MindConfig};
use crate::regnet::{
    ema_update, forward, init_params, predict, ArchConfig, DropoutPlan, ModelParams,
};
use crate::uncertainty::{
    adaptive_weights, mc_sample, uncertainty_maps, AdaptiveWeights, McSamples,
};
use crate::volume::Volume;
use crate::warp::warp_trilinear;

/// How the two regularization weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    /// Adaptive smoothness and adaptive consistency.
    #[serde(rename = "AS_ATC")]
    AsAtc,
    /// Adaptive smoothness, no consistency term.
    #[serde(rename = "AS")]
    As,
    /// Fixed smoothness 3 and consistency 0.5.
    #[serde(rename = "S_TC")]
    STc,
    /// Adaptive smoothness, fixed consistency 0.5.
    #[serde(rename = "AS_TC")]
    AsTc,
    /// Constant smoothness weight, no consistency term.
    #[serde(rename = "FIXED")]
    Fixed(f64),
}

impl Mode {
    pub fn is_adaptive(self) -> bool {
        matches!(self, Mode::AsAtc | Mode::As | Mode::AsTc)
    }
}

const FIXED_LAMBDA_PHI: f64 = 3.0;
const FIXED_LAMBDA_C: f64 = 0.5;
const LR_DECAY: f64 = 0.9;

/// Source of the teacher's warped image used by the consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherTarget {
    /// One deterministic pass with dropout disabled.
    DropoutOff,
    /// Mean of the MC warped images of the current step.
    McMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub alpha_ema: f64,
    pub n_mc: usize,
    pub k1: f64,
    pub k2: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub eps_phi: f64,
    pub eps_app: f64,
    pub dropout_rate: f64,
    pub mode: Mode,
    pub seed: u64,
    pub arch: ArchConfig,
    pub mind: MindConfig,
    /// Dropout in the student's training pass.
    pub student_dropout: bool,
    pub teacher_target: TeacherTarget,
    /// Multiply the learning rate by 0.9 every this many steps.
    pub lr_decay_interval: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alpha_ema: 0.99,
            n_mc: 6,
            k1: 5.0,
            k2: 1.0,
            tau1: 0.10,
            tau2: 0.01,
            eps_phi: 0.01,
            eps_app: 0.01,
            dropout_rate: 0.2,
            mode: Mode::AsAtc,
            seed: 0,
            arch: ArchConfig::default(),
            mind: MindConfig::default(),
            student_dropout: true,
            teacher_target: TeacherTarget::DropoutOff,
            lr_decay_interval: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.steps == 0 {
            return fail("steps must be >= 1".into());
        }
        let non_negative = [
            ("lr", self.lr),
            ("k1", self.k1),
            ("k2", self.k2),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("adam_eps", self.adam_eps),
            ("eps_phi", self.eps_phi),
            ("eps_app", self.eps_app),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("alpha_ema", self.alpha_ema),
            ("dropout_rate", self.dropout_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if self.n_mc < 2 {
            return fail(format!("n_mc must be >= 2, got {}", self.n_mc));
        }
        if let Mode::Fixed(l) = self.mode {
            if !(l >= 0.0 && l.is_finite()) {
                return fail(format!("FIXED weight must be finite and >= 0, got {l}"));
            }
        }
        if self.lr_decay_interval == Some(0) {
            return fail("lr_decay_interval must be >= 1".into());
        }
        self.mind.validate()?;
        self.effective_arch().validate()
    }

    /// The architecture with this configuration's dropout rate.
    pub fn effective_arch(&self) -> ArchConfig {
        ArchConfig {
            dropout_rate: self.dropout_rate as f32,
            ..self.arch
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.lr_decay_interval {
            Some(k) => self.lr * LR_DECAY.powi((step / k) as i32),
            None => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamMoments {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let z: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        AdamMoments { m: z.clone(), v: z }
    }

    pub fn first(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second(&self) -> &[Vec<f64>] {
        &self.v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update; `t` counts from 1.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor<f32>],
    moments: &mut AdamMoments,
    hp: &AdamHyper,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("Adam step counter starts at 1".into()));
    }
    if grads.len() != params.len() || moments.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "Adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.m.len()
        )));
    }
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        if p.shape() != g.shape() || m.len() != p.len() {
            return Err(Error::Shape(format!(
                "Adam: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = gv as f64;
            *mv = hp.beta1 * *mv + (1.0 - hp.beta1) * g;
            *vv = hp.beta2 * *vv + (1.0 - hp.beta2) * g * g;
            let update = hp.lr * (*mv / c1) / ((*vv / c2).sqrt() + hp.eps);
            *pv = (*pv as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub moments: AdamMoments,
    /// Number of completed steps.
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let student = init_params(&cfg.effective_arch(), cfg.seed)?;
        Ok(TrainState {
            teacher: student.clone(),
            moments: AdamMoments::zeros_like(&student),
            student,
            step: 0,
        })
    }
}

/// Diagnostics of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lambda_phi: f64,
    pub lambda_c: f64,
    pub loss_total: f64,
    pub loss_sim: f64,
    pub loss_smooth: f64,
    pub loss_cons: f64,
    /// Zero in modes that do not sample the teacher.
    pub frac_over_tau1: f64,
    pub frac_over_tau2: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str =
        "step,lambda_phi,lambda_c,loss_total,loss_sim,loss_smooth,loss_cons,frac_over_tau1,frac_over_tau2,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lambda_phi,
            self.lambda_c,
            self.loss_total,
            self.loss_sim,
            self.loss_smooth,
            self.loss_cons,
            self.frac_over_tau1,
            self.frac_over_tau2,
            self.grad_norm
        )
    }
}

/// Weights for one step given the teacher's MC samples (`None` in fixed modes).
pub fn step_weights(cfg: &TrainConfig, samples: Option<&McSamples>) -> Result<AdaptiveWeights> {
    let fixed = |lambda_phi, lambda_c| AdaptiveWeights {
        lambda_phi,
        lambda_c,
        frac_phi: 0.0,
        frac_app: 0.0,
    };
    let adaptive = |s: Option<&McSamples>| -> Result<AdaptiveWeights> {
        let s =
            s.ok_or_else(|| Error::Contract(format!("mode {:?} needs MC samples", cfg.mode)))?;
        let maps = uncertainty_maps(s, cfg.eps_phi, cfg.eps_app)?;
        adaptive_weights(&maps, cfg.k1, cfg.k2, cfg.tau1, cfg.tau2)
    };
    Ok(match cfg.mode {
        Mode::AsAtc => adaptive(samples)?,
        Mode::As => AdaptiveWeights {
            lambda_c: 0.0,
            ..adaptive(samples)?
        },
        Mode::AsTc => AdaptiveWeights {
            lambda_c: FIXED_LAMBDA_C,
            ..adaptive(samples)?
        },
        Mode::STc => fixed(FIXED_LAMBDA_PHI, FIXED_LAMBDA_C),
        Mode::Fixed(l) => fixed(l, 0.0),
    })
}

/// Seed of the MC passes at step `s`.
pub fn mc_seed(cfg: &TrainConfig, s: usize) -> u64 {
    cfg.seed ^ s as u64
}

fn student_seed(cfg: &TrainConfig, s: usize) -> u64 {
    cfg.seed ^ s as u64 ^ 0x5
}

fn mean_image(images: &[Volume]) -> Result<Volume> {
    let n = images.len() as f64;
    let data = (0..images[0].data().len())
        .map(|i| (images.iter().map(|v| v.data()[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Volume::new(*images[0].grid(), 1, data)
}

/// Reports a network pass that overflowed as a divergence at `step`.
fn diverged(step: usize, component: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFiniteData(_) => Error::NonFinite {
            step,
            component: component.into(),
        },
        e => e,
    }
}

fn finite(value: f64, step: usize, component: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            step,
            component: component.into(),
        })
    }
}

/// One training step on `(fixed, moving)`. The configuration is not
/// re-validated here; [`train`] does that once.
pub fn train_step(
    state: &mut TrainState,
    fixed: &Volume,
    moving: &Volume,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    let s = state.step;
    let arch = cfg.effective_arch();

    let need_samples = cfg.mode.is_adaptive() || cfg.teacher_target == TeacherTarget::McMean;
    let samples = if need_samples {
        Some(
            mc_sample(
                &arch,
                &state.teacher,
                fixed,
                moving,
                cfg.n_mc,
                mc_seed(cfg, s),
            )
            .map_err(diverged(s, "teacher field"))?,
        )
    } else {
        None
    };
    let weights = step_weights(cfg, samples.as_ref())?;

    let teacher_warped = match (cfg.teacher_target, &samples) {
        (TeacherTarget::McMean, Some(samples)) => mean_image(samples.warped())?,
        _ => {
            let phi_t = predict(&arch, &state.teacher, fixed, moving, DropoutPlan::Off)
                .map_err(diverged(s, "teacher field"))?;
            warp_trilinear(moving, &phi_t)?
        }
    };

    let plan = if cfg.student_dropout {
        DropoutPlan::Stochastic(student_seed(cfg, s))
    } else {
        DropoutPlan::Off
    };
    let mut fw = forward(&arch, &state.student, fixed, moving, plan)
        .map_err(diverged(s, "student field"))?;
    let g = &mut fw.graph;
    let warped = g.warp(fw.moving_node, fw.field_node)?;
    let sim = sim_loss(g, fw.fixed_node, warped, &cfg.mind)?;
    let smooth = smoothness_loss(g, fw.field_node)?;
    let cons = consistency_loss(g, warped, &volume_tensor(&teacher_warped))?;
    let total = total_loss(
        g,
        sim,
        smooth,
        cons,
        weights.lambda_phi as f32,
        weights.lambda_c as f32,
    )?;
    let value = |id| g.value(id).item() as f64;
    let loss_sim = finite(value(sim), s, "similarity loss")?;
    let loss_smooth = finite(value(smooth), s, "smoothness loss")?;
    let loss_cons = finite(value(cons), s, "consistency loss")?;
    let loss_total = finite(value(total), s, "total loss")?;

    g.backward(total)?;
    let grads: Vec<Tensor<f32>> = fw
        .param_nodes
        .iter()
        .zip(state.student.tensors())
        .map(|(&id, p)| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    let grad_norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    let grad_norm = finite(grad_norm, s, "gradient")?;

    let hp = AdamHyper {
        lr: cfg.lr_at(s),
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    adam_step(
        &mut state.student,
        &grads,
        &mut state.moments,
        &hp,
        s as u64 + 1,
    )?;
    ema_update(&mut state.teacher, &state.student, cfg.alpha_ema)?;
    state.step += 1;

    Ok(StepRecord {
        step: s,
        lambda_phi: weights.lambda_phi,
        lambda_c: weights.lambda_c,
        loss_total,
        loss_sim,
        loss_smooth,
        loss_cons,
        frac_over_tau1: weights.frac_phi,
        frac_over_tau2: weights.frac_app,
        grad_norm,
    })
}

/// Training result: the final student (used for inference) and the log.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelParams,
    pub teacher: ModelParams,
    pub log: Vec<StepRecord>,
}

/// Trains on `pairs` of `(fixed, moving)`, cycling through them, and calls
/// `on_step` after every completed step.
pub fn train_with(
    cfg: &TrainConfig,
    pairs: &[(Volume, Volume)],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Validation("training needs at least one pair".into()));
    }
    let mut state = TrainState::new(cfg)?;
    let mut log = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        let (fixed, moving) = &pairs[s % pairs.len()];
        let rec = train_step(&mut state, fixed, moving, cfg)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(TrainOutput {
        model: state.student,
        teacher: state.teacher,
        log,
    })
}

pub fn train(cfg: &TrainConfig, pairs: &[(Volume, Volume)]) -> Result<TrainOutput> {
    train_with(cfg, pairs, |_| {})
}
