use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_both_classes, CalibrationRecord, Calibrator};
use crate::container::{Decoder, Encoder, ModelKind, Persist};
use crate::nn::{
    bce_loss, logit, Activation, BackwardScratch, ForwardTrace, MlpGrads, MlpParams,
    OptimizerState,
};
use crate::{Error, Result};

/// Shape of the context sub-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ContextArch {
    /// Context features are fed to the monotone head unchanged.
    Identity,
    /// Dense layers of the given widths; relu on hidden layers, identity on
    /// the final embedding layer.
    Mlp { layers: Vec<usize> },
}

impl Default for ContextArch {
    fn default() -> Self {
        ContextArch::Mlp {
            layers: vec![32, 16, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlplattConfig {
    pub context: ContextArch,
    /// Hidden widths of the monotone head; a final 1-unit sigmoid layer is
    /// always appended.
    pub mono_hidden: Vec<usize>,
    pub theta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate is halved after an epoch whose loss improved by less
    /// than this amount.
    pub plateau_tolerance: f64,
    /// Step in the standardised score used to difference the backward pass.
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for MlplattConfig {
    fn default() -> Self {
        Self {
            context: ContextArch::default(),
            mono_hidden: vec![8, 8, 8],
            theta: 1.0,
            epochs: 20,
            batch_size: 1024,
            lr: 1e-3,
            plateau_tolerance: 1e-5,
            fd_step: 1e-4,
            seed: 0,
        }
    }
}

impl MlplattConfig {
    fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::config(format!("theta must be >= 0, got {}", self.theta)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::config("lr and fd_step must be positive"));
        }
        if let ContextArch::Mlp { layers } = &self.context {
            if layers.is_empty() || layers.contains(&0) {
                return Err(Error::config("context layers must be non-empty and positive"));
            }
        }
        if self.mono_hidden.contains(&0) {
            return Err(Error::config("mono layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextNet {
    Identity { dim: usize },
    Mlp(MlpParams),
}

impl ContextNet {
    pub fn in_dim(&self) -> usize {
        match self {
            ContextNet::Identity { dim } => *dim,
            ContextNet::Mlp(net) => net.in_dim(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            ContextNet::Identity { dim } => *dim,
            ContextNet::Mlp(net) => net.out_dim(),
        }
    }
}

/// Context-aware monotone calibrator `c = mono(concat(context(x), r))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlplattModel {
    context: ContextNet,
    mono: MlpParams,
    theta: f64,
    /// The head sees `(r - r_shift) / r_scale`.
    r_shift: f64,
    r_scale: f64,
}

#[derive(Default)]
struct Workspace {
    ctx_trace: ForwardTrace,
    mono_trace: ForwardTrace,
    mono_input: Vec<f64>,
    scratch: BackwardScratch,
}

impl MlplattModel {
    pub fn new(context: ContextNet, mono: MlpParams, theta: f64) -> Result<Self> {
        Self::with_score_transform(context, mono, theta, 0.0, 1.0)
    }

    pub fn with_score_transform(
        context: ContextNet,
        mono: MlpParams,
        theta: f64,
        r_shift: f64,
        r_scale: f64,
    ) -> Result<Self> {
        if mono.in_dim() != context.embedding_dim() + 1 {
            return Err(Error::Shape {
                layer: 0,
                expected: context.embedding_dim() + 1,
                got: mono.in_dim(),
            });
        }
        if mono.out_dim() != 1 {
            return Err(Error::Dimension(format!(
                "mono head must have one output, has {}",
                mono.out_dim()
            )));
        }
        if mono.layers().last().map(|l| l.activation()) != Some(Activation::Sigmoid) {
            return Err(Error::input("mono head must end in a sigmoid layer"));
        }
        if !(r_scale > 0.0 && r_scale.is_finite() && r_shift.is_finite()) {
            return Err(Error::input("score transform must be finite with positive scale"));
        }
        Ok(Self {
            context,
            mono,
            theta,
            r_shift,
            r_scale,
        })
    }

    pub fn context(&self) -> &ContextNet {
        &self.context
    }

    pub fn mono(&self) -> &MlpParams {
        &self.mono
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn ctx_dim(&self) -> usize {
        self.context.in_dim()
    }

    /// Runs the context net and builds the head input in `ws.mono_input`.
    fn prepare(&self, r: f64, ctx: &[f64], ws: &mut Workspace) -> Result<()> {
        if ctx.len() != self.ctx_dim() {
            return Err(Error::Shape {
                layer: 0,
                expected: self.ctx_dim(),
                got: ctx.len(),
            });
        }
        ws.mono_input.clear();
        match &self.context {
            ContextNet::Identity { .. } => ws.mono_input.extend_from_slice(ctx),
            ContextNet::Mlp(net) => {
                net.forward_into(ctx, &mut ws.ctx_trace)?;
                ws.mono_input.extend_from_slice(ws.ctx_trace.output());
            }
        }
        ws.mono_input.push((r - self.r_shift) / self.r_scale);
        Ok(())
    }

    fn run(&self, r: f64, ctx: &[f64], ws: &mut Workspace) -> Result<f64> {
        self.prepare(r, ctx, ws)?;
        self.mono.forward_into(&ws.mono_input, &mut ws.mono_trace)?;
        Ok(ws.mono_trace.output()[0])
    }

    pub fn apply(&self, r: f64, ctx: &[f64]) -> Result<f64> {
        self.run(r, ctx, &mut Workspace::default())
    }

    /// Exact `∂c/∂r` from the backward pass.
    pub fn input_derivative(&self, r: f64, ctx: &[f64]) -> Result<f64> {
        let mut ws = Workspace::default();
        self.derivative_with(r, ctx, &mut ws)
    }

    fn derivative_with(&self, r: f64, ctx: &[f64], ws: &mut Workspace) -> Result<f64> {
        self.run(r, ctx, ws)?;
        let mut sink = MlpGrads::zeros_like(&self.mono);
        self.mono
            .backward_accumulate(&ws.mono_trace, &[1.0], 0.0, &mut sink, &mut ws.scratch)?;
        Ok(ws.scratch.input_grad()[ws.mono_input.len() - 1] / self.r_scale)
    }

    /// Derivatives `∂c/∂r` for every record.
    pub fn derivatives(&self, records: &[CalibrationRecord]) -> Result<Vec<f64>> {
        let mut ws = Workspace::default();
        records
            .iter()
            .map(|rec| self.derivative_with(rec.r, &rec.ctx, &mut ws))
            .collect()
    }
}

impl Calibrator for MlplattModel {
    fn predict(&self, record: &CalibrationRecord) -> Result<f64> {
        self.apply(record.r, &record.ctx)
    }

    fn predict_all(&self, records: &[CalibrationRecord]) -> Result<Vec<f64>> {
        let mut ws = Workspace::default();
        records
            .iter()
            .map(|rec| self.run(rec.r, &rec.ctx, &mut ws))
            .collect()
    }
}

/// Mean hinge `max(0, -d)` over the derivatives.
pub fn monotonicity_penalty(derivatives: &[f64]) -> Result<f64> {
    if derivatives.is_empty() {
        return Err(Error::input("monotonicity penalty over an empty set"));
    }
    Ok(derivatives.iter().map(|&d| (-d).max(0.0)).sum::<f64>() / derivatives.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Full training objective at initialisation and after the last epoch.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean batch objective per epoch.
    pub epoch_losses: Vec<f64>,
    pub final_lr: f64,
    /// Share of training records with negative derivative after fitting.
    pub violation_rate: f64,
}

pub fn fit_mlplatt(records: &[CalibrationRecord], config: &MlplattConfig) -> Result<MlplattModel> {
    fit_mlplatt_with_report(records, config).map(|(m, _)| m)
}

fn objective(model: &MlplattModel, records: &[CalibrationRecord]) -> Result<(f64, f64)> {
    let mut ws = Workspace::default();
    let (mut bce, mut hinge, mut negative) = (0.0, 0.0, 0usize);
    for rec in records {
        let d = model.derivative_with(rec.r, &rec.ctx, &mut ws)?;
        let c = ws.mono_trace.output()[0];
        bce += bce_loss(c, rec.label())?.0;
        if d < 0.0 {
            hinge -= d;
            negative += 1;
        }
    }
    let n = records.len() as f64;
    Ok((bce / n + model.theta * hinge / n, negative as f64 / n))
}

pub fn fit_mlplatt_with_report(
    records: &[CalibrationRecord],
    config: &MlplattConfig,
) -> Result<(MlplattModel, FitReport)> {
    config.validate()?;
    let rate = check_both_classes(records)?;
    let ctx_dim = records[0].ctx.len();
    if let Some(bad) = records.iter().find(|r| r.ctx.len() != ctx_dim) {
        return Err(Error::Dimension(format!(
            "context dimension {} differs from {ctx_dim}",
            bad.ctx.len()
        )));
    }
    if records.iter().any(|r| !r.r.is_finite() || r.ctx.iter().any(|x| !x.is_finite())) {
        return Err(Error::Fit("non-finite calibration input".into()));
    }

    let n = records.len() as f64;
    let r_shift = records.iter().map(|r| r.r).sum::<f64>() / n;
    let var = records.iter().map(|r| (r.r - r_shift).powi(2)).sum::<f64>() / n;
    let r_scale = if var > 0.0 { var.sqrt() } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let context = match &config.context {
        ContextArch::Identity => ContextNet::Identity { dim: ctx_dim },
        ContextArch::Mlp { layers } => {
            if ctx_dim == 0 {
                return Err(Error::config("context network needs context features"));
            }
            let mut spec: Vec<(usize, Activation)> =
                layers.iter().map(|&w| (w, Activation::Relu)).collect();
            spec.last_mut().expect("validated non-empty").1 = Activation::Identity;
            ContextNet::Mlp(MlpParams::init(ctx_dim, &spec, &mut rng)?)
        }
    };
    let mut spec: Vec<(usize, Activation)> =
        config.mono_hidden.iter().map(|&w| (w, Activation::Relu)).collect();
    spec.push((1, Activation::Sigmoid));
    let mut mono = MlpParams::init(context.embedding_dim() + 1, &spec, &mut rng)?;
    // A head without hidden layers starts increasing in the score.
    if config.mono_hidden.is_empty() {
        let head = &mut mono.layers_mut()[0];
        let width = head.in_dim();
        let w = &mut head.weights_mut()[width - 1];
        *w = w.abs();
    }
    let last = mono.layers().len() - 1;
    mono.layers_mut()[last].bias_mut()[0] = logit(rate);
    let mut model = MlplattModel::with_score_transform(context, mono, config.theta, r_shift, r_scale)?;

    let (initial_loss, _) = objective(&model, records)?;
    let mut mono_opt = OptimizerState::adam(&model.mono, config.lr)?;
    let mut ctx_opt = match &model.context {
        ContextNet::Mlp(net) => Some(OptimizerState::adam(net, config.lr)?),
        ContextNet::Identity { .. } => None,
    };
    let mut trainer = Trainer::new(&model, config.fd_step);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut batch_index = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let loss = trainer.batch(&model, records, batch)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at batch {batch_index} (epoch {epoch})"
                )));
            }
            mono_opt
                .step(&mut model.mono, &trainer.mono_grads)
                .map_err(|e| Error::Training(format!("batch {batch_index}: {e}")))?;
            if let (Some(opt), ContextNet::Mlp(net)) = (ctx_opt.as_mut(), &mut model.context) {
                opt.step(net, &trainer.ctx_grads)
                    .map_err(|e| Error::Training(format!("batch {batch_index}: {e}")))?;
            }
            total += loss;
            batches += 1;
            batch_index += 1;
        }
        let epoch_loss = total / batches as f64;
        if let Some(&prev) = epoch_losses.last() {
            if prev - epoch_loss < config.plateau_tolerance {
                let lr = mono_opt.lr() / 2.0;
                mono_opt.set_lr(lr);
                if let Some(opt) = ctx_opt.as_mut() {
                    opt.set_lr(lr);
                }
            }
        }
        log::debug!("mlplatt epoch {epoch}: loss {epoch_loss:.6} lr {}", mono_opt.lr());
        epoch_losses.push(epoch_loss);
    }
    let (final_loss, violation_rate) = objective(&model, records)?;
    let report = FitReport {
        initial_loss,
        final_loss,
        epoch_losses,
        final_lr: mono_opt.lr(),
        violation_rate,
    };
    Ok((model, report))
}

/// Gradient buffers for one mini-batch of the penalised objective.
struct Trainer {
    fd_step: f64,
    mono_grads: MlpGrads,
    ctx_grads: MlpGrads,
    ws: Workspace,
    probe: ForwardTrace,
    probe_input: Vec<f64>,
    emb_grad: Vec<f64>,
}

impl Trainer {
    fn new(model: &MlplattModel, fd_step: f64) -> Self {
        let ctx_grads = match &model.context {
            ContextNet::Mlp(net) => MlpGrads::zeros_like(net),
            ContextNet::Identity { .. } => MlpGrads { layers: Vec::new() },
        };
        Self {
            fd_step,
            mono_grads: MlpGrads::zeros_like(&model.mono),
            ctx_grads,
            ws: Workspace::default(),
            probe: ForwardTrace::default(),
            probe_input: Vec::new(),
            emb_grad: Vec::new(),
        }
    }

    /// Fills the gradient buffers for the batch and returns its objective.
    ///
    /// The penalty gradient needs `∂d/∂params` where `d = ∂c/∂r`. It is taken
    /// as the central difference in `r` of the parameter gradient of `c`.
    fn batch(&mut self, model: &MlplattModel, records: &[CalibrationRecord], idx: &[usize]) -> Result<f64> {
        self.mono_grads.clear();
        self.ctx_grads.clear();
        let b = idx.len() as f64;
        let h = self.fd_step;
        let theta = model.theta;
        let emb_dim = model.context.embedding_dim();
        let (mut bce_sum, mut hinge_sum) = (0.0, 0.0);
        for &i in idx {
            let rec = &records[i];
            let c = model.run(rec.r, &rec.ctx, &mut self.ws)?;
            let (loss, dl_dc) = bce_loss(c, rec.label())?;
            bce_sum += loss;
            model.mono.backward_accumulate(
                &self.ws.mono_trace,
                &[1.0],
                dl_dc / b,
                &mut self.mono_grads,
                &mut self.ws.scratch,
            )?;
            let grad_u = self.ws.scratch.input_grad();
            let d = grad_u[emb_dim];
            self.emb_grad.clear();
            self.emb_grad.extend(grad_u[..emb_dim].iter().map(|g| g * dl_dc / b));

            if theta > 0.0 && d < 0.0 {
                hinge_sum -= d / model.r_scale;
                // Objective term is -theta/(B·r_scale) · d.
                let w = -theta / (b * model.r_scale * 2.0 * h);
                for (sign, offset) in [(1.0, h), (-1.0, -h)] {
                    self.probe_input.clear();
                    self.probe_input.extend_from_slice(&self.ws.mono_input);
                    self.probe_input[emb_dim] += offset;
                    model.mono.forward_into(&self.probe_input, &mut self.probe)?;
                    model.mono.backward_accumulate(
                        &self.probe,
                        &[1.0],
                        sign * w,
                        &mut self.mono_grads,
                        &mut self.ws.scratch,
                    )?;
                    for (e, g) in self.emb_grad.iter_mut().zip(self.ws.scratch.input_grad()) {
                        *e += sign * w * g;
                    }
                }
            }
            if let ContextNet::Mlp(net) = &model.context {
                net.backward_accumulate(
                    &self.ws.ctx_trace,
                    &self.emb_grad,
                    1.0,
                    &mut self.ctx_grads,
                    &mut self.ws.scratch,
                )?;
            }
        }
        Ok(bce_sum / b + theta * hinge_sum / b)
    }
}

impl Persist for MlplattModel {
    const KIND: ModelKind = ModelKind::Mlplatt;

    fn encode_payload(&self, enc: &mut Encoder) {
        enc.f64(self.theta);
        enc.f64(self.r_shift);
        enc.f64(self.r_scale);
        match &self.context {
            ContextNet::Identity { dim } => {
                enc.u8(0);
                enc.len_prefix(*dim);
            }
            ContextNet::Mlp(net) => {
                enc.u8(1);
                enc.mlp(net);
            }
        }
        enc.mlp(&self.mono);
    }

    fn decode_payload(dec: &mut Decoder<'_>) -> Result<Self> {
        let theta = dec.f64()?;
        let r_shift = dec.f64()?;
        let r_scale = dec.f64()?;
        let context = match dec.u8()? {
            0 => ContextNet::Identity {
                dim: dec.len_prefix()?,
            },
            1 => ContextNet::Mlp(dec.mlp()?),
            t => return Err(Error::Container(format!("unknown context tag {t}"))),
        };
        let mono = dec.mlp()?;
        Self::with_score_transform(context, mono, theta, r_shift, r_scale)
            .map_err(|e| Error::Container(e.to_string()))
    }
}
