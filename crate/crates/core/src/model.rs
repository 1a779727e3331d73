//! The full pre-training graph: target pass and neighbor selection, dense
//! targets, context pass and aggregation, prediction and loss.

use alloc::format;
use alloc::vec::Vec;

use crate::aggregation::{self, AggregationHead, HeadConfig};
use crate::error::{Error, Result};
use crate::masking::{self, MaskPlan, MaskSamplerConfig};
use crate::neighbors::{self, NeighborhoodSpec};
use crate::params::{Bound, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{extract_patches, Encoder, EncoderConfig, Predictor, PredictorConfig, PredictorHead};
use crate::Rng;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Objective {
    /// Regress predictions onto neighbor-aggregated dense targets.
    #[default]
    Dmt,
    /// Regress predictions onto raw target-encoder features.
    Ijepa,
    /// Reconstruct normalized pixels of uniformly masked patches.
    Mae,
    /// `λ·ijepa + (1 − λ)·dmt`.
    Mix(f64),
}

impl Objective {
    /// `(weight on raw-feature loss, weight on aggregated-target loss)`.
    fn latent_weights(self) -> Option<(f64, f64)> {
        match self {
            Objective::Dmt => Some((0.0, 1.0)),
            Objective::Ijepa => Some((1.0, 0.0)),
            Objective::Mix(l) => Some((l, 1.0 - l)),
            Objective::Mae => None,
        }
    }
}

/// What the predictor is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ContextMode {
    /// Only the aggregated context token.
    Aggregated,
    /// Only the per-patch context tokens.
    Full,
    /// Per-patch context tokens followed by the aggregated token.
    #[default]
    FullAggregated,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub masking: MaskSamplerConfig,
    pub neighbors: NeighborhoodSpec,
    pub head: HeadConfig,
    pub context_mode: ContextMode,
    pub objective: Objective,
    #[cfg_attr(feature = "serde", serde(default))]
    pub standardize_targets: bool,
    pub mae_mask_ratio: f64,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig::tiny(),
            predictor: PredictorConfig::tiny(),
            masking: MaskSamplerConfig::default(),
            neighbors: NeighborhoodSpec::default(),
            head: HeadConfig::default(),
            context_mode: ContextMode::default(),
            objective: Objective::Dmt,
            standardize_targets: false,
            mae_mask_ratio: 0.75,
        }
    }

    /// Small enough for exhaustive finite differences: `N = 16`, `D = 8`,
    /// every head parameter live.
    pub fn gradcheck() -> Self {
        let mut c = Self::tiny();
        c.encoder.depth = 1;
        c.encoder.embed_dim = 8;
        c.encoder.heads = 2;
        c.encoder.mlp_ratio = 2;
        c.predictor = PredictorConfig {
            depth: 1,
            embed_dim: 8,
            heads: 2,
        };
        c.head.learned_projections = true;
        c
    }

    pub fn paper_base16() -> Self {
        let encoder = EncoderConfig::vit_base16();
        Self {
            predictor: PredictorConfig::paper_base(encoder.heads),
            encoder,
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.predictor.validate()?;
        self.masking.validate()?;
        self.neighbors.validate()?;
        if let Objective::Mix(l) = self.objective {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("mixing weight {l} outside [0, 1]")));
            }
        }
        if !(self.mae_mask_ratio > 0.0 && self.mae_mask_ratio < 1.0) {
            return Err(Error::Config("mae_mask_ratio must lie in (0, 1)".into()));
        }
        if self.encoder.num_patches() < 2 {
            return Err(Error::Config("need at least two patches".into()));
        }
        Ok(())
    }
}

/// Masks for one image and one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepPlan {
    Blocks(MaskPlan),
    Random { visible: Vec<usize>, masked: Vec<usize> },
}

/// Gradients for the trainable parameter sets, aligned with their params.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub context: Vec<Tensor>,
    pub predictor: Vec<Tensor>,
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> Self {
        let z = |s: &ParamSet| s.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            context: z(&model.context),
            predictor: z(&model.predictor_params),
        }
    }

    pub fn add_scaled(&mut self, other: &ModelGrads, c: f64) {
        let pairs = self.context.iter_mut().zip(&other.context);
        for (a, b) in pairs.chain(self.predictor.iter_mut().zip(&other.predictor)) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += c * y);
        }
    }
}

/// Per-term values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub dmt: Option<f64>,
    pub ijepa: Option<f64>,
    pub mae: Option<f64>,
}

/// Everything recorded by [`Model::forward`].
#[derive(Debug)]
pub struct Forward {
    pub tape: Tape,
    pub loss: Var,
    pub parts: LossParts,
    pub context: Bound,
    pub target: Bound,
    pub predictor: Bound,
}

/// Where probe and visualization features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FeatureSource {
    Context,
    #[default]
    Target,
}

/// Context encoder and head, their EMA copy, and the predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: AggregationHead,
    pub predictor: Predictor,
    /// Trainable encoder and context aggregation head.
    pub context: ParamSet,
    /// EMA copy of `context`; never receives gradients.
    pub target: ParamSet,
    pub predictor_params: ParamSet,
}

impl Model {
    /// Fresh parameters; the target set starts as an exact copy of the context set.
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut context = ParamSet::new();
        let encoder = Encoder::init(&config.encoder, &mut context, rng, "encoder")?;
        let head = AggregationHead::init(
            config.head.learned_projections,
            config.encoder.embed_dim,
            &mut context,
            "head",
        );
        let mut predictor_params = ParamSet::new();
        let predictor = Predictor::init(&config.predictor, &config.encoder, &mut predictor_params, rng, "predictor")?;
        Ok(Self {
            config: config.clone(),
            encoder,
            head,
            predictor,
            target: context.clone(),
            context,
            predictor_params,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.config.encoder.grid_rows(), self.config.encoder.grid_cols())
    }

    pub fn sample_plan(&self, rng: &mut Rng) -> Result<StepPlan> {
        let (rows, cols) = self.grid();
        match self.config.objective {
            Objective::Mae => {
                let (visible, masked) = masking::sample_random_mask(rows * cols, self.config.mae_mask_ratio, rng)?;
                Ok(StepPlan::Random { visible, masked })
            }
            _ => Ok(StepPlan::Blocks(masking::sample_mask_plan(rows, cols, &self.config.masking, rng)?)),
        }
    }

    /// Records the whole objective for one image. With `bind_target_grads`
    /// the target parameters become trainable leaves, which lets callers
    /// verify that no gradient reaches them.
    pub fn forward(&self, image: &Tensor, plan: &StepPlan, bind_target_grads: bool) -> Result<Forward> {
        let mut tape = Tape::new();
        let pixels = extract_patches(image, &self.config.encoder)?;
        let pix = tape.constant(pixels.clone());
        let target = self.target.bind(&mut tape, bind_target_grads);
        let context = self.context.bind(&mut tape, true);
        let predictor = self.predictor_params.bind(&mut tape, true);
        let (loss, parts) = match plan {
            StepPlan::Blocks(plan) => self.latent_objective(&mut tape, pix, plan, &context, &target, &predictor)?,
            StepPlan::Random { visible, masked } => {
                let s_x = self.encoder.encode(&mut tape, &context, pix, Some(visible))?.tokens;
                let pred = self.predictor.forward(
                    &mut tape,
                    &predictor,
                    Some((s_x, visible)),
                    None,
                    masked,
                    PredictorHead::Pixels,
                )?;
                let goal = aggregation::normalize_patches(&pixels.gather_rows(masked)?)?;
                let goal = tape.constant(goal);
                let loss = aggregation::mae_loss_on(&mut tape, pred, goal)?;
                let v = tape.value(loss).data()[0];
                let parts = LossParts {
                    total: v,
                    mae: Some(v),
                    ..Default::default()
                };
                (loss, parts)
            }
        };
        Ok(Forward {
            tape,
            loss,
            parts,
            context,
            target,
            predictor,
        })
    }

    fn latent_objective(
        &self,
        tape: &mut Tape,
        pix: Var,
        plan: &MaskPlan,
        context: &Bound,
        target: &Bound,
        predictor: &Bound,
    ) -> Result<(Var, LossParts)> {
        let cfg = &self.config;
        let (w_raw, w_dmt) = cfg
            .objective
            .latent_weights()
            .ok_or_else(|| Error::Config("block masks need a latent objective".into()))?;
        let (rows, cols) = self.grid();

        // Target side: full grid through the EMA encoder, then cut from the graph.
        let feats = self.encoder.encode(tape, target, pix, None)?.tokens;
        let feats = tape.detach(feats);
        let masked = plan.masked();
        let position = |j: usize| masked.binary_search(&j).expect("block patch is masked");

        let dense = if w_dmt > 0.0 {
            let selection = neighbors::select_for(&masked, tape.value(feats), rows, cols, &cfg.neighbors)?;
            let t = aggregation::dense_targets_on(
                tape,
                &self.head,
                Some(target),
                cfg.head.target,
                feats,
                &selection,
                &masked,
            )?;
            Some(if cfg.standardize_targets {
                let s = aggregation::standardize_columns(tape.value(t))?;
                tape.constant(s)
            } else {
                t
            })
        } else {
            None
        };

        // Context side.
        let s_x = self.encoder.encode(tape, context, pix, Some(&plan.context))?.tokens;
        let summary = match cfg.context_mode {
            ContextMode::Full => None,
            _ => Some(aggregation::aggregated_context_on(
                tape,
                &self.head,
                Some(context),
                cfg.head.context,
                s_x,
            )?),
        };
        let ctx = match cfg.context_mode {
            ContextMode::Aggregated => None,
            _ => Some((s_x, plan.context.as_slice())),
        };

        let mut preds = Vec::with_capacity(plan.targets.len());
        for block in &plan.targets {
            preds.push(
                self.predictor
                    .forward(tape, predictor, ctx, summary, block, PredictorHead::Latent)?,
            );
        }

        let mut parts = LossParts::default();
        let mut terms = Vec::new();
        if let Some(dense) = dense {
            let targets = plan
                .targets
                .iter()
                .map(|b| tape.gather_rows(dense, &b.iter().map(|&j| position(j)).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            let l = aggregation::latent_loss_on(tape, &preds, &targets)?;
            parts.dmt = Some(tape.value(l).data()[0]);
            terms.push((l, w_dmt));
        }
        if w_raw > 0.0 {
            let targets = plan
                .targets
                .iter()
                .map(|b| tape.gather_rows(feats, b))
                .collect::<Result<Vec<_>>>()?;
            let l = aggregation::latent_loss_on(tape, &preds, &targets)?;
            parts.ijepa = Some(tape.value(l).data()[0]);
            terms.push((l, w_raw));
        }
        let mut loss = tape.scale(terms[0].0, terms[0].1)?;
        for &(l, w) in &terms[1..] {
            let s = tape.scale(l, w)?;
            loss = tape.add(loss, s)?;
        }
        parts.total = tape.value(loss).data()[0];
        Ok((loss, parts))
    }

    /// Loss and gradients for one image.
    pub fn loss_and_grads(&self, image: &Tensor, plan: &StepPlan) -> Result<(LossParts, ModelGrads)> {
        let f = self.forward(image, plan, false)?;
        let g = f.tape.backward(f.loss)?;
        let collect = |bound: &Bound, set: &ParamSet| {
            bound
                .0
                .iter()
                .zip(set.iter())
                .map(|(v, p)| g.get(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
                .collect()
        };
        Ok((
            f.parts,
            ModelGrads {
                context: collect(&f.context, &self.context),
                predictor: collect(&f.predictor, &self.predictor_params),
            },
        ))
    }

    pub fn loss(&self, image: &Tensor, plan: &StepPlan) -> Result<LossParts> {
        Ok(self.forward(image, plan, false)?.parts)
    }

    fn params_for(&self, source: FeatureSource) -> &ParamSet {
        match source {
            FeatureSource::Context => &self.context,
            FeatureSource::Target => &self.target,
        }
    }

    /// Last-layer patch features `[N×D]` over the full grid.
    pub fn features(&self, image: &Tensor, source: FeatureSource) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params_for(source).bind(&mut tape, false);
        let pix = tape.constant(extract_patches(image, &self.config.encoder)?);
        let out = self.encoder.encode(&mut tape, &p, pix, None)?;
        Ok(tape.value(out.tokens).clone())
    }

    /// Mean-pooled patch features, `D` values.
    pub fn pooled_features(&self, image: &Tensor, source: FeatureSource) -> Result<Vec<f64>> {
        Ok(self.features(image, source)?.mean_rows()?.into_data())
    }

    /// Per-head `[N×N]` attention of block `layer`; negative indices count
    /// from the last block.
    pub fn attention(&self, image: &Tensor, layer: isize, source: FeatureSource) -> Result<Vec<Tensor>> {
        let depth = self.encoder.blocks.len() as isize;
        let idx = if layer < 0 { depth + layer } else { layer };
        if idx < 0 || idx >= depth {
            return Err(Error::OutOfRange {
                what: "encoder layers",
                index: layer.unsigned_abs(),
                len: depth as usize,
            });
        }
        let mut tape = Tape::new();
        let p = self.params_for(source).bind(&mut tape, false);
        let pix = tape.constant(extract_patches(image, &self.config.encoder)?);
        let out = self.encoder.encode(&mut tape, &p, pix, None)?;
        Ok(out.attention[idx as usize].iter().map(|v| tape.value(*v).clone()).collect())
    }
}

/// Outcome for one named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupStatus {
    /// Relative error between backward and finite differences.
    Checked(f64),
    /// Target-side parameter; `true` when it was verified to get no gradient.
    NoGradientExpected(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<(alloc::string::String, GroupStatus)>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups
            .iter()
            .filter_map(|(_, s)| match s {
                GroupStatus::Checked(e) => Some(*e),
                _ => None,
            })
            .fold(0.0, f64::max)
    }

    /// First group over tolerance or with a leaked target gradient.
    pub fn first_failure(&self) -> Option<&str> {
        self.groups
            .iter()
            .find(|(_, s)| match s {
                GroupStatus::Checked(e) => !(*e < self.tolerance),
                GroupStatus::NoGradientExpected(ok) => !ok,
            })
            .map(|(n, _)| n.as_str())
    }

    pub fn passed(&self) -> bool {
        self.first_failure().is_none()
    }
}

impl Model {
    /// Compares backward against central differences on every trainable
    /// tensor and verifies that target parameters receive nothing. With
    /// `sample = Some(n)`, each tensor is probed at `n` coordinates drawn from
    /// `seed` instead of all of them. `corrupt` names a group whose analytic
    /// gradient is perturbed first, to exercise the failure path.
    pub fn check_gradients(
        &self,
        image: &Tensor,
        plan: &StepPlan,
        h: f64,
        tolerance: f64,
        sample: Option<(usize, u64)>,
        corrupt: Option<&str>,
    ) -> Result<GradcheckReport> {
        use rand::seq::index::sample as pick;
        use rand::SeedableRng;
        let f = self.forward(image, plan, true)?;
        let g = f.tape.backward(f.loss)?;
        let mut groups = Vec::new();
        let mut probe = self.clone();
        let mut rng = sample.map(|(_, seed)| Rng::seed_from_u64(seed));
        for (set_idx, (set, bound)) in [(&self.context, &f.context), (&self.predictor_params, &f.predictor)]
            .into_iter()
            .enumerate()
        {
            for (k, param) in set.iter().enumerate() {
                let mut analytic = g.get(bound.var(k)).unwrap_or_else(|| Tensor::zeros(param.value.shape()));
                if corrupt == Some(param.name.as_str()) {
                    analytic.data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 0.1);
                }
                let n = param.value.len();
                let coords: Vec<usize> = match (sample, rng.as_mut()) {
                    (Some((m, _)), Some(r)) if m < n => {
                        let mut c = pick(r, n, m).into_vec();
                        c.sort_unstable();
                        c
                    }
                    _ => (0..n).collect(),
                };
                let numeric = crate::gradcheck::finite_difference_at(
                    |x| {
                        let slot = if set_idx == 0 {
                            &mut probe.context.get_mut(k).value
                        } else {
                            &mut probe.predictor_params.get_mut(k).value
                        };
                        *slot = x.clone();
                        probe.loss(image, plan).map(|p| p.total)
                    },
                    &param.value,
                    h,
                    &coords,
                )?;
                let slot = if set_idx == 0 {
                    &mut probe.context.get_mut(k).value
                } else {
                    &mut probe.predictor_params.get_mut(k).value
                };
                *slot = param.value.clone();
                let picked: Vec<f64> = coords.iter().map(|&i| analytic.data()[i]).collect();
                let err = crate::gradcheck::relative_error(&picked, &numeric);
                groups.push((param.name.clone(), GroupStatus::Checked(err)));
            }
        }
        for (k, param) in self.target.iter().enumerate() {
            let silent = g.get(f.target.var(k)).is_none();
            groups.push((format!("target:{}", param.name), GroupStatus::NoGradientExpected(silent)));
        }
        Ok(GradcheckReport { groups, tolerance })
    }
}
