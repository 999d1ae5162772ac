//! End-to-end model fitting: stationary fits, CLS initialization and
//! smoothing, neighborhood selection, hyperparameter sampling, final fit.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cls::{init_cls_with, ClsAssignment, EigenParams, InitOptions, IntrinsicConfig, LatentField, LatentHyper, LatentInput};
use crate::error::{Error, Result};
use crate::geo::{Location, MetricMode, SpatialDataset};
use crate::gp::{FittedGp, PredictiveResult};
use crate::inference::{
    cv_select, fit_stationary, mcmc_sample, Chain, ClsModel, CvGrid, CvResult, GpModel, GpState, McmcConfig,
    StationaryFit, StationaryFitOptions,
};
use crate::kernels::{JitterPolicy, KernelKind, PrefactorForm};
use crate::spd::SpdMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub nu: f64,
    pub metric: MetricMode,
    pub prefactor: PrefactorForm,
    /// Neighbors per local CLS fit.
    pub k_local: usize,
    pub shrinkage_sd: f64,
    pub latent_input: LatentInput,
    /// Used as-is when `cv` is off; otherwise supplies the filter direction
    /// and survivor floor.
    pub intrinsic: IntrinsicConfig,
    pub cv: Option<CvGrid>,
    pub mcmc: Option<McmcConfig>,
    pub sample_nu: bool,
    pub sample_latent: bool,
    /// Hold the global anisotropic CLS fixed at every point, for every method.
    pub shared_cls: bool,
    pub jitter: JitterPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            nu: 1.5,
            metric: MetricMode::Euclidean,
            prefactor: PrefactorForm::Normalized,
            k_local: 40,
            shrinkage_sd: 0.5,
            latent_input: LatentInput::OneD,
            intrinsic: IntrinsicConfig::default(),
            cv: Some(CvGrid::default()),
            mcmc: Some(McmcConfig::default()),
            sample_nu: false,
            sample_latent: true,
            shared_cls: false,
            jitter: JitterPolicy::default(),
        }
    }
}

/// Fits shared by every method on one training set.
#[derive(Debug, Clone)]
pub struct SharedStage {
    pub iso: StationaryFit,
    pub aniso: StationaryFit,
    /// Raw per-point CLS, when a non-stationary method needs it.
    pub raw: Option<Vec<EigenParams>>,
}

pub fn prepare(train: &SpatialDataset, cfg: &PipelineConfig, methods: &[KernelKind]) -> Result<SharedStage> {
    let opts = StationaryFitOptions {
        nu: cfg.nu,
        ..StationaryFitOptions::default()
    };
    let iso = fit_stationary(train, KernelKind::StatIso, cfg.metric, &opts)?;
    let aniso = fit_stationary(
        train,
        KernelKind::StatAniso,
        cfg.metric,
        &StationaryFitOptions {
            start: Some(iso),
            ..opts
        },
    )?;
    log::info!(
        "stationary fits: iso sigma_f={:.4} sigma_n={:.4}; aniso log posterior {:.3}",
        iso.sigma_f,
        iso.sigma_n,
        aniso.log_posterior
    );
    let needs_raw = !cfg.shared_cls && methods.iter().any(|k| !k.is_stationary());
    let raw = if needs_raw {
        let init = InitOptions {
            nu: cfg.nu,
            shrinkage_sd: cfg.shrinkage_sd,
            ..InitOptions::default()
        };
        Some(init_cls_with(train, cfg.k_local, cfg.metric, &iso, &init)?)
    } else {
        None
    };
    Ok(SharedStage { iso, aniso, raw })
}

/// A fitted model ready for prediction, with its provenance.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub kind: KernelKind,
    pub gp: FittedGp,
    pub state: GpState,
    pub chain: Option<Chain>,
    pub cv: Option<CvResult>,
}

impl FittedModel {
    pub fn predict(&self, queries: &[Location]) -> Result<Vec<PredictiveResult>> {
        self.gp.predict_batch(queries)
    }

    pub fn cls(&self) -> &ClsAssignment {
        self.gp.cls()
    }
}

/// Runs the full pipeline for one kernel kind.
pub fn fit_model(
    train: &SpatialDataset,
    kind: KernelKind,
    cfg: &PipelineConfig,
    shared: &SharedStage,
    seed: u64,
) -> Result<FittedModel> {
    let start_fit = if kind == KernelKind::StatIso { shared.iso } else { shared.aniso };
    let params = start_fit.params(if kind == KernelKind::StatIso { kind } else { KernelKind::StatAniso }, cfg.nu)?;
    let mut model = GpModel {
        train,
        kind,
        mode: cfg.metric,
        prefactor: cfg.prefactor,
        jitter: cfg.jitter,
        cls: ClsModel::None,
        sample_nu: cfg.sample_nu,
        sample_length_scale: !cfg.shared_cls,
    };
    let mut state = GpState { params, latent: None };
    let mut cv = None;

    if !kind.is_stationary() {
        let intrinsic = if kind == KernelKind::IntrinsicNonStationary {
            Some(cfg.intrinsic)
        } else {
            None
        };
        if cfg.shared_cls {
            let base = ClsAssignment::constant(shared.aniso.cls, train.locations(), cfg.metric);
            let (a, result) = match intrinsic {
                Some(ic) => select_intrinsic(train, &model, &state, base, ic, cfg, seed)?,
                None => (base, None),
            };
            cv = result;
            model.cls = ClsModel::Fixed(a);
        } else {
            let raw = shared
                .raw
                .as_deref()
                .ok_or_else(|| Error::InvalidConfig("raw CLS estimates were not prepared".into()))?;
            let hyper = LatentHyper::default_for(train.locations(), cfg.latent_input);
            let field = LatentField::fit(raw, train.locations(), &hyper, cfg.latent_input, cfg.metric)?;
            let base = ClsAssignment::from_latent(Arc::new(field), train.locations(), cfg.metric)?;
            let (fixed, selected) = match intrinsic {
                Some(ic) => {
                    let (a, result) = select_intrinsic(train, &model, &state, base, ic, cfg, seed)?;
                    let selected = a.intrinsic().copied();
                    cv = result;
                    (a, selected)
                }
                None => (base, None),
            };
            if cfg.sample_latent {
                model.cls = ClsModel::Latent {
                    raw,
                    input: cfg.latent_input,
                    intrinsic: selected,
                };
                state.latent = Some(hyper);
            } else {
                model.cls = ClsModel::Fixed(fixed);
            }
        }
    }

    let chain = match &cfg.mcmc {
        Some(m) => {
            let mcfg = McmcConfig { seed, ..*m };
            let out = mcmc_sample(&model, &state, &mcfg)?;
            log::info!(
                "{kind}: mcmc acceptance {:.3} over {} samples",
                out.chain.acceptance_rate,
                out.chain.len()
            );
            state = out.estimate;
            Some(out.chain)
        }
        None => None,
    };
    let gp = model.fit(&state)?;
    if gp.jitter() > 0.0 {
        log::info!("{kind}: final fit used jitter {:e}", gp.jitter());
    }
    Ok(FittedModel {
        kind,
        gp,
        state,
        chain,
        cv,
    })
}

fn select_intrinsic(
    train: &SpatialDataset,
    model: &GpModel,
    state: &GpState,
    base: ClsAssignment,
    ic: IntrinsicConfig,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(ClsAssignment, Option<CvResult>)> {
    match &cfg.cv {
        Some(grid) => {
            let cov = model.covariance(&state.params);
            let result = cv_select(train, &cov, &base, &ic, grid, seed)?;
            log::info!(
                "cv selected K={} threshold={}",
                result.selected.k_neighbors,
                result.selected.deviation_threshold
            );
            Ok((base.with_intrinsic(result.selected)?, Some(result)))
        }
        None => Ok((base.with_intrinsic(ic)?, None)),
    }
}

/// Fits the shared stage and then one model.
pub fn fit_single(train: &SpatialDataset, kind: KernelKind, cfg: &PipelineConfig, seed: u64) -> Result<FittedModel> {
    let shared = prepare(train, cfg, &[kind])?;
    fit_model(train, kind, cfg, &shared, seed)
}

/// CLS matrices at the training points: raw, smoothed and regional, where
/// available.
pub struct ClsDumps {
    pub raw: Option<Vec<SpdMatrix>>,
    pub smoothed: Option<Vec<SpdMatrix>>,
    pub regional: Option<Vec<SpdMatrix>>,
}

pub fn cls_dumps(model: &FittedModel, shared: &SharedStage) -> Result<ClsDumps> {
    let raw = shared
        .raw
        .as_ref()
        .map(|r| r.iter().map(crate::cls::sigma_from_eigenparams).collect::<Result<Vec<_>>>())
        .transpose()?;
    let cls = model.cls();
    let smoothed = (!model.kind.is_stationary()).then(|| cls.per_point.clone());
    Ok(ClsDumps {
        raw,
        smoothed,
        regional: cls.regional.clone(),
    })
}
