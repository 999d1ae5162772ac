//! Flat key-value run configuration: file, flag overrides, validation and
//! the effective-config sidecar.

use std::path::{Path, PathBuf};

use insgp_core::cls::{FilterDirection, IntrinsicConfig, LatentInput};
use insgp_core::experiments::{Region, SyntheticKind, SyntheticSpec};
use insgp_core::geo::MetricMode;
use insgp_core::inference::{CvGrid, McmcConfig};
use insgp_core::kernels::{KernelKind, PrefactorForm};
use insgp_core::pipeline::PipelineConfig;
use insgp_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every configuration key with a one-line description, in `--help` order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed; run r of a comparison uses seed + r [0]"),
    ("threads", "worker threads, 0 = available parallelism [0]"),
    ("out", "output directory [out]"),
    ("kernel", "stat-iso | stat-aniso | nsgp | insgp [insgp]"),
    ("metric", "euclidean | equirectangular separation vectors [euclidean]"),
    ("nu", "Matérn smoothness, 0 < nu <= 50 [1.5]"),
    ("prefactor", "normalized | literal non-stationary prefactor [normalized]"),
    ("k_local", "neighbors per local CLS fit, >= 4 [40]"),
    ("shrinkage_sd", "sd of the local CLS shrinkage toward the global fit [0.5]"),
    ("latent_input", "1d | 2d inputs of the latent CLS GPs [1d]"),
    ("sample_latent", "sample latent-GP hyperparameters in MCMC [true]"),
    ("sample_nu", "sample nu in MCMC [false]"),
    ("shared_cls", "hold the global anisotropic CLS fixed at every point for every method [false]"),
    ("k_neighbors", "intrinsic neighborhood size K when cv = false [8]"),
    ("deviation_threshold", "intrinsic deviation threshold when cv = false, inf allowed [1.0]"),
    ("filter_direction", "remove-above | remove-below [remove-above]"),
    ("min_survivors", "neighbors kept at least, center included [3]"),
    ("cv", "select K and threshold by cross-validation [true]"),
    ("cv_k", "candidate K values [[4, 8, 16]]"),
    ("cv_thresholds", "candidate thresholds [[0.5, 2.0, inf]]"),
    ("cv_folds", "number of folds [5]"),
    ("mcmc", "sample hyperparameters; false keeps the MAP start [true]"),
    ("mcmc_samples", "retained samples [2000]"),
    ("mcmc_burnin", "burn-in iterations [500]"),
    ("mcmc_proposal_sd", "random-walk sd in unconstrained space [0.1]"),
    ("synthetic", "regional | smooth2d generator [regional]"),
    ("n_train", "synthetic training points; training size for data_file splits [315]"),
    ("n_test", "synthetic test points [946]"),
    ("noise_sd", "synthetic observation noise sd [0.2]"),
    ("synthetic_nu", "Matérn smoothness of the regional draws [1.5]"),
    ("regions", "list of [lat, lon, radius, length_scale, amplitude] [3-disk GIA layout]"),
    ("background_length_scale", "regional background length scale [40]"),
    ("background_amplitude", "regional background amplitude [0.5]"),
    ("extent", "[lat_min, lat_max, lon_min, lon_max] [[0, 60, 0, 60]; smooth2d [0, 1, 0, 1]]"),
    ("train", "training rates CSV for fit-predict"),
    ("test", "test locations CSV for fit-predict; training locations if unset"),
    ("predictions", "predictions CSV for evaluate"),
    ("truth", "truth rates CSV for evaluate"),
    ("dump_cls", "write raw, smoothed and regional CLS CSVs [false]"),
    ("dump_chain", "write the MCMC chain CSV [false]"),
    ("methods", "kernels compared [[stat-aniso, nsgp, insgp]]"),
    ("n_runs", "independent comparison runs [25]"),
    ("data_file", "rates CSV to re-split per run instead of synthetic data"),
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prefactor: Option<PrefactorForm>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_local: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shrinkage_sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_input: Option<LatentInput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_latent: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_nu: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shared_cls: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_neighbors: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deviation_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filter_direction: Option<FilterDirection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_survivors: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv_k: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv_thresholds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv_folds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcmc_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcmc_burnin: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcmc_proposal_sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_nu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<[f64; 5]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background_length_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background_amplitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extent: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_cls: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_chain: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<KernelKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_runs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_file: Option<PathBuf>,
}

fn config_error(source: impl std::fmt::Display, what: &str) -> Error {
    Error::InvalidConfig(format!("{what}: {source}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_error(e, "config"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| config_error(e, &path.display().to_string()))
    }

    /// Applies `key=value` overrides. Values are read as TOML and fall back
    /// to a bare string, so `kernel=nsgp` and `cv_k=[4, 8]` both work.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| config_error(e, "config"))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override `{o}` is not key=value")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        *self = table.try_into().map_err(|e| config_error(e, "override"))?;
        Ok(())
    }

    /// Later values win.
    pub fn merge(mut self, over: RunConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f; } )* };
        }
        take!(
            seed, threads, out, kernel, metric, nu, prefactor, k_local, shrinkage_sd, latent_input,
            sample_latent, sample_nu, shared_cls, k_neighbors, deviation_threshold, filter_direction,
            min_survivors, cv, cv_k, cv_thresholds, cv_folds, mcmc, mcmc_samples, mcmc_burnin,
            mcmc_proposal_sd, synthetic, n_train, n_test, noise_sd, synthetic_nu, regions,
            background_length_scale, background_amplitude, extent, train, test, predictions, truth,
            dump_cls, dump_chain, methods, n_runs, data_file
        );
        self
    }

    /// Every field set, path fields excepted.
    pub fn defaults(synthetic: SyntheticKind) -> Self {
        let p = PipelineConfig::default();
        let ic = IntrinsicConfig::default();
        let grid = CvGrid::default();
        let mc = McmcConfig::default();
        let spec = match synthetic {
            SyntheticKind::Regional => SyntheticSpec::gia_analogue(0),
            SyntheticKind::Smooth2d => SyntheticSpec::smooth2d(0),
        };
        let gia = SyntheticSpec::gia_analogue(0);
        RunConfig {
            seed: Some(0),
            threads: Some(0),
            out: Some(PathBuf::from("out")),
            kernel: Some(KernelKind::IntrinsicNonStationary),
            metric: Some(p.metric),
            nu: Some(p.nu),
            prefactor: Some(p.prefactor),
            k_local: Some(p.k_local),
            shrinkage_sd: Some(p.shrinkage_sd),
            latent_input: Some(p.latent_input),
            sample_latent: Some(p.sample_latent),
            sample_nu: Some(p.sample_nu),
            shared_cls: Some(p.shared_cls),
            k_neighbors: Some(ic.k_neighbors),
            deviation_threshold: Some(ic.deviation_threshold),
            filter_direction: Some(ic.filter_direction),
            min_survivors: Some(ic.min_survivors),
            cv: Some(true),
            cv_k: Some(grid.k_candidates),
            cv_thresholds: Some(grid.threshold_candidates),
            cv_folds: Some(grid.n_folds),
            mcmc: Some(true),
            mcmc_samples: Some(mc.n_samples),
            mcmc_burnin: Some(mc.n_burnin),
            mcmc_proposal_sd: Some(mc.proposal_sd),
            synthetic: Some(synthetic),
            n_train: Some(spec.n_train),
            n_test: Some(spec.n_test),
            noise_sd: Some(spec.noise_sd),
            synthetic_nu: Some(spec.nu),
            regions: Some(
                gia.regions
                    .iter()
                    .map(|r| [r.center_lat, r.center_lon, r.radius, r.length_scale, r.amplitude])
                    .collect(),
            ),
            background_length_scale: Some(gia.background_length_scale),
            background_amplitude: Some(gia.background_amplitude),
            extent: Some(spec.extent),
            train: None,
            test: None,
            predictions: None,
            truth: None,
            dump_cls: Some(false),
            dump_chain: Some(false),
            methods: Some(vec![
                KernelKind::StatAniso,
                KernelKind::NonStationary,
                KernelKind::IntrinsicNonStationary,
            ]),
            n_runs: Some(25),
            data_file: None,
        }
    }

    /// Fills unset fields with defaults and validates everything.
    pub fn resolve(self) -> Result<Settings> {
        let kind = self.synthetic.unwrap_or(SyntheticKind::Regional);
        let c = RunConfig::defaults(kind).merge(self);
        let settings = Settings::from_config(&c)?;
        Ok(settings)
    }
}

/// A fully resolved and validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub kernel: KernelKind,
    pub pipeline: PipelineConfig,
    pub synthetic: SyntheticSpec,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub dump_cls: bool,
    pub dump_chain: bool,
    pub methods: Vec<KernelKind>,
    pub n_runs: usize,
    pub data_file: Option<PathBuf>,
    /// The merged configuration, for the sidecar.
    pub effective: RunConfig,
}

fn get<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::InvalidConfig(format!("missing value for `{key}`")))
}

impl Settings {
    fn from_config(c: &RunConfig) -> Result<Self> {
        let nu = get(&c.nu, "nu")?;
        if !(nu > 0.0 && nu <= 50.0) {
            return Err(Error::InvalidConfig(format!("nu must lie in (0, 50], got {nu}")));
        }
        let k_local = get(&c.k_local, "k_local")?;
        if k_local < 4 {
            return Err(Error::InvalidConfig(format!("k_local must be at least 4, got {k_local}")));
        }
        let shrinkage_sd = get(&c.shrinkage_sd, "shrinkage_sd")?;
        if !(shrinkage_sd > 0.0 && shrinkage_sd.is_finite()) {
            return Err(Error::InvalidConfig(format!("shrinkage_sd must be positive, got {shrinkage_sd}")));
        }
        let intrinsic = IntrinsicConfig {
            k_neighbors: get(&c.k_neighbors, "k_neighbors")?,
            deviation_threshold: get(&c.deviation_threshold, "deviation_threshold")?,
            filter_direction: get(&c.filter_direction, "filter_direction")?,
            min_survivors: get(&c.min_survivors, "min_survivors")?,
        };
        // Size checks against the data happen once the data is known.
        intrinsic.validate(usize::MAX)?;
        let cv = if get(&c.cv, "cv")? {
            let grid = CvGrid {
                k_candidates: get(&c.cv_k, "cv_k")?,
                threshold_candidates: get(&c.cv_thresholds, "cv_thresholds")?,
                n_folds: get(&c.cv_folds, "cv_folds")?,
            };
            grid.validate()?;
            Some(grid)
        } else {
            None
        };
        let seed = get(&c.seed, "seed")?;
        let mcmc = if get(&c.mcmc, "mcmc")? {
            let m = McmcConfig {
                n_samples: get(&c.mcmc_samples, "mcmc_samples")?,
                n_burnin: get(&c.mcmc_burnin, "mcmc_burnin")?,
                proposal_sd: get(&c.mcmc_proposal_sd, "mcmc_proposal_sd")?,
                seed,
            };
            m.validate()?;
            Some(m)
        } else {
            None
        };
        let pipeline = PipelineConfig {
            nu,
            metric: get(&c.metric, "metric")?,
            prefactor: get(&c.prefactor, "prefactor")?,
            k_local,
            shrinkage_sd,
            latent_input: get(&c.latent_input, "latent_input")?,
            intrinsic,
            cv,
            mcmc,
            sample_nu: get(&c.sample_nu, "sample_nu")?,
            sample_latent: get(&c.sample_latent, "sample_latent")?,
            shared_cls: get(&c.shared_cls, "shared_cls")?,
            jitter: Default::default(),
        };
        let synthetic = SyntheticSpec {
            kind: get(&c.synthetic, "synthetic")?,
            n_train: get(&c.n_train, "n_train")?,
            n_test: get(&c.n_test, "n_test")?,
            noise_sd: get(&c.noise_sd, "noise_sd")?,
            seed,
            regions: get(&c.regions, "regions")?
                .iter()
                .map(|r| Region {
                    center_lat: r[0],
                    center_lon: r[1],
                    radius: r[2],
                    length_scale: r[3],
                    amplitude: r[4],
                })
                .collect(),
            background_length_scale: get(&c.background_length_scale, "background_length_scale")?,
            background_amplitude: get(&c.background_amplitude, "background_amplitude")?,
            extent: get(&c.extent, "extent")?,
            nu: get(&c.synthetic_nu, "synthetic_nu")?,
        };
        synthetic.validate()?;
        let methods = get(&c.methods, "methods")?;
        if methods.is_empty() {
            return Err(Error::InvalidConfig("methods must not be empty".into()));
        }
        let n_runs = get(&c.n_runs, "n_runs")?;
        if n_runs == 0 {
            return Err(Error::InvalidConfig("n_runs must be positive".into()));
        }
        Ok(Settings {
            seed,
            threads: get(&c.threads, "threads")?,
            out: get(&c.out, "out")?,
            kernel: get(&c.kernel, "kernel")?,
            pipeline,
            synthetic,
            train: c.train.clone(),
            test: c.test.clone(),
            predictions: c.predictions.clone(),
            truth: c.truth.clone(),
            dump_cls: get(&c.dump_cls, "dump_cls")?,
            dump_chain: get(&c.dump_chain, "dump_chain")?,
            methods,
            n_runs,
            data_file: c.data_file.clone(),
            effective: c.clone(),
        })
    }

    /// Writes the merged configuration next to the outputs.
    pub fn write_sidecar(&self, command: &str) -> Result<PathBuf> {
        let text = toml::to_string(&self.effective).map_err(|e| config_error(e, "sidecar"))?;
        let path = self.out.join(format!("{command}.config.toml"));
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
