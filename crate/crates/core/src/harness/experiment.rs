// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Deserialize;

use super::oracle::{
    gradient_descent, mse, pooled_vertical, r_squared, ridge_closed_form, Descent, Objective,
};
use super::synthetic::{generate, partition_horizontal, FeatureScale, SplitScheme, SyntheticSpec};
use super::HarnessError;
use crate::alignment::{self, GroupParams};
use crate::data::{dot, DatasetPartition};
use crate::hfl::{self, HflConfig, MaskScheme, UpdateMode};
use crate::seed::rng_for;
use crate::transport::Transcript;
use crate::vfl::{self, Hyperparams};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vfl,
    Hfl,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "vfl" => Ok(Mode::Vfl),
            "hfl" => Ok(Mode::Hfl),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Vfl => "vfl",
            Mode::Hfl => "hfl",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiGroup {
    #[default]
    Modp2048,
    Test256,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: Mode,
    /// `he`, `pairwise`, `dp` or `none`; vertical runs accept only `he`.
    pub scheme: String,
    pub seed: u64,
    pub key_bits: u32,
    /// Share of the aligned samples held out for evaluation.
    pub test_fraction: f64,
    pub psi_group: PsiGroup,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            mode: Mode::Vfl,
            scheme: "he".into(),
            seed: 0,
            key_bits: 1024,
            test_fraction: 0.2,
            psi_group: PsiGroup::Modp2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_samples: usize,
    pub n_features_a: usize,
    pub n_features_b: usize,
    /// Defaults to [`SyntheticSpec::default_weights`].
    pub true_weights: Option<Vec<f64>>,
    pub noise_sigma: f64,
    pub extra_a: usize,
    pub extra_b: usize,
    pub feature_scale: FeatureScale,
    /// Party CSVs for vertical runs; replace the synthetic data when set.
    pub csv_a: Option<PathBuf>,
    pub csv_b: Option<PathBuf>,
    /// Pooled labelled CSV for horizontal runs.
    pub csv: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_samples: 500,
            n_features_a: 3,
            n_features_b: 2,
            true_weights: None,
            noise_sigma: 0.1,
            extra_a: 0,
            extra_b: 0,
            feature_scale: FeatureScale::UnitNorm,
            csv_a: None,
            csv_b: None,
            csv: None,
        }
    }
}

impl DataSection {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        let n = self.n_features_a + self.n_features_b;
        SyntheticSpec {
            n_samples: self.n_samples,
            n_features_a: self.n_features_a,
            n_features_b: self.n_features_b,
            true_weights: self.true_weights.clone().unwrap_or_else(|| SyntheticSpec::default_weights(n)),
            noise_sigma: self.noise_sigma,
            seed,
            extra_a: self.extra_a,
            extra_b: self.extra_b,
            feature_scale: self.feature_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HflUpdate {
    #[default]
    Gradient,
    Fedavg,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HflSection {
    pub clients: usize,
    pub split: SplitScheme,
    pub update: HflUpdate,
    pub epochs: u32,
    pub batch_size: usize,
    /// Standard deviation for the `dp` scheme.
    pub noise_sigma: f64,
}

impl Default for HflSection {
    fn default() -> Self {
        Self {
            clients: 10,
            split: SplitScheme::Iid,
            update: HflUpdate::Gradient,
            epochs: 5,
            batch_size: 16,
            noise_sigma: 0.01,
        }
    }
}

/// A run description, read from TOML with sections `[experiment]`,
/// `[data]`, `[hyperparams]` and `[hfl]`. Every key has a default.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub hyperparams: Hyperparams,
    pub hfl: HflSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> crate::Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative CSV paths resolve against its directory.
    pub fn from_path(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.csv_a, &mut cfg.data.csv_b, &mut cfg.data.csv].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let f = self.experiment.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config("test_fraction must lie strictly between 0 and 1".into()));
        }
        if self.experiment.mode == Mode::Vfl && self.experiment.scheme != "he" {
            return Err(Error::Config(format!(
                "vertical training is homomorphic only; scheme {:?} is not available",
                self.experiment.scheme
            )));
        }
        self.hyperparams.validate()?;
        Ok(())
    }

    pub fn hfl_config(&self) -> crate::Result<HflConfig> {
        let h = &self.hyperparams;
        let cfg = HflConfig {
            scheme: MaskScheme::parse(&self.experiment.scheme, self.hfl.noise_sigma)?,
            mode: match self.hfl.update {
                HflUpdate::Gradient => UpdateMode::Gradient,
                HflUpdate::Fedavg => UpdateMode::ModelDelta {
                    epochs: self.hfl.epochs,
                    batch_size: self.hfl.batch_size,
                },
            },
            learning_rate: h.learning_rate,
            reg_lambda: h.reg_lambda,
            max_rounds: h.max_iters,
            loss_tolerance: h.loss_tolerance,
            key_bits: self.experiment.key_bits,
            fixed_point_exponent: h.fixed_point_exponent,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Federated against pooled evaluation of one run. `delta_loss` is always
/// `|v_fed − v_sum|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub scheme: String,
    pub seed: u64,
    pub metric_name: String,
    /// Held-out metric of the federated model.
    pub v_fed: f64,
    /// Held-out metric of pooled gradient descent with the same hyperparameters.
    pub v_sum: f64,
    pub delta_loss: f64,
    /// Held-out metric of the closed-form ridge minimizer.
    pub v_ridge: f64,
    pub r2_fed: f64,
    pub r2_sum: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub rounds: usize,
    pub messages: usize,
    pub bytes_on_wire: u64,
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn check(&self) -> Result<(), HarnessError> {
        if self.delta_loss != (self.v_fed - self.v_sum).abs() {
            return Err(HarnessError::Report(format!(
                "delta_loss {:?} differs from |{:?} - {:?}|",
                self.delta_loss, self.v_fed, self.v_sum
            )));
        }
        Ok(())
    }

    pub fn to_pretty(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} experiment, scheme {}, seed {}", self.mode, self.scheme, self.seed);
        let _ = writeln!(s, "  samples        {} train / {} test", self.train_samples, self.test_samples);
        let _ = writeln!(s, "  {:<14} federated {:.6e}  pooled {:.6e}", self.metric_name, self.v_fed, self.v_sum);
        let _ = writeln!(s, "  delta_loss     {:.6e}", self.delta_loss);
        let _ = writeln!(s, "  ridge {:<8} {:.6e}", self.metric_name, self.v_ridge);
        let _ = writeln!(s, "  R2             federated {:.6}  pooled {:.6}", self.r2_fed, self.r2_sum);
        let _ = writeln!(s, "  rounds         {}", self.rounds);
        let _ = writeln!(s, "  traffic        {} messages, {} bytes", self.messages, self.bytes_on_wire);
        let _ = writeln!(s, "  wall time      {:.3} s", self.wall_time_secs);
        s
    }

    /// One `key = value` line per field; floats round-trip exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("mode", self.mode.to_string());
        put("scheme", self.scheme.clone());
        put("seed", self.seed.to_string());
        put("metric_name", self.metric_name.clone());
        put("v_fed", format!("{:?}", self.v_fed));
        put("v_sum", format!("{:?}", self.v_sum));
        put("delta_loss", format!("{:?}", self.delta_loss));
        put("v_ridge", format!("{:?}", self.v_ridge));
        put("r2_fed", format!("{:?}", self.r2_fed));
        put("r2_sum", format!("{:?}", self.r2_sum));
        put("train_samples", self.train_samples.to_string());
        put("test_samples", self.test_samples.to_string());
        put("rounds", self.rounds.to_string());
        put("messages", self.messages.to_string());
        put("bytes_on_wire", self.bytes_on_wire.to_string());
        put("wall_time_secs", format!("{:?}", self.wall_time_secs));
        s
    }

    pub fn from_kv(text: &str) -> Result<Self, HarnessError> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Report(format!("not a key = value line: {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| HarnessError::Report(format!("missing {k}")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, HarnessError> {
            v.parse().map_err(|_| HarnessError::Report(format!("bad value for {k}: {v:?}")))
        }
        let f = |k: &str| get(k).and_then(|v| num::<f64>(k, v));
        let u = |k: &str| get(k).and_then(|v| num::<u64>(k, v));
        Ok(Self {
            mode: get("mode")?.parse().map_err(|_| HarnessError::Report("bad mode".into()))?,
            scheme: get("scheme")?.clone(),
            seed: u("seed")?,
            metric_name: get("metric_name")?.clone(),
            v_fed: f("v_fed")?,
            v_sum: f("v_sum")?,
            delta_loss: f("delta_loss")?,
            v_ridge: f("v_ridge")?,
            r2_fed: f("r2_fed")?,
            r2_sum: f("r2_sum")?,
            train_samples: u("train_samples")? as usize,
            test_samples: u("test_samples")? as usize,
            rounds: u("rounds")? as usize,
            messages: u("messages")? as usize,
            bytes_on_wire: u("bytes_on_wire")?,
            wall_time_secs: f("wall_time_secs")?,
        })
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: ExperimentReport,
    pub transcript: Transcript,
    /// Final federated model; A's coefficients first in vertical runs.
    pub model: Vec<f64>,
    /// Unmasked per-round gradients of a vertical run, A's first.
    pub fed_gradients: Vec<Vec<f64>>,
    /// Per-round global models of a horizontal run.
    pub fed_models: Vec<Vec<f64>>,
    /// Pooled gradient descent on the training split.
    pub pooled: Descent,
}

struct Run {
    report: ExperimentReport,
    transcript: Transcript,
    model: Vec<f64>,
    fed_gradients: Vec<Vec<f64>>,
    fed_models: Vec<Vec<f64>>,
    pooled: Descent,
}

/// Seeded holdout over `n` rows: `(train, test)`, each in ascending order.
fn holdout(n: usize, fraction: f64, seed: u64) -> crate::Result<(Vec<usize>, Vec<usize>)> {
    let test = ((n as f64) * fraction).round() as usize;
    if test == 0 || test >= n {
        return Err(Error::Config(format!(
            "{n} samples cannot be split with test_fraction {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "holdout"));
    let (mut te, mut tr) = (order[..test].to_vec(), order[test..].to_vec());
    te.sort_unstable();
    tr.sort_unstable();
    Ok((tr, te))
}

fn read_csv(path: &Path) -> crate::Result<DatasetPartition> {
    let file = std::fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(DatasetPartition::read_csv(file)?)
}

fn predictions(data: &DatasetPartition, model: &[f64]) -> Vec<f64> {
    (0..data.len()).map(|i| dot(data.features().row(i), model)).collect()
}

struct Evaluation {
    v_sum: f64,
    v_ridge: f64,
    r2_sum: f64,
    descent: Descent,
}

fn pooled_reference(
    train: &DatasetPartition,
    test: &DatasetPartition,
    objective: Objective,
    hp: &Hyperparams,
) -> crate::Result<Evaluation> {
    let y = train.labels().unwrap_or_default();
    let gd = gradient_descent(
        train.features(),
        y,
        objective,
        hp.learning_rate,
        hp.reg_lambda,
        hp.max_iters,
        hp.loss_tolerance,
    );
    let ridge = ridge_closed_form(train.features(), y, objective.ridge(hp.reg_lambda, train.len()))?;
    let truth = test.labels().unwrap_or_default();
    let p = predictions(test, &gd.theta);
    Ok(Evaluation {
        v_sum: mse(&p, truth),
        v_ridge: mse(&predictions(test, &ridge), truth),
        r2_sum: r_squared(&p, truth),
        descent: gd,
    })
}

fn run_vfl(cfg: &ExperimentConfig) -> crate::Result<Run> {
    let seed = cfg.experiment.seed;
    let (data_a, data_b) = match (&cfg.data.csv_a, &cfg.data.csv_b) {
        (Some(pa), Some(pb)) => (read_csv(pa)?.without_labels(), read_csv(pb)?),
        (None, None) => generate(&cfg.data.spec(seed))?,
        _ => return Err(Error::Config("csv_a and csv_b must be given together".into())),
    };
    if data_b.labels().is_none() {
        return Err(Error::Config("party B's data carries no labels".into()));
    }
    let group = match cfg.experiment.psi_group {
        PsiGroup::Modp2048 => GroupParams::modp_2048(),
        PsiGroup::Test256 => GroupParams::test_256(),
    };
    let (matched, mut transcript) = alignment::align(data_a.ids(), data_b.ids(), seed, &group)?;
    let (aligned_a, aligned_b) = matched.apply(&data_a, &data_b);
    vfl::safety_guard(&aligned_a)?;
    vfl::safety_guard(&aligned_b)?;

    let (train_rows, test_rows) = holdout(aligned_a.len(), cfg.experiment.test_fraction, seed)?;
    let (train_a, train_b) = (aligned_a.select_rows(&train_rows), aligned_b.select_rows(&train_rows));
    let test_b = aligned_b.select_rows(&test_rows);

    let mut out = vfl::train(&train_a, &train_b, &cfg.hyperparams, cfg.experiment.key_bits, seed)?;
    let rounds = out.rounds();
    transcript.extend(out.transcript.clone());
    out.party_a.serve(aligned_a.select_rows(&test_rows))?;
    out.party_b.serve(test_b.without_labels())?;
    let (scores, inference) = vfl::predict(test_b.ids(), &mut out.party_a, &mut out.party_b, seed)?;
    transcript.extend(inference);

    let pooled_train = pooled_vertical(&train_a, &train_b);
    let pooled_test = pooled_vertical(&aligned_a.select_rows(&test_rows), &test_b);
    let eval = pooled_reference(&pooled_train, &pooled_test, Objective::HalfSum, &cfg.hyperparams)?;
    // pooled_vertical sorts by id, so compare predictions to labels in that order.
    let sorted_truth = pooled_test.labels().unwrap_or_default();
    let fed_sorted: Vec<f64> = pooled_test
        .ids()
        .iter()
        .map(|id| scores[test_b.position(id).expect("test id")])
        .collect();
    let v_fed = mse(&fed_sorted, sorted_truth);
    let model: Vec<f64> = out.theta_a().iter().chain(out.theta_b()).copied().collect();
    let report = ExperimentReport {
        mode: Mode::Vfl,
        scheme: cfg.experiment.scheme.clone(),
        seed,
        metric_name: "MSE".into(),
        v_fed,
        v_sum: eval.v_sum,
        delta_loss: (v_fed - eval.v_sum).abs(),
        v_ridge: eval.v_ridge,
        r2_fed: r_squared(&fed_sorted, sorted_truth),
        r2_sum: eval.r2_sum,
        train_samples: train_rows.len(),
        test_samples: test_rows.len(),
        rounds,
        messages: transcript.len(),
        bytes_on_wire: transcript.bytes_on_wire(),
        wall_time_secs: 0.0,
    };
    let fed_gradients = (0..rounds)
        .map(|t| {
            let (ga, gb) = (&out.party_a.gradient_history()[t], &out.party_b.gradient_history()[t]);
            ga.iter().chain(gb).copied().collect()
        })
        .collect();
    Ok(Run { report, transcript, model, fed_gradients, fed_models: Vec::new(), pooled: eval.descent })
}

fn run_hfl(cfg: &ExperimentConfig) -> crate::Result<Run> {
    let seed = cfg.experiment.seed;
    let hcfg = cfg.hfl_config()?;
    let pooled = match &cfg.data.csv {
        Some(p) => read_csv(p)?,
        None => {
            let (a, b) = generate(&cfg.data.spec(seed))?;
            pooled_vertical(&a, &b)
        }
    };
    if pooled.labels().is_none() {
        return Err(Error::Config("horizontal data carries no labels".into()));
    }
    let (train_rows, test_rows) = holdout(pooled.len(), cfg.experiment.test_fraction, seed)?;
    let (train, test) = (pooled.select_rows(&train_rows), pooled.select_rows(&test_rows));
    let parts = partition_horizontal(&train, cfg.hfl.clients, cfg.hfl.split, seed)?;
    let out = hfl::train_rounds(&parts, &hcfg, seed)?;

    let eval = pooled_reference(&train, &test, Objective::Mean, &cfg.hyperparams)?;
    let truth = test.labels().unwrap_or_default();
    let p = predictions(&test, out.global_model());
    let v_fed = mse(&p, truth);
    let report = ExperimentReport {
        mode: Mode::Hfl,
        scheme: cfg.experiment.scheme.clone(),
        seed,
        metric_name: "MSE".into(),
        v_fed,
        v_sum: eval.v_sum,
        delta_loss: (v_fed - eval.v_sum).abs(),
        v_ridge: eval.v_ridge,
        r2_fed: r_squared(&p, truth),
        r2_sum: eval.r2_sum,
        train_samples: train_rows.len(),
        test_samples: test_rows.len(),
        rounds: out.rounds(),
        messages: out.transcript.len(),
        bytes_on_wire: out.transcript.bytes_on_wire(),
        wall_time_secs: 0.0,
    };
    Ok(Run {
        report,
        fed_models: out.history().iter().map(|m| m.model.clone()).collect(),
        model: out.global_model().to_vec(),
        transcript: out.transcript,
        fed_gradients: Vec::new(),
        pooled: eval.descent,
    })
}

/// Runs the federation described by `cfg` and its pooled reference on the
/// same holdout split.
pub fn run_experiment(cfg: &ExperimentConfig) -> crate::Result<RunArtifacts> {
    cfg.validate()?;
    let start = Instant::now();
    let mut run = match cfg.experiment.mode {
        Mode::Vfl => run_vfl(cfg)?,
        Mode::Hfl => run_hfl(cfg)?,
    };
    run.report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(RunArtifacts {
        report: run.report,
        transcript: run.transcript,
        model: run.model,
        fed_gradients: run.fed_gradients,
        fed_models: run.fed_models,
        pooled: run.pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vfl(sigma: f64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::parse(&format!(
            r#"
            [experiment]
            mode = "vfl"
            seed = 3
            key_bits = 512
            psi_group = "test256"
            [data]
            n_samples = 60
            n_features_a = 2
            n_features_b = 1
            noise_sigma = {sigma}
            extra_a = 5
            extra_b = 4
            [hyperparams]
            learning_rate = 0.5
            reg_lambda = 0.0
            max_iters = 60
            loss_tolerance = 1e-300
            "#
        ))
        .unwrap();
        cfg.data.true_weights = Some(vec![1.0, -2.0, 0.5]);
        cfg
    }

    #[test]
    fn config_defaults_and_errors() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert!(matches!(ExperimentConfig::parse("[data]\nbogus = 1"), Err(Error::Config(_))));
        assert!(ExperimentConfig::parse("[experiment]\nmode = \"tfl\"").is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.scheme = "pairwise".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.experiment.mode = Mode::Hfl;
        assert!(cfg.validate().is_ok());
        cfg.experiment.test_fraction = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn vfl_noiseless_run_is_lossless() {
        let art = run_experiment(&small_vfl(0.0)).unwrap();
        let r = &art.report;
        assert_eq!((r.train_samples, r.test_samples), (48, 12));
        assert!(r.delta_loss < 1e-6, "{}", r.to_pretty());
        assert!(r.r2_fed > 0.99);
        assert!(r.bytes_on_wire > 0 && r.messages == art.transcript.len());
        r.check().unwrap();
    }

    #[test]
    fn hfl_single_client_matches_pooled() {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.mode = Mode::Hfl;
        cfg.experiment.scheme = "none".into();
        cfg.data.n_samples = 80;
        cfg.data.feature_scale = FeatureScale::Standardized;
        cfg.hfl.clients = 1;
        cfg.hyperparams = Hyperparams { learning_rate: 0.1, max_iters: 40, ..Hyperparams::default() };
        let art = run_experiment(&cfg).unwrap();
        assert!(art.report.delta_loss < 1e-12);
        assert_eq!(art.model, art.pooled.theta);
        assert_eq!(art.fed_models, art.pooled.models);
        assert_eq!(art.report.rounds, 40);
    }

    #[test]
    fn report_kv_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.mode = Mode::Hfl;
        cfg.experiment.scheme = "pairwise".into();
        cfg.data.n_samples = 50;
        cfg.hfl.clients = 3;
        cfg.hyperparams.max_iters = 5;
        let r = run_experiment(&cfg).unwrap().report;
        let back = ExperimentReport::from_kv(&r.to_kv()).unwrap();
        assert_eq!(back, r);
        back.check().unwrap();
        assert_eq!(back.delta_loss, (back.v_fed - back.v_sum).abs());
        let tampered = r.to_kv().replace(&format!("v_fed = {:?}", r.v_fed), "v_fed = 12.5");
        assert!(ExperimentReport::from_kv(&tampered).unwrap().check().is_err());
        assert!(ExperimentReport::from_kv("mode = vfl").is_err());
    }

    #[test]
    fn guard_fires_before_training() {
        let mut cfg = small_vfl(0.1);
        cfg.data.n_samples = 2;
        cfg.data.extra_a = 0;
        cfg.data.extra_b = 0;
        let err = run_experiment(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
    }

    #[test]
    fn holdout_is_a_partition() {
        let (tr, te) = holdout(10, 0.2, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(holdout(1, 0.2, 1).is_err());
    }
}
