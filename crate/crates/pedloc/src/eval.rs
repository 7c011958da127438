//! Evaluation harness: localization error by ground-truth distance bin,
//! classification accuracy, loss-head comparison experiments, and table
//! rendering.
//!
//! Binning rule (stated on every rendered report): each sample whose
//! ground-truth distance lies in (0, cutoff] is assigned to the nearest
//! bin center, ties toward the smaller center; samples beyond the cutoff
//! are excluded and counted separately. The overall figure is the
//! unweighted mean absolute error over included samples, not the mean of
//! bin means.

use crate::camera::normalize_keypoints;
use crate::dist::{jsu_sample, normal, JohnsonSuParams};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, map_indexed, uniform_open01};
use crate::locnet::{mean_abs_error, train, LocNet, LocNetConfig, LossKind, TrainSpec};
use crate::synth::{synth_scene, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Distance-bin layout for localization error reports.
#[derive(Debug, Clone, PartialEq)]
pub struct AleBins {
    pub centers: Vec<f64>,
    /// Samples with ground truth beyond this distance are excluded.
    pub cutoff: f64,
}

impl Default for AleBins {
    fn default() -> Self {
        AleBins {
            centers: vec![3.0, 8.0, 12.5, 17.5, 22.5, 27.5, 35.0],
            cutoff: 40.0,
        }
    }
}

impl AleBins {
    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::InvalidParameter("no bin centers".into()));
        }
        if self.centers.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidParameter(
                "bin centers must be positive and finite".into(),
            ));
        }
        if self.centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "bin centers must be strictly increasing".into(),
            ));
        }
        if self.cutoff < *self.centers.last().unwrap() {
            return Err(Error::InvalidParameter(
                "cutoff must not be below the last center".into(),
            ));
        }
        Ok(())
    }

    /// Index of the nearest center for an in-range ground truth; ties go
    /// to the smaller center. None beyond the cutoff.
    pub fn assign(&self, gt: f64) -> Option<usize> {
        if gt > self.cutoff {
            return None;
        }
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, c) in self.centers.iter().enumerate() {
            let d = (gt - c).abs();
            if d < best_dist {
                best_dist = d;
                best = i;
            }
        }
        Some(best)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AleBinStat {
    pub center: f64,
    pub count: usize,
    /// Mean absolute error in meters; None for an empty bin.
    pub ale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AleReport {
    pub method: String,
    pub bins: Vec<AleBinStat>,
    /// Unweighted mean absolute error over all included samples.
    pub overall: Option<f64>,
    pub included: usize,
    pub excluded: usize,
}

/// Bins (predicted, ground truth) distance pairs and averages absolute
/// errors per bin. Ground truths must be positive and finite.
pub fn ale_report(method: &str, predictions: &[(f64, f64)], bins: &AleBins) -> Result<AleReport> {
    bins.validate()?;
    let mut sums = vec![0.0; bins.centers.len()];
    let mut counts = vec![0usize; bins.centers.len()];
    let mut total = 0.0;
    let mut included = 0usize;
    let mut excluded = 0usize;
    for &(pred, gt) in predictions {
        if !(gt.is_finite() && gt > 0.0) {
            return Err(Error::InvalidInput(format!(
                "ground-truth distance {gt} must be positive and finite"
            )));
        }
        if !pred.is_finite() {
            return Err(Error::InvalidInput("non-finite prediction".into()));
        }
        match bins.assign(gt) {
            Some(i) => {
                let err = (pred - gt).abs();
                sums[i] += err;
                counts[i] += 1;
                total += err;
                included += 1;
            }
            None => excluded += 1,
        }
    }
    let stats = bins
        .centers
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(&center, (&sum, &count))| AleBinStat {
            center,
            count,
            ale: (count > 0).then(|| sum / count as f64),
        })
        .collect();
    Ok(AleReport {
        method: method.to_string(),
        bins: stats,
        overall: (included > 0).then(|| total / included as f64),
        included,
        excluded,
    })
}

/// Wraps externally published per-bin values verbatim (no recomputation),
/// for side-by-side rendering with measured reports.
pub fn ingest_report(method: &str, bins: &AleBins, values: &[f64]) -> Result<AleReport> {
    bins.validate()?;
    if values.len() != bins.centers.len() {
        return Err(Error::InvalidInput(format!(
            "expected {} per-bin values, got {}",
            bins.centers.len(),
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite ingested value".into()));
    }
    Ok(AleReport {
        method: method.to_string(),
        bins: bins
            .centers
            .iter()
            .zip(values)
            .map(|(&center, &v)| AleBinStat {
                center,
                count: 0,
                ale: Some(v),
            })
            .collect(),
        overall: None,
        included: 0,
        excluded: 0,
    })
}

fn fmt_center(c: f64) -> String {
    if c.fract() == 0.0 {
        format!("{}", c as i64)
    } else {
        format!("{c}")
    }
}

/// Plain-text table: methods as rows, bin centers as columns, 2-decimal
/// meters, `-` for empty bins, binning rule disclosed in the footer.
pub fn render_table(reports: &[AleReport], bins: &AleBins) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to render".into()));
    }
    bins.validate()?;
    for r in reports {
        if r.bins.len() != bins.centers.len() {
            return Err(Error::InvalidInput(format!(
                "report {:?} has {} bins, expected {}",
                r.method,
                r.bins.len(),
                bins.centers.len()
            )));
        }
    }
    let method_width = reports
        .iter()
        .map(|r| r.method.len())
        .chain(std::iter::once("method".len()))
        .max()
        .unwrap()
        .max(6);
    let mut out = String::new();
    out.push_str(&format!("{:<method_width$}", "method"));
    for c in &bins.centers {
        out.push_str(&format!("{:>8}", fmt_center(*c)));
    }
    out.push_str(&format!("{:>9}\n", "overall"));
    for r in reports {
        out.push_str(&format!("{:<method_width$}", r.method));
        for b in &r.bins {
            match b.ale {
                Some(v) => out.push_str(&format!("{:>8.2}", v)),
                None => out.push_str(&format!("{:>8}", "-")),
            }
        }
        match r.overall {
            Some(v) => out.push_str(&format!("{:>9.2}\n", v)),
            None => out.push_str(&format!("{:>9}\n", "-")),
        }
    }
    out.push_str(&format!(
        "# binning: nearest center, cutoff {} m; overall = unweighted mean over included samples\n",
        fmt_center(bins.cutoff)
    ));
    Ok(out)
}

/// Machine-readable variant: a tab-separated line per (method, bin) with
/// columns method, center, count, ale (`-` when undefined), full float
/// precision.
pub fn render_machine(reports: &[AleReport]) -> String {
    let mut out = String::from("method\tcenter\tcount\tale\n");
    for r in reports {
        for b in &r.bins {
            let ale = b.ale.map_or_else(|| "-".to_string(), |v| v.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.method,
                fmt_center(b.center),
                b.count,
                ale
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecall {
    pub class: usize,
    pub count: usize,
    /// Percent of this class's samples predicted correctly.
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    /// Overall accuracy in percent.
    pub accuracy: f64,
    pub total: usize,
    pub per_class: Vec<ClassRecall>,
}

/// Overall accuracy and per-class recall over the classes present in the
/// ground truth.
pub fn accuracy_report(predicted: &[usize], actual: &[usize]) -> Result<AccuracyReport> {
    if predicted.len() != actual.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} predictions vs {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::InvalidInput("empty label set".into()));
    }
    let mut correct = 0usize;
    let mut per_class: std::collections::BTreeMap<usize, (usize, usize)> =
        std::collections::BTreeMap::new();
    for (&p, &a) in predicted.iter().zip(actual) {
        let entry = per_class.entry(a).or_insert((0, 0));
        entry.0 += 1;
        if p == a {
            entry.1 += 1;
            correct += 1;
        }
    }
    Ok(AccuracyReport {
        accuracy: correct as f64 / actual.len() as f64 * 100.0,
        total: actual.len(),
        per_class: per_class
            .into_iter()
            .map(|(class, (count, hits))| ClassRecall {
                class,
                count,
                recall: hits as f64 / count as f64 * 100.0,
            })
            .collect(),
    })
}

pub fn render_accuracy(report: &AccuracyReport) -> String {
    let mut out = format!(
        "accuracy: {:.1}% over {} samples\n",
        report.accuracy, report.total
    );
    for c in &report.per_class {
        out.push_str(&format!(
            "class {:>3}: recall {:>5.1}% ({} samples)\n",
            c.class, c.recall, c.count
        ));
    }
    out
}

/// Label noise applied to the training and validation targets of a loss
/// comparison. Evaluation always scores against the exact distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetNoise {
    /// Targets equal the true distance.
    Clean,
    /// Symmetric, homoscedastic: adds `sigma` times a standard normal
    /// draw. Paired with a noise-free scene this is the control
    /// condition: the inputs determine the true distance exactly, so the
    /// conditional target distribution is symmetric around it and no
    /// loss head gains anything from modelling asymmetry.
    Gaussian { sigma: f64 },
    /// Asymmetric and distance-proportional: replaces the target with a
    /// draw whose location parameter equals the true distance and whose
    /// scale grows linearly with it (`kappa` per metre of ground truth).
    /// `gamma` and `delta` set the shape; negative `gamma` gives a long
    /// right tail, the regime where an asymmetric likelihood can place
    /// its location on the truth while symmetric fits get dragged into
    /// the tail.
    Skewed { gamma: f64, delta: f64, kappa: f64 },
}

/// One optimizer stage of a comparison schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareStage {
    pub learning_rate: f64,
    pub epochs: usize,
}

/// Optimizer schedule shared by every loss head in a comparison.
///
/// All heads train under the same homoscedastic protocol: only the
/// location output sees the inputs, while scale and shape outputs train
/// as global biases (see [`LocNet::set_shape_global`]). The asymmetry
/// parameter additionally stays frozen through the `warmup` stages and
/// is released for the `calibration` stages, so it settles against an
/// already-fitted location instead of steering it while the location is
/// still moving.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareSchedule {
    pub warmup: Vec<CompareStage>,
    pub calibration: Vec<CompareStage>,
    pub batch_size: usize,
    /// Starting value for the global scale biases.
    pub spread_init: f64,
}

impl Default for CompareSchedule {
    fn default() -> Self {
        CompareSchedule {
            warmup: vec![
                CompareStage {
                    learning_rate: 3e-3,
                    epochs: 200,
                },
                CompareStage {
                    learning_rate: 1e-3,
                    epochs: 100,
                },
            ],
            calibration: vec![
                CompareStage {
                    learning_rate: 3e-4,
                    epochs: 50,
                },
                CompareStage {
                    learning_rate: 1e-4,
                    epochs: 50,
                },
            ],
            batch_size: 256,
            spread_init: 2.0,
        }
    }
}

/// Everything needed to run the same localization experiment once per
/// loss head: one seeded synthetic dataset, one split, identical
/// architecture and schedule. All randomness derives from `seed`.
#[derive(Debug, Clone)]
pub struct CompareSpec {
    pub scene: SceneSpec,
    pub num_samples: usize,
    /// Fraction held out for validation and scoring, taken from the
    /// front of the sample stream (draws are i.i.d., so a contiguous
    /// slice is an unbiased split).
    pub val_fraction: f64,
    pub target_noise: TargetNoise,
    /// Network settings; the loss field is overridden per run.
    pub net: LocNetConfig,
    pub schedule: CompareSchedule,
    pub bins: AleBins,
    pub seed: u64,
}

impl Default for CompareSpec {
    fn default() -> Self {
        CompareSpec {
            scene: SceneSpec::default(),
            num_samples: 20_000,
            val_fraction: 0.2,
            target_noise: TargetNoise::Clean,
            net: LocNetConfig {
                hidden_dim: 64,
                dropout: 0.0,
                ..LocNetConfig::default()
            },
            schedule: CompareSchedule::default(),
            bins: AleBins::default(),
            seed: 0,
        }
    }
}

/// Outcome of one loss head under `compare_losses`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRun {
    pub loss: LossKind,
    /// ALE on the validation split against the true distances.
    pub report: AleReport,
    /// Fraction of validation samples whose true distance falls inside
    /// the predicted central 90% interval.
    pub coverage90: f64,
    /// Best validation epoch of the final schedule stage.
    pub best_epoch: usize,
    pub val_mae: f64,
}

/// Trains one model per loss kind on identical data and reports per-bin
/// ALE against the true distances. Targets may carry label noise
/// ([`TargetNoise`]); evaluation always uses the exact ground truth.
/// Fully deterministic for a given spec.
pub fn compare_losses(spec: &CompareSpec, losses: &[LossKind]) -> Result<Vec<LossRun>> {
    if losses.is_empty() {
        return Err(Error::InvalidInput("no loss kinds given".into()));
    }
    spec.bins.validate()?;
    let schedule = &spec.schedule;
    if schedule.warmup.is_empty() && schedule.calibration.is_empty() {
        return Err(Error::InvalidInput("schedule has no stages".into()));
    }
    let samples = synth_scene(spec.num_samples, &spec.scene, derive_seed(spec.seed, 0))?;
    let label_seed = derive_seed(spec.seed, 1);
    // (input, training target, true distance); samples with too few
    // visible joints are dropped up front so every loss sees identical
    // data.
    let mut triples = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let normalized = match normalize_keypoints(&s.keypoints, &spec.scene.intrinsics) {
            Ok(n) => n,
            Err(Error::InvalidInput(_)) => continue,
            Err(e) => return Err(e),
        };
        let d = s.gt_distance;
        let target = match spec.target_noise {
            TargetNoise::Clean => d,
            TargetNoise::Gaussian { sigma } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(label_seed, i as u64));
                d + sigma * normal::quantile(uniform_open01(&mut rng))
            }
            TargetNoise::Skewed {
                gamma,
                delta,
                kappa,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(label_seed, i as u64));
                let p = JohnsonSuParams::new(gamma, delta, kappa * d, d)?;
                jsu_sample(&p, &mut rng, 1)[0]
            }
        };
        triples.push((normalized.to_input(), target, d));
    }
    if triples.len() < 10 {
        return Err(Error::InvalidInput(
            "too few usable samples for a comparison".into(),
        ));
    }
    let val_len = (triples.len() as f64 * spec.val_fraction).round() as usize;
    if val_len == 0 || val_len >= triples.len() {
        return Err(Error::InvalidInput(
            "validation fraction leaves an empty split".into(),
        ));
    }
    let (val_t, train_t) = triples.split_at(val_len);
    let train_pairs: Vec<(Vec<f64>, f64)> = train_t
        .iter()
        .map(|(x, t, _)| (x.clone(), *t))
        .collect();
    let val_pairs: Vec<(Vec<f64>, f64)> = val_t
        .iter()
        .map(|(x, t, _)| (x.clone(), *t))
        .collect();
    let mean_target = train_pairs.iter().map(|(_, t)| t).sum::<f64>() / train_pairs.len() as f64;

    let mut runs = Vec::with_capacity(losses.len());
    for &loss in losses {
        let mut config = spec.net.clone();
        config.loss = loss;
        let mut model = LocNet::new(config, derive_seed(spec.seed, 2))?;
        model.init_location_bias(mean_target);
        model.init_spread_bias(schedule.spread_init, schedule.spread_init);
        model.set_shape_global(true);
        model.set_gamma_frozen(true);
        let mut best_epoch = 0;
        let num_warmup = schedule.warmup.len();
        for (k, stage) in schedule
            .warmup
            .iter()
            .chain(schedule.calibration.iter())
            .enumerate()
        {
            if k >= num_warmup {
                model.set_gamma_frozen(false);
            }
            let stage_spec = TrainSpec {
                learning_rate: stage.learning_rate,
                batch_size: schedule.batch_size,
                max_epochs: stage.epochs,
                patience: stage.epochs,
                seed: derive_seed(spec.seed, 10 + k as u64),
            };
            let report = train(&mut model, &train_pairs, &val_pairs, &stage_spec)?;
            best_epoch = report.best_epoch;
        }
        let val_mae = mean_abs_error(&model, &val_pairs)?;

        let preds = map_indexed(val_t.len(), |k| {
            let (x, _, gt) = &val_t[k];
            model.predict(x).map(|p| (p, *gt))
        });
        let mut pairs = Vec::with_capacity(preds.len());
        let mut covered = 0usize;
        for p in preds {
            let (pred, gt) = p?;
            if pred.lo <= gt && gt <= pred.hi {
                covered += 1;
            }
            pairs.push((pred.distance, gt));
        }
        runs.push(LossRun {
            loss,
            report: ale_report(loss.name(), &pairs, &spec.bins)?,
            coverage90: covered as f64 / val_t.len() as f64,
            best_epoch,
            val_mae,
        });
    }
    Ok(runs)
}
