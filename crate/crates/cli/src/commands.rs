//! Subcommand implementations. Each returns its results as values and writes
//! files only where the command's contract says so.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use oat_core::attacks::AttackSpec;
use oat_core::data::{BatchIterator, Dataset};
use oat_core::eval::{
    flops_count, jacobian_saliency, saliency_alignment, sweep_tradeoff, TradeoffPoint,
};
use oat_core::training::{train, StepReport};
use oat_core::{Model, ModelSpec};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_number, RunConfig};
use crate::error::{CliError, Result};
use crate::export::{normalize_u8, pgm, sweep_csv, unit_u8};
use crate::stats::{branch_separation, separation_csv, stats_csv, Separation};

pub const CHECKPOINT_FILE: &str = "checkpoint.oat";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,steps,lr,loss,loss_clean,loss_adv";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Per-epoch means of the step reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub loss_clean: f64,
    pub loss_adv: f64,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.steps, r.lr, r.loss, r.loss_clean, r.loss_adv
        );
    }
    out
}

/// Trains in memory: builds data and model from `cfg` and runs the configured mode.
pub fn run_training(cfg: &RunConfig) -> Result<(Checkpoint<f32>, Vec<EpochLog>)> {
    let tc = cfg.train_config()?;
    let (train_set, _) = cfg.load_data()?;
    let mut model: Model<f32> = tc.build_model(train_set.image_shape(), train_set.classes())?;
    let per_epoch =
        BatchIterator::new(train_set.len(), tc.batch_size, tc.seed)?.batches_per_epoch();
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut steps = 0;
    train(&mut model, &train_set, &tc, |r: &StepReport| {
        let epoch = r.step / per_epoch;
        if logs.last().is_none_or(|l| l.epoch != epoch) {
            logs.push(EpochLog {
                epoch,
                ..Default::default()
            });
        }
        let l = logs.last_mut().expect("pushed");
        l.steps += 1;
        l.lr = r.lr;
        l.loss += r.loss;
        l.loss_clean += r.loss_clean;
        l.loss_adv += r.loss_adv;
        steps += 1;
    })?;
    for l in &mut logs {
        let n = l.steps as f64;
        l.loss /= n;
        l.loss_clean /= n;
        l.loss_adv /= n;
    }
    Ok((
        Checkpoint {
            config: cfg.clone(),
            model,
            step: steps,
        },
        logs,
    ))
}

/// Files written by a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: usize,
}

/// `train`: writes `checkpoint.oat` and `train_log.csv` into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (ckpt, logs) = run_training(cfg)?;
    std::fs::create_dir_all(&cfg.output).map_err(|e| CliError::io(&cfg.output, e))?;
    let checkpoint = cfg.output.join(CHECKPOINT_FILE);
    let log = cfg.output.join(LOG_FILE);
    ckpt.save(&checkpoint)?;
    write(&log, log_csv(&logs))?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        steps: ckpt.step,
    })
}

/// Builds an evaluation attack from a short name: `pgd20`, `pgd7`, `pgd`, `fgsm` or `mifgsm`.
///
/// `steps` overrides the iteration count of `pgd` (default 20) and `mifgsm` (default 10).
pub fn eval_attack(
    name: &str,
    epsilon: f64,
    steps: Option<usize>,
    step_size: f64,
) -> Result<AttackSpec> {
    let spec = match name
        .trim()
        .to_ascii_lowercase()
        .replace(['-', '_'], "")
        .as_str()
    {
        "pgd20" => AttackSpec::pgd(epsilon, step_size, 20),
        "pgd7" => AttackSpec::pgd(epsilon, step_size, 7),
        "pgd" => AttackSpec::pgd(epsilon, step_size, steps.unwrap_or(20)),
        "fgsm" => AttackSpec::fgsm(epsilon),
        "mifgsm" => AttackSpec::mi_fgsm(epsilon, steps.unwrap_or(10), 1.0),
        other => {
            return Err(CliError::Usage(format!(
                "unknown attack {other:?}; expected pgd20, pgd7, pgd, fgsm or mifgsm"
            )))
        }
    };
    spec.validate()?;
    Ok(spec)
}

/// Parses a comma list of numbers (fractions allowed).
pub fn parse_values(s: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(parse_number)
        .collect::<std::result::Result<_, _>>()
        .map_err(CliError::Usage)?;
    Ok(v)
}

#[derive(Clone, Debug)]
pub struct SweepArgs {
    pub lambdas: Vec<f64>,
    /// Empty means every width of the model.
    pub widths: Vec<f64>,
    pub attack: AttackSpec,
    pub seed: u64,
    /// Evaluate only the first `count` test images.
    pub count: Option<usize>,
}

/// Evaluates `ckpt` on `test`.
pub fn sweep(
    ckpt: &Checkpoint<f32>,
    test: &Dataset,
    args: &SweepArgs,
) -> Result<Vec<TradeoffPoint>> {
    let data = match args.count {
        Some(n) if n < test.len() => test.head(n),
        _ => test.clone(),
    };
    let widths = if args.widths.is_empty() {
        ckpt.model.spec().widths.clone()
    } else {
        args.widths.clone()
    };
    Ok(sweep_tradeoff::<f32, _>(
        &ckpt.model,
        &data,
        &args.lambdas,
        &widths,
        &args.attack,
        args.seed,
    )?)
}

/// `sweep`: evaluates a stored checkpoint on its test split and writes the CSV.
pub fn cmd_sweep(checkpoint: &Path, args: &SweepArgs, out: &Path) -> Result<Vec<TradeoffPoint>> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let test = ckpt.config.load_test()?;
    let points = sweep(&ckpt, &test, args)?;
    write(out, sweep_csv(&points))?;
    Ok(points)
}

/// Result of a saliency export.
#[derive(Clone, Debug)]
pub struct SaliencyOutcome {
    pub files: Vec<PathBuf>,
    /// Mean `|saliency|`-image cosine per `λ`.
    pub alignment: Vec<(f64, f64)>,
}

/// `saliency`: one original plus one map per `λ` for the first `count` test images.
pub fn cmd_saliency(
    checkpoint: &Path,
    lambdas: &[f64],
    count: usize,
    width: f64,
    out_dir: &Path,
) -> Result<SaliencyOutcome> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let test = ckpt.config.load_test()?;
    if count > test.len() {
        return Err(CliError::Usage(format!(
            "count {count} exceeds the {} test images",
            test.len()
        )));
    }
    let model: Model<f64> = ckpt.model.cast();
    let [c, h, w] = test.image_shape();
    if c != 1 {
        return Err(CliError::Usage(format!(
            "PGM export needs single-channel images, got {c} channels"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut sums = vec![0.0; lambdas.len()];
    for i in 0..count {
        let path = out_dir.join(format!("img{i:03}_original.pgm"));
        write(&path, pgm(w, h, &unit_u8(test.image(i))))?;
        files.push(path);
        for (j, &l) in lambdas.iter().enumerate() {
            let map = jacobian_saliency::<f64, _>(&model, &test, i, l, width)?;
            sums[j] += saliency_alignment(&map, test.image(i));
            let values: Vec<f64> = map.values.data().to_vec();
            let path = out_dir.join(format!("img{i:03}_lambda{l}.pgm"));
            write(&path, pgm(w, h, &normalize_u8(&values)))?;
            files.push(path);
        }
    }
    let n = count.max(1) as f64;
    let alignment = lambdas.iter().zip(sums).map(|(&l, s)| (l, s / n)).collect();
    Ok(SaliencyOutcome { files, alignment })
}

/// `stats-export`: running statistics CSV plus branch separations.
pub fn cmd_stats_export(checkpoint: &Path, out: &Path) -> Result<Vec<Separation>> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    write(out, stats_csv(&ckpt.model))?;
    let sep = branch_separation(&ckpt.model);
    let sep_path = out.with_extension("separation.csv");
    write(&sep_path, separation_csv(&sep))?;
    Ok(sep)
}

/// `flops`: multiply-adds per width.
pub fn flops_table(spec: &ModelSpec) -> Result<String> {
    let mut out = String::from("width,backbone,film,total,film_overhead\n");
    for &w in &spec.widths {
        let f = flops_count(spec, w)?;
        let _ = writeln!(
            out,
            "{w},{},{},{},{:.6}",
            f.backbone,
            f.film,
            f.total(),
            f.film_overhead()
        );
    }
    Ok(out)
}

/// Architecture described by a config, without data or training.
pub fn config_spec(cfg: &RunConfig) -> Result<ModelSpec> {
    let (input, classes) = match &cfg.data {
        crate::config::DataSource::Synth { size, classes, .. } => ([1, *size, *size], *classes),
        crate::config::DataSource::Idx { .. } => {
            let test = cfg.load_test()?;
            (test.image_shape(), test.classes())
        }
    };
    Ok(cfg.train_config()?.model_spec(input, classes)?)
}
