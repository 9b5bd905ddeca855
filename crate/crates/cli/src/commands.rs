use std::path::{Path, PathBuf};

use capsgan_core::datasets::{
    load_cifar10_binary, load_mnist_idx, make_synthetic, LabeledDataset, SyntheticSpec,
};
use capsgan_core::evaluation::{
    gam_both, semi_sup_experiment, GamComparison, SemiSupConfig, SemiSupReport,
};
use capsgan_core::gan::{load_checkpoint, save_checkpoint, StepRecord};
use capsgan_core::{GanError, GanModel};
use serde::Serialize;

use crate::artifacts::{
    create_dir, npy_bytes, write_history, write_json, write_png_grid, write_text,
};
use crate::config::{DataConfig, ModelConfig, RunConfig};
use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.output.dir.clone();
    create_dir(&out)?;
    write_text(&cfg.to_toml(), &out.join(RESOLVED_CONFIG))?;
    Ok(out)
}

fn first(ds: LabeledDataset, limit: Option<usize>) -> Result<LabeledDataset, CliError> {
    match limit {
        Some(n) if n < ds.len() => Ok(ds.subset(&(0..n).collect::<Vec<_>>())?),
        Some(0) => Err(CliError::Validation("data.limit must be positive".into())),
        _ => Ok(ds),
    }
}

/// `(train, test)` in `[0, 1]`.
pub fn load_data(cfg: &DataConfig) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    match cfg {
        DataConfig::Synthetic(s) => {
            let test_spec = SyntheticSpec {
                samples_per_mode: s.test_samples_per_mode,
                ..s.spec
            };
            Ok((
                make_synthetic(&s.spec, s.train_seed)?,
                make_synthetic(&test_spec, s.test_seed)?,
            ))
        }
        DataConfig::Mnist(m) => {
            let train = load_mnist_idx(&m.train_images, &m.train_labels)?;
            let test = load_mnist_idx(&m.test_images, &m.test_labels)?;
            Ok((first(train, m.limit)?, test))
        }
        DataConfig::Cifar10(c) => {
            let train = load_cifar10_binary(&c.train)?;
            let test = load_cifar10_binary(&c.test)?;
            Ok((first(train, c.limit)?, test))
        }
    }
}

fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let gan = cfg.gan_config()?;
    if cfg.training.steps == 0 {
        return Err(CliError::Validation(
            "training.steps must be at least 1".into(),
        ));
    }
    let out = prepare_out(cfg)?;
    let (train, _) = load_data(&cfg.data)?;
    let images = train.to_signed();
    let mut model = GanModel::new(gan)?;
    log::info!(
        "training {} GAN: {} generator / {} discriminator parameters, {} steps on {} images",
        model.config.variant(),
        model.generator.count(),
        model.discriminator.count(),
        cfg.training.steps,
        train.len()
    );

    let ckpt_dir = out.join("checkpoints");
    let every = cfg.training.checkpoint_every;
    if every > 0 {
        create_dir(&ckpt_dir)?;
    }
    let mut records: Vec<StepRecord> = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut save_error: Option<CliError> = None;
    let result = model.train(&images, cfg.training.steps, |rec, m| {
        records.push(*rec);
        let done = rec.step + 1;
        if done % 100 == 0 {
            log::info!(
                "step {done}: d_loss {:.5} g_loss {:.5}",
                rec.d_loss,
                rec.g_loss
            );
        }
        if every > 0 && done % every == 0 && save_error.is_none() {
            let path = ckpt_dir.join(checkpoint_name(done));
            match save_checkpoint(m, &path) {
                Ok(()) => last_checkpoint = Some(path),
                Err(e) => save_error = Some(e.into()),
            }
        }
    });
    write_history(&records, &out.join("history.csv"))?;
    if let Some(e) = save_error {
        return Err(e);
    }
    match result {
        Ok(_) => {}
        Err(e @ GanError::Divergence { .. }) => {
            let last = last_checkpoint.map_or("none".to_string(), |p| p.display().to_string());
            return Err(CliError::Runtime(format!("{e}; last checkpoint: {last}")));
        }
        Err(e) => return Err(e.into()),
    }
    let final_path = out.join("model.ckpt");
    save_checkpoint(&model, &final_path)?;
    log::info!("wrote {}", final_path.display());
    Ok(())
}

pub fn generate(cfg: &mut RunConfig) -> Result<(), CliError> {
    let Some(path) = cfg.generate.checkpoint.clone() else {
        return Err(CliError::Validation(
            "generate needs a checkpoint (--checkpoint or generate.checkpoint)".into(),
        ));
    };
    if cfg.generate.n == 0 {
        return Err(CliError::Validation("generate.n must be at least 1".into()));
    }
    let model = load_checkpoint(&path)?;
    // record the network that actually produced the samples
    let c = &model.config;
    cfg.model = ModelConfig {
        preset: None,
        variant: None,
        generator: Some(c.generator.clone()),
        discriminator: Some(c.discriminator.clone()),
        optimizer: Some(c.optimizer),
        schedule: Some(c.schedule),
    };
    let out = prepare_out(cfg)?;
    let samples = model.generate(cfg.generate.n, cfg.seed)?;
    write_png_grid(&samples, &out.join("samples.png"))?;
    let npy = out.join("samples.npy");
    std::fs::write(&npy, npy_bytes(&samples)).map_err(|e| CliError::io(&npy, e))?;
    log::info!("wrote {} samples to {}", cfg.generate.n, out.display());
    Ok(())
}

#[derive(Serialize)]
struct GamFile<'a> {
    checkpoint_a: &'a Path,
    checkpoint_b: &'a Path,
    #[serde(flatten)]
    comparison: GamComparison,
}

pub fn gam(cfg: &RunConfig) -> Result<(), CliError> {
    let (Some(a_path), Some(b_path)) = (&cfg.gam.checkpoint_a, &cfg.gam.checkpoint_b) else {
        return Err(CliError::Validation(
            "gam needs two checkpoints (--a/--b or gam.checkpoint_a/b)".into(),
        ));
    };
    let out = prepare_out(cfg)?;
    let a = load_checkpoint(a_path)?;
    let b = load_checkpoint(b_path)?;
    let (_, test) = load_data(&cfg.data)?;
    let comparison = gam_both(&a, &b, &test.to_signed(), &cfg.gam.settings, cfg.seed)?;
    for r in [&comparison.forward, &comparison.reverse] {
        println!(
            "{}: r_samples {:.4} r_test {:.4} -> {:?}",
            r.orientation, r.r_samples, r.r_test, r.verdict
        );
    }
    write_json(
        &GamFile {
            checkpoint_a: a_path,
            checkpoint_b: b_path,
            comparison,
        },
        &out.join("gam_report.json"),
    )
}

#[derive(Serialize)]
struct Cell {
    checkpoint: PathBuf,
    n_labeled: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<SemiSupReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn semisup(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.semisup;
    if s.checkpoints.is_empty() {
        return Err(CliError::Validation(
            "semisup needs at least one checkpoint".into(),
        ));
    }
    if s.n_labeled.is_empty() {
        return Err(CliError::Validation("semisup.n_labeled is empty".into()));
    }
    s.spreading
        .validate()
        .map_err(|e| CliError::Validation(format!("semisup.spreading: {e}")))?;
    let out = prepare_out(cfg)?;
    let dir = out.join("semisup");
    create_dir(&dir)?;
    let (train, test) = load_data(&cfg.data)?;

    let mut rows: Vec<(String, Vec<Cell>)> = Vec::new();
    for (i, path) in s.checkpoints.iter().enumerate() {
        let model = load_checkpoint(path)?;
        let label = format!("{}-{}", model.config.variant(), i + 1);
        let mut cells = Vec::new();
        for &n in &s.n_labeled {
            let exp = SemiSupConfig {
                n_labeled: n,
                n_unlabeled: s.n_unlabeled,
                spreading: s.spreading,
            };
            let cell = match semi_sup_experiment(&model, &train, &test, &exp, cfg.seed) {
                Ok(r) => {
                    log::info!("{label} n={n}: error {:.4}", r.error_rate);
                    Cell {
                        checkpoint: path.clone(),
                        n_labeled: n,
                        report: Some(r),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("{label} n={n}: {e}");
                    Cell {
                        checkpoint: path.clone(),
                        n_labeled: n,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            write_json(&cell, &dir.join(format!("{label}_n{n}.json")))?;
            cells.push(cell);
        }
        rows.push((label, cells));
    }

    let table = summary_table(&s.n_labeled, &rows);
    print!("{table}");
    write_text(&table, &out.join("semisup_summary.md"))?;
    let failed = rows
        .iter()
        .flat_map(|(_, c)| c)
        .filter(|c| c.error.is_some())
        .count();
    if failed > 0 {
        let total = rows.len() * s.n_labeled.len();
        return Err(CliError::Validation(format!(
            "{failed} of {total} semi-supervised cells failed; see {}",
            dir.display()
        )));
    }
    Ok(())
}

/// Error rates with models as rows and labeled-set sizes as columns.
fn summary_table(ns: &[usize], rows: &[(String, Vec<Cell>)]) -> String {
    let mut t = String::from("| model |");
    for n in ns {
        t.push_str(&format!(" n = {n} |"));
    }
    t.push_str("\n|---|");
    t.push_str(&"---|".repeat(ns.len()));
    t.push('\n');
    for (label, cells) in rows {
        t.push_str(&format!("| {label} |"));
        for c in cells {
            match (&c.report, &c.error) {
                (Some(r), _) => t.push_str(&format!(" {:.4} |", r.error_rate)),
                (None, Some(e)) => t.push_str(&format!(" error: {e} |")),
                (None, None) => t.push_str(" |"),
            }
        }
        t.push('\n');
    }
    if let Some((_, cells)) = rows.first() {
        t.push_str("| majority baseline |");
        for c in cells {
            match &c.report {
                Some(r) => t.push_str(&format!(" {:.4} |", r.majority_baseline_error)),
                None => t.push_str(" |"),
            }
        }
        t.push('\n');
    }
    t
}
