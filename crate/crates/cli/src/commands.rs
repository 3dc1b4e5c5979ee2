use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use tct_core::data::{
    generate_phantom_dataset, load_volume, save_labels, DatasetManifest, PhantomSpec, Split, SubDatasetSpec,
};
use tct_core::trainer::{evaluate, evaluate_with, predict_labels, train_run, Checkpoint, RunControl, TrainConfig};
use tct_core::verify::gradient_suite;

use crate::args::{ConfigOverrides, EvalArgs, GenDataArgs, GradcheckArgs, InferArgs, ReportArgs, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::report;

fn print_resolved(what: &str, value: &impl serde::Serialize) {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    println!("resolved {what}:\n{text}");
}

pub fn gen_data(args: GenDataArgs) -> CliResult {
    let mut datasets = SubDatasetSpec::parse_list(&args.datasets)
        .map_err(|e| CliError::Usage(format!("--datasets: {e}")))?;
    if args.test_count > 0 {
        datasets.push(SubDatasetSpec {
            id: "test".into(),
            annotated: (1..=args.num_classes).collect(),
            count: args.test_count,
            split: Split::Test,
        });
    }
    let spec = PhantomSpec::new(args.size, args.num_classes, datasets, args.seed);
    print_resolved("phantom spec", &spec);
    let manifest = generate_phantom_dataset(&spec, &args.out)?;
    let count: usize = manifest.datasets.iter().map(|d| d.samples.len()).sum();
    println!("wrote {count} samples to {}", args.out.display());
    Ok(())
}

fn override_values(o: &ConfigOverrides) -> Map<String, Value> {
    let mut m = Map::new();
    let mut set = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(key.to_owned(), v);
        }
    };
    set("epochs", o.epochs.map(Value::from));
    set("batch_size", o.batch_size.map(Value::from));
    set("patch_size", o.patch_size.map(|p| json!(p)));
    set("lr", o.lr.map(Value::from));
    set("beta1", o.beta1.map(Value::from));
    set("beta2", o.beta2.map(Value::from));
    set("eps", o.eps.map(Value::from));
    set("seed", o.seed.map(Value::from));
    set("base_width", o.base_width.map(Value::from));
    set("method", o.method.clone().map(Value::from));
    set("filter", o.filter.clone().map(Value::from));
    set("fixed_threshold", o.fixed_threshold.map(Value::from));
    set("binarize_level", o.binarize_level.map(Value::from));
    set("weighting", o.weighting.clone().map(Value::from));
    set("w_max", o.w_max.map(Value::from));
    set("ramp_epochs", o.ramp_epochs.map(Value::from));
    set("exclude_self_from_background", o.exclude_self_from_background.map(Value::from));
    set("foreground_prob", o.foreground_prob.map(Value::from));
    set("init", o.init.as_ref().map(|p| json!(p)));
    set("eval_every", o.eval_every.map(Value::from));
    m
}

/// Layers `base < config file < flags`. The base is the checkpoint's config
/// when resuming, else the defaults.
pub fn resolve_config(
    base: &TrainConfig,
    file: Option<&Path>,
    overrides: &ConfigOverrides,
) -> CliResult<TrainConfig> {
    let mut merged = match serde_json::to_value(base).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
        let Value::Object(m) = serde_json::from_str::<Value>(&text)
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?
        else {
            return Err(CliError::Usage(format!("--config {}: expected a JSON object", path.display())));
        };
        // the whole file must parse on its own so unknown keys name the file
        serde_json::from_value::<TrainConfig>(Value::Object(m.clone()))
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
        merged.extend(m);
    }
    merged.extend(override_values(overrides));
    let config: TrainConfig = serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::Usage(format!("invalid flag value: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn train(args: TrainArgs) -> CliResult {
    let base = match &args.resume {
        Some(path) => Checkpoint::load(path)?.meta.config,
        None => TrainConfig::default(),
    };
    let config = resolve_config(&base, args.config.as_deref(), &args.overrides)?;
    let base_name = if args.resume.is_some() { "checkpoint config" } else { "defaults" };
    println!("config precedence: {base_name} < config file < flags");
    print_resolved("config", &config);
    let manifest = DatasetManifest::load(&args.data)?;
    let control = RunControl {
        resume: args.resume.clone(),
        stop_after: args.stop_after,
        on_epoch: Some(Box::new(|row| {
            let dsc = row
                .dsc
                .as_ref()
                .map(|d| format!(" dsc {}", d.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")))
                .unwrap_or_default();
            println!(
                "epoch {:>3}  L_main {:.4}  L_aux {:.4}  L_con {:.4}  w {:.4}  total {:.4}{dsc}",
                row.epoch, row.l_main, row.l_aux, row.l_con, row.w, row.total
            );
        })),
    };
    let outcome = train_run(&config, &manifest, &args.out, control)?;
    println!("checkpoint {}", outcome.checkpoint_path.display());
    println!("log {}", outcome.log_path.display());
    Ok(())
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("--split: expected train or test, got {other:?}"))),
    }
}

pub fn eval(args: EvalArgs) -> CliResult {
    let manifest = DatasetManifest::load(&args.data)?;
    let split = match &args.split {
        Some(s) => parse_split(s)?,
        None if manifest.samples(Split::Test).next().is_some() => Split::Test,
        None => Split::Train,
    };
    print_resolved(
        "evaluation",
        &json!({
            "ckpt": args.ckpt,
            "data": args.data,
            "report": args.report,
            "oracle": args.oracle,
            "split": split,
        }),
    );
    let evaluation = match &args.ckpt {
        Some(path) if !args.oracle => evaluate(&Checkpoint::load(path)?.model()?, &manifest, split)?,
        _ => evaluate_with(&manifest, split, |_, truth| Ok(truth.clone()))?,
    };
    write_text(&args.report, &evaluation.to_csv())?;
    let s = &evaluation.summary;
    for (j, d) in s.mean_dsc.iter().enumerate() {
        let hd = s.mean_hd95[j].map_or_else(|| "undefined".to_owned(), |h| format!("{h:.3}"));
        println!("class {}  dsc {d:.4}  iou {:.4}  hd95 {hd}", j + 1, s.mean_iou[j]);
    }
    println!("mean dsc {:.4} over {} volumes", s.overall_dsc(), s.samples);
    Ok(())
}

pub fn infer(args: InferArgs) -> CliResult {
    print_resolved("inference", &json!({ "ckpt": args.ckpt, "volume": args.volume, "out": args.out }));
    let model = Checkpoint::load(&args.ckpt)?.model()?;
    let volume = load_volume(&args.volume)?;
    let labels = predict_labels(&model, &volume, model.config().patch_size)?;
    save_labels(&args.out, &labels)?;
    println!("wrote {:?} labels to {}", labels.dims, args.out.display());
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult {
    print_resolved("gradcheck", &json!({ "tol": args.tol }));
    let report = gradient_suite(args.tol)?;
    for c in &report.cases {
        let status = if c.passed { "ok" } else { "FAIL" };
        println!("{status:<4} {:<24} max rel error {:.3e} over {}", c.name, c.max_rel_error, c.checked);
    }
    if report.passed() {
        Ok(())
    } else {
        let worst = report.worst().expect("cases exist");
        Err(CliError::Verification(format!(
            "{} exceeds tolerance {:e} with {:.3e}",
            worst.name, args.tol, worst.max_rel_error
        )))
    }
}

pub fn report(args: ReportArgs) -> CliResult {
    print_resolved("report", &json!({ "runs": args.runs, "out": args.out, "svg": args.svg }));
    let runs = report::load_runs(&args.runs)?;
    write_text(&args.out, &report::merged_csv(&runs))?;
    if let Some(svg) = &args.svg {
        write_text(svg, &report::curves_svg(&runs))?;
    }
    println!("merged {} runs into {}", runs.len(), args.out.display());
    Ok(())
}

fn write_text(path: &PathBuf, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| tct_core::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use tct_core::losses::{FilterStrategy, Method};

    use super::*;

    #[test]
    fn flags_beat_file_beat_base() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.json");
        std::fs::write(&file, r#"{"epochs": 7, "lr": 0.002, "filter": "none"}"#).unwrap();
        let flags = ConfigOverrides {
            lr: Some(0.003),
            method: Some("tal".into()),
            ..ConfigOverrides::default()
        };
        let c = resolve_config(&TrainConfig::default(), Some(&file), &flags).unwrap();
        assert_eq!((c.epochs, c.lr, c.method, c.filter), (7, 0.003, Method::Tal, FilterStrategy::None));
        assert_eq!(c.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.json");
        std::fs::write(&file, r#"{"epoch": 7}"#).unwrap();
        let none = ConfigOverrides::default();
        let err = resolve_config(&TrainConfig::default(), Some(&file), &none).unwrap_err();
        assert!(err.to_string().contains("cfg.json"), "{err}");
        assert_eq!(err.exit_code(), 1);
        let flags = ConfigOverrides {
            method: Some("magic".into()),
            ..ConfigOverrides::default()
        };
        assert_eq!(resolve_config(&TrainConfig::default(), None, &flags).unwrap_err().exit_code(), 1);
        let flags = ConfigOverrides {
            epochs: Some(0),
            ..ConfigOverrides::default()
        };
        assert_eq!(resolve_config(&TrainConfig::default(), None, &flags).unwrap_err().exit_code(), 1);
    }
}
