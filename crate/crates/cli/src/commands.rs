use std::path::Path;

use depthforge::audit::{corrupted_fixture, gradient_suite, run_suite};
use depthforge::eval::{evaluate, robustness_sweep, sweep_csv, DepthModel, GroundTruthOracle, MetricsReport};
use depthforge::geometry::write_point_cloud;
use depthforge::io::{load_checkpoint, save_checkpoint};
use depthforge::training::{fit, FitReport, FitState, StepOutcome, LOSS_CSV_HEADER};
use depthforge::units::SafeNet;
use depthforge::{Error, Result};
use serde_json::json;

use crate::config::RunConfig;
use crate::{EvalArgs, ExportArgs, GradcheckArgs, ModelSource, SweepArgs, TrainArgs, EXIT_CONFIG, EXIT_GRADCHECK};

const CHECKPOINT_FILE: &str = "checkpoint.dfck";

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn checkpoint_meta(cfg: &RunConfig, iteration: u64) -> serde_json::Value {
    json!({ "config": cfg.to_json(), "iteration": iteration })
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<(SafeNet, depthforge::io::Checkpoint)> {
    let mut model = SafeNet::new(cfg.net.clone(), cfg.train.seed)?;
    let ckpt = load_checkpoint(path)?;
    ckpt.restore(&mut model.store, None)?;
    Ok((model, ckpt))
}

fn model_for(cfg: &RunConfig, source: &ModelSource) -> Result<(Box<dyn DepthModel>, serde_json::Value)> {
    match &source.checkpoint {
        Some(path) => {
            let (model, _) = load_model(cfg, path)?;
            Ok((Box::new(model), json!({ "checkpoint": path })))
        }
        None => Ok((Box::new(GroundTruthOracle), json!("oracle"))),
    }
}

pub fn train(args: TrainArgs) -> Result<u8> {
    let mut cfg = args.common.resolve()?;
    if let Some(v) = args.iters {
        cfg.train.iterations = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;
    let scenes = cfg.scene_set()?;
    let mut model = SafeNet::new(cfg.net.clone(), cfg.train.seed)?;
    let mut state = FitState::new(&cfg.train)?;
    if let Some(path) = &args.resume {
        let ckpt = load_checkpoint(path)?;
        ckpt.restore(&mut model.store, Some(&mut state.adam))?;
        state.iteration = ckpt.meta["iteration"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint(format!("{} has no iteration in its metadata", path.display())))?;
    }
    let start = state.iteration;

    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    let every = cfg.train.checkpoint_every;
    let result = fit(&mut model, &mut state, &scenes, &cfg.train, |iter, outcome, m, st| {
        if let StepOutcome::Applied(l) = outcome {
            csv.push_str(&FitReport::csv_row(iter, l));
            csv.push('\n');
        }
        if every > 0 && st.iteration % every == 0 {
            let path = args.out.join(format!("checkpoint_{:06}.dfck", st.iteration));
            save_checkpoint(&path, &m.store, Some(&st.adam), &checkpoint_meta(&cfg, st.iteration))?;
        }
        Ok(())
    });
    // keep the rows up to a numeric abort
    std::fs::write(args.out.join("loss.csv"), &csv)?;
    let report = result?;

    save_checkpoint(
        &args.out.join(CHECKPOINT_FILE),
        &model.store,
        Some(&state.adam),
        &checkpoint_meta(&cfg, state.iteration),
    )?;
    let last = report.rows.last().map(|(_, l)| *l);
    write_json(
        &args.out.join("run.json"),
        &json!({
            "command": "train",
            "config": cfg.to_json(),
            "trainable_parameters": model.num_trainable(),
            "start_iteration": start,
            "end_iteration": state.iteration,
            "skipped": report.skipped,
            "final_loss": last,
        }),
    )?;
    match last {
        Some(l) => println!(
            "trained {} iterations: photo {:.6} smooth {:.6} seg {:.6}",
            state.iteration - start,
            l.photo,
            l.smooth,
            l.seg
        ),
        None => println!("trained {} iterations", state.iteration - start),
    }
    Ok(0)
}

pub fn eval(args: EvalArgs) -> Result<u8> {
    let mut cfg = args.common.resolve()?;
    if let Some(v) = args.cap {
        cfg.eval.cap = v;
    }
    cfg.eval.per_class |= args.per_class;
    cfg.validate()?;
    let (mut model, source) = model_for(&cfg, &args.source)?;
    let scenes = cfg.scene_set()?;
    let protocol = cfg.protocol();
    let result = evaluate(model.as_mut(), &scenes, &protocol, 1.0, cfg.eval.per_class)?;

    std::fs::create_dir_all(&args.out)?;
    let mut csv = format!("{}\n{}\n", MetricsReport::CSV_HEADER, result.metrics.csv_row());
    if let Some(classes) = &result.per_class {
        csv = format!("class,{}\nall,{}\n", MetricsReport::CSV_HEADER, result.metrics.csv_row());
        for (c, m) in classes {
            csv.push_str(&format!("{c},{}\n", m.csv_row()));
        }
    }
    std::fs::write(args.out.join("metrics.csv"), csv)?;
    write_json(
        &args.out.join("metrics.json"),
        &json!({
            "command": "eval",
            "config": cfg.to_json(),
            "model": source,
            "protocol": {
                "cap": protocol.cap,
                "min_depth": protocol.min_depth,
                "median_scaling": protocol.median_scaling,
            },
            "metrics": result.metrics,
            "per_class": result.per_class,
            "miou": result.miou,
        }),
    )?;
    let m = &result.metrics;
    println!(
        "abs_rel {:.6} sq_rel {:.6} rmse {:.6} a1 {:.4} over {} px",
        m.abs_rel, m.sq_rel, m.rmse, m.a1, m.n_pixels
    );
    Ok(0)
}

pub fn sweep(args: SweepArgs) -> Result<u8> {
    let mut cfg = args.common.resolve()?;
    if let Some(v) = args.cap {
        cfg.eval.cap = v;
    }
    if let Some(v) = args.scales {
        cfg.eval.scales = v;
    }
    cfg.validate()?;
    let (mut model, source) = model_for(&cfg, &args.source)?;
    let scenes = cfg.scene_set()?;
    let rows = robustness_sweep(model.as_mut(), &scenes, &cfg.eval.scales, &cfg.protocol())?;

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("sweep.csv"), sweep_csv(&rows))?;
    write_json(
        &args.out.join("sweep.json"),
        &json!({ "command": "sweep", "config": cfg.to_json(), "model": source, "rows": rows }),
    )?;
    for r in &rows {
        println!("scale {:.3} sq_rel {:.6} abs_rel {:.6}", r.scale, r.metrics.sq_rel, r.metrics.abs_rel);
    }
    Ok(0)
}

pub fn gradcheck(args: GradcheckArgs) -> Result<u8> {
    let mut cases = gradient_suite();
    if args.corrupted {
        cases.push(corrupted_fixture());
    }
    let outcomes = run_suite(&cases, args.filter.as_deref());
    if outcomes.is_empty() {
        eprintln!("error: no gradient case matches {:?}", args.filter.unwrap_or_default());
        return Ok(EXIT_CONFIG);
    }
    println!("{:<28} {:>12} {:>10}  result", "case", "max_rel_err", "threshold");
    for o in &outcomes {
        let verdict = match (&o.error, o.passed()) {
            (Some(e), _) => format!("ERROR {e}"),
            (None, true) => "ok".into(),
            (None, false) => "FAIL".into(),
        };
        println!("{:<28} {:>12.3e} {:>10.0e}  {verdict}", o.name, o.max_rel_error, o.threshold);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name).collect();
    if failed.is_empty() {
        println!("{} cases passed", outcomes.len());
        Ok(0)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(EXIT_GRADCHECK)
    }
}

pub fn export_pointcloud(args: ExportArgs) -> Result<u8> {
    let cfg = args.common.resolve()?;
    cfg.validate()?;
    let (mut model, source) = model_for(&cfg, &args.source)?;
    let scenes = cfg.scene_set()?;
    let sample = scenes.get(args.index).ok_or_else(|| {
        Error::Config(format!("scene index {} out of range ({} scenes)", args.index, scenes.len()))
    })?;
    let depth = model.predict_depth(sample.target(), sample)?;
    let vertices = write_point_cloud(&args.out, &depth, sample.target(), &sample.intrinsics)?;
    write_json(
        &args.out.with_extension("json"),
        &json!({
            "command": "export-pointcloud",
            "config": cfg.to_json(),
            "model": source,
            "index": args.index,
            "vertices": vertices,
        }),
    )?;
    println!("wrote {vertices} vertices to {}", args.out.display());
    Ok(0)
}
