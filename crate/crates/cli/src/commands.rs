//! Subcommand implementations.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde_json::json;
use sfrg_core::metrics::{deletion_curve, insertion_curve, random_heatmap, Curve};
use sfrg_core::model::{
    blur_baseline, gaussian_blur, train_toy, BaselineConfig, DatasetConfig, SyntheticDataset, ToyCnn, TrainConfig,
    POSITIVE,
};
use sfrg_core::optimizer::{optimize, Method, OptimizerConfig};
use sfrg_core::perturbation::{apply_mask, complement_mask, subset_to_mask, upsample, Mask, PatchGrid, PatchSubset};
use sfrg_core::sag::{beam_search_mse, build_sag, diverse_roots, mse_statistics, Evaluator, MseRecord, SearchConfig};
use sfrg_core::xnn::{
    activation_batch, encode_srae, faithfulness_metric, linear_task, or_task, orthogonality_metric, shared_factor_task,
    srae_loss, train_srae, SraeConfig, XnnBatch,
};
use sfrg_core::Image;

use crate::cli::*;
use crate::imageio::{encode_heatmap_png, encode_png};
use crate::manifest::{digest_file, RunManifest, MANIFEST_FILE};
use crate::plot::curves_svg;
use crate::run::{curve_csv, file_stem, parse_patch_list, png_files, Invocation, Run};

pub fn dispatch(cli: Cli, inv: &Invocation) -> Result<()> {
    match cli.command {
        Command::TrainToy(a) => train_toy_cmd(&a, inv),
        Command::Explain(a) => explain(&a, inv),
        Command::Evaluate(a) => evaluate(&a, inv),
        Command::Sag(a) => sag(&a, inv),
        Command::Stats(a) => stats(&a, inv),
        Command::Xnn(XnnCommand::Train(a)) => xnn_train(&a, inv),
        Command::Serve(a) => crate::service::serve_cmd(&a, inv),
        Command::Render(a) => render(&a, inv),
        Command::Replay(a) => replay(&a),
    }
}

impl BaselineArgs {
    pub fn config(&self) -> BaselineConfig {
        BaselineConfig { sigma: self.baseline_sigma, epsilon: self.baseline_epsilon }
    }
}

impl SearchArgs {
    pub fn config(&self) -> Result<SearchConfig> {
        let cfg = SearchConfig {
            grid_rows: self.grid,
            grid_cols: self.grid,
            beam_width: self.beam,
            max_subset_size: self.max_size,
            threshold_ratio: self.tau,
            diversity_overlap: self.overlap,
            max_roots: self.max_roots,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train_toy_cmd(a: &TrainToyArgs, inv: &Invocation) -> Result<()> {
    let mut run = Run::start(inv, "train-toy", &a.out)?;
    let data_cfg = DatasetConfig {
        train_count: a.train_count,
        heldout_count: a.heldout_count,
        seed: a.dataset_seed,
        ..DatasetConfig::default()
    };
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        hidden: a.hidden.unwrap_or(defaults.hidden),
        ..defaults
    };
    run.seed("seed", a.seed);
    run.seed("dataset_seed", a.dataset_seed);
    run.config(&json!({ "dataset": data_cfg, "training": train_cfg, "dump_dataset": a.dump_dataset }))?;
    let dataset = SyntheticDataset::generate(data_cfg)?;
    let (model, report) = train_toy(&dataset, &train_cfg, a.seed)?;
    run.out.write("model.sfm", &sfrg_core::model::file::encode_cnn(&model))?;
    run.out.write_json("train_report.json", &report)?;
    if a.dump_dataset {
        let mut labels = String::from("file,label,features\n");
        for (i, s) in dataset.heldout.iter().enumerate() {
            let sub = if s.label == POSITIVE { "pos" } else { "neg" };
            let name = format!("dataset/heldout/{sub}/{i:04}.png");
            run.out.write(&name, &encode_png(&s.image)?)?;
            labels.push_str(&format!("{name},{},{}\n", s.label, s.features.len()));
        }
        run.out.write("dataset/labels.csv", labels.as_bytes())?;
    }
    println!(
        "trained toy CNN: held-out accuracy {:.3}, train accuracy {:.3}",
        report.heldout_accuracy, report.train_accuracy
    );
    run.finish()?;
    Ok(())
}

fn explain(a: &ExplainArgs, inv: &Invocation) -> Result<()> {
    let mut run = Run::start(inv, "explain", &a.out)?;
    let model = run.load_model(&a.model)?;
    let image = run.load_image(&a.image)?;
    let method: Method = a.method.parse()?;
    let mut cfg = OptimizerConfig::for_method(method, a.resolution).with_seed(a.seed);
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* };
    }
    set!(lambda_l1, lambda_tv, lambda_ins, tv_beta, ig_steps, noise_sigma, max_iterations, metric_steps);
    if let Some(s) = a.btv_sigma {
        cfg.btv_sigma = Some(s);
    }
    if a.plain_tv {
        cfg.btv_sigma = None;
    }
    cfg.btv_full_resolution |= a.btv_full_resolution;
    cfg.baseline = a.baseline.config();
    cfg.validate()?;
    run.seed("seed", a.seed);
    run.config(&json!({ "method": method, "class_index": a.class, "optimizer": cfg }))?;

    let result = optimize(&model, &image, a.class, &cfg)?;
    run.out.write("heatmap.png", &encode_heatmap_png(&result.heatmap, image.height(), image.width())?)?;
    run.out.write_json("mask.json", &result.mask)?;
    run.out.write_json("heatmap.json", &result.heatmap)?;
    write_curves(&mut run, &[("deletion", &result.deletion), ("insertion", &result.insertion)])?;
    run.out.write_json("result.json", &result.without_timing())?;
    println!(
        "{:?}: deletion AUC {:.4}, insertion AUC {:.4} after {} iterations",
        method, result.deletion.auc, result.insertion.auc, result.iterations
    );
    run.finish()?;
    Ok(())
}

/// `<name>.csv` per curve, `curves.json` with all of them and `curves.svg`.
fn write_curves(run: &mut Run, curves: &[(&str, &Curve)]) -> Result<()> {
    let mut all = serde_json::Map::new();
    for (name, curve) in curves {
        run.out.write(&format!("{name}.csv"), curve_csv(curve).as_bytes())?;
        all.insert(name.to_string(), serde_json::to_value(curve)?);
    }
    run.out.write_json("curves.json", &all)?;
    run.out.write("curves.svg", curves_svg(curves).as_bytes())?;
    Ok(())
}

fn read_heatmap(run: &mut Run, path: &Path) -> Result<Mask> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let bytes = run.read_input(path)?;
        let mask: Mask = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        return Ok(mask.checked()?);
    }
    let img = run.load_image(path)?;
    Ok(Mask::new(img.height(), img.width(), img.luminance())?)
}

fn evaluate(a: &EvaluateArgs, inv: &Invocation) -> Result<()> {
    let mut run = Run::start(inv, "evaluate", &a.out)?;
    let model = run.load_model(&a.model)?;
    let image = run.load_image(&a.image)?;
    let heatmap = read_heatmap(&mut run, &a.heatmap)?;
    run.seed("random_seed", a.random_seed);
    run.config(&json!({ "class_index": a.class, "steps": a.steps, "baseline": a.baseline.config() }))?;
    let baseline = blur_baseline(&model, &image, a.class, a.baseline.config())?;
    let random = random_heatmap(image.height(), image.width(), a.random_seed);
    let curve = |h: &Mask, deletion: bool| {
        if deletion {
            deletion_curve(&model, &image, h, a.class, a.steps, &baseline.image)
        } else {
            insertion_curve(&model, &image, h, a.class, a.steps, &baseline.image)
        }
    };
    let del = curve(&heatmap, true)?;
    let ins = curve(&heatmap, false)?;
    let rdel = curve(&random, true)?;
    let rins = curve(&random, false)?;
    write_curves(
        &mut run,
        &[("deletion", &del), ("insertion", &ins), ("random_deletion", &rdel), ("random_insertion", &rins)],
    )?;
    run.out.write_json(
        "summary.json",
        &json!({
            "baseline_sigma": baseline.sigma,
            "baseline_confidence": baseline.confidence,
            "deletion_auc": del.auc,
            "insertion_auc": ins.auc,
            "random_deletion_auc": rdel.auc,
            "random_insertion_auc": rins.auc,
            "deletion_below_random": del.auc <= rdel.auc,
            "insertion_above_random": ins.auc >= rins.auc,
        }),
    )?;
    println!(
        "deletion AUC {:.4} (random {:.4}), insertion AUC {:.4} (random {:.4})",
        del.auc, rdel.auc, ins.auc, rins.auc
    );
    run.finish()?;
    Ok(())
}

fn mse_json(records: &[MseRecord]) -> serde_json::Value {
    records
        .iter()
        .map(|r| json!({ "patches": r.subset.members(), "confidence": r.confidence, "minimal": r.minimal }))
        .collect()
}

fn sag(a: &SagArgs, inv: &Invocation) -> Result<()> {
    let mut run = Run::start(inv, "sag", &a.out)?;
    let model = run.load_model(&a.model)?;
    let image = run.load_image(&a.image)?;
    let cfg = a.search.config()?;
    let image_id = a.image_id.clone().unwrap_or_else(|| file_stem(&a.image));
    run.config(&json!({ "class_index": a.class, "image_id": image_id, "search": cfg, "baseline": a.baseline.config() }))?;
    let baseline = blur_baseline(&model, &image, a.class, a.baseline.config())?;
    let grid = PatchGrid::for_image(cfg.grid_rows, cfg.grid_cols, &image)?;
    let eval = Evaluator::new(&model, &image, &baseline.image, a.class, grid)?;
    let mses = beam_search_mse(&eval, &cfg)?;
    let roots = diverse_roots(&mses, cfg.diversity_overlap, cfg.max_roots);
    let graph = build_sag(&eval, &image_id, &roots)?;
    if mses.is_empty() {
        run.note(format!("no MSE found within {} patches", cfg.max_subset_size));
    }
    run.out.write("sag.json", format!("{}\n", graph.to_json()).as_bytes())?;
    run.out.write("sag.dot", graph.to_dot().as_bytes())?;
    run.out.write_json(
        "mses.json",
        &json!({
            "image_id": image_id,
            "class_index": a.class,
            "full_confidence": eval.full_confidence(),
            "threshold": cfg.threshold_ratio * eval.full_confidence(),
            "baseline_sigma": baseline.sigma,
            "baseline_confidence": baseline.confidence,
            "mses": mse_json(&mses),
            "roots": mse_json(&roots),
        }),
    )?;
    println!(
        "{image_id}: {} MSEs, {} diverse roots, SAG with {} nodes and {} edges",
        mses.len(),
        roots.len(),
        graph.nodes.len(),
        graph.edges.len()
    );
    run.finish()?;
    Ok(())
}

fn stats(a: &StatsArgs, inv: &Invocation) -> Result<()> {
    let mut run = Run::start(inv, "stats", &a.out)?;
    let model = run.load_model(&a.model)?;
    let cfg = a.search.config()?;
    run.config(&json!({ "class_index": a.class, "search": cfg, "baseline": a.baseline.config() }))?;
    let files = png_files(&a.images)?;
    ensure!(!files.is_empty(), "no PNG images in {}", a.images.display());
    let mut results = Vec::new();
    let mut rows = Vec::new();
    let mut csv = String::from("image,mse_count,diverse_count,smallest_size\n");
    for path in &files {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let image = run.load_image(path)?;
        let baseline = match blur_baseline(&model, &image, a.class, a.baseline.config()) {
            Ok(b) => b,
            Err(e) => {
                run.note(format!("skipped {name}: {e}"));
                continue;
            }
        };
        let grid = PatchGrid::for_image(cfg.grid_rows, cfg.grid_cols, &image)?;
        let eval = Evaluator::new(&model, &image, &baseline.image, a.class, grid)?;
        let mses = beam_search_mse(&eval, &cfg)?;
        let diverse = diverse_roots(&mses, cfg.diversity_overlap, usize::MAX).len();
        let smallest = mses.iter().map(|m| m.subset.len()).min();
        csv.push_str(&format!(
            "{name},{},{diverse},{}\n",
            mses.len(),
            smallest.map_or(String::new(), |s| s.to_string())
        ));
        rows.push(json!({ "image": name, "mse_count": mses.len(), "diverse_count": diverse, "smallest_size": smallest }));
        results.push(mses);
    }
    ensure!(!results.is_empty(), "every image failed its baseline check");
    let statistics = mse_statistics(&results, cfg.max_subset_size, cfg.diversity_overlap)?;
    run.out.write_json("stats.json", &json!({ "statistics": statistics, "images": rows }))?;
    run.out.write("stats.csv", csv.as_bytes())?;
    println!(
        "{} images: {:.1}% with ≥ 2 diverse MSEs, {:.1}% with ≥ 2 MSEs",
        statistics.images,
        100.0 * statistics.multiple_fraction_diverse,
        100.0 * statistics.multiple_fraction_all
    );
    run.finish()?;
    Ok(())
}

fn xnn_batch(a: &XnnTrainArgs, run: &mut Run) -> Result<XnnBatch> {
    let rows = 2 * a.train_rows;
    if let Some(path) = &a.model {
        let model: ToyCnn = run.load_model(path)?;
        let dataset = SyntheticDataset::generate(DatasetConfig {
            seed: a.dataset_seed,
            train_count: rows.max(DatasetConfig::default().train_count),
            ..DatasetConfig::default()
        })?;
        let images: Vec<Image> = dataset.train.iter().take(rows).map(|s| s.image.clone()).collect();
        return Ok(activation_batch(&model, &images, a.class)?);
    }
    let task = a.task.as_deref().unwrap_or_default();
    Ok(match task {
        "linear" => linear_task(rows, a.task_dim, 0.6, -0.4, a.dataset_seed)?,
        "shared" => shared_factor_task(rows, a.task_dim, a.dataset_seed)?,
        "or" => or_task(rows, a.task_dim, a.dataset_seed)?,
        other => bail!("unknown task {other:?} (expected linear, shared or or)"),
    })
}

fn xnn_train(a: &XnnTrainArgs, inv: &Invocation) -> Result<()> {
    let mut run = Run::start(inv, "xnn train", &a.out)?;
    ensure!(a.train_rows >= 2, "--train-rows must be at least 2");
    let defaults = SraeConfig::default();
    let cfg = SraeConfig {
        n_features: a.n,
        beta: a.beta.unwrap_or(defaults.beta),
        eta: a.eta.unwrap_or(defaults.eta),
        q: a.q.unwrap_or(defaults.q),
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        max_epochs: a.max_epochs.unwrap_or(defaults.max_epochs),
        ..defaults
    };
    cfg.validate()?;
    run.seed("seed", a.seed);
    run.seed("dataset_seed", a.dataset_seed);
    run.config(&json!({
        "source": if a.model.is_some() { "model".to_string() } else { a.task.clone().unwrap_or_default() },
        "class_index": a.class,
        "train_rows": a.train_rows,
        "task_dim": a.task_dim,
        "srae": cfg,
    }))?;
    let batch = xnn_batch(a, &mut run)?;
    let train = batch.slice(0, a.train_rows)?;
    let heldout = batch.slice(a.train_rows, batch.len())?;
    let (model, report) = train_srae(&train, &cfg, a.seed)?;
    run.out.write("srae.sfm", &encode_srae(&model))?;
    let metrics = json!({
        "report": report,
        "train": {
            "loss": srae_loss(&model, &train)?,
            "faithfulness": faithfulness_metric(&model, &train)?,
            "orthogonality": orthogonality_metric(&model, &train)?,
        },
        "heldout": {
            "loss": srae_loss(&model, &heldout)?,
            "faithfulness": faithfulness_metric(&model, &heldout)?,
            "orthogonality": orthogonality_metric(&model, &heldout)?,
        },
    });
    run.out.write_json("metrics.json", &metrics)?;
    let f = faithfulness_metric(&model, &heldout)?;
    println!(
        "SRAE with {} features: held-out faithfulness mse {:.3e}, correlation {}",
        cfg.n_features,
        f.mse,
        f.correlation.map_or("undefined".to_string(), |c| format!("{c:.4}"))
    );
    run.finish()?;
    Ok(())
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let (h, w) = text.split_once(['x', 'X']).context("size must look like HEIGHTxWIDTH")?;
    let (h, w) = (h.trim().parse()?, w.trim().parse()?);
    ensure!(h > 0 && w > 0, "size must be positive");
    Ok((h, w))
}

fn render(a: &RenderArgs, inv: &Invocation) -> Result<()> {
    let mut run = Run::start(inv, "render", &a.out)?;
    let png = if let Some(path) = &a.mask {
        let bytes = run.read_input(path)?;
        let mut mask: Mask = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        mask = mask.checked()?;
        if a.invert {
            mask = complement_mask(&mask);
        }
        let (h, w) = match &a.size {
            Some(s) => parse_size(s)?,
            None => (mask.rows(), mask.cols()),
        };
        run.config(&json!({ "invert": a.invert, "height": h, "width": w }))?;
        encode_heatmap_png(&upsample(&mask, h, w)?, h, w)?
    } else {
        let path = a.image.as_ref().context("either --mask or --image with --patches is required")?;
        let image = run.load_image(path)?;
        let members = parse_patch_list(a.patches.as_deref().unwrap_or_default()).map_err(anyhow::Error::msg)?;
        let grid = PatchGrid::for_image(a.grid, a.grid, &image)?;
        let subset = PatchSubset::new(grid.patch_count(), members)?;
        run.config(&json!({ "grid": a.grid, "sigma": a.sigma, "patches": subset.members() }))?;
        let baseline = gaussian_blur(&image, a.sigma)?;
        encode_png(&apply_mask(&image, &baseline, &subset_to_mask(&subset, &grid)?)?)?
    };
    run.out.write("render.png", &png)?;
    run.finish()?;
    Ok(())
}

/// Replaces the value of `--out` in a recorded argument list.
pub fn replace_out(argv: &[String], out: &Path) -> Result<Vec<String>> {
    let mut result = Vec::with_capacity(argv.len());
    let mut replaced = false;
    let mut i = 0;
    while i < argv.len() {
        if argv[i] == "--out" {
            result.push("--out".to_string());
            result.push(out.display().to_string());
            replaced = true;
            i += 2;
            continue;
        }
        if argv[i].starts_with("--out=") {
            result.push(format!("--out={}", out.display()));
            replaced = true;
        } else {
            result.push(argv[i].clone());
        }
        i += 1;
    }
    ensure!(replaced, "recorded arguments have no --out");
    Ok(result)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let path = if a.manifest.is_dir() { a.manifest.join(MANIFEST_FILE) } else { a.manifest.clone() };
    let recorded = RunManifest::load(&path)?;
    ensure!(
        !matches!(recorded.command.as_str(), "serve" | "replay"),
        "cannot replay a {} run",
        recorded.command
    );
    let cwd = Path::new(&recorded.cwd);
    for input in &recorded.inputs {
        let now = digest_file(&cwd.join(&input.path))?;
        ensure!(now.sha256 == input.sha256, "input {} changed since the recorded run", input.path);
    }
    let out = std::path::absolute(&a.out)?;
    let argv = replace_out(&recorded.argv, &out)?;
    let status = std::process::Command::new(std::env::current_exe()?)
        .args(&argv)
        .current_dir(cwd)
        .status()
        .context("re-running the recorded command")?;
    ensure!(status.success(), "re-run exited with {status}");
    let rerun = RunManifest::load(&out.join(MANIFEST_FILE))?;
    let mut mismatched = Vec::new();
    for o in &recorded.outputs {
        match rerun.outputs.iter().find(|r| r.path == o.path) {
            Some(r) if r.sha256 == o.sha256 => {}
            Some(_) => mismatched.push(format!("{} differs", o.path)),
            None => mismatched.push(format!("{} missing", o.path)),
        }
    }
    for r in &rerun.outputs {
        if !recorded.outputs.iter().any(|o| o.path == r.path) {
            mismatched.push(format!("{} is new", r.path));
        }
    }
    if !mismatched.is_empty() {
        bail!("replay differs from the recorded run: {}", mismatched.join(", "));
    }
    println!("replay identical: {} outputs match", recorded.outputs.len());
    Ok(())
}
