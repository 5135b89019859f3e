use std::path::Path;
use std::time::Instant;

use ltau::calib::{
    calibration_report, default_levels, ensemble_uncertainty, read_ensemble, read_vectors,
    write_vectors, GaussianInterval, MethodPredictions,
};
use ltau::knn::{read_index, write_index};
use ltau::reweight::{difficulty, weights, write_weights, MaeReference, SchemeKind, WeightScheme};
use ltau::reweight::{read_weights, DEFAULT_LAMBDA_EASY, DEFAULT_LAMBDA_HARD};
use ltau::toylab::{self, Activation, Mlp, TaskSpec, TrainConfig};
use ltau::trajlog::{
    build_pdf_bank, make_bin_grid, read_descriptor_set, read_pdf_bank, read_trajectory_log,
    write_descriptor_set, write_pdf_bank, write_trajectory_log,
};
use ltau::uq::{estimate, estimate_batch, fit_ood_threshold, OodPolicy, OodThreshold, UqEstimate};
use ltau::{
    DescriptorSet, EpsMaxPolicy, Error, FlatIndex, HnswIndex, HnswParams, PdfBank, Result, Spacing,
    VectorIndex,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::*;
use crate::output::{read_json, to_json, warn, write_json, write_text};

pub fn build_pdfs(a: &BuildPdfsArgs) -> Result<()> {
    let log = read_trajectory_log(&a.errs)?;
    if a.burn_in >= log.num_epochs() {
        return Err(Error::invalid(format!(
            "burn-in {} leaves no epochs out of {}",
            a.burn_in,
            log.num_epochs()
        )));
    }
    let spacing = match a.spacing {
        SpacingArg::Linear => Spacing::Linear,
        SpacingArg::Log => Spacing::Logarithmic,
    };
    let policy = a
        .eps_max
        .map_or(EpsMaxPolicy::TrainMax, EpsMaxPolicy::Explicit);
    let grid = make_bin_grid(&log, a.bins, spacing, policy)?;
    let bank = build_pdf_bank(&log, &grid, a.burn_in)?;
    write_pdf_bank(&a.out, &bank)
}

pub fn build_index(a: &BuildIndexArgs) -> Result<()> {
    let desc = read_descriptor_set(&a.desc)?;
    let index = if a.flat {
        VectorIndex::Flat(FlatIndex::build(desc)?)
    } else {
        let params = HnswParams {
            m: a.m,
            ef_construction: a.ef_construction,
            ef_search: a.ef_search,
        };
        VectorIndex::Hnsw(HnswIndex::build(desc, params, a.seed)?)
    };
    write_index(&a.out, &index)
}

#[derive(Serialize, Deserialize)]
struct CutoffFile {
    threshold: OodThreshold,
    num_train: usize,
}

pub fn ood_threshold(a: &OodThresholdArgs) -> Result<()> {
    let desc = read_descriptor_set(&a.desc)?;
    let index = read_index(&a.index)?;
    if index.descriptors() != &desc {
        return Err(Error::Shape(
            "descriptor file does not match the vectors stored in the index".into(),
        ));
    }
    let policy = a
        .cutoff
        .map_or(OodPolicy::Quantile(a.quantile), OodPolicy::Manual);
    let threshold = fit_ood_threshold(&desc, &index, policy)?;
    if threshold.degenerate {
        warn("cutoff is zero: every non-coincident query will be flagged");
    }
    write_json(
        &a.out,
        &json!({
            "command": "ood-threshold",
            "config": a,
            "threshold": threshold,
            "num_train": desc.len(),
        }),
    )
}

fn load_threshold(a: &PredictArgs) -> Result<Option<OodThreshold>> {
    if let Some(path) = &a.ood {
        let file: CutoffFile = read_json(path)?;
        return Ok(Some(file.threshold));
    }
    a.ood_cutoff.map(OodThreshold::manual).transpose()
}

fn check_pairing(index: &VectorIndex, bank: &PdfBank, queries: &DescriptorSet) -> Result<()> {
    if index.len() != bank.num_samples() {
        return Err(Error::Shape(format!(
            "index holds {} training samples but the PDF bank has {}",
            index.len(),
            bank.num_samples()
        )));
    }
    if queries.dim() != index.dim() {
        return Err(Error::Dimension {
            expected: index.dim(),
            actual: queries.dim(),
        });
    }
    Ok(())
}

fn clamp_k(k: usize, n: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        warn(&format!(
            "k = {k} exceeds the {n} indexed samples; using k = {n}"
        ));
        return Ok(n);
    }
    Ok(k)
}

fn flag_text(flag: Option<bool>) -> &'static str {
    match flag {
        Some(true) => "true",
        Some(false) => "false",
        None => "",
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let index = read_index(&a.index)?;
    let bank = read_pdf_bank(&a.pdfs)?;
    let queries = read_descriptor_set(&a.queries)?;
    let threshold = load_threshold(a)?;
    check_pairing(&index, &bank, &queries)?;
    if let Some(g) = a.group_size {
        if g == 0 || queries.len() % g != 0 {
            return Err(Error::Shape(format!(
                "{} queries cannot be split into groups of {g}",
                queries.len()
            )));
        }
    }
    let k = clamp_k(a.k, index.len())?;

    let estimates = estimate_batch(&queries, &index, &bank, k, threshold.as_ref())?;

    let mut w = csv::Writer::from_path(&a.out).map_err(|e| csv_error(&a.out, e))?;
    let mut header = vec!["query_id", "expected_error", "nn1_distance", "ood_flag"];
    if a.include_pdf {
        header.push("pdf");
    }
    w.write_record(&header).map_err(|e| csv_error(&a.out, e))?;
    for (i, e) in estimates.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            e.expected_error.to_string(),
            e.nn1_distance.to_string(),
            flag_text(e.ood_flag).to_string(),
        ];
        if a.include_pdf {
            row.push(serde_json::to_string(&e.pdf).expect("pdf serializes"));
        }
        w.write_record(&row).map_err(|e| csv_error(&a.out, e))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;

    if let Some(path) = &a.pdf_out {
        let pdfs = estimates
            .iter()
            .flat_map(|e| e.pdf.iter().copied())
            .collect();
        write_pdf_bank(
            path,
            &PdfBank::new(bank.grid().clone(), estimates.len(), pdfs)?,
        )?;
    }
    if let (Some(agg), Some(g), Some(path)) = (a.aggregate, a.group_size, &a.group_out) {
        write_groups(path, &estimates, agg, g)?;
    }
    Ok(())
}

fn write_groups(path: &Path, estimates: &[UqEstimate], agg: Aggregate, g: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["group_id", "expected_error", "nn1_distance", "ood_flag"])
        .map_err(|e| csv_error(path, e))?;
    for (gid, group) in estimates.chunks(g).enumerate() {
        let errs = group.iter().map(|e| e.expected_error);
        let value = match agg {
            Aggregate::Mean => errs.sum::<f64>() / g as f64,
            Aggregate::Max => errs.fold(f64::NEG_INFINITY, f64::max),
        };
        let nn1 = group
            .iter()
            .map(|e| e.nn1_distance)
            .fold(f64::NEG_INFINITY, f64::max);
        let flag = group
            .iter()
            .try_fold(false, |acc, e| e.ood_flag.map(|f| acc || f));
        w.write_record([
            gid.to_string(),
            value.to_string(),
            nn1.to_string(),
            flag_text(flag).to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn interval(a: IntervalArg) -> GaussianInterval {
    match a {
        IntervalArg::HalfNormal => GaussianInterval::HalfNormal,
        IntervalArg::OneSided => GaussianInterval::OneSided,
    }
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    if a.levels < 2 {
        return Err(Error::invalid("need at least two confidence levels"));
    }
    let (method, preds) = match (&a.pdfs, &a.truths, &a.ensemble, &a.targets) {
        (Some(pdfs), Some(truths), None, _) => {
            let bank = read_pdf_bank(pdfs)?;
            let (_, _, truths) = read_vectors(truths)?;
            if truths.len() != bank.num_samples() {
                return Err(Error::Shape(format!(
                    "{} truths for {} predicted PDFs",
                    truths.len(),
                    bank.num_samples()
                )));
            }
            ("ltau", MethodPredictions::from_bank(&bank, truths)?)
        }
        (None, _, Some(ens), Some(targets)) => {
            let ens = read_ensemble(ens)?;
            let (_, _, targets) = read_vectors(targets)?;
            if targets.len() != ens.points * ens.components {
                return Err(Error::Shape(format!(
                    "{} targets for {} points x {} components",
                    targets.len(),
                    ens.points,
                    ens.components
                )));
            }
            (
                "ensemble",
                ensemble_uncertainty(&ens, &targets, interval(a.interval))?,
            )
        }
        _ => {
            return Err(Error::invalid(
                "give either --pdfs with --truths or --ensemble with --targets",
            ))
        }
    };
    let report = calibration_report(
        a.method.as_deref().unwrap_or(method),
        &preds,
        &default_levels(a.levels),
    )?;
    write_text(&a.curve, &report.curve.to_csv())?;
    write_json(
        &a.report,
        &json!({ "command": "calibrate", "config": a, "report": report }),
    )
}

pub fn reweight(a: &ReweightArgs) -> Result<()> {
    let log = read_trajectory_log(&a.errs)?;
    let scheme = match a.scheme {
        SchemeArg::Hard => WeightScheme {
            kind: SchemeKind::UpweightHard,
            lambda: a.lambda.unwrap_or(DEFAULT_LAMBDA_HARD),
        },
        SchemeArg::Easy => WeightScheme {
            kind: SchemeKind::UpweightEasy,
            lambda: a.lambda.unwrap_or(DEFAULT_LAMBDA_EASY),
        },
        SchemeArg::Uniform => WeightScheme::uniform(),
    };
    let reference = a
        .mae
        .map_or(MaeReference::FinalEpochMae, MaeReference::Explicit);
    let scores = difficulty(&log, reference)?;
    let w = weights(&scores, scheme)?;
    write_weights(&a.out, &w)?;
    let (lo, hi) = w
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
            (l.min(x), h.max(x))
        });
    print!(
        "{}",
        to_json(&json!({
            "command": "reweight",
            "config": a,
            "scheme": scheme,
            "reference_mae": scores.reference_mae,
            "num_samples": w.len(),
            "min_weight": lo,
            "max_weight": hi,
            "mean_weight": w.iter().sum::<f64>() / w.len() as f64,
        }))
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    task: TaskSpec,
    train: TrainConfig,
    train_mae: f64,
    val_mae: f64,
    model: Mlp,
}

fn write_split(dir: &Path, name: &str, model: &Mlp, data: &toylab::Dataset) -> Result<()> {
    let n = data.len();
    write_descriptor_set(
        &dir.join(format!("{name}.desc")),
        &toylab::descriptors(model, data)?,
    )?;
    write_vectors(
        &dir.join(format!("{name}.truth")),
        1,
        n,
        &toylab::absolute_errors(model, data),
    )?;
    write_vectors(&dir.join(format!("{name}.sigma")), 1, n, &data.sigma)?;
    write_vectors(
        &dir.join(format!("{name}.inputs")),
        n,
        data.input_dim,
        &data.inputs,
    )
}

pub fn toy_train(a: &ToyTrainArgs) -> Result<()> {
    let spec = TaskSpec {
        input_dim: a.input_dim,
        n_train: a.n_train,
        n_val: a.n_val,
        n_test_id: a.n_test_id,
        n_test_ood: a.n_test_ood,
        cells_per_axis: a.cells_per_axis,
        sigma_min: a.sigma_min,
        sigma_max: a.sigma_max,
        ood_shift: a.ood_shift,
        seed: a.seed,
        ..TaskSpec::default()
    };
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        activation: match a.activation {
            ActivationArg::Silu => Activation::Silu,
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Softplus => Activation::Softplus,
        },
        seed: a.seed,
        ..TrainConfig::default()
    };
    let w = a.weights.as_deref().map(read_weights).transpose()?;
    if let Some(w) = &w {
        if w.len() != spec.n_train {
            return Err(Error::Shape(format!(
                "{} weights for {} training samples",
                w.len(),
                spec.n_train
            )));
        }
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;

    let task = toylab::generate_task(&spec)?;
    let out = toylab::train(&task, &config, w.as_deref())?;

    let dir = a.out_dir.as_path();
    write_trajectory_log(&dir.join("train.errs"), &out.trajectory)?;
    write_descriptor_set(&dir.join("train.desc"), &out.descriptors)?;
    write_split(dir, "test_id", &out.model, &task.test_id)?;
    write_split(dir, "test_ood", &out.model, &task.test_ood)?;
    write_json(
        &dir.join("model.json"),
        &json!({
            "command": "toy-train",
            "config": a,
            "result": ModelFile {
                task: spec,
                train: config,
                train_mae: out.train_mae,
                val_mae: out.val_mae,
                model: out.model,
            },
        }),
    )
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    ltau::uq::quantile(sorted, q)
}

fn best_of<F: FnMut() -> Result<()>>(repeat: usize, mut f: F) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeat.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let index = read_index(&a.index)?;
    let bank = read_pdf_bank(&a.pdfs)?;
    let queries = read_descriptor_set(&a.queries)?;
    check_pairing(&index, &bank, &queries)?;
    let model = match &a.model {
        Some(path) => {
            #[derive(Deserialize)]
            struct Wrapper {
                result: ModelFile,
            }
            let m: Wrapper = read_json(path)?;
            let (rows, cols, inputs) =
                read_vectors(a.inputs.as_ref().expect("clap requires inputs with model"))?;
            if rows != queries.len() || cols != m.result.model.input_dim() {
                return Err(Error::Shape(format!(
                    "inputs are {rows} x {cols}; expected {} x {}",
                    queries.len(),
                    m.result.model.input_dim()
                )));
            }
            Some((m.result.model, inputs, cols))
        }
        None => None,
    };
    let k = clamp_k(a.k, index.len())?;
    let q = queries.len();

    let batch = best_of(a.repeat, || {
        estimate_batch(&queries, &index, &bank, k, None).map(|_| ())
    })?;
    let mut latencies = Vec::with_capacity(q);
    for i in 0..q {
        let t = Instant::now();
        estimate(queries.row(i), &index, &bank, k, None)?;
        latencies.push(t.elapsed().as_secs_f64());
    }
    latencies.sort_by(f64::total_cmp);
    let uq_mean = latencies.iter().sum::<f64>() / q as f64;

    let mut report = json!({
        "command": "bench",
        "config": a,
        "index_kind": index.kind_name(),
        "num_indexed": index.len(),
        "dim": index.dim(),
        "num_queries": q,
        "k": k,
        "batch_seconds": batch,
        "batch_queries_per_second": q as f64 / batch,
        "latency_mean_us": uq_mean * 1e6,
        "latency_p50_us": percentile(&latencies, 0.5) * 1e6,
        "latency_p99_us": percentile(&latencies, 0.99) * 1e6,
    });
    if a.compare_flat {
        let flat = VectorIndex::Flat(FlatIndex::build(index.descriptors().clone())?);
        let flat_batch = best_of(a.repeat, || {
            estimate_batch(&queries, &flat, &bank, k, None).map(|_| ())
        })?;
        report["flat_batch_seconds"] = json!(flat_batch);
        report["speedup_vs_flat"] = json!(flat_batch / batch);
    }
    if let Some((model, inputs, d)) = model {
        let t = Instant::now();
        for x in inputs.chunks_exact(d) {
            std::hint::black_box(model.forward(x));
            std::hint::black_box(model.descriptor(x));
        }
        let model_mean = t.elapsed().as_secs_f64() / q as f64;
        report["model_latency_mean_us"] = json!(model_mean * 1e6);
        report["uq_share_percent"] = json!(100.0 * uq_mean / (uq_mean + model_mean));
    }
    let text = to_json(&report);
    match &a.out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
