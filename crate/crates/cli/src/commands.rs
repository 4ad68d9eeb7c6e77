// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use dave_core::attribution::{self, AttributionMap};
use dave_core::metrics::{self, BBox};
use dave_core::{fixtures, Method, Model, Tensor};

use dave_cli::manifest::{self, Record};
use dave_cli::ppm::Ppm;
use dave_cli::{mapfile, render};

use crate::{
    AttributeArgs, DiagnoseCommand, EvaluateArgs, EvaluateCommand, GenmodelArgs,
    InspectArgs, LogitsArgs, MethodArgs, ModelImage, Preset,
};

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

/// Reads a PPM of side `size` into model input space.
fn load_image(model: &Model, path: &Path, size: usize) -> Result<Tensor> {
    let ppm = Ppm::read(path)?;
    if ppm.width != size || ppm.height != size {
        bail!(
            "{} is {}x{}, expected {size}x{size}",
            path.display(),
            ppm.width,
            ppm.height
        );
    }
    Ok(ppm.to_model(model.config()))
}

fn load_pair(input: &ModelImage) -> Result<(Model, Tensor)> {
    let model = load_model(&input.model)?;
    let image = load_image(&model, &input.image, model.config().image_size)?;
    Ok((model, image))
}

/// `[H, W]` map from a `DAVEMAP1` file holding either `[3, H, W]` or `[H, W]`.
fn load_map(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let t = mapfile::read(path)?;
    let map = match t.shape().len() {
        3 => t.sum_channels()?,
        _ => t,
    };
    if map.shape() != [h, w] {
        bail!("{}: map has shape {:?}, expected [{h}, {w}]", path.display(), map.shape());
    }
    Ok(map)
}

fn compute(model: &Model, image: &Tensor, k: usize, m: &MethodArgs) -> Result<AttributionMap> {
    let t = &m.transform;
    let map = match Method::from(m.method) {
        Method::Effective => attribution::attribute_effective(model, image, k),
        Method::Dave => attribution::attribute_dave(model, image, k, &t.dave(m.samples)),
        Method::Equivariant => {
            attribution::attribute_equivariant(model, image, k, &t.dist(), m.samples, t.seed)
        }
        Method::InputXGradient => attribution::baseline_input_x_gradient(model, image, k),
        Method::SmoothGrad => {
            attribution::baseline_smoothgrad(model, image, k, m.samples, m.sigma, t.seed)
        }
        Method::IntGrad => {
            let baseline = Tensor::zeros(image.shape());
            attribution::baseline_intgrad(model, image, k, m.ig_steps, &baseline)
        }
    };
    Ok(map?)
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn score_cell(score: Option<f64>) -> String {
    score.map_or_else(|| "NA".to_string(), |s| s.to_string())
}

pub fn attribute(a: &AttributeArgs) -> Result<()> {
    let (model, image) = load_pair(&a.input)?;
    let map = compute(&model, &image, a.class, &a.method)?;
    if let Some(raw) = &a.raw {
        mapfile::write(raw, &map.values)?;
    }
    render::heatmap(&map.channel_sum()).write(&a.out)
}

pub fn evaluate(e: &EvaluateCommand) -> Result<()> {
    match e {
        EvaluateCommand::Gridpg(args) => {
            let (model, records) = evaluation_inputs(args)?;
            emit(args.out.as_ref(), &gridpg_csv(&model, &records, &args.method)?)
        }
        EvaluateCommand::Energypg(args) => {
            let (model, records) = evaluation_inputs(args)?;
            emit(args.out.as_ref(), &energypg_csv(&model, &records, &args.method)?)
        }
        EvaluateCommand::Deletion { args, steps } => {
            let (model, records) = evaluation_inputs(args)?;
            emit(args.out.as_ref(), &deletion_csv(&model, &records, &args.method, *steps)?)
        }
    }
}

fn evaluation_inputs(args: &EvaluateArgs) -> Result<(Model, Vec<Record>)> {
    let model = load_model(&args.model)?;
    let records = manifest::load(&args.manifest)?;
    Ok((model, records))
}

fn record_map(model: &Model, image: &Tensor, r: &Record, m: &MethodArgs) -> Result<Tensor> {
    let s = model.config().image_size;
    match &r.map {
        Some(p) => load_map(p, s, s),
        None => Ok(compute(model, image, r.class, m)?.channel_sum()),
    }
}

fn gridpg_csv(model: &Model, records: &[Record], m: &MethodArgs) -> Result<String> {
    let size = model.config().image_size;
    if !size.is_multiple_of(2) {
        bail!("gridpg needs an even model input size, got {size}");
    }
    if !records.len().is_multiple_of(4) {
        let last = &records[records.len() - records.len() % 4];
        bail!(
            "gridpg takes records in groups of four; the group starting at manifest line {} is incomplete",
            last.line
        );
    }
    let mut csv = String::from("grid_id,cell,score\n");
    let grids = records
        .par_chunks(4)
        .map(|group| grid_scores(model, group, m, size))
        .collect::<Result<Vec<_>>>()?;
    for (g, scores) in grids.iter().enumerate() {
        for (j, s) in scores.iter().enumerate() {
            writeln!(csv, "{g},{j},{}", score_cell(*s))?;
        }
    }
    let scores = grids.into_iter().flatten();
    if !records.is_empty() {
        writeln!(csv, "mean,,{}", score_cell(metrics::mean_defined(scores)))?;
    }
    Ok(csv)
}

fn grid_scores(model: &Model, group: &[Record], m: &MethodArgs, size: usize) -> Result<Vec<Option<f64>>> {
    let cells = group
        .iter()
        .map(|r| load_image(model, &r.image, size / 2).with_context(|| format!("manifest line {}", r.line)))
        .collect::<Result<Vec<_>>>()?;
    let cells: [Tensor; 4] = cells.try_into().expect("four cells");
    let labels = [group[0].class, group[1].class, group[2].class, group[3].class];
    let grid = metrics::make_grid(&cells, labels)
        .with_context(|| format!("grid starting at manifest line {}", group[0].line))?;
    group
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let map = record_map(model, &grid.image, r, m).with_context(|| format!("manifest line {}", r.line))?;
            Ok(metrics::gridpg(&map, j)?)
        })
        .collect()
}

fn energypg_csv(model: &Model, records: &[Record], m: &MethodArgs) -> Result<String> {
    let size = model.config().image_size;
    let mut csv = String::from("image_id,score\n");
    let scores = records
        .par_iter()
        .map(|r| {
            let rec = || {
                let image = load_image(model, &r.image, size)?;
                let map = record_map(model, &image, r, m)?;
                let boxes = if r.boxes.is_empty() {
                    vec![BBox::full(size, size)]
                } else {
                    r.boxes.clone()
                };
                Ok::<_, anyhow::Error>(metrics::energypg(&map, &boxes)?)
            };
            rec().with_context(|| format!("manifest line {}", r.line))
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, s) in scores.iter().enumerate() {
        writeln!(csv, "{i},{}", score_cell(*s))?;
    }
    if !records.is_empty() {
        writeln!(csv, "mean,{}", score_cell(metrics::mean_defined(scores)))?;
    }
    Ok(csv)
}

/// Mean deletion curve over the manifest, then the mean area under the
/// per-image curves.
fn deletion_csv(model: &Model, records: &[Record], m: &MethodArgs, steps: usize) -> Result<String> {
    if steps == 0 {
        bail!("deletion needs at least one step");
    }
    let size = model.config().image_size;
    let mut csv = String::from("step,fraction_removed,probability\n");
    if records.is_empty() {
        return Ok(csv);
    }
    let curves = records
        .par_iter()
        .map(|r| {
            let rec = || {
                let image = load_image(model, &r.image, size)?;
                let map = record_map(model, &image, r, m)?;
                Ok::<_, anyhow::Error>(metrics::deletion_curve(model, &image, &map, r.class, steps)?)
            };
            rec().with_context(|| format!("manifest line {}", r.line))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; steps + 1];
    let mut auc = 0.0;
    for curve in &curves {
        for (acc, p) in sum.iter_mut().zip(&curve.probabilities) {
            *acc += p;
        }
        auc += curve.auc();
    }
    let fractions = &curves[0].fractions;
    let n = records.len() as f64;
    for (s, (f, p)) in fractions.iter().zip(&sum).enumerate() {
        writeln!(csv, "{s},{f},{}", p / n)?;
    }
    writeln!(csv, "mean,,{}", auc / n)?;
    Ok(csv)
}

pub fn diagnose(d: &DiagnoseCommand) -> Result<()> {
    match d {
        DiagnoseCommand::Convergence {
            input,
            class,
            max_samples,
            transform,
            out,
        } => {
            let (model, image) = load_pair(input)?;
            let maps = attribution::dave_sample_maps(&model, &image, *class, &transform.dave(*max_samples))?;
            let deltas = metrics::convergence_series(&maps)?;
            let mut csv = String::from("samples,delta\n");
            for (i, d) in deltas.iter().enumerate() {
                writeln!(csv, "{},{d}", i + 1)?;
            }
            emit(out.as_ref(), &csv)
        }
        DiagnoseCommand::Rotation {
            input,
            class,
            angles,
            out,
        } => {
            let (model, image) = load_pair(input)?;
            let deltas = metrics::rotation_sensitivity(&model, &image, *class, angles)?;
            let mut csv = String::from("angle,delta\n");
            for (a, d) in angles.iter().zip(&deltas) {
                writeln!(csv, "{a},{d}")?;
            }
            emit(out.as_ref(), &csv)
        }
        DiagnoseCommand::Noise {
            input,
            class,
            sigmas,
            trials,
            seed,
            out,
        } => {
            let (model, image) = load_pair(input)?;
            let deltas = metrics::noise_sensitivity(&model, &image, *class, sigmas, *trials, *seed)?;
            let mut csv = String::from("sigma,median_delta\n");
            for (s, d) in sigmas.iter().zip(&deltas) {
                writeln!(csv, "{s},{d}")?;
            }
            emit(out.as_ref(), &csv)
        }
    }
}

pub fn genmodel(g: &GenmodelArgs) -> Result<()> {
    let weights = match g.preset {
        Preset::TinyRandom => fixtures::tiny_random_weights(g.seed),
        Preset::Detector => fixtures::detector_weights(),
    };
    weights
        .save(&g.out)
        .with_context(|| format!("writing {}", g.out.display()))
}

pub fn inspect(i: &InspectArgs) -> Result<()> {
    let model = load_model(&i.model)?;
    let weights = model.weight_file()?;
    let params: usize = weights.tensors.iter().map(|t| t.data.len()).sum();
    let mut text = format!("config: {}\n", weights.config_json);
    writeln!(text, "tensors: {}", weights.tensors.len())?;
    writeln!(text, "parameters: {params}")?;
    for t in &weights.tensors {
        writeln!(text, "  {} {:?}", t.name, t.dims)?;
    }
    print!("{text}");
    Ok(())
}

pub fn logits(l: &LogitsArgs) -> Result<()> {
    let (model, image) = load_pair(&l.input)?;
    let logits = model.forward_logits(&image)?;
    let mut csv = String::from("class,logit\n");
    for (k, v) in logits.data().iter().enumerate() {
        writeln!(csv, "{k},{v}")?;
    }
    emit(l.out.as_ref(), &csv)
}
