use std::io::Read;
use std::path::Path;

use dense_ntp::codec::{parse_message, rle_decode_as, rle_encode};
use dense_ntp::decode::{aggregate_category_logits, colorize, decode_semantic, pca_rgb, resize_nearest, soft_map, RgbImage, DEFAULT_TEMPERATURE};
use dense_ntp::depthq::DepthQuantizer;
use dense_ntp::io::{decode_pgm, encode_ppm, encode_soft_map};
use dense_ntp::loss::{LossKind, LossParams};
use dense_ntp::metrics::{ConfusionMatrix, MetricReport};
use dense_ntp::synthlab::{self, evaluate_model, gradcheck_case, run_experiment_with, test_case, train_arm, Arm, ExperimentConfig, Preset, TinyModel};
use dense_ntp::targets::{DenseMap, MapKind};
use serde::Serialize;
use serde_json::json;

use crate::config::{self, Globals};
use crate::output::Run;
use crate::*;

/// Prints a line, ignoring a closed pipe.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

const DEFAULT_BENCH_SEEDS: usize = 3;
const DEFAULT_TRIALS: usize = 100;
const DEFAULT_TOL: f64 = 1e-6;
const DEFAULT_UPSCALE: usize = 8;

pub fn dispatch(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    let mut table = config::load(cli.config.as_deref())?;
    let name = match &cli.command {
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Decode(_) => "decode",
        Command::DepthQuant(_) => "depth-quant",
        Command::Codec(CodecCommand::Encode(_)) => "codec-encode",
        Command::Codec(CodecCommand::Decode(_)) => "codec-decode",
        Command::Codec(CodecCommand::Parse(_)) => "codec-parse",
        Command::Gradcheck(_) => "gradcheck",
        Command::Bench(_) => "bench",
        Command::VizPca(_) => "viz-pca",
    };
    let g = config::globals(&mut table, cli.seed, cli.out, name)?;
    let argv = argv.to_vec();
    match cli.command {
        Command::Train(a) => train(config::resolve(&a, table)?, &g, name, &argv),
        Command::Eval(a) => eval(config::resolve(&a, table)?, &g, name, &argv),
        Command::Decode(a) => decode(config::resolve(&a, table)?, &g, name, &argv),
        Command::DepthQuant(a) => depth_quant(config::resolve(&a, table)?, &g, name, &argv),
        Command::Codec(CodecCommand::Encode(a)) => codec_encode(config::resolve(&a, table)?, &g, name, &argv),
        Command::Codec(CodecCommand::Decode(a)) => codec_decode(config::resolve(&a, table)?, &g, name, &argv),
        Command::Codec(CodecCommand::Parse(a)) => codec_parse(config::resolve(&a, table)?, &g, name, &argv),
        Command::Gradcheck(a) => gradcheck(config::resolve(&a, table)?, &g, name, &argv),
        Command::Bench(a) => bench(config::resolve(&a, table)?, &g, name, &argv),
        Command::VizPca(a) => viz_pca(config::resolve(&a, table)?, &g, name, &argv),
    }
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing required `--{flag}` (or config key)")))
}

fn read_input(input: &Option<String>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    match input.as_deref() {
        None | Some("-") => {
            std::io::stdin().read_to_end(&mut buf)?;
        }
        Some(path) => buf = std::fs::read(path).map_err(|e| CliError::Domain(format!("{path}: {e}")))?,
    }
    Ok(buf)
}

fn load_model(path: &Path) -> Result<TinyModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
    let model: TinyModel = serde_json::from_str(&text).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
    model.validate()?;
    Ok(model)
}

fn ensure_model_fits(cfg: &ExperimentConfig, model: &TinyModel) -> Result<(), CliError> {
    if model.in_dim != synthlab::feature_dim(cfg.n_classes) {
        return Err(CliError::Domain(format!(
            "model input dim {} does not match {} classes",
            model.in_dim, cfg.n_classes
        )));
    }
    Ok(())
}

fn train(mut a: TrainArgs, g: &Globals, name: &str, argv: &[String]) -> Result<(), CliError> {
    let mut cfg = a.experiment.clone().unwrap_or_default();
    if let Some(v) = a.k {
        cfg.loss.k = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = a.mode {
        cfg.mode = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.n_classes {
        cfg.n_classes = v;
    }
    let loss = a.loss.unwrap_or(LossKind::Ntpm);
    a.loss = Some(loss);
    a.experiment = Some(cfg.clone());
    let arm = Arm {
        name: loss.as_str().to_string(),
        loss,
        params: cfg.loss,
        scale: None,
    };
    let out = train_arm(&cfg, &arm, g.seed)?;
    let cm = evaluate_model(&cfg, &out.model, g.seed)?;
    let metrics = MetricReport::from_confusion(&cm);

    let mut run = Run::create(&g.out, name, argv, g.seed, &a)?;
    run.write_json("model.json", &out.model)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.curve.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.10e}\n"));
    }
    run.write("curve.csv", csv.as_bytes())?;
    run.write_json(
        "report.json",
        &json!({
            "loss": loss,
            "seed": g.seed,
            "steps": out.curve.len(),
            "final_loss": out.curve.last(),
            "n_params": out.model.n_params(),
            "test": metrics,
            "experiment": cfg,
        }),
    )?;
    run.finish()?;
    say!(
        "{loss}: {} steps, final loss {:.4}, test mIoU {}",
        out.curve.len(),
        out.curve.last().copied().unwrap_or(f64::NAN),
        pct(metrics.miou)
    );
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |m| format!("{:.2}", 100.0 * m))
}

fn eval(mut a: EvalArgs, g: &Globals, name: &str, argv: &[String]) -> Result<(), CliError> {
    let path = required(&a.model, "model")?;
    let mut cfg = a.experiment.clone().unwrap_or_default();
    if let Some(v) = a.n_test {
        cfg.n_test = v;
    }
    a.experiment = Some(cfg.clone());
    let model = load_model(&path)?;
    let cm = evaluate_model(&cfg, &model, g.seed)?;
    let metrics = MetricReport::from_confusion(&cm);

    let mut run = Run::create(&g.out, name, argv, g.seed, &a)?;
    run.write_json(
        "metrics.json",
        &json!({ "seed": g.seed, "n_test": cfg.n_test, "pixels": cm.total(), "metrics": metrics }),
    )?;
    run.finish()?;
    say!("mIoU {} over {} pixels", pct(metrics.miou), cm.total());
    Ok(())
}

fn decode(mut a: DecodeArgs, g: &Globals, name: &str, argv: &[String]) -> Result<(), CliError> {
    let path = required(&a.model, "model")?;
    let cfg = a.experiment.clone().unwrap_or_default();
    let scene = a.scene.unwrap_or(0);
    let mode = a.decode_mode.unwrap_or_default();
    let bg = a.background.unwrap_or_default();
    let temperature = a.temperature.unwrap_or(DEFAULT_TEMPERATURE);
    a.scene = Some(scene);
    a.decode_mode = Some(mode);
    a.background = Some(bg);
    a.temperature = Some(temperature);
    a.experiment = Some(cfg.clone());

    let model = load_model(&path)?;
    ensure_model_fits(&cfg, &model)?;
    let case = test_case(&cfg, g.seed, scene)?;
    let (w, h) = (a.width.unwrap_or(case.scene.width()), a.height.unwrap_or(case.scene.height()));
    let z = model.forward(&case.sample.features)?;
    let cat = aggregate_category_logits(&z, &case.cat_map)?;
    let pred = decode_semantic(&cat, w, h, temperature, bg.background())?;
    let gt = resize_nearest(&case.scene.semantic, w, h);
    let cm = ConfusionMatrix::from_maps(cfg.n_classes, &gt, &pred)?;

    let mut run = Run::create(&g.out, name, argv, g.seed, &a)?;
    run.write_pgm("pred.pgm", &pred)?;
    run.write("pred.ppm", &encode_ppm(&colorize(&pred)))?;
    run.write_pgm("gt.pgm", &gt)?;
    run.write("gt.ppm", &encode_ppm(&colorize(&gt)))?;
    if mode == DecodeMode::Soft {
        let soft = soft_map(&cat, w, h, temperature, bg.background())?;
        run.write("soft.bin", &encode_soft_map(&soft))?;
    }
    run.write_json(
        "report.json",
        &json!({ "scene": scene, "width": w, "height": h, "metrics": MetricReport::from_confusion(&cm) }),
    )?;
    run.finish()?;
    say!("scene {scene}: {w}x{h}, mIoU {}", pct(MetricReport::from_confusion(&cm).miou));
    Ok(())
}

#[derive(Serialize)]
struct QuantEntry {
    depth_m: f64,
    bin: Option<u32>,
    error: Option<String>,
}

#[derive(Serialize)]
struct DequantEntry {
    bin: u32,
    depth_m: Option<f64>,
    edges: Option<(f64, f64)>,
    error: Option<String>,
}

fn depth_quant(mut a: DepthQuantArgs, g: &Globals, name: &str, argv: &[String]) -> Result<(), CliError> {
    let preset = a.preset.clone().unwrap_or_else(|| "nyuv2".to_string());
    a.preset = Some(preset.clone());
    let q = DepthQuantizer::preset(&preset)?;
    let quantized: Vec<QuantEntry> = a
        .depth
        .iter()
        .flatten()
        .map(|&d| match q.quantize(d) {
            Ok(b) => QuantEntry { depth_m: d, bin: Some(b), error: None },
            Err(e) => QuantEntry { depth_m: d, bin: None, error: Some(e.to_string()) },
        })
        .collect();
    let dequantized: Vec<DequantEntry> = a
        .bin
        .iter()
        .flatten()
        .map(|&b| match (q.dequantize(b), q.bin_edges(b)) {
            (Ok(d), Ok(e)) => DequantEntry { bin: b, depth_m: Some(d), edges: Some(e), error: None },
            (Err(e), _) | (_, Err(e)) => DequantEntry { bin: b, depth_m: None, edges: None, error: Some(e.to_string()) },
        })
        .collect();

    let mut run = Run::create(&g.out, name, argv, g.seed, &a)?;
    let mut scene_report = None;
    if let Some(index) = a.scene {
        let case = test_case(&ExperimentConfig::default(), g.seed, index)?;
        let s = &case.scene;
        let mut bins = Vec::with_capacity(s.depth_m.len());
        for (d, &ok) in s.depth_m.iter().zip(&s.valid) {
            bins.push(if ok { q.quantize(*d)? } else { dense_ntp::targets::DEPTH_IGNORE });
        }
        let map = DenseMap::new(s.width(), s.height(), bins, MapKind::DepthBins)?;
        let back = q.dequantize_map(&map)?;
        let max_err = s
            .depth_m
            .iter()
            .zip(&back)
            .filter_map(|(d, r)| r.map(|r| (d - r).abs()))
            .fold(0.0, f64::max);
        run.write_pgm("depth.pgm", &map)?;
        scene_report = Some(json!({ "scene": index, "width": s.width(), "height": s.height(), "max_abs_error_m": max_err }));
    }
    let report = json!({
        "quantizer": q,
        "quantized": quantized,
        "dequantized": dequantized,
        "scene": scene_report,
    });
    run.write_json("report.json", &report)?;
    run.finish()?;
    say!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn codec_encode(a: CodecEncodeArgs, g: &Globals, name: &str, argv: &[String]) -> Result<(), CliError> {
    let map = decode_pgm(&read_input(&a.input)?)?;
    let (rle, payload) = rle_encode(&map);
    let mut run = Run::create(&g.out, name, argv, g.seed, &a)?;
    run.write("mask.rle", format!("{payload}\n").as_bytes())?;
    run.write_json(
        "report.json",
        &json!({ "width": map.width, "height": map.height, "kind": map.kind, "runs": rle.runs.len() }),
    )?;
    run.finish()?;
    say!("{payload}");
    Ok(())
}

fn parse_kind(kind: Option<&str>) -> Result<MapKind, CliError> {
    match kind.unwrap_or("semantic") {
        "semantic" => Ok(MapKind::Semantic),
        "depth_bins" => Ok(MapKind::DepthBins),
        other => Err(CliError::Usage(format!("unknown map kind {other:?} (semantic | depth_bins)"))),
    }
}

fn codec_decode(a: CodecDecodeArgs, g: &Globals, name: &str, argv: &[String]) -> Result<(), CliError> {
    let (w, h) = (required(&a.w, "w")?, required(&a.h, "h")?);
    let kind = parse_kind(a.kind.as_deref())?;
    let bytes = read_input(&a.input)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::Domain(format!("payload is not UTF-8: {e}")))?;
    let map = rle_decode_as(text.trim(), w, h, kind)?;
    let mut run = Run::create(&g.out, name, argv, g.seed, &a)?;
    run.write_pgm("mask.pgm", &map)?;
    run.finish()?;
    say!("{w}x{h} {} map", kind.as_str());
    Ok(())
}

fn codec_parse(a: CodecParseArgs, g: &Globals, name: &str, argv: &[String]) -> Result<(), CliError> {
    let bytes = read_input(&a.input)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::Domain(format!("message is not UTF-8: {e}")))?;
    let msg = parse_message(&text)?;
    let report = json!({
        "elements": msg.elements,
        "refs": msg.refs(),
        "mask": msg.mask_rle(),
        "boxes": msg.boxes(),
        "instances": msg.polys(),
        "depth": msg.depth_flag(),
        "free_text": msg.free_text(),
    });
    let mut run = Run::create(&g.out, name, argv, g.seed, &a)?;
    run.write_json("message.json", &report)?;
    run.finish()?;
    say!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn gradcheck(mut a: GradcheckArgs, g: &Globals, name: &str, argv: &[String]) -> Result<(), CliError> {
    let kind = a.loss.unwrap_or(LossKind::Ntpm);
    let params = LossParams::with_k(a.k.unwrap_or(LossParams::default().k));
    let trials = a.trials.unwrap_or(DEFAULT_TRIALS);
    let tol = a.tol.unwrap_or(DEFAULT_TOL);
    a.loss = Some(kind);
    a.k = Some(params.k);
    a.trials = Some(trials);
    a.tol = Some(tol);
    let (model, sample) = gradcheck_case(g.seed)?;
    let report = synthlab::gradcheck(&model, &sample, kind, &params, trials, g.seed)?;
    let passed = report.passed(tol);

    let mut run = Run::create(&g.out, name, argv, g.seed, &a)?;
    run.write_json(
        "report.json",
        &json!({
            "mode": model.mode,
            "n_params": model.n_params(),
            "vocab_size": model.vocab_size,
            "params": params,
            "tol": tol,
            "passed": passed,
            "report": report,
        }),
    )?;
    run.finish()?;
    say!("{kind}: max relative error {:.3e} over {trials} parameters", report.max_rel_err);
    if passed {
        Ok(())
    } else {
        Err(CliError::Domain(format!("gradient check failed: {:.3e} >= {tol:e}", report.max_rel_err)))
    }
}

/// File-name-safe form of an arm name.
fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn bench(mut a: BenchArgs, g: &Globals, name: &str, argv: &[String]) -> Result<(), CliError> {
    let preset = a.preset.unwrap_or(Preset::Table4Mini);
    let n = a.seeds.unwrap_or(DEFAULT_BENCH_SEEDS);
    let cfg = a.experiment.clone().unwrap_or_default();
    a.preset = Some(preset);
    a.seeds = Some(n);
    a.experiment = Some(cfg.clone());
    let seeds: Vec<u64> = (0..n as u64).map(|i| g.seed + i).collect();
    let mut report = run_experiment_with(preset, &cfg, &seeds)?;

    let mut run = Run::create(&g.out, name, argv, g.seed, &a)?;
    for i in 0..report.arms.len() {
        let file = format!("curves/{}.csv", slug(&report.arms[i].name));
        run.write(&file, report.curve_csv(&report.arms[i]).as_bytes())?;
        report.arms[i].curve_path = Some(file);
    }
    run.write_json("report.json", &report)?;
    run.finish()?;
    say!("{} over seeds {:?}", report.preset, report.seeds);
    for arm in &report.arms {
        say!("  {:<16} {:6.2} ± {:.2}", arm.name, arm.miou_mean, arm.miou_std);
    }
    Ok(())
}

fn upscale(img: &RgbImage, f: usize) -> RgbImage {
    let mut out = RgbImage::filled(img.width * f, img.height * f, [0, 0, 0]);
    for y in 0..out.height {
        for x in 0..out.width {
            out.put(x, y, img.pixel(x / f, y / f));
        }
    }
    out
}

fn viz_pca(mut a: VizPcaArgs, g: &Globals, name: &str, argv: &[String]) -> Result<(), CliError> {
    let cfg = a.experiment.clone().unwrap_or_default();
    let scene = a.scene.unwrap_or(0);
    let factor = a.upscale.unwrap_or(DEFAULT_UPSCALE);
    if factor == 0 {
        return Err(CliError::Usage("--upscale must be at least 1".into()));
    }
    a.scene = Some(scene);
    a.upscale = Some(factor);
    a.experiment = Some(cfg.clone());
    let case = test_case(&cfg, g.seed, scene)?;
    let f = &case.sample.features;
    let hidden = match &a.model {
        Some(path) => {
            let model = load_model(path)?;
            ensure_model_fits(&cfg, &model)?;
            model.hidden_states(f)?
        }
        None => f.data.chunks(f.dim).map(<[f64]>::to_vec).collect(),
    };
    let pca = pca_rgb(&hidden, f.grid_w, f.grid_h)?;

    let mut run = Run::create(&g.out, name, argv, g.seed, &a)?;
    run.write("pca.ppm", &encode_ppm(&upscale(&pca.image, factor)))?;
    run.write_json(
        "pca.json",
        &json!({
            "grid": [f.grid_w, f.grid_h],
            "eigenvalues": pca.eigenvalues,
            "components": pca.components,
            "rank_deficient": pca.rank_deficient,
        }),
    )?;
    run.finish()?;
    say!(
        "eigenvalues {:.4e} {:.4e} {:.4e}{}",
        pca.eigenvalues[0],
        pca.eigenvalues[1],
        pca.eigenvalues[2],
        if pca.rank_deficient { " (rank deficient)" } else { "" }
    );
    Ok(())
}
