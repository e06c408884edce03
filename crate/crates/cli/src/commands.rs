//! Command implementations. Each command resolves its keys, creates the
//! run directory `out_dir/<command>-<config hash>`, writes the resolved
//! config there as `config.txt` and puts every artifact next to it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use esrie_core::baselines::{lee_filter, srad_filter, LeeConfig, SradConfig};
use esrie_core::checkpoint::{self, Checkpoint};
use esrie_core::image::{
    cyst2_preset, make_phantom, read_image, read_roi_file, to_decibel, to_display, to_echogenicity, write_image,
    DEFAULT_RANGE_DB,
};
use esrie_core::metrics::{extract_profile, render_csv, render_table, MetricReport};
use esrie_core::net::{self, build_seeded, flop_count, Branch, Model};
use esrie_core::perf::{f32_breakdown, int8_breakdown, time_runs, BenchConfig, LayerBreakdown, RunStats};
use esrie_core::quant::{
    self, qat_finetune, quantize, quantized_forward, IntModel, QatConfig, QuantMode, QuantizedModel,
};
use esrie_core::speckle::{
    degrade, degrade_params, make_realizations, realization_params, simulate_bmode, BlurConfig, SpeckleSimConfig,
};
use esrie_core::train::{
    fuse, load_corpus, loss_csv, read_manifest, synthetic_corpus, train_deblur, train_despeckle, Corpus, TrainConfig,
};
use esrie_core::{Domain, Error, Image, RoiKind, RoiSpec};

use crate::config::RunConfig;
use crate::CliError;

type Res<T = ()> = std::result::Result<T, CliError>;

pub fn dispatch(cfg: &RunConfig) -> Res {
    let dir = run_dir(cfg)?;
    log::info!("{} -> {}", cfg.command, dir.display());
    match cfg.command.as_str() {
        "phantom" => phantom(cfg, &dir),
        "simulate" => simulate(cfg, &dir),
        "degrade" => degrade_cmd(cfg, &dir),
        "train" => train(cfg, &dir),
        "fuse" => fuse_cmd(cfg, &dir),
        "quantize" => quantize_cmd(cfg, &dir),
        "infer" => infer(cfg, &dir),
        "eval" => eval(cfg, &dir),
        "profile" => profile(cfg, &dir),
        "bench" => bench(cfg, &dir),
        other => Err(CliError::Config(format!("unknown command {other}"))),
    }
}

fn run_dir(cfg: &RunConfig) -> Res<PathBuf> {
    let dir = PathBuf::from(cfg.str("out_dir")).join(cfg.stamp());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Res {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn sim_config(cfg: &RunConfig) -> Res<SpeckleSimConfig> {
    let sim = SpeckleSimConfig {
        sigma_x: cfg.parse("sigma_x")?,
        sigma_z: cfg.parse("sigma_z")?,
        cycles: cfg.parse("cycles")?,
        noise_std: cfg.parse("noise_std")?,
        floor_db: cfg.parse("floor_db")?,
        seed: cfg.parse("seed")?,
    };
    sim.validate()?;
    Ok(sim)
}

fn range_db(sim: &SpeckleSimConfig) -> f64 {
    -sim.floor_db
}

fn branch(cfg: &RunConfig) -> Res<Branch> {
    Ok(Branch::parse(cfg.str("branch"))?)
}

/// The cyst2 phantom simulated with the configured seed, as a display image.
fn simulated_cyst2(sim: &SpeckleSimConfig) -> Res<Image> {
    let (spec, _) = cyst2_preset();
    let echo = make_phantom(&spec)?;
    Ok(to_display(&simulate_bmode(&echo, sim)?, range_db(sim))?)
}

fn display_input(cfg: &RunConfig, sim: &SpeckleSimConfig) -> Res<Image> {
    match cfg.opt_path("input") {
        Some(p) => {
            let img = read_image(&p)?;
            if img.domain() != Domain::Display8 {
                return Err(Error::InvalidImage(format!("{} is not a display image", p.display())).into());
            }
            Ok(img)
        }
        None => simulated_cyst2(sim),
    }
}

fn load_float(path: &Path) -> Res<Model> {
    match checkpoint::load(path)? {
        Checkpoint::Float(m) => Ok(m),
        Checkpoint::Int8(_) => {
            Err(CliError::Config(format!("{} is an int8 checkpoint; a float one is needed", path.display())))
        }
    }
}

fn load_int8(path: &Path) -> Res<QuantizedModel> {
    match checkpoint::load(path)? {
        Checkpoint::Int8(q) => Ok(q),
        Checkpoint::Float(_) => {
            Err(CliError::Config(format!("{} is a float checkpoint; an int8 one is needed", path.display())))
        }
    }
}

fn corpus(cfg: &RunConfig, sim: &SpeckleSimConfig) -> Res<Corpus> {
    match cfg.opt_path("manifest") {
        Some(p) => Ok(load_corpus(&read_manifest(&p)?, sim, &BlurConfig::default())?),
        None => Ok(synthetic_corpus(cfg.parse("sources")?, cfg.parse("source_size")?, cfg.parse("seed")?, sim)?),
    }
}

fn phantom(cfg: &RunConfig, dir: &Path) -> Res {
    if cfg.str("preset") != "cyst2" {
        return Err(CliError::Config(format!("unknown phantom preset '{}'", cfg.str("preset"))));
    }
    let (spec, rois) = cyst2_preset();
    let echo = make_phantom(&spec)?;
    write_image(&echo, &dir.join("phantom.raw"))?;
    write_image(&to_display(&to_decibel(&echo, -DEFAULT_RANGE_DB)?, DEFAULT_RANGE_DB)?, &dir.join("phantom.pgm"))?;
    let roi_text: String = rois.iter().map(|r| r.to_line() + "\n").collect();
    write_text(&dir.join("rois.txt"), &roi_text)?;
    write_text(&dir.join("manifest.txt"), "echo\tphantom.raw\ndisplay\tphantom.pgm\nrois\trois.txt\n")?;
    println!("{}", dir.display());
    Ok(())
}

fn simulate(cfg: &RunConfig, dir: &Path) -> Res {
    let sim = sim_config(cfg)?;
    let echo = match cfg.opt_path("input") {
        Some(p) => to_echogenicity(&read_image(&p)?, range_db(&sim))?,
        None => make_phantom(&cyst2_preset().0)?,
    };
    let k: usize = cfg.parse("k")?;
    let images = match k {
        0 => return Err(CliError::Config("k must be >= 1".into())),
        1 => vec![simulate_bmode(&echo, &sim)?],
        _ => make_realizations(&echo, &sim, k)?,
    };
    let mut manifest = String::from("# file\tseed\tsigma_x\tsigma_z\n");
    for (i, db) in images.iter().enumerate() {
        let stem = format!("realization_{i:03}");
        write_image(db, &dir.join(format!("{stem}.raw")))?;
        write_image(&to_display(db, range_db(&sim))?, &dir.join(format!("{stem}.pgm")))?;
        let (seed, sx, sz) = if k == 1 {
            (sim.seed, sim.sigma_x, sim.sigma_z)
        } else {
            let p = realization_params(&sim, i);
            (p.seed, p.sigma_x, p.sigma_z)
        };
        writeln!(manifest, "{stem}.pgm\t{seed}\t{sx}\t{sz}").unwrap();
    }
    write_text(&dir.join("manifest.txt"), &manifest)?;
    println!("{}", dir.display());
    Ok(())
}

fn degrade_cmd(cfg: &RunConfig, dir: &Path) -> Res {
    let img = read_image(&cfg.path("input")?)?;
    let blur = BlurConfig {
        blur_sigma_range: (cfg.parse("blur_sigma_min")?, cfg.parse("blur_sigma_max")?),
        narrow_alpha_range: (cfg.parse("alpha_min")?, cfg.parse("alpha_max")?),
        seed: cfg.parse("seed")?,
    };
    let out = degrade(&img, &blur)?;
    let (sigma, alpha) = degrade_params(&blur);
    write_image(&out, &dir.join("degraded.pgm"))?;
    write_text(
        &dir.join("manifest.txt"),
        &format!("degraded.pgm\tseed={}\tsigma={sigma}\talpha={alpha}\n", blur.seed),
    )?;
    println!("{}", dir.display());
    Ok(())
}

fn train_config(cfg: &RunConfig) -> Res<TrainConfig> {
    let t = TrainConfig {
        epochs: cfg.parse("epochs")?,
        batch_size: cfg.parse("batch_size")?,
        patch_size: cfg.parse("patch_size")?,
        realizations_k: cfg.parse("realizations_k")?,
        pairs_per_source: cfg.parse("pairs_per_source")?,
        average_targets: cfg.parse("average_targets")?,
        best_window: cfg.parse("best_window")?,
        checkpoint_every: cfg.parse("checkpoint_every")?,
        seed: cfg.parse("seed")?,
        ..Default::default()
    };
    t.validate()?;
    Ok(t)
}

fn train(cfg: &RunConfig, dir: &Path) -> Res {
    let b = branch(cfg)?;
    let tcfg = train_config(cfg)?;
    let sim = sim_config(cfg)?;
    let data = corpus(cfg, &sim)?;
    let init = match cfg.opt_path("init") {
        Some(p) => load_float(&p)?,
        None => build_seeded(tcfg.seed),
    };
    let mut save_progress = |step: usize, _loss: f64, m: &Model| -> esrie_core::Result<()> {
        checkpoint::save(&Checkpoint::Float(m.clone()), &dir.join(format!("step_{step:06}.esnn")))
    };
    let progress: Option<esrie_core::train::Progress> =
        if tcfg.checkpoint_every > 0 { Some(&mut save_progress) } else { None };
    let outcome = match b {
        Branch::Despeckle => train_despeckle(&init, &data, &tcfg, progress)?,
        Branch::Deblur => train_deblur(&init, &data, &tcfg, progress)?,
        Branch::Fused => return Err(CliError::Config("train takes despeckle or deblur".into())),
    };
    checkpoint::save(&Checkpoint::Float(outcome.model), &dir.join("model.esnn"))?;
    write_text(&dir.join("losses.csv"), &loss_csv(&outcome.losses))?;
    println!("{}: {} steps, best step {}", b.name(), outcome.losses.len(), outcome.best_step);
    println!("{}", dir.join("model.esnn").display());
    Ok(())
}

fn fuse_cmd(cfg: &RunConfig, dir: &Path) -> Res {
    let d = load_float(&cfg.path("despeckle")?)?;
    let b = load_float(&cfg.path("deblur")?)?;
    let out = dir.join("fused.esnn");
    checkpoint::save(&Checkpoint::Float(fuse(&d, &b)?), &out)?;
    println!("{}", out.display());
    Ok(())
}

fn calibration_images(cfg: &RunConfig, data: &Corpus) -> Res<Vec<Image>> {
    let count: usize = cfg.parse("calib_count")?;
    let images: Vec<Image> = match cfg.opt_path("calib_dir") {
        Some(d) => pgm_files(&d)?.iter().take(count).map(|p| read_image(p)).collect::<Result<_, _>>()?,
        None => data.deblur.iter().take(count).map(|s| s.image.clone()).collect(),
    };
    Ok(images)
}

fn quantize_cmd(cfg: &RunConfig, dir: &Path) -> Res {
    let model = load_float(&cfg.path("model")?)?;
    let mode = QuantMode::parse(cfg.str("mode"))?;
    let steps = quant::PrepareSteps {
        equalize: cfg.parse("equalize")?,
        round: cfg.parse("round_weights")?,
        bias: cfg.parse("bias_correction")?,
    };
    let epochs: usize = cfg.parse("qat_epochs")?;
    let needs_data = mode == QuantMode::Full || steps.round || steps.bias;
    let qm = if !needs_data {
        quantize(&model, None)?
    } else {
        let sim = sim_config(cfg)?;
        let data = corpus(cfg, &sim)?;
        let calib = calibration_images(cfg, &data)?;
        let (prepared, qp) = quant::prepare(&model, &calib, mode, steps)?;
        let tuned = match &qp {
            Some(qp) if epochs > 0 => {
                let qcfg = QatConfig {
                    train: TrainConfig {
                        epochs,
                        pairs_per_source: cfg.parse("qat_pairs_per_source")?,
                        seed: cfg.parse("seed")?,
                        ..QatConfig::default().train
                    },
                    ..Default::default()
                };
                let out = qat_finetune(&prepared, &data, qp, &qcfg)?;
                log::info!("quantized-path validation loss before {:?} after {:?}", out.before, out.after);
                write_text(&dir.join("qat_despeckle_losses.csv"), &loss_csv(&out.losses[0]))?;
                write_text(&dir.join("qat_deblur_losses.csv"), &loss_csv(&out.losses[1]))?;
                out.model
            }
            _ => prepared,
        };
        quantize(&tuned, qp.as_ref())?
    };
    let float_bytes = Checkpoint::Float(model).weight_payload_bytes();
    let ckpt = Checkpoint::Int8(qm);
    let int_bytes = ckpt.weight_payload_bytes();
    let out = dir.join("model_int8.esnn");
    checkpoint::save(&ckpt, &out)?;
    println!(
        "weight payload: f32 {float_bytes} B, int8 {int_bytes} B, ratio {:.3}",
        float_bytes as f64 / int_bytes as f64
    );
    println!("{}", out.display());
    Ok(())
}

/// Sorted `.pgm` files of a directory.
fn pgm_files(dir: &Path) -> Res<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

enum Engine {
    Float(Model),
    Int8(QuantizedModel, QuantMode),
}

impl Engine {
    fn run(&self, img: &Image, b: Branch) -> Res<Image> {
        Ok(match self {
            Engine::Float(m) => net::forward(m, img, b)?,
            Engine::Int8(q, mode) => quantized_forward(q, img, b, *mode)?,
        })
    }
}

fn infer(cfg: &RunConfig, dir: &Path) -> Res {
    let model_path = cfg.path("model")?;
    let engine = match cfg.str("precision") {
        "f32" => Engine::Float(load_float(&model_path)?),
        "int8" => Engine::Int8(load_int8(&model_path)?, QuantMode::parse(cfg.str("mode"))?),
        p => return Err(CliError::Config(format!("unknown precision '{p}'"))),
    };
    let b = branch(cfg)?;
    let input = cfg.path("input")?;
    let files = if input.is_dir() { pgm_files(&input)? } else { vec![input] };
    let mut manifest = String::new();
    for f in &files {
        let out = engine.run(&read_image(f)?, b)?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "output.pgm".into());
        write_image(&out, &dir.join(&name))?;
        writeln!(manifest, "{}\t{name}", f.display()).unwrap();
    }
    write_text(&dir.join("manifest.txt"), &manifest)?;
    println!("{} image(s) -> {}", files.len(), dir.display());
    Ok(())
}

fn find_roi<'a>(rois: &'a [RoiSpec], name: &str) -> Res<&'a RoiSpec> {
    rois.iter().find(|r| r.name == name).ok_or_else(|| Error::MissingRoi(name.to_string()).into())
}

fn eval(cfg: &RunConfig, dir: &Path) -> Res {
    let sim = sim_config(cfg)?;
    let input = display_input(cfg, &sim)?;
    let rois = match cfg.opt_path("rois") {
        Some(p) => read_roi_file(&p)?,
        None => cyst2_preset().1,
    };
    for r in &rois {
        r.validate(input.width(), input.height())?;
    }
    let bg = find_roi(&rois, cfg.str("background_roi"))?;
    let contrast = find_roi(&rois, cfg.str("contrast_roi"))?;
    let prof = find_roi(&rois, cfg.str("profile_roi"))?;
    let b = branch(cfg)?;
    let methods: Vec<String> = match cfg.str("methods") {
        "" => {
            let mut m = vec!["input", "lee", "srad"];
            if cfg.opt_path("model").is_some() {
                m.push("edgesrie-f32");
            }
            if cfg.opt_path("model_int8").is_some() {
                m.push("edgesrie-int8");
            }
            m.into_iter().map(String::from).collect()
        }
        s => s.split(',').map(|m| m.trim().to_string()).collect(),
    };
    let image_id = cfg.opt_path("input").map_or_else(|| "cyst2".to_string(), |p| p.display().to_string());
    let (h, w) = (input.height(), input.width());
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for method in &methods {
        let (out, cost) = match method.as_str() {
            "input" => (input.clone(), None),
            "lee" => {
                let cu: f64 = cfg.parse("lee_cu")?;
                let lee = LeeConfig { window: cfg.parse("lee_window")?, ..LeeConfig::from_roi(&input, bg)? };
                let lee = if cu > 0.0 { LeeConfig { cu, ..lee } } else { lee };
                (lee_filter(&input, &lee)?, None)
            }
            "srad" => {
                let srad = SradConfig {
                    iterations: cfg.parse("srad_iterations")?,
                    dt: cfg.parse("srad_dt")?,
                    q0_decay: cfg.parse("srad_decay")?,
                    roi: Some(bg.clone()),
                };
                (srad_filter(&input, &srad)?, None)
            }
            "edgesrie-f32" => {
                let m = load_float(&cfg.path("model")?)?;
                (net::forward(&m, &input, b)?, Some((m.param_count(), flop_count(&m, h, w))))
            }
            "edgesrie-int8" => {
                let q = load_int8(&cfg.path("model_int8")?)?;
                let cost = (q.param_count(), flop_count(&q.dequantized(), h, w));
                (quantized_forward(&q, &input, b, QuantMode::Full)?, Some(cost))
            }
            other => return Err(CliError::Config(format!("unknown method '{other}'"))),
        };
        let mut row = MetricReport::evaluate(&image_id, method, &out, &input, bg, contrast, prof)?;
        if let Some((p, f)) = cost {
            row.params = Some(p);
            row.flops = Some(f);
        }
        write_image(&out, &dir.join(format!("{method}.pgm")))?;
        rows.push(row);
        outputs.push(out);
    }
    let table = render_table(&rows);
    write_text(&dir.join("table.txt"), &table)?;
    write_text(&dir.join("metrics.csv"), &render_csv(&rows))?;
    for r in rois.iter().filter(|r| r.kind != RoiKind::Region) {
        let cols: Vec<Vec<f32>> = outputs.iter().map(|o| extract_profile(o, r)).collect::<Result<_, _>>()?;
        let mut csv = format!("index,{}\n", methods.join(","));
        for i in 0..r.len() {
            let vals: Vec<String> = cols.iter().map(|c| c[i].to_string()).collect();
            writeln!(csv, "{i},{}", vals.join(",")).unwrap();
        }
        write_text(&dir.join(format!("profile_{}.csv", r.name)), &csv)?;
    }
    println!("metrics computed on {} values", input.domain().name());
    print!("{table}");
    Ok(())
}

fn parse_size(s: &str) -> Res<(usize, usize)> {
    let bad = || CliError::Config(format!("size '{s}' is not WxH"));
    let (w, h) = s.trim().split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

/// Square input side (a multiple of 16) whose FLOP count is closest to `target`.
pub fn reference_side(model: &Model, target: f64) -> usize {
    (1..=256)
        .map(|i| i * net::MULTIPLE)
        .min_by(|&a, &b| {
            let d = |s: usize| (flop_count(model, s, s) as f64 - target).abs();
            d(a).total_cmp(&d(b))
        })
        .unwrap()
}

const REFERENCE_FLOPS: f64 = 564.14e6;

fn profile(cfg: &RunConfig, dir: &Path) -> Res {
    let model = match cfg.opt_path("model") {
        Some(p) => checkpoint::load(&p)?.float_model(),
        None => net::build_default(),
    };
    let mut csv = String::from("width,height,params,flops\n");
    let mut out = format!("params {}\n", model.param_count());
    let mut sizes: Vec<(usize, usize)> = cfg.str("sizes").split(',').map(parse_size).collect::<Res<_>>()?;
    let side = reference_side(&model, REFERENCE_FLOPS);
    sizes.push((side, side));
    for (w, h) in sizes {
        let f = flop_count(&model, h, w);
        writeln!(out, "{w}x{h} flops {f} ({:.2} M)", f as f64 / 1e6).unwrap();
        writeln!(csv, "{w},{h},{},{f}", model.param_count()).unwrap();
    }
    writeln!(out, "reference size {side}x{side} (closest to {:.2} M FLOPs)", REFERENCE_FLOPS / 1e6).unwrap();
    write_text(&dir.join("profile.csv"), &csv)?;
    print!("{out}");
    Ok(())
}

fn write_breakdown(path: &Path, b: &LayerBreakdown) -> Res {
    let mut csv = String::from("layer,seconds\n");
    for (name, d) in &b.layers {
        writeln!(csv, "{name},{:.9}", d.as_secs_f64()).unwrap();
    }
    writeln!(csv, "total,{:.9}", b.total.as_secs_f64()).unwrap();
    write_text(path, &csv)
}

fn bench(cfg: &RunConfig, dir: &Path) -> Res {
    let bcfg =
        BenchConfig { warmup: cfg.parse("warmup")?, min_runs: cfg.parse("min_runs")?, seconds: cfg.parse("seconds")? };
    bcfg.validate()?;
    let sim = sim_config(cfg)?;
    let input = display_input(cfg, &sim)?;
    let b = branch(cfg)?;
    let model = match cfg.opt_path("model") {
        Some(p) => load_float(&p)?,
        None => build_seeded(cfg.parse("seed")?),
    };
    let (want_f32, want_int8) = match cfg.str("precision") {
        "f32" => (true, false),
        "int8" => (false, true),
        "both" => (true, true),
        p => return Err(CliError::Config(format!("unknown precision '{p}'"))),
    };
    let int_model: Option<IntModel> = if want_int8 {
        let q = match cfg.opt_path("model_int8") {
            Some(p) => load_int8(&p)?,
            None => {
                let qp = quant::calibrate(&model, std::slice::from_ref(&input))?.params(&model)?;
                quantize(&model, Some(&qp))?
            }
        };
        Some(q.compile()?)
    } else {
        None
    };
    let threads = match cfg.parse::<usize>("threads")? {
        0 => rayon::current_num_threads(),
        n => n,
    };
    let mut pools = vec![1];
    if threads > 1 {
        pools.push(threads);
    }
    let mut csv = String::from("precision,threads,runs,fps_mean,fps_std,seconds_mean\n");
    let mut report = String::new();
    let record = |csv: &mut String, report: &mut String, name: &str, t: usize, s: &RunStats| {
        writeln!(csv, "{name},{t},{},{:.6},{:.6},{:.9}", s.runs, s.fps_mean, s.fps_std, s.seconds_mean).unwrap();
        writeln!(report, "{name:>5} threads={t:<3} {:>9.3} ± {:.3} FPS over {} runs", s.fps_mean, s.fps_std, s.runs)
            .unwrap();
    };
    let breakdown_runs = 10;
    for &t in &pools {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        if want_f32 {
            let s = pool.install(|| time_runs(&bcfg, 1, || net::forward(&model, &input, b).map(|_| ())))?;
            record(&mut csv, &mut report, "f32", t, &s);
            let bd = pool.install(|| f32_breakdown(&model, &input, b, breakdown_runs))?;
            write_breakdown(&dir.join(format!("layers_f32_t{t}.csv")), &bd)?;
            writeln!(report, "      layer breakdown covers {:.1}% of end-to-end time", 100.0 * bd.coverage()).unwrap();
        }
        if let Some(im) = &int_model {
            let s = pool.install(|| time_runs(&bcfg, 1, || im.forward(&input, b).map(|_| ())))?;
            record(&mut csv, &mut report, "int8", t, &s);
            let bd = pool.install(|| int8_breakdown(im, &input, b, breakdown_runs))?;
            write_breakdown(&dir.join(format!("layers_int8_t{t}.csv")), &bd)?;
            writeln!(report, "      layer breakdown covers {:.1}% of end-to-end time", 100.0 * bd.coverage()).unwrap();
        }
    }
    write_text(&dir.join("bench.csv"), &csv)?;
    println!("input {}x{}, branch {}", input.width(), input.height(), b.name());
    print!("{report}");
    Ok(())
}
