use std::fs;
use std::path::{Path, PathBuf};

use claw_unet::data::{self, Sample};
use claw_unet::kv::KvMap;
use claw_unet::metrics::MetricsReport;
use claw_unet::model::{self, checkpoint, init_params};
use claw_unet::nn::{gradcheck as fd, GradcheckOptions, Mode};
use claw_unet::train::{self, ablate as abl, eval::evaluate_with_mode};
use claw_unet::ModelConfig;

use crate::config::RunConfig;
use crate::{AblateArgs, Common, EvalArgs, Failure, GradcheckArgs, ModelTrainArgs, PredictArgs, SplitPart, SynthArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

fn parse_sets(sets: &[String]) -> Result<KvMap, Failure> {
    let mut kv = KvMap::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        kv.insert(k.trim(), v.trim());
    }
    Ok(kv)
}

/// Resolves the run configuration from defaults, file, `--set` and `flags`.
fn resolve(common: &Common, mut flags: KvMap) -> Result<RunConfig, Failure> {
    if let Some(d) = &common.data {
        flags.insert("data", d.display());
    }
    if let Some(o) = &common.out {
        flags.insert("out", o.display());
    }
    let sets = parse_sets(&common.set)?;
    Ok(RunConfig::resolve(common.config.as_deref(), &[("--set", sets), ("flags", flags)])?)
}

fn model_train_flags(common: &Common, m: &ModelTrainArgs) -> KvMap {
    let mut kv = KvMap::new();
    if let Some(v) = &m.preset {
        kv.insert("preset", v);
    }
    if let Some(v) = m.size {
        kv.insert("input_size", v);
    }
    if let Some(v) = m.depth {
        kv.insert("depth", v);
    }
    if let Some(v) = m.epochs {
        kv.insert("epochs", v);
    }
    if let Some(v) = m.batch_size {
        kv.insert("batch_size", v);
    }
    if let Some(v) = m.lr {
        kv.insert("learning_rate", v);
    }
    if let Some(v) = &m.optimizer {
        kv.insert("optimizer", v);
    }
    if let Some(v) = m.split_seed {
        kv.insert("split_seed", v);
    }
    if let Some(v) = common.seed {
        kv.insert("seed", v);
        kv.insert("train_seed", v);
    }
    kv
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    v.as_deref().ok_or_else(|| Failure::Usage(format!("missing {flag}")))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Loads a dataset and resizes every sample to the model input size.
fn load_resized(dir: &Path, config: &ModelConfig) -> Result<Vec<Sample>, Failure> {
    let samples = data::load_dataset(dir)?;
    Ok(samples
        .iter()
        .map(|s| data::resize_to(s, config.input_size))
        .collect::<claw_unet::Result<Vec<_>>>()?)
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> CmdResult {
    write(&dir.join(format!("{stem}.csv")), &report.to_csv())?;
    write(&dir.join(format!("{stem}.json")), &report.to_json())
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let mut flags = KvMap::new();
    if let Some(v) = a.count {
        flags.insert("count", v);
    }
    if let Some(v) = a.size {
        flags.insert("synth_size", v);
    }
    if let Some(v) = a.common.seed {
        flags.insert("synth_seed", v);
    }
    let cfg = resolve(&a.common, flags)?;
    let out = required(&cfg.run.out, "--out")?;
    let samples = data::synth_to_dir(&cfg.synth, cfg.run.count, out)?;
    println!("wrote {} samples of {}x{} to {}", samples.len(), cfg.synth.size, cfg.synth.size, out.display());
    Ok(())
}

fn split_data(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>), Failure> {
    let data_dir = required(&cfg.run.data, "--data")?;
    let samples = load_resized(data_dir, &cfg.model)?;
    Ok(data::split(samples, (4, 1), cfg.run.split_seed)?)
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut flags = model_train_flags(&a.common, &a.model);
    if let Some(v) = a.eval_every {
        flags.insert("eval_every", v);
    }
    let mut cfg = resolve(&a.common, flags)?;
    let out = required(&cfg.run.out, "--out")?.to_path_buf();
    let (train_set, test_set) = split_data(&cfg)?;
    create_dir(&out)?;
    let ckpt = cfg.train.checkpoint_path.clone().unwrap_or_else(|| out.join("model.ckpt"));
    cfg.train.checkpoint_path = Some(ckpt.clone());
    if a.save_init {
        checkpoint::save(&init_params::<f32>(&cfg.model)?, out.join("init.ckpt"))?;
    }
    eprintln!(
        "training on {} samples, testing on {} ({} epochs, batch {})",
        train_set.len(),
        test_set.len(),
        cfg.train.epochs,
        cfg.train.batch_size
    );
    let eval_set = (!test_set.is_empty()).then_some(test_set.as_slice());
    let (params, history) = train::train_observed(&cfg.model, &cfg.train, &train_set, eval_set, |e| {
        match e.eval {
            Some(r) => eprintln!("epoch {} loss {:.5} test {}", e.epoch, e.mean_loss, r.summary()),
            None => eprintln!("epoch {} loss {:.5}", e.epoch, e.mean_loss),
        }
    })?;
    write(&out.join("history.csv"), &history.to_csv())?;
    let mut run_kv = cfg.model.to_kv();
    run_kv.merge(&cfg.train.to_kv());
    run_kv.insert("split_seed", cfg.run.split_seed);
    write(&out.join("run.txt"), &run_kv.to_text())?;
    if test_set.is_empty() {
        println!("no test split (dataset too small); checkpoint at {}", ckpt.display());
        return Ok(());
    }
    let report = evaluate_with_mode(&params, &test_set, cfg.model.threshold, cfg.run.hausdorff_mode)?;
    write_report(&out, "report", &report)?;
    println!("{}", report.summary());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let mut flags = KvMap::new();
    if let Some(v) = a.split_seed {
        flags.insert("split_seed", v);
    }
    if let Some(v) = &a.hausdorff_mode {
        flags.insert("hausdorff_mode", v);
    }
    let cfg = resolve(&a.common, flags)?;
    let out = required(&cfg.run.out, "--out")?;
    let data_dir = required(&cfg.run.data, "--data")?;
    let params = checkpoint::load::<f32>(&a.checkpoint)?;
    let samples = load_resized(data_dir, &params.config)?;
    let set = match a.split {
        SplitPart::All => samples,
        SplitPart::Train => data::split(samples, (4, 1), cfg.run.split_seed)?.0,
        SplitPart::Test => data::split(samples, (4, 1), cfg.run.split_seed)?.1,
    };
    if set.is_empty() {
        return Err(Failure::Runtime("selected split is empty".into()));
    }
    let threshold = a.threshold.unwrap_or(params.config.threshold);
    let report = evaluate_with_mode(&params, &set, threshold, cfg.run.hausdorff_mode)?;
    create_dir(out)?;
    write_report(out, "report", &report)?;
    println!("{}", report.summary());
    Ok(())
}

pub fn predict(a: PredictArgs) -> CmdResult {
    let cfg = resolve(&a.common, KvMap::new())?;
    let out = required(&cfg.run.out, "--out")?;
    let params = checkpoint::load::<f32>(&a.checkpoint)?;
    let image = data::load_image(&a.image)?;
    let [_, _, h, w] = image.dims4()?;
    let size = params.config.input_size;
    if (h, w) != (size, size) {
        return Err(Failure::Runtime(format!("image is {h}x{w} but the checkpoint expects {size}x{size}")));
    }
    let mask = claw_unet::BinaryMask::filled(h, w, false);
    let sample = Sample::new("input", image, mask)?.with_channels(params.config.input_channels)?;
    let prob = model::forward(&sample.image, &params, Mode::Eval)?;
    let threshold = a.threshold.unwrap_or(params.config.threshold);
    let pred = model::predict_mask(&prob, threshold)?;
    data::save_mask(&pred, out)?;
    if let Some(p) = &a.prob {
        data::save_probability(prob.data(), h, w, p)?;
    }
    println!("{} foreground pixels of {} written to {}", pred.count(), h * w, out.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let mode = match a.mode.as_str() {
        "train" => Mode::Train,
        "eval" => Mode::Eval,
        m => return Err(Failure::Usage(format!("unknown mode {m:?} (train, eval)"))),
    };
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(Failure::Usage(format!("step {} must be positive", a.step)));
    }
    let mut opts = GradcheckOptions {
        step: a.step,
        samples: a.samples,
        mode,
        batch: a.batch,
        break_gradients: a.break_gradients,
        freeze_branches: !a.no_freeze_branches,
        ..GradcheckOptions::default()
    };
    if let Some(s) = a.common.seed {
        opts.seed = s;
    }
    let config = ModelConfig::toy();
    let report = fd::gradcheck(&config, &opts)?;
    println!("step {:e}", report.step);
    println!("coordinates {}", report.coordinates);
    for p in &report.per_param {
        println!("param {} coordinates {} max_rel_error {:.3e}", p.name, p.coordinates, p.max_rel_error);
    }
    if let Some(w) = &report.worst {
        println!(
            "worst {}[{}] analytic {:.6e} numeric {:.6e} rel_error {:.3e}",
            w.name, w.index, w.analytic, w.numeric, w.rel_error
        );
    }
    println!("global_max_rel_error {:.3e}", report.global_max_rel_error);
    if let Some(out) = &a.common.out {
        let mut kv = KvMap::new();
        kv.insert("step", report.step);
        kv.insert("coordinates", report.coordinates);
        kv.insert("global_max_rel_error", report.global_max_rel_error);
        kv.insert("tolerance", a.tolerance);
        kv.insert("passed", report.passes(a.tolerance));
        write(out, &kv.to_text())?;
    }
    if report.passes(a.tolerance) {
        println!("PASS (< {:e})", a.tolerance);
        Ok(())
    } else {
        println!("FAIL (>= {:e})", a.tolerance);
        Err(Failure::Gradcheck(format!(
            "gradient check failed: global max relative error {:.3e} >= {:e}",
            report.global_max_rel_error, a.tolerance
        )))
    }
}

pub fn ablate(a: AblateArgs) -> CmdResult {
    let mut flags = model_train_flags(&a.common, &a.model);
    if let Some(v) = &a.variants {
        flags.insert("variants", v);
    }
    let cfg = resolve(&a.common, flags)?;
    let out = required(&cfg.run.out, "--out")?.to_path_buf();
    let (train_set, test_set) = split_data(&cfg)?;
    if test_set.is_empty() {
        return Err(Failure::Runtime("dataset too small for a 4:1 split".into()));
    }
    create_dir(&out)?;
    let table = abl::ablate_observed(
        &cfg.run.variants,
        &cfg.model,
        &cfg.train,
        &train_set,
        &test_set,
        |v, e| eprintln!("{v} epoch {} loss {:.5}", e.epoch, e.mean_loss),
        |_, row| eprintln!("{} params={} {}", row.variant, row.trainable_params, row.report.summary()),
    )?;
    write(&out.join("ablation.csv"), &table.to_csv())?;
    write(&out.join("ablation.json"), &table.to_json())?;
    for row in &table.rows {
        write(&out.join(format!("history_{}.csv", row.variant)), &row.history.to_csv())?;
    }
    print!("{}", table.to_csv());
    Ok(())
}
