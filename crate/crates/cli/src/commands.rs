use std::fs;

use ajem_core::energy::argmax;
use ajem_core::image::{tile_grid, RgbImage};
use ajem_core::inference::{generate, oracle_density_2d, GridSpec, InitKind, SAMPLE_META_HEADER};
use ajem_core::metrics::{
    attack_dataset, feature_stats, frechet_distance, inception_score, twod_divergence, FeatureStats,
};
use ajem_core::model::conv_side;
use ajem_core::pgd::{default_step_size, linf_distance};
use ajem_core::sgld::{DEFAULT_ALPHA_2D, DEFAULT_ALPHA_IMAGE};
use ajem_core::trainer::{train, NoHooks};
use ajem_core::{
    ArchTag, AttackMode, AttackSpec, Checkpoint, Classifier, Dataset, EnergyView, InferenceSpec, Pipeline, SgldConfig,
    Tensor, TrainConfig,
};
use anyhow::{bail, ensure, Context, Result};

use crate::config::{key, write_file, Key, RunConfig};
use crate::data::{self, DATA_KEYS};

pub const CHECKPOINT_FILE: &str = "checkpoint.ajem";
pub const PARTIAL_CHECKPOINT_FILE: &str = "checkpoint.partial.ajem";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const METADATA_FILE: &str = "metadata.csv";
pub const GRID_FILE: &str = "grid.ppm";
pub const SAMPLE_DIR: &str = "samples";
pub const ADVERSARIAL_FILE: &str = "adversarial.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PAIRWISE_FILE: &str = "pairwise.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

fn with_data(keys: &[Key]) -> Vec<Key> {
    keys.iter().chain(DATA_KEYS).copied().collect()
}

pub fn train_keys() -> Vec<Key> {
    with_data(&[
        key("data", "synth:gauss4", "training data spec"),
        key(
            "arch",
            "auto",
            "mlp2d, convtiny or linear (auto picks from the input dimension)",
        ),
        key("epochs", "10", "passes over the data"),
        key("batch_size", "32", "minibatch size"),
        key("learn_rate", "0.05", "SGD learning rate"),
        key("gen_weight", "1", "weight of the generative term"),
        key("attack_epsilon", "0.1", "l-inf radius of training attacks (0 disables)"),
        key("attack_steps", "15", "PGD steps per training attack"),
        key(
            "attack_step_size",
            "auto",
            "PGD step size (auto = 2.5 * epsilon / steps)",
        ),
        key(
            "sgld_alpha",
            "auto",
            "SGLD step size (auto = 0.01 for 2D, 0.001 for images)",
        ),
        key("sgld_outer", "10", "SGLD outer loops for negatives"),
        key("sgld_inner", "5", "SGLD inner loops for negatives"),
        key("sgld_noise", "none", "SGLD noise std override (none = sqrt(alpha))"),
        key("variance_floor", "0.0001", "floor on mixture variances"),
        key("max_steps", "none", "stop after this many optimizer steps"),
        key("init_seed", "auto", "parameter init seed (auto = master seed)"),
    ])
}

pub fn sample_keys() -> Vec<Key> {
    vec![
        key("checkpoint", "", "checkpoint to sample from"),
        key("pipeline", "combined", "energy_only, attack_only or combined"),
        key("class", "none", "target class (none = drawn per sample)"),
        key("count", "16", "number of samples"),
        key("init", "mixture", "chain init: mixture or noise"),
        key("attack_epsilon", "0.5", "l-inf radius of the targeted prior"),
        key("attack_steps", "15", "PGD steps for the targeted prior"),
        key(
            "attack_step_size",
            "auto",
            "PGD step size (auto = 2.5 * epsilon / steps)",
        ),
        key("contrast", "0.85", "contrast factor in (0, 1]"),
        key(
            "sgld_alpha",
            "auto",
            "SGLD step size (auto = 0.01 for 2D, 0.001 for images)",
        ),
        key(
            "sgld_outer",
            "auto",
            "SGLD outer loops (auto = 300 for unconditional energy_only, 50 otherwise)",
        ),
        key("sgld_inner", "5", "SGLD inner loops"),
        key("sgld_noise", "none", "SGLD noise std override (none = sqrt(alpha))"),
        key(
            "grid_cols",
            "auto",
            "columns in the image grid (auto = ceil(sqrt(count)))",
        ),
    ]
}

pub fn attack_keys() -> Vec<Key> {
    with_data(&[
        key("checkpoint", "", "checkpoint to attack"),
        key("data", "synth:gauss4", "data spec of the points to attack"),
        key("epsilon", "0.1", "l-inf radius"),
        key("steps", "15", "PGD steps"),
        key("step_size", "auto", "PGD step size (auto = 2.5 * epsilon / steps)"),
    ])
}

pub fn eval_keys() -> Vec<Key> {
    with_data(&[
        key("checkpoint", "", "evaluation checkpoint (posteriors and features)"),
        key("samples", "", "comma-separated sample CSV files"),
        key(
            "reference",
            "none",
            "reference data spec (synth:NAME gives exact 2D divergences)",
        ),
        key("grid_n", "20", "2D histogram cells per axis"),
        key("grid_lo", "-1", "2D grid lower bound"),
        key("grid_hi", "1", "2D grid upper bound"),
        key("smoothing", "0.5", "histogram pseudocount"),
    ])
}

fn prepare(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.require_path("checkpoint")?;
    Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn is_image(c: &Classifier) -> bool {
    c.arch() == ArchTag::ConvTiny
}

fn default_alpha(image: bool) -> f64 {
    if image {
        DEFAULT_ALPHA_IMAGE
    } else {
        DEFAULT_ALPHA_2D
    }
}

fn auto_arch(dim: usize) -> ArchTag {
    if dim == 2 {
        ArchTag::Mlp2d
    } else if conv_side(dim).is_some() {
        ArchTag::ConvTiny
    } else {
        ArchTag::Linear
    }
}

fn attack_spec(
    cfg: &mut RunConfig,
    eps_key: &str,
    steps_key: &str,
    size_key: &str,
    mode: AttackMode,
) -> Result<AttackSpec> {
    let eps: f64 = cfg.get(eps_key)?;
    let steps: usize = cfg.get(steps_key)?;
    let size = cfg.get_opt(size_key)?.unwrap_or(default_step_size(eps, steps));
    cfg.settle(size_key, size);
    let spec = AttackSpec::new(eps, steps, mode).with_step_size(size);
    spec.validate()?;
    Ok(spec)
}

fn apply_noise(cfg: &RunConfig, sgld: SgldConfig) -> Result<SgldConfig> {
    Ok(match cfg.get_opt("sgld_noise")? {
        Some(s) => sgld.with_noise(s),
        None => sgld,
    })
}

pub fn cmd_train(mut cfg: RunConfig) -> Result<()> {
    prepare(&cfg)?;
    let seed = cfg.seed()?;
    let spec = cfg.raw("data").to_string();
    let ds = data::load(&cfg, &spec)?.dataset;
    cfg.settle("data_seed", data::data_seed(&cfg)?);

    let arch = match cfg.raw("arch") {
        "auto" => auto_arch(ds.dim()),
        a => a.parse()?,
    };
    cfg.settle("arch", arch);
    let alpha = cfg
        .get_opt("sgld_alpha")?
        .unwrap_or(default_alpha(arch == ArchTag::ConvTiny));
    cfg.settle("sgld_alpha", alpha);
    let init_seed = cfg.get_opt("init_seed")?.unwrap_or(seed);
    cfg.settle("init_seed", init_seed);

    let tc = TrainConfig {
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        learn_rate: cfg.get("learn_rate")?,
        gen_weight: cfg.get("gen_weight")?,
        attack: attack_spec(
            &mut cfg,
            "attack_epsilon",
            "attack_steps",
            "attack_step_size",
            AttackMode::Untargeted,
        )?,
        sgld: apply_noise(
            &cfg,
            SgldConfig::new(alpha, cfg.get("sgld_outer")?, cfg.get("sgld_inner")?),
        )?,
        seed,
        variance_floor: cfg.get("variance_floor")?,
        max_steps: cfg.get_opt("max_steps")?,
    };
    cfg.write()?;

    let init = Classifier::build(arch, ds.dim(), ds.num_classes(), init_seed)?;
    let mut log = Vec::new();
    let result = train(init, &ds, &tc, Some(&mut log), &mut NoHooks);
    write_file(&cfg.out_path(TRAIN_LOG_FILE), &log)?;
    match result {
        Ok(mut ck) => {
            ck.config.push(("data".into(), spec));
            ck.save(&cfg.out_path(CHECKPOINT_FILE))?;
            Ok(())
        }
        Err(abort) => {
            abort.checkpoint.save(&cfg.out_path(PARTIAL_CHECKPOINT_FILE))?;
            bail!(
                "{}; partial checkpoint written to {}",
                abort.error,
                PARTIAL_CHECKPOINT_FILE
            )
        }
    }
}

pub fn cmd_sample(mut cfg: RunConfig) -> Result<()> {
    prepare(&cfg)?;
    let ck = load_checkpoint(&cfg)?;
    let c = &ck.classifier;
    let image = is_image(c);
    let pipeline: Pipeline = cfg.get("pipeline")?;
    let class: Option<usize> = cfg.get_opt("class")?;
    if let Some(k) = class {
        ensure!(
            k < c.num_classes(),
            "class {k} out of range for {} classes",
            c.num_classes()
        );
    }
    let mut spec = InferenceSpec::new(pipeline, class, cfg.get("count")?, cfg.seed()?);
    spec.init = cfg.get::<InitKind>("init")?;
    spec.contrast_factor = cfg.get("contrast")?;
    spec.attack = attack_spec(
        &mut cfg,
        "attack_epsilon",
        "attack_steps",
        "attack_step_size",
        AttackMode::Targeted,
    )?;
    spec.sgld.alpha = cfg.get_opt("sgld_alpha")?.unwrap_or(default_alpha(image));
    cfg.settle("sgld_alpha", spec.sgld.alpha);
    if let Some(o) = cfg.get_opt("sgld_outer")? {
        spec.sgld.outer_loops = o;
    }
    cfg.settle("sgld_outer", spec.sgld.outer_loops);
    spec.sgld.inner_loops = cfg.get("sgld_inner")?;
    spec.sgld = apply_noise(&cfg, spec.sgld)?;
    let cols = cfg
        .get_opt("grid_cols")?
        .unwrap_or_else(|| (spec.count as f64).sqrt().ceil() as usize);
    cfg.settle("grid_cols", cols);
    cfg.write()?;

    let samples = generate(&ck, &spec)?;
    let xs: Vec<Tensor> = samples.iter().map(|s| s.x.clone()).collect();
    let classes: Vec<usize> = samples.iter().map(|s| s.meta.class).collect();
    let mut csv = Vec::new();
    Dataset::new(xs, classes, c.num_classes(), "samples")?.write_csv(&mut csv)?;
    write_file(&cfg.out_path(SAMPLES_FILE), &csv)?;

    let mut meta = format!("{SAMPLE_META_HEADER}\n");
    for s in &samples {
        meta.push_str(&s.meta.csv_row());
        meta.push('\n');
    }
    write_file(&cfg.out_path(METADATA_FILE), meta.as_bytes())?;

    if image {
        let side = conv_side(c.input_dim()).expect("convtiny input is square");
        let dir = cfg.out_path(SAMPLE_DIR);
        fs::create_dir_all(&dir)?;
        let mut tiles = Vec::with_capacity(samples.len());
        for s in &samples {
            let img = RgbImage::from_planar(&s.x, 3, side)?;
            write_file(&dir.join(format!("sample_{:04}.ppm", s.meta.index)), &img.encode_ppm())?;
            tiles.push(img);
        }
        write_file(&cfg.out_path(GRID_FILE), &tile_grid(&tiles, cols, 1)?.encode_ppm())?;
    }
    Ok(())
}

pub fn cmd_attack(mut cfg: RunConfig) -> Result<()> {
    prepare(&cfg)?;
    let ck = load_checkpoint(&cfg)?;
    let c = &ck.classifier;
    let spec_str = cfg.raw("data").to_string();
    let ds = data::load(&cfg, &spec_str)?.dataset;
    cfg.settle("data_seed", data::data_seed(&cfg)?);
    ensure!(
        ds.dim() == c.input_dim(),
        "data dimension {} does not match checkpoint input dimension {}",
        ds.dim(),
        c.input_dim()
    );
    let spec = attack_spec(&mut cfg, "epsilon", "steps", "step_size", AttackMode::Untargeted)?;
    cfg.write()?;

    let adv = attack_dataset(c, &ds, &spec)?;
    let mut clean = 0usize;
    let mut robust = 0usize;
    let mut max_linf: f64 = 0.0;
    for (xa, (x, y)) in adv.iter().zip(ds.iter()) {
        max_linf = max_linf.max(linf_distance(xa, x));
        let ok = argmax(c.logits(x)?.data()) == y;
        clean += usize::from(ok);
        robust += usize::from(ok && argmax(c.logits(xa)?.data()) == y);
    }
    let n = ds.len() as f64;
    let mut csv = Vec::new();
    Dataset::new(adv, ds.labels().to_vec(), ds.num_classes(), "adversarial")?.write_csv(&mut csv)?;
    write_file(&cfg.out_path(ADVERSARIAL_FILE), &csv)?;
    let report = format!(
        "epsilon,steps,step_size,count,clean_accuracy,robust_accuracy,max_linf\n{},{},{},{},{},{},{}\n",
        spec.epsilon,
        spec.steps,
        spec.step_size,
        ds.len(),
        clean as f64 / n,
        robust as f64 / n,
        max_linf
    );
    write_file(&cfg.out_path(REPORT_FILE), report.as_bytes())
}

struct SampleSet {
    name: String,
    data: Dataset,
    stats: FeatureStats,
    inception: f64,
}

/// Input columns in a dataset CSV header.
fn csv_dim(path: &str) -> Result<usize> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    let header = text.lines().next().unwrap_or_default();
    Ok(header.split(',').count().saturating_sub(1))
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn cmd_eval(mut cfg: RunConfig) -> Result<()> {
    prepare(&cfg)?;
    let ck = load_checkpoint(&cfg)?;
    let c = &ck.classifier;
    let view = EnergyView::new(c);
    let paths: Vec<String> = cfg
        .raw("samples")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    ensure!(!paths.is_empty(), "`--samples` needs at least one CSV file");
    let reference = match cfg.raw("reference") {
        "none" => None,
        spec => {
            let r = data::load(&cfg, spec)?;
            cfg.settle("data_seed", data::data_seed(&cfg)?);
            Some(r)
        }
    };
    cfg.write()?;

    let features = |x: &Tensor| c.features(x);
    let mut sets = Vec::new();
    for p in &paths {
        let dim = csv_dim(p)?;
        ensure!(
            dim == c.input_dim(),
            "{p}: dimension {dim} does not match checkpoint input dimension {}",
            c.input_dim()
        );
        let data = Dataset::load_csv(p.as_ref(), Some(c.num_classes())).with_context(|| format!("loading {p}"))?;
        let posteriors = data
            .inputs()
            .iter()
            .map(|x| view.posterior(x))
            .collect::<ajem_core::Result<Vec<_>>>()?;
        sets.push(SampleSet {
            name: p.clone(),
            stats: feature_stats(features, data.inputs())?,
            inception: inception_score(&posteriors)?,
            data,
        });
    }
    if let Some(r) = &reference {
        ensure!(
            r.dataset.dim() == c.input_dim(),
            "reference dimension {} does not match checkpoint input dimension {}",
            r.dataset.dim(),
            c.input_dim()
        );
    }

    let mut summary = String::new();
    let mut metrics;
    if c.input_dim() == 2 {
        metrics = String::from("set,count,inception_score,sym_kl,ks_x,ks_y\n");
        let grid = match reference.as_ref().and_then(|r| r.oracle.as_ref()) {
            Some(oracle) => {
                let lo: f64 = cfg.get("grid_lo")?;
                let hi: f64 = cfg.get("grid_hi")?;
                Some(oracle_density_2d(
                    |x, y| oracle.energy([x, y]),
                    GridSpec::square(lo, hi, cfg.get("grid_n")?),
                )?)
            }
            None => None,
        };
        for s in &sets {
            let d = match &grid {
                Some(g) => {
                    let pts: Vec<[f64; 2]> = s.data.inputs().iter().map(|x| [x.data()[0], x.data()[1]]).collect();
                    Some(twod_divergence(&pts, g, cfg.get("smoothing")?)?)
                }
                None => None,
            };
            metrics.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.name,
                s.data.len(),
                s.inception,
                opt_cell(d.map(|d| d.symmetric_kl)),
                opt_cell(d.map(|d| d.ks_x)),
                opt_cell(d.map(|d| d.ks_y)),
            ));
            summary.push_str(&format!("{}: n={} IS={}", s.name, s.data.len(), s.inception));
            if let Some(d) = d {
                summary.push_str(&format!(" sym_kl={} ks_x={} ks_y={}", d.symmetric_kl, d.ks_x, d.ks_y));
            }
            summary.push('\n');
        }
    } else {
        metrics = String::from("set,count,inception_score,fid_reference\n");
        let ref_stats = match &reference {
            Some(r) => Some(feature_stats(features, r.dataset.inputs())?),
            None => None,
        };
        for s in &sets {
            let fid = ref_stats.as_ref().map(|r| frechet_distance(&s.stats, r)).transpose()?;
            metrics.push_str(&format!(
                "{},{},{},{}\n",
                s.name,
                s.data.len(),
                s.inception,
                opt_cell(fid)
            ));
            summary.push_str(&format!("{}: n={} IS={}", s.name, s.data.len(), s.inception));
            if let Some(f) = fid {
                summary.push_str(&format!(" FID={f}"));
            }
            summary.push('\n');
        }
    }

    let mut pairwise = String::from("set_a,set_b,frechet\n");
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            let d = frechet_distance(&a.stats, &b.stats)?;
            pairwise.push_str(&format!("{},{},{}\n", a.name, b.name, d));
            summary.push_str(&format!("frechet({}, {}) = {}\n", a.name, b.name, d));
        }
    }
    write_file(&cfg.out_path(METRICS_FILE), metrics.as_bytes())?;
    write_file(&cfg.out_path(PAIRWISE_FILE), pairwise.as_bytes())?;
    write_file(&cfg.out_path(SUMMARY_FILE), summary.as_bytes())
}
