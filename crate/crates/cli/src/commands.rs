use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ppac_core::data::metrics::{argmax_channels, eval_flow, eval_segmentation, MetricReport};
use ppac_core::data::SceneSpec;
use ppac_core::io::bundle::read_guidance;
use ppac_core::io::raster::{read_gray, write_gray};
use ppac_core::io::{
    generate_bundle, load_checkpoint, read_channels, read_flo, save_checkpoint, write_flo, Manifest, RunConfig,
    MANIFEST_NAME,
};
use ppac_core::net::{NetInputs, NetKind, RefinementNet, Task};
use ppac_core::train::{gradient_suite, train_epochs, Sample, IGNORE_LABEL};
use ppac_core::{Error, Tensor};

use crate::{EvalArgs, GenArgs, RefineArgs};

/// A command failure, carrying its exit code class.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            e if e.is_numerical() => Failure::Numerical(e.to_string()),
            e => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

pub fn gen(args: &GenArgs) -> Outcome {
    let mut spec = SceneSpec { task: args.task, ..SceneSpec::default() };
    if let Some((h, w)) = args.size {
        spec.height = h;
        spec.width = w;
    }
    if let Some(k) = args.objects {
        spec.n_objects = k;
    }
    if let Some(p) = args.outlier_density {
        spec.outlier_density = p;
    }
    if let Some(r) = args.blur_radius {
        spec.blur_radius = r;
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let manifest = generate_bundle(&args.out, args.count, &spec, args.seed)?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), args.out.display());
    Ok(())
}

/// A manifest path, or a bundle directory holding one.
fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_NAME)
    } else {
        p.to_path_buf()
    }
}

fn load_samples(path: &Path, cfg: &RunConfig, key: &str) -> Result<Vec<Sample<f32>>, Failure> {
    let path = manifest_path(path);
    let manifest = Manifest::load(&path)?;
    if manifest.spec.task != cfg.task {
        return Err(Failure::Usage(format!(
            "config error for key `{key}`: {} holds {} scenes but task = {}",
            path.display(),
            manifest.spec.task.tag(),
            cfg.task.tag()
        )));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let scenes = manifest.read_scenes::<f32>(root)?;
    Ok(scenes
        .iter()
        .map(|s| s.sample(cfg.task, cfg.confidence_source))
        .collect::<Result<_, _>>()?)
}

pub fn train(config: &Path, seed: Option<u64>) -> Outcome {
    let mut cfg = RunConfig::load(config).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let train = load_samples(&cfg.train, &cfg, "train")?;
    let val = match &cfg.val {
        Some(p) => Some(load_samples(p, &cfg, "val")?),
        None => None,
    };
    let mut net = RefinementNet::<f32>::build_with_mode(cfg.kind, cfg.task, cfg.normalization_mode, cfg.seed)?;
    if let Some(eps) = cfg.epsilon_denom {
        net.set_epsilon_denom(eps as f32)?;
    }
    eprintln!(
        "training {}-{} ({} params) on {} scenes for {} epochs",
        cfg.kind.tag(),
        cfg.task.tag(),
        net.parameter_count(),
        train.len(),
        cfg.epochs
    );
    let outcome = train_epochs(&mut net, &train, val.as_deref(), &cfg.train_config())?;

    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_failure(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join("log.csv");
    let mut csv = String::from("epoch,lr,train_loss,val_metric\n");
    for l in &outcome.log {
        let val = l.val_metric.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{val}\n", l.epoch, l.lr, l.train_loss));
    }
    fs::write(&log_path, csv).map_err(|e| io_failure(&log_path, e))?;
    save_checkpoint(cfg.out_dir.join("final.ckpt"), &net)?;
    net.params_mut().restore(&outcome.best_params)?;
    save_checkpoint(cfg.out_dir.join("best.ckpt"), &net)?;

    let metric = match cfg.task {
        Task::Flow => "val_aee",
        Task::Segmentation => "val_miou",
    };
    match (outcome.best_epoch, outcome.best_metric) {
        (Some(e), Some(m)) => println!("best_epoch {e}\n{metric} {m:.6}"),
        _ => println!("best_epoch none"),
    }
    if let Some(last) = outcome.log.last() {
        println!("final_train_loss {:.6}", last.train_loss);
    }
    println!("checkpoints {}", cfg.out_dir.display());
    Ok(())
}

pub fn refine(args: &RefineArgs) -> Outcome {
    let net = load_checkpoint::<f32>(&args.checkpoint)?;
    let task = net.task();
    let estimate = match task {
        Task::Flow => read_flo(&args.estimate)?,
        Task::Segmentation => read_channels(&args.estimate, task.estimate_channels())?,
    };
    let stem = if args.logprob.is_dir() { args.logprob.join("logprob") } else { args.logprob.clone() };
    let log_probability = read_channels(&stem, task.probability_channels())?;
    let guidance = read_guidance(&args.guidance)?;
    let inputs = NetInputs::new(estimate, log_probability, guidance)?;
    let refined = net.forward(&inputs)?;
    match task {
        Task::Flow => write_flo(&args.out, &refined)?,
        Task::Segmentation => {
            let (h, w) = refined.spatial();
            let classes: Vec<u8> = argmax_channels(&refined).data().iter().map(|&c| c as u8).collect();
            write_gray(&args.out, &classes, h, w)?;
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn gray_map(path: &Path) -> Result<Tensor<f64>, Failure> {
    let (v, h, w) = read_gray(path)?;
    Ok(Tensor::from_vec([1, 1, h, w], v.into_iter().map(f64::from).collect())?)
}

fn is_flo(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("flo"))
}

pub fn eval(args: &EvalArgs) -> Outcome {
    let report: MetricReport = if is_flo(&args.pred) {
        let pred = read_flo::<f64>(&args.pred)?;
        let gt = read_flo::<f64>(&args.gt)?;
        let labels = match &args.labels {
            Some(p) => Some(gray_map(p)?),
            None => {
                eprintln!("warning: no --labels given, boundary_aee omitted");
                None
            }
        };
        eval_flow(&pred, &gt, None, labels.as_ref(), args.band_radius)?
    } else {
        let pred = gray_map(&args.pred)?;
        let gt = gray_map(&args.gt)?;
        let classes = Task::Segmentation.estimate_channels();
        if let Some(bad) = pred.data().iter().find(|&&c| c as usize >= classes) {
            return Err(Failure::Data(format!("{}: class {bad} out of range", args.pred.display())));
        }
        let [n, _, h, w] = pred.shape();
        let one_hot = Tensor::from_fn([n, classes, h, w], |b, c, y, x| f64::from(u8::from(pred.get(b, 0, y, x) as usize == c)));
        eval_segmentation(&one_hot, &gt, IGNORE_LABEL)?
    };
    let rows: Vec<(&str, f64)> = [
        ("aee", report.aee),
        ("outlier_rate_3px", report.outlier_rate_3px),
        ("boundary_aee", report.boundary_aee),
        ("miou", report.miou),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.map(|v| (k, v)))
    .collect();
    let mut stdout = std::io::stdout().lock();
    for (k, v) in &rows {
        let _ = writeln!(stdout, "{k} {v:.6}");
    }
    if let Some(path) = &args.csv {
        let mut csv = String::from("metric,value\n");
        for (k, v) in &rows {
            csv.push_str(&format!("{k},{v:.6}\n"));
        }
        fs::write(path, csv).map_err(|e| io_failure(path, e))?;
    }
    Ok(())
}

pub fn gradcheck(seed: u64, tolerance: f64) -> Outcome {
    if !(tolerance > 0.0) {
        return Err(Failure::Usage(format!("tolerance must be positive, got {tolerance}")));
    }
    let entries = gradient_suite(seed, tolerance)?;
    let failed = entries.iter().filter(|e| !e.report.passed()).count();
    for e in &entries {
        println!("{:<44} {}", e.name, e.report);
    }
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} of {} gradient checks failed", entries.len())));
    }
    println!("all {} gradient checks passed", entries.len());
    Ok(())
}

pub fn params(kind: NetKind, task: Task) -> Outcome {
    let net = RefinementNet::<f64>::build(kind, task, 0)?;
    for (branch, n) in net.parameter_breakdown() {
        println!("{branch} {n}");
    }
    println!("total {}", net.parameter_count());
    Ok(())
}
