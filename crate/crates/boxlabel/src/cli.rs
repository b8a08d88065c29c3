//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use boxlabel_core::boundary::sobel_boundary;
use boxlabel_core::denoise::{
    round_stats, run_round, run_stages, DenoiseConfig, Predictor, SegmentRule, Stages, SyntheticPredictor,
};
use boxlabel_core::densecrf::CrfParams;
use boxlabel_core::metrics::{instance_eval, semantic_eval};
use boxlabel_core::seed;
use boxlabel_core::synth::{self, SceneSpec};
use boxlabel_core::weaklabels::{generate, GenInputs, Method};
use boxlabel_core::{BoundaryMap, BoxSet, Image, LabelMap, ProposalSet, WeakLabelConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use crate::dataio::{self, Entry};
use crate::error::{AppError, CoreContext, Result};
use crate::metadata::RunMetadata;
use crate::render::overlay;

#[derive(Debug, Parser)]
#[command(name = "boxlabel", version, about = "Segmentation labels from bounding boxes")]
pub struct Cli {
    /// Worker threads; parallelism is across images only.
    #[arg(long, env = "BOXLABEL_THREADS", global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with full ground truth.
    Synth(SynthArgs),
    /// Generate labels from boxes.
    Gen(GenArgs),
    /// Post-process predictions between training rounds.
    Denoise(DenoiseArgs),
    /// Evaluate labels or instance segments.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Overlay label maps on their images.
    Render(RenderArgs),
    /// Run the recursive loop with a synthetic predictor.
    Rounds(RoundsArgs),
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    Semantic(EvalSemanticArgs),
    Instance(EvalInstanceArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec JSON; missing fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Overrides the spec seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Debug, Args, Clone)]
pub struct ClassArgs {
    /// Label count including background.
    #[arg(long, default_value_t = 21, value_parser = clap::value_parser!(u16).range(2..=255))]
    pub classes: u16,
}

impl ClassArgs {
    pub fn num_classes(&self) -> u8 {
        (self.classes - 1) as u8
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the boundary maps listed in the manifest.
    #[arg(long)]
    pub boundaries: bool,
    /// Use the proposal masks listed in the manifest.
    #[arg(long)]
    pub proposals: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturbed runs per box for grabcut+i.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Generator config JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub classes: ClassArgs,
}

#[derive(Debug, Args, Clone)]
pub struct CrfArgs {
    #[arg(long, default_value_t = CrfParams::default().w_appearance)]
    pub crf_w_appearance: f64,
    #[arg(long, default_value_t = CrfParams::default().theta_alpha)]
    pub crf_theta_alpha: f64,
    #[arg(long, default_value_t = CrfParams::default().theta_beta)]
    pub crf_theta_beta: f64,
    #[arg(long, default_value_t = CrfParams::default().w_smooth)]
    pub crf_w_smooth: f64,
    #[arg(long, default_value_t = CrfParams::default().theta_gamma)]
    pub crf_theta_gamma: f64,
    #[arg(long, default_value_t = CrfParams::default().iterations)]
    pub crf_iterations: usize,
    #[arg(long, default_value_t = CrfParams::default().unary_confidence)]
    pub crf_confidence: f64,
}

impl CrfArgs {
    pub fn params(&self) -> CrfParams {
        CrfParams {
            w_appearance: self.crf_w_appearance,
            theta_alpha: self.crf_theta_alpha,
            theta_beta: self.crf_theta_beta,
            w_smooth: self.crf_w_smooth,
            theta_gamma: self.crf_theta_gamma,
            iterations: self.crf_iterations,
            unary_confidence: self.crf_confidence,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RuleArg {
    All,
    Largest,
}

impl From<RuleArg> for SegmentRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::All => SegmentRule::AllPixels,
            RuleArg::Largest => SegmentRule::LargestComponent,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct DenoiseOpts {
    #[arg(long, default_value_t = 0.5)]
    pub iou_thresh: f64,
    /// Segment of a box in the outlier test.
    #[arg(long, value_enum, default_value_t = RuleArg::All)]
    pub segment_rule: RuleArg,
    #[command(flatten)]
    pub crf: CrfArgs,
    #[command(flatten)]
    pub classes: ClassArgs,
}

impl DenoiseOpts {
    fn config(&self) -> Result<DenoiseConfig> {
        if !(0.0..=1.0).contains(&self.iou_thresh) {
            return Err(AppError::Usage("--iou-thresh must lie in [0, 1]".into()));
        }
        let cfg = DenoiseConfig {
            outlier_iou_thresh: self.iou_thresh,
            segment_rule: self.segment_rule.into(),
            crf: self.crf.params(),
            n_labels: self.classes.classes as usize,
        };
        cfg.crf.validate(cfg.n_labels).context("CRF parameters")?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub initial: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated stages: 1 box enforcing, 2 outlier reset, 3 CRF.
    #[arg(long, default_value = "1,2,3")]
    pub stages: String,
    #[command(flatten)]
    pub opts: DenoiseOpts,
}

#[derive(Debug, Args)]
pub struct EvalSemanticArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[command(flatten)]
    pub classes: ClassArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalInstanceArgs {
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Comma-separated mask IoU thresholds.
    #[arg(long, default_value = "0.5,0.75", value_delimiter = ',')]
    pub iou: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct RoundsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    /// Generator for round 0.
    #[arg(long, value_parser = parse_method, default_value = "box")]
    pub init: Method,
    /// Corruption rate of the synthetic predictor.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub boundaries: bool,
    #[arg(long)]
    pub proposals: bool,
    #[command(flatten)]
    pub opts: DenoiseOpts,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "ERROR:{}:{}",
                crate::error::EXIT_USAGE,
                first.trim_start_matches("error: ")
            );
            return crate::error::EXIT_USAGE;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("ERROR:{code}:{e}");
            code
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(AppError::Usage("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| AppError::Internal(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Gen(a) => cmd_gen(&a),
        Command::Denoise(a) => cmd_denoise(&a),
        Command::Eval(EvalCommand::Semantic(a)) => cmd_eval_semantic(&a),
        Command::Eval(EvalCommand::Instance(a)) => cmd_eval_instance(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Rounds(a) => cmd_rounds(&a),
    })
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialise")
}

/// Records the manifest and every file it references.
fn record_manifest(meta: &mut RunMetadata, manifest: &Path, entries: &[Entry]) -> Result<()> {
    meta.add_input("manifest", manifest)?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    for e in entries {
        for f in e.files() {
            let key = f.strip_prefix(base).unwrap_or(&f).to_string_lossy().into_owned();
            meta.add_input(key, &f)?;
        }
        if let Some(dir) = &e.proposal_dir {
            let listed: dataio::ProposalManifest = dataio::read_json(&dir.join(dataio::PROPOSAL_MANIFEST))?;
            for m in listed.masks {
                let f = dir.join(m);
                let key = f.strip_prefix(base).unwrap_or(&f).to_string_lossy().into_owned();
                meta.add_input(key, &f)?;
            }
        }
    }
    Ok(())
}

/// Runs `f` on every entry in parallel, keeping manifest order in the result.
fn per_entry<T: Send>(entries: &[Entry], f: impl Fn(usize, &Entry) -> Result<T> + Sync) -> Result<Vec<T>> {
    entries.par_iter().enumerate().map(|(i, e)| f(i, e)).collect()
}

struct Loaded {
    image: Image,
    boxes: BoxSet,
}

fn load_entry(e: &Entry, num_classes: u8) -> Result<Loaded> {
    let image = dataio::read_image(&e.image)?;
    let boxes = dataio::read_annotations(&e.annotation, num_classes)?;
    image.dims().check(boxes.dims()).context(e.annotation.display())?;
    Ok(Loaded { image, boxes })
}

fn load_labels(path: &Path, loaded: &Loaded, num_classes: u8) -> Result<LabelMap> {
    let map = dataio::read_labelmap(path)?;
    loaded.image.dims().check(map.dims()).context(path.display())?;
    map.validate(num_classes).context(path.display())?;
    Ok(map)
}

fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.png"))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => dataio::read_json(p)?,
        None => SceneSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate().context("scene spec")?;
    let out = &a.out;
    let entries = (0..a.count)
        .into_par_iter()
        .map(|i| -> Result<(dataio::ManifestEntry, dataio::InstanceFile)> {
            let id = format!("scene_{i:04}");
            let bundle = synth::generate(&spec.for_scene(i)).context(&id)?;
            let rel = |dir: &str, ext: &str| PathBuf::from(dir).join(format!("{id}{ext}"));
            dataio::write_image(&bundle.image, &out.join(rel("images", ".png")))?;
            dataio::write_annotations(&bundle.boxes, &out.join(rel("annotations", ".json")))?;
            dataio::write_boundary_map(&bundle.boundary, &out.join(rel("boundaries", ".png")))?;
            dataio::write_proposals(&bundle.proposals, &out.join(rel("proposals", "")))?;
            dataio::write_labelmap(&bundle.gt, &out.join(rel("gt", ".png")))?;
            let mut instances = Vec::with_capacity(bundle.instances.len());
            for (k, inst) in bundle.instances.iter().enumerate() {
                let mask = PathBuf::from("instances").join(&id).join(format!("{k}.png"));
                dataio::write_mask(&inst.mask, &out.join(&mask))?;
                instances.push(dataio::InstanceRecord {
                    class_id: inst.class_id as i64,
                    mask,
                });
            }
            let entry = dataio::ManifestEntry {
                id: Some(id.clone()),
                image_path: rel("images", ".png"),
                annotation_path: rel("annotations", ".json"),
                boundary_path: Some(rel("boundaries", ".png")),
                proposal_dir: Some(rel("proposals", "")),
                gt_label_path: Some(rel("gt", ".png")),
            };
            Ok((entry, dataio::InstanceFile { instances }))
        })
        .collect::<Result<Vec<_>>>()?;
    let (entries, instances): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
    dataio::write_json(&dataio::DatasetManifest { entries }, &out.join("manifest.json"))?;
    dataio::write_json(
        &dataio::PerImage::Many { images: instances },
        &out.join("instances.json"),
    )?;
    let mut meta = RunMetadata::new("synth", json!({ "spec": to_value(&spec), "count": a.count }));
    if let Some(p) = &a.spec {
        meta.add_input(p.to_string_lossy(), p)?;
    }
    meta.write(out)
}

fn weak_config(a: &GenArgs) -> Result<WeakLabelConfig> {
    let mut cfg: WeakLabelConfig = match &a.config {
        Some(p) => dataio::read_json(p)?,
        None => WeakLabelConfig::default(),
    };
    cfg.rng_seed = a.seed;
    cfg.num_classes = a.classes.num_classes();
    if let Some(r) = a.runs {
        cfg.n_perturbations = r;
    }
    cfg.validate().context("generator config")?;
    Ok(cfg)
}

fn boundary_for(e: &Entry, image: &Image, use_files: bool) -> Result<BoundaryMap> {
    match (&e.boundary, use_files) {
        (Some(p), true) => {
            let b = dataio::read_boundary_map(p)?;
            image.dims().check(b.dims()).context(p.display())?;
            Ok(b)
        }
        _ => {
            log::warn!("{}: no boundary map, using image gradients", e.id);
            Ok(sobel_boundary(image))
        }
    }
}

fn proposals_for(e: &Entry, image: &Image) -> Result<ProposalSet> {
    match &e.proposal_dir {
        Some(d) => dataio::read_proposals(d, image.dims()),
        None => {
            log::warn!("{}: no proposals listed", e.id);
            Ok(ProposalSet::default())
        }
    }
}

/// Per-image seed: independent of thread count and scheduling.
fn image_seed(seed: u64, index: usize) -> u64 {
    seed::derive(&[seed, index as u64])
}

fn check_method_inputs(method: Method, proposals: bool) -> Result<()> {
    if method.needs_proposals() && !proposals {
        return Err(AppError::Data(format!("method {} requires --proposals", method.name())));
    }
    Ok(())
}

fn generate_for(
    method: Method,
    e: &Entry,
    loaded: &Loaded,
    cfg: &WeakLabelConfig,
    boundaries: bool,
) -> Result<LabelMap> {
    let boundary = method
        .needs_boundary()
        .then(|| boundary_for(e, &loaded.image, boundaries))
        .transpose()?;
    let proposals = method
        .needs_proposals()
        .then(|| proposals_for(e, &loaded.image))
        .transpose()?;
    let inputs = GenInputs {
        image: &loaded.image,
        boxes: &loaded.boxes,
        boundary: boundary.as_ref(),
        proposals: proposals.as_ref(),
    };
    generate(method, inputs, cfg).context(&e.id)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg = weak_config(a)?;
    check_method_inputs(a.method, a.proposals)?;
    let entries = dataio::read_manifest(&a.manifest)?;
    per_entry(&entries, |i, e| {
        let loaded = load_entry(e, cfg.num_classes)?;
        let cfg = WeakLabelConfig {
            rng_seed: image_seed(cfg.rng_seed, i),
            ..cfg.clone()
        };
        let labels = generate_for(a.method, e, &loaded, &cfg, a.boundaries)?;
        dataio::write_labelmap(&labels, &label_path(&a.out, &e.id))
    })?;
    let mut meta = RunMetadata::new(
        "gen",
        json!({
            "method": a.method.name(),
            "weak_labels": to_value(&cfg),
            "boundaries": a.boundaries,
            "proposals": a.proposals,
        }),
    );
    record_manifest(&mut meta, &a.manifest, &entries)?;
    meta.write(&a.out)
}

fn cmd_denoise(a: &DenoiseArgs) -> Result<()> {
    let stages = Stages::parse(&a.stages).ok_or_else(|| {
        AppError::Usage(format!(
            "--stages must be a comma-separated subset of 1,2,3, got {:?}",
            a.stages
        ))
    })?;
    let cfg = a.opts.config()?;
    let num_classes = a.opts.classes.num_classes();
    let entries = dataio::read_manifest(&a.manifest)?;
    per_entry(&entries, |_, e| {
        let loaded = load_entry(e, num_classes)?;
        let pred = load_labels(&label_path(&a.pred, &e.id), &loaded, num_classes)?;
        let initial = load_labels(&label_path(&a.initial, &e.id), &loaded, num_classes)?;
        let out = run_stages(&pred, &loaded.boxes, &initial, &loaded.image, stages, &cfg).context(&e.id)?;
        dataio::write_labelmap(&out, &label_path(&a.out, &e.id))
    })?;
    let mut meta = RunMetadata::new(
        "denoise",
        json!({
            "stages": { "enforce": stages.enforce, "reset": stages.reset, "crf": stages.crf },
            "denoise": to_value(&cfg),
        }),
    );
    record_manifest(&mut meta, &a.manifest, &entries)?;
    for e in &entries {
        for (dir, tag) in [(&a.pred, "pred"), (&a.initial, "initial")] {
            meta.add_input(format!("{tag}/{}.png", e.id), &label_path(dir, &e.id))?;
        }
    }
    meta.write(&a.out)
}

fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| AppError::io(dir, e))? {
        let entry = entry.map_err(|e| AppError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn emit_report(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON value"));
    if let Some(p) = out {
        dataio::write_json(value, p)?;
    }
    Ok(())
}

fn cmd_eval_semantic(a: &EvalSemanticArgs) -> Result<()> {
    let num_classes = a.classes.num_classes();
    let names = list_pngs(&a.gt)?;
    let pairs = names
        .par_iter()
        .map(|n| {
            let gt = dataio::read_labelmap(&a.gt.join(n))?;
            let pred = dataio::read_labelmap(&a.pred.join(n))?;
            Ok((pred, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    let (preds, gts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let report = semantic_eval(&preds, &gts, num_classes).context("semantic evaluation")?;
    let per_class: serde_json::Map<String, serde_json::Value> = report
        .per_class_iou
        .iter()
        .enumerate()
        .filter_map(|(c, v)| v.map(|v| (c.to_string(), json!(v))))
        .collect();
    emit_report(
        &json!({ "miou": report.miou, "per_class": per_class, "images": names.len() }),
        a.out.as_deref(),
    )
}

fn cmd_eval_instance(a: &EvalInstanceArgs) -> Result<()> {
    if a.iou.is_empty() || a.iou.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(AppError::Usage("--iou thresholds must lie in [0, 1]".into()));
    }
    let dets = dataio::read_detections(&a.dets)?;
    let gts = dataio::read_instances(&a.gt)?;
    let report = instance_eval(&dets, &gts, &a.iou).context("instance evaluation")?;
    let mut obj = serde_json::Map::new();
    let mut per_class = serde_json::Map::new();
    for ap in &report.ap {
        obj.insert(format!("mAP@{}", ap.iou_thresh), json!(ap.map));
        per_class.insert(ap.iou_thresh.to_string(), to_value(&ap.per_class));
    }
    obj.insert("ABO".into(), json!(report.abo));
    obj.insert("per_class".into(), per_class.into());
    emit_report(&obj.into(), a.out.as_deref())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(AppError::Usage("--alpha must lie in [0, 1]".into()));
    }
    let entries = dataio::read_manifest(&a.manifest)?;
    per_entry(&entries, |_, e| {
        let image = dataio::read_image(&e.image)?;
        let path = label_path(&a.labels, &e.id);
        let labels = dataio::read_labelmap(&path)?;
        image.dims().check(labels.dims()).context(path.display())?;
        dataio::write_image(&overlay(&image, &labels, a.alpha), &label_path(&a.out, &e.id))
    })?;
    Ok(())
}

fn cmd_rounds(a: &RoundsArgs) -> Result<()> {
    if a.rounds == 0 {
        return Err(AppError::Usage("--rounds must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&a.noise) {
        return Err(AppError::Usage("--noise must lie in [0, 1]".into()));
    }
    check_method_inputs(a.init, a.proposals)?;
    let cfg = a.opts.config()?;
    let weak = WeakLabelConfig {
        rng_seed: a.seed,
        num_classes: a.opts.classes.num_classes(),
        ..WeakLabelConfig::default()
    };
    let num_classes = weak.num_classes;
    let entries = dataio::read_manifest(&a.manifest)?;
    let loaded = per_entry(&entries, |i, e| {
        let loaded = load_entry(e, num_classes)?;
        let gt_path = e
            .gt_labels
            .as_ref()
            .ok_or_else(|| AppError::Data(format!("{}: rounds need gt_label_path", e.id)))?;
        let gt = load_labels(gt_path, &loaded, num_classes)?;
        let cfg = WeakLabelConfig {
            rng_seed: image_seed(weak.rng_seed, i),
            ..weak.clone()
        };
        let initial = generate_for(a.init, e, &loaded, &cfg, a.boundaries)?;
        Ok((loaded, gt, initial))
    })?;
    let gts: Vec<LabelMap> = loaded.iter().map(|l| l.1.clone()).collect();
    let initial: Vec<LabelMap> = loaded.iter().map(|l| l.2.clone()).collect();
    let predictor = SyntheticPredictor {
        gts: gts.clone(),
        noise: a.noise,
        n_labels: cfg.n_labels,
        seed: a.seed,
    };
    let write_round = |r: usize, labels: &[LabelMap], prev: Option<&[LabelMap]>| -> Result<()> {
        let dir = a.out.join(format!("round_{r}"));
        for (e, l) in entries.iter().zip(labels) {
            dataio::write_labelmap(l, &label_path(&dir, &e.id))?;
        }
        let stats = round_stats(labels, prev, Some(&gts), num_classes).context(format!("round {r}"))?;
        dataio::write_json(
            &json!({ "round": r, "stats": to_value(&stats) }),
            &dir.join("stats.json"),
        )
    };
    write_round(0, &initial, None)?;
    let mut current = initial.clone();
    for r in 1..=a.rounds {
        let next = loaded
            .par_iter()
            .enumerate()
            .map(|(i, (l, _, init))| {
                let pred = predictor.predict(i, &l.image, &current[i], r).context(&entries[i].id)?;
                run_round(&pred, &l.boxes, init, &l.image, &cfg).context(&entries[i].id)
            })
            .collect::<Result<Vec<_>>>()?;
        write_round(r, &next, Some(&current))?;
        current = next;
    }
    let mut meta = RunMetadata::new(
        "rounds",
        json!({
            "init": a.init.name(),
            "rounds": a.rounds,
            "noise": a.noise,
            "weak_labels": to_value(&weak),
            "denoise": to_value(&cfg),
        }),
    );
    record_manifest(&mut meta, &a.manifest, &entries)?;
    meta.write(&a.out)
}
