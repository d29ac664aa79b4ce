//! The lab's commands: train, eval, patch, analyze and the full report
//! pipeline. Each writes its artifacts plus one `manifest.json` into its
//! output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dot::emit_circuit_dot;
use super::manifest::RunManifest;
use super::svg::{emit_heatmap_svg, scatter_svg, ColorScale, HeatmapSpec};
use crate::analysis::{
    check_stability, map_features, mds_embed, pairwise_matrix, partition_heatmaps, top_quantile_circuit, tsne_embed,
    Embedding2D, TsneConfig, CIRCUIT_QUANTILE, DEFAULT_EPSILON, HEATMAP_QUANTILE,
};
use crate::error::{LabError, Result};
use crate::io_util::{atomic_write, fmt_sig9};
use crate::model::{init_model, load_checkpoint, Model};
use crate::patching::{influence_map_resumable, load_map, map_paths, patch_pairs, InfluenceMap};
use crate::seeds::{derive_seed, rng_from};
use crate::tasks::{
    all_classes, eval_accuracy, write_pairs_jsonl, Partition, TaskClass, DEFAULT_MAX_DIGITS, DEFAULT_SHOTS,
};
use crate::trainer::{train, MetricRow, TrainConfig, TrainOutcome};

/// Progress sink shared by every command.
pub type Log<'a> = &'a (dyn Fn(&str) + Sync);

const EVAL_STREAM: u64 = 0xE7A1_0001;

fn class_key(class: &TaskClass) -> u64 {
    ((class.m as u64) << 32) | class.n as u64
}

fn class_label(class: &TaskClass) -> String {
    format!("m{}_n{}", class.m, class.n)
}

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path).map_err(|e| match e {
        LabError::Io(io) => LabError::Usage(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub config: TrainConfig,
    pub out: PathBuf,
}

pub fn cmd_train(opts: &TrainOptions, log: Log<'_>) -> Result<TrainOutcome> {
    let start = Instant::now();
    opts.config.validate()?;
    let mut model = init_model(&opts.config.model)?;
    std::fs::create_dir_all(&opts.out)?;
    let mut progress = |row: &MetricRow| match (row.class, row.accuracy) {
        (Some((m, n)), Some(acc)) => log(&format!("step {:>6}  acc {m},{n} = {acc:.3}", row.step)),
        _ => log(&format!("step {:>6}  loss {:.5}", row.step, row.loss)),
    };
    let outcome = train(&mut model, &opts.config, Some(&opts.out), Some(&mut progress))?;
    let mut manifest = RunManifest::new("train", to_value(&opts.config)?);
    manifest.seeds.insert("seed".into(), opts.config.seed);
    manifest.seeds.insert("model_init".into(), opts.config.model.seed);
    for p in [&outcome.final_checkpoint, &outcome.best_checkpoint]
        .into_iter()
        .flatten()
    {
        manifest.add_output(&opts.out, p);
    }
    manifest.add_output(&opts.out, &opts.out.join("metrics.csv"));
    manifest.timings.insert("total".into(), seconds(start));
    manifest.write(&opts.out)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub max_digits: u32,
    pub samples: usize,
    pub seed: u64,
    pub shots: usize,
}

/// `D x D` exact-match accuracy grid, rows `m`, columns `n`.
pub fn accuracy_grid(model: &Model, max_digits: u32, samples: usize, seed: u64, shots: usize) -> Result<Vec<Vec<f64>>> {
    if max_digits == 0 {
        return Err(LabError::Usage("max-digits must be at least 1".into()));
    }
    let widest = TaskClass::with_shots(max_digits, max_digits, shots, max_digits)?;
    let need = widest.max_prompt_tokens();
    if need > model.config.max_seq_len {
        return Err(LabError::Usage(format!(
            "max-digits {max_digits} needs prompts of up to {need} tokens but the model's max_seq_len is {}",
            model.config.max_seq_len
        )));
    }
    let base = derive_seed(seed, EVAL_STREAM);
    let mut grid = vec![vec![0.0; max_digits as usize]; max_digits as usize];
    for class in all_classes(max_digits, shots) {
        let mut rng = rng_from(derive_seed(base, class_key(&class)));
        grid[class.m as usize - 1][class.n as usize - 1] = eval_accuracy(model, &class, samples, &mut rng)?;
    }
    Ok(grid)
}

/// CSV with a header of `n` values and one row per `m`.
pub fn grid_csv(grid: &[Vec<f64>]) -> String {
    let mut s = String::from("m\\n");
    for n in 1..=grid.len() {
        write!(s, ",{n}").unwrap();
    }
    s.push('\n');
    for (i, row) in grid.iter().enumerate() {
        write!(s, "{}", i + 1).unwrap();
        for v in row {
            write!(s, ",{}", fmt_sig9(*v)).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn cmd_eval(opts: &EvalOptions, log: Log<'_>) -> Result<Vec<Vec<f64>>> {
    let start = Instant::now();
    let model = load_model(&opts.checkpoint)?;
    let grid = accuracy_grid(&model, opts.max_digits, opts.samples, opts.seed, opts.shots)?;
    for (i, row) in grid.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        log(&format!("m={} {}", i + 1, cells.join(" ")));
    }
    let csv = opts.out.join("accuracy.csv");
    let svg = opts.out.join("accuracy.svg");
    atomic_write(&csv, grid_csv(&grid).as_bytes())?;
    let labels: Vec<String> = (1..=grid.len()).map(|d| d.to_string()).collect();
    let spec = HeatmapSpec {
        title: "exact-match accuracy (rows m, columns n)",
        row_labels: &labels,
        col_labels: &labels,
        scale: ColorScale::Sequential,
    };
    emit_heatmap_svg(&grid, &spec, &svg)?;
    let mut manifest = RunManifest::new("eval", to_value(opts)?);
    manifest.seeds.insert("seed".into(), opts.seed);
    manifest.inputs.push(opts.checkpoint.display().to_string());
    manifest.add_output(&opts.out, &csv);
    manifest.add_output(&opts.out, &svg);
    manifest.timings.insert("total".into(), seconds(start));
    manifest.write(&opts.out)?;
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchOptions {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub m: Option<u32>,
    pub n: Option<u32>,
    pub all_classes: bool,
    pub max_digits: u32,
    pub shots: usize,
    pub pairs: usize,
    pub seed: u64,
    /// Worker threads for multi-class runs.
    pub jobs: usize,
    /// Reuse stored maps whose sidecar matches the request.
    pub resume: bool,
    /// Also write the prompt pairs of each class as JSON lines.
    pub dump_pairs: bool,
}

impl PatchOptions {
    pub fn classes(&self) -> Result<Vec<TaskClass>> {
        match (self.all_classes, self.m, self.n) {
            (true, None, None) => Ok(all_classes(self.max_digits, self.shots)),
            (true, _, _) => Err(LabError::Usage("--all-classes cannot be combined with --m/--n".into())),
            (false, Some(m), Some(n)) => Ok(vec![TaskClass::with_shots(
                m,
                n,
                self.shots,
                self.max_digits.max(m).max(n),
            )?]),
            (false, _, _) => Err(LabError::Usage("give both --m and --n, or --all-classes".into())),
        }
    }
}

pub fn pairs_path(dir: &Path, class: &TaskClass, seed: u64) -> PathBuf {
    dir.join(format!("pairs_m{}_n{}_seed{}.jsonl", class.m, class.n, seed))
}

struct PatchResult {
    class: TaskClass,
    files: Vec<PathBuf>,
    computed: bool,
    secs: f64,
}

fn patch_one(model: &Model, class: &TaskClass, opts: &PatchOptions) -> Result<PatchResult> {
    let start = Instant::now();
    let ckpt = Some(opts.checkpoint.display().to_string());
    if !opts.resume {
        let (csv, _) = map_paths(&opts.out, class, opts.seed);
        if csv.exists() {
            std::fs::remove_file(&csv)?;
        }
    }
    let (_, computed) = influence_map_resumable(model, class, opts.pairs, opts.seed, &opts.out, ckpt)?;
    let (csv, json) = map_paths(&opts.out, class, opts.seed);
    let mut files = vec![csv, json];
    if opts.dump_pairs {
        let pairs = patch_pairs(class, opts.pairs, opts.seed)?;
        let mut buf = Vec::new();
        write_pairs_jsonl(&pairs, &mut buf)?;
        let path = pairs_path(&opts.out, class, opts.seed);
        atomic_write(&path, &buf)?;
        files.push(path);
    }
    Ok(PatchResult {
        class: *class,
        files,
        computed,
        secs: seconds(start),
    })
}

/// Computes (or resumes) one influence map per requested class. Classes
/// are shared among `jobs` workers; the maps do not depend on the
/// schedule.
pub fn cmd_patch(opts: &PatchOptions, log: Log<'_>) -> Result<Vec<InfluenceMap>> {
    let start = Instant::now();
    if opts.pairs == 0 {
        return Err(LabError::Usage("--pairs must be at least 1".into()));
    }
    let classes = opts.classes()?;
    let model = load_model(&opts.checkpoint)?;
    for class in &classes {
        if class.max_prompt_tokens() > model.config.max_seq_len {
            return Err(LabError::Usage(format!(
                "class {class} needs prompts of up to {} tokens but the model's max_seq_len is {}",
                class.max_prompt_tokens(),
                model.config.max_seq_len
            )));
        }
    }
    std::fs::create_dir_all(&opts.out)?;
    let jobs = opts.jobs.clamp(1, classes.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<PatchResult>>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(class) = classes.get(i) else { break };
                let r = patch_one(&model, class, opts);
                match &r {
                    Ok(done) => log(&format!(
                        "{} {} in {:.1}s",
                        if done.computed { "patched" } else { "reused" },
                        class,
                        done.secs
                    )),
                    Err(e) => {
                        log(&format!("class {class} failed: {e}"));
                        next.store(classes.len(), Ordering::Relaxed);
                    }
                }
                results.lock().expect("results lock").push(r);
            });
        }
    });
    let mut done = Vec::new();
    for r in results.into_inner().expect("results lock") {
        done.push(r?);
    }
    done.sort_by_key(|r| (r.class.m, r.class.n));
    let mut manifest = RunManifest::new("patch", to_value(opts)?);
    manifest.seeds.insert("seed".into(), opts.seed);
    manifest.inputs.push(opts.checkpoint.display().to_string());
    let mut maps = Vec::with_capacity(done.len());
    for r in &done {
        for f in &r.files {
            manifest.add_output(&opts.out, f);
        }
        manifest.timings.insert(r.class.to_string(), r.secs);
        maps.push(load_map(&r.files[0])?.0);
    }
    manifest.timings.insert("total".into(), seconds(start));
    manifest.write(&opts.out)?;
    Ok(maps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub maps: PathBuf,
    pub out: PathBuf,
    pub epsilon: f64,
    /// Circuit quantile.
    pub q: f64,
    /// Quantile behind the partition frequency heatmaps.
    pub heatmap_q: f64,
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl AnalyzeOptions {
    pub fn new(maps: PathBuf, out: PathBuf) -> Self {
        Self {
            maps,
            out,
            epsilon: DEFAULT_EPSILON,
            q: CIRCUIT_QUANTILE,
            heatmap_q: HEATMAP_QUANTILE,
            perplexity: 3.0,
            iterations: 1000,
            seed: 0,
        }
    }
}

/// What `cmd_analyze` produced, for callers that want the numbers.
#[derive(Debug, Clone)]
pub struct AnalysisBundle {
    pub maps: Vec<InfluenceMap>,
    pub stable: bool,
    pub max_dissimilarity: f64,
    pub tsne: Option<Embedding2D>,
    pub mds: Option<Embedding2D>,
    pub files: Vec<PathBuf>,
}

/// Every `map_*.csv` in `dir`, ordered by class. Two maps of one class
/// are an error.
pub fn load_maps(dir: &Path) -> Result<Vec<InfluenceMap>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| LabError::Usage(format!("cannot read maps directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("map_") && name.ends_with(".csv")
        })
        .collect();
    paths.sort();
    let mut by_class: BTreeMap<(u32, u32), (PathBuf, InfluenceMap)> = BTreeMap::new();
    for p in paths {
        let (map, _) = load_map(&p)?;
        let key = (map.class.m, map.class.n);
        if let Some((prev, _)) = by_class.get(&key) {
            return Err(LabError::Usage(format!(
                "two maps for class {},{}: {} and {}",
                key.0,
                key.1,
                prev.display(),
                p.display()
            )));
        }
        by_class.insert(key, (p, map));
    }
    Ok(by_class.into_values().map(|(_, m)| m).collect())
}

fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v}")
    }
}

fn matrix_csv(labels: &[String], m: &[Vec<f64>]) -> String {
    let mut s = String::from("task");
    for l in labels {
        write!(s, ",{l}").unwrap();
    }
    s.push('\n');
    for (l, row) in labels.iter().zip(m) {
        s.push_str(l);
        for v in row {
            write!(s, ",{}", fmt_f64(*v)).unwrap();
        }
        s.push('\n');
    }
    s
}

fn embedding_csv(maps: &[InfluenceMap], e: &Embedding2D) -> String {
    let mut s = String::from("m,n,partition,x,y\n");
    for (map, c) in maps.iter().zip(&e.coords) {
        writeln!(
            s,
            "{},{},{},{},{}",
            map.class.m,
            map.class.n,
            map.class.partition().label(),
            fmt_f64(c[0]),
            fmt_f64(c[1])
        )
        .unwrap();
    }
    s
}

fn partition_group(p: Partition) -> usize {
    Partition::ALL.iter().position(|q| *q == p).expect("partition listed")
}

#[derive(Serialize)]
struct EmbeddingsFile<'a> {
    tasks: Vec<TaskClass>,
    tsne: Option<&'a Embedding2D>,
    mds: Option<&'a Embedding2D>,
}

pub fn cmd_analyze(opts: &AnalyzeOptions, log: Log<'_>) -> Result<AnalysisBundle> {
    let start = Instant::now();
    let maps = load_maps(&opts.maps)?;
    if maps.len() < 2 {
        return Err(LabError::Usage(format!(
            "analysis needs at least 2 maps, found {} in {}",
            maps.len(),
            opts.maps.display()
        )));
    }
    let out = &opts.out;
    std::fs::create_dir_all(out)?;
    let mut files: Vec<PathBuf> = Vec::new();
    let write = |name: &str, body: &[u8], files: &mut Vec<PathBuf>| -> Result<()> {
        let p = out.join(name);
        atomic_write(&p, body)?;
        files.push(p);
        Ok(())
    };
    let labels: Vec<String> = maps.iter().map(|m| class_label(&m.class)).collect();
    let tasks: Vec<TaskClass> = maps.iter().map(|m| m.class).collect();

    let mats = pairwise_matrix(&maps)?;
    write(
        "similarity.csv",
        matrix_csv(&labels, &mats.similarity).as_bytes(),
        &mut files,
    )?;
    write(
        "dissimilarity.csv",
        matrix_csv(&labels, &mats.dissimilarity).as_bytes(),
        &mut files,
    )?;
    for (name, m, scale) in [
        ("similarity", &mats.similarity, ColorScale::Diverging),
        ("dissimilarity", &mats.dissimilarity, ColorScale::Sequential),
    ] {
        let spec = HeatmapSpec {
            title: &format!("pairwise {name} of influence maps"),
            row_labels: &labels,
            col_labels: &labels,
            scale,
        };
        let p = out.join(format!("{name}.svg"));
        emit_heatmap_svg(m, &spec, &p)?;
        files.push(p);
    }

    let mut report = check_stability(&tasks, &mats.dissimilarity, opts.epsilon)?;
    report.similarity = Some(mats.similarity.clone());
    log(&format!(
        "{} at epsilon {}: max dissimilarity {:.4}, {} transitions",
        if report.stable { "stable" } else { "unstable" },
        opts.epsilon,
        report.max_dissimilarity,
        report.transitions.len()
    ));
    let mut body = serde_json::to_vec_pretty(&report)?;
    body.push(b'\n');
    write("stability.json", &body, &mut files)?;

    let heatmaps = partition_heatmaps(&maps, opts.heatmap_q)?;
    for (partition, hm) in &heatmaps {
        let mut csv = String::from("layer,head,frequency,n_maps\n");
        for l in 0..hm.n_layers {
            for h in 0..hm.n_heads {
                writeln!(
                    csv,
                    "{l},{h},{},{}",
                    fmt_f64(hm.frequency[l * hm.n_heads + h]),
                    hm.n_maps
                )
                .unwrap();
            }
        }
        let stem = format!("heatmap_{}", partition.label());
        write(&format!("{stem}.csv"), csv.as_bytes(), &mut files)?;
        let rows: Vec<String> = (0..hm.n_layers).map(|l| format!("L{l}")).collect();
        let cols: Vec<String> = (0..hm.n_heads).map(|h| format!("H{h}")).collect();
        let spec = HeatmapSpec {
            title: &format!(
                "{} ({} maps): top-{} head frequency",
                partition.label(),
                hm.n_maps,
                opts.heatmap_q
            ),
            row_labels: &rows,
            col_labels: &cols,
            scale: ColorScale::Sequential,
        };
        let p = out.join(format!("{stem}.svg"));
        emit_heatmap_svg(&hm.rows(), &spec, &p)?;
        files.push(p);
    }

    let mut circuits = Vec::with_capacity(maps.len());
    for map in &maps {
        let c = top_quantile_circuit(map, opts.q)?;
        let p = out.join(format!("circuit_{}.dot", class_label(&map.class)));
        emit_circuit_dot(&c, &p)?;
        files.push(p);
        circuits.push(c);
    }
    let mut body = serde_json::to_vec_pretty(&circuits)?;
    body.push(b'\n');
    write("circuits.json", &body, &mut files)?;

    let features = map_features(&maps);
    let groups: Vec<usize> = maps.iter().map(|m| partition_group(m.class.partition())).collect();
    let legend: Vec<String> = Partition::ALL.iter().map(|p| p.label().to_string()).collect();
    let tsne = if maps.len() >= 4 {
        let cfg = TsneConfig {
            perplexity: opts.perplexity,
            iterations: opts.iterations,
            seed: opts.seed,
            ..TsneConfig::default()
        };
        Some(tsne_embed(&features, &cfg)?)
    } else {
        log("t-SNE skipped: needs at least 4 maps");
        None
    };
    let mds = if maps.len() >= 3 {
        Some(mds_embed(&features)?)
    } else {
        log("MDS skipped: needs at least 3 maps");
        None
    };
    for e in [&tsne, &mds].into_iter().flatten() {
        write(
            &format!("{}.csv", e.method),
            embedding_csv(&maps, e).as_bytes(),
            &mut files,
        )?;
        let svg = scatter_svg(
            &format!("{} of influence maps", e.method),
            &e.coords,
            &labels,
            &groups,
            &legend,
        )?;
        write(&format!("{}.svg", e.method), svg.as_bytes(), &mut files)?;
    }
    let emb = EmbeddingsFile {
        tasks: tasks.clone(),
        tsne: tsne.as_ref(),
        mds: mds.as_ref(),
    };
    let mut body = serde_json::to_vec_pretty(&emb)?;
    body.push(b'\n');
    write("embeddings.json", &body, &mut files)?;

    let mut manifest = RunManifest::new("analyze", to_value(opts)?);
    manifest.seeds.insert("seed".into(), opts.seed);
    manifest.inputs.push(opts.maps.display().to_string());
    for f in &files {
        manifest.add_output(out, f);
    }
    manifest.timings.insert("total".into(), seconds(start));
    manifest.write(out)?;
    Ok(AnalysisBundle {
        maps,
        stable: report.stable,
        max_dissimilarity: report.max_dissimilarity,
        tsne,
        mds,
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub out: PathBuf,
    /// Skip training and analyze this checkpoint instead.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub max_digits: u32,
    pub eval_samples: usize,
    pub pairs: usize,
    pub jobs: usize,
    pub epsilon: f64,
    pub q: f64,
    pub heatmap_q: f64,
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl ReportOptions {
    pub fn new(out: PathBuf) -> Self {
        Self {
            out,
            checkpoint: None,
            train: TrainConfig::default(),
            max_digits: DEFAULT_MAX_DIGITS,
            eval_samples: 1000,
            pairs: 1000,
            jobs: 1,
            epsilon: DEFAULT_EPSILON,
            q: CIRCUIT_QUANTILE,
            heatmap_q: HEATMAP_QUANTILE,
            perplexity: 3.0,
            iterations: 1000,
            seed: 0,
        }
    }
}

/// Train (unless a checkpoint is given), evaluate, patch every class and
/// analyze, each stage in its own subdirectory of `out`.
pub fn cmd_report(opts: &ReportOptions, log: Log<'_>) -> Result<AnalysisBundle> {
    let start = Instant::now();
    let mut timings = BTreeMap::new();
    let checkpoint = match &opts.checkpoint {
        Some(p) => p.clone(),
        None => {
            let t = Instant::now();
            let train_opts = TrainOptions {
                config: opts.train.clone(),
                out: opts.out.join("train"),
            };
            let outcome = cmd_train(&train_opts, log)?;
            timings.insert("train".to_string(), seconds(t));
            outcome
                .best_checkpoint
                .or(outcome.final_checkpoint)
                .expect("training with an output directory writes a checkpoint")
        }
    };
    let t = Instant::now();
    cmd_eval(
        &EvalOptions {
            checkpoint: checkpoint.clone(),
            out: opts.out.join("eval"),
            max_digits: opts.max_digits,
            samples: opts.eval_samples,
            seed: opts.seed,
            shots: DEFAULT_SHOTS,
        },
        log,
    )?;
    timings.insert("eval".to_string(), seconds(t));
    let t = Instant::now();
    let maps_dir = opts.out.join("maps");
    cmd_patch(
        &PatchOptions {
            checkpoint: checkpoint.clone(),
            out: maps_dir.clone(),
            m: None,
            n: None,
            all_classes: true,
            max_digits: opts.max_digits,
            shots: DEFAULT_SHOTS,
            pairs: opts.pairs,
            seed: opts.seed,
            jobs: opts.jobs,
            resume: true,
            dump_pairs: false,
        },
        log,
    )?;
    timings.insert("patch".to_string(), seconds(t));
    let t = Instant::now();
    let analysis_dir = opts.out.join("analysis");
    let bundle = cmd_analyze(
        &AnalyzeOptions {
            maps: maps_dir,
            out: analysis_dir,
            epsilon: opts.epsilon,
            q: opts.q,
            heatmap_q: opts.heatmap_q,
            perplexity: opts.perplexity,
            iterations: opts.iterations,
            seed: opts.seed,
        },
        log,
    )?;
    timings.insert("analyze".to_string(), seconds(t));
    let mut manifest = RunManifest::new("report", to_value(opts)?);
    manifest.seeds.insert("seed".into(), opts.seed);
    manifest.seeds.insert("train_seed".into(), opts.train.seed);
    manifest.inputs.push(checkpoint.display().to_string());
    for sub in ["train", "eval", "maps", "analysis"] {
        let p = opts.out.join(sub).join(super::manifest::MANIFEST_NAME);
        if p.exists() {
            manifest.add_output(&opts.out, &p);
        }
    }
    timings.insert("total".to_string(), seconds(start));
    manifest.timings = timings;
    manifest.write(&opts.out)?;
    Ok(bundle)
}
