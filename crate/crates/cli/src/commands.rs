//! Execution of validated run configurations. Every artifact goes to the
//! run's output directory; only the count summary of `gen` and short
//! summaries of the other commands go to stdout.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use noisylab::correction::corrected_labels;
use noisylab::dataio::{
    merge_pools, parse_manifest, read_cifar10, read_cifar100, read_ncifar, read_ric, ric_to_pools, write_ncifar,
    ImagePools,
};
use noisylab::embeddings::{parse_category_list, parse_embeddings, similarity_matrix, CategorySpec, MatrixKind};
use noisylab::filtering::{entropy_profile, filter_log_csv, fit_and_filter, GmmModel};
use noisylab::metrics::{self, cumulative_difference, CumulativeDifference, EvalReport, ScoredPredictions};
use noisylab::noisegen::{generate, NoiseCounts};
use noisylab::trainer::{
    ablation_table, blobs_fixture, ensemble_predictions, evaluate_net, run_stage2_with, AblationRow, Dataset, EpochLog,
    NoisyFixture, Protocol,
};

use crate::config::{
    AblateConfig, ContainerFormat, ConvertCheckConfig, DataSource, EvalConfig, GenConfig, GmmInput, GmmInspectConfig,
    PoolFormat, PoolSource, TrainConfig,
};

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(dir, name, s)
}

pub fn read_categories(path: &Path) -> Result<Vec<CategorySpec>> {
    parse_category_list(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_pools(sources: &[PoolSource], classes: usize) -> Result<ImagePools> {
    let mut parts = Vec::with_capacity(sources.len());
    for s in sources {
        let bytes = read(&s.path)?;
        let pools = match s.format {
            PoolFormat::Cifar10 => read_cifar10(&bytes),
            PoolFormat::Cifar100 => read_cifar100(&bytes),
            PoolFormat::Ric => read_ric(&bytes).map(ric_to_pools),
        }
        .with_context(|| format!("reading pool {}", s.path.display()))?;
        parts.push(pools);
    }
    let mut pools = merge_pools(parts);
    if pools.classes.len() < classes {
        bail!(
            "pools hold {} classes but {classes} categories are listed",
            pools.classes.len()
        );
    }
    let extra: usize = pools.classes[classes..].iter().map(Vec::len).sum();
    if extra > 0 {
        log::info!("ignoring {extra} pool images beyond the first {classes} classes");
    }
    pools.classes.truncate(classes);
    Ok(pools)
}

#[derive(Serialize)]
struct GenSummary {
    name: String,
    counts: NoiseCounts,
    open_per_class: Vec<usize>,
    tau_closed: f64,
}

pub fn gen(c: &GenConfig) -> Result<()> {
    let table =
        parse_embeddings(open(&c.embeddings)?).with_context(|| format!("parsing {}", c.embeddings.display()))?;
    let base = read_categories(&c.base_categories)?;
    let open_cats = match &c.open_categories {
        Some(p) => read_categories(p)?,
        None => Vec::new(),
    };
    if base.len() != c.spec.n || open_cats.len() != c.spec.m {
        bail!(
            "category lists hold {} base and {} open categories, configuration says n = {}, m = {}",
            base.len(),
            open_cats.len(),
            c.spec.n,
            c.spec.m
        );
    }
    let closed = similarity_matrix(&base, &base, &table, MatrixKind::Closed)?;
    let open_sim = if c.spec.x > 0.0 {
        Some(similarity_matrix(&open_cats, &base, &table, MatrixKind::Open)?)
    } else {
        None
    };
    let base_pools = load_pools(&c.base_pools, c.spec.n)?;
    let open_pools = if c.open_pools.is_empty() {
        None
    } else {
        Some(load_pools(&c.open_pools, c.spec.m)?)
    };
    let open_capacity = open_pools.as_ref().map_or_else(Vec::new, ImagePools::capacities);
    let dataset = generate(
        &c.spec,
        &closed,
        open_sim.as_ref(),
        &base_pools.capacities(),
        &open_capacity,
    )?;
    dataset.check_invariants()?;
    let (container, manifest) = write_ncifar(&dataset, &base_pools, open_pools.as_ref())?;
    let counts = dataset.counts();
    let summary = GenSummary {
        name: c.spec.dataset_name("nCIFAR"),
        counts,
        open_per_class: dataset.open_counts_per_class(),
        tau_closed: dataset.tau_closed,
    };
    write(&c.out_dir, "train.ncif", container)?;
    let mut lines = manifest.join("\n");
    lines.push('\n');
    write(&c.out_dir, "manifest.jsonl", lines)?;
    write_json(&c.out_dir, "summary.json", &summary)?;
    log::info!("{}: tau_closed = {}", summary.name, dataset.tau_closed);
    println!("clean={} open={} closed={}", counts.clean, counts.open, counts.closed);
    Ok(())
}

#[derive(Serialize)]
struct ContainerSummary {
    format: ContainerFormat,
    classes: usize,
    images: usize,
    per_class: Vec<usize>,
}

pub fn convert_check(c: &ConvertCheckConfig) -> Result<()> {
    let bytes = read(&c.input)?;
    let per_class = match c.format {
        ContainerFormat::Ric => read_ric(&bytes)?.iter().map(|k| k.images.len()).collect::<Vec<_>>(),
        ContainerFormat::Ncif => {
            let container = read_ncifar(&bytes)?;
            let mut counts = vec![0; container.n_classes as usize];
            for r in &container.records {
                counts[r.noisy_label as usize] += 1;
            }
            counts
        }
    };
    let summary = ContainerSummary {
        format: c.format,
        classes: per_class.len(),
        images: per_class.iter().sum(),
        per_class,
    };
    write_json(&c.out_dir, "summary.json", &summary)?;
    println!("ok: {} classes, {} images", summary.classes, summary.images);
    Ok(())
}

/// Training set, test set, and provenance tags when a manifest exists.
fn load_source(data: &DataSource) -> Result<NoisyFixture> {
    match data {
        DataSource::Fixture(cfg) => Ok(blobs_fixture(cfg)?),
        DataSource::Container { train, manifest, test } => {
            let train_set = Dataset::from_ncifar(&read_ncifar(&read(train)?)?)?;
            let test_set = Dataset::from_ncifar(&read_ncifar(&read(test)?)?)?;
            let tags = match manifest {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    let records = parse_manifest(&text)?;
                    if records.iter().zip(train_set.labels()).any(|(r, &l)| r.noisy_label != l) {
                        bail!("manifest {} disagrees with the container labels", p.display());
                    }
                    records.into_iter().map(|r| r.provenance_tag).collect()
                }
                // Training never looks at tags.
                None => vec![noisylab::noisegen::NoiseTag::Clean; train_set.len()],
            };
            Ok(NoisyFixture::new(train_set, test_set, tags)?)
        }
    }
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    branch: usize,
    loss: f64,
    kept_count: usize,
    train_acc: f64,
    test_acc: Option<f64>,
    test_map: Option<f64>,
}

impl From<&EpochLog> for LogLine {
    fn from(l: &EpochLog) -> Self {
        LogLine {
            epoch: l.epoch,
            branch: l.branch,
            loss: l.loss,
            kept_count: l.kept_count,
            train_acc: l.train_acc,
            test_acc: l.test_acc,
            test_map: l.test_map,
        }
    }
}

#[derive(Serialize)]
struct TrainReport {
    stage1_test_acc: [f64; 2],
    branches: [EvalReport; 2],
    ensemble: EvalReport,
}

pub fn train(c: &TrainConfig) -> Result<()> {
    let fixture = load_source(&c.data)?;
    let (data, test) = (&fixture.train, &fixture.test);
    log::info!("{} training and {} test examples", data.len(), test.len());
    let nets = c.protocol.stage1(data, c.seed)?;
    let stage1_test_acc = [
        evaluate_net(&nets[0], test)?.accuracy,
        evaluate_net(&nets[1], test)?.accuracy,
    ];
    log::info!(
        "stage 1 test accuracy {:.4} / {:.4}",
        stage1_test_acc[0],
        stage1_test_acc[1]
    );

    let cfg = c.protocol.stage2(c.p_e);
    let mut pair = Protocol::stage2_pair(nets, data, &cfg, c.seed)?;
    let log_path = c.out_dir.join("train_log.jsonl");
    let mut log_out =
        BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let logs = run_stage2_with(&mut pair, data, Some(test), &cfg, |l| {
        serde_json::to_writer(&mut log_out, &LogLine::from(l))?;
        log_out.write_all(b"\n")?;
        log_out.flush()?;
        log::info!(
            "epoch {} branch {}: loss {:.4}, kept {}, test acc {:.4}",
            l.epoch,
            l.branch,
            l.loss,
            l.kept_count,
            l.test_acc.unwrap_or(f64::NAN)
        );
        Ok(())
    })?;
    let rows: Vec<_> = logs.iter().map(|l| l.filter.clone()).collect();
    write(&c.out_dir, "filter_log.csv", filter_log_csv(&rows))?;

    for (b, branch) in pair.branches.iter().enumerate() {
        write(&c.out_dir, &format!("branch{b}.ckpt"), branch.net.to_checkpoint())?;
        write(
            &c.out_dir,
            &format!("soft_labels{b}.bin"),
            branch.labels.to_checkpoint(cfg.schedule.epochs as u64),
        )?;
        write(
            &c.out_dir,
            &format!("corrected_labels{b}.csv"),
            branch.labels.corrected_csv(),
        )?;
    }
    let [a, b] = &pair.branches;
    let ensemble = ensemble_predictions([&a.net, &b.net], test)?;
    let report = TrainReport {
        stage1_test_acc,
        branches: [evaluate_net(&a.net, test)?, evaluate_net(&b.net, test)?],
        ensemble: metrics::map(&ensemble)?,
    };
    write_json(&c.out_dir, "test_scores.json", &ensemble.scores())?;
    write_json(&c.out_dir, "test_labels.json", &ensemble.labels())?;
    write_json(&c.out_dir, "report.json", &report)?;
    let changed = [a, b].map(|br| {
        corrected_labels(&br.labels)
            .iter()
            .zip(br.labels.original_labels())
            .filter(|(x, y)| x != y)
            .count()
    });
    println!(
        "test accuracy {:.4} map {:.4}; labels changed {} / {}",
        report.ensemble.accuracy, report.ensemble.map, changed[0], changed[1]
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    models: Vec<EvalReport>,
    cumulative: Option<CumulativeDifference>,
}

pub fn eval(c: &EvalConfig) -> Result<()> {
    let labels: Vec<usize> =
        serde_json::from_reader(open(&c.labels)?).with_context(|| format!("parsing {}", c.labels.display()))?;
    let mut models = Vec::with_capacity(c.preds.len());
    for p in &c.preds {
        let scores: Vec<Vec<f64>> =
            serde_json::from_reader(open(p)?).with_context(|| format!("parsing {}", p.display()))?;
        let classes = scores.first().map_or(0, Vec::len);
        models.push(
            ScoredPredictions::new(classes, scores, labels.clone())
                .with_context(|| format!("scoring {}", p.display()))?,
        );
    }
    let reports = models.iter().map(metrics::map).collect::<noisylab::Result<Vec<_>>>()?;
    let cumulative = match models.as_slice() {
        [a, b] => {
            let cd = cumulative_difference(a, b, &a.class_sizes())?;
            write(&c.out_dir, "cumulative.csv", cd.to_csv())?;
            Some(cd)
        }
        _ => None,
    };
    for (p, r) in c.preds.iter().zip(&reports) {
        println!("{}: accuracy {:.4} map {:.4}", p.display(), r.accuracy, r.map);
    }
    write_json(
        &c.out_dir,
        "report.json",
        &EvalOutput {
            models: reports,
            cumulative,
        },
    )
}

pub fn ablate(c: &AblateConfig) -> Result<()> {
    let fixture = load_source(&c.data)?;
    let rows = ablation_table(&fixture, &c.protocol, &c.seeds)?;
    write_json(&c.out_dir, "ablation.json", &rows)?;
    write(&c.out_dir, "ablation.csv", ablation_csv(&rows))?;
    for r in &rows {
        println!("{}", ablation_line(r));
    }
    Ok(())
}

fn ablation_label(r: &AblationRow) -> (String, String) {
    let k = r.keep;
    let kept = [(k.clean, "clean"), (k.open, "open"), (k.closed, "closed")]
        .iter()
        .filter(|x| x.0)
        .map(|x| x.1)
        .collect::<Vec<_>>()
        .join("+");
    let method = match r.method {
        noisylab::trainer::Method::PlainCe => "ce".to_string(),
        noisylab::trainer::Method::FilterCorrect { p_e } => format!("filter-correct p_e={p_e}"),
    };
    (kept, method)
}

fn ablation_line(r: &AblationRow) -> String {
    let (kept, method) = ablation_label(r);
    format!("{kept:<18} {method:<24} {:.2} +- {:.2}", 100.0 * r.mean, 100.0 * r.std)
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("keep,method,mean,std,accuracies\n");
    for r in rows {
        let (kept, method) = ablation_label(r);
        let accs = r.accuracies.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        out.push_str(&format!("{kept},{method},{},{},{accs}\n", r.mean, r.std));
    }
    out
}

#[derive(Serialize)]
struct GmmOutput {
    count: usize,
    kept: usize,
    dropped: usize,
    threshold: f64,
    /// Absent when the values admit no two-component split.
    model: Option<GmmModel>,
}

fn read_values(path: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(
            t.parse()
                .with_context(|| format!("{}:{}: not a number: {t}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

pub fn gmm_inspect(c: &GmmInspectConfig) -> Result<()> {
    let values = match c.kind {
        GmmInput::Values => read_values(&c.input)?,
        GmmInput::Predictions => {
            let rows: Vec<Vec<f64>> =
                serde_json::from_reader(open(&c.input)?).with_context(|| format!("parsing {}", c.input.display()))?;
            entropy_profile(&rows)?
        }
    };
    if values.is_empty() {
        bail!("{} holds no values", c.input.display());
    }
    let (decision, model) = fit_and_filter(&values, c.p_e)?;
    let mut csv = String::from("index,value,posterior,keep\n");
    for (j, v) in values.iter().enumerate() {
        csv.push_str(&format!(
            "{j},{v},{},{}\n",
            decision.posterior[j], decision.keep[j] as u8
        ));
    }
    write(&c.out_dir, "decisions.csv", csv)?;
    let kept = decision.kept_count();
    let out = GmmOutput {
        count: values.len(),
        kept,
        dropped: values.len() - kept,
        threshold: c.p_e,
        model,
    };
    println!("kept {} of {}", out.kept, out.count);
    write_json(&c.out_dir, "gmm.json", &out)
}
