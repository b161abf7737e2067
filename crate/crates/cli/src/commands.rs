use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use textseg::checkpoint::{transfer_init, Checkpoint};
use textseg::crf::{apply_crf, RelabelPolicy};
use textseg::datasynth::{build_dataset, load_split, read_gray, read_manifest, SourcePool, Split, MANIFEST_FILE};
use textseg::gradcheck::{run_suite, GradcheckOptions};
use textseg::labelcodec::{Class, LabelMap};
use textseg::metrics::{comparison_table, IouAccumulator, IouReport};
use textseg::models::Model;
use textseg::trainer::train;
use textseg::{Error, Result};

use crate::artifacts::*;
use crate::config::RunConfig;
use crate::{Cli, Command, EvalArgs, Failure, GradcheckArgs, InferArgs, PostPolicy, PostprocessArgs};
use crate::{SynthArgs, TrainArgs};

pub(crate) fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Synth(a) => synth(cfg, a)?,
        Command::Train(a) => train_cmd(cfg, a)?,
        Command::Infer(a) => infer(a)?,
        Command::Postprocess(a) => postprocess(&cfg, a)?,
        Command::Eval(a) => eval(a)?,
        Command::Gradcheck(a) => return gradcheck(&cfg, a),
    }
    Ok(())
}

fn split_of(name: &str) -> Split {
    match name {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    s.config.seed = cfg.seed;
    if a.printed_dir.is_some() {
        s.printed_dir = a.printed_dir;
    }
    if a.handwritten_dir.is_some() {
        s.handwritten_dir = a.handwritten_dir;
    }
    let c = &s.config;
    let pool = match (&s.printed_dir, &s.handwritten_dir) {
        (None, None) => SourcePool::procedural(c.printed_sources, c.handwritten_sources, c.size, c.seed),
        (Some(p), Some(h)) => SourcePool::load(p, h, c.size)?,
        _ => return Err(Error::Usage("give both printed_dir and handwritten_dir, or neither".into())),
    };
    let (_, summary) = build_dataset(&pool, c, &a.out)?;
    let manifest = read_file(&a.out.join(MANIFEST_FILE))?;
    println!("samples: train {} / val {} / test {}", summary.train, summary.val, summary.test);
    let total: u64 = summary.class_pixels.iter().sum();
    for cl in Class::ALL {
        let n = summary.class_pixels[cl.index()];
        println!("  {:<3}{n:>12} px  {:>6.2}%", cl.name(), 100.0 * n as f64 / total.max(1) as f64);
    }
    println!("manifest sha256 {}", sha256_hex(&manifest));
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let m = &mut cfg.model;
    m.kind = a.model.unwrap_or(m.kind);
    m.scale = a.scale.unwrap_or(m.scale);
    if let Some(c) = a.classes {
        m.classes = c.parse().expect("validated by clap");
    }
    let t = &mut cfg.train;
    t.loss = a.loss.unwrap_or(t.loss);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch = a.batch.unwrap_or(t.batch);
    t.lr = a.lr.unwrap_or(t.lr);
    t.overlap = a.overlap.unwrap_or(t.overlap);
    if a.weights.is_some() {
        t.weights = a.weights;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    let arch = cfg.model.architecture()?;
    let tcfg = cfg.train.train_config(cfg.model.classes, cfg.seed)?;

    let train_set: Vec<_> = load_split(&a.data, Split::Train)?.into_iter().map(|(_, s)| s).collect();
    let val_set: Vec<_> = load_split(&a.data, Split::Val)?.into_iter().map(|(_, s)| s).collect();
    let mut model = Model::<f32>::new(&arch, cfg.seed)?;
    if let Some(path) = &a.init_ssp {
        if !matches!(arch, textseg::models::Architecture::Mfm { .. }) {
            return Err(Error::Usage("--init-ssp needs --model mfm".into()));
        }
        transfer_init(&mut model, &Checkpoint::load(path)?)?;
    }
    create_dir(&a.out)?;
    write_model(&a.out, &arch)?;
    let log_path = a.out.join(TRAIN_LOG);
    let file = File::create(&log_path).map_err(|e| Error::io(format!("creating {}", log_path.display()), e))?;
    let mut log = BufWriter::new(file);
    let mut write_err = None;
    eprintln!("{} parameters, {} train / {} val samples", model.parameter_count(), train_set.len(), val_set.len());
    let outcome = train(&mut model, &train_set, &val_set, &tcfg, |e| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  mIoU {}  lr {:.1e}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.val_mean_iou.map_or("undef".into(), |v| format!("{:.4}", v)),
            e.lr
        );
        let line = serde_json::to_string(e).expect("log entries serialize");
        if let Err(err) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(Error::io(format!("writing {}", log_path.display()), err));
    }
    outcome.best.save(&a.out.join(BEST_CHECKPOINT))?;
    outcome.last.save(&a.out.join(LAST_CHECKPOINT))?;
    println!(
        "best val loss {:.5} at epoch {}",
        outcome.best.scalar("train.best_val_loss").unwrap_or(f32::NAN),
        outcome.best.scalar("train.epoch").unwrap_or(0.0)
    );
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.run)?;
    create_dir(&a.out)?;
    let records = read_manifest(&a.data.join(MANIFEST_FILE))?;
    let mut n = 0;
    for r in records.iter().filter(|r| r.split == split_of(&a.split)) {
        let image = read_gray(&a.data.join(&r.image_path))?;
        let probs = model.predict(&textseg::datasynth::image_to_input::<f32>(&image))?;
        write_file(&a.out.join(prob_file(&r.id)), &prob_to_bytes(&probs)?)?;
        write_labels(&a.out.join(pred_file(&r.id)), &LabelMap::from_probs(&probs)?)?;
        n += 1;
    }
    println!("{n} {} predictions written to {}", a.split, a.out.display());
    Ok(())
}

fn postprocess(cfg: &RunConfig, a: PostprocessArgs) -> Result<()> {
    cfg.crf.validate()?;
    create_dir(&a.out)?;
    let records = read_manifest(&a.data.join(MANIFEST_FILE))?;
    let mut changed = 0usize;
    let mut n = 0;
    for r in records.iter().filter(|r| r.split == split_of(&a.split)) {
        let probs = read_probs(&a.pred.join(prob_file(&r.id)))?;
        let pre = LabelMap::from_probs(&probs)?;
        let post = match a.policy {
            PostPolicy::None => pre.clone(),
            PostPolicy::Crf | PostPolicy::Crfh => {
                let image = read_gray(&a.data.join(&r.image_path))?;
                let (w, h) = (image.width(), image.height());
                if (w, h) != (pre.width(), pre.height()) {
                    return Err(Error::Shape(format!(
                        "{}: image {w}×{h} vs prediction {}×{}",
                        r.id,
                        pre.width(),
                        pre.height()
                    )));
                }
                let policy = if a.policy == PostPolicy::Crf { RelabelPolicy::Unrestricted } else { RelabelPolicy::Crfh };
                apply_crf(&probs, image.as_raw(), &cfg.crf, policy)?
            }
        };
        changed += pre.classes().iter().zip(post.classes()).filter(|(x, y)| x != y).count();
        write_labels(&a.out.join(pred_file(&r.id)), &post)?;
        n += 1;
    }
    println!("{n} maps post-processed ({:?}), {changed} pixels relabeled", a.policy);
    Ok(())
}

#[derive(Serialize)]
struct ReportLine<'a> {
    column: &'a str,
    class: &'a str,
    tp: Option<u64>,
    fp: Option<u64>,
    #[serde(rename = "fn")]
    fn_: Option<u64>,
    iou: Option<f64>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let gt = load_split(&a.data, split_of(&a.split))?;
    if gt.is_empty() {
        return Err(Error::Usage(format!("split '{}' of {} is empty", a.split, a.data.display())));
    }
    let mut columns: Vec<(&str, &Path)> = vec![("none", &a.pred)];
    if let Some(p) = &a.crf {
        columns.push(("crf", p));
    }
    if let Some(p) = &a.crfh {
        columns.push(("crfh", p));
    }
    let mut reports = Vec::new();
    for (name, dir) in &columns {
        let mut acc = IouAccumulator::new();
        for (r, s) in &gt {
            acc.add(&read_labels(&dir.join(pred_file(&r.id)))?, &s.labels)?;
        }
        reports.push((*name, acc.report()));
    }
    let titled: Vec<(&str, &IouReport)> = reports
        .iter()
        .map(|(n, r)| {
            let title = match *n {
                "none" => "None",
                "crf" => "With CRF",
                _ => "With CRFH",
            };
            (title, r)
        })
        .collect();
    let table = comparison_table(&titled);
    create_dir(&a.out)?;
    write_file(&a.out.join(IOU_TABLE), table.as_bytes())?;
    let mut jsonl = String::new();
    for (name, rep) in &reports {
        for rec in rep.records() {
            let line = ReportLine {
                column: name,
                class: &rec.name,
                tp: Some(rec.tp),
                fp: Some(rec.fp),
                fn_: Some(rec.fn_),
                iou: rec.iou,
            };
            jsonl.push_str(&serde_json::to_string(&line).expect("serializable"));
            jsonl.push('\n');
        }
        let mean = ReportLine { column: name, class: "mean", tp: None, fp: None, fn_: None, iou: rep.mean };
        jsonl.push_str(&serde_json::to_string(&mean).expect("serializable"));
        jsonl.push('\n');
    }
    write_file(&a.out.join(IOU_REPORT), jsonl.as_bytes())?;
    print!("{table}");
    for (name, rep) in &reports {
        let undefined = rep.undefined();
        if !undefined.is_empty() {
            let names: Vec<&str> = undefined.iter().map(|c| c.name()).collect();
            eprintln!("note: {name}: IoU undefined for {} (absent from prediction and ground truth)", names.join(", "));
        }
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, a: GradcheckArgs) -> std::result::Result<(), Failure> {
    let opts = GradcheckOptions { seed: cfg.seed, corrupt: a.corrupt };
    let report = run_suite(&opts)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        Err(Failure::Check(names.join(", ")))
    }
}
