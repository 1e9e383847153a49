//! Command-line entry point: corpus generation, pre-training, fine-tuning,
//! inference, evaluation, and page inspection, each writing its artifacts
//! under a run directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use vdoc::codec::{encode_document, GlobalSequence, TokenEntry, Vocabulary};
use vdoc::geometry::iou;
use vdoc::image::Image;
use vdoc::infer;
use vdoc::metrics;
use vdoc::model::{ModelConfig, ModelState};
use vdoc::objectives::VqaAnswer;
use vdoc::segmenter::{split, SegmentConfig};
use vdoc::synthdoc::{self, Page};
use vdoc::train::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "vdoc", about = "Visually guided text-layout generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Ocr,
    Cls,
    Label,
    Vqa,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic page corpus.
    GenData {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Every k-th page of each style is dense; 0 disables dense pages.
        #[arg(long, default_value_t = 3)]
        dense_period: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on the joint text + layout objective.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1e-2)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use only the first N corpus pages.
        #[arg(long)]
        pages: Option<usize>,
        #[arg(long, default_value_t = 64)]
        max_targets: usize,
        #[arg(long, default_value_t = 0.25)]
        prefix_ratio: f64,
        /// Ablation: drop the layout loss term.
        #[arg(long)]
        no_layout: bool,
        /// Ablation: truncate pages to one segment instead of segmenting.
        #[arg(long)]
        truncate: bool,
        /// Stop early when total loss falls below this value.
        #[arg(long)]
        stop_below: Option<f64>,
        /// Continue from an existing run directory's checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained model for one downstream task.
    Finetune {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        data: PathBuf,
        /// Run directory holding config.txt + checkpoint.bin.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1e-2)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        pages: Option<usize>,
        #[arg(long)]
        stop_below: Option<f64>,
    },
    /// Run OCR generation on one page image.
    Ocr {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_segments: usize,
    },
    /// Evaluate a model on a corpus and write a metric report.
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pages: Option<usize>,
    },
    /// Dump the codec and segmenter views of one corpus page.
    Inspect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        page: usize,
        #[arg(long, default_value_t = 64)]
        max_targets: usize,
        #[arg(long, default_value_t = 0.25)]
        prefix_ratio: f64,
    },
}

type AnyError = Box<dyn std::error::Error>;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

/// Run settings serialized alongside the model config for reproducibility.
struct RunInfo<'a> {
    task: &'a str,
    data: &'a Path,
    corpus_digest: &'a str,
    tc: &'a TrainConfig,
    seg_cfg: &'a SegmentConfig,
}

fn write_run_config(out: &Path, cfg: &ModelConfig, info: &RunInfo<'_>) -> Result<(), AnyError> {
    let mut text = cfg.to_text();
    let _ = writeln!(text, "task {}", info.task);
    let _ = writeln!(text, "data {}", info.data.display());
    let _ = writeln!(text, "corpus_digest {}", info.corpus_digest);
    let _ = writeln!(text, "steps {}", info.tc.steps);
    let _ = writeln!(text, "batch {}", info.tc.batch_size);
    let _ = writeln!(text, "lr {}", info.tc.lr);
    let _ = writeln!(text, "weight_decay {}", info.tc.weight_decay);
    let _ = writeln!(text, "seed {}", info.tc.seed);
    let _ = writeln!(text, "include_layout {}", info.tc.include_layout);
    let _ = writeln!(text, "truncate {}", info.tc.truncate);
    let _ = writeln!(text, "prefix_ratio {}", info.seg_cfg.prefix_ratio);
    std::fs::write(out.join("config.txt"), text)?;
    Ok(())
}

/// Loads config.txt + checkpoint.bin from a run directory.
fn load_model(dir: &Path) -> Result<(ModelState, Vocabulary, SegmentConfig), AnyError> {
    let text = std::fs::read_to_string(dir.join("config.txt"))?;
    let cfg = ModelConfig::from_text(&text)?;
    let extras: HashMap<&str, &str> = text
        .lines()
        .filter_map(|l| l.split_once(' '))
        .collect();
    let prefix_ratio: f64 = extras
        .get("prefix_ratio")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.25);
    let vocab = Vocabulary::new(synthdoc::N_CLASSES);
    if vocab.size() != cfg.vocab_size {
        return Err(format!(
            "config vocab_size {} does not match vocabulary ({})",
            cfg.vocab_size,
            vocab.size()
        )
        .into());
    }
    let seg_cfg = SegmentConfig::new(cfg.max_targets, prefix_ratio)?;
    let state = ModelState::init(cfg, 0)?;
    vdoc::checkpoint::load_into(&dir.join("checkpoint.bin"), &state.params())?;
    Ok((state, vocab, seg_cfg))
}

fn load_pages(data: &Path, limit: Option<usize>) -> Result<Vec<Page>, AnyError> {
    let mut pages = synthdoc::load_corpus(data)?;
    if let Some(n) = limit {
        pages.truncate(n);
    }
    if pages.is_empty() {
        return Err("corpus has no pages".into());
    }
    Ok(pages)
}

fn check_page_dims(cfg: &ModelConfig, pages: &[Page]) -> Result<(), AnyError> {
    for p in pages {
        if p.image.width != cfg.image_w || p.image.height != cfg.image_h {
            return Err(format!(
                "page image {}x{} does not match model {}x{}",
                p.image.width, p.image.height, cfg.image_w, cfg.image_h
            )
            .into());
        }
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<(), AnyError> {
    match cmd {
        Cmd::GenData {
            n,
            seed,
            width,
            height,
            dense_period,
            out,
        } => {
            let pages = synthdoc::make_corpus(seed, n, width, height, dense_period)?;
            let digest = synthdoc::save_corpus(&out, &pages)?;
            println!("wrote {} pages to {}", pages.len(), out.display());
            println!("corpus_digest {digest}");
            Ok(())
        }

        Cmd::Pretrain {
            data,
            out,
            steps,
            batch,
            lr,
            weight_decay,
            seed,
            pages,
            max_targets,
            prefix_ratio,
            no_layout,
            truncate,
            stop_below,
            init_from,
        } => {
            let corpus = load_pages(&data, pages)?;
            let digest = synthdoc::corpus_digest(&corpus);
            let vocab = Vocabulary::new(synthdoc::N_CLASSES);
            let mut cfg = ModelConfig::desk(vocab.size(), synthdoc::N_TAGS);
            cfg.max_targets = max_targets;
            cfg.image_w = corpus[0].image.width;
            cfg.image_h = corpus[0].image.height;
            // the no-layout ablation removes layout modeling entirely:
            // no layout loss and no coordinate conditioning of [LOC] inputs
            cfg.layout_conditioning = !no_layout;
            check_page_dims(&cfg, &corpus)?;
            let seg_cfg = SegmentConfig::new(max_targets, prefix_ratio)?;
            let state = ModelState::init(cfg.clone(), seed)?;
            if let Some(src) = init_from {
                vdoc::checkpoint::load_into(&src.join("checkpoint.bin"), &state.params())?;
            }
            let tc = TrainConfig {
                steps,
                batch_size: batch,
                lr,
                weight_decay,
                seed,
                include_layout: !no_layout,
                truncate,
                log_every: 25,
                stop_below,
            };
            std::fs::create_dir_all(&out)?;
            write_run_config(
                &out,
                &cfg,
                &RunInfo {
                    task: "pretrain",
                    data: &data,
                    corpus_digest: &digest,
                    tc: &tc,
                    seg_cfg: &seg_cfg,
                },
            )?;
            let mut log = std::fs::File::create(out.join("train.log"))?;
            let history = train::pretrain(&state, &corpus, &seg_cfg, &vocab, &tc, &mut log)?;
            vdoc::checkpoint::save(&out.join("checkpoint.bin"), &state.params())?;
            let last = history.last().ok_or("no training steps ran")?;
            println!(
                "pretrained {} steps, final total {:.6} (text {:.6}, layout {:.6})",
                history.len(),
                last.total,
                last.global_text,
                last.local_layout
            );
            Ok(())
        }

        Cmd::Finetune {
            task,
            data,
            model,
            out,
            steps,
            batch,
            lr,
            weight_decay,
            seed,
            pages,
            stop_below,
        } => {
            let corpus = load_pages(&data, pages)?;
            let digest = synthdoc::corpus_digest(&corpus);
            let (state, vocab, seg_cfg) = load_model(&model)?;
            check_page_dims(&state.cfg, &corpus)?;
            let tc = TrainConfig {
                steps,
                batch_size: batch,
                lr,
                weight_decay,
                seed,
                include_layout: true,
                truncate: false,
                log_every: 25,
                stop_below,
            };
            std::fs::create_dir_all(&out)?;
            let task_name = match task {
                Task::Cls => "finetune-cls",
                Task::Label => "finetune-label",
                Task::Vqa => "finetune-vqa",
                Task::Ocr => return Err("ocr is not a fine-tuning task".into()),
            };
            write_run_config(
                &out,
                &state.cfg,
                &RunInfo {
                    task: task_name,
                    data: &data,
                    corpus_digest: &digest,
                    tc: &tc,
                    seg_cfg: &seg_cfg,
                },
            )?;
            let mut log = std::fs::File::create(out.join("train.log"))?;
            let history = match task {
                Task::Cls => train::finetune_cls(&state, &corpus, &vocab, &tc, &mut log)?,
                Task::Label => {
                    train::finetune_label(&state, &corpus, &seg_cfg, &vocab, &tc, &mut log)?
                }
                Task::Vqa => train::finetune_vqa(&state, &corpus, &vocab, &tc, &mut log)?,
                Task::Ocr => unreachable!(),
            };
            vdoc::checkpoint::save(&out.join("checkpoint.bin"), &state.params())?;
            println!(
                "{task_name}: {} steps, final loss {:.6}",
                history.len(),
                history.last().ok_or("no training steps ran")?
            );
            Ok(())
        }

        Cmd::Ocr {
            image,
            model,
            out,
            max_segments,
        } => {
            let (state, vocab, seg_cfg) = load_model(&model)?;
            let img = Image::read_pgm(&image)?;
            let gen = infer::GenerationConfig { max_segments };
            let result = infer::generate_ocr(&state, &img, &vocab, &seg_cfg, &gen)?;
            std::fs::create_dir_all(&out)?;
            let entries: Vec<TokenEntry> = result
                .words
                .iter()
                .flat_map(|w| {
                    let mut es: Vec<TokenEntry> = vocab
                        .tokenize_word(&w.word)
                        .unwrap_or_default()
                        .into_iter()
                        .map(|token| TokenEntry { token, bbox: None })
                        .collect();
                    es.push(TokenEntry {
                        token: vocab.loc(),
                        bbox: Some(w.bbox),
                    });
                    es
                })
                .collect();
            let seq = GlobalSequence::from_entries(&entries, vocab.loc())?;
            std::fs::write(out.join("ocr.txt"), seq.to_text(&vocab))?;
            infer::overlay(&img, &result.words).write_pgm(&out.join("overlay.pgm"))?;
            println!(
                "recognized {} words in {} segment(s)",
                result.words.len(),
                result.segments_used
            );
            for d in result.diagnostics.iter().take(10) {
                println!("diagnostic: {d}");
            }
            if result.diagnostics.len() > 10 {
                println!("... {} more diagnostics", result.diagnostics.len() - 10);
            }
            Ok(())
        }

        Cmd::Eval {
            task,
            data,
            model,
            out,
            pages,
        } => {
            let corpus = load_pages(&data, pages)?;
            let (state, vocab, seg_cfg) = load_model(&model)?;
            check_page_dims(&state.cfg, &corpus)?;
            std::fs::create_dir_all(&out)?;
            let report = match task {
                Task::Ocr => eval_ocr(&state, &corpus, &vocab, &seg_cfg)?,
                Task::Cls => eval_cls(&state, &corpus, &vocab)?,
                Task::Label => eval_label(&state, &corpus, &vocab, &seg_cfg)?,
                Task::Vqa => eval_vqa(&state, &corpus, &vocab)?,
            };
            std::fs::write(out.join("metrics.txt"), &report)?;
            print!("{report}");
            Ok(())
        }

        Cmd::Inspect {
            data,
            page,
            max_targets,
            prefix_ratio,
        } => {
            let corpus = load_pages(&data, None)?;
            let p = corpus
                .get(page)
                .ok_or_else(|| format!("page {page} out of range (corpus has {})", corpus.len()))?;
            let vocab = Vocabulary::new(synthdoc::N_CLASSES);
            let seq = encode_document(&p.words, &vocab)?;
            let seg_cfg = SegmentConfig::new(max_targets, prefix_ratio)?;
            let segments = split(&seq, &seg_cfg, vocab.eos())?;
            println!("page {page}: class {}", synthdoc::STYLE_NAMES[p.class]);
            println!(
                "words {} tokens {} compression_ratio {:.4}",
                p.words.len(),
                seq.tokens().len(),
                vdoc::codec::compression_ratio(&p.words, &vocab)?
            );
            println!("sequence:\n{}", seq.to_text(&vocab));
            println!("segments (M={max_targets}, alpha_p={prefix_ratio}): K={}", segments.len());
            for (i, s) in segments.iter().enumerate() {
                println!("segment {i}: {}", s.dump_text(&vocab));
            }
            Ok(())
        }
    }
}

fn eval_ocr(
    state: &ModelState,
    corpus: &[Page],
    vocab: &Vocabulary,
    seg_cfg: &SegmentConfig,
) -> Result<String, AnyError> {
    let gen = infer::GenerationConfig::default();
    let mut rec_sum = metrics::Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    let mut loc_sum = rec_sum;
    let mut diagnostics = 0usize;
    for page in corpus {
        let r = infer::generate_ocr(state, &page.image, vocab, seg_cfg, &gen)?;
        diagnostics += r.diagnostics.len();
        let pred_words: Vec<String> = r.words.iter().map(|w| w.word.clone()).collect();
        let gold_words: Vec<String> = page.words.iter().map(|w| w.word.clone()).collect();
        let rec = metrics::recognition_prf(&pred_words, &gold_words);
        let pred_boxes: Vec<_> = r.words.iter().map(|w| w.bbox).collect();
        let gold_boxes: Vec<_> = page.words.iter().map(|w| w.bbox).collect();
        let loc = metrics::localization_prf(&pred_boxes, &gold_boxes, 0.5);
        rec_sum.precision += rec.precision;
        rec_sum.recall += rec.recall;
        rec_sum.f1 += rec.f1;
        loc_sum.precision += loc.precision;
        loc_sum.recall += loc.recall;
        loc_sum.f1 += loc.f1;
    }
    let n = corpus.len() as f64;
    Ok(format!(
        "pages {}\nrecognition_precision {:.6}\nrecognition_recall {:.6}\nrecognition_f1 {:.6}\n\
         localization_precision {:.6}\nlocalization_recall {:.6}\nlocalization_f1 {:.6}\n\
         diagnostics {diagnostics}\n",
        corpus.len(),
        rec_sum.precision / n,
        rec_sum.recall / n,
        rec_sum.f1 / n,
        loc_sum.precision / n,
        loc_sum.recall / n,
        loc_sum.f1 / n,
    ))
}

fn eval_cls(state: &ModelState, corpus: &[Page], vocab: &Vocabulary) -> Result<String, AnyError> {
    let mut correct = 0usize;
    for page in corpus {
        if infer::classify(state, &page.image, vocab)? == page.class {
            correct += 1;
        }
    }
    Ok(format!(
        "pages {}\naccuracy {:.6}\n",
        corpus.len(),
        correct as f64 / corpus.len() as f64
    ))
}

fn eval_label(
    state: &ModelState,
    corpus: &[Page],
    vocab: &Vocabulary,
    seg_cfg: &SegmentConfig,
) -> Result<String, AnyError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for page in corpus {
        let tags = infer::label_tokens(state, &page.image, &page.words, vocab, seg_cfg)?;
        if tags.len() != page.tags.len() {
            return Err(format!(
                "{} predictions for {} words",
                tags.len(),
                page.tags.len()
            )
            .into());
        }
        correct += tags.iter().zip(&page.tags).filter(|(a, b)| a == b).count();
        total += tags.len();
    }
    Ok(format!(
        "words {total}\naccuracy {:.6}\n",
        correct as f64 / total as f64
    ))
}

fn eval_vqa(state: &ModelState, corpus: &[Page], vocab: &Vocabulary) -> Result<String, AnyError> {
    let mut anls_sum = 0.0;
    let mut n_questions = 0usize;
    let mut yesno_correct = 0usize;
    let mut n_yesno = 0usize;
    let mut grounded_hits = 0usize;
    let mut n_grounded = 0usize;
    for page in corpus {
        for (q, gold) in &page.qa {
            let r = infer::answer_question(state, &page.image, q, vocab)?;
            let gold_text = match gold {
                VqaAnswer::YesNo(yes) => if *yes { "yes" } else { "no" }.to_string(),
                VqaAnswer::Words(ws) => ws
                    .iter()
                    .map(|w| w.word.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            };
            anls_sum += metrics::anls(&r.text(), &[&gold_text], 0.5);
            n_questions += 1;
            match (gold, &r.prediction) {
                (VqaAnswer::YesNo(g), infer::QaPrediction::YesNo(p)) => {
                    n_yesno += 1;
                    if g == p {
                        yesno_correct += 1;
                    }
                }
                (VqaAnswer::YesNo(_), _) => n_yesno += 1,
                (VqaAnswer::Words(gw), pred) => {
                    n_grounded += 1;
                    if let infer::QaPrediction::Words(pw) = pred {
                        let hit = gw.iter().zip(pw).all(|(g, p)| {
                            g.word == p.word && iou(&g.bbox, &p.bbox) >= 0.5
                        }) && gw.len() == pw.len();
                        if hit {
                            grounded_hits += 1;
                        }
                    }
                }
            }
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(format!(
        "questions {n_questions}\nanls {:.6}\nyesno_accuracy {:.6}\ngrounded_match_at_05 {:.6}\n",
        anls_sum / n_questions.max(1) as f64,
        frac(yesno_correct, n_yesno),
        frac(grounded_hits, n_grounded),
    ))
}
