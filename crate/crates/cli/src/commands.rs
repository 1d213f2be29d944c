use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use dse_core::corpus::synth::generate;
use dse_core::corpus::{
    load_corpus, load_qrels, load_queries, read_manifest, render_text_screenshot, PixelGrid,
};
use dse_core::denseindex::FlatIndex;
use dse_core::encoder::{
    encode_documents, encode_query, load_checkpoint, save_checkpoint, EncoderParams,
};
use dse_core::eval::{
    fuse_run_sets, judged_metrics, read_run_file, throughput_report, topk_accuracy, write_run_file,
    write_throughput_csv,
};
use dse_core::lexical::{bm25_search, downsize_corpus, mine_training_examples, InvertedIndex};
use dse_core::patchgrid::CropConfig;
use dse_core::training::{read_examples, train_from, write_examples, write_loss_log, TrainingData};
use dse_core::{Params, Params32, Real};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::failure::Failure;
use crate::{create, finish, Cli, Command};

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    doc_id: String,
    embedding: Vec<f32>,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth(a) => {
            let mut s = cfg.synth.clone();
            s.docs = a.docs.unwrap_or(s.docs);
            s.train_queries = a.train_queries.unwrap_or(s.train_queries);
            s.test_queries = a.test_queries.unwrap_or(s.test_queries);
            s.height = a.height.unwrap_or(s.height);
            s.width = a.width.unwrap_or(s.width);
            let corpus = generate(&s)?;
            corpus.write(&a.out)?;
            println!(
                "wrote {} docs, {} train and {} test queries to {}",
                corpus.docs.len(),
                corpus.train_queries.len(),
                corpus.test_queries.len(),
                a.out.display()
            );
        }
        Command::Mine(a) => {
            let k = a.k.unwrap_or(cfg.mine_k);
            let docs = load_corpus(&a.corpus)?;
            let queries = load_queries(&a.queries)?;
            let index = InvertedIndex::from_corpus(&docs)?;
            let examples = mine_training_examples(&index, &docs, &queries, k, &cfg.bm25)?;
            write_examples(&a.out, &examples)?;
            println!("kept {} of {} queries", examples.len(), queries.len());
            if let Some(path) = &a.pool_out {
                let pool = downsize_corpus(&index, &queries, k, &cfg.bm25);
                let mut w = create(path)?;
                for id in &pool {
                    writeln!(w, "{id}").map_err(|e| Failure::io(path, e))?;
                }
                finish(w, path)?;
                println!("pool of {} docs written to {}", pool.len(), path.display());
            }
        }
        Command::Train(a) => {
            let mut tc = cfg.training.clone();
            tc.epochs = a.epochs.unwrap_or(tc.epochs);
            tc.learning_rate = a.learning_rate.unwrap_or(tc.learning_rate);
            tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
            tc.hard_negs_per_query = a.hard_negs.unwrap_or(tc.hard_negs_per_query);
            tc.temperature = a.temperature.unwrap_or(tc.temperature);
            let (ec, params): (_, Params) = match &a.init {
                Some(path) => load_checkpoint(path)?,
                None => {
                    let mut ec = cfg.encoder.clone();
                    ec.embed_dim = a.embed_dim.unwrap_or(ec.embed_dim);
                    ec.crop.cx = a.cx.unwrap_or(ec.crop.cx);
                    ec.crop.cy = a.cy.unwrap_or(ec.crop.cy);
                    ec.validate()?;
                    let p = EncoderParams::init(&ec)?;
                    (ec, p)
                }
            };
            let docs = load_corpus(&a.corpus)?;
            let queries = load_queries(&a.queries)?;
            let examples = read_examples(&a.examples)?;
            let data = TrainingData::<Real>::new(&docs, &queries, &examples, &ec)?;
            let outcome = train_from(params, &data, &examples, &tc, &ec, |epoch, loss| {
                println!("epoch {epoch} loss {loss:.6}");
            })?;
            save_checkpoint(&a.out, &outcome.params, &ec)?;
            if let Some(path) = &a.loss_log {
                let w = create(path)?;
                write_loss_log(w, &outcome.history).map_err(|e| Failure::io(path, e))?;
            }
        }
        Command::Encode(a) => {
            let (ec, params): (_, Params32) = load_checkpoint(&a.checkpoint)?;
            let docs = load_corpus(&a.corpus)?;
            let images: Vec<&PixelGrid> = docs.iter().map(|d| &d.image).collect();
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(a.threads.unwrap_or(0))
                .build()
                .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
            let embeddings = pool.install(|| encode_documents(&images, &params, &ec))?;
            let mut w = create(&a.out)?;
            for (d, e) in docs.iter().zip(&embeddings) {
                let line = EmbeddingLine {
                    doc_id: d.doc_id.clone(),
                    embedding: e.to_f32(),
                };
                let text =
                    serde_json::to_string(&line).map_err(|e| Failure::Malformed(e.to_string()))?;
                writeln!(w, "{text}").map_err(|e| Failure::io(&a.out, e))?;
            }
            finish(w, &a.out)?;
            println!("encoded {} documents", docs.len());
        }
        Command::Index(a) => {
            let lines = read_embeddings(&a.embeddings)?;
            let dim = lines
                .first()
                .map_or(cfg.encoder.embed_dim, |l| l.embedding.len());
            let mut index = FlatIndex::new(dim);
            for l in &lines {
                index.add(&l.doc_id, &l.embedding)?;
            }
            index.save(&a.out)?;
            println!("indexed {} vectors of dim {dim}", index.len());
        }
        Command::Search(a) => {
            let (ec, params): (_, Params32) = load_checkpoint(&a.checkpoint)?;
            let index = FlatIndex::load(&a.index)?;
            let queries = load_queries(&a.queries)?;
            let k = a.k.unwrap_or(cfg.k);
            let runs = queries
                .iter()
                .map(|q| {
                    let e = encode_query(&q.text, &params, &ec)?;
                    index.search(&q.query_id, &e.to_f32(), k)
                })
                .collect::<Result<Vec<_>, _>>()?;
            write_run_file(&a.out, &runs, &a.tag)?;
        }
        Command::Bm25(a) => {
            let mut p = cfg.bm25;
            p.k1 = a.k1.unwrap_or(p.k1);
            p.b = a.b.unwrap_or(p.b);
            p.validate()?;
            let manifest = read_manifest(&a.corpus)?;
            let index = InvertedIndex::build(
                manifest
                    .iter()
                    .map(|e| (e.doc_id.as_str(), e.text.as_str())),
            )?;
            let queries = load_queries(&a.queries)?;
            let k = a.k.unwrap_or(cfg.k);
            let runs: Vec<_> = queries
                .iter()
                .map(|q| bm25_search(&index, &q.query_id, &q.text, k, &p))
                .collect();
            write_run_file(&a.out, &runs, &a.tag)?;
        }
        Command::Eval(a) => {
            let runs = read_run_file(&a.run)?;
            let queries = load_queries(&a.queries)?;
            let texts: HashMap<String, String> = read_manifest(&a.corpus)?
                .into_iter()
                .map(|e| (e.doc_id, e.text))
                .collect();
            let report = topk_accuracy(&runs, &queries, &texts, &a.ks)?;
            print!("{}", report.to_table());
            if let Some(path) = &a.csv {
                let mut w = create(path)?;
                report.write_csv(&mut w).map_err(|e| Failure::io(path, e))?;
                finish(w, path)?;
            }
            if let Some(qrels_path) = &a.qrels {
                let qrels = load_qrels(qrels_path, Some(&queries))?;
                let judged = judged_metrics(&runs, &qrels, a.judged_k);
                print!("{}", judged.to_table());
                if let Some(path) = &a.judged_csv {
                    let mut w = create(path)?;
                    judged.write_csv(&mut w).map_err(|e| Failure::io(path, e))?;
                    finish(w, path)?;
                }
            } else if a.judged_csv.is_some() {
                return Err(Failure::Usage("--judged-csv needs --qrels".into()));
            }
        }
        Command::Fuse(a) => {
            let dense = read_run_file(&a.dense)?;
            let lexical = read_run_file(&a.lexical)?;
            let fused = fuse_run_sets(
                &dense,
                &lexical,
                a.alpha.unwrap_or(cfg.alpha),
                a.pool_k.unwrap_or(cfg.pool_k),
            )?;
            write_run_file(&a.out, &fused, &a.tag)?;
        }
        Command::Throughput(a) => {
            let grids = a
                .grids
                .iter()
                .map(|g| parse_grid(g))
                .collect::<Result<Vec<_>, _>>()?;
            let mut ec = cfg.encoder.clone();
            ec.crop = if a.toy {
                CropConfig::toy(1, 1)
            } else {
                CropConfig::canonical(1, 1)
            };
            let params = Params32::init(&ec)?;
            let sample: Vec<PixelGrid> = match &a.corpus {
                Some(path) => load_corpus(path)?
                    .into_iter()
                    .take(a.sample)
                    .map(|d| d.image)
                    .collect(),
                None => (0..a.sample)
                    .map(|i| {
                        render_text_screenshot(
                            &format!("throughput sample {i} of rendered words"),
                            256,
                            256,
                            i as u64,
                        )
                    })
                    .collect::<Result<_, _>>()?,
            };
            let rows = throughput_report(&sample, &params, &ec, &grids, a.warmup)?;
            println!(
                "{:>3} {:>3} {:>14} {:>8}",
                "cx", "cy", "docs/second", "latents"
            );
            for r in &rows {
                println!(
                    "{:>3} {:>3} {:>14.2} {:>8}",
                    r.cx, r.cy, r.docs_per_second, r.latent_embeddings
                );
            }
            if let Some(path) = &a.out {
                let mut w = create(path)?;
                write_throughput_csv(&mut w, &rows).map_err(|e| Failure::io(path, e))?;
                finish(w, path)?;
            }
        }
    }
    Ok(())
}

fn parse_grid(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("grid {s:?} is not CXxCY"));
    let (x, y) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        x.trim().parse().map_err(|_| bad())?,
        y.trim().parse().map_err(|_| bad())?,
    ))
}

fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingLine>, Failure> {
    let f = std::fs::File::open(path).map_err(|e| Failure::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Failure::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line)
            .map_err(|e| Failure::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(parsed);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_parse() {
        assert_eq!(parse_grid("2x3").unwrap(), (2, 3));
        assert_eq!(parse_grid("4X4").unwrap(), (4, 4));
        assert!(parse_grid("4").is_err());
        assert!(parse_grid("ax1").is_err());
    }
}
