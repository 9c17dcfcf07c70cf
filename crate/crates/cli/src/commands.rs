use std::io::Write;
use std::path::Path;

use prkt_core::dataset::{generate_synthetic, load_manifest, Split, SyntheticConfig};
use prkt_core::eval::evaluate;
use prkt_core::retrieval::{embed_dataset, EmbeddingStore};
use prkt_core::train::{load_checkpoint_with_fingerprint, train, TrainConfig};

use crate::args::*;
use crate::engine::{eval_size, Engine};
use crate::{html, serve, CliError, Result};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Config(a) => config(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Embed(a) => embed(&a),
        Command::Eval(a) => eval(&a),
        Command::Search(a) => search_cmd(&a),
        Command::Serve(a) => serve::run(&a),
    }
}

fn stdout_line(s: &str) -> Result<()> {
    writeln!(std::io::stdout().lock(), "{s}").map_err(|e| CliError::io("stdout", e))
}

fn gen(a: &GenArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        image_size: a.size,
        val_fraction: (a.val_fraction > 0.0).then_some(a.val_fraction),
        ..SyntheticConfig::new(a.ids, a.views, a.seed)
    };
    let manifest = generate_synthetic(&cfg, &a.out)?;
    let val = manifest.entries_in(Split::Val).count();
    stdout_line(&format!(
        "wrote {} images ({} train, {val} val) and {}",
        manifest.len(),
        manifest.len() - val,
        a.out.join("manifest.jsonl").display()
    ))
}

fn config(a: &ConfigArgs) -> Result<()> {
    TrainConfig::preset(a.preset.name())?.save(&a.out)?;
    stdout_line(&format!("wrote {} preset to {}", a.preset.name(), a.out.display()))
}

/// Config file or preset, then flag overrides.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match (&a.config, a.preset) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(p)) => TrainConfig::preset(p.name())?,
        (None, None) => TrainConfig::toy(),
    };
    if let Some(m) = &a.manifest {
        c.manifest = Some(m.clone());
    }
    if let Some(o) = &a.out {
        c.checkpoint_path = Some(o.clone());
    }
    if let Some(l) = &a.log {
        c.log_path = Some(l.clone());
    }
    if let Some(h) = a.head {
        c.head_kind = h.into();
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { c.$field = v; })*
        };
    }
    set!(iters => max_iters, batch_size => batch_size, seed => seed, lr => lr,
         margin => margin, scale => scale, eval_every => eval_every);
    if a.random_resized_crop {
        c.augment.ablation_random_resized_crop = true;
    }
    if a.random_rotation.is_some() {
        c.augment.ablation_random_rotation_deg = a.random_rotation;
    }
    c.validate()?;
    Ok(c)
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let c = resolve_train_config(a)?;
    if c.checkpoint_path.is_none() {
        log::warn!("no --out given; the trained model will not be saved");
    }
    let out = train(&c)?;
    let n = out.losses.len();
    stdout_line(&format!("trained {n} iterations, final loss {}", out.losses[n - 1]))?;
    if let Some(r) = out.final_metrics() {
        stdout_line(&r.to_table())?;
    }
    if let Some(p) = &c.checkpoint_path {
        stdout_line(&format!("checkpoint: {}", p.display()))?;
    }
    Ok(())
}

fn embed(a: &EmbedArgs) -> Result<()> {
    let (ck, fingerprint) = load_checkpoint_with_fingerprint(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let split = match a.split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::All => None,
    };
    let mut store = embed_dataset(&ck.params, &manifest, split, eval_size(&ck), a.batch_size)?;
    store.fingerprint = Some(fingerprint);
    store.save(&a.out)?;
    stdout_line(&format!(
        "embedded {} images (d={}) into {}",
        store.len(),
        store.dim(),
        a.out.display()
    ))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let store = EmbeddingStore::load(&a.embeddings)?;
    let report = evaluate(&store, a.rerank.enabled().as_ref())?;
    let json = report.to_json();
    if let Some(p) = &a.out {
        std::fs::write(p, format!("{json}\n")).map_err(|e| CliError::io(p.display(), e))?;
    }
    stdout_line(if a.table { report.to_table() } else { json }.trim_end())
}

fn search_cmd(a: &SearchArgs) -> Result<()> {
    let engine = Engine::load(&a.checkpoint, &a.embeddings)?;
    let query = engine.embed_file(&a.query)?;
    let ranked = engine.rank(&query, a.k, a.rerank.enabled().as_ref())?;
    if ranked.clamped {
        eprintln!("warning: k={} exceeds the gallery size, showing all {}", a.k, ranked.k);
    }
    for (i, h) in ranked.hits.iter().enumerate() {
        stdout_line(&format!("{}\t{}\t{}\t{:.6}", i + 1, h.patent_id, h.image_path, h.score))?;
    }
    if let Some(out) = &a.html {
        let page = html::report(&a.query, &a.image_root, &ranked.hits, a.rerank.rerank);
        write_file(out, &page)?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path.display(), e))
}
