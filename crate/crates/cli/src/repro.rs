//! `repro`: the whole pipeline on the synthetic bilingual fixture, run as a
//! sequence of ordinary subcommands with paths relative to the output directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::Parser;
use serde::Serialize;

use moe_lens::eval::EvalResult;
use moe_lens::experiment::{threshold_for_kept, ToySetup, KEPT_TARGET};
use moe_lens::manifest::{sha256_file, RunManifest};
use moe_lens::profile::FrequencyMatrix;

use crate::args::{Cli, ReproArgs};
use crate::commands::{self, Ctx};

pub const RANDOM_SEEDS: [u64; 3] = [1, 2, 3];
const LANGS: [&str; 2] = ["la", "lb"];

#[derive(Serialize)]
struct Summary {
    fixture: &'static str,
    seed: u64,
    steps: Vec<Vec<String>>,
    languages: Vec<LanguageSummary>,
    artifacts: Vec<String>,
}

#[derive(Serialize)]
struct LanguageSummary {
    tag: String,
    tau: f64,
    origin_ppl: f64,
    threshold_ppl: f64,
    random_ppl: Vec<f64>,
    top_percent_ppl: f64,
}

struct Driver {
    ctx: Ctx,
    steps: Vec<Vec<String>>,
}

impl Driver {
    fn step(&mut self, argv: &[&str]) -> Result<()> {
        let argv: Vec<String> = argv.iter().map(|s| s.to_string()).collect();
        let cli = Cli::try_parse_from(std::iter::once("moe-lens".to_string()).chain(argv.iter().cloned()))
            .map_err(|e| anyhow!("internal step {argv:?} rejected: {e}"))?;
        commands::run(&cli.command, &argv, &self.ctx).with_context(|| format!("step `{}`", argv.join(" ")))?;
        self.steps.push(argv);
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.ctx.resolve(Path::new(rel))
    }

    fn ppl(&self, rel: &str) -> Result<f64> {
        let text = std::fs::read_to_string(self.path(rel)).with_context(|| format!("reading {rel}"))?;
        Ok(serde_json::from_str::<EvalResult>(&text)?.value)
    }
}

pub fn repro(parent: &Ctx, a: &ReproArgs) -> Result<()> {
    let out = parent.resolve(&a.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut d = Driver { ctx: Ctx { workers: parent.workers, base: Some(out.clone()) }, steps: Vec::new() };
    let setup = ToySetup::default();
    let m = &setup.model;
    let seed = a.seed.to_string();
    let (layers, d_model, d_ff, heads, seq) =
        (m.n_layers.to_string(), m.d_model.to_string(), m.d_ff.to_string(), m.n_heads.to_string(), m.max_seq_len.to_string());
    let experts = setup.n_experts.to_string();
    let steps = setup.train.steps.to_string();
    let tune_steps = (setup.train.steps / 4).max(1).to_string();
    let max_tokens = setup.max_tokens.to_string();
    let dims = ["--layers", &layers, "--d-model", &d_model, "--d-ff", &d_ff, "--heads", &heads, "--max-seq-len", &seq];

    let mut gen = vec!["gen-toy"];
    gen.extend(dims);
    gen.extend(["--seed", &seed, "--train-steps", &steps, "--corpus-dir", "corpus", "--out", "model.mltb"]);
    d.step(&gen)?;
    d.step(&[
        "gen-toy", "--tune-from", "model.mltb", "--tune-data", "corpus/tune.jsonl", "--train-steps", &tune_steps, "--seed",
        &seed, "--out", "tuned.mltb",
    ])?;
    d.step(&["split", "--model", "model.mltb", "--experts", &experts, "--seed", &seed, "--out", "part.json"])?;

    for lang in LANGS {
        let (corpus, freq) = (format!("corpus/{lang}.profile.jsonl"), format!("freq/{lang}.freq"));
        d.step(&[
            "profile", "--model", "model.mltb", "--partition", "part.json", "--corpus", &corpus, "--lang", lang,
            "--max-tokens", &max_tokens, "--model-id", "base", "--out", &freq,
        ])?;
    }
    d.step(&[
        "profile", "--model", "tuned.mltb", "--partition", "part.json", "--corpus", "corpus/la.profile.jsonl", "--lang",
        "la", "--max-tokens", &max_tokens, "--model-id", "tuned", "--out", "freq/la.tuned.freq",
    ])?;

    d.step(&["analyze", "similarity", "freq/la.freq", "freq/lb.freq", "--out", "analysis/similarity.json"])?;
    d.step(&["analyze", "shared", "--tau", "0.05", "freq/la.freq", "freq/lb.freq", "--out", "analysis/shared.grid"])?;
    d.step(&["analyze", "diff", "freq/la.freq", "freq/la.tuned.freq", "--out", "analysis/la.diff.grid"])?;

    let mut languages = Vec::new();
    for lang in LANGS {
        let freq_rel = format!("freq/{lang}.freq");
        let freq = FrequencyMatrix::load(d.path(&freq_rel))?;
        let (target, lo, hi) = KEPT_TARGET;
        let tau = threshold_for_kept(&freq, target, lo, hi)
            .ok_or_else(|| anyhow!("no threshold keeps a proportion in [{lo}, {hi}] for {lang}"))?;
        let tau_s = tau.to_string();
        let mask = format!("masks/{lang}.threshold.mask");
        d.step(&["prune", "threshold", "--freq", &freq_rel, "--tau", &tau_s, "--out", &mask])?;
        d.step(&["prune", "top", "--freq", &freq_rel, "--percent", "80", "--out", &format!("masks/{lang}.top.mask")])?;
        for s in RANDOM_SEEDS {
            let (s, out) = (s.to_string(), format!("masks/{lang}.random{s}.mask"));
            d.step(&["prune", "random", "--like", &mask, "--seed", &s, "--out", &out])?;
        }
        d.step(&["prune", "flops", "--model", "model.mltb", "--mask", &mask, "--out", &format!("masks/{lang}.flops.json")])?;

        let data = format!("corpus/{lang}.eval.jsonl");
        let mut variants: Vec<(String, Option<String>)> = vec![("origin".into(), None), ("threshold".into(), Some(mask.clone()))];
        variants.push(("top".into(), Some(format!("masks/{lang}.top.mask"))));
        variants.extend(RANDOM_SEEDS.iter().map(|s| (format!("random{s}"), Some(format!("masks/{lang}.random{s}.mask")))));
        for (name, mask) in &variants {
            let out = format!("eval/{lang}.ppl.{name}.json");
            let mut argv = vec!["eval", "ppl", "--model", "model.mltb", "--partition", "part.json"];
            if let Some(m) = mask {
                argv.extend(["--mask", m.as_str()]);
            }
            argv.extend(["--data", &data, "--lang", lang, "--max-tokens", &max_tokens, "--out", &out]);
            d.step(&argv)?;
        }
        let mcq = format!("corpus/{lang}.mcq.jsonl");
        for (name, mask) in variants.iter().take(2) {
            let out = format!("eval/{lang}.mcq.{name}.json");
            let mut argv = vec!["eval", "mcq", "--model", "model.mltb", "--partition", "part.json"];
            if let Some(m) = mask {
                argv.extend(["--mask", m.as_str()]);
            }
            argv.extend(["--data", &mcq, "--lang", lang, "--out", &out]);
            d.step(&argv)?;
        }
        languages.push(LanguageSummary {
            tag: lang.to_string(),
            tau,
            origin_ppl: d.ppl(&format!("eval/{lang}.ppl.origin.json"))?,
            threshold_ppl: d.ppl(&format!("eval/{lang}.ppl.threshold.json"))?,
            random_ppl: RANDOM_SEEDS.iter().map(|s| d.ppl(&format!("eval/{lang}.ppl.random{s}.json"))).collect::<Result<_>>()?,
            top_percent_ppl: d.ppl(&format!("eval/{lang}.ppl.top.json"))?,
        });
    }
    d.step(&[
        "eval", "gen", "--model", "tuned.mltb", "--data", "corpus/arith.gen.jsonl", "--lang", "arith", "--max-new-tokens", "4",
        "--out", "eval/arith.gen.tuned.json",
    ])?;

    for lang in LANGS {
        d.step(&["render", "heatmap", "--in", &format!("freq/{lang}.freq"), "--out", &format!("figs/{lang}.svg")])?;
    }
    d.step(&["render", "diff", "--in", "analysis/la.diff.grid", "--out", "figs/la.diff.svg"])?;
    d.step(&["render", "shared", "--in", "analysis/shared.grid", "--out", "figs/shared.svg"])?;
    d.step(&["render", "similarity", "--in", "analysis/similarity.json", "--outdir", "figs/similarity"])?;

    let mut artifacts = list_files(&out)?;
    artifacts.retain(|f| f != "repro.json" && f != "repro.json.manifest.json");
    for l in &languages {
        let mean = l.random_ppl.iter().sum::<f64>() / l.random_ppl.len() as f64;
        println!(
            "{}: tau {} origin {:.3} threshold {:.3} random-mean {:.3} top {:.3}",
            l.tag, l.tau, l.origin_ppl, l.threshold_ppl, mean, l.top_percent_ppl
        );
    }
    let summary = Summary { fixture: "toy-bilingual", seed: a.seed, steps: d.steps, languages, artifacts };
    let path = out.join("repro.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").with_context(|| format!("writing {}", path.display()))?;

    let mut manifest = RunManifest::new(
        vec!["repro".into(), "--fixture".into(), "toy-bilingual".into(), "--seed".into(), seed.clone()],
        &serde_json::to_string(&(a.fixture, a.seed))?,
    );
    manifest.seeds.insert("seed".into(), a.seed);
    for f in summary.artifacts.iter().chain(std::iter::once(&"repro.json".to_string())) {
        manifest.output_digests.insert(f.clone(), sha256_file(out.join(f))?);
    }
    manifest.write_beside(&path)?;
    println!("{} artifacts in {}", summary.artifacts.len() + 1, a.out.display());
    Ok(())
}

/// Files under `root`, as sorted `/`-separated relative paths.
pub fn list_files(root: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<String>) -> Result<()> {
        for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, acc)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                acc.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut acc = Vec::new();
    walk(root, root, &mut acc)?;
    acc.sort();
    Ok(acc)
}
