use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use moe_lens::analysis::{diff_matrix, shared_expert_map, similarity_report, Grid, GridKind, SimilarityReport};
use moe_lens::corpus::{arithmetic_items, read_corpus, read_jsonl, write_jsonl, Sample};
use moe_lens::eval::{EvalResult, Evaluator, GenItem, McqItem, OptionScoring};
use moe_lens::experiment::{bilingual_data, ToySetup};
use moe_lens::manifest::RunManifest;
use moe_lens::model::{load_model, random_model, save_model, ModelConfig};
use moe_lens::profile::{profile_corpus, FrequencyMatrix, ProfileConfig};
use moe_lens::prune::{estimate_flops, mask_by_threshold, mask_by_top_percent, mask_random_like, PruneMask};
use moe_lens::render::{render_heatmap, render_similarity, ColorScale, HeatmapSpec};
use moe_lens::split::{split_model, ClusterConfig, ExpertPartition, Init};
use moe_lens::tokenizer::Tokenizer;
use moe_lens::train::{train, TrainConfig};

use crate::args::*;

/// Execution context. Relative paths resolve against `base` when set, which
/// lets `repro` record short, location-independent paths in its manifests.
pub struct Ctx {
    pub workers: usize,
    pub base: Option<PathBuf>,
}

impl Ctx {
    pub fn new(workers: usize) -> Self {
        Self { workers, base: None }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        }
    }
}

/// Collects digests while a command runs and writes one manifest beside each output.
struct Run<'a> {
    ctx: &'a Ctx,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    fn new(ctx: &'a Ctx, argv: &[String], config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_string(config)?;
        Ok(Self { ctx, manifest: RunManifest::new(argv.to_vec(), &config) })
    }

    fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_string(), value);
    }

    /// Resolves an input path and records its digest under the path as given.
    fn input(&mut self, p: &Path) -> Result<PathBuf> {
        let path = self.ctx.resolve(p);
        self.manifest
            .add_input(&p.to_string_lossy(), &path)
            .with_context(|| format!("reading {}", p.display()))?;
        Ok(path)
    }

    /// Resolves an output path and creates its parent directory.
    fn output(&self, p: &Path) -> Result<Out> {
        let path = self.ctx.resolve(p);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(Out { label: p.to_string_lossy().into_owned(), path })
    }

    /// Every manifest lists all outputs of the command, keyed like the inputs.
    fn finish(mut self, outputs: &[Out]) -> Result<()> {
        for out in outputs {
            self.manifest.add_output(&out.label, &out.path)?;
        }
        for out in outputs {
            self.manifest.write_beside(&out.path)?;
        }
        Ok(())
    }
}

/// An output file: the path as given on the command line and where it lives.
pub struct Out {
    pub label: String,
    pub path: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn tokenizer(run: &mut Run, vocab: &Option<PathBuf>) -> Result<Tokenizer> {
    Ok(match vocab {
        Some(v) => Tokenizer::from_vocab_file(run.input(v)?)?,
        None => Tokenizer::byte_level(),
    })
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

pub fn run(cmd: &Command, argv: &[String], ctx: &Ctx) -> Result<()> {
    if let Command::Repro(a) = cmd {
        return crate::repro::repro(ctx, a);
    }
    let run = Run::new(ctx, argv, cmd)?;
    match cmd {
        Command::Split(a) => split(run, a),
        Command::Profile(a) => profile(run, a, ctx.workers),
        Command::Analyze(a) => analyze(run, a),
        Command::Prune(a) => prune(run, a),
        Command::Eval(a) => eval(run, a),
        Command::Render(a) => render(run, a),
        Command::GenToy(a) => gen_toy(run, a),
        Command::Repro(_) => unreachable!("handled above"),
    }
}

fn split(mut run: Run, a: &SplitArgs) -> Result<()> {
    run.seed("seed", a.seed);
    let model = load_model(run.input(&a.model)?)?;
    let cfg = ClusterConfig {
        max_iterations: a.max_iterations,
        init: match a.init {
            InitArg::KmeansPlusPlus => Init::KMeansPlusPlus,
            InitArg::Random => Init::Random,
        },
        standardize: a.standardize,
        ..ClusterConfig::new(a.experts, a.seed)
    };
    let partition = split_model(&model, &cfg)?;
    let out = run.output(&a.out)?;
    partition.save(&out.path)?;
    run.finish(&[out])
}

fn profile(mut run: Run, a: &ProfileArgs, workers: usize) -> Result<()> {
    let model = load_model(run.input(&a.model)?)?;
    let partition = ExpertPartition::load(run.input(&a.partition)?)?;
    let corpus = read_corpus(run.input(&a.corpus)?)?;
    let tok = tokenizer(&mut run, &a.vocab)?;
    let model_id = a.model_id.clone().unwrap_or_else(|| file_stem(&a.model));
    let mut cfg = ProfileConfig::new(partition.n_layers(), partition.n_experts(), &a.lang, &model_id);
    if let Some(k) = a.topk {
        cfg.top_k = k;
    }
    cfg.max_tokens_per_sample = a.max_tokens;
    cfg.max_samples = a.max_samples;
    cfg.workers = workers;
    let freq = profile_corpus(&model, &partition, &corpus, &tok, &cfg)?;
    let out = run.output(&a.out)?;
    freq.save(&out.path)?;
    run.finish(&[out])
}

fn load_freqs(run: &mut Run, paths: &[PathBuf]) -> Result<Vec<FrequencyMatrix>> {
    paths.iter().map(|p| Ok(FrequencyMatrix::load(run.input(p)?)?)).collect()
}

fn analyze(mut run: Run, a: &AnalyzeCmd) -> Result<()> {
    let out = match a {
        AnalyzeCmd::Similarity { inputs, out } => {
            let report = similarity_report(&load_freqs(&mut run, inputs)?)?;
            let out = run.output(out)?;
            report.save(&out.path)?;
            out
        }
        AnalyzeCmd::Shared { tau, inputs, out } => {
            let map = shared_expert_map(&load_freqs(&mut run, inputs)?, *tau)?;
            let out = run.output(out)?;
            std::fs::write(&out.path, map.to_text()).with_context(|| format!("writing {}", out.label))?;
            out
        }
        AnalyzeCmd::Diff { base, tuned, out } => {
            let b = FrequencyMatrix::load(run.input(base)?)?;
            let t = FrequencyMatrix::load(run.input(tuned)?)?;
            let diff = diff_matrix(&b, &t)?;
            let out = run.output(out)?;
            std::fs::write(&out.path, diff.to_text()).with_context(|| format!("writing {}", out.label))?;
            out
        }
    };
    run.finish(&[out])
}

/// Writes to `out` (with a manifest) or prints to standard output.
fn emit(run: Run, out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            let out = run.output(p)?;
            std::fs::write(&out.path, text).with_context(|| format!("writing {}", out.label))?;
            run.finish(&[out])
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn prune(mut run: Run, a: &PruneCmd) -> Result<()> {
    match a {
        PruneCmd::Threshold { freq, tau, out } => {
            let mask = mask_by_threshold(&FrequencyMatrix::load(run.input(freq)?)?, *tau)?;
            emit(run, out, &mask.to_json()?)
        }
        PruneCmd::Top { freq, percent, out } => {
            let mask = mask_by_top_percent(&FrequencyMatrix::load(run.input(freq)?)?, *percent)?;
            emit(run, out, &mask.to_json()?)
        }
        PruneCmd::Random { like, seed, out } => {
            run.seed("seed", *seed);
            let mask = mask_random_like(&PruneMask::load(run.input(like)?)?, *seed)?;
            emit(run, out, &mask.to_json()?)
        }
        PruneCmd::Flops { model, mask, seq_len, out } => {
            let model = load_model(run.input(model)?)?;
            let mask = PruneMask::load(run.input(mask)?)?;
            let est = estimate_flops(&model.config, &mask, *seq_len)?;
            emit(run, out, &(serde_json::to_string_pretty(&est)? + "\n"))
        }
    }
}

fn eval(mut run: Run, cmd: &EvalCmd) -> Result<()> {
    let a = match cmd {
        EvalCmd::Ppl(a) | EvalCmd::Mcq(a) | EvalCmd::Gen(a) => a,
    };
    let model = load_model(run.input(&a.model)?)?;
    let partition = a.partition.as_ref().map(|p| run.input(p)).transpose()?.map(ExpertPartition::load).transpose()?;
    let mask = a.mask.as_ref().map(|p| run.input(p)).transpose()?.map(PruneMask::load).transpose()?;
    let data = run.input(&a.data)?;
    let tok = tokenizer(&mut run, &a.vocab)?;
    let mut ev = Evaluator::new(&model, &tok)?;
    if let (Some(p), Some(m)) = (&partition, &mask) {
        p.check_model(&model.config)?;
        ev = ev.with_mask(p, m)?;
    }
    let result: EvalResult = match cmd {
        EvalCmd::Ppl(_) => ev.perplexity(&read_corpus(&data)?, a.max_tokens, &a.lang)?,
        EvalCmd::Mcq(_) => {
            let items: Vec<McqItem> = read_jsonl(&data)?;
            let scoring = match a.scoring {
                ScoringArg::Normalized => OptionScoring::Normalized,
                ScoringArg::Raw => OptionScoring::Raw,
            };
            ev.mcq_accuracy(&items, scoring, &a.lang)?
        }
        EvalCmd::Gen(_) => ev.exact_match(&read_jsonl::<GenItem>(&data)?, a.max_new_tokens, &a.lang)?,
    };
    let out = run.output(&a.out)?;
    write_json(&out.path, &result)?;
    run.finish(&[out])
}

fn heatmap_from(grid: Grid, title: Option<&str>, default_title: &str, scale: ColorScale) -> HeatmapSpec {
    HeatmapSpec::new(grid.values, scale, title.unwrap_or(default_title))
}

fn render(mut run: Run, a: &RenderCmd) -> Result<()> {
    let (input, out, title, scale, expect) = match a {
        RenderCmd::Similarity { input, outdir } => {
            let report = SimilarityReport::load(run.input(input)?)?;
            let dir = run.ctx.resolve(outdir);
            let outputs = render_similarity(&report, &dir)?
                .into_iter()
                .map(|path| Out { label: outdir.join(path.file_name().expect("named")).to_string_lossy().into_owned(), path })
                .collect::<Vec<_>>();
            return run.finish(&outputs);
        }
        RenderCmd::Heatmap { input, out, title } => (input, out, title, ColorScale::Sequential, "frequency"),
        RenderCmd::Diff { input, out, title } => (input, out, title, ColorScale::Diverging, "diff"),
        RenderCmd::Shared { input, out, title } => (input, out, title, ColorScale::Sequential, "shared"),
    };
    let grid = Grid::load(run.input(input)?)?;
    let kind = match grid.kind {
        GridKind::Frequency { .. } => "frequency",
        GridKind::Diff => "diff",
        GridKind::Shared { .. } => "shared",
    };
    if kind != expect {
        bail!("{} holds a {kind} grid, expected {expect}", input.display());
    }
    let default_title = match &grid.kind {
        GridKind::Frequency { total_tokens } => format!("Expert activation frequency ({total_tokens} tokens)"),
        GridKind::Diff => "Tuned minus base frequency".to_string(),
        GridKind::Shared { tau, n_languages } => format!("Languages with frequency >= {tau} (of {n_languages})"),
    };
    let spec = heatmap_from(grid, title.as_deref(), &default_title, scale);
    let out = run.output(out)?;
    render_heatmap(&spec, &out.path)?;
    run.finish(&[out])
}

/// Corpora and evaluation fixtures written by `gen-toy --corpus-dir`.
pub fn fixture_files(dir: &Path, setup: &ToySetup, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    let samples = |texts: &[String]| texts.iter().map(|t| Sample { text: t.clone() }).collect::<Vec<_>>();
    let data = bilingual_data(setup, seed);
    for (i, d) in data.iter().enumerate() {
        let tag = &d.language.tag;
        for (split, texts) in [("train", &d.train), ("profile", &d.profile), ("eval", &d.eval)] {
            let p = dir.join(format!("{tag}.{split}.jsonl"));
            write_jsonl(&p, &samples(texts))?;
            written.push(p);
        }
        let p = dir.join(format!("{tag}.mcq.jsonl"));
        write_jsonl(&p, &d.language.mcq_items(100, 5, seed.wrapping_mul(7).wrapping_add(i as u64)))?;
        written.push(p);
    }
    let p = dir.join("arith.gen.jsonl");
    write_jsonl(&p, &arithmetic_items(40, seed.wrapping_add(11)))?;
    written.push(p);
    // Tuning mixture: more of language A plus worked sums, so the tuned model
    // shifts its language-A expert usage.
    let mut tune = samples(&data[0].train);
    tune.extend(arithmetic_items(200, seed.wrapping_add(13)).into_iter().map(|g| Sample { text: format!("{}{}", g.prompt, g.answer) }));
    let p = dir.join("tune.jsonl");
    write_jsonl(&p, &tune)?;
    written.push(p);
    Ok(written)
}

fn gen_toy(mut run: Run, a: &GenToyArgs) -> Result<()> {
    run.seed("seed", a.seed);
    let mut setup = ToySetup::default();
    setup.model = ModelConfig {
        tie_embeddings: a.tie_embeddings,
        ..ModelConfig::new(a.layers, a.d_model, a.d_ff, a.heads, a.vocab, a.max_seq_len)
    };
    setup.max_tokens = setup.max_tokens.min(a.max_seq_len);
    let train_cfg = TrainConfig { steps: a.train_steps, learning_rate: a.learning_rate, seed: a.seed, ..setup.train.clone() };
    let tok = Tokenizer::byte_level();
    let encode = |texts: &[String], max: usize| texts.iter().map(|t| tok.encode_sample(t, max)).collect::<Vec<_>>();

    let mut outputs = Vec::new();
    let model = match &a.tune_from {
        Some(base) => {
            let mut model = load_model(run.input(base)?)?;
            let max = setup.max_tokens.min(model.config.max_seq_len);
            let mut texts = Vec::new();
            for p in &a.tune_data {
                texts.extend(read_corpus(run.input(p)?)?);
            }
            if a.train_steps > 0 {
                if texts.is_empty() {
                    bail!("--tune-from needs --tune-data with at least one sample");
                }
                train(&mut model, &encode(&texts, max), &train_cfg)?;
            }
            model
        }
        None => {
            setup.model.validate()?;
            let mut model = random_model(&setup.model, a.seed)?;
            if a.train_steps > 0 {
                tok.check_model_vocab(setup.model.vocab_size)?;
                let data = bilingual_data(&setup, a.seed);
                let texts: Vec<String> = data.iter().flat_map(|d| d.train.iter().cloned()).collect();
                train(&mut model, &encode(&texts, setup.max_tokens), &train_cfg)?;
            }
            model
        }
    };
    let out = run.output(&a.out)?;
    save_model(&model, &out.path)?;
    outputs.push(out);
    if let Some(dir) = &a.corpus_dir {
        for path in fixture_files(&run.ctx.resolve(dir), &setup, a.seed)? {
            let label = dir.join(path.file_name().expect("named")).to_string_lossy().into_owned();
            outputs.push(Out { label, path });
        }
    }
    run.finish(&outputs)
}
