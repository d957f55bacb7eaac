mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use handbf_core::contour::{
    fit_coefficients, normalize_contour, render_contour, to_amplitude_phase, to_svg, ContourCoefficients, PolarContour,
};
use handbf_core::dataset::{feature_sd, parse_dataset, standardize};
use handbf_core::elicit::{elicit_priors, ElicitOptions, SigmaRule};
use handbf_core::evidence::{bayes_factor, model_comparison_bf, EvidenceSettings};
use handbf_core::experiments::{
    mahalanobis_matrix, run_different_writer_study, run_same_writer_study, run_subsample_sensitivity, run_sweep,
    StudyConfig, SweepParameter,
};
use handbf_core::models::ModelId;
use handbf_core::synth::{generate_population, PopulationConfig, Reps};
use handbf_core::{Dataset, Error, ErrorKind};

use config::UsageError;

#[derive(Parser)]
#[command(name = "handbf", version, about = "Bayes factors for multivariate handwriting features")]
#[command(args_override_self = true)]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Flat `key = value` settings file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic writer population.
    Synth(SynthArgs),
    /// Elicit prior hyperparameters from background data.
    Elicit(ElicitArgs),
    /// Render or fit Fourier contour descriptions.
    Contour(ContourArgs),
    /// Bayes factor for questioned and control data sharing a writer.
    Evidence(EvidenceArgs),
    /// Bayes factor between two models for one writer's data.
    CompareModels(CompareArgs),
    /// Same-writer, different-writer or background-subsampling study.
    Study(StudyArgs),
    /// Prior sensitivity sweep over nu or eta.
    Sweep(SweepArgs),
    /// Writer-to-writer Mahalanobis distances.
    Mahalanobis(MahalanobisArgs),
}

fn parse_model(s: &str) -> std::result::Result<ModelId, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Dataset CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth JSON (default: `<out stem>.truth.json`).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 13)]
    writers: usize,
    #[arg(long, default_value_t = 30)]
    reps: usize,
    #[arg(long, default_value_t = 4)]
    characters: usize,
    /// Generate every writer independently.
    #[arg(long)]
    no_related: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SigmaRuleArg {
    Printed,
    SampleSd,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct PriorArgs {
    /// Inverse-Wishart degrees of freedom (default: p + 2).
    #[arg(long)]
    nu: Option<f64>,
    /// LKJ shape.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Fixed k0 for M1 instead of the grid search.
    #[arg(long)]
    k0: Option<f64>,
    /// Fixed diagonal of K0 for M4, comma separated.
    #[arg(long, value_delimiter = ',')]
    k0_diag: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = SigmaRuleArg::Printed)]
    sigma_rule: SigmaRuleArg,
    #[arg(long, default_value_t = 0.25)]
    sigma_min: f64,
}

impl PriorArgs {
    fn options(&self) -> ElicitOptions {
        ElicitOptions {
            nu: self.nu,
            eta: self.eta,
            k0: self.k0,
            k0_diag: self.k0_diag.clone(),
            sigma_rule: match self.sigma_rule {
                SigmaRuleArg::Printed => SigmaRule::Printed,
                SigmaRuleArg::SampleSd => SigmaRule::SampleSd,
            },
            sigma_min: self.sigma_min,
            ..ElicitOptions::default()
        }
    }
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct McArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Post burn-in draws per chain.
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 1000)]
    burn_in: usize,
    #[arg(long, default_value_t = 1)]
    chains: usize,
    /// Random-walk steps per sweep for the LKJ models.
    #[arg(long, default_value_t = 5)]
    mh_steps: usize,
    /// Independent sampler-plus-bridge repetitions per marginal.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Symmetrized (warped) bridge proposal.
    #[arg(long)]
    warp: bool,
}

impl McArgs {
    fn settings(&self, prior: &PriorArgs) -> EvidenceSettings {
        let mut s = EvidenceSettings {
            runs: self.runs,
            elicit: prior.options(),
            seed: self.seed,
            ..EvidenceSettings::default()
        };
        s.sampler.iterations = self.iterations;
        s.sampler.burn_in = self.burn_in;
        s.sampler.chains = self.chains;
        s.sampler.mh_steps = self.mh_steps;
        s.sampler.seed = self.seed;
        s.bridge.warp = self.warp;
        s
    }
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct ElicitArgs {
    #[arg(long, value_parser = parse_model)]
    model: ModelId,
    #[arg(long)]
    background: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    prior: PriorArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ContourAction {
    Render,
    Fit,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct ContourArgs {
    #[arg(value_enum)]
    #[serde(skip)]
    action: ContourAction,
    /// Coefficients JSON to render.
    #[arg(long)]
    coeffs: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    points: usize,
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Two-column `phi,r` CSV of the rendered contour.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 200.0)]
    size: f64,
    /// `phi,r` samples to fit.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    harmonics: usize,
    /// Rescale the contour to unit area before fitting.
    #[arg(long)]
    normalize: bool,
    /// Fitted coefficients JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct EvidenceArgs {
    #[arg(long, value_parser = parse_model)]
    model: ModelId,
    #[arg(long)]
    questioned: PathBuf,
    #[arg(long)]
    control: PathBuf,
    #[arg(long)]
    background: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    #[serde(flatten)]
    mc: McArgs,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct CompareArgs {
    /// One writer's data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    background: PathBuf,
    #[arg(long, value_parser = parse_model)]
    model_l: ModelId,
    #[arg(long, value_parser = parse_model)]
    model_xi: ModelId,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    #[serde(flatten)]
    mc: McArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum StudyKindArg {
    SameWriter,
    DifferentWriter,
    Subsample,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct StudyArgs {
    #[arg(value_enum)]
    #[serde(skip)]
    kind: StudyKindArg,
    #[arg(long)]
    data: PathBuf,
    /// Models, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_model, default_value = "M1,M2,M3,M4,M5,M6")]
    model: Vec<ModelId>,
    /// Random splits per writer or writer pair.
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Also fit the Normal models to each character separately.
    #[arg(long)]
    per_character: bool,
    #[arg(long, default_value_t = 0.35)]
    pi_min: f64,
    #[arg(long, default_value_t = 0.65)]
    pi_max: f64,
    /// Writer pairs `a-b` for the subsampling study (default: closest pairs).
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<String>,
    #[arg(long, default_value_t = 4)]
    hard_pairs: usize,
    #[arg(long, default_value_t = 0.5)]
    subsample_fraction: f64,
    #[arg(long)]
    without_replacement: bool,
    #[arg(long, default_value_t = 30)]
    subsample_iterations: usize,
    /// Case CSV; JSON and summary files are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    #[serde(flatten)]
    mc: McArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SweepArg {
    Nu,
    Eta,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct SweepArgs {
    #[arg(value_enum)]
    #[serde(skip)]
    parameter: SweepArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_model, default_value = "M1,M2,M3,M4,M5,M6")]
    model: Vec<ModelId>,
    /// Swept values, comma separated (default: 11,20,30,40,50 or 1,2,5,10,20).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<String>,
    #[arg(long, default_value_t = 4)]
    hard_pairs: usize,
    #[arg(long, default_value_t = 10)]
    subsamples: usize,
    #[arg(long, default_value_t = 0.5)]
    subsample_fraction: f64,
    #[arg(long)]
    without_replacement: bool,
    /// Point CSV; JSON and summary files are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    #[serde(flatten)]
    mc: McArgs,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct MahalanobisArgs {
    #[arg(long)]
    data: PathBuf,
    /// Distance matrix CSV.
    #[arg(long)]
    out: PathBuf,
    /// Number of closest pairs to print.
    #[arg(long, default_value_t = 4)]
    closest: usize,
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_dataset(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_resolved(out: &Path, header: &str, args: &impl Serialize) -> Result<()> {
    write(&sibling(out, ".resolved.conf"), config::render(header, args)?)
}

fn json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn parse_pairs(pairs: &[String]) -> Result<Vec<(u64, u64)>> {
    pairs
        .iter()
        .map(|p| {
            let (a, b) = p
                .split_once('-')
                .ok_or_else(|| UsageError(format!("writer pair `{p}` must look like `3-7`")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| UsageError(format!("bad writer id in pair `{p}`")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

fn pairs_or_closest(data: &Dataset, pairs: &[String], k: usize) -> Result<Vec<(u64, u64)>> {
    if !pairs.is_empty() {
        return parse_pairs(pairs);
    }
    let pairs = mahalanobis_matrix(data)?.closest_pairs(k);
    log::info!("closest writer pairs {pairs:?}");
    Ok(pairs)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = PopulationConfig {
        writers: a.writers,
        characters: a.characters,
        reps: Reps::Fixed(a.reps),
        seed: a.seed,
        ..PopulationConfig::default()
    };
    if a.no_related {
        cfg.related.clear();
    } else {
        cfg.related.retain(|r| r.writer <= a.writers);
    }
    let (data, truth) = generate_population(&cfg)?;
    write(&a.out, data.to_csv()?)?;
    let truth_path = a.truth.clone().unwrap_or_else(|| sibling(&a.out, ".truth.json"));
    write(&truth_path, json(&truth)?)?;
    write_resolved(&a.out, "synth", a)
}

#[derive(Serialize)]
struct ElicitOutput {
    model: ModelId,
    /// Background feature SDs the hyperparameters are expressed against.
    feature_sd: Vec<f64>,
    hyper: handbf_core::models::PriorHyper,
}

fn elicit(a: &ElicitArgs) -> Result<()> {
    let bg = read_dataset(&a.background)?;
    let scaled = standardize(&bg, &bg)?;
    let hyper = elicit_priors(a.model, &scaled, &a.prior.options())?;
    let out = ElicitOutput {
        model: a.model,
        feature_sd: feature_sd(&bg).to_vec(),
        hyper,
    };
    write(&a.out, json(&out)?)?;
    write_resolved(&a.out, "elicit", a)
}

fn read_polar_csv(path: &Path) -> Result<PolarContour> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let samples = r
        .deserialize::<(f64, f64)>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(PolarContour::new(samples)?)
}

#[derive(Serialize)]
struct FitOutput {
    coefficients: ContourCoefficients,
    amplitude_phase: handbf_core::contour::AmplitudePhase,
    surface_size: Option<f64>,
}

fn contour(a: &ContourArgs) -> Result<()> {
    match a.action {
        ContourAction::Render => {
            let Some(path) = &a.coeffs else {
                bail!(UsageError("contour render needs --coeffs".into()));
            };
            if a.svg.is_none() && a.csv.is_none() {
                bail!(UsageError("contour render needs --svg or --csv".into()));
            }
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let c: ContourCoefficients = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let c = ContourCoefficients::new(c.a0, c.pairs)?;
            let pc = render_contour(&c, a.points)?;
            if let Some(svg) = &a.svg {
                write(svg, to_svg(&pc, a.size))?;
            }
            if let Some(csv_path) = &a.csv {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["phi", "r"])?;
                for (phi, r) in pc.samples() {
                    w.serialize((phi, r))?;
                }
                write(csv_path, w.into_inner()?)?;
            }
            let anchor = a.svg.as_ref().or(a.csv.as_ref()).expect("checked above");
            write_resolved(anchor, "contour render", a)
        }
        ContourAction::Fit => {
            let (Some(samples), Some(out)) = (&a.samples, &a.out) else {
                bail!(UsageError("contour fit needs --samples and --out".into()));
            };
            let mut pc = read_polar_csv(samples)?;
            let mut surface_size = None;
            if a.normalize {
                let (n, s) = normalize_contour(&pc)?;
                pc = n;
                surface_size = Some(s);
            }
            let c = fit_coefficients(&pc, a.harmonics)?;
            let output = FitOutput {
                amplitude_phase: to_amplitude_phase(&c),
                coefficients: c,
                surface_size,
            };
            write(out, json(&output)?)?;
            write_resolved(out, "contour fit", a)
        }
    }
}

fn evidence(a: &EvidenceArgs) -> Result<()> {
    let q = read_dataset(&a.questioned)?;
    let c = read_dataset(&a.control)?;
    let bg = read_dataset(&a.background)?;
    let result = bayes_factor(a.model, &q, &c, &bg, &a.mc.settings(&a.prior))?;
    println!(
        "{}: log BF {:.4} ({})",
        result.model, result.log_bf, result.band
    );
    write(&a.out, json(&result)?)?;
    write_resolved(&a.out, "evidence", a)
}

fn compare(a: &CompareArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let bg = read_dataset(&a.background)?;
    let result = model_comparison_bf(&data, &bg, a.model_l, a.model_xi, &a.mc.settings(&a.prior))?;
    println!("log BF {} vs {}: {:.4}", a.model_l, a.model_xi, result.log_bf);
    write(&a.out, json(&result)?)?;
    write_resolved(&a.out, "compare-models", a)
}

fn study_config(models: &[ModelId], prior: &PriorArgs, mc: &McArgs) -> StudyConfig {
    StudyConfig {
        models: models.to_vec(),
        seed: mc.seed,
        evidence: mc.settings(prior),
        ..StudyConfig::default()
    }
}

fn study(a: &StudyArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let cfg = StudyConfig {
        per_character: a.per_character,
        repetitions: a.reps,
        pi_range: (a.pi_min, a.pi_max),
        subsample_fraction: a.subsample_fraction,
        subsample_with_replacement: !a.without_replacement,
        subsample_iterations: a.subsample_iterations,
        ..study_config(&a.model, &a.prior, &a.mc)
    };
    let (header, table) = match a.kind {
        StudyKindArg::SameWriter | StudyKindArg::DifferentWriter => {
            let (report, header) = if matches!(a.kind, StudyKindArg::SameWriter) {
                (run_same_writer_study(&data, &cfg)?, "study same-writer")
            } else {
                (run_different_writer_study(&data, &cfg)?, "study different-writer")
            };
            write(&a.out, report.to_csv()?)?;
            write(&sibling(&a.out, ".json"), json(&report)?)?;
            (header, report.table())
        }
        StudyKindArg::Subsample => {
            let pairs = pairs_or_closest(&data, &a.pairs, a.hard_pairs)?;
            let report = run_subsample_sensitivity(&data, &cfg, &pairs)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["questioned", "control", "model", "scope", "reference_log_bf", "subsample", "log_bf"])?;
            for c in &report.cases {
                let reference = c.reference_log_bf.map(|r| r.to_string()).unwrap_or_default();
                for (k, b) in c.log_bfs.iter().enumerate() {
                    w.write_record([
                        c.questioned_writer.to_string(),
                        c.control_writer.to_string(),
                        c.model.to_string(),
                        c.scope.to_string(),
                        reference.clone(),
                        k.to_string(),
                        b.to_string(),
                    ])?;
                }
            }
            write(&a.out, w.into_inner()?)?;
            write(&sibling(&a.out, ".json"), json(&report)?)?;
            ("study subsample", report.table())
        }
    };
    print!("{table}");
    write(&sibling(&a.out, ".summary.txt"), &table)?;
    write_resolved(&a.out, header, a)
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let mut cfg = StudyConfig {
        sweep_subsamples: a.subsamples,
        subsample_fraction: a.subsample_fraction,
        subsample_with_replacement: !a.without_replacement,
        ..study_config(&a.model, &a.prior, &a.mc)
    };
    let (parameter, header) = match a.parameter {
        SweepArg::Nu => (SweepParameter::Nu, "sweep nu"),
        SweepArg::Eta => (SweepParameter::Eta, "sweep eta"),
    };
    if let Some(v) = &a.values {
        match parameter {
            SweepParameter::Nu => cfg.nu_values = v.clone(),
            SweepParameter::Eta => cfg.eta_values = v.clone(),
        }
    }
    cfg.models.retain(|m| match parameter {
        SweepParameter::Nu => m.family() != handbf_core::models::PriorFamily::Lkj,
        SweepParameter::Eta => m.family() == handbf_core::models::PriorFamily::Lkj,
    });
    let pairs = pairs_or_closest(&data, &a.pairs, a.hard_pairs)?;
    let report = run_sweep(&data, &cfg, &pairs, parameter)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &report.points {
        w.serialize(p)?;
    }
    write(&a.out, w.into_inner()?)?;
    write(&sibling(&a.out, ".json"), json(&report)?)?;
    let table = report.table();
    print!("{table}");
    write(&sibling(&a.out, ".summary.txt"), &table)?;
    write_resolved(&a.out, header, a)
}

fn mahalanobis(a: &MahalanobisArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let m = mahalanobis_matrix(&data)?;
    write(&a.out, m.to_csv()?)?;
    for (x, y) in m.closest_pairs(a.closest) {
        println!("{x}-{y}");
    }
    write_resolved(&a.out, "mahalanobis", a)
}

/// Parses argv, splicing config-file entries in ahead of the user's own
/// flags so the latter win.
fn parse_cli(argv: Vec<OsString>) -> Result<Cli> {
    let first = Cli::try_parse_from(&argv)?;
    let Some(path) = &first.config else {
        return Ok(first);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let entries = config::parse(&text)?;
    let mut cmd = Cli::command();
    cmd.build();
    let name = first_subcommand(&cmd, &argv).ok_or_else(|| UsageError("missing subcommand".into()))?;
    let sub = cmd.find_subcommand(&name).expect("subcommand parsed");
    let injected = config::to_args(sub, &entries)?;
    let at = argv
        .iter()
        .position(|a| a.to_str() == Some(name.as_str()))
        .expect("subcommand present")
        + 1;
    let mut spliced = argv[..at].to_vec();
    // positional arguments must stay ahead of the injected options
    let mut rest = argv[at..].iter().peekable();
    while let Some(a) = rest.peek() {
        if a.to_string_lossy().starts_with('-') {
            break;
        }
        spliced.push(rest.next().expect("peeked").clone());
    }
    spliced.extend(injected.into_iter().map(OsString::from));
    spliced.extend(rest.cloned());
    let cli = Cli::command().try_get_matches_from(spliced)?;
    Ok(Cli::from_arg_matches(&cli)?)
}

fn first_subcommand(cmd: &clap::Command, argv: &[OsString]) -> Option<String> {
    argv.iter().skip(1).find_map(|a| {
        let a = a.to_str()?;
        cmd.get_subcommands()
            .find(|s| s.get_name() == a)
            .map(|s| s.get_name().to_string())
    })
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Cmd::Synth(a) => synth(a),
        Cmd::Elicit(a) => elicit(a),
        Cmd::Contour(a) => contour(a),
        Cmd::Evidence(a) => evidence(a),
        Cmd::CompareModels(a) => compare(a),
        Cmd::Study(a) => study(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Mahalanobis(a) => mahalanobis(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<clap::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match parse_cli(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<clap::Error>() {
                let _ = ce.print();
                return if ce.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
            }
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("worker pool already initialized: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
