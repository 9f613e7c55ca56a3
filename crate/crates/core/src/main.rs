use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use fetaldbm::morphometry::Stack4d;
use fetaldbm::pipeline::cohort::{records_path, stats_files, template_files};
use fetaldbm::pipeline::layout::CohortLayout;
use fetaldbm::pipeline::report::emit_report;
use fetaldbm::pipeline::simulate::simulate_cohort;
use fetaldbm::pipeline::subject::{
    dbm_files, register_files, run_subject_until, segment_file, srrecon_files, volumetry_files, RegistrationOutputs,
};
use fetaldbm::pipeline::{run_cohort, PipelineConfig, Timepoint, UnitStatus};
use fetaldbm::record::read_cohort_csv;
use fetaldbm::{Error, Result};

#[derive(Parser)]
#[command(name = "fetaldbm", version, about = "Longitudinal ventricle DBM for fetal MRI")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured worker count.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CohortArgs {
    /// Cohort table; defaults to `<data>/cohort.csv`.
    #[arg(long)]
    cohort_csv: Option<PathBuf>,
    /// Directory holding one sub-directory of inputs per subject.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tp {
    Pre,
    Post,
}

#[derive(Subcommand)]
enum Command {
    /// Simulates a phantom cohort (stacks, masks, ground truth, cohort.csv).
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Super-resolution reconstruction of orthogonal stacks.
    Srrecon {
        #[arg(long, num_args = 1.., required = true)]
        stacks: Vec<PathBuf>,
        /// Image whose grid the reconstruction uses (e.g. the brain mask).
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Classic ventricle segmentation.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Post→pre registration chain on normalized images.
    Register {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        pre_labels: PathBuf,
        #[arg(long)]
        post_labels: PathBuf,
        /// Output directory for rigid.json, affine.json, field.nii.gz, registration.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Log-Jacobian and daily enlargement map from a deformation field.
    Dbm {
        #[arg(long)]
        field: PathBuf,
        /// Pre-operative ventricle labels on the field grid.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        delta_days: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ventricle volumes and daily growth from two label files.
    Volumetry {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        ga_pre: f64,
        #[arg(long)]
        ga_post: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Builds a template from the normalized images of a processed cohort.
    Template {
        #[command(flatten)]
        cohort: CohortArgs,
        #[arg(long, value_enum)]
        timepoint: Tp,
    },
    /// Runs the four voxelwise analyses on a stacked cohort.
    Stats {
        #[arg(long)]
        out: PathBuf,
        /// Records in stack order; defaults to the cohort's records.csv.
        #[arg(long)]
        cohort_csv: Option<PathBuf>,
    },
    /// Runs the subject flow for one subject of the cohort table.
    RunSubject {
        #[command(flatten)]
        cohort: CohortArgs,
        #[arg(long)]
        subject: String,
        /// Stop after this stage.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Runs every subject, the templates, the analyses and the report.
    RunCohort {
        #[command(flatten)]
        cohort: CohortArgs,
    },
    /// Regenerates the report of a processed cohort.
    Report {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cohort_records(a: &CohortArgs) -> Result<Vec<fetaldbm::record::SubjectRecord>> {
    read_cohort_csv(a.cohort_csv.clone().unwrap_or_else(|| a.data.join("cohort.csv")))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Simulate { out } => {
            let records = simulate_cohort(&cfg, &out)?;
            println!("simulated {} subjects; cohort table at {}", records.len(), out.join("cohort.csv").display());
        }
        Command::Srrecon { stacks, reference, out, report } => {
            let report = report.unwrap_or_else(|| out.with_extension("").with_extension("json"));
            print_json(&srrecon_files(&stacks, &reference, &cfg.sr, &out, &report)?)?;
        }
        Command::Segment { input, mask, out } => {
            segment_file(&input, &mask, &cfg.segmentation, &out)?;
        }
        Command::Register { pre, post, pre_labels, post_labels, out } => {
            std::fs::create_dir_all(&out)?;
            let paths = ["rigid.json", "affine.json", "field.nii.gz", "registration.json"].map(|f| out.join(f));
            let outputs = RegistrationOutputs { rigid: &paths[0], affine: &paths[1], field: &paths[2], report: &paths[3] };
            print_json(&register_files(&pre, &post, &pre_labels, &post_labels, &cfg, &outputs)?)?;
        }
        Command::Dbm { field, labels, delta_days, out } => {
            std::fs::create_dir_all(&out)?;
            let p = |f: &str| out.join(f);
            print_json(&dbm_files(&field, &labels, delta_days, &p("logjac.nii.gz"), &p("daily_logjac.nii.gz"), &p("dbm.json"))?)?;
        }
        Command::Volumetry { pre, post, ga_pre, ga_post, out } => {
            print_json(&volumetry_files(&pre, &post, ga_pre, ga_post, &out)?)?;
        }
        Command::Template { cohort, timepoint } => {
            let tp = match timepoint {
                Tp::Pre => Timepoint::Pre,
                Tp::Post => Timepoint::Post,
            };
            print_json(&template_files(&cohort_records(&cohort)?, tp, &cfg, &cohort.data, &cohort.out)?)?;
        }
        Command::Stats { out, cohort_csv } => {
            let layout = CohortLayout::new(&out);
            let records = read_cohort_csv(cohort_csv.unwrap_or_else(|| records_path(&out)))?;
            let stack = Stack4d::read(layout.stack(), layout.stack_order())?;
            print_json(&stats_files(&stack, &records, &cfg, &out)?)?;
        }
        Command::RunSubject { cohort, subject, stage } => {
            let records = cohort_records(&cohort)?;
            let record = records
                .iter()
                .find(|r| r.subject_id == subject)
                .ok_or_else(|| Error::InvalidInput(format!("subject {subject} is not in the cohort table")))?;
            let outcome = run_subject_until(record, &cfg, &cohort.data, &cohort.out, stage.as_deref())?;
            println!("{}: {:?}", outcome.record.subject_id, outcome.status);
            if let Some(e) = &outcome.error {
                error!("{e}");
            }
            return Ok(outcome.status != UnitStatus::Failed);
        }
        Command::RunCohort { cohort } => {
            let outcome = run_cohort(&cohort_records(&cohort)?, &cfg, &cohort.data, &cohort.out)?;
            for s in &outcome.subjects {
                println!("{}: {:?}{}", s.record.subject_id, s.status, s.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default());
            }
            for p in &outcome.stats {
                match (&p.error, p.min_p) {
                    (Some(e), _) => println!("{}: not run ({e})", p.predictor),
                    (None, Some(min_p)) => println!("{}: min FWER p {min_p:.4}, {} voxels below {}", p.predictor, p.significant_voxels, p.alpha),
                    (None, None) => println!("{}: no result", p.predictor),
                }
            }
            return Ok(outcome.failed() == 0);
        }
        Command::Report { data, out } => {
            for p in emit_report(&data, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
