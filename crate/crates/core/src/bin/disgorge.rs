use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use disgorge::bench::{frontier_plot_data, run_sweep, to_csv, SweepConfig};
use disgorge::dp::{account_epsilon, group_epsilon, DpConfig, DpHyper, GroupGuarantee};
use disgorge::engine::{DisgorgementRequest, Scope, SystemState};
use disgorge::ensemble::Aggregation;
use disgorge::filter::{filter_candidates, read_candidates, DistanceSpec, PNorm};
use disgorge::manifest::{ingest_csv, DataManifest};
use disgorge::sharding::{plan_shards, Strategy};
use disgorge::submodel::{LogisticHyper, ModelKind, RemovalMethod, SubModel, TrainSpec};
use disgorge::synth::{gaussian_blobs, BlobSpec};
use disgorge::workspace::{Workspace, WorkspaceError, WORKSPACE_ENV};

const EXIT_OPERATIONAL: u8 = 1;
const EXIT_VERIFICATION: u8 = 3;
const EXIT_LOCKED: u8 = 4;

#[derive(Parser)]
#[command(
    name = "disgorge",
    version,
    about = "Shard-compartmentalized training with certified data disgorgement",
    after_help = "Exit codes: 0 success, 1 operational error, 2 usage error, 3 verification failed, 4 workspace locked."
)]
struct Cli {
    /// Workspace directory.
    #[arg(short, long, global = true, env = WORKSPACE_ENV, default_value = ".")]
    workspace: PathBuf,
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ncm,
    Ridge,
    Logistic,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Ncm => ModelKind::Ncm,
            Kind::Ridge => ModelKind::Ridge,
            Kind::Logistic => ModelKind::Logistic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Distance {
    Geometric,
    Perceptual,
    Conceptual,
}

#[derive(clap::Args)]
struct LogisticArgs {
    /// SGD step size.
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    /// Passes over each shard.
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// L2 penalty.
    #[arg(long, default_value_t = 1e-3)]
    l2: f64,
    /// Minibatch size.
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

impl LogisticArgs {
    fn hyper(&self) -> LogisticHyper {
        LogisticHyper {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            l2: self.l2,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Import a manifest CSV into the workspace, creating it if needed.
    Ingest {
        /// CSV with header sample_id,source_id,label[,risk_weight],f0,...
        #[arg(long)]
        input: PathBuf,
        /// Number of classes (default: sidecar or max label + 1).
        #[arg(long)]
        num_classes: Option<usize>,
        /// Discard recorded disgorgement history.
        #[arg(long)]
        force: bool,
    },
    /// Partition the manifest into shards.
    Shard {
        /// uniform, source or risk.
        #[arg(long, default_value = "uniform")]
        strategy: Strategy,
        /// Number of shards S.
        #[arg(long)]
        num_shards: usize,
        /// Seed for the partition.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Discard recorded disgorgement history.
        #[arg(long)]
        force: bool,
    },
    /// Train one sub-model per shard and start a fresh audit log.
    Train {
        /// Sub-model kind.
        #[arg(long, value_enum)]
        kind: Kind,
        /// Ridge penalty.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[command(flatten)]
        logistic: LogisticArgs,
        /// uniform or topK.
        #[arg(long, default_value = "uniform")]
        aggregation: Aggregation,
        /// Base seed; each shard derives its own.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Discard recorded disgorgement history.
        #[arg(long)]
        force: bool,
    },
    /// Predict labels for the rows of a CSV (labels optional).
    Predict {
        /// CSV of samples to score (manifest schema, labels optional).
        #[arg(long)]
        input: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Accuracy and latency of the ensemble on a labelled CSV.
    Evaluate {
        /// Labelled CSV in manifest schema.
        #[arg(long)]
        input: PathBuf,
    },
    /// Remove data and its influence, issuing a certificate.
    Disgorge {
        /// sample:ID[,ID...], source:NAME or shard:N.
        #[arg(long)]
        scope: Scope,
        /// exact-retrain, instant, influence, shard-drop or dp-attestation.
        #[arg(long)]
        mode: RemovalMethod,
        /// Defaults to req-<sequence number>.
        #[arg(long)]
        request_id: Option<String>,
        /// Logical timestamp; defaults to the sequence number.
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// Show or verify a certificate.
    Certify {
        /// Request whose certificate to use.
        request_id: Option<String>,
        /// Certificate file to use instead of a request id.
        #[arg(long, conflicts_with = "request_id")]
        certificate: Option<PathBuf>,
        /// Re-check the certificate against replayed state.
        #[arg(long)]
        verify: bool,
    },
    /// List the audit log, optionally validating and replaying it.
    Audit {
        /// Validate the hash chain and replay every request from the baseline.
        #[arg(long)]
        verify: bool,
    },
    /// Train one differentially private logistic model per shard.
    DpTrain {
        /// Noise multiplier.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Per-sample gradient clip norm.
        #[arg(long, default_value_t = 1.0)]
        clip: f64,
        /// Full-batch gradient steps.
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Target delta.
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        /// Gradient step size.
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
        /// L2 penalty.
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
        /// uniform or topK.
        #[arg(long, default_value = "uniform")]
        aggregation: Aggregation,
        /// Base seed for the noise; each shard derives its own.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Discard recorded disgorgement history.
        #[arg(long)]
        force: bool,
    },
    /// (epsilon, delta) of a DP training configuration.
    Account {
        /// Noise multiplier.
        #[arg(long)]
        sigma: f64,
        /// Full-batch gradient steps.
        #[arg(long)]
        steps: usize,
        /// Target delta.
        #[arg(long)]
        delta: f64,
        /// Report the guarantee for a group of this many samples.
        #[arg(long)]
        group_size: Option<usize>,
        /// Significance level for the membership test-power bound.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Reject candidates that lie within epsilon of a protected sample.
    Filter {
        /// Candidate CSV (manifest schema, labels optional).
        #[arg(long)]
        candidates: PathBuf,
        /// Protected manifest CSV (default: the workspace manifest).
        #[arg(long)]
        protected: Option<PathBuf>,
        /// Distance family.
        #[arg(long, value_enum, default_value_t = Distance::Geometric)]
        distance: Distance,
        /// p of the geometric norm: a number >= 1 or inf.
        #[arg(long, default_value = "2")]
        p: PNorm,
        /// Rejection threshold: candidates closer than this are rejected.
        #[arg(long)]
        epsilon: f64,
        /// Seed of the perceptual projection.
        #[arg(long, default_value_t = 0)]
        phi_seed: u64,
        /// Logistic model file for conceptual distance.
        #[arg(long)]
        psi_model: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sweep shard counts, strategies and model kinds; mark the Pareto frontier.
    Pareto {
        /// Dataset CSV (default: the workspace manifest).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Shard counts to sweep, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        shard_counts: Vec<usize>,
        /// Sharding strategies to sweep (uniform, source, risk).
        #[arg(long, value_delimiter = ',', default_value = "uniform")]
        strategies: Vec<Strategy>,
        /// Model kinds to sweep.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "ncm,ridge,logistic")]
        kinds: Vec<Kind>,
        /// Replicate seeds; each seeds the plan and training.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Fraction of the data held out for testing.
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        /// Seed of the train/test split.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[command(flatten)]
        logistic: LogisticArgs,
        /// Ridge penalty.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// uniform or topK.
        #[arg(long, default_value = "uniform")]
        aggregation: Aggregation,
        /// Write the sweep CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write two-column frontier plot data here.
        #[arg(long)]
        plot_output: Option<PathBuf>,
    },
    /// Write the built-in Gaussian-blob benchmark dataset.
    Synth {
        /// CSV path (a .meta.json sidecar is written beside it); stdout if absent.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Number of samples N.
        #[arg(long, default_value_t = 800)]
        num_samples: usize,
        /// Feature dimension d.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Number of classes K.
        #[arg(long, default_value_t = 4)]
        num_classes: usize,
        /// Scale of the class centers; larger is easier.
        #[arg(long, default_value_t = 1.0)]
        separation: f64,
        /// Number of distinct source ids.
        #[arg(long, default_value_t = 20)]
        num_sources: usize,
        /// Ratio of largest to smallest per-feature noise std.
        #[arg(long, default_value_t = disgorge::synth::ANISOTROPY)]
        anisotropy: f64,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

macro_rules! out {
    ($buf:expr, $($arg:tt)*) => {
        $buf.push_str(&format!($($arg)*))
    };
}

macro_rules! outln {
    ($buf:expr, $($arg:tt)*) => {{
        out!($buf, $($arg)*);
        $buf.push('\n');
    }};
}

enum Status {
    Ok,
    VerificationFailed,
}

fn usage(msg: impl std::fmt::Display) -> ! {
    Cli::command()
        .error(clap::error::ErrorKind::InvalidValue, msg)
        .exit()
}

fn write_or_print(out: &mut String, output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            out.push_str(text);
            Ok(())
        }
    }
}

fn print_json<T: Serialize>(out: &mut String, value: &T) {
    outln!(out, "{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn csv_line(fields: &[String]) -> String {
    fields.join(",") + "\n"
}

fn train_and_commit(
    ws: &mut Workspace,
    spec: TrainSpec,
    aggregation: Aggregation,
    seed: u64,
    force: bool,
) -> Result<SystemState> {
    let (m, plan) = ws.manifest_and_plan()?;
    let state = SystemState::build(m, plan, &spec, seed, aggregation)?;
    ws.commit_trained(&state, &spec, force)?;
    Ok(state)
}

fn run(cli: Cli, out: &mut String) -> Result<Status> {
    let root = cli.workspace.as_path();
    let fmt = cli.format;
    match cli.command {
        Command::Synth {
            output,
            num_samples,
            dim,
            num_classes,
            separation,
            num_sources,
            anisotropy,
            seed,
        } => {
            if num_samples == 0 || dim == 0 || num_classes == 0 {
                usage("--num-samples, --dim and --num-classes must be positive");
            }
            if !(anisotropy >= 1.0 && anisotropy.is_finite()) {
                usage("--anisotropy must be a finite number >= 1");
            }
            let m = gaussian_blobs(&BlobSpec {
                num_samples,
                dim,
                num_classes,
                separation,
                num_sources,
                anisotropy,
                seed,
            })?;
            match output {
                Some(p) => {
                    m.save(&p)?;
                    if fmt == Format::Json {
                        print_json(out, &m.meta());
                    } else {
                        outln!(out, "wrote {} samples to {}", m.len(), p.display());
                    }
                }
                None => out!(out, "{}", m.to_csv_string()),
            }
        }
        Command::Ingest {
            input,
            num_classes,
            force,
        } => {
            let m = ingest_csv(&input, num_classes)?;
            let ws = Workspace::init(root)?;
            let _lock = ws.lock()?;
            ws.ingest(&m, force)?;
            match fmt {
                Format::Json => print_json(out, &m.meta()),
                Format::Csv => out!(out, 
                    "{}",
                    csv_line(&["num_records,dim,num_classes,manifest_hash".into()])
                        + &csv_line(&[
                            m.len().to_string(),
                            m.dim().to_string(),
                            m.num_classes().to_string(),
                            m.manifest_hash().to_hex()
                        ])
                ),
                Format::Text => outln!(out, 
                    "ingested {} samples (d={}, K={}), manifest {}",
                    m.len(),
                    m.dim(),
                    m.num_classes(),
                    m.manifest_hash()
                ),
            }
        }
        Command::Shard {
            strategy,
            num_shards,
            seed,
            force,
        } => {
            let ws = Workspace::open(root)?;
            let _lock = ws.lock()?;
            let m = ws.manifest()?;
            let plan = plan_shards(&m, strategy, num_shards, seed)?;
            ws.save_plan(&plan, force)?;
            match fmt {
                Format::Json => print_json(out, &plan.meta()),
                Format::Csv => out!(out, "{}", plan.to_table()),
                Format::Text => {
                    let sizes: Vec<String> = plan.shards.iter().map(|s| s.len().to_string()).collect();
                    outln!(out, 
                        "{} shards ({strategy}, seed {seed}), sizes [{}], plan {}",
                        plan.num_shards(),
                        sizes.join(", "),
                        plan.digest()
                    );
                }
            }
        }
        Command::Train {
            kind,
            lambda,
            logistic,
            aggregation,
            seed,
            force,
        } => {
            let spec = match kind {
                Kind::Ncm => TrainSpec::Ncm,
                Kind::Ridge => TrainSpec::Ridge { lambda },
                Kind::Logistic => TrainSpec::Logistic(logistic.hyper()),
            };
            let mut ws = Workspace::open(root)?;
            let _lock = ws.lock()?;
            let state = train_and_commit(&mut ws, spec.clone(), aggregation, seed, force)?;
            report_training(out, fmt, &state, &spec, None);
        }
        Command::DpTrain {
            sigma,
            clip,
            steps,
            delta,
            learning_rate,
            l2,
            aggregation,
            seed,
            force,
        } => {
            let config = DpConfig {
                clip_norm: clip,
                noise_multiplier: sigma,
                steps,
                full_batch: true,
                delta,
                seed,
            };
            let account = account_epsilon(&config)?;
            let spec = TrainSpec::DpLogistic {
                hyper: DpHyper { learning_rate, l2 },
                config,
            };
            let mut ws = Workspace::open(root)?;
            let _lock = ws.lock()?;
            let state = train_and_commit(&mut ws, spec.clone(), aggregation, seed, force)?;
            report_training(out, fmt, &state, &spec, Some(&account));
        }
        Command::Predict { input, output } => {
            let ws = Workspace::open(root)?;
            let state = ws.state()?;
            let rows = read_candidates(&input)?;
            let k = state.ensemble.num_classes();
            let mut preds = Vec::with_capacity(rows.len());
            for r in &rows {
                let p = state
                    .ensemble
                    .predict(&r.features)
                    .with_context(|| format!("row `{}`", r.candidate_id))?;
                preds.push((r.candidate_id.clone(), p));
            }
            let text = if fmt == Format::Json {
                let items: Vec<_> = preds
                    .iter()
                    .map(|(id, p)| {
                        json!({"sample_id": id, "label": p.label(), "probabilities": p.probabilities, "contributors": p.contributors})
                    })
                    .collect();
                serde_json::to_string_pretty(&items)? + "\n"
            } else {
                let mut header = vec!["sample_id".to_string(), "label".into()];
                header.extend((0..k).map(|c| format!("p{c}")));
                header.push("contributors".into());
                let mut out = csv_line(&header);
                for (id, p) in &preds {
                    let mut row = vec![id.clone(), p.label().to_string()];
                    row.extend(p.probabilities.iter().map(|v| v.to_string()));
                    let who: Vec<String> = p.contributors.iter().map(|c| c.to_string()).collect();
                    row.push(who.join(";"));
                    out.push_str(&csv_line(&row));
                }
                out
            };
            write_or_print(out, output.as_deref(), &text)?;
        }
        Command::Evaluate { input } => {
            let ws = Workspace::open(root)?;
            let state = ws.state()?;
            let test = ingest_csv(&input, Some(state.ensemble.num_classes()))?;
            let e = state.ensemble.evaluate(&test)?;
            match fmt {
                Format::Json => print_json(out, &e),
                Format::Csv => out!(out, 
                    "accuracy,mean_latency_members,num_samples\n{},{},{}\n",
                    e.accuracy, e.mean_latency_members, e.num_samples
                ),
                Format::Text => outln!(out, 
                    "accuracy {:.4} on {} samples, {:.2} members consulted per prediction",
                    e.accuracy, e.num_samples, e.mean_latency_members
                ),
            }
        }
        Command::Disgorge {
            scope,
            mode,
            request_id,
            timestamp,
        } => {
            let ws = Workspace::open(root)?;
            let _lock = ws.lock()?;
            let seq = ws.history_len()? as u64 + 1;
            let id = request_id.unwrap_or_else(|| format!("req-{seq}"));
            let request = DisgorgementRequest::new(id, scope, mode, timestamp.unwrap_or(seq));
            let cert = ws.disgorge(&request)?;
            match fmt {
                Format::Json => print_json(out, &cert),
                Format::Csv => out!(out, 
                    "request_id,kind,mode,disgorged,cost,state_digest\n{},{:?},{},{},{},{}\n",
                    cert.request_id,
                    cert.kind,
                    cert.mode,
                    cert.disgorged.len(),
                    cert.cost,
                    cert.state_digest
                ),
                Format::Text => {
                    outln!(out, 
                        "{}: {:?} certificate for {} sample(s) via {}, cost {} gradient-evals",
                        cert.request_id,
                        cert.kind,
                        cert.disgorged.len(),
                        cert.mode,
                        cert.cost
                    );
                    if cert.is_vacuous() {
                        outln!(out, "warning: the group privacy guarantee is vacuous");
                    }
                    outln!(out, "state {}", cert.state_digest);
                    outln!(out, "certificate {}", ws.certificate_path(&cert.request_id).display());
                }
            }
        }
        Command::Certify {
            request_id,
            certificate,
            verify,
        } => {
            if request_id.is_none() && certificate.is_none() {
                usage("give a request id or --certificate PATH");
            }
            let ws = Workspace::open(root)?;
            let cert = match (request_id, certificate) {
                (Some(id), None) => ws.certificate(&id)?,
                (None, Some(path)) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                _ => usage("give a request id or --certificate PATH"),
            };
            if !verify {
                match fmt {
                    Format::Json => print_json(out, &cert),
                    _ => outln!(out, "{}", cert.to_json_line()),
                }
                return Ok(Status::Ok);
            }
            let check = ws.verify_certificate(&cert)?;
            let v = &check.verification;
            match fmt {
                Format::Json => print_json(out, &check),
                Format::Csv => out!(out, 
                    "request_id,ok,reason,detail\n{},{},{},\"{}\"\n",
                    check.request_id,
                    v.ok,
                    v.reason.map(|r| r.to_string()).unwrap_or_default(),
                    v.detail.replace('"', "\"\"")
                ),
                Format::Text => match v.reason {
                    None => outln!(out, "{}: certificate verified ({})", check.request_id, v.detail),
                    Some(r) => outln!(out, "{}: verification FAILED [{r}] {}", check.request_id, v.detail),
                },
            }
            if !v.ok {
                return Ok(Status::VerificationFailed);
            }
        }
        Command::Audit { verify } => {
            let ws = Workspace::open(root)?;
            if verify {
                let check = ws.verify_audit()?;
                let v = &check.verification;
                match fmt {
                    Format::Json => print_json(out, &check),
                    _ => match v.reason {
                        None => outln!(out, "audit log verified: {} entries, head {} ({})", check.entries, check.head_hash, v.detail),
                        Some(r) => outln!(out, "audit verification FAILED [{r}] {}", v.detail),
                    },
                }
                if !v.ok {
                    return Ok(Status::VerificationFailed);
                }
                return Ok(Status::Ok);
            }
            let log = ws.audit_log()?;
            match fmt {
                Format::Json => out!(out, "{}", log.to_ndjson()),
                _ => {
                    out!(out, "seq,request_id,mode,scope,cost,escalations,state_digest,entry_hash\n");
                    for e in log.entries() {
                        let r = &e.record;
                        let (id, mode, scope) = match &r.request {
                            Some(q) => (q.request_id.clone(), q.mode.to_string(), q.scope.to_string()),
                            None => ("genesis".into(), String::new(), String::new()),
                        };
                        outln!(out, 
                            "{},{},{},\"{}\",{},{},{},{}",
                            r.seq,
                            id,
                            mode,
                            scope,
                            r.cost,
                            r.escalations.len(),
                            r.state_digest,
                            e.entry_hash
                        );
                    }
                }
            }
        }
        Command::Account {
            sigma,
            steps,
            delta,
            group_size,
            alpha,
        } => {
            let account = account_epsilon(&DpConfig {
                noise_multiplier: sigma,
                steps,
                delta,
                ..DpConfig::default()
            })?;
            let power = account.test_power_bound(alpha)?;
            let group = group_size.map(|k| (k, group_epsilon(account.epsilon, account.delta, k)));
            match fmt {
                Format::Json => print_json(out, &json!({
                    "epsilon": account.epsilon,
                    "delta": account.delta,
                    "rho": account.rho,
                    "steps": steps,
                    "sigma": sigma,
                    "alpha": alpha,
                    "test_power_bound": power,
                    "group": group.map(|(k, g)| json!({"size": k, "guarantee": g})),
                })),
                Format::Csv => {
                    out!(out, "epsilon,delta,rho,steps,sigma,alpha,test_power_bound");
                    if group.is_some() {
                        out!(out, ",group_size,group_epsilon,group_delta,group_vacuous");
                    }
                    out.push('\n');
                    out!(out, 
                        "{},{},{},{steps},{sigma},{alpha},{power}",
                        account.epsilon, account.delta, account.rho
                    );
                    match group {
                        Some((k, GroupGuarantee::Bounded { epsilon, delta })) => out!(out, ",{k},{epsilon},{delta},false"),
                        Some((k, GroupGuarantee::Vacuous)) => out!(out, ",{k},,,true"),
                        None => {}
                    }
                    out.push('\n');
                }
                Format::Text => {
                    outln!(out, 
                        "epsilon={:.6} delta={} rho={} (steps={steps}, sigma={sigma})",
                        account.epsilon, account.delta, account.rho
                    );
                    outln!(out, "membership test power at alpha={alpha} is at most {power:.6}");
                    match group {
                        Some((k, GroupGuarantee::Bounded { epsilon, delta })) => {
                            outln!(out, "group of {k}: epsilon={epsilon:.6} delta={delta:e}")
                        }
                        Some((k, GroupGuarantee::Vacuous)) => outln!(out, "group of {k}: VACUOUS (delta >= 1)"),
                        None => {}
                    }
                }
            }
        }
        Command::Filter {
            candidates,
            protected,
            distance,
            p,
            epsilon,
            phi_seed,
            psi_model,
            output,
        } => {
            let protected: DataManifest = match protected {
                Some(path) => ingest_csv(&path, None)?,
                None => Workspace::open(root)?.manifest()?,
            };
            let spec = match distance {
                Distance::Geometric => DistanceSpec::geometric(p, epsilon),
                Distance::Perceptual => DistanceSpec::perceptual(phi_seed, epsilon),
                Distance::Conceptual => {
                    let Some(path) = psi_model else {
                        usage("--distance conceptual needs --psi-model PATH");
                    };
                    match SubModel::load(&path)? {
                        SubModel::Logistic(m) => DistanceSpec::conceptual(m, epsilon),
                        other => bail!("{} holds a {} model; conceptual distance needs a logistic one", path.display(), other.kind()),
                    }
                }
            };
            let report = filter_candidates(&read_candidates(&candidates)?, &protected, &spec)?;
            let text = match fmt {
                Format::Json => serde_json::to_string_pretty(&report)? + "\n",
                _ => report.to_csv(),
            };
            write_or_print(out, output.as_deref(), &text)?;
        }
        Command::Pareto {
            input,
            shard_counts,
            strategies,
            kinds,
            seeds,
            test_fraction,
            split_seed,
            logistic,
            lambda,
            aggregation,
            output,
            plot_output,
        } => {
            let data = match input {
                Some(path) => ingest_csv(&path, None)?,
                None => Workspace::open(root)?.manifest()?,
            };
            let cfg = SweepConfig {
                shard_counts,
                strategies,
                kinds: kinds.into_iter().map(ModelKind::from).collect(),
                seeds,
                test_fraction,
                split_seed,
                logistic: logistic.hyper(),
                ridge_lambda: lambda,
                aggregation,
            };
            let points = run_sweep(&data, &cfg)?;
            let text = match fmt {
                Format::Json => serde_json::to_string_pretty(&points)? + "\n",
                _ => to_csv(&points),
            };
            write_or_print(out, output.as_deref(), &text)?;
            if let Some(p) = plot_output {
                fs::write(&p, frontier_plot_data(&points)).with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    Ok(Status::Ok)
}

fn report_training(out: &mut String, fmt: Format, state: &SystemState, spec: &TrainSpec, account: Option<&disgorge::dp::PrivacyAccount>) {
    let cost: u64 = state.plan.shards.iter().map(|s| spec.training_cost(s.len())).sum();
    let digest = state.digest();
    match fmt {
        Format::Json => print_json(out, &json!({
            "members": state.ensemble.len(),
            "kind": spec.kind().to_string(),
            "samples": state.manifest.len(),
            "cost": cost,
            "state_digest": digest,
            "privacy": account,
        })),
        Format::Csv => {
            out!(out, "members,kind,samples,cost,state_digest");
            if account.is_some() {
                out!(out, ",epsilon,delta");
            }
            out.push('\n');
            out!(out, 
                "{},{},{},{cost},{digest}",
                state.ensemble.len(),
                spec.kind(),
                state.manifest.len()
            );
            if let Some(a) = account {
                out!(out, ",{},{}", a.epsilon, a.delta);
            }
            out.push('\n');
        }
        Format::Text => {
            outln!(out, 
                "trained {} {} member(s) on {} samples, cost {cost} gradient-evals",
                state.ensemble.len(),
                spec.kind(),
                state.manifest.len()
            );
            if let Some(a) = account {
                outln!(out, "each member is ({:.6}, {})-DP", a.epsilon, a.delta);
            }
            outln!(out, "state {digest}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = String::new();
    let result = run(cli, &mut out);
    if let Err(e) = std::io::stdout().lock().write_all(out.as_bytes()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: writing output: {e}");
            return ExitCode::from(EXIT_OPERATIONAL);
        }
    }
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::VerificationFailed) => ExitCode::from(EXIT_VERIFICATION),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<WorkspaceError>() {
                Some(WorkspaceError::Locked(_)) => EXIT_LOCKED,
                Some(w) if w.is_verification_failure() => EXIT_VERIFICATION,
                _ => EXIT_OPERATIONAL,
            };
            ExitCode::from(code)
        }
    }
}
