//! The `iccs` command line: runs the system manager and the three process
//! kinds, and offers small operator tools (`ctl`, `watch`, `inject`).

use std::io::Write;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use iccs_core::conduit::{Client, ObjectRef};
use iccs_core::kernel::{boot, BootOptions, Configurable, Host, Lifecycle, Scope};
use iccs_core::registry::{load_config, Category, FacilityConfig, RegistryClient};
use iccs_core::statusmon::MonitorSpec;
use iccs_core::supervisory::{Update, UpdateBody};
use iccs_core::sysman::{Central, CommandLauncher, InProcessLauncher, Launcher, SysmanClient, SysmanOptions, SYSMAN_OBJECT};
use iccs_core::{Error, Result};
use iccs_gateway::GatewaySettings;
use serde_json::Value;

use crate::templates::{demo_panels, template_for, templates};

#[derive(Debug, Parser)]
#[command(name = "iccs", version, about = "Run and operate an ICCS facility")]
pub struct Cli {
    /// System manager address (host:port). Defaults to the config's, or 127.0.0.1:7000.
    #[arg(long, global = true)]
    pub sysman: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ProcessArgs {
    #[arg(long)]
    pub name: String,
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start the system manager and launch the facility.
    Sysman {
        #[arg(long)]
        config: PathBuf,
        /// Relaunch processes that fail.
        #[arg(long)]
        restart: bool,
        /// Run every process as a thread of this one instead of a child.
        #[arg(long)]
        in_process: bool,
        #[arg(long, default_value_t = 500)]
        heartbeat_ms: u64,
        /// Show child output.
        #[arg(long)]
        verbose: bool,
    },
    /// Run one front-end processor.
    Fep(ProcessArgs),
    /// Run one supervisor.
    Supervisor(ProcessArgs),
    /// Run one operator gateway.
    Gateway {
        #[command(flatten)]
        process: ProcessArgs,
        #[arg(long)]
        http: Option<u16>,
    },
    /// Invoke a method: `ctl <name|ref://...> <method> [json-args]`.
    Ctl {
        target: String,
        method: String,
        #[arg(default_value = "null")]
        args: String,
    },
    /// Monitor a device field and print each status report as a JSON line.
    Watch {
        device: String,
        field: String,
        #[arg(long, default_value_t = 0.0)]
        precision: f64,
        #[arg(long, default_value_t = 100)]
        latency: u64,
        /// Stop after this many reports.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Inject a fault into a running process, e.g. `{"crash":true}`.
    Inject { process: String, fault: String },
}

const DEFAULT_SYSMAN: &str = "127.0.0.1:7000";

fn sysman_addr(flag: &Option<String>, config: Option<&FacilityConfig>) -> String {
    flag.clone()
        .or_else(|| config.map(|c| c.sysman.addr()))
        .unwrap_or_else(|| DEFAULT_SYSMAN.to_string())
}

fn parse_json(what: &str, text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::bad_args(format!("{what} is not JSON: {e}")))
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string(v).unwrap_or_default());
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sysman {
            config,
            restart,
            in_process,
            heartbeat_ms,
            verbose,
        } => run_sysman(config, restart, in_process, heartbeat_ms, verbose),
        Command::Fep(p) => run_process(Category::Fep, p, None, &cli.sysman),
        Command::Supervisor(p) => run_process(Category::Supervisor, p, None, &cli.sysman),
        Command::Gateway { process, http } => run_process(Category::Gateway, process, http, &cli.sysman),
        Command::Ctl { target, method, args } => {
            let registry = RegistryClient::at(&sysman_addr(&cli.sysman, None))?;
            let r = if target.starts_with("ref://") {
                target.parse::<ObjectRef>()?
            } else {
                registry.resolve(&target)?
            };
            print_json(&Client::to_ref(r).invoke(&method, parse_json("args", &args)?)?);
            Ok(())
        }
        Command::Watch {
            device,
            field,
            precision,
            latency,
            count,
        } => watch(&sysman_addr(&cli.sysman, None), &device, &field, precision, latency, count),
        Command::Inject { process, fault } => {
            let registry = RegistryClient::at(&sysman_addr(&cli.sysman, None))?;
            let sysman = SysmanClient::new(
                registry.registry_ref().with_object(SYSMAN_OBJECT)?,
                Default::default(),
            )?;
            print_json(&sysman.inject(&process, parse_json("fault", &fault)?)?);
            Ok(())
        }
    }
}

fn run_sysman(config: PathBuf, restart: bool, in_process: bool, heartbeat_ms: u64, verbose: bool) -> Result<()> {
    let cfg = load_config(&config)?;
    let launcher: Arc<dyn Launcher> = if in_process {
        Arc::new(InProcessLauncher::new(templates(), BootOptions::default()))
    } else {
        let program = std::env::current_exe().map_err(|e| Error::app(e.to_string()))?;
        let mut l = CommandLauncher::new(program, &config);
        l.inherit_output = verbose;
        Arc::new(l)
    };
    let central = Central::start(
        cfg,
        SysmanOptions {
            heartbeat: Duration::from_millis(heartbeat_ms.max(1)),
            restart,
            ..SysmanOptions::default()
        },
        Some(launcher),
    )?;
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(|e| Error::app(e.to_string()))?;
    log::info!("system manager at {}", central.registry_ref().addr());
    let launched = central.launch();
    if let Err(e) = &launched {
        log::error!("launch halted: {e}");
    } else {
        for r in central.states() {
            log::info!("{} {}", r.name, r.state.as_str());
        }
    }
    let _ = rx.recv();
    central.shutdown_all(Duration::from_secs(3));
    central.stop();
    launched
}

fn run_process(category: Category, p: ProcessArgs, http: Option<u16>, sysman: &Option<String>) -> Result<()> {
    let cfg = load_config(&p.config)?;
    let mut spec = cfg
        .process(&p.name)
        .cloned()
        .ok_or_else(|| Error::bad_args(format!("no process {:?} in {}", p.name, p.config.display())))?;
    if spec.category != category {
        return Err(Error::bad_args(format!("{} is a {:?}, not a {category:?}", p.name, spec.category)));
    }
    if http.is_some() {
        spec.http_port = http;
    }
    let registry = RegistryClient::at(&sysman_addr(sysman, Some(&cfg)))?;
    let settings = GatewaySettings {
        panels: demo_panels(),
        ..GatewaySettings::default()
    };
    let template = template_for(&spec, &settings)?;
    let options = BootOptions {
        // A crash fault ends the process without any orderly reporting.
        on_crash: Some(Arc::new(|| std::process::exit(1))),
        ..BootOptions::default()
    };
    let handle = boot(template, &registry.registry_ref(), options)?;
    match handle.wait() {
        Lifecycle::Crashed => Err(Error::app(format!("{} crashed", p.name))),
        _ => Ok(()),
    }
}

fn watch(sysman: &str, device: &str, field: &str, precision: f64, latency: u64, count: Option<u64>) -> Result<()> {
    let registry = RegistryClient::at(sysman)?;
    let target = Client::to_ref(registry.resolve(device)?);
    let host = Host::bind(&format!("watch_{}", std::process::id()), "127.0.0.1", 0)?;
    let (tx, rx) = mpsc::channel();
    let tx = parking_lot::Mutex::new(tx);
    host.add_object(
        Configurable::builder("watcher", "watcher", Scope::Distributed)
            .method("update", move |v| {
                let u: Update = iccs_core::kernel::args(v)?;
                if let UpdateBody::Report(r) = u.body {
                    let _ = tx.lock().send(r);
                }
                Ok(Value::Null)
            })
            .build(),
    );
    host.start(1);
    let spec = MonitorSpec {
        field: field.to_string(),
        precision,
        latency_ms: latency,
        subscriber: host.object_ref("watcher")?,
    };
    spec.validate()?;
    let started = target.invoke("begin_monitoring", serde_json::to_value(&spec)?)?;
    let mut seen = 0;
    let mut out = std::io::stdout().lock();
    while count.is_none_or(|n| seen < n) {
        let Ok(r) = rx.recv() else { break };
        let line = serde_json::to_string(&r)?;
        if writeln!(out, "{line}").and_then(|_| out.flush()).is_err() {
            break;
        }
        seen += 1;
    }
    let _ = target.invoke("end_monitoring", serde_json::json!({"monitor": started["monitor"]}));
    host.kill();
    Ok(())
}
