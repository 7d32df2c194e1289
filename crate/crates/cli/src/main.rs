//! `ucap`: format simulated removable media, do host I/O through a simulated
//! mediator, replay attacks, serve the coordination service and run
//! scenario scripts.
//!
//! Keys come from a deterministic fixture (`--seed`), so separate
//! invocations with the same seed act as the same mediator.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ucap_core::cs::{CsClient, CsServer, CsStore, RootRegistry};
use ucap_core::image::{authorize_rsd, format_file, AdsLayout, FormatOptions, RsdId, RsdImage};
use ucap_core::integrity::{init_session, AccessError, BlockReason, CrashPoint, IntegritySession};
use ucap_core::merkle::Digest;
use ucap_core::pki::{Certificate, RootSignature};
use ucap_core::provision::{Fixture, CS_TOKEN};
use ucap_core::scenario::{run, Scenario};
use ucap_core::trace::{parse_log, render_report, write_log};

#[derive(Parser)]
#[command(
    name = "ucap",
    version,
    about = "Simulated USB mediator with authenticated storage"
)]
struct Cli {
    /// Seed for the CA, formatter and mediator keys.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CsArgs {
    /// Coordination service address; without it rollback goes unnoticed.
    #[arg(long)]
    cs: Option<String>,
    /// Writer token presented to the coordination service.
    #[arg(long, default_value = CS_TOKEN)]
    token: String,
}

#[derive(Args, Clone)]
#[group(required = true, multiple = false)]
struct DataArgs {
    /// Block contents as hex, zero padded to a block.
    #[arg(long)]
    hex: Option<String>,
    /// Block contents as text, zero padded to a block.
    #[arg(long)]
    text: Option<String>,
    /// Fill the block with one byte value (hex).
    #[arg(long)]
    fill: Option<String>,
    /// Read block contents from a file, zero padded to a block.
    #[arg(long)]
    file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Create a medium in the empty state.
    Format {
        image: PathBuf,
        /// Host-visible blocks; the tree rounds up to a power of two.
        #[arg(long)]
        blocks: u64,
        /// Block size in bytes (512 or 4096).
        #[arg(long, default_value_t = 512)]
        bs: u32,
        /// Medium id, registered with the coordination service.
        #[arg(long)]
        id: Option<String>,
        /// Blocks left in front of host block 0 inside the secure partition.
        #[arg(long, default_value_t = 1)]
        shift: u32,
    },
    /// Read a host block through the mediator.
    HostRead {
        image: PathBuf,
        #[arg(long)]
        lba: u64,
        /// Print hex instead of raw bytes.
        #[arg(long)]
        hex: bool,
        #[command(flatten)]
        cs: CsArgs,
    },
    /// Write a host block through the mediator and flush.
    HostWrite {
        image: PathBuf,
        #[arg(long)]
        lba: u64,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cs: CsArgs,
    },
    /// Write to the medium behind the mediator's back.
    RawWrite {
        image: PathBuf,
        /// Host block to overwrite (mapped to its physical block).
        #[arg(long, conflicts_with = "offset")]
        lba: Option<u64>,
        /// Absolute byte offset into the image.
        #[arg(long)]
        offset: Option<u64>,
        /// XOR the byte at the target with this value (hex) instead of writing data.
        #[arg(long)]
        xor: Option<String>,
        #[arg(long)]
        hex: Option<String>,
        #[arg(long)]
        text: Option<String>,
    },
    /// Run an attack end to end on a medium and report whether it was caught.
    Attack {
        #[arg(value_enum)]
        kind: AttackKind,
        image: PathBuf,
        /// Host block the attack targets.
        #[arg(long, default_value_t = 0)]
        lba: u64,
        /// Where power is lost for `crash`: after-data, after-nodes or after-signature.
        #[arg(long, default_value = "after-nodes", value_parser = parse_crash_point)]
        point: CrashPoint,
        #[command(flatten)]
        cs: CsArgs,
    },
    /// Coordination service.
    Cs {
        #[command(subcommand)]
        command: CsCommand,
    },
    /// Render an event trace log as a timeline with counts.
    Report { trace: PathBuf },
    /// Run scenario scripts; exit 0 iff all pass.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Write the event trace of the last scenario here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Show the layout and signatures of a medium without verifying it.
    Inspect { image: PathBuf },
}

#[derive(Subcommand)]
enum CsCommand {
    /// Serve until killed.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7450")]
        listen: String,
        /// Append-only log of registered roots.
        #[arg(long)]
        state: PathBuf,
        /// Accepted writer tokens.
        #[arg(long = "token", default_values_t = [CS_TOKEN.to_owned()])]
        tokens: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    /// Flip a bit of a written block on the raw medium, then read it.
    Tamper,
    /// Snapshot, write, restore the snapshot, then reopen.
    Rollback,
    /// Lose power during a flush, then reopen and read.
    Crash,
}

fn parse_crash_point(s: &str) -> Result<CrashPoint, String> {
    CrashPoint::from_token(s)
        .ok_or_else(|| "expected after-data, after-nodes or after-signature".into())
}

/// Why a command did not succeed.
enum Failure {
    /// The mediator refused: tamper, rollback or another block.
    Detected(String),
    /// Bad input or environment.
    Usage(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let fixture = Fixture::from_seed(cli.seed);
    match dispatch(cli.command, &fixture) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Detected(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command, fixture: &Fixture) -> CmdResult {
    match command {
        Command::Format {
            image,
            blocks,
            bs,
            id,
            shift,
        } => format(fixture, &image, blocks, bs, id, shift),
        Command::HostRead {
            image,
            lba,
            hex,
            cs,
        } => {
            let mut s = open_session(fixture, RsdImage::open(&image)?, &cs)?;
            let data = s.protected_read(lba).map_err(access_failure)?;
            let mut out = io::stdout().lock();
            if hex {
                writeln!(out, "{}", hex::encode(&data))?;
            } else {
                out.write_all(&data)?;
            }
            Ok(())
        }
        Command::HostWrite {
            image,
            lba,
            data,
            cs,
        } => {
            let mut s = open_session(fixture, RsdImage::open(&image)?, &cs)?;
            let block = data.block(s.block_size())?;
            s.protected_write(lba, &block).map_err(access_failure)?;
            s.close()
                .map_err(|(e, _)| Failure::Detected(format!("flush failed: {e}")))?;
            Ok(())
        }
        Command::RawWrite {
            image,
            lba,
            offset,
            xor,
            hex,
            text,
        } => raw_write(&image, lba, offset, xor, hex, text),
        Command::Attack {
            kind,
            image,
            lba,
            point,
            cs,
        } => match kind {
            AttackKind::Tamper => attack_tamper(fixture, &image, lba, &cs),
            AttackKind::Rollback => attack_rollback(fixture, &image, lba, &cs),
            AttackKind::Crash => attack_crash(fixture, &image, lba, point, &cs),
        },
        Command::Cs {
            command:
                CsCommand::Serve {
                    listen,
                    state,
                    tokens,
                },
        } => {
            let store = CsStore::open(
                state,
                tokens,
                fixture.ca.public_key(),
                fixture.revocation_list(),
            )?;
            let server = CsServer::bind(listen.as_str(), Arc::new(store))?;
            println!("listening on {}", server.local_addr()?);
            io::stdout().flush()?;
            server.serve()?;
            Ok(())
        }
        Command::Report { trace } => {
            let text = fs::read_to_string(&trace)?;
            let events = parse_log(&text)?;
            print!("{}", render_report(&events));
            Ok(())
        }
        Command::Run { scenarios, trace } => run_scenarios(&scenarios, trace.as_deref()),
        Command::Inspect { image } => inspect(&image),
    }
}

impl DataArgs {
    fn block(&self, block_size: usize) -> Result<Vec<u8>, Failure> {
        let mut bytes = if let Some(h) = &self.hex {
            hex::decode(h)?
        } else if let Some(t) = &self.text {
            t.as_bytes().to_vec()
        } else if let Some(f) = &self.fill {
            let b = u8::from_str_radix(f, 16)?;
            vec![b; block_size]
        } else if let Some(p) = &self.file {
            fs::read(p)?
        } else {
            return Err(Failure::Usage("no block contents given".into()));
        };
        if bytes.len() > block_size {
            return Err(Failure::Usage(format!(
                "{} bytes do not fit a {block_size}-byte block",
                bytes.len()
            )));
        }
        bytes.resize(block_size, 0);
        Ok(bytes)
    }
}

fn format(
    fixture: &Fixture,
    path: &Path,
    blocks: u64,
    bs: u32,
    id: Option<String>,
    shift: u32,
) -> CmdResult {
    let id = match id {
        Some(id) => id,
        None => path
            .file_stem()
            .and_then(|s| s.to_str())
            .filter(|s| RsdId::new(s).is_ok())
            .unwrap_or("rsd")
            .to_owned(),
    };
    let mut opts = FormatOptions::new(RsdId::new(&id)?, blocks, bs);
    opts.shift = shift;
    let mut image = format_file(path, &opts, &fixture.formatter)?;
    let layout = authorize_rsd(&mut image)?;
    println!(
        "formatted {} as {id}: {} host blocks of {bs} bytes, tree of {} leaves, {} bytes",
        path.display(),
        layout.visible(),
        layout.leaves(),
        image.byte_len()
    );
    Ok(())
}

fn registry(cs: &CsArgs) -> Result<Option<Arc<dyn RootRegistry>>, Failure> {
    match &cs.cs {
        None => Ok(None),
        Some(addr) => Ok(Some(Arc::new(CsClient::new(
            addr.as_str(),
            Some(&cs.token),
        )?))),
    }
}

fn open_session(
    fixture: &Fixture,
    mut image: RsdImage,
    cs: &CsArgs,
) -> Result<IntegritySession, Failure> {
    let layout =
        authorize_rsd(&mut image).map_err(|e| Failure::Detected(format!("NOT AUTHORIZED: {e}")))?;
    init_session(
        image,
        layout,
        &mut fixture.anchor(),
        fixture.mediator.clone(),
        registry(cs)?,
    )
    .map_err(|r| blocked(r.reason, &r.detail))
}

fn blocked(reason: BlockReason, detail: &str) -> Failure {
    match reason {
        BlockReason::RollbackDetected => Failure::Detected(format!("ROLLBACK DETECTED: {detail}")),
        other => Failure::Detected(format!("BLOCKED ({other}): {detail}")),
    }
}

fn access_failure(e: AccessError) -> Failure {
    match e {
        AccessError::TamperDetected(_) => Failure::Detected(e.to_string()),
        other => Failure::Usage(other.to_string()),
    }
}

fn parse_hex_byte(s: &str) -> Result<u8, Failure> {
    u8::from_str_radix(s.trim_start_matches("0x"), 16)
        .map_err(|_| Failure::Usage(format!("bad hex byte {s}")))
}

fn raw_write(
    path: &Path,
    lba: Option<u64>,
    offset: Option<u64>,
    xor: Option<String>,
    hex_data: Option<String>,
    text: Option<String>,
) -> CmdResult {
    let mut image = RsdImage::open(path)?;
    let at = match (lba, offset) {
        (Some(lba), None) => {
            let layout = authorize_rsd(&mut image)?;
            layout.physical_block(lba) * image.block_size() as u64
        }
        (None, Some(off)) => off,
        _ => {
            return Err(Failure::Usage(
                "give exactly one of --lba or --offset".into(),
            ))
        }
    };
    let data = match (xor, hex_data, text) {
        (Some(x), None, None) => {
            let mut b = [0u8; 1];
            image.read_at(at, &mut b)?;
            vec![b[0] ^ parse_hex_byte(&x)?]
        }
        (None, Some(h), None) => hex::decode(h)?,
        (None, None, Some(t)) => t.into_bytes(),
        _ => {
            return Err(Failure::Usage(
                "give exactly one of --xor, --hex or --text".into(),
            ))
        }
    };
    image.write_at(at, &data)?;
    image.sync()?;
    println!("wrote {} bytes at offset {at}", data.len());
    Ok(())
}

fn attack_tamper(fixture: &Fixture, path: &Path, lba: u64, cs: &CsArgs) -> CmdResult {
    let mut s = open_session(fixture, RsdImage::open(path)?, cs)?;
    let block = vec![0x5a; s.block_size()];
    s.protected_write(lba, &block).map_err(access_failure)?;
    let mut image = s
        .close()
        .map_err(|(e, _)| Failure::Usage(format!("flush failed: {e}")))?;
    let layout = authorize_rsd(&mut image)?;
    let at = layout.physical_block(lba) * image.block_size() as u64;
    image.write_at(at, &[0x5b])?;
    image.sync()?;
    println!("flipped one bit of host block {lba} on the raw medium");
    let mut s = open_session(fixture, image, cs)?;
    match s.protected_read(lba) {
        Ok(_) => {
            println!("tampered block served");
            Ok(())
        }
        Err(e) => Err(access_failure(e)),
    }
}

fn attack_rollback(fixture: &Fixture, path: &Path, lba: u64, cs: &CsArgs) -> CmdResult {
    let mut s = open_session(fixture, RsdImage::open(path)?, cs)?;
    s.protected_write(lba, &vec![0x01; s.block_size()])
        .map_err(access_failure)?;
    let mut image = s
        .close()
        .map_err(|(e, _)| Failure::Usage(format!("flush failed: {e}")))?;
    let snapshot = image.to_bytes()?;
    println!("snapshot taken");
    let mut s = open_session(fixture, image, cs)?;
    s.protected_write(lba, &vec![0x02; s.block_size()])
        .map_err(access_failure)?;
    let mut image = s
        .close()
        .map_err(|(e, _)| Failure::Usage(format!("flush failed: {e}")))?;
    image.overwrite(&snapshot)?;
    image.sync()?;
    println!("medium restored to the snapshot");
    let mut s = open_session(fixture, image, cs)?;
    let data = s.protected_read(lba).map_err(access_failure)?;
    println!(
        "rollback accepted, host block {lba} reads {:02x} again{}",
        data[0],
        if cs.cs.is_none() {
            " (no coordination service)"
        } else {
            ""
        }
    );
    Ok(())
}

fn attack_crash(
    fixture: &Fixture,
    path: &Path,
    lba: u64,
    point: CrashPoint,
    cs: &CsArgs,
) -> CmdResult {
    let mut s = open_session(fixture, RsdImage::open(path)?, cs)?;
    let block = vec![0xc7; s.block_size()];
    s.protected_write(lba, &block).map_err(access_failure)?;
    let image = s.crash(point);
    println!("power lost {}", point.token());
    let mut s = open_session(fixture, image, cs)?;
    let data = s.protected_read(lba).map_err(access_failure)?;
    if data == block {
        println!("write was committed");
    } else {
        println!("write was lost");
    }
    Ok(())
}

fn run_scenarios(paths: &[PathBuf], trace: Option<&Path>) -> CmdResult {
    let mut parsed = Vec::new();
    for p in paths {
        let s = Scenario::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        parsed.push((p, s));
    }
    let mut failed = 0;
    let mut last_trace = Vec::new();
    for (p, s) in &parsed {
        let outcome = run(s);
        match &outcome.failure {
            None => println!(
                "PASS {} ({} steps, {} expectations)",
                p.display(),
                outcome.steps_run,
                outcome.expectations_checked
            ),
            Some(f) => {
                failed += 1;
                println!("FAIL {} line {}: {}", p.display(), f.line, f.message);
            }
        }
        last_trace = outcome.trace;
    }
    if let Some(t) = trace {
        fs::write(t, write_log(&last_trace))?;
    }
    if failed > 0 {
        return Err(Failure::Detected(format!(
            "{failed} of {} scenarios failed",
            parsed.len()
        )));
    }
    Ok(())
}

fn inspect(path: &Path) -> CmdResult {
    let mut image = RsdImage::open(path)?;
    let h = image.header().clone();
    println!(
        "medium {}: {} blocks of {} bytes",
        h.rsd_id, h.total_blocks, h.block_size
    );
    for p in image.partition_table()?.entries() {
        println!(
            "  {:<7} blocks {}..{}",
            p.kind.to_string(),
            p.start,
            p.end()
        );
    }
    let layout: AdsLayout = authorize_rsd(&mut image)?;
    let a = layout.header();
    println!(
        "tree: {} leaves, {} host blocks, shift {}",
        a.leaves, a.visible, a.shift
    );
    let mut root = [0u8; 32];
    image.read_at(layout.nodes_offset(), &mut root)?;
    println!("stored root  {}", Digest::from_bytes(root));
    let mut slot = vec![0u8; (layout.certificate_offset() - layout.signature_offset()) as usize];
    image.read_at(layout.signature_offset(), &mut slot)?;
    match RootSignature::from_slot(&slot) {
        Ok(sig) => println!("signed root  {}", sig.root()),
        Err(e) => println!("signature    unreadable: {e}"),
    }
    let mut cert = vec![0u8; 256];
    image.read_at(layout.certificate_offset(), &mut cert)?;
    match Certificate::from_slot(&cert) {
        Ok(c) => println!(
            "certificate  {} ({:?}, serial {})",
            c.subject_id(),
            c.role(),
            c.serial()
        ),
        Err(e) => println!("certificate  unreadable: {e}"),
    }
    Ok(())
}
