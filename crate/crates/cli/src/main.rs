//! `mog`: multi-order-graph tooling. Subcommands cover the symbolic side
//! (simulate, check, dump) and the numeric side (train, eval, ablate-pe,
//! gate-trace).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use mog_cli::{
    load_config, run_ablate_pe, run_check, run_dump, run_eval, run_gate_trace, run_simulate,
    run_train, CliError,
};
use mog_core::checks::CheckSuite;
use mog_core::sim::Regime;
use mog_core::Precision;

const USAGE: &str = "\
mog - multi-order-graph analysis and Graph-Transformer training

usage:
  mog train --config PATH
  mog eval --ckpt PATH --data STEM [--beam K] [--alpha A]
  mog ablate-pe --config PATH
  mog gate-trace --ckpt PATH --data STEM
  mog simulate --regime san|rnn|split --layers N --len L [--format json|csv]
  mog check [--suite all|gate|bilinear|fourpart|distlaw] [--seeds N]
            [--format json|text] [--precision f64|f32]
  mog dump --expr TEXT | --file PATH

notes:
  - corpora are aligned plain-text files STEM.src / STEM.tgt, one sentence
    per line, whitespace tokenized
  - check suites also accept the aliases eq10 (gate), eq13 (bilinear),
    eq14 (fourpart)
  - dump expressions use the grammar: (E)->v U (E)->v with leaves {token}
";

struct Flags {
    values: BTreeMap<String, String>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags, CliError> {
        let mut values = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let key = &args[i];
            if !key.starts_with("--") {
                return Err(CliError::Usage(format!("unexpected argument '{key}'")));
            }
            let Some(value) = args.get(i + 1) else {
                return Err(CliError::Usage(format!("flag {key} needs a value")));
            };
            values.insert(key[2..].to_string(), value.clone());
            i += 2;
        }
        Ok(Flags { values })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<String, CliError> {
        self.take(key)
            .ok_or_else(|| CliError::Usage(format!("missing --{key}")))
    }

    fn finish(self) -> Result<(), CliError> {
        if let Some(k) = self.values.keys().next() {
            return Err(CliError::Usage(format!("unknown flag --{k}")));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(name: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("bad value for --{name}: '{v}'")))
}

fn dispatch(cmd: &str, rest: &[String]) -> Result<bool, CliError> {
    let mut flags = Flags::parse(rest)?;
    match cmd {
        "train" => {
            let config = load_config(&PathBuf::from(flags.require("config")?))?;
            flags.finish()?;
            let mut progress = |r: &mog_core::train::MetricsRecord| {
                println!(
                    "step {:>6}  loss {:.4}  lr {:.2e}  token_acc {:.4}  seq_acc {:.4}  bleu {:.2}",
                    r.step, r.loss, r.lr, r.token_acc, r.seq_acc, r.bleu
                );
            };
            let artifacts = run_train(&config, Some(&mut progress))?;
            println!(
                "done at step {}: wrote {}, {}, {}",
                artifacts.out.final_step,
                artifacts.metrics_path.display(),
                artifacts.manifest_path.display(),
                artifacts.checkpoint_path.display()
            );
            Ok(true)
        }
        "eval" => {
            let ckpt = PathBuf::from(flags.require("ckpt")?);
            let data = flags.require("data")?;
            let beam: usize = parse_num("beam", &flags.take("beam").unwrap_or("1".into()))?;
            let alpha: f64 = parse_num("alpha", &flags.take("alpha").unwrap_or("0".into()))?;
            flags.finish()?;
            print!("{}", run_eval(&ckpt, &data, beam, alpha)?);
            Ok(true)
        }
        "ablate-pe" => {
            let config = load_config(&PathBuf::from(flags.require("config")?))?;
            flags.finish()?;
            let mut progress = |kind: mog_core::nn::PositionKind,
                                r: &mog_core::train::MetricsRecord| {
                println!(
                    "[{}] step {:>6}  loss {:.4}  token_acc {:.4}  seq_acc {:.4}",
                    kind.name(),
                    r.step,
                    r.loss,
                    r.token_acc,
                    r.seq_acc
                );
            };
            let (csv, path) = run_ablate_pe(&config, Some(&mut progress))?;
            print!("{csv}");
            println!("wrote {}", path.display());
            Ok(true)
        }
        "gate-trace" => {
            let ckpt = PathBuf::from(flags.require("ckpt")?);
            let data = flags.require("data")?;
            flags.finish()?;
            print!("{}", run_gate_trace(&ckpt, &data)?);
            Ok(true)
        }
        "simulate" => {
            let regime = match flags.require("regime")?.as_str() {
                "san" => Regime::San,
                "rnn" => Regime::Rnn,
                "split" => Regime::Split,
                other => {
                    return Err(CliError::Usage(format!("unknown regime '{other}'")));
                }
            };
            let layers: u32 = parse_num("layers", &flags.require("layers")?)?;
            let len: u32 = parse_num("len", &flags.require("len")?)?;
            let format = flags.take("format").unwrap_or("json".into());
            flags.finish()?;
            print!("{}", run_simulate(regime, layers, len, &format)?);
            Ok(true)
        }
        "check" => {
            let suite_name = flags.take("suite").unwrap_or("all".into());
            let suite = CheckSuite::parse(&suite_name)
                .ok_or_else(|| CliError::Usage(format!("unknown suite '{suite_name}'")))?;
            let seeds: u64 = parse_num("seeds", &flags.take("seeds").unwrap_or("20".into()))?;
            let format = flags.take("format").unwrap_or("json".into());
            let precision = match flags.take("precision").as_deref() {
                None | Some("f64") => Precision::F64,
                Some("f32") => Precision::F32,
                Some(other) => {
                    return Err(CliError::Usage(format!("unknown precision '{other}'")));
                }
            };
            flags.finish()?;
            let (rendered, all_pass) = run_check(suite, seeds, &format, precision)?;
            print!("{rendered}");
            Ok(all_pass)
        }
        "dump" => {
            let expr = match (flags.take("expr"), flags.take("file")) {
                (Some(e), None) => e,
                (None, Some(path)) => std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Io(format!("{path}: {e}")))?,
                _ => {
                    return Err(CliError::Usage(
                        "dump needs exactly one of --expr or --file".into(),
                    ));
                }
            };
            flags.finish()?;
            print!("{}", run_dump(expr.trim())?);
            Ok(true)
        }
        other => Err(CliError::Usage(format!("unknown subcommand '{other}'"))),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let Some(cmd) = args.get(1) else {
        eprint!("{USAGE}");
        return ExitCode::from(2);
    };
    if cmd == "--help" || cmd == "-h" || cmd == "help" {
        print!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    match dispatch(cmd, &args[2..]) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n");
            eprint!("{USAGE}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
