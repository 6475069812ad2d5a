//! Line-oriented text form of [`ModuleIr`]: one statement per line, blocks
//! and procedures delimited by labeled headers. The printer is canonical and
//! the format is stable, so instrumented modules round-trip byte-for-byte and
//! golden-file tests can pin the pass output.

use super::ir::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("line {0}: {1}")]
    At(usize, String),
    #[error("missing `module` header")]
    NoModule,
    #[error("statement outside a block at line {0}")]
    OutsideBlock(usize),
    #[error("block `{0}` has no terminator")]
    NoTerminator(String),
}

fn err(lineno: usize, msg: impl Into<String>) -> ParseError {
    ParseError::At(lineno, msg.into())
}

fn parse_ms_to_us(tok: &str, lineno: usize) -> Result<u64, ParseError> {
    let ms: f64 = tok
        .parse()
        .map_err(|_| err(lineno, format!("bad duration `{tok}`")))?;
    if ms < 0.0 {
        return Err(err(lineno, "negative duration"));
    }
    Ok((ms * 1000.0).round() as u64)
}

fn fmt_us_as_ms(us: u64) -> String {
    format!("{}", us as f64 / 1000.0)
}

pub fn parse_module(text: &str) -> Result<ModuleIr, ParseError> {
    let mut name: Option<String> = None;
    let mut shared: Vec<String> = Vec::new();
    let mut bindings = HandlerBindings::default();
    let mut procs: Vec<ProcIr> = Vec::new();
    let mut cur_proc: Option<ProcIr> = None;
    let mut cur_block: Option<(String, Vec<Stmt>, Option<Terminator>)> = None;

    fn close_block(
        proc: &mut Option<ProcIr>,
        block: &mut Option<(String, Vec<Stmt>, Option<Terminator>)>,
    ) -> Result<(), ParseError> {
        if let Some((bname, stmts, term)) = block.take() {
            let term = term.ok_or(ParseError::NoTerminator(bname.clone()))?;
            proc.as_mut()
                .expect("block outside proc already rejected")
                .blocks
                .push(BlockIr {
                    name: bname,
                    stmts,
                    term,
                });
        }
        Ok(())
    }

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let kw = toks[0];
        let args = &toks[1..];
        let need = |n: usize| -> Result<(), ParseError> {
            if args.len() == n {
                Ok(())
            } else {
                Err(err(lineno, format!("`{kw}` expects {n} argument(s)")))
            }
        };

        match kw {
            "module" => {
                need(1)?;
                name = Some(args[0].to_string());
            }
            "shared" => {
                shared.extend(args.iter().map(|s| s.to_string()));
            }
            "on_create" | "on_data" | "on_timer" | "on_message" => {
                need(1)?;
                let slot = match kw {
                    "on_create" => &mut bindings.on_create,
                    "on_data" => &mut bindings.on_data,
                    "on_timer" => &mut bindings.on_timer,
                    _ => &mut bindings.on_message,
                };
                *slot = Some(args[0].to_string());
            }
            "proc" => {
                need(1)?;
                close_block(&mut cur_proc, &mut cur_block)?;
                if let Some(p) = cur_proc.take() {
                    procs.push(p);
                }
                cur_proc = Some(ProcIr {
                    name: args[0].to_string(),
                    blocks: Vec::new(),
                });
            }
            "block" => {
                need(1)?;
                if cur_proc.is_none() {
                    return Err(err(lineno, "block outside a procedure"));
                }
                close_block(&mut cur_proc, &mut cur_block)?;
                cur_block = Some((args[0].to_string(), Vec::new(), None));
            }
            _ => {
                let (_, stmts, term) = cur_block
                    .as_mut()
                    .ok_or(ParseError::OutsideBlock(lineno))?;
                if term.is_some() {
                    return Err(err(lineno, "statement after block terminator"));
                }
                match kw {
                    "goto" => {
                        need(1)?;
                        *term = Some(Terminator::Goto(args[0].to_string()));
                    }
                    "return" => {
                        need(0)?;
                        *term = Some(Terminator::Return);
                    }
                    "loop" => {
                        need(3)?;
                        let count: u32 = args[0]
                            .parse()
                            .map_err(|_| err(lineno, "bad loop count"))?;
                        *term = Some(Terminator::Loop {
                            count,
                            body: args[1].to_string(),
                            exit: args[2].to_string(),
                        });
                    }
                    "choose" => {
                        need(3)?;
                        let p: f64 = args[0]
                            .parse()
                            .map_err(|_| err(lineno, "bad probability"))?;
                        if !(0.0..=1.0).contains(&p) {
                            return Err(err(lineno, "probability out of [0,1]"));
                        }
                        *term = Some(Terminator::Choose {
                            prob_num: (p * 100_000.0).round() as u32,
                            then_: args[1].to_string(),
                            else_: args[2].to_string(),
                        });
                    }
                    "compute" => {
                        need(1)?;
                        let c: u64 = args[0]
                            .parse()
                            .map_err(|_| err(lineno, "bad cycle count"))?;
                        stmts.push(Stmt::Compute(c));
                    }
                    "read" => {
                        need(1)?;
                        stmts.push(Stmt::Read(args[0].to_string()));
                    }
                    "write" => {
                        need(1)?;
                        stmts.push(Stmt::Write(args[0].to_string()));
                    }
                    "call" => {
                        need(1)?;
                        stmts.push(Stmt::Call(args[0].to_string()));
                    }
                    "blocking" => {
                        need(1)?;
                        let ms: u64 = args[0]
                            .parse()
                            .map_err(|_| err(lineno, "bad blocking millis"))?;
                        stmts.push(Stmt::Blocking(ms));
                    }
                    "send_app" => {
                        need(2)?;
                        stmts.push(Stmt::SendApp {
                            dst: args[0].to_string(),
                            bytes: args[1].parse().map_err(|_| err(lineno, "bad size"))?,
                        });
                    }
                    "rpc" => {
                        need(3)?;
                        stmts.push(Stmt::Rpc {
                            dst: args[0].to_string(),
                            proc: args[1].to_string(),
                            arg_bytes: args[2].parse().map_err(|_| err(lineno, "bad size"))?,
                        });
                    }
                    "register_timer" => {
                        need(2)?;
                        stmts.push(Stmt::RegisterTimer {
                            interval_us: parse_ms_to_us(args[0], lineno)?,
                            timer_id: args[1].to_string(),
                        });
                    }
                    "get_sensor" => {
                        need(1)?;
                        stmts.push(Stmt::GetSensor {
                            channel: args[0].parse().map_err(|_| err(lineno, "bad channel"))?,
                        });
                    }
                    "subscribe_sensor" => {
                        need(2)?;
                        stmts.push(Stmt::SubscribeSensor {
                            channel: args[0].parse().map_err(|_| err(lineno, "bad channel"))?,
                            rate_hz: args[1].parse().map_err(|_| err(lineno, "bad rate"))?,
                        });
                    }
                    "malloc" => {
                        need(2)?;
                        stmts.push(Stmt::Malloc {
                            handle: args[0].to_string(),
                            bytes: args[1].parse().map_err(|_| err(lineno, "bad size"))?,
                        });
                    }
                    "free" => {
                        need(1)?;
                        stmts.push(Stmt::Free {
                            handle: args[0].to_string(),
                        });
                    }
                    "preaccess" => {
                        if args.len() < 2 {
                            return Err(err(lineno, "`preaccess` expects a role and targets"));
                        }
                        match args[0] {
                            "own" => {
                                need(2)?;
                                let objects =
                                    args[1].split(',').map(|s| s.to_string()).collect();
                                stmts.push(Stmt::PreAccessOwn { objects });
                            }
                            "req" => {
                                need(3)?;
                                let owner = args[1].to_string();
                                let mut entries = Vec::new();
                                for part in args[2].split(',') {
                                    let (obj, kind) = part
                                        .split_once(':')
                                        .ok_or_else(|| err(lineno, "expected obj:acq|rep"))?;
                                    let kind = match kind {
                                        "acq" => PreKind::Acquire,
                                        "rep" => PreKind::Replicate,
                                        other => {
                                            return Err(err(
                                                lineno,
                                                format!("bad request kind `{other}`"),
                                            ))
                                        }
                                    };
                                    entries.push((obj.to_string(), kind));
                                }
                                stmts.push(Stmt::PreAccessReq { owner, entries });
                            }
                            other => {
                                return Err(err(lineno, format!("bad preaccess role `{other}`")))
                            }
                        }
                    }
                    "postaccess" => {
                        need(2)?;
                        stmts.push(Stmt::PostAccess {
                            owner: args[0].to_string(),
                            objects: args[1].split(',').map(|s| s.to_string()).collect(),
                        });
                    }
                    other => return Err(err(lineno, format!("unknown statement `{other}`"))),
                }
            }
        }
    }
    close_block(&mut cur_proc, &mut cur_block)?;
    if let Some(p) = cur_proc.take() {
        procs.push(p);
    }
    Ok(ModuleIr {
        name: name.ok_or(ParseError::NoModule)?,
        shared,
        bindings,
        procs,
    })
}

pub fn print_module(m: &ModuleIr) -> String {
    let mut out = String::new();
    out.push_str(&format!("module {}\n", m.name));
    if !m.shared.is_empty() {
        out.push_str(&format!("shared {}\n", m.shared.join(" ")));
    }
    for (kw, slot) in [
        ("on_create", &m.bindings.on_create),
        ("on_data", &m.bindings.on_data),
        ("on_timer", &m.bindings.on_timer),
        ("on_message", &m.bindings.on_message),
    ] {
        if let Some(p) = slot {
            out.push_str(&format!("{kw} {p}\n"));
        }
    }
    for p in &m.procs {
        out.push_str(&format!("proc {}\n", p.name));
        for b in &p.blocks {
            out.push_str(&format!("  block {}\n", b.name));
            for s in &b.stmts {
                out.push_str("    ");
                out.push_str(&print_stmt(s));
                out.push('\n');
            }
            out.push_str("    ");
            out.push_str(&print_term(&b.term));
            out.push('\n');
        }
    }
    out
}

fn print_stmt(s: &Stmt) -> String {
    match s {
        Stmt::Compute(c) => format!("compute {c}"),
        Stmt::Read(o) => format!("read {o}"),
        Stmt::Write(o) => format!("write {o}"),
        Stmt::Call(p) => format!("call {p}"),
        Stmt::Blocking(ms) => format!("blocking {ms}"),
        Stmt::SendApp { dst, bytes } => format!("send_app {dst} {bytes}"),
        Stmt::Rpc {
            dst,
            proc,
            arg_bytes,
        } => format!("rpc {dst} {proc} {arg_bytes}"),
        Stmt::RegisterTimer {
            interval_us,
            timer_id,
        } => format!("register_timer {} {timer_id}", fmt_us_as_ms(*interval_us)),
        Stmt::GetSensor { channel } => format!("get_sensor {channel}"),
        Stmt::SubscribeSensor { channel, rate_hz } => {
            format!("subscribe_sensor {channel} {rate_hz}")
        }
        Stmt::Malloc { handle, bytes } => format!("malloc {handle} {bytes}"),
        Stmt::Free { handle } => format!("free {handle}"),
        Stmt::PreAccessOwn { objects } => format!("preaccess own {}", objects.join(",")),
        Stmt::PreAccessReq { owner, entries } => {
            let list = entries
                .iter()
                .map(|(o, k)| {
                    format!(
                        "{o}:{}",
                        match k {
                            PreKind::Acquire => "acq",
                            PreKind::Replicate => "rep",
                        }
                    )
                })
                .collect::<Vec<_>>()
                .join(",");
            format!("preaccess req {owner} {list}")
        }
        Stmt::PostAccess { owner, objects } => {
            format!("postaccess {owner} {}", objects.join(","))
        }
    }
}

fn print_term(t: &Terminator) -> String {
    match t {
        Terminator::Goto(b) => format!("goto {b}"),
        Terminator::Return => "return".to_string(),
        Terminator::Loop { count, body, exit } => format!("loop {count} {body} {exit}"),
        Terminator::Choose {
            prob_num,
            then_,
            else_,
        } => format!("choose {} {then_} {else_}", *prob_num as f64 / 100_000.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
module sense
shared steps dist
on_create init
on_timer tick
proc init
  block entry
    register_timer 33 t0
    write steps
    return
proc tick
  block entry
    get_sensor 0
    compute 1200
    choose 0.0825 step done
  block step
    write steps
    write dist
    goto done
  block done
    return
";

    #[test]
    fn parse_then_print_is_canonical() {
        let m = parse_module(SAMPLE).unwrap();
        m.validate().unwrap();
        assert_eq!(print_module(&m), SAMPLE);
    }

    #[test]
    fn round_trip_preserves_structure() {
        let m = parse_module(SAMPLE).unwrap();
        let again = parse_module(&print_module(&m)).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn instrumented_statements_round_trip() {
        let text = "\
module m
shared a b
proc p
  block entry
    preaccess req owner1 a:acq,b:rep
    preaccess own a
    write a
    postaccess owner1 a
    return
";
        let m = parse_module(text).unwrap();
        assert_eq!(print_module(&m), text);
        assert_eq!(m.sites().len(), 3);
    }

    #[test]
    fn missing_terminator_rejected() {
        let text = "module m\nproc p\n  block entry\n    compute 5\n";
        assert!(matches!(
            parse_module(text),
            Err(ParseError::NoTerminator(_))
        ));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "# header\nmodule m\n\nproc p\n  block entry\n    return # done\n";
        let m = parse_module(text).unwrap();
        assert_eq!(m.procs.len(), 1);
    }
}
