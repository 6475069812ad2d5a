//! Seeded random module generator for differential testing.
//!
//! Programs are structured (counted loops, if/else diamonds, forward-only
//! calls) so that every generated module validates and terminates.

use super::ir::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct RandGenConfig {
    pub objects: Vec<String>,
    pub max_procs: usize,
    pub max_stmts: usize,
    /// Allow plain Write statements (the caller decides whether the module
    /// should behave as a pure reader).
    pub writes: bool,
}

impl Default for RandGenConfig {
    fn default() -> RandGenConfig {
        RandGenConfig {
            objects: vec!["o0".into(), "o1".into(), "o2".into()],
            max_procs: 3,
            max_stmts: 6,
            writes: true,
        }
    }
}

pub fn random_module(name: &str, cfg: &RandGenConfig, rng: &mut ChaCha8Rng) -> ModuleIr {
    let n_procs = rng.gen_range(1..=cfg.max_procs);
    let mut procs = Vec::new();
    // Generate callees first so calls only go forward.
    for pi in (0..n_procs).rev() {
        let callable: Vec<String> = ((pi + 1)..n_procs).map(|i| format!("p{i}")).collect();
        procs.push(random_proc(&format!("p{pi}"), cfg, &callable, rng));
    }
    procs.reverse();
    let entry = "p0".to_string();
    let m = ModuleIr {
        name: name.to_string(),
        shared: cfg.objects.clone(),
        bindings: HandlerBindings {
            on_timer: Some(entry),
            ..Default::default()
        },
        procs,
    };
    debug_assert!(m.validate().is_ok());
    m
}

fn random_stmts(cfg: &RandGenConfig, callable: &[String], rng: &mut ChaCha8Rng) -> Vec<Stmt> {
    let n = rng.gen_range(1..=cfg.max_stmts);
    (0..n)
        .map(|_| {
            let obj = cfg.objects[rng.gen_range(0..cfg.objects.len())].clone();
            match rng.gen_range(0..10) {
                0..=2 => Stmt::Read(obj),
                3..=5 if cfg.writes => Stmt::Write(obj),
                6 if !callable.is_empty() => {
                    Stmt::Call(callable[rng.gen_range(0..callable.len())].clone())
                }
                _ => Stmt::Compute(rng.gen_range(10..2000)),
            }
        })
        .collect()
}

fn random_proc(
    name: &str,
    cfg: &RandGenConfig,
    callable: &[String],
    rng: &mut ChaCha8Rng,
) -> ProcIr {
    // Shapes: straight line, diamond, counted loop, loop-with-diamond.
    let shape = rng.gen_range(0..4);
    let mut blocks = Vec::new();
    match shape {
        0 => {
            blocks.push(BlockIr {
                name: "entry".into(),
                stmts: random_stmts(cfg, callable, rng),
                term: Terminator::Return,
            });
        }
        1 => {
            blocks.push(BlockIr {
                name: "entry".into(),
                stmts: random_stmts(cfg, callable, rng),
                term: Terminator::Choose {
                    prob_num: rng.gen_range(0..=100_000),
                    then_: "yes".into(),
                    else_: "no".into(),
                },
            });
            blocks.push(BlockIr {
                name: "yes".into(),
                stmts: random_stmts(cfg, callable, rng),
                term: Terminator::Goto("join".into()),
            });
            blocks.push(BlockIr {
                name: "no".into(),
                stmts: random_stmts(cfg, callable, rng),
                term: Terminator::Goto("join".into()),
            });
            blocks.push(BlockIr {
                name: "join".into(),
                stmts: random_stmts(cfg, callable, rng),
                term: Terminator::Return,
            });
        }
        _ => {
            let count = rng.gen_range(0..8);
            blocks.push(BlockIr {
                name: "entry".into(),
                stmts: random_stmts(cfg, callable, rng),
                term: Terminator::Goto("head".into()),
            });
            blocks.push(BlockIr {
                name: "head".into(),
                stmts: vec![],
                term: Terminator::Loop {
                    count,
                    body: "body".into(),
                    exit: "done".into(),
                },
            });
            let body_term = if shape == 3 {
                Terminator::Choose {
                    prob_num: rng.gen_range(0..=100_000),
                    then_: "alt".into(),
                    else_: "head".into(),
                }
            } else {
                Terminator::Goto("head".into())
            };
            blocks.push(BlockIr {
                name: "body".into(),
                stmts: random_stmts(cfg, callable, rng),
                term: body_term,
            });
            if shape == 3 {
                blocks.push(BlockIr {
                    name: "alt".into(),
                    stmts: random_stmts(cfg, callable, rng),
                    term: Terminator::Goto("head".into()),
                });
            }
            blocks.push(BlockIr {
                name: "done".into(),
                stmts: random_stmts(cfg, callable, rng),
                term: Terminator::Return,
            });
        }
    }
    ProcIr {
        name: name.to_string(),
        blocks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn generated_modules_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = RandGenConfig::default();
        for i in 0..200 {
            let m = random_module(&format!("m{i}"), &cfg, &mut rng);
            m.validate().unwrap();
        }
    }

    #[test]
    fn same_seed_same_module() {
        let cfg = RandGenConfig::default();
        let a = random_module("m", &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = random_module("m", &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }
}
