//! Scenario configuration: the workload description a run consumes, the
//! built-in benchmark scenarios, the legacy transform, and the ablation
//! toggles.
//!
//! Configs are one structured TOML file with a schema tag. Built-ins encode
//! the benchmark structure at desk scale: a step-counting module on the
//! weakest processor plus a querying UI, a gesture matcher with two template
//! arrays, a two-peripheral position pipeline, and a frame-admission filter
//! feeding a central classifier.

use crate::instrument::{
    build_app, parse_module, BatchingToggles, InstrumentedApp, ModuleIr, SharedObjectConfig, Stub,
    TypeDescriptor,
};
use crate::platform::{LinkSpec, Platform, ProcessorSpec, SimDuration};
use crate::runtime::{ExceptionPolicy, ModuleKind};
use crate::sim::{GeneratorSpec, SimInput, SimModule, SimObject};
use crate::transport::{DropPlan, EventQueue};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const SCHEMA: &str = "scenario-v1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config schema `{0}` is not `{SCHEMA}`")]
    Schema(String),
    #[error("duplicate module id `{0}`")]
    DuplicateModule(String),
    #[error("exactly one central module required, found {0}")]
    CentralCount(usize),
    #[error("central module must sit on the central processor")]
    CentralPlacement,
    #[error("module `{0}` references unknown processor `{1}`")]
    UnknownProcessor(String, String),
    #[error("module `{0}` IR name `{1}` does not match its id")]
    IrNameMismatch(String, String),
    #[error("sensor channel {0} bound more than once")]
    DuplicateChannel(u32),
    #[error("module `{0}` uses sensor channel {1} which is not on its processor")]
    NonLocalSensor(String, u32),
    #[error("in config `{0}`: {1}")]
    Io(String, String),
    #[error("toml: {0}")]
    Toml(String),
    #[error(transparent)]
    Platform(#[from] crate::platform::PlatformError),
    #[error("module `{module}` IR: {detail}")]
    Ir { module: String, detail: String },
    #[error("object `{object}` IDL: {detail}")]
    Idl { object: String, detail: String },
    #[error(transparent)]
    Pass(#[from] crate::instrument::PassError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub intra_batching: bool,
    pub inter_batching: bool,
    pub role_swap: bool,
    pub order_regulation: bool,
}

impl Default for Toggles {
    fn default() -> Toggles {
        Toggles {
            intra_batching: true,
            inter_batching: true,
            role_swap: false,
            order_regulation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IrSource {
    Inline { inline: String },
    File { file: String },
}

impl IrSource {
    pub fn load(&self, module: &str) -> Result<String, ScenarioError> {
        match self {
            IrSource::Inline { inline } => Ok(inline.clone()),
            IrSource::File { file } => std::fs::read_to_string(file)
                .map_err(|e| ScenarioError::Io(module.to_string(), e.to_string())),
        }
    }
}

fn default_queue_capacity() -> usize {
    EventQueue::DEFAULT_CAPACITY
}

fn default_memory_budget() -> u64 {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleConfig {
    pub id: String,
    pub processor: String,
    pub kind: ModuleKind,
    pub ir: IrSource,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    #[serde(default = "default_memory_budget")]
    pub memory_budget: u64,
    #[serde(default)]
    pub declared_rom_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectConfig {
    pub id: String,
    /// Inline IDL text (`field name i32`, one per line).
    pub idl: String,
    pub group: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub channel: u32,
    pub processor: String,
    pub generator: GeneratorSpec,
    /// 0 = pull-only; otherwise events are pushed at this rate.
    #[serde(default)]
    pub push_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformConfig {
    pub processors: Vec<ProcessorSpec>,
    pub link: LinkSpec,
}

impl Default for PlatformConfig {
    fn default() -> PlatformConfig {
        let p = Platform::tri();
        PlatformConfig {
            processors: p.processors,
            link: p.link,
        }
    }
}

fn default_stall_timeout() -> f64 {
    2000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema: String,
    pub name: String,
    pub seed: u64,
    pub duration_ms: f64,
    #[serde(default = "default_stall_timeout")]
    pub stall_timeout_ms: f64,
    #[serde(default)]
    pub platform: PlatformConfig,
    #[serde(default)]
    pub toggles: Toggles,
    pub modules: Vec<ModuleConfig>,
    #[serde(default)]
    pub objects: Vec<ObjectConfig>,
    #[serde(default)]
    pub sensors: Vec<SensorConfig>,
    #[serde(default)]
    pub exception_policy: ExceptionPolicy,
    #[serde(default)]
    pub drop_plan: DropPlan,
    /// Legacy comparator: whole workload on the central processor, plain
    /// memory instead of coherence traffic.
    #[serde(default)]
    pub legacy_mode: bool,
    #[serde(default)]
    pub collect_trace: bool,
}

impl ScenarioConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<ScenarioConfig, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Toml(e.to_string()))
    }

    pub fn platform(&self) -> Platform {
        Platform {
            processors: self.platform.processors.clone(),
            link: self.platform.link.clone(),
        }
    }
}

/// A validated, instrumented scenario ready to simulate.
pub struct Prepared {
    pub input: SimInput,
    /// Absent in legacy mode (uninstrumented).
    pub app: Option<InstrumentedApp>,
    pub raw_modules: Vec<ModuleIr>,
}

/// Validate the config and produce the engine input, running the
/// instrumentation pass unless the scenario is a legacy build.
pub fn prepare(config: &ScenarioConfig) -> Result<Prepared, ScenarioError> {
    if config.schema != SCHEMA {
        return Err(ScenarioError::Schema(config.schema.clone()));
    }
    let platform = config.platform();
    platform.validate()?;
    let central = platform.central_index();

    let mut ids = std::collections::BTreeSet::new();
    for m in &config.modules {
        if !ids.insert(m.id.clone()) {
            return Err(ScenarioError::DuplicateModule(m.id.clone()));
        }
    }
    let centrals = config
        .modules
        .iter()
        .filter(|m| m.kind == ModuleKind::Central)
        .count();
    if centrals != 1 {
        return Err(ScenarioError::CentralCount(centrals));
    }

    let mut raw_modules = Vec::new();
    let mut placement: BTreeMap<String, String> = BTreeMap::new();
    for m in &config.modules {
        let proc_idx = platform
            .index_of(&m.processor)
            .ok_or_else(|| ScenarioError::UnknownProcessor(m.id.clone(), m.processor.clone()))?;
        if m.kind == ModuleKind::Central && proc_idx != central {
            return Err(ScenarioError::CentralPlacement);
        }
        let text = m.ir.load(&m.id)?;
        let ir = parse_module(&text).map_err(|e| ScenarioError::Ir {
            module: m.id.clone(),
            detail: e.to_string(),
        })?;
        if ir.name != m.id {
            return Err(ScenarioError::IrNameMismatch(m.id.clone(), ir.name));
        }
        ir.validate().map_err(|e| ScenarioError::Ir {
            module: m.id.clone(),
            detail: e.to_string(),
        })?;
        placement.insert(m.id.clone(), m.processor.clone());
        raw_modules.push(ir);
    }

    // Sensors: unique channels, bound locally to their readers.
    let mut channels = std::collections::BTreeSet::new();
    let mut sensor_map = BTreeMap::new();
    for s in &config.sensors {
        if !channels.insert(s.channel) {
            return Err(ScenarioError::DuplicateChannel(s.channel));
        }
        let pi = platform
            .index_of(&s.processor)
            .ok_or_else(|| ScenarioError::UnknownProcessor("sensor".into(), s.processor.clone()))?;
        sensor_map.insert(s.channel, (pi, s.generator.clone()));
    }
    for (mc, ir) in config.modules.iter().zip(&raw_modules) {
        for p in &ir.procs {
            for b in &p.blocks {
                for st in &b.stmts {
                    let ch = match st {
                        crate::instrument::Stmt::GetSensor { channel } => Some(*channel),
                        crate::instrument::Stmt::SubscribeSensor { channel, .. } => Some(*channel),
                        _ => None,
                    };
                    if let Some(ch) = ch {
                        let local = sensor_map
                            .get(&ch)
                            .map(|(pi, _)| platform.processors[*pi].name == mc.processor)
                            .unwrap_or(false);
                        if !local {
                            return Err(ScenarioError::NonLocalSensor(mc.id.clone(), ch));
                        }
                    }
                }
            }
        }
    }

    let mut objects = Vec::new();
    let mut object_cfgs = Vec::new();
    for o in &config.objects {
        let descriptor = TypeDescriptor::parse(&o.idl).map_err(|e| ScenarioError::Idl {
            object: o.id.clone(),
            detail: e.to_string(),
        })?;
        object_cfgs.push(SharedObjectConfig {
            id: o.id.clone(),
            descriptor: descriptor.clone(),
            group: o.group.clone(),
        });
        objects.push((o.id.clone(), descriptor, o.group.clone()));
    }

    let strength: BTreeMap<String, u32> = platform
        .processors
        .iter()
        .map(|p| (p.name.clone(), p.strength_rank))
        .collect();

    let (app, final_irs, owners) = if config.legacy_mode {
        // Ordinary single-processor program: raw IR, no roles.
        let owners: Vec<usize> = objects
            .iter()
            .map(|(_, _, group)| {
                config
                    .modules
                    .iter()
                    .position(|m| group.contains(&m.id))
                    .unwrap_or(0)
            })
            .collect();
        (None, raw_modules.clone(), owners)
    } else {
        let toggles = BatchingToggles {
            intra: config.toggles.intra_batching,
            inter: config.toggles.inter_batching,
        };
        let app = build_app(
            &raw_modules,
            &placement,
            &strength,
            &object_cfgs,
            toggles,
            config.toggles.role_swap,
        )?;
        let owners = app
            .assignment
            .descriptors
            .iter()
            .map(|d| {
                config
                    .modules
                    .iter()
                    .position(|m| m.id == d.owner)
                    .expect("owner is a configured module")
            })
            .collect();
        let irs = app.modules.clone();
        (Some(app), irs, owners)
    };

    let sim_modules: Vec<SimModule> = config
        .modules
        .iter()
        .zip(final_irs)
        .map(|(mc, ir)| SimModule {
            name: mc.id.clone(),
            ir,
            proc: platform.index_of(&mc.processor).unwrap(),
            kind: mc.kind,
            queue_capacity: mc.queue_capacity,
            memory_budget: mc.memory_budget,
        })
        .collect();

    let sim_objects: Vec<SimObject> = objects
        .iter()
        .enumerate()
        .map(|(i, (id, descriptor, group))| SimObject {
            id: id.clone(),
            stub: Stub::generate(descriptor),
            owner: owners[i],
            group: group
                .iter()
                .map(|g| config.modules.iter().position(|m| &m.id == g).unwrap())
                .collect(),
        })
        .collect();

    let input = SimInput {
        platform,
        modules: sim_modules,
        objects: sim_objects,
        sensors: sensor_map,
        seed: config.seed,
        duration: SimDuration::from_ms(config.duration_ms),
        stall_timeout: SimDuration::from_ms(config.stall_timeout_ms),
        policy: config.exception_policy,
        drop_plan: config.drop_plan.clone(),
        dsm_enabled: !config.legacy_mode,
        collect_trace: config.collect_trace,
    };
    Ok(Prepared {
        input,
        app,
        raw_modules,
    })
}

/// The legacy comparator: identical workload, every module and sensor on the
/// central processor, plain shared memory.
pub fn legacy_transform(config: &ScenarioConfig) -> ScenarioConfig {
    let central = config.platform().processors[config.platform().central_index()]
        .name
        .clone();
    let mut out = config.clone();
    out.name = format!("{}-legacy", config.name);
    out.legacy_mode = true;
    for m in &mut out.modules {
        m.processor = central.clone();
    }
    for s in &mut out.sensors {
        s.processor = central.clone();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblateToggle {
    InterBatchingOff,
    IntraBatchingOff,
    RoleSwap,
}

impl AblateToggle {
    pub fn apply(&self, config: &ScenarioConfig) -> ScenarioConfig {
        let mut out = config.clone();
        out.name = format!("{}-{}", config.name, self.suffix());
        match self {
            AblateToggle::InterBatchingOff => out.toggles.inter_batching = false,
            AblateToggle::IntraBatchingOff => out.toggles.intra_batching = false,
            AblateToggle::RoleSwap => out.toggles.role_swap = true,
        }
        out
    }

    pub fn suffix(&self) -> &'static str {
        match self {
            AblateToggle::InterBatchingOff => "inter_off",
            AblateToggle::IntraBatchingOff => "intra_off",
            AblateToggle::RoleSwap => "role_swap",
        }
    }
}

// ---------------------------------------------------------------------------
// Built-in scenarios
// ---------------------------------------------------------------------------

pub const BUILTIN_NAMES: [&str; 4] = ["pedometer", "uwave", "raps", "soundsense"];

/// Desk-scale workload knobs; the defaults mirror the benchmark assumptions
/// (step every 400 ms, UI query every 30 s, 15-minute gesture UI, GPS duty,
/// 1.33 Hz frame admission).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub duration_ms: f64,
    pub seed: u64,
}

impl Default for Workload {
    fn default() -> Workload {
        Workload {
            duration_ms: 60_000.0,
            seed: 7,
        }
    }
}

pub fn scenario_builtin(name: &str) -> Option<ScenarioConfig> {
    scenario_builtin_with(name, &Workload::default())
}

pub fn scenario_builtin_with(name: &str, w: &Workload) -> Option<ScenarioConfig> {
    match name {
        "pedometer" => Some(pedometer(w)),
        "uwave" => Some(uwave(w)),
        "raps" => Some(raps(w)),
        "soundsense" => Some(soundsense(w)),
        _ => None,
    }
}

fn base_config(name: &str, w: &Workload) -> ScenarioConfig {
    ScenarioConfig {
        schema: SCHEMA.into(),
        name: name.into(),
        seed: w.seed,
        duration_ms: w.duration_ms,
        stall_timeout_ms: default_stall_timeout(),
        platform: PlatformConfig::default(),
        toggles: Toggles::default(),
        modules: Vec::new(),
        objects: Vec::new(),
        sensors: Vec::new(),
        exception_policy: ExceptionPolicy::default(),
        drop_plan: DropPlan::default(),
        legacy_mode: false,
        collect_trace: false,
    }
}

fn module(
    id: &str,
    processor: &str,
    kind: ModuleKind,
    ir: &str,
    declared_rom_bytes: u64,
) -> ModuleConfig {
    ModuleConfig {
        id: id.into(),
        processor: processor.into(),
        kind,
        ir: IrSource::Inline { inline: ir.into() },
        queue_capacity: default_queue_capacity(),
        memory_budget: default_memory_budget(),
        declared_rom_bytes,
    }
}

fn accel_sensor(channel: u32, processor: &str) -> SensorConfig {
    SensorConfig {
        channel,
        processor: processor.into(),
        generator: GeneratorSpec::Sinusoid {
            amplitude: 64.0,
            period_ms: 500.0,
            axes: 3,
            phase: 0.25,
        },
        push_rate_hz: 0.0,
    }
}

/// Step counter: one peripheral on the weakest processor sharing four
/// integers with the querying UI. Steps land every ~400 ms at 30 Hz
/// sampling; the UI queries every 30 s.
fn pedometer(w: &Workload) -> ScenarioConfig {
    let mut c = base_config("pedometer", w);
    let sense_ir = "\
module ped_sense
shared step_count stride velocity distance
on_create init
on_timer tick
proc init
  block entry
    register_timer 33 t0
    write step_count
    write stride
    write velocity
    write distance
    return
proc tick
  block entry
    get_sensor 0
    compute 12000
    write velocity
    choose 0.0825 step done
  block step
    call update
    goto done
  block done
    return
proc update
  block entry
    compute 3000
    read stride
    write step_count
    goto fin
  block fin
    write distance
    compute 200
    return
";
    let ui_ir = "\
module ped_ui
shared step_count stride velocity distance
on_create init
on_timer query
proc init
  block entry
    register_timer 30000 ui
    return
proc query
  block entry
    read step_count
    read stride
    read velocity
    read distance
    compute 2000000
    return
";
    c.modules = vec![
        module("ped_sense", "msp430", ModuleKind::Peripheral, sense_ir, 2400),
        module("ped_ui", "omap3", ModuleKind::Central, ui_ir, 24000),
    ];
    let group = vec!["ped_sense".to_string(), "ped_ui".to_string()];
    c.objects = ["step_count", "stride", "velocity", "distance"]
        .iter()
        .map(|id| ObjectConfig {
            id: id.to_string(),
            idl: "field v i32".into(),
            group: group.clone(),
        })
        .collect();
    c.sensors = vec![accel_sensor(0, "msp430")];
    c
}

/// Gesture matcher: two 64-element templates owned by the matcher on the
/// weakest processor; matching is a two-level 64x64 nested loop.
fn uwave(w: &Workload) -> ScenarioConfig {
    let mut c = base_config("uwave", w);
    let match_ir = "\
module uw_match
shared template_a template_b
on_create init
on_timer tick
proc init
  block entry
    register_timer 400 t0
    write template_a
    goto second
  block second
    write template_b
    return
proc tick
  block entry
    get_sensor 0
    compute 2000
    goto m1
  block m1
    read template_a
    goto oh_a
  block oh_a
    loop 64 ob_a m2
  block ob_a
    compute 30
    goto ih_a
  block ih_a
    loop 64 ib_a oend_a
  block ib_a
    read template_a
    compute 18
    goto ih_a
  block oend_a
    goto oh_a
  block m2
    read template_b
    goto oh_b
  block oh_b
    loop 64 ob_b fin
  block ob_b
    compute 30
    goto ih_b
  block ih_b
    loop 64 ib_b oend_b
  block ib_b
    read template_b
    compute 18
    goto ih_b
  block oend_b
    goto oh_b
  block fin
    choose 0.0005 hit done
  block hit
    rpc uw_ui on_gesture 8
    goto done
  block done
    return
";
    let ui_ir = "\
module uw_ui
shared template_a template_b
on_create init
on_timer query
proc init
  block entry
    register_timer 900000 ui
    return
proc query
  block entry
    read template_a
    read template_b
    compute 1000000
    return
proc on_gesture
  block entry
    compute 6000000
    return
";
    c.modules = vec![
        module("uw_match", "msp430", ModuleKind::Peripheral, match_ir, 2000),
        module("uw_ui", "omap3", ModuleKind::Central, ui_ir, 30000),
    ];
    let group = vec!["uw_match".to_string(), "uw_ui".to_string()];
    c.objects = ["template_a", "template_b"]
        .iter()
        .map(|id| ObjectConfig {
            id: id.to_string(),
            idl: "field t i32[64]".into(),
            group: group.clone(),
        })
        .collect();
    c.sensors = vec![accel_sensor(0, "msp430")];
    c
}

/// Rate-adaptive positioning: PA (weakest) watches the accelerometer and
/// calls PB for a GPS fix when uncertainty rises; PB writes back historical
/// averages it shares with PA and owns the geo log the UI queries.
fn raps(w: &Workload) -> ScenarioConfig {
    let mut c = base_config("raps", w);
    let pa_ir = "\
module raps_pa
shared avg_speed avg_accel avg_dwell
on_create init
on_timer tick
proc init
  block entry
    register_timer 33 t0
    write avg_speed
    write avg_accel
    goto more
  block more
    write avg_dwell
    return
proc tick
  block entry
    get_sensor 0
    compute 20000
    read avg_speed
    read avg_accel
    choose 0.0165 fix done
  block fix
    compute 4000
    read avg_dwell
    rpc raps_pb take_fix 8
    goto done
  block done
    return
";
    let pb_ir = "\
module raps_pb
shared avg_speed avg_accel avg_dwell geo_log
on_create init
proc init
  block entry
    write geo_log
    return
proc take_fix
  block entry
    get_sensor 1
    compute 150000
    write geo_log
    write avg_speed
    write avg_accel
    write avg_dwell
    compute 20000
    return
";
    let ui_ir = "\
module raps_ui
shared geo_log
on_create init
on_timer query
proc init
  block entry
    register_timer 20000 ui
    return
proc query
  block entry
    read geo_log
    compute 2000000
    return
";
    c.modules = vec![
        module("raps_pa", "msp430", ModuleKind::Peripheral, pa_ir, 2400),
        module("raps_pb", "lpc1343", ModuleKind::Peripheral, pb_ir, 2200),
        module("raps_ui", "omap3", ModuleKind::Central, ui_ir, 28000),
    ];
    let avg_group = vec!["raps_pa".to_string(), "raps_pb".to_string()];
    c.objects = ["avg_speed", "avg_accel", "avg_dwell"]
        .iter()
        .map(|id| ObjectConfig {
            id: id.to_string(),
            idl: "field v i32[4]".into(),
            group: avg_group.clone(),
        })
        .collect();
    c.objects.push(ObjectConfig {
        id: "geo_log".into(),
        idl: "field entries i32[32]".into(),
        group: vec!["raps_pb".to_string(), "raps_ui".to_string()],
    });
    c.sensors = vec![
        accel_sensor(0, "msp430"),
        SensorConfig {
            channel: 1,
            processor: "lpc1343".into(),
            generator: GeneratorSpec::Trace {
                frame_ms: 1000.0,
                rows: vec![vec![297613, -953021], vec![297641, -953007]],
            },
            push_rate_hz: 0.0,
        },
    ];
    c
}

/// Sound context: frame admission on the LPC at 8 Hz with ~1.33 Hz admitted
/// frames; the central classifier reads the window features and sometimes
/// adapts the admission thresholds, which is the owner-stall source.
fn soundsense(w: &Workload) -> ScenarioConfig {
    let mut c = base_config("soundsense", w);
    let frame_ir = "\
module ss_frame
shared admit_params window_feat
on_create init
on_timer frame
proc init
  block entry
    register_timer 125 t0
    write admit_params
    goto more
  block more
    write window_feat
    return
proc frame
  block entry
    get_sensor 0
    compute 1500000
    read admit_params
    choose 0.166 admit done
  block admit
    write window_feat
    rpc ss_ctx classify 8
    goto done
  block done
    return
";
    let ctx_ir = "\
module ss_ctx
shared admit_params window_feat
proc classify
  block entry
    read window_feat
    compute 6000000
    choose 0.5 adapt done
  block adapt
    write admit_params
    compute 1000000
    goto done
  block done
    return
";
    c.modules = vec![
        module("ss_frame", "lpc1343", ModuleKind::Peripheral, frame_ir, 2000),
        module("ss_ctx", "omap3", ModuleKind::Central, ctx_ir, 26000),
    ];
    let group = vec!["ss_frame".to_string(), "ss_ctx".to_string()];
    c.objects = vec![
        ObjectConfig {
            id: "admit_params".into(),
            idl: "field v i32[2]".into(),
            group: group.clone(),
        },
        ObjectConfig {
            id: "window_feat".into(),
            idl: "field v i32[16]".into(),
            group,
        },
    ];
    c.sensors = vec![SensorConfig {
        channel: 0,
        processor: "lpc1343".into(),
        generator: GeneratorSpec::Sinusoid {
            amplitude: 1024.0,
            period_ms: 80.0,
            axes: 1,
            phase: 0.0,
        },
        push_rate_hz: 0.0,
    }];
    c
}

/// Calibration probe: a weakest-processor owner at ~68% duty (a matching
/// kernel every 40 ms) serving small-object queries from the central
/// requester, plus an occasional central write-back that makes the owner
/// stall. Not one of the four named built-ins; the latency acceptance gate
/// uses it because each paper benchmark pins other criteria.
pub fn latency_probe(w: &Workload) -> ScenarioConfig {
    let mut c = base_config("latency_probe", w);
    let owner_ir = "\
module probe_owner
shared params results
on_create init
on_timer tick
proc init
  block entry
    register_timer 40 t0
    write params
    goto more
  block more
    write results
    return
proc tick
  block entry
    read params
    compute 82000
    write results
    return
";
    let ui_ir = "\
module probe_ui
shared params results
on_create init
on_timer poll
proc init
  block entry
    register_timer 173 t_poll
    return
proc poll
  block entry
    choose 0.173 adj rd
  block adj
    call adjust
    goto fin
  block rd
    call readout
    goto fin
  block fin
    return
proc readout
  block entry
    read results
    compute 600000
    return
proc adjust
  block entry
    write params
    compute 6000000
    return
";
    c.modules = vec![
        module("probe_owner", "msp430", ModuleKind::Peripheral, owner_ir, 2400),
        module("probe_ui", "omap3", ModuleKind::Central, ui_ir, 24000),
    ];
    c.objects = vec![
        ObjectConfig {
            id: "params".into(),
            idl: "field v i32[8]".into(),
            group: vec!["probe_owner".to_string(), "probe_ui".to_string()],
        },
        ObjectConfig {
            id: "results".into(),
            idl: "field v i32[8]".into(),
            group: vec!["probe_owner".to_string(), "probe_ui".to_string()],
        },
    ];
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_prepare() {
        for name in BUILTIN_NAMES {
            let c = scenario_builtin(name).unwrap();
            let prepared = prepare(&c).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(prepared.input.modules.len(), c.modules.len());
            assert!(prepared.app.is_some());
        }
        assert!(scenario_builtin("nope").is_none());
    }

    #[test]
    fn pedometer_shares_four_ints() {
        let c = scenario_builtin("pedometer").unwrap();
        assert_eq!(c.objects.len(), 4);
        let p = prepare(&c).unwrap();
        for o in &p.input.objects {
            assert_eq!(o.stub.byte_len(), 4);
            // The weakest member owns.
            assert_eq!(p.input.modules[o.owner].name, "ped_sense");
        }
    }

    #[test]
    fn uwave_shares_two_templates_with_15min_query() {
        let c = scenario_builtin("uwave").unwrap();
        assert_eq!(c.objects.len(), 2);
        let p = prepare(&c).unwrap();
        for o in &p.input.objects {
            assert_eq!(o.stub.byte_len(), 256);
        }
        match &c.modules[1].ir {
            IrSource::Inline { inline } => assert!(inline.contains("register_timer 900000 ui")),
            _ => panic!(),
        }
    }

    #[test]
    fn raps_groups_match_structure() {
        let c = scenario_builtin("raps").unwrap();
        let p = prepare(&c).unwrap();
        // Averages owned by PA (weakest); geo log owned by PB.
        let by_id: BTreeMap<&str, &crate::sim::SimObject> =
            p.input.objects.iter().map(|o| (o.id.as_str(), o)).collect();
        assert_eq!(p.input.modules[by_id["avg_speed"].owner].name, "raps_pa");
        assert_eq!(p.input.modules[by_id["geo_log"].owner].name, "raps_pb");
    }

    #[test]
    fn config_toml_round_trip() {
        let c = scenario_builtin("soundsense").unwrap();
        let text = c.to_toml();
        let back = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn legacy_transform_centralizes_everything() {
        let c = scenario_builtin("pedometer").unwrap();
        let l = legacy_transform(&c);
        assert!(l.legacy_mode);
        assert!(l.modules.iter().all(|m| m.processor == "omap3"));
        assert!(l.sensors.iter().all(|s| s.processor == "omap3"));
        let p = prepare(&l).unwrap();
        assert!(!p.input.dsm_enabled);
        assert!(p.app.is_none());
    }

    #[test]
    fn non_local_sensor_rejected() {
        let mut c = scenario_builtin("pedometer").unwrap();
        c.sensors[0].processor = "lpc1343".into();
        assert!(matches!(
            prepare(&c),
            Err(ScenarioError::NonLocalSensor(_, 0))
        ));
    }

    #[test]
    fn footprints_of_benchmark_peripherals_are_in_band() {
        for name in BUILTIN_NAMES {
            let c = scenario_builtin(name).unwrap();
            let p = prepare(&c).unwrap();
            let app = p.app.unwrap();
            for m in &c.modules {
                if m.kind == ModuleKind::Peripheral {
                    let fp = app.footprints[&m.id];
                    assert!(
                        (36..=72).contains(&fp.bytes),
                        "{name}/{}: {} bytes ({} sites)",
                        m.id,
                        fp.bytes,
                        fp.sites
                    );
                }
            }
        }
    }
}
