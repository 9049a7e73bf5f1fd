//! Builds an engine from a TOML run configuration, learns from a handful of
//! demonstrations and writes nothing to disk.

use ical::config::RunConfig;
use ical::deploy::evaluate_suite;
use ical::hitl::ScriptedOracle;
use ical::pipeline::{generate_demos, learn};

const CONFIG: &str = r#"
seed = 21

[backend]
spec = "mock:rules"
embedding_dim = 32

[retrieval]
instruction = 0.7
textual = 0.3
visual = 0.0

[demos]
count = 12

[hitl]
n_feedbacks_max = 3

[deploy]
mode = "step_loop"

[eval]
tasks = 10
"#;

fn main() {
    let cfg = RunConfig::from_toml_str(CONFIG).expect("valid config");
    let (catalog, engine) = cfg.build().expect("engine");
    let demos = generate_demos(&catalog, cfg.demos.split, cfg.demos.count, cfg.seed, cfg.demos.noise);
    let summary = learn(&engine, &catalog, &demos, &cfg.learn_config(), &mut ScriptedOracle);
    print!("{}", summary.table());
    let tasks: Vec<_> = catalog.interleaved(cfg.eval.split, cfg.eval.tasks).into_iter().cloned().collect();
    let report = evaluate_suite(&engine, "configured", &tasks, Some(cfg.eval.split), cfg.seed, &cfg.deploy);
    print!("{}", report.table());
}
