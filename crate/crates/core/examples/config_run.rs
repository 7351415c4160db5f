//! Runs an experiment from an inline TOML configuration and writes the same
//! artifacts as the command-line tool.
//!
//! ```text
//! cargo run --release --example config_run -- [out_dir]
//! ```

use riskflow::config::ExperimentConfig;
use riskflow::experiment::run;

const CONFIG: &str = r#"
experiment = "generic_fbsde"
theta = 0.3

[grid]
steps = 50

[mc]
n_paths = 5000
seed = 3

[generic]
sigma = 0.25
marks = [-0.5, 0.5]
weights = [0.5, 0.5]
jump_size = 0.2
"#;

fn main() -> riskflow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "riskflow-out".into());
    let mut config = ExperimentConfig::from_toml(CONFIG)?;
    config.output.dir = out.into();
    let output = run(&config)?;
    for path in output.write(&config.output.dir)? {
        println!("wrote {}", path.display());
    }
    println!("y0 {}", output.result["y0"]["value"]);
    println!("log J^theta {}", output.result["log_J_theta"]["value"]);
    println!("determinism hash {}", output.hash);
    Ok(())
}
