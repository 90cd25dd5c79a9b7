use std::fs;

use avparse_cli::commands::MANIFEST;
use avparse_cli::{run, CONFIG_ENV};
use serde_json::Value;
use tempfile::TempDir;

#[test]
fn config_file_from_environment_is_honoured() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("env.cfg");
    let out = tmp.path().join("env_out");
    fs::write(&cfg, format!("out={}\nnum_videos=10\ntest_videos=3\n", out.display())).unwrap();
    std::env::set_var(CONFIG_ENV, &cfg);
    let code = run(["avparse", "gen-synth"]);
    std::env::remove_var(CONFIG_ENV);
    assert_eq!(code, 0);
    let doc: Value = serde_json::from_str(&fs::read_to_string(out.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(doc["videos"]["train"], 7);
    assert_eq!(doc["videos"]["test"], 3);
}
