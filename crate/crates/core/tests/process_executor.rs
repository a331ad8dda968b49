use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use chartlint_core::correction::{
    CorrectionError, ExecutionRequest, ExecutionStatus, Executor, ProcessExecutor,
};

fn runner() -> Option<ProcessExecutor> {
    let ok = Command::new("python3")
        .args(["-c", "import matplotlib"])
        .status()
        .is_ok_and(|s| s.success());
    if !ok {
        eprintln!("python3 with matplotlib unavailable; skipping");
        return None;
    }
    let script = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/support/fake_runner.py");
    Some(ProcessExecutor::new(
        "python3",
        vec![script.display().to_string()],
    ))
}

fn request(script: &str, timeout_s: u64) -> ExecutionRequest {
    ExecutionRequest {
        script: script.to_string(),
        runtime_profile: "python-viz".into(),
        timeout_s,
        memory_cap_mb: 512,
        output_format: "png".into(),
    }
}

const BAR: &str = "import matplotlib\nmatplotlib.use('Agg')\nimport matplotlib.pyplot as plt\n\
fig, ax = plt.subplots()\nax.bar(['a'], [1])\nfig.savefig('output.png', metadata={'Software': None})\n";

#[test]
fn one_bar_renders_png() {
    let Some(exec) = runner() else { return };
    let result = exec.execute(&request(BAR, 30)).unwrap();
    assert_eq!(result.status, ExecutionStatus::Success);
    let png = result.image.unwrap();
    assert!(png.starts_with(b"\x89PNG"));
    // Deterministic script, byte-identical image.
    let again = exec.execute(&request(BAR, 30)).unwrap().image.unwrap();
    assert_eq!(png, again);
}

#[test]
fn undefined_name_is_script_error() {
    let Some(exec) = runner() else { return };
    let result = exec
        .execute(&request("print(undefined_thing)\n", 30))
        .unwrap();
    assert_eq!(result.status, ExecutionStatus::ScriptError);
    assert_eq!(result.error_kind.as_deref(), Some("NameError"));
    assert!(result.error_message.unwrap().contains("undefined_thing"));
    assert!(result.image.is_none());
}

#[test]
fn infinite_loop_times_out() {
    let Some(exec) = runner() else { return };
    let start = Instant::now();
    let result = exec
        .execute(&request("while True:\n    pass\n", 2))
        .unwrap();
    assert_eq!(result.status, ExecutionStatus::Timeout);
    assert!(start.elapsed() <= Duration::from_secs(4));
}

#[test]
fn image_outside_work_dir_rejected() {
    let Some(exec) = runner() else { return };
    let err = exec
        .execute(&request("# runner: escape\n", 30))
        .unwrap_err();
    assert!(matches!(err, CorrectionError::SandboxUnavailable(m) if m.contains("escapes")));
}

#[test]
fn missing_program_is_unavailable() {
    let exec = ProcessExecutor::new("/nonexistent/runner", vec![]);
    assert!(matches!(
        exec.execute(&request(BAR, 5)),
        Err(CorrectionError::SandboxUnavailable(_))
    ));
}
