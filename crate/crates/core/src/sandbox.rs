//! Subprocess execution under wall-clock, output and memory limits.
//!
//! Every program runs in its own process group inside a fresh temporary
//! working directory with a stripped environment. On timeout, output overflow
//! or normal exit the whole group is killed, so descendants do not outlive
//! the call.

use std::io::{Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const POLL_INTERVAL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    pub wall_seconds: f64,
    pub max_output_bytes: usize,
    pub max_memory_bytes: u64,
    /// Interpreter command used to launch candidates and oracles. May carry
    /// extra arguments separated by whitespace, e.g. `python3 -I`.
    pub interpreter: String,
    /// Worker count; `0` means one per logical core.
    pub workers: usize,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            wall_seconds: 10.0,
            max_output_bytes: 1 << 20,
            max_memory_bytes: 512 << 20,
            interpreter: "python3".to_string(),
            workers: 0,
        }
    }
}

impl SandboxConfig {
    pub fn limits(&self) -> Limits {
        Limits {
            wall: Duration::from_secs_f64(self.wall_seconds),
            max_output_bytes: self.max_output_bytes,
            max_memory_bytes: self.max_memory_bytes,
        }
    }

    pub fn worker_count(&self) -> usize {
        if self.workers == 0 {
            thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub wall: Duration,
    pub max_output_bytes: usize,
    pub max_memory_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Completed,
    Timeout,
    LaunchFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitStatus {
    Code(i32),
    Signal(i32),
    /// The process was never started or never reaped.
    Unknown,
}

impl ExitStatus {
    pub fn success(self) -> bool {
        self == ExitStatus::Code(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionResult {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub exit_status: ExitStatus,
    pub wall_time: Duration,
    pub outcome: Outcome,
    /// Set when stdout or stderr hit `max_output_bytes` and the program was
    /// killed.
    pub output_truncated: bool,
    /// Human-readable reason for a launch failure.
    pub launch_error: Option<String>,
}

impl ExecutionResult {
    fn launch_failure(reason: String, started: Instant) -> Self {
        Self {
            stdout: Vec::new(),
            stderr: Vec::new(),
            exit_status: ExitStatus::Unknown,
            wall_time: started.elapsed(),
            outcome: Outcome::LaunchFailure,
            output_truncated: false,
            launch_error: Some(reason),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::Completed && self.exit_status.success() && !self.output_truncated
    }
}

/// A single program invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub input: Vec<u8>,
}

/// Runs jobs with a shared interpreter and limits on a bounded worker pool.
#[derive(Debug)]
pub struct Sandbox {
    interpreter: Vec<String>,
    limits: Limits,
    pool: rayon::ThreadPool,
}

impl Sandbox {
    pub fn new(config: &SandboxConfig) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.worker_count())
            .thread_name(|i| format!("sandbox-{i}"))
            .build()
            .expect("failed to build sandbox worker pool");
        Self {
            interpreter: config
                .interpreter
                .split_whitespace()
                .map(str::to_string)
                .collect(),
            limits: config.limits(),
            pool,
        }
    }

    pub fn limits(&self) -> Limits {
        self.limits
    }

    pub fn run(&self, job: &Job) -> ExecutionResult {
        run_program(&self.interpreter, &job.program, &job.args, &job.input, self.limits)
    }

    /// Runs every job on the worker pool; results are in submission order.
    pub fn run_batch(&self, jobs: &[Job]) -> Vec<ExecutionResult> {
        self.install(|| jobs.par_iter().map(|job| self.run(job)).collect())
    }

    /// Executes `f` inside the worker pool so nested parallel iterators share
    /// its concurrency bound.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

/// Launches `interpreter program args...`, feeds `input` on stdin and
/// collects output under `limits`.
pub fn run_program(
    interpreter: &[String],
    program: &Path,
    args: &[String],
    input: &[u8],
    limits: Limits,
) -> ExecutionResult {
    let started = Instant::now();
    let Some((command, interpreter_args)) = interpreter.split_first() else {
        return ExecutionResult::launch_failure("empty interpreter command".into(), started);
    };
    let program = match std::fs::canonicalize(program) {
        Ok(p) => p,
        Err(e) => {
            return ExecutionResult::launch_failure(
                format!("cannot resolve {}: {e}", program.display()),
                started,
            )
        }
    };
    if let Err(e) = std::fs::File::open(&program) {
        return ExecutionResult::launch_failure(
            format!("cannot read {}: {e}", program.display()),
            started,
        );
    }
    let workdir = match tempfile::Builder::new().prefix("mutamark-run-").tempdir() {
        Ok(d) => d,
        Err(e) => return ExecutionResult::launch_failure(format!("tempdir: {e}"), started),
    };

    let mut cmd = Command::new(command);
    cmd.args(interpreter_args)
        .arg(&program)
        .args(args)
        .current_dir(workdir.path())
        .env_clear()
        .env("HOME", workdir.path())
        .env("LANG", "C.UTF-8")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(path) = std::env::var_os("PATH") {
        cmd.env("PATH", path);
    }
    let memory = limits.max_memory_bytes;
    // SAFETY: only async-signal-safe libc calls between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            if libc::setpgid(0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            let as_limit = libc::rlimit {
                rlim_cur: memory as libc::rlim_t,
                rlim_max: memory as libc::rlim_t,
            };
            libc::setrlimit(libc::RLIMIT_AS, &as_limit);
            let no_core = libc::rlimit {
                rlim_cur: 0,
                rlim_max: 0,
            };
            libc::setrlimit(libc::RLIMIT_CORE, &no_core);
            Ok(())
        });
    }

    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return ExecutionResult::launch_failure(format!("spawn {command}: {e}"), started),
    };
    let pgid = child.id() as libc::pid_t;
    let overflow = Arc::new(AtomicBool::new(false));

    let stdin_thread = child.stdin.take().map(|mut stdin| {
        let input = input.to_vec();
        thread::spawn(move || {
            // Broken pipes are expected when the program ignores its input.
            let _ = stdin.write_all(&input);
        })
    });
    let stdout_thread = spawn_reader(
        child.stdout.take().expect("stdout piped"),
        limits.max_output_bytes,
        Arc::clone(&overflow),
    );
    let stderr_thread = spawn_reader(
        child.stderr.take().expect("stderr piped"),
        limits.max_output_bytes,
        Arc::clone(&overflow),
    );

    let (status, timed_out) = wait_with_deadline(&mut child, pgid, started, limits.wall, &overflow);
    // Reap anything the program left behind in its group before joining the
    // pipe readers, which would otherwise block on inherited descriptors.
    kill_group(pgid);
    let wall_time = started.elapsed();

    if let Some(t) = stdin_thread {
        let _ = t.join();
    }
    let stdout = stdout_thread.join().unwrap_or_default();
    let stderr = stderr_thread.join().unwrap_or_default();

    ExecutionResult {
        stdout,
        stderr,
        exit_status: status,
        wall_time,
        outcome: if timed_out {
            Outcome::Timeout
        } else {
            Outcome::Completed
        },
        output_truncated: overflow.load(Ordering::SeqCst),
        launch_error: None,
    }
}

fn wait_with_deadline(
    child: &mut Child,
    pgid: libc::pid_t,
    started: Instant,
    wall: Duration,
    overflow: &AtomicBool,
) -> (ExitStatus, bool) {
    let mut timed_out = false;
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return (convert_status(status), timed_out),
            Ok(None) => {}
            Err(_) => {
                kill_group(pgid);
                let status = child.wait().map(convert_status).unwrap_or(ExitStatus::Unknown);
                return (status, timed_out);
            }
        }
        if !timed_out && started.elapsed() >= wall {
            timed_out = true;
            kill_group(pgid);
        } else if overflow.load(Ordering::SeqCst) {
            kill_group(pgid);
        }
        thread::sleep(POLL_INTERVAL);
    }
}

fn convert_status(status: std::process::ExitStatus) -> ExitStatus {
    match (status.code(), status.signal()) {
        (Some(code), _) => ExitStatus::Code(code),
        (None, Some(sig)) => ExitStatus::Signal(sig),
        _ => ExitStatus::Unknown,
    }
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: plain syscall; ESRCH for an already-empty group is ignored.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

fn spawn_reader<R: Read + Send + 'static>(
    mut source: R,
    cap: usize,
    overflow: Arc<AtomicBool>,
) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 8192];
        loop {
            match source.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap - buf.len();
                    if n > room {
                        buf.extend_from_slice(&chunk[..room]);
                        overflow.store(true, Ordering::SeqCst);
                        break;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                }
            }
        }
        buf
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script(source: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".py").tempfile().unwrap();
        f.write_all(source.as_bytes()).unwrap();
        f
    }

    fn limits(wall: f64) -> Limits {
        SandboxConfig {
            wall_seconds: wall,
            ..Default::default()
        }
        .limits()
    }

    fn python() -> Vec<String> {
        vec!["python3".into()]
    }

    #[test]
    fn echoes_stdin() {
        let f = script("import sys\nsys.stdout.write(sys.stdin.read())\n");
        let r = run_program(&python(), f.path(), &[], b"ab", limits(10.0));
        assert_eq!(r.outcome, Outcome::Completed);
        assert_eq!(r.stdout, b"ab");
        assert_eq!(r.exit_status, ExitStatus::Code(0));
        assert!(r.succeeded());
    }

    #[test]
    fn passes_arguments_in_order() {
        let f = script("import sys\nprint(' '.join(sys.argv[1:]))\n");
        let args = vec!["NAND".to_string(), "two words".to_string()];
        let r = run_program(&python(), f.path(), &args, b"", limits(10.0));
        assert_eq!(r.stdout, b"NAND two words\n");
    }

    #[test]
    fn times_out_infinite_loop() {
        let f = script("while True:\n    pass\n");
        let r = run_program(&python(), f.path(), &[], b"", limits(1.0));
        assert_eq!(r.outcome, Outcome::Timeout);
        assert!(r.wall_time >= Duration::from_secs(1));
        assert!(r.wall_time < Duration::from_secs(2));
        assert!(!r.exit_status.success());
    }

    #[test]
    fn unhandled_exception_is_nonzero_exit() {
        let f = script("raise ValueError('boom')\n");
        let r = run_program(&python(), f.path(), &[], b"", limits(10.0));
        assert_eq!(r.outcome, Outcome::Completed);
        assert_eq!(r.exit_status, ExitStatus::Code(1));
        assert!(String::from_utf8_lossy(&r.stderr).contains("ValueError"));
    }

    #[test]
    fn launch_failures_have_no_output() {
        let r = run_program(&python(), Path::new("/nonexistent/prog.py"), &[], b"", limits(1.0));
        assert_eq!(r.outcome, Outcome::LaunchFailure);
        assert!(r.stdout.is_empty() && r.stderr.is_empty());

        let f = script("print(1)\n");
        let r = run_program(&["no-such-interpreter-xyz".into()], f.path(), &[], b"", limits(1.0));
        assert_eq!(r.outcome, Outcome::LaunchFailure);
        assert!(r.stdout.is_empty() && r.stderr.is_empty());
    }

    #[test]
    fn truncates_large_output() {
        let f = script("import sys\nwhile True:\n    sys.stdout.write('x' * 65536)\n");
        let mut l = limits(10.0);
        l.max_output_bytes = 1000;
        let r = run_program(&python(), f.path(), &[], b"", l);
        assert!(r.output_truncated);
        assert_eq!(r.stdout.len(), 1000);
        assert_eq!(r.outcome, Outcome::Completed);
        assert!(!r.succeeded());
    }

    #[test]
    fn environment_is_stripped() {
        std::env::set_var("MUTAMARK_SECRET_PROBE", "leak");
        let f = script("import os\nprint(os.environ.get('MUTAMARK_SECRET_PROBE', 'absent'))\n");
        let r = run_program(&python(), f.path(), &[], b"", limits(10.0));
        assert_eq!(r.stdout, b"absent\n");
    }

    #[test]
    fn batch_preserves_submission_order() {
        let f = script("import sys, time\nn = int(sys.argv[1])\ntime.sleep(0.05 * (3 - n))\nprint(n)\n");
        let sandbox = Sandbox::new(&SandboxConfig {
            workers: 3,
            ..Default::default()
        });
        let jobs: Vec<Job> = (0..3)
            .map(|n| Job {
                program: f.path().to_path_buf(),
                args: vec![n.to_string()],
                input: Vec::new(),
            })
            .collect();
        let out: Vec<_> = sandbox
            .run_batch(&jobs)
            .into_iter()
            .map(|r| String::from_utf8(r.stdout).unwrap())
            .collect();
        assert_eq!(out, ["0\n", "1\n", "2\n"]);
    }
}
