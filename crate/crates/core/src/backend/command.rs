//! Fine-tuning through an external trainer command.
//!
//! The command receives `SEMIEVOL_TRAIN_FILE`, `SEMIEVOL_BASE_MODEL`,
//! `SEMIEVOL_EPOCHS` and `SEMIEVOL_OUT_DIR`; exit status 0 plus the last
//! non-empty stdout line names the new model.

use std::collections::HashMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use super::{validate_training_file, FineTuneJob, FineTuner, JobStatus, ModelRef, ModelRole};
use crate::error::{Error, Result};

pub struct CommandFineTuner {
    program: String,
    args: Vec<String>,
    out_root: PathBuf,
    label: String,
    running: Mutex<HashMap<String, Child>>,
    counter: AtomicU64,
}

impl CommandFineTuner {
    pub fn new(command: &[String], out_root: impl Into<PathBuf>) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("fine-tune command is empty".into()))?;
        Ok(CommandFineTuner {
            program: program.clone(),
            args: args.to_vec(),
            out_root: out_root.into(),
            label: format!("command:{program}"),
            running: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    fn job_dir(&self, id: &str) -> PathBuf {
        self.out_root.join(id)
    }

    fn finish(&self, job: &FineTuneJob, code: Option<i32>) -> Result<FineTuneJob> {
        let dir = self.job_dir(&job.id);
        let read = |name: &str| fs::read_to_string(dir.join(name)).unwrap_or_default();
        let mut done = job.clone();
        if code == Some(0) {
            let stdout = read("stdout.log");
            match stdout.lines().rev().map(str::trim).find(|l| !l.is_empty()) {
                Some(name) => {
                    done.status = JobStatus::Succeeded;
                    done.result = Some(ModelRef {
                        name: name.to_string(),
                        role: job.target_role,
                        backend: self.label.clone(),
                        job: Some(job.id.clone()),
                    });
                }
                None => {
                    done.status = JobStatus::Failed;
                    done.error = Some("trainer exited 0 but printed no model id".into());
                }
            }
        } else {
            done.status = JobStatus::Failed;
            let code = code.map_or("signal".to_string(), |c| c.to_string());
            done.error = Some(format!("trainer exited {code}: {}", read("stderr.log").trim()));
        }
        Ok(done)
    }
}

impl FineTuner for CommandFineTuner {
    fn start_finetune(
        &self,
        base: &ModelRef,
        training_file: &Path,
        epochs: u32,
        target: ModelRole,
    ) -> Result<FineTuneJob> {
        validate_training_file(training_file)?;
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        let id = format!("cmdjob-{}-{n}", std::process::id());
        let dir = self.job_dir(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stdout = File::create(dir.join("stdout.log")).map_err(|e| Error::io(&dir, e))?;
        let stderr = File::create(dir.join("stderr.log")).map_err(|e| Error::io(&dir, e))?;
        let train = fs::canonicalize(training_file).map_err(|e| Error::io(training_file, e))?;

        let child = Command::new(&self.program)
            .args(&self.args)
            .env("SEMIEVOL_TRAIN_FILE", &train)
            .env("SEMIEVOL_BASE_MODEL", &base.name)
            .env("SEMIEVOL_EPOCHS", epochs.to_string())
            .env("SEMIEVOL_OUT_DIR", &dir)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .spawn()
            .map_err(|e| Error::FineTune(format!("cannot start {}: {e}", self.program)))?;
        self.running
            .lock()
            .expect("job table poisoned")
            .insert(id.clone(), child);

        Ok(FineTuneJob {
            id,
            base: base.clone(),
            training_file: training_file.to_path_buf(),
            epochs,
            target_role: target,
            status: JobStatus::Running,
            result: None,
            error: None,
        })
    }

    fn poll(&self, job: &FineTuneJob) -> Result<FineTuneJob> {
        if job.is_terminal() {
            return Ok(job.clone());
        }
        let mut running = self.running.lock().expect("job table poisoned");
        let child = running
            .get_mut(&job.id)
            .ok_or_else(|| Error::FineTune(format!("unknown job {}", job.id)))?;
        let status = child
            .try_wait()
            .map_err(|e| Error::FineTune(format!("waiting on {}: {e}", job.id)))?;
        match status {
            None => Ok(job.clone()),
            Some(status) => {
                running.remove(&job.id);
                drop(running);
                self.finish(job, status.code())
            }
        }
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::backend::wait_for_job;
    use std::time::Duration;

    fn payload(dir: &Path) -> PathBuf {
        let path = dir.join("train.jsonl");
        fs::write(
            &path,
            "{\"messages\":[{\"role\":\"user\",\"content\":\"q\"},{\"role\":\"assistant\",\"content\":\"Answer: A\"}]}\n",
        )
        .unwrap();
        path
    }

    fn run(script: &str) -> FineTuneJob {
        let dir = tempfile::tempdir().unwrap();
        let train = payload(dir.path());
        let cmd = vec!["sh".to_string(), "-c".to_string(), script.to_string()];
        let ft = CommandFineTuner::new(&cmd, dir.path().join("jobs")).unwrap();
        let base = ModelRef::base("base-model", "test");
        let job = ft.start_finetune(&base, &train, 2, ModelRole::Warm).unwrap();
        wait_for_job(&ft, job, Duration::from_millis(10), Duration::from_secs(20)).unwrap()
    }

    #[test]
    fn last_stdout_line_names_the_model() {
        let job = run(
            "test -f \"$SEMIEVOL_TRAIN_FILE\" && echo training $SEMIEVOL_BASE_MODEL for $SEMIEVOL_EPOCHS && echo \"ft-$SEMIEVOL_EPOCHS\" && echo",
        );
        assert_eq!(job.status, JobStatus::Succeeded);
        let result = job.result.unwrap();
        assert_eq!(result.name, "ft-2");
        assert_eq!(result.role, ModelRole::Warm);
    }

    #[test]
    fn nonzero_exit_fails_with_stderr() {
        let job = run("echo 'out of memory' >&2; exit 3");
        assert_eq!(job.status, JobStatus::Failed);
        assert!(job.result.is_none());
        let err = job.error.unwrap();
        assert!(err.contains("exited 3"), "{err}");
        assert!(err.contains("out of memory"), "{err}");
    }

    #[test]
    fn schema_invalid_payload_is_rejected_before_spawn() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.jsonl");
        fs::write(&bad, "{\"prompt\":\"x\"}\n").unwrap();
        let ft = CommandFineTuner::new(&["true".to_string()], dir.path()).unwrap();
        let err = ft
            .start_finetune(&ModelRef::base("m", "t"), &bad, 2, ModelRole::Warm)
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
