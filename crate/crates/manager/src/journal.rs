//! On-disk job journal: `jobs/<id>/job.json` plus the submitted archive.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::warn;

use crate::job::EvaluationJob;

const ARCHIVE: &str = "archive.tar.gz";
const RECORD: &str = "job.json";

#[derive(Debug, Clone)]
pub struct Journal {
    dir: PathBuf,
}

impl Journal {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn job_dir(&self, id: &str) -> PathBuf {
        self.dir.join(id)
    }

    pub fn archive_path(&self, id: &str) -> PathBuf {
        self.job_dir(id).join(ARCHIVE)
    }

    pub fn create(&self, job: &EvaluationJob, archive: &[u8]) -> io::Result<()> {
        fs::create_dir_all(self.job_dir(&job.id))?;
        write_atomic(&self.archive_path(&job.id), archive)?;
        self.save(job)
    }

    /// Rewrites the job record; readers never see a partial file.
    pub fn save(&self, job: &EvaluationJob) -> io::Result<()> {
        let text = serde_json::to_vec_pretty(job).map_err(io::Error::other)?;
        write_atomic(&self.job_dir(&job.id).join(RECORD), &text)
    }

    pub fn archive(&self, id: &str) -> io::Result<Vec<u8>> {
        fs::read(self.archive_path(id))
    }

    /// Drops the stored archive once a job is terminal.
    pub fn release_archive(&self, id: &str) {
        let _ = fs::remove_file(self.archive_path(id));
    }

    /// Every readable job record, in submission order.
    pub fn load(&self) -> io::Result<Vec<EvaluationJob>> {
        let mut jobs = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path().join(RECORD);
            match fs::read(&path).map(|b| serde_json::from_slice::<EvaluationJob>(&b)) {
                Ok(Ok(job)) => jobs.push(job),
                Ok(Err(e)) => warn!("skipping {}: {e}", path.display()),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => warn!("skipping {}: {e}", path.display()),
            }
        }
        jobs.sort_by_key(|j| j.seq);
        Ok(jobs)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
