use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use tempfile::NamedTempFile;

use super::trainer::{LogRecord, Trainer};
use crate::config::RunConfig;
use crate::data::Pair;
use crate::error::{Error, Result};
use crate::model::Checkpoint;

/// A finished training run.
pub struct Session {
    pub trainer: Trainer,
    pub held_out: Vec<Pair>,
    pub records: Vec<LogRecord>,
}

/// Log lines of an earlier run up to and including `step`.
fn previous_log(path: &Path, step: u64) -> Result<Vec<String>> {
    let Ok(file) = fs::File::open(path) else {
        return Ok(vec![LogRecord::HEADER.to_string()]);
    };
    let mut keep = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let done = line.split_whitespace().next().and_then(|s| s.parse::<u64>().ok());
        if done.is_none_or(|s| s <= step) {
            keep.push(line);
        }
    }
    Ok(keep)
}

/// Trains as configured, writing `train.log` and checkpoints under the
/// output directory.
///
/// With `resume` the full training state is restored from that checkpoint
/// and the run continues to `train.steps`. The log is streamed into a
/// temporary file and only moved into place on success. Periodic
/// checkpoints are complete files and survive an abort.
pub fn train_from_config(cfg: &RunConfig, resume: Option<&Path>, mut progress: impl FnMut(&LogRecord)) -> Result<Session> {
    cfg.validate()?;
    let (train, held_out) = cfg.data.load()?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let stored = ck.model_config()?;
            if stored != cfg.model {
                return Err(Error::Config(format!("checkpoint {} was trained with a different model configuration", path.display())));
            }
            Trainer::from_checkpoint(&ck, cfg.loss, cfg.train)?
        }
        None => Trainer::new(cfg.model, cfg.loss, cfg.train, cfg.seed)?,
    };

    let out = &cfg.output;
    fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let log_path = out.log();
    let mut log = NamedTempFile::new_in(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let head = if resume.is_some() { previous_log(&log_path, trainer.step())? } else { vec![LogRecord::HEADER.to_string()] };
    for line in head {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
    }

    let every = cfg.train.checkpoint_every;
    let mut records = Vec::new();
    trainer.run(&train, |t, rec| {
        writeln!(log, "{}", rec.to_line()).map_err(|e| Error::io(&log_path, e))?;
        progress(rec);
        records.push(*rec);
        if every > 0 && rec.step % every == 0 && rec.step < t.config.steps {
            t.save(&out.step_checkpoint(rec.step))?;
        }
        Ok(())
    })?;
    trainer.save(&out.checkpoint())?;
    log.persist(&log_path).map_err(|e| Error::io(&log_path, e.error))?;
    Ok(Session { trainer, held_out, records })
}
