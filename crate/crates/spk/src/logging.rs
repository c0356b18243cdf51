//! Structured metric logging.
//!
//! Every metric flows through one `Logger` as a `LogRecord` named
//! `{stage}/{source}/{metric}`. Records fan out to attached sinks on a
//! background writer thread, so the training loop never blocks on I/O; a
//! sink that fails is warned about once and dropped.

use crate::error::Result;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub name: String,
    pub value: f64,
    pub step: u64,
    pub epoch: u64,
}

pub trait MetricSink: Send {
    fn write(&mut self, record: &LogRecord) -> Result<()>;
    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Prints records through the `log` facade at info level.
pub struct ConsoleSink;

impl MetricSink for ConsoleSink {
    fn write(&mut self, r: &LogRecord) -> Result<()> {
        log::info!("{} = {:.6} (step {}, epoch {})", r.name, r.value, r.step, r.epoch);
        Ok(())
    }
}

/// Appends one CSV row per record. The header is written eagerly so even an
/// empty run leaves a parseable file.
pub struct CsvSink {
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path)?;
        file.write_all(b"name,value,step,epoch\n")?;
        file.flush()?;
        Ok(Self {
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }
}

impl MetricSink for CsvSink {
    fn write(&mut self, r: &LogRecord) -> Result<()> {
        self.writer
            .write_record([
                r.name.as_str(),
                &r.value.to_string(),
                &r.step.to_string(),
                &r.epoch.to_string(),
            ])
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Collects records in memory behind a shared handle; the test and query
/// sink.
pub struct MemorySink {
    records: Arc<Mutex<Vec<LogRecord>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self {
            records: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn handle(&self) -> Arc<Mutex<Vec<LogRecord>>> {
        Arc::clone(&self.records)
    }
}

impl Default for MemorySink {
    fn default() -> Self {
        Self::new()
    }
}

impl MetricSink for MemorySink {
    fn write(&mut self, r: &LogRecord) -> Result<()> {
        self.records.lock().expect("sink poisoned").push(r.clone());
        Ok(())
    }
}

enum Message {
    Record(LogRecord),
    Flush(mpsc::Sender<()>),
}

/// Fan-out logger. `log` is non-blocking and thread-safe; records are
/// written by one background thread that owns the sinks.
pub struct Logger {
    tx: Option<mpsc::Sender<Message>>,
    worker: Option<JoinHandle<()>>,
}

impl Logger {
    pub fn new(sinks: Vec<Box<dyn MetricSink>>) -> Self {
        let (tx, rx) = mpsc::channel::<Message>();
        let worker = std::thread::spawn(move || {
            let mut sinks: Vec<Option<Box<dyn MetricSink>>> =
                sinks.into_iter().map(Some).collect();
            for msg in rx {
                match msg {
                    Message::Record(record) => {
                        for slot in sinks.iter_mut() {
                            let failed = match slot {
                                Some(sink) => sink.write(&record).is_err(),
                                None => false,
                            };
                            if failed {
                                log::warn!(
                                    "metric sink failed writing {:?}; dropping the sink",
                                    record.name
                                );
                                *slot = None;
                            }
                        }
                    }
                    Message::Flush(ack) => {
                        for sink in sinks.iter_mut().flatten() {
                            if let Err(e) = sink.flush() {
                                log::warn!("metric sink flush failed: {e}");
                            }
                        }
                        let _ = ack.send(());
                    }
                }
            }
            for sink in sinks.iter_mut().flatten() {
                let _ = sink.flush();
            }
        });
        Self {
            tx: Some(tx),
            worker: Some(worker),
        }
    }

    /// Disconnected logger that drops everything. Handy for tests.
    pub fn disabled() -> Self {
        Logger::new(Vec::new())
    }

    /// Queues one record. A non-finite value is replaced by a flag record
    /// `{name}/nonfinite = 1.0` so the anomaly itself is visible in sinks.
    pub fn log(&self, name: impl Into<String>, value: f64, step: u64, epoch: u64) {
        let name = name.into();
        let record = if value.is_finite() {
            LogRecord { name, value, step, epoch }
        } else {
            LogRecord {
                name: format!("{name}/nonfinite"),
                value: 1.0,
                step,
                epoch,
            }
        };
        if let Some(tx) = &self.tx {
            let _ = tx.send(Message::Record(record));
        }
    }

    /// Blocks until every queued record has reached the sinks and they have
    /// flushed. Used at checkpoint boundaries and shutdown, not per step.
    pub fn sync(&self) {
        if let Some(tx) = &self.tx {
            let (ack_tx, ack_rx) = mpsc::channel();
            if tx.send(Message::Flush(ack_tx)).is_ok() {
                let _ = ack_rx.recv();
            }
        }
    }
}

impl Drop for Logger {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}
