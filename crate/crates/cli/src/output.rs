//! CSV tables with a commented provenance header, and ordered streaming of
//! per-seed results.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{CliError, Result};

/// A CSV file whose first lines are `# ` comments.
pub struct Table<W: Write> {
    inner: csv::Writer<W>,
}

impl Table<BufWriter<File>> {
    pub fn create(path: &Path, header: &[String]) -> Result<Self> {
        let f = File::create(path).map_err(CliError::io(format!("cannot create {}", path.display())))?;
        Self::new(BufWriter::new(f), header)
    }
}

impl<W: Write> Table<W> {
    pub fn new(mut w: W, header: &[String]) -> Result<Self> {
        for line in header {
            writeln!(w, "# {line}").map_err(CliError::io("cannot write header"))?;
        }
        Ok(Self { inner: csv::Writer::from_writer(w) })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.inner.serialize(row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(CliError::io("cannot flush table"))
    }
}

/// Reads every row of a table, skipping `#` lines.
pub fn read_table<T: DeserializeOwned, R: Read>(r: R) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Runs `work` on every item with up to `workers` threads and hands the
/// results to `sink` in item order, as soon as each prefix is complete.
pub fn for_each_ordered<I, T, F, S>(items: &[I], workers: usize, work: F, mut sink: S) -> Result<()>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync,
    S: FnMut(&I, T) -> Result<()>,
{
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, T)>();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            let tx = tx.clone();
            let (next, work) = (&next, &work);
            scope.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= items.len() {
                    break;
                }
                if tx.send((k, work(&items[k]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut emitted = 0;
        for (k, value) in rx {
            pending.insert(k, value);
            while let Some(value) = pending.remove(&emitted) {
                sink(&items[emitted], value)?;
                emitted += 1;
            }
        }
        Ok(())
    })
}
