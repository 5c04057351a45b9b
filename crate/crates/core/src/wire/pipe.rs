//! In-memory byte stream with bounded buffering, standing in for a socket.

use std::io::{self, Read, Write};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TryRecvError};

pub struct PipeWriter {
    tx: SyncSender<Vec<u8>>,
}

pub struct PipeReader {
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
}

/// A connected writer/reader pair. At most `capacity` writes are buffered;
/// further writes block until the reader catches up. Dropping the writer ends
/// the stream.
pub fn memory_pipe(capacity: usize) -> (PipeWriter, PipeReader) {
    let (tx, rx) = sync_channel(capacity);
    (
        PipeWriter { tx },
        PipeReader {
            rx,
            buf: Vec::new(),
            pos: 0,
        },
    )
}

impl Write for PipeWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        if data.is_empty() {
            return Ok(0);
        }
        self.tx
            .send(data.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "reader dropped"))?;
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl PipeReader {
    /// True when a read would not block.
    pub fn has_data(&mut self) -> bool {
        if self.pos < self.buf.len() {
            return true;
        }
        match self.rx.try_recv() {
            Ok(chunk) => {
                self.buf = chunk;
                self.pos = 0;
                true
            }
            Err(TryRecvError::Empty) => false,
            Err(TryRecvError::Disconnected) => true,
        }
    }
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        while self.pos >= self.buf.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_flow_in_order_then_eof() {
        let (mut w, mut r) = memory_pipe(4);
        let t = std::thread::spawn(move || {
            for i in 0..100u8 {
                w.write_all(&[i, i]).unwrap();
            }
        });
        let mut all = Vec::new();
        r.read_to_end(&mut all).unwrap();
        t.join().unwrap();
        assert_eq!(all.len(), 200);
        assert!(all
            .chunks(2)
            .enumerate()
            .all(|(i, c)| c == [i as u8, i as u8]));
    }

    #[test]
    fn write_after_reader_drop_fails() {
        let (mut w, r) = memory_pipe(1);
        drop(r);
        assert!(w.write_all(b"x").is_err());
    }
}
