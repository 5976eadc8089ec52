use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::loopback::gather_checked;
use super::mailbox::{sum_in_rank_order, Mailbox};
use super::wire::{MessageKind, WireMessage};
use super::Transport;
use crate::error::{input_err, protocol_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ENV_RANK: &str = "SAR_RANK";
pub const ENV_RANKFILE: &str = "SAR_RANKFILE";

/// Parses `rank host:port` lines; ranks must cover `0..n` exactly once.
pub fn parse_rankfile(text: &str) -> Result<Vec<String>> {
    let mut entries: Vec<(usize, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(r), Some(addr), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(input_err!(
                "rank file line {}: expected `rank host:port`",
                lineno + 1
            ));
        };
        let r: usize = r
            .parse()
            .map_err(|_| input_err!("rank file line {}: bad rank {r:?}", lineno + 1))?;
        entries.push((r, addr.to_string()));
    }
    entries.sort_by_key(|(r, _)| *r);
    for (k, (r, _)) in entries.iter().enumerate() {
        if *r != k {
            return Err(input_err!(
                "rank file must list ranks 0..{} exactly once",
                entries.len()
            ));
        }
    }
    if entries.is_empty() {
        return Err(input_err!("rank file lists no workers"));
    }
    if entries.len() > 256 {
        return Err(input_err!("at most 256 workers are supported"));
    }
    Ok(entries.into_iter().map(|(_, a)| a).collect())
}

pub fn read_rankfile(path: &Path) -> Result<Vec<SocketAddr>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| input_err!("cannot read rank file {}: {e}", path.display()))?;
    parse_rankfile(&text)?
        .iter()
        .map(|a| {
            a.to_socket_addrs()
                .ok()
                .and_then(|mut it| it.next())
                .ok_or_else(|| input_err!("cannot resolve worker address {a}"))
        })
        .collect()
}

/// Rank and rank-file path; `SAR_RANK` / `SAR_RANKFILE` take precedence
/// over the command-line values when set.
pub fn resolve_rank(
    cli_rank: Option<usize>,
    cli_rankfile: Option<PathBuf>,
) -> Result<(usize, PathBuf)> {
    let rank = match std::env::var(ENV_RANK) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| input_err!("{ENV_RANK}={v:?} is not a rank"))?,
        Err(_) => cli_rank.ok_or_else(|| input_err!("tcp transport needs --rank or {ENV_RANK}"))?,
    };
    let file = match std::env::var_os(ENV_RANKFILE) {
        Some(v) => PathBuf::from(v),
        None => cli_rankfile
            .ok_or_else(|| input_err!("tcp transport needs --rankfile or {ENV_RANKFILE}"))?,
    };
    Ok((rank, file))
}

/// One listening socket per worker plus one outgoing connection per peer.
/// Fetches are request/response on the outgoing connection; errors and
/// collective chunks are one-way.
pub struct TcpTransport<T> {
    rank: usize,
    addrs: Vec<SocketAddr>,
    mailbox: Arc<Mailbox<T>>,
    conns: Vec<Mutex<Option<TcpStream>>>,
    seq: AtomicU32,
    timeout: Duration,
    shutdown: Arc<AtomicBool>,
    listener: Option<JoinHandle<()>>,
}

impl<T: Scalar> TcpTransport<T> {
    pub fn bind(rank: usize, addrs: Vec<SocketAddr>, timeout: Duration) -> Result<Self> {
        let addr = *addrs.get(rank).ok_or_else(|| {
            input_err!("rank {rank} not in a rank file of {} workers", addrs.len())
        })?;
        let listener = TcpListener::bind(addr)?;
        Self::with_listener(rank, listener, addrs, timeout)
    }

    /// Uses an already bound listener (handy when ports are chosen by the OS).
    pub fn with_listener(
        rank: usize,
        listener: TcpListener,
        addrs: Vec<SocketAddr>,
        timeout: Duration,
    ) -> Result<Self> {
        if rank >= addrs.len() || addrs.len() > 256 {
            return Err(input_err!(
                "rank {rank} invalid for {} workers",
                addrs.len()
            ));
        }
        let mailbox = Arc::new(Mailbox::new(timeout));
        let shutdown = Arc::new(AtomicBool::new(false));
        listener.set_nonblocking(true)?;
        let handle = {
            let (mailbox, shutdown) = (mailbox.clone(), shutdown.clone());
            std::thread::Builder::new()
                .name(format!("sar-listen-{rank}"))
                .spawn(move || accept_loop::<T>(listener, mailbox, shutdown, rank))?
        };
        Ok(TcpTransport {
            rank,
            conns: (0..addrs.len()).map(|_| Mutex::new(None)).collect(),
            addrs,
            mailbox,
            seq: AtomicU32::new(0),
            timeout,
            shutdown,
            listener: Some(handle),
        })
    }

    fn connect(&self, peer: usize) -> Result<TcpStream> {
        let deadline = Instant::now() + self.timeout;
        loop {
            match TcpStream::connect(self.addrs[peer]) {
                Ok(s) => {
                    s.set_nodelay(true)?;
                    s.set_read_timeout(Some(self.timeout))?;
                    return Ok(s);
                }
                Err(e) => {
                    if let Some(r) = self.mailbox.aborted() {
                        return Err(Error::Aborted(r));
                    }
                    if Instant::now() >= deadline {
                        return Err(Error::Timeout(format!(
                            "cannot connect to worker {peer}: {e}"
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
            }
        }
    }

    fn with_conn<R>(&self, peer: usize, f: impl FnOnce(&mut TcpStream) -> Result<R>) -> Result<R> {
        if peer >= self.addrs.len() {
            return Err(protocol_err!(
                "worker {peer} is not part of a world of {}",
                self.addrs.len()
            ));
        }
        let mut slot = self.conns[peer].lock().unwrap_or_else(|e| e.into_inner());
        if slot.is_none() {
            *slot = Some(self.connect(peer)?);
        }
        let res = f(slot.as_mut().unwrap());
        if res.is_err() {
            *slot = None;
        }
        res
    }

    fn send(&self, peer: usize, msg: &WireMessage) -> Result<()> {
        self.with_conn(peer, |s| msg.write_to(s))
    }

    fn check_alive(&self) -> Result<()> {
        match self.mailbox.aborted() {
            Some(r) => Err(Error::Aborted(r)),
            None => Ok(()),
        }
    }
}

fn accept_loop<T: Scalar>(
    listener: TcpListener,
    mailbox: Arc<Mailbox<T>>,
    shutdown: Arc<AtomicBool>,
    rank: usize,
) {
    while !shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                let mailbox = mailbox.clone();
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let spawned = std::thread::Builder::new()
                    .name(format!("sar-serve-{rank}"))
                    .spawn(move || serve::<T>(stream, mailbox, rank));
                if let Err(e) = spawned {
                    log::error!("worker {rank}: cannot spawn connection handler: {e}");
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5))
            }
            Err(e) => {
                log::warn!("worker {rank}: accept failed: {e}");
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

fn serve<T: Scalar>(mut stream: TcpStream, mailbox: Arc<Mailbox<T>>, rank: usize) {
    loop {
        let msg = match WireMessage::read_from(&mut stream) {
            Ok(Some(m)) => m,
            Ok(None) => return,
            Err(e) => {
                if !matches!(e, Error::Io(_)) {
                    mailbox.abort(&format!("malformed frame: {e}"));
                }
                return;
            }
        };
        if let Err(e) = handle::<T>(&msg, &mut stream, &mailbox, rank) {
            log::warn!("worker {rank}: {e}");
            if !matches!(e, Error::Io(_)) {
                mailbox.abort(&e.to_string());
            }
            return;
        }
    }
}

fn handle<T: Scalar>(
    msg: &WireMessage,
    stream: &mut TcpStream,
    mailbox: &Mailbox<T>,
    rank: usize,
) -> Result<()> {
    let src = msg.src as usize;
    match msg.kind {
        MessageKind::FetchRequest => {
            let ids = msg.to_row_ids()?;
            let reply = match mailbox
                .snapshot(msg.layer)
                .and_then(|s| gather_checked(&s, &ids))
            {
                Ok(t) => WireMessage::tensor(MessageKind::FeatureChunk, rank, src, msg.layer, &t),
                Err(e) => WireMessage::abort(rank, src, &e.to_string()),
            };
            reply.write_to(stream)
        }
        MessageKind::GradChunk => {
            mailbox.push_error(msg.layer, src, msg.to_tensor::<T>()?);
            Ok(())
        }
        MessageKind::AllReduceChunk => {
            let data = msg.to_tensor::<f64>()?.into_data();
            if rank == 0 {
                mailbox.push_reduce_part(msg.layer, src, data)
            } else {
                mailbox.push_reduce_result(msg.layer, data);
                Ok(())
            }
        }
        MessageKind::Barrier => {
            mailbox.arrive_barrier(msg.layer);
            Ok(())
        }
        MessageKind::Abort => {
            mailbox.abort(&format!("worker {src} aborted: {}", msg.reason()));
            Ok(())
        }
        MessageKind::FeatureChunk => {
            Err(protocol_err!("unsolicited feature chunk from worker {src}"))
        }
    }
}

impl<T: Scalar> Transport<T> for TcpTransport<T> {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.addrs.len()
    }

    fn publish(&self, key: u32, rows: Arc<Tensor<T>>) -> Result<()> {
        self.mailbox.publish(key, rows);
        Ok(())
    }

    fn unpublish(&self, key: u32) {
        self.mailbox.unpublish(key);
    }

    fn fetch_rows(&self, peer: usize, key: u32, ids: &[u32]) -> Result<Tensor<T>> {
        self.check_alive()?;
        let req = WireMessage::fetch_request(self.rank, peer, key, ids);
        let reply = self.with_conn(peer, |s| {
            req.write_to(s)?;
            WireMessage::read_from(s)?
                .ok_or_else(|| protocol_err!("worker {peer} closed the connection"))
        })?;
        match reply.kind {
            MessageKind::FeatureChunk if reply.layer == key => {
                let t = reply.to_tensor::<T>()?;
                if t.rows() != ids.len() {
                    return Err(protocol_err!(
                        "asked worker {peer} for {} rows, got {}",
                        ids.len(),
                        t.rows()
                    ));
                }
                Ok(t)
            }
            MessageKind::Abort => Err(protocol_err!(
                "fetch from worker {peer} failed: {}",
                reply.reason()
            )),
            k => Err(protocol_err!("unexpected {k:?} reply to a fetch")),
        }
    }

    fn send_error(&self, peer: usize, key: u32, grad: Tensor<T>) -> Result<()> {
        self.check_alive()?;
        if peer == self.rank {
            self.mailbox.push_error(key, self.rank, grad);
            return Ok(());
        }
        self.send(
            peer,
            &WireMessage::tensor(MessageKind::GradChunk, self.rank, peer, key, &grad),
        )
    }

    fn recv_errors(&self, key: u32, expected: usize) -> Result<Vec<(usize, Tensor<T>)>> {
        self.mailbox.take_errors(key, expected)
    }

    fn allreduce_sum(&self, buf: &mut [f64]) -> Result<()> {
        self.check_alive()?;
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        let n = self.addrs.len();
        let sum = if self.rank == 0 {
            self.mailbox.push_reduce_part(seq, 0, buf.to_vec())?;
            let parts = self.mailbox.take_reduce_parts(seq, n)?;
            let sum = sum_in_rank_order(&parts)?;
            let t = Tensor::new(1, sum.len(), sum.clone())?;
            for peer in 1..n {
                self.send(
                    peer,
                    &WireMessage::tensor(MessageKind::AllReduceChunk, 0, peer, seq, &t),
                )?;
            }
            sum
        } else {
            let t = Tensor::new(1, buf.len(), buf.to_vec())?;
            self.send(
                0,
                &WireMessage::tensor(MessageKind::AllReduceChunk, self.rank, 0, seq, &t),
            )?;
            self.mailbox.take_reduce_result(seq)?
        };
        if sum.len() != buf.len() {
            return Err(protocol_err!(
                "all-reduce result has {} entries, expected {}",
                sum.len(),
                buf.len()
            ));
        }
        buf.copy_from_slice(&sum);
        Ok(())
    }

    fn barrier(&self) -> Result<()> {
        self.check_alive()?;
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        let n = self.addrs.len();
        if self.rank == 0 {
            self.mailbox.arrive_barrier(seq);
            self.mailbox.wait_barrier(seq, n)?;
            for peer in 1..n {
                self.send(peer, &WireMessage::barrier(0, peer, seq))?;
            }
            Ok(())
        } else {
            self.send(0, &WireMessage::barrier(self.rank, 0, seq))?;
            self.mailbox.wait_barrier(seq, 1)
        }
    }

    fn abort(&self, reason: &str) {
        self.mailbox.abort(reason);
        for peer in (0..self.addrs.len()).filter(|&p| p != self.rank) {
            // A connection busy with a blocked fetch is skipped; the peer
            // still learns of the abort through its own timeouts.
            let Ok(mut slot) = self.conns[peer].try_lock() else {
                continue;
            };
            if slot.is_none() {
                *slot =
                    TcpStream::connect_timeout(&self.addrs[peer], Duration::from_millis(200)).ok();
            }
            if let Some(s) = slot.as_mut() {
                let _ = WireMessage::abort(self.rank, peer, reason).write_to(s);
            }
        }
    }
}

impl<T> Drop for TcpTransport<T> {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        for c in &self.conns {
            if let Some(s) = c.lock().unwrap_or_else(|e| e.into_inner()).take() {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
        }
        if let Some(h) = self.listener.take() {
            let _ = h.join();
        }
    }
}
