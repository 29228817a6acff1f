use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::Agent;
use crate::ids::SimClock;

/// A running agent API endpoint. Dropping it stops accepting connections.
pub struct ApiServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ApiServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

/// Serves `agent` over TCP at `addr`, one thread per connection.
pub fn serve_api(
    agent: Arc<Agent>,
    addr: impl ToSocketAddrs,
    clock: SimClock,
) -> io::Result<ApiServer> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let accept = std::thread::Builder::new()
        .name(format!("agent-api-{}", agent.host()))
        .spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let agent = agent.clone();
                let clock = clock.clone();
                let stop = stop_flag.clone();
                std::thread::spawn(move || {
                    if let Err(e) = serve_connection(&agent, stream, &clock, &stop) {
                        log::debug!("agent {} connection closed: {e}", agent.host());
                    }
                });
            }
        })?;
    Ok(ApiServer {
        addr,
        stop,
        accept: Some(accept),
    })
}

fn serve_connection(
    agent: &Agent,
    stream: TcpStream,
    clock: &SimClock,
    stop: &AtomicBool,
) -> io::Result<()> {
    let mut writer = io::BufWriter::new(stream.try_clone()?);
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if stop.load(Ordering::SeqCst) || agent.is_halted() {
            break;
        }
        for out in agent.handle_request(&line, clock.now()) {
            writer.write_all(out.as_bytes())?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
    }
    Ok(())
}
