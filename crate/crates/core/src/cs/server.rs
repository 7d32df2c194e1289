use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use super::protocol::{Request, Response, MAX_LINE_LEN};
use super::{CsStore, Writer};

/// Serves a [`CsStore`] over TCP, one thread per connection.
pub struct CsServer {
    listener: TcpListener,
    store: Arc<CsStore>,
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    open: Arc<Mutex<Vec<TcpStream>>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops the server: no new connections are accepted and open ones are
    /// closed.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        for conn in self.open.lock().expect("poisoned").drain(..) {
            let _ = conn.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_accepting();
        }
    }
}

impl CsServer {
    pub fn bind(addr: impl ToSocketAddrs, store: Arc<CsStore>) -> io::Result<Self> {
        Ok(CsServer {
            listener: TcpListener::bind(addr)?,
            store,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections forever.
    pub fn serve(self) -> io::Result<()> {
        self.accept_loop(&AtomicBool::new(false), None)
    }

    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let open = Arc::new(Mutex::new(Vec::new()));
        let tracked = open.clone();
        let thread = thread::spawn(move || {
            let _ = self.accept_loop(&flag, Some(&tracked));
        });
        Ok(ServerHandle {
            addr,
            stop,
            open,
            thread: Some(thread),
        })
    }

    fn accept_loop(
        &self,
        stop: &AtomicBool,
        open: Option<&Mutex<Vec<TcpStream>>>,
    ) -> io::Result<()> {
        for conn in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            if let Some(open) = open {
                let mut open = open.lock().expect("poisoned");
                open.retain(|c| c.peer_addr().is_ok());
                if let Ok(c) = stream.try_clone() {
                    open.push(c);
                }
            }
            let store = self.store.clone();
            thread::spawn(move || {
                let _ = handle_connection(stream, &store);
            });
        }
        Ok(())
    }
}

fn handle_connection(stream: TcpStream, store: &CsStore) -> io::Result<()> {
    let mut out = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut writer: Option<Writer> = None;
    let mut line = String::new();
    loop {
        line.clear();
        let n = (&mut reader)
            .take(MAX_LINE_LEN as u64 + 2)
            .read_line(&mut line)?;
        if n == 0 {
            return Ok(());
        }
        if !line.ends_with('\n') {
            writeln!(out, "{}", Response::Err("line too long".into()))?;
            return Ok(());
        }
        let response = match Request::parse(&line) {
            Err(e) => Response::Err(e),
            Ok(Request::Auth(token)) => match store.authenticate(&token) {
                Some(w) => {
                    writer = Some(w);
                    Response::Ok
                }
                None => Response::Err("unauthorized".into()),
            },
            Ok(Request::Put { rsd_id, root }) => match &writer {
                None => Response::Err("unauthenticated".into()),
                Some(w) => match store.put_root(w, &rsd_id, &root) {
                    Ok(v) => Response::Version(v),
                    Err(e) => Response::Err(e.to_string()),
                },
            },
            Ok(Request::Get { rsd_id }) => match store.get_root(&rsd_id) {
                Some(r) => Response::Root(r),
                None => Response::Unknown,
            },
            Ok(Request::Crl) => {
                let enc = store.revocation_list().encode();
                writeln!(out, "{}", Response::Crl(enc.len()))?;
                out.write_all(&enc)?;
                out.flush()?;
                continue;
            }
        };
        writeln!(out, "{response}")?;
        out.flush()?;
    }
}
