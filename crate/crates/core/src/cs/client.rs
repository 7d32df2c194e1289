use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use crate::merkle::Digest;
use crate::pki::RevocationList;

use super::protocol::{Request, Response, MAX_LINE_LEN};
use super::{CsError, RootRecord, RootRegistry};

const TIMEOUT: Duration = Duration::from_secs(3);

/// TCP client for a [`super::CsServer`]. Holds one connection, reopened on
/// demand after a failure.
#[derive(Debug)]
pub struct CsClient {
    addr: SocketAddr,
    token: Option<String>,
    conn: Mutex<Option<BufReader<TcpStream>>>,
}

fn unreachable(e: io::Error) -> CsError {
    CsError::Unreachable(e.to_string())
}

impl CsClient {
    /// Resolves `addr` without connecting; the first call connects.
    pub fn new(addr: impl ToSocketAddrs, token: Option<&str>) -> Result<Self, CsError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(unreachable)?
            .next()
            .ok_or_else(|| CsError::Unreachable("address resolved to nothing".into()))?;
        Ok(CsClient {
            addr,
            token: token.map(str::to_owned),
            conn: Mutex::new(None),
        })
    }

    /// Connects immediately, failing if the service is down or rejects the token.
    pub fn connect(addr: impl ToSocketAddrs, token: Option<&str>) -> Result<Self, CsError> {
        let client = Self::new(addr, token)?;
        let conn = client.open()?;
        *client.conn.lock().expect("poisoned") = Some(conn);
        Ok(client)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn open(&self) -> Result<BufReader<TcpStream>, CsError> {
        let stream = TcpStream::connect_timeout(&self.addr, TIMEOUT).map_err(unreachable)?;
        stream
            .set_read_timeout(Some(TIMEOUT))
            .map_err(unreachable)?;
        stream
            .set_write_timeout(Some(TIMEOUT))
            .map_err(unreachable)?;
        let _ = stream.set_nodelay(true);
        let mut conn = BufReader::new(stream);
        if let Some(token) = &self.token {
            match exchange(&mut conn, &Request::Auth(token.clone()))? {
                Response::Ok => {}
                Response::Err(_) => return Err(CsError::Unauthenticated),
                other => return Err(CsError::Protocol(format!("unexpected reply {other}"))),
            }
        }
        Ok(conn)
    }

    fn call<T>(
        &self,
        request: &Request,
        finish: impl Fn(Response, &mut BufReader<TcpStream>) -> Result<T, CsError>,
    ) -> Result<T, CsError> {
        let mut guard = self.conn.lock().expect("poisoned");
        // A cached connection may have been closed by the server; retry once
        // on a fresh one.
        let had_cached = guard.is_some();
        for attempt in 0..2 {
            let mut conn = match guard.take() {
                Some(c) => c,
                None => self.open()?,
            };
            let result = exchange(&mut conn, request).and_then(|r| finish(r, &mut conn));
            match result {
                Err(CsError::Unreachable(m)) => {
                    if attempt == 0 && had_cached {
                        continue;
                    }
                    return Err(CsError::Unreachable(m));
                }
                other => {
                    *guard = Some(conn);
                    return other;
                }
            }
        }
        unreachable!("loop returns")
    }
}

fn exchange(conn: &mut BufReader<TcpStream>, request: &Request) -> Result<Response, CsError> {
    let stream = conn.get_mut();
    writeln!(stream, "{request}").map_err(unreachable)?;
    stream.flush().map_err(unreachable)?;
    let mut line = String::new();
    let n = conn
        .by_ref()
        .take(MAX_LINE_LEN as u64 + 2)
        .read_line(&mut line)
        .map_err(unreachable)?;
    if n == 0 {
        return Err(CsError::Unreachable("connection closed".into()));
    }
    Response::parse(&line).map_err(CsError::Protocol)
}

fn unexpected<T>(r: Response) -> Result<T, CsError> {
    match r {
        Response::Err(m) if m == "unauthenticated" => Err(CsError::Unauthenticated),
        Response::Err(m) => Err(CsError::Protocol(m)),
        other => Err(CsError::Protocol(format!("unexpected reply {other}"))),
    }
}

impl RootRegistry for CsClient {
    fn get_root(&self, rsd_id: &str) -> Result<Option<RootRecord>, CsError> {
        let req = Request::Get {
            rsd_id: rsd_id.to_owned(),
        };
        self.call(&req, |r, _| match r {
            Response::Root(rec) => Ok(Some(rec)),
            Response::Unknown => Ok(None),
            other => unexpected(other),
        })
    }

    fn put_root(&self, rsd_id: &str, root: &Digest) -> Result<u64, CsError> {
        let req = Request::Put {
            rsd_id: rsd_id.to_owned(),
            root: *root,
        };
        self.call(&req, |r, _| match r {
            Response::Version(v) => Ok(v),
            other => unexpected(other),
        })
    }

    fn fetch_revocation_list(&self) -> Result<RevocationList, CsError> {
        self.call(&Request::Crl, |r, conn| match r {
            Response::Crl(len) => {
                let mut buf = vec![0u8; len];
                conn.read_exact(&mut buf).map_err(unreachable)?;
                Ok(RevocationList::decode(&buf)?)
            }
            other => unexpected(other),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cs::{CsServer, CsStore};
    use crate::pki::CertificateAuthority;
    use std::sync::Arc;

    fn serve() -> (CertificateAuthority, crate::cs::ServerHandle) {
        let ca = CertificateAuthority::from_seed([5; 32]);
        let store = CsStore::in_memory(
            vec!["tok".into()],
            ca.public_key(),
            ca.revocation_list(3, [9]),
        )
        .unwrap();
        let handle = CsServer::bind("127.0.0.1:0", Arc::new(store))
            .unwrap()
            .spawn()
            .unwrap();
        (ca, handle)
    }

    #[test]
    fn round_trip_over_tcp() {
        let (ca, server) = serve();
        let c = CsClient::connect(server.addr(), Some("tok")).unwrap();
        assert_eq!(c.get_root("m").unwrap(), None);
        let r = Digest::from_bytes([4; 32]);
        assert_eq!(c.put_root("m", &r).unwrap(), 1);
        assert_eq!(
            c.get_root("m").unwrap(),
            Some(RootRecord {
                root: r,
                version: 1
            })
        );
        let crl = c.fetch_revocation_list().unwrap();
        assert!(crl.verify(&ca.public_key()));
        assert_eq!(crl.version(), 3);
        assert!(crl.contains(9));
        // The connection is still usable after a binary payload.
        assert_eq!(c.put_root("m", &r).unwrap(), 2);
    }

    #[test]
    fn wrong_token_and_anonymous_put() {
        let (_, server) = serve();
        assert_eq!(
            CsClient::connect(server.addr(), Some("bad")).unwrap_err(),
            CsError::Unauthenticated
        );
        let anon = CsClient::connect(server.addr(), None).unwrap();
        assert_eq!(
            anon.put_root("m", &Digest::ZERO),
            Err(CsError::Unauthenticated)
        );
        assert_eq!(anon.get_root("m").unwrap(), None);
    }

    #[test]
    fn server_down_is_unreachable() {
        let (_, server) = serve();
        let addr = server.addr();
        let c = CsClient::connect(addr, Some("tok")).unwrap();
        server.shutdown();
        // Drop the listener side entirely by binding nothing there; the old
        // per-connection thread may still answer, so use a fresh client.
        let fresh = CsClient::new(addr, Some("tok")).unwrap();
        assert!(matches!(fresh.get_root("m"), Err(CsError::Unreachable(_))));
        drop(c);
    }
}
