//! Socket bridge to an external estimator.
//!
//! Request: `len_i: u32 LE, emb_i, len_j: u32 LE, emb_j`.
//! Response: 17 little-endian `f64`s: `p_hat[3], sigma_p[3], q_hat[4] (w, x, y, z), sigma_q, reserved[6]`.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use super::{EstimatorError, NodeId, Observation, PoseEstimate, PoseEstimator};
use crate::geometry::{UnitQuat, Vec3, NORM_TOLERANCE};

pub const RESPONSE_FLOATS: usize = 17;
pub const RESPONSE_BYTES: usize = RESPONSE_FLOATS * 8;

pub fn encode_request(emb_i: &[u8], emb_j: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + emb_i.len() + emb_j.len());
    for emb in [emb_i, emb_j] {
        out.extend_from_slice(&(emb.len() as u32).to_le_bytes());
        out.extend_from_slice(emb);
    }
    out
}

pub fn encode_response(est: &PoseEstimate) -> [u8; RESPONSE_BYTES] {
    let q = est.q_hat.to_array();
    let vals: [f64; RESPONSE_FLOATS] = [
        est.p_hat.x, est.p_hat.y, est.p_hat.z,
        est.sigma_p.x, est.sigma_p.y, est.sigma_p.z,
        q[0], q[1], q[2], q[3],
        est.sigma_q,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    let mut out = [0u8; RESPONSE_BYTES];
    for (chunk, v) in out.chunks_exact_mut(8).zip(vals) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_response(bytes: &[u8], src: NodeId, dst: NodeId) -> Result<PoseEstimate, EstimatorError> {
    if bytes.len() != RESPONSE_BYTES {
        return Err(EstimatorError::Framing { expected: RESPONSE_BYTES, got: bytes.len() });
    }
    let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if v[..11].iter().any(|x| !x.is_finite()) {
        return Err(EstimatorError::Invalid("non-finite field".into()));
    }
    let norm = (v[6] * v[6] + v[7] * v[7] + v[8] * v[8] + v[9] * v[9]).sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(EstimatorError::NonUnitQuaternion(norm));
    }
    let q_hat = UnitQuat::new(v[6], v[7], v[8], v[9]).map_err(|_| EstimatorError::NonUnitQuaternion(norm))?;
    let est = PoseEstimate {
        src,
        dst,
        p_hat: Vec3::new(v[0], v[1], v[2]),
        sigma_p: Vec3::new(v[3], v[4], v[5]),
        q_hat,
        sigma_q: v[10],
    };
    est.validate()?;
    Ok(est)
}

#[derive(Debug, Clone)]
pub struct RemoteEstimator {
    pub endpoint: SocketAddr,
    pub timeout: Duration,
}

impl RemoteEstimator {
    pub fn new(endpoint: SocketAddr, timeout: Duration) -> Self {
        Self { endpoint, timeout }
    }

    /// One request/response exchange on a fresh connection.
    pub fn remote_estimate(&self, emb_i: &[u8], emb_j: &[u8], src: NodeId, dst: NodeId) -> Result<PoseEstimate, EstimatorError> {
        let map_timeout = |e: std::io::Error| match e.kind() {
            ErrorKind::WouldBlock | ErrorKind::TimedOut => EstimatorError::Timeout,
            _ => EstimatorError::Io(e),
        };
        let mut stream = TcpStream::connect_timeout(&self.endpoint, self.timeout).map_err(map_timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        stream.write_all(&encode_request(emb_i, emb_j)).map_err(map_timeout)?;
        stream.flush()?;
        let mut buf = Vec::with_capacity(RESPONSE_BYTES);
        let mut chunk = [0u8; RESPONSE_BYTES];
        loop {
            match stream.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => {
                    buf.extend_from_slice(&chunk[..n]);
                    if buf.len() > RESPONSE_BYTES {
                        break;
                    }
                }
                Err(e) => return Err(map_timeout(e)),
            }
        }
        decode_response(&buf, src, dst)
    }
}

impl PoseEstimator for RemoteEstimator {
    fn estimate(&mut self, obs_i: &Observation, obs_j: &Observation) -> Result<PoseEstimate, EstimatorError> {
        self.remote_estimate(&obs_i.embedding, &obs_j.embedding, obs_i.node_id, obs_j.node_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;
    use std::thread;

    fn fixed() -> PoseEstimate {
        PoseEstimate {
            src: 1,
            dst: 2,
            p_hat: Vec3::new(0.1, -2.5, 0.03),
            sigma_p: Vec3::new(0.2, 0.3, 0.4),
            q_hat: UnitQuat::from_axis_angle(Vec3::new(0.2, 0.1, 1.0), 0.77),
            sigma_q: 0.05,
        }
    }

    /// Serves one connection: reads a full request, then writes `reply(request)`.
    fn serve_once(reply: impl FnOnce(Vec<u8>) -> Vec<u8> + Send + 'static) -> SocketAddr {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut req = Vec::new();
            for _ in 0..2 {
                let mut len = [0u8; 4];
                s.read_exact(&mut len).unwrap();
                let mut emb = vec![0u8; u32::from_le_bytes(len) as usize];
                s.read_exact(&mut emb).unwrap();
                req.extend_from_slice(&len);
                req.extend_from_slice(&emb);
            }
            let out = reply(req);
            s.write_all(&out).unwrap();
        });
        addr
    }

    #[test]
    fn roundtrip_fixed_estimate() {
        let addr = serve_once(|req| {
            assert_eq!(req, encode_request(&[1, 2, 3], &[9; 10]));
            encode_response(&fixed()).to_vec()
        });
        let r = RemoteEstimator::new(addr, Duration::from_secs(2));
        let got = r.remote_estimate(&[1, 2, 3], &[9; 10], 1, 2).unwrap();
        assert_eq!(got.p_hat, fixed().p_hat);
        assert_eq!(got.sigma_p, fixed().sigma_p);
        assert_eq!(got.sigma_q.to_bits(), fixed().sigma_q.to_bits());
        assert_eq!(got.q_hat.to_array(), fixed().q_hat.to_array());
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let mut bad = fixed();
        bad.sigma_q = 0.0;
        let addr = serve_once(move |_| encode_response(&bad).to_vec());
        let r = RemoteEstimator::new(addr, Duration::from_secs(2));
        assert!(matches!(r.remote_estimate(&[], &[], 1, 2), Err(EstimatorError::Invalid(_))));
    }

    #[test]
    fn truncated_response_is_framing_error() {
        let addr = serve_once(|_| encode_response(&fixed())[..100].to_vec());
        let r = RemoteEstimator::new(addr, Duration::from_secs(2));
        assert!(matches!(
            r.remote_estimate(&[0; 4], &[0; 4], 1, 2),
            Err(EstimatorError::Framing { expected: RESPONSE_BYTES, got: 100 })
        ));
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let mut raw = encode_response(&fixed());
        raw[48..56].copy_from_slice(&2.0f64.to_le_bytes());
        assert!(matches!(decode_response(&raw, 0, 1), Err(EstimatorError::NonUnitQuaternion(_))));
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(600));
            drop(s);
        });
        let r = RemoteEstimator::new(addr, Duration::from_millis(150));
        assert!(matches!(r.remote_estimate(&[1], &[2], 0, 1), Err(EstimatorError::Timeout)));
        handle.join().unwrap();
    }
}
