//! Canonical little-endian packed payloads for coherence and RPC messages.
//! Header/framing overhead is folded into the link's base latency, so the
//! payload length here is what the latency model sees.

use crate::dsm::{DsmRequest, DsmResult};

const REQ_REPLICATE: u8 = 0;
const REQ_ACQUIRE: u8 = 1;
const REQ_RELEASE: u8 = 2;

pub fn encode_batch(requests: &[DsmRequest]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((requests.len() as u16).to_le_bytes());
    for r in requests {
        match r {
            DsmRequest::Replicate(o) => {
                out.push(REQ_REPLICATE);
                out.extend((*o as u16).to_le_bytes());
            }
            DsmRequest::Acquire(o) => {
                out.push(REQ_ACQUIRE);
                out.extend((*o as u16).to_le_bytes());
            }
            DsmRequest::Release(o, v) => {
                out.push(REQ_RELEASE);
                out.extend((*o as u16).to_le_bytes());
                out.extend((v.len() as u16).to_le_bytes());
                out.extend(v);
            }
        }
    }
    out
}

pub fn decode_batch(payload: &[u8]) -> Option<Vec<DsmRequest>> {
    let mut p = Cursor::new(payload);
    let count = p.u16()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = p.u8()?;
        let obj = p.u16()? as usize;
        out.push(match kind {
            REQ_REPLICATE => DsmRequest::Replicate(obj),
            REQ_ACQUIRE => DsmRequest::Acquire(obj),
            REQ_RELEASE => {
                let len = p.u16()? as usize;
                DsmRequest::Release(obj, p.bytes(len)?.to_vec())
            }
            _ => return None,
        });
    }
    Some(out)
}

pub fn decode_batch_objects(payload: &[u8]) -> Vec<usize> {
    decode_batch(payload)
        .map(|rs| rs.iter().map(|r| r.object()).collect())
        .unwrap_or_default()
}

pub fn batch_has_release_of(payload: &[u8], obj: usize) -> bool {
    decode_batch(payload)
        .map(|rs| {
            rs.iter()
                .any(|r| r.is_release() && r.object() == obj)
        })
        .unwrap_or(false)
}

const RES_REPLICATED: u8 = 0;
const RES_GRANTED: u8 = 1;
const RES_RELEASED: u8 = 2;

pub fn encode_response(results: &[DsmResult]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((results.len() as u16).to_le_bytes());
    for r in results {
        match r {
            DsmResult::Replicated(o, v) => {
                out.push(RES_REPLICATED);
                out.extend((*o as u16).to_le_bytes());
                out.extend((v.len() as u16).to_le_bytes());
                out.extend(v);
            }
            DsmResult::Granted(o, v) => {
                out.push(RES_GRANTED);
                out.extend((*o as u16).to_le_bytes());
                out.extend((v.len() as u16).to_le_bytes());
                out.extend(v);
            }
            DsmResult::Released(o) => {
                out.push(RES_RELEASED);
                out.extend((*o as u16).to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_response(payload: &[u8]) -> Option<Vec<DsmResult>> {
    let mut p = Cursor::new(payload);
    let count = p.u16()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = p.u8()?;
        let obj = p.u16()? as usize;
        out.push(match kind {
            RES_REPLICATED => {
                let len = p.u16()? as usize;
                DsmResult::Replicated(obj, p.bytes(len)?.to_vec())
            }
            RES_GRANTED => {
                let len = p.u16()? as usize;
                DsmResult::Granted(obj, p.bytes(len)?.to_vec())
            }
            RES_RELEASED => DsmResult::Released(obj),
            _ => return None,
        });
    }
    Some(out)
}

pub const RPC_RETURN_BYTES: usize = 4;

pub fn encode_rpc_call(proc: &str, arg_bytes: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(proc.len() as u8);
    out.extend(proc.as_bytes());
    out.extend((arg_bytes as u16).to_le_bytes());
    out.extend(std::iter::repeat(0u8).take(arg_bytes));
    out
}

pub fn decode_rpc_proc(payload: &[u8]) -> Option<String> {
    let len = *payload.first()? as usize;
    let name = payload.get(1..1 + len)?;
    String::from_utf8(name.to_vec()).ok()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Cursor<'a> {
        Cursor { buf, pos: 0 }
    }

    fn u8(&mut self) -> Option<u8> {
        let v = *self.buf.get(self.pos)?;
        self.pos += 1;
        Some(v)
    }

    fn u16(&mut self) -> Option<u16> {
        let b = self.buf.get(self.pos..self.pos + 2)?;
        self.pos += 2;
        Some(u16::from_le_bytes([b[0], b[1]]))
    }

    fn bytes(&mut self, n: usize) -> Option<&'a [u8]> {
        let b = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_round_trip() {
        let reqs = vec![
            DsmRequest::Acquire(3),
            DsmRequest::Replicate(1),
            DsmRequest::Release(2, vec![9, 8, 7]),
        ];
        assert_eq!(decode_batch(&encode_batch(&reqs)).unwrap(), reqs);
        assert_eq!(decode_batch_objects(&encode_batch(&reqs)), vec![3, 1, 2]);
    }

    #[test]
    fn response_round_trip() {
        let res = vec![
            DsmResult::Replicated(0, vec![1, 2]),
            DsmResult::Granted(4, vec![]),
            DsmResult::Released(2),
        ];
        assert_eq!(decode_response(&encode_response(&res)).unwrap(), res);
    }

    #[test]
    fn single_replicate_request_is_five_bytes() {
        // 2-byte count + kind + object id.
        assert_eq!(encode_batch(&[DsmRequest::Replicate(0)]).len(), 5);
    }

    #[test]
    fn rpc_payload_carries_name_and_args() {
        let p = encode_rpc_call("on_gesture", 8);
        assert_eq!(decode_rpc_proc(&p).unwrap(), "on_gesture");
        assert_eq!(p.len(), 1 + 10 + 2 + 8);
    }
}
