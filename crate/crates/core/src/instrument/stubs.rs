//! Shared-type descriptions (IDL) and the marshaling stubs generated from
//! them.
//!
//! A type descriptor is an ordered list of scalar or array fields with
//! explicit widths and signedness. The generated layout is packed
//! little-endian, so the marshaled size is a pure function of the descriptor
//! and `unmarshal(marshal(v)) == v` for every in-range value. Pointer fields
//! are rejected outright: without a shared address space a pointer value is
//! meaningless on the other side.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IdlError {
    #[error("line {0}: expected `field <name> <i|u><width>[\\[len\\]]`")]
    Malformed(usize),
    #[error("line {0}: field `{1}` needs an explicit width (ambiguous type `{2}`)")]
    Ambiguous(usize, String, String),
    #[error("line {0}: pointer field `{1}` cannot be shared")]
    Pointer(usize, String),
    #[error("line {0}: unsupported width {1}")]
    Width(usize, u32),
    #[error("line {0}: duplicate field `{1}`")]
    Duplicate(usize, String),
    #[error("value has {0} scalars, descriptor expects {1}")]
    Arity(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Width {
    W8,
    W16,
    W32,
    W64,
}

impl Width {
    pub fn bytes(self) -> usize {
        match self {
            Width::W8 => 1,
            Width::W16 => 2,
            Width::W32 => 4,
            Width::W64 => 8,
        }
    }

    fn from_bits(bits: u32) -> Option<Width> {
        match bits {
            8 => Some(Width::W8),
            16 => Some(Width::W16),
            32 => Some(Width::W32),
            64 => Some(Width::W64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub name: String,
    pub width: Width,
    pub signed: bool,
    /// `None` for a scalar, `Some(n)` for an n-element array.
    pub len: Option<usize>,
}

impl FieldDescriptor {
    pub fn scalar_count(&self) -> usize {
        self.len.unwrap_or(1)
    }

    pub fn byte_len(&self) -> usize {
        self.width.bytes() * self.scalar_count()
    }
}

/// An ordered, pointer-free type description for one shared object.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TypeDescriptor {
    pub fields: Vec<FieldDescriptor>,
}

impl TypeDescriptor {
    /// Marshaled size in bytes.
    pub fn byte_len(&self) -> usize {
        self.fields.iter().map(|f| f.byte_len()).sum()
    }

    pub fn scalar_count(&self) -> usize {
        self.fields.iter().map(|f| f.scalar_count()).sum()
    }

    /// Parse the line-oriented IDL form, one field per line:
    ///
    /// ```text
    /// field step_count i32
    /// field template i32[64]
    /// ```
    pub fn parse(text: &str) -> Result<TypeDescriptor, IdlError> {
        let mut fields: Vec<FieldDescriptor> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("field") {
                return Err(IdlError::Malformed(lineno));
            }
            let name = parts
                .next()
                .ok_or(IdlError::Malformed(lineno))?
                .to_string();
            let ty = parts.next().ok_or(IdlError::Malformed(lineno))?;
            if parts.next().is_some() {
                return Err(IdlError::Malformed(lineno));
            }
            if fields.iter().any(|f| f.name == name) {
                return Err(IdlError::Duplicate(lineno, name));
            }
            let (base, len) = match ty.find('[') {
                Some(open) => {
                    let close = ty.rfind(']').ok_or(IdlError::Malformed(lineno))?;
                    let n: usize = ty[open + 1..close]
                        .parse()
                        .map_err(|_| IdlError::Malformed(lineno))?;
                    (&ty[..open], Some(n))
                }
                None => (ty, None),
            };
            if base.contains('*') || base == "ptr" || base == "pointer" {
                return Err(IdlError::Pointer(lineno, name));
            }
            let (signed, bits_str) = match base.as_bytes().first() {
                Some(b'i') => (true, &base[1..]),
                Some(b'u') => (false, &base[1..]),
                _ => return Err(IdlError::Ambiguous(lineno, name, base.to_string())),
            };
            let bits: u32 = bits_str
                .parse()
                .map_err(|_| IdlError::Ambiguous(lineno, name.clone(), base.to_string()))?;
            let width = Width::from_bits(bits).ok_or(IdlError::Width(lineno, bits))?;
            fields.push(FieldDescriptor {
                name,
                width,
                signed,
                len,
            });
        }
        Ok(TypeDescriptor { fields })
    }

    pub fn print(&self) -> String {
        let mut out = String::new();
        for f in &self.fields {
            let base = format!("{}{}", if f.signed { "i" } else { "u" }, f.width.bytes() * 8);
            match f.len {
                Some(n) => out.push_str(&format!("field {} {}[{}]\n", f.name, base, n)),
                None => out.push_str(&format!("field {} {}\n", f.name, base)),
            }
        }
        out
    }
}

/// A value for a descriptor: the flattened scalars in field order.
pub type TypedValue = Vec<i64>;

/// Generated marshal/unmarshal pair for one descriptor: a deterministic
/// packed little-endian layout.
#[derive(Debug, Clone)]
pub struct Stub {
    descriptor: TypeDescriptor,
}

impl Stub {
    pub fn generate(descriptor: &TypeDescriptor) -> Stub {
        Stub {
            descriptor: descriptor.clone(),
        }
    }

    pub fn byte_len(&self) -> usize {
        self.descriptor.byte_len()
    }

    pub fn marshal(&self, value: &TypedValue) -> Result<Vec<u8>, IdlError> {
        let expected = self.descriptor.scalar_count();
        if value.len() != expected {
            return Err(IdlError::Arity(value.len(), expected));
        }
        let mut out = Vec::with_capacity(self.byte_len());
        let mut scalars = value.iter();
        for f in &self.descriptor.fields {
            for _ in 0..f.scalar_count() {
                let v = *scalars.next().unwrap();
                let bytes = v.to_le_bytes();
                out.extend_from_slice(&bytes[..f.width.bytes()]);
            }
        }
        Ok(out)
    }

    pub fn unmarshal(&self, bytes: &[u8]) -> Result<TypedValue, IdlError> {
        if bytes.len() != self.byte_len() {
            return Err(IdlError::Arity(bytes.len(), self.byte_len()));
        }
        let mut out = Vec::with_capacity(self.descriptor.scalar_count());
        let mut off = 0;
        for f in &self.descriptor.fields {
            for _ in 0..f.scalar_count() {
                let w = f.width.bytes();
                let chunk = &bytes[off..off + w];
                off += w;
                let mut buf = [0u8; 8];
                buf[..w].copy_from_slice(chunk);
                let mut v = i64::from_le_bytes(buf);
                if f.signed && w < 8 {
                    let shift = 64 - w as u32 * 8;
                    v = (v << shift) >> shift;
                } else if !f.signed {
                    // already zero-extended
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Clamp a scalar into the field's representable range; used when
    /// synthesizing deterministic values for a descriptor.
    pub fn clamp(&self, idx: usize, v: i64) -> i64 {
        let mut i = idx;
        for f in &self.descriptor.fields {
            if i < f.scalar_count() {
                let bits = f.width.bytes() as u32 * 8;
                return if f.signed {
                    if bits == 64 {
                        v
                    } else {
                        let shift = 64 - bits;
                        (v << shift) >> shift
                    }
                } else if bits == 64 {
                    v
                } else {
                    v & ((1i64 << bits) - 1)
                };
            }
            i -= f.scalar_count();
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_ints_are_sixteen_bytes() {
        let td = TypeDescriptor::parse(
            "field step_count i32\nfield stride i32\nfield velocity i32\nfield distance i32\n",
        )
        .unwrap();
        assert_eq!(td.byte_len(), 16);
        let stub = Stub::generate(&td);
        let v = vec![12, -3, 40000, 7];
        assert_eq!(stub.marshal(&v).unwrap().len(), 16);
        assert_eq!(stub.unmarshal(&stub.marshal(&v).unwrap()).unwrap(), v);
    }

    #[test]
    fn template_array_is_256_bytes() {
        let td = TypeDescriptor::parse("field template i32[64]").unwrap();
        assert_eq!(td.byte_len(), 256);
        let stub = Stub::generate(&td);
        let v: TypedValue = (0..64).map(|i| i as i64 - 32).collect();
        let bytes = stub.marshal(&v).unwrap();
        assert_eq!(bytes.len(), 256);
        assert_eq!(stub.unmarshal(&bytes).unwrap(), v);
    }

    #[test]
    fn empty_descriptor_round_trips_zero_bytes() {
        let td = TypeDescriptor::parse("").unwrap();
        let stub = Stub::generate(&td);
        assert_eq!(stub.byte_len(), 0);
        let bytes = stub.marshal(&vec![]).unwrap();
        assert!(bytes.is_empty());
        assert_eq!(stub.unmarshal(&bytes).unwrap(), Vec::<i64>::new());
    }

    #[test]
    fn pointers_rejected() {
        assert!(matches!(
            TypeDescriptor::parse("field next ptr"),
            Err(IdlError::Pointer(1, _))
        ));
        assert!(matches!(
            TypeDescriptor::parse("field buf i32*"),
            Err(IdlError::Pointer(1, _))
        ));
    }

    #[test]
    fn ambiguous_type_demands_explicit_idl() {
        assert!(matches!(
            TypeDescriptor::parse("field x int"),
            Err(IdlError::Ambiguous(1, _, _))
        ));
    }

    #[test]
    fn print_parse_round_trip() {
        let td = TypeDescriptor::parse("field a i16\nfield b u8[3]\nfield c i64").unwrap();
        assert_eq!(TypeDescriptor::parse(&td.print()).unwrap(), td);
    }
}
