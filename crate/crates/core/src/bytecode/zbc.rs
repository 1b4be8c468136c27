//! Binary `.zbc` segment files (little-endian).
//!
//! ```text
//! "ZBC1" | u32 version | u32 code words | u32 globals | u32 prims
//! i32 code words...
//! globals: u8 kind (0 int: i64, 1 string: u32 len + bytes, 2 unit)
//! prims: u32 len + UTF-8 name
//! ```

use super::{GlobalInit, Segment};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ZBC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ZbcError {
    #[error("not a zbc file (bad magic)")]
    BadMagic,
    #[error("unsupported zbc version {0}")]
    BadVersion(u32),
    #[error("corrupt zbc file: {0}")]
    Corrupt(&'static str),
}

pub fn store_segment(s: &Segment) -> Vec<u8> {
    let mut b = Vec::with_capacity(20 + 4 * s.words.len());
    b.extend_from_slice(MAGIC);
    for n in [VERSION, s.words.len() as u32, s.globals.len() as u32, s.prims.len() as u32] {
        b.extend_from_slice(&n.to_le_bytes());
    }
    for w in &s.words {
        b.extend_from_slice(&w.to_le_bytes());
    }
    for g in &s.globals {
        match g {
            GlobalInit::Int(v) => {
                b.push(0);
                b.extend_from_slice(&v.to_le_bytes());
            }
            GlobalInit::Str(bytes) => {
                b.push(1);
                b.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                b.extend_from_slice(bytes);
            }
            GlobalInit::Unit => b.push(2),
        }
    }
    for p in &s.prims {
        b.extend_from_slice(&(p.len() as u32).to_le_bytes());
        b.extend_from_slice(p.as_bytes());
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ZbcError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(ZbcError::Corrupt("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ZbcError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_segment(bytes: &[u8]) -> Result<Segment, ZbcError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ZbcError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(ZbcError::BadVersion(version));
    }
    let (nwords, nglobals, nprims) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let words = r
        .take(nwords.checked_mul(4).ok_or(ZbcError::Corrupt("code size overflow"))?)?
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut globals = Vec::new();
    for _ in 0..nglobals {
        globals.push(match r.take(1)?[0] {
            0 => GlobalInit::Int(i64::from_le_bytes(r.take(8)?.try_into().unwrap())),
            1 => {
                let n = r.u32()? as usize;
                GlobalInit::Str(r.take(n)?.to_vec())
            }
            2 => GlobalInit::Unit,
            _ => return Err(ZbcError::Corrupt("unknown global kind")),
        });
    }
    let mut prims = Vec::new();
    for _ in 0..nprims {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| ZbcError::Corrupt("primitive name is not UTF-8"))?;
        prims.push(name.to_string());
    }
    if r.pos != bytes.len() {
        return Err(ZbcError::Corrupt("trailing bytes"));
    }
    Ok(Segment { words, globals, prims })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Segment {
        Segment {
            words: vec![6, 1, 1, 0, -5, 67],
            globals: vec![GlobalInit::Int(-3), GlobalInit::Str(b"hey".to_vec()), GlobalInit::Unit],
            prims: vec!["print_int".into(), "caml_add_float".into()],
        }
    }

    #[test]
    fn layout_header() {
        let b = store_segment(&sample());
        assert_eq!(&b[..4], b"ZBC1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 6);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = store_segment(&sample());
        b[0] = b'X';
        assert_eq!(load_segment(&b), Err(ZbcError::BadMagic));
        let mut b = store_segment(&sample());
        b[4] = 2;
        assert_eq!(load_segment(&b), Err(ZbcError::BadVersion(2)));
        assert_eq!(load_segment(b"ZB"), Err(ZbcError::BadMagic));
    }

    #[test]
    fn truncation_and_trailing_are_corrupt() {
        let b = store_segment(&sample());
        for cut in 4..b.len() {
            assert!(matches!(load_segment(&b[..cut]), Err(ZbcError::Corrupt(_))), "cut at {cut}");
        }
        let mut b = b;
        b.push(0);
        assert!(matches!(load_segment(&b), Err(ZbcError::Corrupt(_))));
    }

    fn any_global() -> impl Strategy<Value = GlobalInit> {
        prop_oneof![
            any::<i64>().prop_map(GlobalInit::Int),
            prop::collection::vec(any::<u8>(), 0..20).prop_map(GlobalInit::Str),
            Just(GlobalInit::Unit),
        ]
    }

    proptest! {
        #[test]
        fn store_load_identity(
            words in prop::collection::vec(any::<i32>(), 0..64),
            globals in prop::collection::vec(any_global(), 0..6),
            prims in prop::collection::vec("[a-z_]{1,12}", 0..4),
        ) {
            let s = Segment { words, globals, prims };
            let b = store_segment(&s);
            let back = load_segment(&b).unwrap();
            prop_assert_eq!(store_segment(&back), b);
            prop_assert_eq!(back, s);
        }
    }
}
