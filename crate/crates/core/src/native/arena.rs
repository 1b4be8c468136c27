//! Executable code memory.

use crate::jit::JitError;

pub struct Arena {
    ptr: *mut u8,
    len: usize,
    wx: bool,
    writable: bool,
}

impl Arena {
    /// Maps `len` bytes. Without `wx` the mapping is read+write+execute for
    /// its whole life; with it, it is toggled between RW and RX.
    pub fn new(len: usize, wx: bool) -> Result<Arena, JitError> {
        let prot = if wx {
            libc::PROT_READ | libc::PROT_WRITE
        } else {
            libc::PROT_READ | libc::PROT_WRITE | libc::PROT_EXEC
        };
        let p = unsafe {
            libc::mmap(std::ptr::null_mut(), len, prot, libc::MAP_PRIVATE | libc::MAP_ANONYMOUS, -1, 0)
        };
        if p == libc::MAP_FAILED {
            return Err(JitError::Mmap(std::io::Error::last_os_error().to_string()));
        }
        Ok(Arena { ptr: p as *mut u8, len, wx, writable: true })
    }

    pub fn base(&self) -> i64 {
        self.ptr as i64
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn offset(&self, addr: i64, n: usize) -> usize {
        let off = (addr - self.base()) as usize;
        assert!(off + n <= self.len, "arena access out of range");
        off
    }

    pub fn write(&mut self, addr: i64, bytes: &[u8]) {
        debug_assert!(self.writable);
        let off = self.offset(addr, bytes.len());
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr(), self.ptr.add(off), bytes.len()) };
    }

    pub fn read_i32(&self, addr: i64) -> i32 {
        let off = self.offset(addr, 4);
        unsafe { std::ptr::read_unaligned(self.ptr.add(off) as *const i32) }
    }

    pub fn bytes(&self, start: i64, end: i64) -> &[u8] {
        let off = self.offset(start, (end - start) as usize);
        unsafe { std::slice::from_raw_parts(self.ptr.add(off), (end - start) as usize) }
    }

    /// Under W^X, flips the mapping between RW and RX.
    pub fn set_writable(&mut self, w: bool) -> Result<(), JitError> {
        if !self.wx || self.writable == w {
            return Ok(());
        }
        let prot = if w { libc::PROT_READ | libc::PROT_WRITE } else { libc::PROT_READ | libc::PROT_EXEC };
        if unsafe { libc::mprotect(self.ptr as *mut libc::c_void, self.len, prot) } != 0 {
            return Err(JitError::Mmap(std::io::Error::last_os_error().to_string()));
        }
        self.writable = w;
        Ok(())
    }

    pub fn is_writable(&self) -> bool {
        self.writable
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        unsafe { libc::munmap(self.ptr as *mut libc::c_void, self.len) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read() {
        let mut a = Arena::new(4096, false).unwrap();
        let b = a.base();
        a.write(b + 8, &(-5i32).to_le_bytes());
        assert_eq!(a.read_i32(b + 8), -5);
    }

    #[test]
    fn wx_toggle() {
        let mut a = Arena::new(4096, true).unwrap();
        a.write(a.base(), &[0xC3]);
        a.set_writable(false).unwrap();
        assert!(!a.is_writable());
        assert_eq!(a.bytes(a.base(), a.base() + 1), &[0xC3]);
        a.set_writable(true).unwrap();
        a.write(a.base(), &[0x90]);
    }
}
