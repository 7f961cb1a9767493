//! Raw Landlock syscalls: write access confined to a set of directories,
//! optional TCP deny. The ruleset is built in the parent; the child only
//! calls `restrict`, which is async-signal-safe.

use std::ffi::CString;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::os::unix::ffi::OsStrExt;
use std::path::Path;

const CREATE_RULESET_VERSION: u32 = 1;
const RULE_PATH_BENEATH: libc::c_int = 1;

const WRITE_FILE: u64 = 1 << 1;
const REMOVE_DIR: u64 = 1 << 4;
const REMOVE_FILE: u64 = 1 << 5;
const MAKE_CHAR: u64 = 1 << 6;
const MAKE_DIR: u64 = 1 << 7;
const MAKE_REG: u64 = 1 << 8;
const MAKE_SOCK: u64 = 1 << 9;
const MAKE_FIFO: u64 = 1 << 10;
const MAKE_BLOCK: u64 = 1 << 11;
const MAKE_SYM: u64 = 1 << 12;
const REFER: u64 = 1 << 13;
const TRUNCATE: u64 = 1 << 14;

const NET_BIND_TCP: u64 = 1 << 0;
const NET_CONNECT_TCP: u64 = 1 << 1;

#[repr(C)]
struct RulesetAttr {
    handled_access_fs: u64,
    handled_access_net: u64,
}

#[repr(C, packed)]
struct PathBeneathAttr {
    allowed_access: u64,
    parent_fd: i32,
}

/// Landlock ABI version supported by the running kernel, if any.
pub fn abi_version() -> Option<u32> {
    // SAFETY: version query takes no pointers.
    let v = unsafe {
        libc::syscall(libc::SYS_landlock_create_ruleset, std::ptr::null::<RulesetAttr>(), 0usize, CREATE_RULESET_VERSION)
    };
    (v > 0).then_some(v as u32)
}

fn write_rights(abi: u32) -> u64 {
    let mut rights =
        WRITE_FILE | REMOVE_DIR | REMOVE_FILE | MAKE_CHAR | MAKE_DIR | MAKE_REG | MAKE_SOCK | MAKE_FIFO | MAKE_BLOCK | MAKE_SYM;
    if abi >= 2 {
        rights |= REFER;
    }
    if abi >= 3 {
        rights |= TRUNCATE;
    }
    rights
}

pub struct Ruleset {
    fd: OwnedFd,
}

impl Ruleset {
    /// Writes are denied everywhere except beneath `writable`; reads are
    /// unrestricted. With `deny_tcp` and ABI >= 4 TCP bind/connect is denied.
    pub fn confine_writes(writable: &[&Path], deny_tcp: bool) -> io::Result<Ruleset> {
        let abi = abi_version().ok_or_else(|| io::Error::new(io::ErrorKind::Unsupported, "landlock unavailable"))?;
        let rights = write_rights(abi);
        let attr = RulesetAttr {
            handled_access_fs: rights,
            handled_access_net: if deny_tcp && abi >= 4 { NET_BIND_TCP | NET_CONNECT_TCP } else { 0 },
        };
        let size = if abi >= 4 { std::mem::size_of::<RulesetAttr>() } else { std::mem::size_of::<u64>() };
        // SAFETY: attr outlives the call and size matches the prefix we filled.
        let fd = unsafe { libc::syscall(libc::SYS_landlock_create_ruleset, &attr as *const RulesetAttr, size, 0u32) };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: the kernel just returned a fresh owned descriptor.
        let fd = unsafe { OwnedFd::from_raw_fd(fd as i32) };
        for dir in writable {
            let c = CString::new(dir.as_os_str().as_bytes())?;
            // SAFETY: c is a valid NUL-terminated path.
            let dfd = unsafe { libc::open(c.as_ptr(), libc::O_PATH | libc::O_CLOEXEC) };
            if dfd < 0 {
                return Err(io::Error::last_os_error());
            }
            // SAFETY: dfd was just opened.
            let dfd = unsafe { OwnedFd::from_raw_fd(dfd) };
            let rule = PathBeneathAttr { allowed_access: rights, parent_fd: dfd.as_raw_fd() };
            // SAFETY: rule is a valid path_beneath attribute for the ruleset fd.
            let r = unsafe {
                libc::syscall(
                    libc::SYS_landlock_add_rule,
                    fd.as_raw_fd(),
                    RULE_PATH_BENEATH,
                    &rule as *const PathBeneathAttr,
                    0u32,
                )
            };
            if r < 0 {
                return Err(io::Error::last_os_error());
            }
        }
        Ok(Ruleset { fd })
    }

    pub fn raw_fd(&self) -> i32 {
        self.fd.as_raw_fd()
    }
}

/// Child side, between fork and exec.
pub fn restrict(ruleset_fd: i32) -> io::Result<()> {
    // SAFETY: plain syscalls without allocation.
    unsafe {
        if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
            return Err(io::Error::last_os_error());
        }
        if libc::syscall(libc::SYS_landlock_restrict_self, ruleset_fd, 0u32) != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}
