//! Process-wide allocator tuning for the binaries.

/// Keeps freed heap memory mapped instead of handing it back to the kernel.
///
/// Training allocates and frees multi-megabyte tensors every step. With
/// glibc defaults many of these are served by fresh `mmap` calls, so every
/// step pays the page faults again. Call once at startup, before spawning
/// threads. Does nothing on other platforms.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters; it is called before
    // any worker threads exist.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
