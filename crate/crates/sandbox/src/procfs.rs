//! Just enough of `/proc` for process discovery and accounting.

use std::fs;
use std::path::Path;

/// Fields of `/proc/<pid>/stat` used here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcStat {
    pub pid: i32,
    pub state: char,
    pub ppid: i32,
    pub pgrp: i32,
    /// utime + stime, in clock ticks.
    pub cpu_ticks: u64,
}

/// Parses the content of a `stat` file. The command name may contain
/// spaces and parentheses, so fields are counted from the last `)`.
pub fn parse_stat(text: &str) -> Option<ProcStat> {
    let open = text.find('(')?;
    let close = text.rfind(')')?;
    let pid = text[..open].trim().parse().ok()?;
    let rest: Vec<&str> = text[close + 1..].split_whitespace().collect();
    // rest[0] is field 3 (state); utime and stime are fields 14 and 15.
    let state = rest.first()?.chars().next()?;
    let ppid = rest.get(1)?.parse().ok()?;
    let pgrp = rest.get(2)?.parse().ok()?;
    let utime: u64 = rest.get(11)?.parse().ok()?;
    let stime: u64 = rest.get(12)?.parse().ok()?;
    Some(ProcStat {
        pid,
        state,
        ppid,
        pgrp,
        cpu_ticks: utime + stime,
    })
}

pub fn read_stat(pid: i32) -> Option<ProcStat> {
    parse_stat(&fs::read_to_string(format!("/proc/{pid}/stat")).ok()?)
}

/// Memory figures from `/proc/<pid>/status`, in bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProcMem {
    pub rss: u64,
    pub rss_anon: Option<u64>,
}

pub fn parse_status_mem(text: &str) -> ProcMem {
    let kb = |line: &str| -> Option<u64> { line.split_whitespace().nth(1)?.parse::<u64>().ok().map(|v| v * 1024) };
    let mut mem = ProcMem::default();
    for line in text.lines() {
        if line.starts_with("VmRSS:") {
            mem.rss = kb(line).unwrap_or(0);
        } else if line.starts_with("RssAnon:") {
            mem.rss_anon = kb(line);
        }
    }
    mem
}

pub fn read_mem(pid: i32) -> Option<ProcMem> {
    Some(parse_status_mem(&fs::read_to_string(format!("/proc/{pid}/status")).ok()?))
}

/// Every numeric entry of `/proc`.
pub fn all_pids() -> Vec<i32> {
    let Ok(dir) = fs::read_dir("/proc") else {
        return Vec::new();
    };
    dir.filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok()).collect()
}

/// Whether `pid`'s environment contains exactly `entry` (e.g. `K=V`).
pub fn environ_contains(pid: i32, entry: &str) -> bool {
    environ_file_contains(Path::new(&format!("/proc/{pid}/environ")), entry)
}

fn environ_file_contains(path: &Path, entry: &str) -> bool {
    match fs::read(path) {
        Ok(raw) => raw.split(|b| *b == 0).any(|kv| kv == entry.as_bytes()),
        Err(_) => false,
    }
}

/// Every live descendant of `pid`, parents before children.
pub fn descendants(pid: i32) -> Vec<i32> {
    let stats: Vec<ProcStat> = all_pids().into_iter().filter_map(read_stat).collect();
    let mut out = Vec::new();
    let mut frontier = vec![pid];
    while let Some(parent) = frontier.pop() {
        for s in stats.iter().filter(|s| s.ppid == parent) {
            if !out.contains(&s.pid) {
                out.push(s.pid);
                frontier.push(s.pid);
            }
        }
    }
    out
}

/// Alive and not a zombie.
pub fn is_alive(pid: i32) -> bool {
    matches!(read_stat(pid), Some(s) if s.state != 'Z' && s.state != 'X')
}

/// Clock ticks per second for `stat` CPU times.
pub fn clock_ticks_per_sec() -> u64 {
    // SAFETY: sysconf has no memory-safety preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if v > 0 {
        v as u64
    } else {
        100
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_with_awkward_command_name() {
        let line = "4242 (we ird) (name)) S 1 4242 4242 0 -1 4194560 100 0 0 0 37 5 0 0 20 0 1 0 1000 1000000 200 18446744073709551615";
        let s = parse_stat(line).unwrap();
        assert_eq!(s.pid, 4242);
        assert_eq!(s.state, 'S');
        assert_eq!(s.ppid, 1);
        assert_eq!(s.pgrp, 4242);
        assert_eq!(s.cpu_ticks, 42);
    }

    #[test]
    fn own_process_is_visible() {
        let me = std::process::id() as i32;
        assert!(all_pids().contains(&me));
        assert!(is_alive(me));
        let mut child = std::process::Command::new("sleep").arg("30").spawn().unwrap();
        assert!(descendants(me).contains(&(child.id() as i32)));
        child.kill().unwrap();
        child.wait().unwrap();
        let mem = read_mem(me).unwrap();
        assert!(mem.rss > 0);
    }

    #[test]
    fn status_memory_lines() {
        let m = parse_status_mem("Name:\tx\nVmRSS:\t  1000 kB\nRssAnon:\t 600 kB\n");
        assert_eq!(m, ProcMem { rss: 1_024_000, rss_anon: Some(614_400) });
        assert_eq!(parse_status_mem("VmRSS: 4 kB\n").rss_anon, None);
    }

    #[test]
    fn environ_entries_match_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("environ");
        fs::write(&p, b"A=1\0COMET_ENV=x-1\0B=2\0").unwrap();
        assert!(environ_file_contains(&p, "COMET_ENV=x-1"));
        assert!(!environ_file_contains(&p, "COMET_ENV=x"));
    }
}
