use std::fmt;

use super::{SchedPolicy, SchedRequest};

/// Opaque OS handle of a running thread.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct ThreadHandle(libc::pthread_t);

impl fmt::Debug for ThreadHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ThreadHandle({:#x})", { self.0 })
    }
}

impl ThreadHandle {
    pub fn from_raw(thread: libc::pthread_t) -> Self {
        ThreadHandle(thread)
    }
}

/// Handle of the calling thread.
pub fn current_thread() -> ThreadHandle {
    // SAFETY: pthread_self has no preconditions.
    ThreadHandle(unsafe { libc::pthread_self() })
}

/// The OS declined a scheduling change. The channel keeps running with its
/// previous scheduling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedRefusal {
    pub reason: String,
}

impl SchedRefusal {
    pub fn new(reason: impl Into<String>) -> Self {
        SchedRefusal {
            reason: reason.into(),
        }
    }
}

/// Applies scheduling requests to channel threads.
///
/// Callers guarantee the handle refers to a live thread for the duration of
/// the call.
pub trait ThreadScheduler: Send + Sync + fmt::Debug {
    fn apply(&self, thread: ThreadHandle, req: &SchedRequest) -> Result<(), SchedRefusal>;
}

/// Uses `pthread_setschedparam`. Without `CAP_SYS_NICE` (or an RLIMIT_RTPRIO
/// allowance) real-time requests are refused with reason `permission`.
#[derive(Debug, Default, Clone, Copy)]
pub struct OsScheduler;

impl ThreadScheduler for OsScheduler {
    #[cfg(target_os = "linux")]
    fn apply(&self, thread: ThreadHandle, req: &SchedRequest) -> Result<(), SchedRefusal> {
        let policy = match req.policy() {
            SchedPolicy::Other => libc::SCHED_OTHER,
            SchedPolicy::Fifo => libc::SCHED_FIFO,
            SchedPolicy::RoundRobin => libc::SCHED_RR,
        };
        let param = libc::sched_param {
            sched_priority: req.priority(),
        };
        // SAFETY: the caller guarantees `thread` is alive; `param` outlives the call.
        let rc = unsafe { libc::pthread_setschedparam(thread.0, policy, &param) };
        match rc {
            0 => Ok(()),
            libc::EPERM => Err(SchedRefusal::new("permission")),
            libc::EINVAL => Err(SchedRefusal::new("invalid")),
            libc::ESRCH => Err(SchedRefusal::new("no-such-thread")),
            other => Err(SchedRefusal::new(
                std::io::Error::from_raw_os_error(other).to_string(),
            )),
        }
    }

    #[cfg(not(target_os = "linux"))]
    fn apply(&self, _thread: ThreadHandle, req: &SchedRequest) -> Result<(), SchedRefusal> {
        if req.policy() == SchedPolicy::Other {
            Ok(())
        } else {
            Err(SchedRefusal::new("unsupported"))
        }
    }
}

/// Refuses every real-time request with a fixed reason, the way an
/// unprivileged process is refused. Resetting to `SCHED_OTHER` succeeds.
#[derive(Debug, Clone)]
pub struct RefusingScheduler {
    reason: String,
}

impl RefusingScheduler {
    pub fn new(reason: impl Into<String>) -> Self {
        RefusingScheduler {
            reason: reason.into(),
        }
    }
}

impl Default for RefusingScheduler {
    fn default() -> Self {
        RefusingScheduler::new("permission")
    }
}

impl ThreadScheduler for RefusingScheduler {
    fn apply(&self, _thread: ThreadHandle, req: &SchedRequest) -> Result<(), SchedRefusal> {
        if req.policy().is_realtime() {
            Err(SchedRefusal::new(self.reason.clone()))
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_to_other_always_applies() {
        let h = std::thread::spawn(|| {
            let req = SchedRequest::new(SchedPolicy::Other, 0).unwrap();
            OsScheduler.apply(current_thread(), &req)
        });
        assert_eq!(h.join().unwrap(), Ok(()));
    }

    #[test]
    fn refusing_scheduler_degrades_realtime_only() {
        let s = RefusingScheduler::default();
        let fifo = SchedRequest::new(SchedPolicy::Fifo, 30).unwrap();
        assert_eq!(
            s.apply(current_thread(), &fifo).unwrap_err().reason,
            "permission"
        );
        assert!(s.apply(current_thread(), &SchedRequest::default()).is_ok());
    }
}
