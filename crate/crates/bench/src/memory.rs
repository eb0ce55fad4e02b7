use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use spanalloc::vmem::resident_set_bytes;
use spanalloc::VirtualMemory;

pub const SAMPLE_PERIOD: Duration = Duration::from_millis(10);

/// Committed-memory meter. Uses the provider's page accounting when it has
/// one, and otherwise samples the process RSS every [`SAMPLE_PERIOD`].
pub struct MemSampler {
    vm: Arc<dyn VirtualMemory>,
    rss: Option<Rss>,
}

struct Rss {
    peak: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MemSampler {
    pub fn start(vm: Arc<dyn VirtualMemory>) -> MemSampler {
        if vm.stats().tracked {
            vm.reset_peak();
            return MemSampler { vm, rss: None };
        }
        let peak = Arc::new(AtomicUsize::new(resident_set_bytes().unwrap_or(0)));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let (peak, stop) = (peak.clone(), stop.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    if let Some(now) = resident_set_bytes() {
                        peak.fetch_max(now, Ordering::Relaxed);
                    }
                    std::thread::sleep(SAMPLE_PERIOD);
                }
            })
        };
        MemSampler { vm, rss: Some(Rss { peak, stop, handle: Some(handle) }) }
    }

    /// Whether figures come from the provider rather than RSS.
    pub fn is_exact(&self) -> bool {
        self.rss.is_none()
    }

    pub fn current(&self) -> usize {
        match &self.rss {
            None => self.vm.stats().committed_bytes,
            Some(_) => resident_set_bytes().unwrap_or(0),
        }
    }

    /// Peak since the previous call (or since start), then restarts the
    /// window at the current value.
    pub fn take_peak(&self) -> usize {
        match &self.rss {
            None => {
                let p = self.vm.stats().peak_committed_bytes;
                self.vm.reset_peak();
                p
            }
            Some(r) => {
                let now = self.current();
                r.peak.swap(now, Ordering::Relaxed).max(now)
            }
        }
    }
}

impl Drop for MemSampler {
    fn drop(&mut self) {
        if let Some(r) = &mut self.rss {
            r.stop.store(true, Ordering::Relaxed);
            if let Some(h) = r.handle.take() {
                let _ = h.join();
            }
        }
    }
}
