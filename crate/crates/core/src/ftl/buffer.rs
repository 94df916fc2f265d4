use std::collections::{HashMap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferedPage {
    pub lpn: u64,
    pub tag: u64,
}

/// DRAM write buffer holding whole pages. A page occupies its slot from
/// admission until its program completes; flushing is FIFO by admission.
#[derive(Debug, Clone)]
pub struct WriteBuffer {
    capacity: usize,
    slots: Vec<Option<BufferedPage>>,
    free_slots: Vec<u32>,
    pending: VecDeque<u32>,
    /// Newest buffered tag of each logical page and how many copies are held.
    latest: HashMap<u64, (u64, u32)>,
}

impl WriteBuffer {
    pub fn new(capacity_pages: usize) -> Self {
        Self {
            capacity: capacity_pages,
            slots: Vec::with_capacity(capacity_pages),
            free_slots: Vec::new(),
            pending: VecDeque::new(),
            latest: HashMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupied(&self) -> usize {
        self.slots.len() - self.free_slots.len()
    }

    pub fn is_full(&self) -> bool {
        self.occupied() >= self.capacity
    }

    pub fn utilization(&self) -> f64 {
        self.occupied() as f64 / self.capacity as f64
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Newest buffered content of `lpn`.
    pub fn lookup(&self, lpn: u64) -> Option<u64> {
        self.latest.get(&lpn).map(|&(tag, _)| tag)
    }

    pub fn push(&mut self, lpn: u64, tag: u64) -> u32 {
        assert!(!self.is_full(), "write buffer overflow");
        let page = Some(BufferedPage { lpn, tag });
        let id = match self.free_slots.pop() {
            Some(id) => {
                self.slots[id as usize] = page;
                id
            }
            None => {
                self.slots.push(page);
                (self.slots.len() - 1) as u32
            }
        };
        let e = self.latest.entry(lpn).or_insert((tag, 0));
        *e = (tag, e.1 + 1);
        self.pending.push_back(id);
        id
    }

    /// Oldest page not yet handed to the flash.
    pub fn pop_pending(&mut self) -> Option<(u32, BufferedPage)> {
        let id = self.pending.pop_front()?;
        Some((id, self.slots[id as usize].expect("pending slot is live")))
    }

    /// Frees the slot once its program has completed.
    pub fn release(&mut self, id: u32) {
        let page = self.slots[id as usize].take().expect("releasing live slot");
        self.free_slots.push(id);
        if let Some(e) = self.latest.get_mut(&page.lpn) {
            e.1 -= 1;
            if e.1 == 0 {
                self.latest.remove(&page.lpn);
            }
        }
    }
}
