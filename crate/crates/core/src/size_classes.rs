//! Block-size classes and their real-span geometry.
//!
//! Sixteen small classes (16..=256 bytes, step 16) share one 32KB real span
//! with a 256-byte header. Twelve large classes (512 bytes..=1MB, powers of
//! two) use a one-page header so that decommitting everything past the first
//! page keeps the header intact.

use crate::vmem::{PAGE_SIZE, VIRTUAL_SPAN_SIZE};

pub const NUM_SMALL_CLASSES: usize = 16;
pub const NUM_CLASSES: usize = 28;
pub const MAX_SMALL_SIZE: usize = 256;
/// Largest request served from spans; anything bigger is a huge object.
pub const MAX_CLASS_SIZE: usize = 1 << 20;
pub const SMALL_HEADER_SIZE: usize = 256;
pub const LARGE_HEADER_SIZE: usize = PAGE_SIZE;
pub const SMALL_REAL_SPAN_SIZE: usize = 32 * 1024;
pub const NUM_REAL_SPAN_SIZES: usize = 6;

const KB: usize = 1024;

/// Distinct real-span sizes, ascending; position is the real-span index.
pub const REAL_SPAN_SIZES: [usize; NUM_REAL_SPAN_SIZES] =
    [32 * KB, 68 * KB, 132 * KB, 260 * KB, 516 * KB, 1028 * KB];

/// Real-span size for each large class, 512B through 1MB.
const LARGE_REAL_SPAN: [usize; NUM_CLASSES - NUM_SMALL_CLASSES] = [
    68 * KB,
    68 * KB,
    132 * KB,
    132 * KB,
    260 * KB,
    260 * KB,
    516 * KB,
    516 * KB,
    1028 * KB,
    1028 * KB,
    1028 * KB,
    1028 * KB,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SizeClass(u8);

impl SizeClass {
    pub fn new(index: usize) -> Option<SizeClass> {
        (index < NUM_CLASSES).then_some(SizeClass(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = SizeClass> {
        (0..NUM_CLASSES).map(|i| SizeClass(i as u8))
    }

    pub fn geometry(self) -> &'static Geometry {
        &TABLE[self.index()]
    }

    pub fn block_size(self) -> usize {
        self.geometry().block_size
    }

    pub fn is_small(self) -> bool {
        self.index() < NUM_SMALL_CLASSES
    }
}

/// Result of routing a request size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeRoute {
    Class(SizeClass),
    Huge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub block_size: usize,
    pub real_span_size: usize,
    pub header_size: usize,
    pub blocks_per_span: usize,
    pub real_span_index: usize,
}

impl Geometry {
    /// Bytes usable for blocks.
    pub fn payload_bytes(&self) -> usize {
        self.blocks_per_span * self.block_size
    }
}

const fn rs_index(size: usize) -> usize {
    let mut i = 0;
    while i < NUM_REAL_SPAN_SIZES {
        if REAL_SPAN_SIZES[i] == size {
            return i;
        }
        i += 1;
    }
    panic!("size is not a real-span size");
}

const fn build_table() -> [Geometry; NUM_CLASSES] {
    let mut table = [Geometry {
        block_size: 0,
        real_span_size: 0,
        header_size: 0,
        blocks_per_span: 0,
        real_span_index: 0,
    }; NUM_CLASSES];
    let mut i = 0;
    while i < NUM_CLASSES {
        let (block_size, real_span_size, header_size) = if i < NUM_SMALL_CLASSES {
            (16 * (i + 1), SMALL_REAL_SPAN_SIZE, SMALL_HEADER_SIZE)
        } else {
            let j = i - NUM_SMALL_CLASSES;
            (512 << j, LARGE_REAL_SPAN[j], LARGE_HEADER_SIZE)
        };
        table[i] = Geometry {
            block_size,
            real_span_size,
            header_size,
            blocks_per_span: (real_span_size - header_size) / block_size,
            real_span_index: rs_index(real_span_size),
        };
        i += 1;
    }
    table
}

pub static TABLE: [Geometry; NUM_CLASSES] = build_table();

const _: () = {
    let t = build_table();
    let mut i = 0;
    while i < NUM_CLASSES {
        assert!(t[i].blocks_per_span >= 1);
        assert!(t[i].real_span_size % PAGE_SIZE == 0);
        assert!(t[i].real_span_size <= VIRTUAL_SPAN_SIZE);
        // Remote counts are packed into 16 bits.
        assert!(t[i].blocks_per_span < 1 << 16);
        i += 1;
    }
};

pub fn class_for_size(request: usize) -> SizeRoute {
    if request <= MAX_SMALL_SIZE {
        let idx = request.max(1).div_ceil(16) - 1;
        return SizeRoute::Class(SizeClass(idx as u8));
    }
    if request > MAX_CLASS_SIZE {
        return SizeRoute::Huge;
    }
    let pow = request.next_power_of_two().max(512);
    let idx = NUM_SMALL_CLASSES + (pow.trailing_zeros() as usize - 9);
    SizeRoute::Class(SizeClass(idx as u8))
}

pub fn geometry(class: SizeClass) -> &'static Geometry {
    class.geometry()
}

/// Dense index of a real-span size, or `None` for sizes not in the table.
pub fn real_span_index_for_size(real_span_size: usize) -> Option<usize> {
    REAL_SPAN_SIZES.iter().position(|&s| s == real_span_size)
}

/// The table as CSV, one row per class.
pub fn table_csv() -> String {
    let mut out = String::from(
        "class,block_size,real_span_size,header_size,blocks_per_span,real_span_index\n",
    );
    for (i, g) in TABLE.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i, g.block_size, g.real_span_size, g.header_size, g.blocks_per_span, g.real_span_index
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn class_of(size: usize) -> SizeClass {
        match class_for_size(size) {
            SizeRoute::Class(c) => c,
            SizeRoute::Huge => panic!("{size} routed huge"),
        }
    }

    /// Places the header, then whole blocks one at a time.
    fn pack(real_span_size: usize, header: usize, block: usize) -> usize {
        let mut cursor = header;
        let mut n = 0;
        while cursor + block <= real_span_size {
            cursor += block;
            n += 1;
        }
        n
    }

    #[test]
    fn table_shape() {
        assert_eq!(TABLE.len(), 28);
        let small: Vec<_> = TABLE[..16].iter().map(|g| g.block_size).collect();
        assert_eq!(small, (1..=16).map(|i| i * 16).collect::<Vec<_>>());
        let large: Vec<_> = TABLE[16..].iter().map(|g| g.block_size).collect();
        assert_eq!(large, (9..=20).map(|e| 1usize << e).collect::<Vec<_>>());
        for g in &TABLE[..16] {
            assert_eq!(g.real_span_size, 32 * 1024);
            assert_eq!(g.real_span_index, 0);
        }
        let mut distinct: Vec<_> = TABLE.iter().map(|g| g.real_span_size).collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), NUM_REAL_SPAN_SIZES);
        for g in &TABLE[16..] {
            assert!(g.real_span_size > 32 * 1024, "large spans must exceed the decommit threshold");
        }
    }

    #[test]
    fn table_audit_against_packer() {
        for (i, g) in TABLE.iter().enumerate() {
            assert_eq!(
                pack(g.real_span_size, g.header_size, g.block_size),
                g.blocks_per_span,
                "class {i}"
            );
        }
    }

    #[test]
    fn documented_rows() {
        assert_eq!(class_of(256).geometry().blocks_per_span, 127);
        let g64 = class_of(64).geometry();
        assert_eq!((g64.real_span_size, g64.blocks_per_span), (32768, 508));
        assert_eq!(class_of(1 << 20).geometry().blocks_per_span, 1);
        let max_bps = TABLE.iter().map(|g| g.blocks_per_span).max().unwrap();
        assert_eq!(max_bps, 2032);
    }

    #[test]
    fn routing_examples() {
        assert_eq!(class_of(64).block_size(), 64);
        assert_eq!(class_of(16).index(), 0);
        assert_eq!(class_of(0).index(), 0);
        assert_eq!(class_of(100).block_size(), 112);
        assert_eq!(class_of(100).index(), 6);
        assert_eq!(class_of(257).block_size(), 512);
        assert_eq!(class_of(1 << 20).index(), NUM_CLASSES - 1);
        assert_eq!(class_for_size((1 << 20) + 1), SizeRoute::Huge);
    }

    #[test]
    fn real_span_indices() {
        assert_eq!(real_span_index_for_size(32 * 1024), Some(0));
        assert_eq!(
            class_of(512).geometry().real_span_index,
            class_of(1024).geometry().real_span_index
        );
        assert_eq!(real_span_index_for_size(16 * 1024), None);
        for g in TABLE.iter() {
            assert_eq!(real_span_index_for_size(g.real_span_size), Some(g.real_span_index));
        }
    }

    #[test]
    fn round_trip_every_class() {
        for c in SizeClass::all() {
            assert_eq!(class_of(c.block_size()), c);
        }
    }

    #[test]
    fn csv_has_one_row_per_class() {
        assert_eq!(table_csv().lines().count(), NUM_CLASSES + 1);
    }

    proptest! {
        #[test]
        fn monotone(a in 0usize..=MAX_CLASS_SIZE, b in 0usize..=MAX_CLASS_SIZE) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(class_of(lo) <= class_of(hi));
        }

        #[test]
        fn smallest_fitting_class(s in 0usize..=MAX_CLASS_SIZE) {
            let c = class_of(s);
            prop_assert!(c.block_size() >= s);
            if c.index() > 0 {
                prop_assert!(SizeClass::new(c.index() - 1).unwrap().block_size() < s);
            }
        }

        #[test]
        fn waste_below_half(s in 17usize..=MAX_CLASS_SIZE) {
            prop_assert!(class_of(s).block_size() < 2 * s);
        }
    }
}
