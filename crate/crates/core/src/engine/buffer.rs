//! Pre-allocated shared storage for concat/batch-norm outputs.
//!
//! All blocks at the same semantic position write into the same two
//! buffers (one for the concat output, one for the following batch norm),
//! overwriting earlier occupants. A generation counter detects reads of
//! overwritten content; overwritten values are recomputed in the backward
//! phase rather than kept.

use crate::error::{Error, Result};
use crate::graph::SemanticPosition;

#[derive(Debug, Clone)]
pub struct SharedBuffer {
    data: Vec<f64>,
    capacity: usize,
    generation: u64,
    /// (offset, length) segments of the current occupant.
    layout: Vec<(usize, usize)>,
}

impl SharedBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArg(
                "shared buffer capacity must be positive".into(),
            ));
        }
        Ok(SharedBuffer {
            data: vec![0.0; capacity],
            capacity,
            generation: 0,
            layout: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn layout(&self) -> &[(usize, usize)] {
        &self.layout
    }

    /// Overwrite the buffer with a new occupant; returns the new generation.
    pub fn write(&mut self, site: &str, values: &[f64]) -> Result<u64> {
        if values.len() > self.capacity {
            return Err(Error::BufferOverflow {
                site: site.into(),
                needed: values.len(),
                capacity: self.capacity,
            });
        }
        self.data[..values.len()].copy_from_slice(values);
        self.generation += 1;
        self.layout.clear();
        self.layout.push((0, values.len()));
        Ok(self.generation)
    }

    /// Read the current occupant; rejects a stale generation.
    pub fn read(&self, site: &str, generation: u64, len: usize) -> Result<&[f64]> {
        if generation != self.generation {
            return Err(Error::StaleBuffer {
                site: site.into(),
                slot_gen: generation,
                buf_gen: self.generation,
            });
        }
        Ok(&self.data[..len])
    }

    pub fn is_stale(&self, generation: u64) -> bool {
        generation != self.generation
    }
}

/// One buffer pair per semantic position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferRole {
    Concat,
    BatchNorm,
}

/// Pre-allocate two buffers for each semantic position: one for concat
/// outputs and one for batch-norm outputs. `max_elements[i]` is the widest
/// occupant (in elements, batch included) at position i across all U-Nets.
///
/// Returns 2·positions buffers; index 2i is the concat buffer of position
/// i, index 2i+1 the batch-norm buffer.
pub fn alloc_shared(
    positions: &[SemanticPosition],
    max_elements: &[usize],
) -> Result<Vec<SharedBuffer>> {
    if positions.len() != max_elements.len() {
        return Err(Error::InvalidArg(format!(
            "positions ({}) and extents ({}) disagree",
            positions.len(),
            max_elements.len()
        )));
    }
    let mut buffers = Vec::with_capacity(2 * positions.len());
    for (pos, &cap) in positions.iter().zip(max_elements) {
        if cap == 0 {
            return Err(Error::InvalidArg(format!(
                "zero extent for semantic position {pos}"
            )));
        }
        buffers.push(SharedBuffer::new(cap)?);
        buffers.push(SharedBuffer::new(cap)?);
    }
    Ok(buffers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{positions_for, Side};

    #[test]
    fn two_buffers_per_semantic_position() {
        // L=4 levels → 2·(2·4) = 16 buffers, independent of N
        let positions = positions_for(4);
        assert_eq!(positions.len(), 8);
        let caps = vec![10usize; 8];
        let bufs = alloc_shared(&positions, &caps).unwrap();
        assert_eq!(bufs.len(), 16);
        assert!(positions
            .iter()
            .any(|p| p.level == 1 && p.side == Side::TopDown));
    }

    #[test]
    fn zero_extent_rejected() {
        let positions = positions_for(1);
        assert!(alloc_shared(&positions, &[0, 4]).is_err());
        assert!(alloc_shared(&positions, &[4]).is_err());
    }

    #[test]
    fn stale_generation_read_rejected() {
        let mut buf = SharedBuffer::new(4).unwrap();
        let g1 = buf.write("a", &[1.0, 2.0]).unwrap();
        assert_eq!(buf.read("a", g1, 2).unwrap(), &[1.0, 2.0]);
        let g2 = buf.write("b", &[3.0, 4.0, 5.0]).unwrap();
        assert!(g2 > g1);
        assert!(matches!(
            buf.read("a", g1, 2),
            Err(Error::StaleBuffer { .. })
        ));
        assert_eq!(buf.layout(), &[(0, 3)]);
    }

    #[test]
    fn overflow_rejected() {
        let mut buf = SharedBuffer::new(2).unwrap();
        assert!(matches!(
            buf.write("x", &[0.0; 3]),
            Err(Error::BufferOverflow { .. })
        ));
    }
}
