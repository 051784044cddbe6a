use std::cell::Cell;

use ftp_core::inference::FutureLm;
use ftp_core::Result;

/// Three-token toy: the decoder emits a fixed bigram distribution of the
/// previous window token at every position; the memory is ignored.
pub struct Toy {
    pub table: [[f64; 3]; 3],
    pub decodes: Cell<usize>,
}

impl Toy {
    pub fn new() -> Self {
        let p = [[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.7, 0.2, 0.1]];
        let mut table = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                table[i][j] = f64::ln(p[i][j]);
            }
        }
        Self {
            table,
            decodes: Cell::new(0),
        }
    }
}

impl FutureLm for Toy {
    type Memory = ();
    fn vocab_size(&self) -> usize {
        3
    }
    fn context_limit(&self) -> usize {
        100
    }
    fn n_future(&self) -> usize {
        3
    }
    fn memory(&self, _: &[u32]) -> Result<()> {
        Ok(())
    }
    fn decode(&self, _: &(), tokens: &[u32], r: usize, nd: usize) -> Result<Vec<f64>> {
        assert_eq!(tokens.len(), r * nd);
        self.decodes.set(self.decodes.get() + 1);
        Ok(tokens
            .iter()
            .flat_map(|&t| self.table[t as usize])
            .collect())
    }
}
