//! Second gridworld simulator: a flat 64-entry array with -1 for walls, a
//! heading vector rotated by matrix, and clamped arithmetic on plain integers.

use ftp_core::gridworld::{Cell, Dir, World};

#[derive(Clone, PartialEq, Debug)]
pub struct Flat {
    pub cells: [i32; 64],
    pub at: i32,
    pub head: (i32, i32),
}

pub fn flat(w: &World) -> Flat {
    let mut cells = [0; 64];
    for r in 0..8 {
        for c in 0..8 {
            cells[r * 8 + c] = match w.grid[r][c] {
                Cell::Obstruction => -1,
                Cell::Score(s) => s as i32,
            };
        }
    }
    let head = match w.dir {
        Dir::N => (-1, 0),
        Dir::E => (0, 1),
        Dir::S => (1, 0),
        Dir::W => (0, -1),
    };
    Flat {
        cells,
        at: (w.pos.0 * 8 + w.pos.1) as i32,
        head,
    }
}

pub fn flat_run(mut f: Flat, prog: &str) -> Flat {
    for ch in prog.chars() {
        match ch {
            'M' => {
                let (r, c) = (f.at / 8 + f.head.0, f.at % 8 + f.head.1);
                if (0..8).contains(&r) && (0..8).contains(&c) && f.cells[(r * 8 + c) as usize] >= 0
                {
                    f.at = r * 8 + c;
                }
            }
            // counter-clockwise on screen coordinates (row grows southward)
            'L' => f.head = (-f.head.1, f.head.0),
            'R' => f.head = (f.head.1, -f.head.0),
            '+' => f.cells[f.at as usize] = (f.cells[f.at as usize] + 1).min(10),
            '-' => f.cells[f.at as usize] = (f.cells[f.at as usize] - 1).max(0),
            _ => unreachable!(),
        }
    }
    f
}
