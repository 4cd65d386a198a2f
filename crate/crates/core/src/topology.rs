//! 2D-mesh chiplet topology with XY routing.

/// A directed link between two adjacent chiplets.
pub type Link = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mesh {
    pub rows: usize,
    pub cols: usize,
}

impl Mesh {
    pub fn new(rows: usize, cols: usize) -> Self {
        Mesh { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self, c: usize) -> (usize, usize) {
        (c / self.cols, c % self.cols)
    }

    pub fn id(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Boustrophedon order: even rows left to right, odd rows right to left.
    /// Consecutive entries are always mesh neighbours.
    pub fn snake_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for r in 0..self.rows {
            if r % 2 == 0 {
                out.extend((0..self.cols).map(|c| self.id(r, c)));
            } else {
                out.extend((0..self.cols).rev().map(|c| self.id(r, c)));
            }
        }
        out
    }

    /// Position of every chiplet in [`Mesh::snake_order`].
    pub fn snake_rank(&self) -> Vec<usize> {
        let mut rank = vec![0; self.len()];
        for (i, c) in self.snake_order().into_iter().enumerate() {
            rank[c] = i;
        }
        rank
    }

    pub fn hops(&self, a: usize, b: usize) -> usize {
        let (ar, ac) = self.coords(a);
        let (br, bc) = self.coords(b);
        ar.abs_diff(br) + ac.abs_diff(bc)
    }

    /// Links traversed from `a` to `b`: first along the row (X), then the
    /// column (Y).
    pub fn xy_route(&self, a: usize, b: usize) -> Vec<Link> {
        let (mut r, mut c) = self.coords(a);
        let (br, bc) = self.coords(b);
        let mut links = Vec::with_capacity(self.hops(a, b));
        while c != bc {
            let nc = if bc > c { c + 1 } else { c - 1 };
            links.push((self.id(r, c), self.id(r, nc)));
            c = nc;
        }
        while r != br {
            let nr = if br > r { r + 1 } else { r - 1 };
            links.push((self.id(r, c), self.id(nr, c)));
            r = nr;
        }
        links
    }

    /// Index of a directed link in a dense `4 * len` table.
    pub fn link_index(&self, link: Link) -> usize {
        let (a, b) = link;
        let (ar, ac) = self.coords(a);
        let (br, bc) = self.coords(b);
        let dir = if br == ar && bc == ac + 1 {
            0
        } else if br == ar && bc + 1 == ac {
            1
        } else if bc == ac && br == ar + 1 {
            2
        } else {
            debug_assert!(bc == ac && br + 1 == ar, "not a mesh link: {link:?}");
            3
        };
        a * 4 + dir
    }
}
