use crate::series::{lag_to_row, row_to_lag};

/// `{0,1}` matrix over an input window, `window` rows by `n_vars` columns,
/// rows indexed by the global lag convention (row `p` is lag `window - p`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    window: usize,
    n_vars: usize,
    cells: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(window: usize, n_vars: usize) -> Self {
        Self {
            window,
            n_vars,
            cells: vec![false; window * n_vars],
        }
    }

    pub fn from_cells(window: usize, n_vars: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), window * n_vars, "mask buffer does not fit {window}x{n_vars}");
        Self { window, n_vars, cells }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, var: usize) -> bool {
        self.cells[row * self.n_vars + var]
    }

    pub fn set(&mut self, row: usize, var: usize, on: bool) {
        self.cells[row * self.n_vars + var] = on;
    }

    /// Sets the cell for `(var, lag)`; returns false when the lag does not fit.
    pub fn set_lag(&mut self, var: usize, lag: usize) -> bool {
        match lag_to_row(lag, self.window) {
            Some(row) => {
                self.set(row, var, true);
                true
            }
            None => false,
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Flagged lags of one variable, ascending.
    pub fn lags(&self, var: usize) -> Vec<usize> {
        let mut lags: Vec<usize> = (0..self.window)
            .filter(|&row| self.get(row, var))
            .map(|row| row_to_lag(row, self.window))
            .collect();
        lags.sort_unstable();
        lags
    }

    /// `0.0` / `1.0` values, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }
}
