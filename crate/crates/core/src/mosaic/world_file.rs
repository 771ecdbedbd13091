//! Six-line ASCII world files: `x = A col + B row + C`, `y = D col + E row + F`
//! with `(C, F)` at the center of the top-left pixel.

use std::fmt::Write as _;

use super::MosaicError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldFile {
    pub a: f64,
    pub d: f64,
    pub b: f64,
    pub e: f64,
    pub c: f64,
    pub f: f64,
}

impl WorldFile {
    /// North-up raster whose top-left pixel center sits at plane `(a0, b0)`.
    pub fn axis_aligned(gsd: f64, a0: f64, b0: f64) -> Self {
        Self {
            a: gsd,
            d: 0.0,
            b: 0.0,
            e: -gsd,
            c: a0,
            f: b0,
        }
    }

    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.a * col + self.b * row + self.c,
            self.d * col + self.e * row + self.f,
        )
    }

    pub fn world_to_pixel(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let det = self.a * self.e - self.b * self.d;
        if det == 0.0 {
            return None;
        }
        let (dx, dy) = (x - self.c, y - self.f);
        Some(((self.e * dx - self.b * dy) / det, (self.a * dy - self.d * dx) / det))
    }

    /// A, D, B, E, C, F with ten fractional digits, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in [self.a, self.d, self.b, self.e, self.c, self.f] {
            // Avoid printing "-0.0000000000".
            let v = if v == 0.0 { 0.0 } else { v };
            writeln!(out, "{v:.10}").expect("string write");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, MosaicError> {
        let values: Vec<f64> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.parse::<f64>()
                    .map_err(|_| MosaicError::WorldFile(format!("not a number: {l:?}")))
            })
            .collect::<Result<_, _>>()?;
        if values.len() != 6 {
            return Err(MosaicError::WorldFile(format!("expected 6 values, found {}", values.len())));
        }
        let wf = Self {
            a: values[0],
            d: values[1],
            b: values[2],
            e: values[3],
            c: values[4],
            f: values[5],
        };
        if wf.a * wf.e - wf.b * wf.d == 0.0 {
            return Err(MosaicError::WorldFile("singular affine".into()));
        }
        Ok(wf)
    }
}
